"""Two-stage prediction: synthesize a target clip, then in-between from the history to it."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import ActionLabel, MotionSequence
from .diffusion import GeneratorNet, clip_to_sequence, reverse_sample_array
from .metrics import (MetricsReport, action_faithfulness, ade_min, apd, feature_stats, fid,
                      foot_skate)
from .rotations import yaw_of_quat
from .sampler import SamplerMap
from .skeleton import POINT_NAMES, forward_kinematics
from .tensor import Tensor
from .vae import AinBVAE, decode_to_world, make_batch

SEGMENT_TAGS = ("history", "transition", "target")


@dataclass
class Models:
    vaes: dict[int, AinBVAE]
    mdm: GeneratorNet
    sampler: dict[int, SamplerMap] = field(default_factory=dict)

    def vae_for(self, t_between: int) -> AinBVAE:
        if t_between not in self.vaes:
            raise ValueError(f"no in-betweening model for T_b={t_between}; available: {sorted(self.vaes)}")
        return self.vaes[t_between]


@dataclass
class PredictionRequest:
    history: MotionSequence
    future_action: ActionLabel
    inbetween_action: ActionLabel
    t_between: int = 40
    S: int = 1
    seed: int = 0
    use_sampler: bool = False

    def __post_init__(self):
        if len(self.history) < 1:
            raise ValueError("history needs at least one frame")
        if self.S < 1:
            raise ValueError("S must be >= 1")
        if isinstance(self.future_action, (int, np.integer)):
            self.future_action = ActionLabel(int(self.future_action))
        if isinstance(self.inbetween_action, (int, np.integer)):
            self.inbetween_action = ActionLabel(int(self.inbetween_action))

    def to_json(self) -> dict:
        return {"T_h": len(self.history), "future_action": self.future_action.name,
                "inbetween_action": self.inbetween_action.name, "T_b": self.t_between, "S": self.S,
                "seed": self.seed, "use_sampler": self.use_sampler}


def segment_spans(lengths: Sequence[tuple[str, int]]) -> list[dict]:
    spans, pos = [], 0
    for tag, n in lengths:
        if tag not in SEGMENT_TAGS:
            raise ValueError(f"unknown segment tag {tag!r}")
        spans.append({"tag": tag, "start": pos, "stop": pos + n})
        pos += n
    return spans


def frame_tags(seq: MotionSequence) -> list[str]:
    tags = [None] * len(seq)
    for sp in seq.meta.get("segments", []):
        for k in range(sp["start"], sp["stop"]):
            tags[k] = sp["tag"]
    return [t or "none" for t in tags]


def _context(history: MotionSequence, n: int) -> np.ndarray:
    """Last n frames; short histories repeat their first frame."""
    arr = history.to_array()[-n:]
    if len(arr) < n:
        arr = np.concatenate([np.repeat(arr[:1], n - len(arr), axis=0), arr])
    return arr


def target_anchor(history: MotionSequence, t_between: int) -> tuple[np.ndarray, float]:
    """Where the target's first frame goes: extrapolate the mean history velocity over the gap."""
    xy = history.trans[:, :2]
    vel = (xy[-1] - xy[0]) / (len(xy) - 1) if len(xy) > 1 else np.zeros(2)
    return xy[-1] + vel * (t_between + 1), float(yaw_of_quat(history.quat[-1]))


def _seeds(seed: int) -> tuple[int, int]:
    a, b = np.random.SeedSequence(seed).generate_state(2)
    return int(a), int(b)


def predict_two_stage(req: PredictionRequest, models: Models) -> list[MotionSequence]:
    """S predictions, each ``T_b + T_f`` frames with transition/target segment tags."""
    vae = models.vae_for(req.t_between)
    gen = models.mdm
    cfg = vae.config
    if req.history.n_joints * 6 + 7 != cfg.n_features:
        raise ValueError("history skeleton does not match the models")
    if req.inbetween_action.index >= cfg.n_actions:
        raise ValueError(f"in-betweening action {req.inbetween_action.name} is not one the model was trained on")
    if req.future_action.index >= gen.config.n_actions:
        raise ValueError(f"target action {req.future_action.name} is not one the generator was trained on")
    diff_seed, latent_seed = _seeds(req.seed)

    # stage 1: target clips, placed ahead of the history
    labels = np.full(req.S, req.future_action.index)
    clips = reverse_sample_array(gen.denoiser(), labels, gen.config.schedule(),
                                 (gen.config.t_frames, gen.config.n_features), gen.config.n_actions, diff_seed)
    origin, yaw = target_anchor(req.history, req.t_between)
    targets = [clip_to_sequence(gen.norm, c, req.future_action.index, origin, yaw) for c in clips]

    # stage 2: in-between from the history tail to each target head
    start = _context(req.history, cfg.t_start)
    batch = make_batch([start] * req.S, [t.to_array()[:cfg.t_end] for t in targets],
                       [req.inbetween_action.index] * req.S, cfg, vae.norm)
    rng = np.random.default_rng(latent_seed)
    with T.no_grad():
        cond = vae.condition(batch)
        eps = rng.standard_normal((req.S, cfg.d_z))
        sampler = models.sampler.get(req.t_between) if req.use_sampler else None
        if sampler is not None:
            # one shared draw; sample i takes branch i mod L
            z_all = sampler.latents(cond, np.repeat(eps[:1], req.S, axis=0)).data
            z = z_all[np.arange(req.S), np.arange(req.S) % sampler.config.n_branches]
        else:
            p = cond["prior"]
            z = p.mu.data + p.sigma.data * eps
        pred = vae.decode_from(cond, Tensor(z)).data
    transitions = decode_to_world(vae, pred, batch)

    out = []
    for i, (yb, yt) in enumerate(zip(transitions, targets)):
        seq = MotionSequence.concat([yb, yt], label=req.future_action.index, fps=req.history.fps,
                                    id=f"pred-{req.seed}-{i}")
        seq.meta = {"segments": segment_spans([("transition", len(yb)), ("target", len(yt))]),
                    "future_action": req.future_action.name, "inbetween_action": req.inbetween_action.name,
                    "sample": i, "seed": req.seed, "group": f"request-{req.seed}"}
        out.append(seq)
    return out


def long_term_rollout(history: MotionSequence, pairs: Sequence[tuple], models: Models, t_between: int = 40,
                      seed: int = 0, use_sampler: bool = False) -> MotionSequence:
    """Alternate the two stages over (future, in-between) label pairs, re-seeding from the running tail."""
    if not pairs:
        raise ValueError("need at least one (future, in-between) label pair")
    running = history
    spans = [("history", len(history))]
    t_s = models.vae_for(t_between).config.t_start
    for k, (af, ab) in enumerate(pairs):
        tail = running.slice(max(0, len(running) - t_s), len(running))
        req = PredictionRequest(tail, _label(af), _label(ab), t_between, 1, seed + k, use_sampler)
        pred = predict_two_stage(req, models)[0]
        running = MotionSequence.concat([running, pred], label=pred.label, fps=history.fps)
        spans += [("transition", t_between), ("target", len(pred) - t_between)]
    running.id = f"rollout-{seed}"
    running.meta = {"segments": segment_spans(spans), "pairs": [[_label(a).name, _label(b).name] for a, b in pairs],
                    "seed": seed}
    return running


def _label(a) -> ActionLabel:
    if isinstance(a, ActionLabel):
        return a
    return ActionLabel.from_name(a) if isinstance(a, str) else ActionLabel(int(a))


def boundary_gaps(seq: MotionSequence) -> np.ndarray:
    """L2 distance between the pose vectors on either side of each segment boundary."""
    arr = seq.to_array()
    cuts = [sp["start"] for sp in seq.meta.get("segments", [])[1:]]
    return np.array([np.linalg.norm(arr[c] - arr[c - 1]) for c in cuts])


# -- export --------------------------------------------------------------------

def _columns() -> list[str]:
    cols = ["frame", "time", "tx", "ty", "tz", "qw", "qx", "qy", "qz"]
    for name in POINT_NAMES:
        cols += [f"{name}_x", f"{name}_y", f"{name}_z"]
    return cols + ["segment"]


def export_frames(seq: MotionSequence, path, fmt: str = "jsonl") -> Path:
    path = Path(path)
    if fmt not in ("jsonl", "csv"):
        raise ValueError(f"format must be jsonl or csv, got {fmt!r}")
    pts = forward_kinematics(seq.trans, seq.quat, seq.joints)
    tags = frame_tags(seq)
    try:
        fh = open(path, "w", newline="")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    with fh:
        if fmt == "csv":
            w = csv.writer(fh)
            w.writerow(_columns())
            for k in range(len(seq)):
                row = [k, repr(k / seq.fps)] + [repr(float(v)) for v in seq.trans[k]]
                row += [repr(float(v)) for v in seq.quat[k]] + [repr(float(v)) for v in pts[k].reshape(-1)]
                w.writerow(row + [tags[k]])
        else:
            for k in range(len(seq)):
                fh.write(json.dumps({"frame": k, "time": k / seq.fps, "root_translation": seq.trans[k].tolist(),
                                     "root_quaternion": seq.quat[k].tolist(),
                                     "positions": {n: p.tolist() for n, p in zip(POINT_NAMES, pts[k])},
                                     "segment": tags[k]}) + "\n")
    return path


def read_frames_csv(path) -> tuple[np.ndarray, list[str]]:
    """Positions (T, P, 3) and segment tags from an exported CSV."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    first = header.index(f"{POINT_NAMES[0]}_x")
    pos = np.array([[float(v) for v in r[first:first + 3 * len(POINT_NAMES)]] for r in body])
    return pos.reshape(len(body), len(POINT_NAMES), 3), [r[-1] for r in body]


# -- evaluation ------------------------------------------------------------------

def target_segment(seq: MotionSequence) -> MotionSequence:
    """The synthesized target part of a prediction (the whole clip when untagged)."""
    for sp in seq.meta.get("segments", []):
        if sp["tag"] == "target":
            return seq.slice(sp["start"], sp["stop"])
    return seq


def evaluate(preds: Sequence[MotionSequence], classifier, train_ref: Sequence[MotionSequence],
             test_ref: Sequence[MotionSequence], gts: Sequence[MotionSequence] | None = None,
             label: str = "") -> MetricsReport:
    """FID/AF/ADE on target segments, APD on whole predictions grouped per request."""
    if not preds:
        raise ValueError("no predictions to evaluate")
    groups: dict[str, list[MotionSequence]] = {}
    for s in preds:
        groups.setdefault(str(s.meta.get("group", s.id or id(s))), []).append(s)
    targets = [target_segment(s) for s in preds]
    feats = feature_stats(targets, classifier) if len(targets) >= 2 else None
    fid_tr = fid(feats, feature_stats(train_ref, classifier)) if feats and len(train_ref) >= 2 else None
    fid_te = fid(feats, feature_stats(test_ref, classifier)) if feats and len(test_ref) >= 2 else None
    af = action_faithfulness(targets, classifier)
    ade_v = None
    if gts is not None:
        if len(gts) != len(groups):
            raise ValueError(f"{len(gts)} ground-truth sequences for {len(groups)} prediction groups")
        ade_v = float(np.mean([ade_min([target_segment(s).to_array() for s in g], target_segment(gt).to_array())
                               for g, gt in zip(groups.values(), gts)]))
    multi = [g for g in groups.values() if len(g) >= 2]
    apd_v = float(np.mean([apd(g) for g in multi])) if multi else None
    skate = float(np.mean([foot_skate(s) for s in preds]))
    return MetricsReport(fid_tr, fid_te, af, ade_v, apd_v, skate, max(len(g) for g in groups.values()), label)
