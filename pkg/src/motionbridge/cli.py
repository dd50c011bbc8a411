"""Command-line entry points: data generation, training, sampling, evaluation, gradient checks."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .classifier import ActionClassifier, ClassifierConfig, accuracy, train_classifier
from .config import ConfigError, RunConfig
from .data import (ACTIONS, GAIT_ACTIONS, ActionLabel, DataFormatError, MotionSequence, load_dataset,
                   make_split, read_sequences, save_dataset, synth_generate, write_sequences)
from .diffusion import GeneratorNet, MDMConfig, train_mdm
from .gradsuite import run_suite
from .optim import CheckpointError
from .pipeline import (Models, PredictionRequest, evaluate, export_frames, long_term_rollout,
                       predict_two_stage, segment_spans)
from .sampler import SamplerConfig, SamplerMap, SamplerWeights, train_sampler
from .vae import (AinBVAE, VAEConfig, VAELossWeights, make_batch, sample_batch,
                  train_vae)


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _gait(seqs):
    return [s for s in seqs if s.label < len(GAIT_ACTIONS)]


def _t_betweens(cfg: RunConfig, override: int | None) -> list[int]:
    tbs = cfg["vae"]["t_between"]
    tbs = [tbs] if isinstance(tbs, int) else list(tbs)
    return [override] if override is not None else tbs


def _vae_config(cfg: RunConfig, t_between: int, seed: int, mode: str | None = None) -> VAEConfig:
    v = cfg["vae"]
    return VAEConfig(t_start=v["t_start"], t_end=v["t_end"], t_between=t_between, d=v["d"], d_z=v["d_z"],
                     heads=v["heads"], layers=v["layers"], mode=mode or v["mode"], seed=seed)


def load_models(cfg: RunConfig, t_betweens, need_sampler: bool = False) -> Models:
    vaes, samplers = {}, {}
    for tb in t_betweens:
        path = cfg.checkpoint("vae", tb)
        if path.exists():
            vaes[tb] = AinBVAE.load(path)
            sp = cfg.checkpoint("sampler", tb)
            if sp.exists():
                samplers[tb] = SamplerMap.load(sp)
            elif need_sampler:
                raise FileNotFoundError(f"sampler checkpoint {sp} is missing (run train-sampler)")
    if not vaes:
        raise FileNotFoundError(f"no in-betweening checkpoints found for T_b in {list(t_betweens)} (run train-vae)")
    mdm = cfg.checkpoint("mdm")
    if not mdm.exists():
        raise FileNotFoundError(f"diffusion checkpoint {mdm} is missing (run train-mdm)")
    return Models(vaes, GeneratorNet.load(mdm), samplers)


def _history(cfg: RunConfig, path: str | None, seed: int) -> MotionSequence:
    p = cfg["predict"]
    src = path or p["history"]
    if src:
        seqs = read_sequences(src)
        if not seqs:
            raise DataFormatError(f"{src}: no sequences")
        return seqs[0]
    return synth_generate(p["history_action"], p["history_frames"], p["history_turn"], seed, seq_id="history")


# -- subcommands -------------------------------------------------------------------

def cmd_gen_data(args, cfg: RunConfig) -> int:
    d = dict(cfg["data"])
    for key in ("actions", "per_action", "n_frames", "turn_range"):
        if getattr(args, key) is not None:
            d[key] = getattr(args, key)
    split = make_split(d["actions"], d["per_action"], d["test_per_action"], d["n_frames"], d["turn_range"], args.seed)
    out = Path(args.out) if args.out else cfg.dataset
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(split, out)
    _log(f"wrote {len(split.train)} train / {len(split.test)} test sequences to {out}")
    return 0


def cmd_train_vae(args, cfg: RunConfig) -> int:
    split = load_dataset(cfg.dataset)
    v = cfg["vae"]
    for tb in _t_betweens(cfg, args.t_between):
        model = AinBVAE(_vae_config(cfg, tb, args.seed, args.mode))
        train_vae(model, _gait(split.train), epochs=args.epochs or v["epochs"], batch_size=v["batch_size"],
                  lr=v["lr"], seed=args.seed, weights=VAELossWeights(v["w_mse"], v["w_kl"]), log=_log)
        path = Path(args.out) if args.out else cfg.checkpoint("vae", tb)
        path.parent.mkdir(parents=True, exist_ok=True)
        model.save(path)
        _log(f"saved {path}")
    return 0


def cmd_train_mdm(args, cfg: RunConfig) -> int:
    split = load_dataset(cfg.dataset)
    m = cfg["mdm"]
    gen = GeneratorNet(MDMConfig(t_frames=m["t_frames"], d=m["d"], heads=m["heads"], layers=m["layers"],
                                 T=m["T"], beta_start=m["beta_start"], beta_end=m["beta_end"], seed=args.seed))
    train_mdm(gen, split.train, steps=args.steps or m["steps"], batch_size=m["batch_size"], lr=m["lr"],
              seed=args.seed, log=_log)
    path = cfg.checkpoint("mdm")
    path.parent.mkdir(parents=True, exist_ok=True)
    gen.save(path)
    _log(f"saved {path}")
    return 0


def cmd_train_sampler(args, cfg: RunConfig) -> int:
    split = load_dataset(cfg.dataset)
    s = cfg["sampler"]
    for tb in _t_betweens(cfg, args.t_between):
        vae = AinBVAE.load(cfg.checkpoint("vae", tb))
        samp = SamplerMap(SamplerConfig(n_branches=s["n_branches"], d=vae.config.d, d_z=vae.config.d_z,
                                        seed=args.seed))
        train_sampler(samp, vae, _gait(split.train), epochs=args.epochs or s["epochs"], lr=s["lr"],
                      batch_size=s["batch_size"], seed=args.seed,
                      w=SamplerWeights(s["w_div"], s["w_kl_samp"]), log=_log)
        path = cfg.checkpoint("sampler", tb)
        samp.save(path)
        _log(f"saved {path}")
    return 0


def cmd_train_classifier(args, cfg: RunConfig) -> int:
    split = load_dataset(cfg.dataset)
    c = cfg["classifier"]
    model = train_classifier(split.train, epochs=args.epochs or c["epochs"], lr=c["lr"], batch_size=c["batch_size"],
                             seed=args.seed, config=ClassifierConfig(d=c["d"], layers=c["layers"], seed=args.seed),
                             log=_log)
    path = cfg.checkpoint("classifier")
    path.parent.mkdir(parents=True, exist_ok=True)
    model.save(path)
    print(json.dumps({"test_accuracy": accuracy(model, split.test)}))
    return 0


def cmd_inbetween(args, cfg: RunConfig) -> int:
    """Fill the middle of each input sequence: its first T_s and last T_e frames are the contexts."""
    tb = args.t_between or _t_betweens(cfg, None)[0]
    vae = AinBVAE.load(cfg.checkpoint("vae", tb))
    c = vae.config
    seqs = read_sequences(args.input)
    action = ActionLabel.from_name(args.action).index if args.action else None
    out = []
    for k, s in enumerate(seqs):
        if len(s) < c.t_start + c.t_end:
            raise ValueError(f"sequence {s.id!r} is shorter than the two contexts")
        a = action if action is not None else s.label
        starts, ends = s.to_array()[:c.t_start], s.to_array()[-c.t_end:]
        batch = make_batch([starts] * args.S, [ends] * args.S, [a] * args.S, c, vae.norm)
        for i, mid in enumerate(sample_batch(vae, batch, np.random.default_rng([args.seed, k]))):
            full = MotionSequence.concat([s.slice(0, c.t_start), mid, s.slice(len(s) - c.t_end, len(s))],
                                         label=a, fps=s.fps, id=f"{s.id}-inb{i}")
            full.meta = {"segments": segment_spans([("history", c.t_start), ("transition", tb),
                                                    ("target", c.t_end)]), "group": s.id or str(k)}
            out.append(full)
    write_sequences(args.out, out)
    _log(f"wrote {len(out)} in-betweenings to {args.out}")
    return 0


def _write_outputs(out_dir: Path, seqs, fmt: str | None, manifest: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    files = []
    for i, s in enumerate(seqs):
        p = out_dir / f"{s.id or f'seq{i}'}.jsonl"
        write_sequences(p, [s])
        entry = {"sequence": str(p)}
        if fmt:
            entry["frames"] = str(export_frames(s, p.with_suffix(f".frames.{fmt}"), fmt))
        files.append(entry)
    manifest["files"] = files
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1))


def cmd_predict(args, cfg: RunConfig) -> int:
    p = cfg["predict"]
    tb = args.t_between or p["T_b"]
    models = load_models(cfg, [tb], need_sampler=args.use_sampler or p["use_sampler"])
    req = PredictionRequest(_history(cfg, args.history, args.seed),
                            ActionLabel.from_name(args.future or p["future_action"]),
                            ActionLabel.from_name(args.inbetween or p["inbetween_action"]),
                            tb, args.S or p["S"], args.seed, args.use_sampler or p["use_sampler"])
    preds = predict_two_stage(req, models)
    manifest = {"request": req.to_json(), "seeds": {"request": args.seed}, "config": cfg.to_json()}
    _write_outputs(Path(args.out_dir), preds, args.format, manifest)
    _log(f"wrote {len(preds)} predictions to {args.out_dir}")
    return 0


def _parse_pairs(text: str | None, default) -> list[tuple[str, str]]:
    if not text:
        return [tuple(p) for p in default]
    pairs = []
    for item in text.split(","):
        f, _, b = item.partition(":")
        if not b:
            raise ValueError(f"label pair {item!r} must look like FUTURE:INBETWEEN")
        pairs.append((f.strip(), b.strip()))
    return pairs


def cmd_rollout(args, cfg: RunConfig) -> int:
    tb = args.t_between or cfg["predict"]["T_b"]
    models = load_models(cfg, [tb], need_sampler=args.use_sampler)
    pairs = _parse_pairs(args.pairs, cfg["rollout"]["pairs"])
    seq = long_term_rollout(_history(cfg, args.history, args.seed), pairs, models, tb, args.seed, args.use_sampler)
    manifest = {"request": {"pairs": [list(p) for p in pairs], "T_b": tb, "use_sampler": args.use_sampler},
                "seeds": {"request": args.seed}, "config": cfg.to_json()}
    _write_outputs(Path(args.out_dir), [seq], args.format, manifest)
    _log(f"wrote a {len(seq)}-frame rollout to {args.out_dir}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    split = load_dataset(cfg.dataset)
    clf = ActionClassifier.load(cfg.checkpoint("classifier"))
    preds = []
    for path in args.pred:
        preds += read_sequences(path)
    if args.split:
        preds = [s for s in preds if s.meta.get("split") == args.split]
    gts = None
    if args.gt:
        gts = read_sequences(args.gt)
        if args.split:
            gts = [s for s in gts if s.meta.get("split") == args.split]
    report = evaluate(preds, clf, split.train, split.test, gts, label=args.label or "")
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def cmd_grad_check(args, cfg: RunConfig) -> int:
    ok = True
    for s in range(args.seed, args.seed + args.seeds):
        report = run_suite(s, tolerance=args.tolerance)
        for line in report.lines():
            print(f"seed {s}: {line}")
        ok &= report.passed
    print("gradient check " + ("passed" if ok else "FAILED"))
    return 0 if ok else 1


# -- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration merged over the defaults")
    common.add_argument("--seed", type=int, default=None, help="overrides the config seed")

    ap = argparse.ArgumentParser(prog="motionbridge", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate the synthetic motion dataset")
    p.add_argument("--actions", type=lambda s: [a.strip() for a in s.split(",")], help="comma-separated names")
    p.add_argument("--per-action", type=int)
    p.add_argument("--frames", dest="n_frames", type=int)
    p.add_argument("--turn-range", type=float)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train-vae", parents=[common], help="train in-betweening models")
    p.add_argument("--t-between", type=int)
    p.add_argument("--mode", choices=("full", "no_ofe", "mhsa"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_train_vae)

    p = sub.add_parser("train-mdm", parents=[common], help="train the target-motion diffusion model")
    p.add_argument("--steps", type=int)
    p.set_defaults(fn=cmd_train_mdm)

    p = sub.add_parser("train-sampler", parents=[common], help="train the diversity sampler on a frozen decoder")
    p.add_argument("--t-between", type=int)
    p.add_argument("--epochs", type=int)
    p.set_defaults(fn=cmd_train_sampler)

    p = sub.add_parser("train-classifier", parents=[common], help="train the evaluation classifier")
    p.add_argument("--epochs", type=int)
    p.set_defaults(fn=cmd_train_classifier)

    p = sub.add_parser("inbetween", parents=[common], help="in-between the ends of given sequences")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--action", choices=GAIT_ACTIONS)
    p.add_argument("--t-between", type=int)
    p.add_argument("--S", type=int, default=1)
    p.set_defaults(fn=cmd_inbetween)

    for name, fn, help_ in (("predict", cmd_predict, "two-stage action-driven prediction"),
                            ("rollout", cmd_rollout, "long-term rollout over label pairs")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--history", help="JSONL sequence file; default is a generated clip")
        p.add_argument("--t-between", type=int)
        p.add_argument("--use-sampler", action="store_true")
        p.add_argument("--out-dir", required=True)
        p.add_argument("--format", choices=("jsonl", "csv"), help="also export per-frame joint positions")
        p.set_defaults(fn=fn)
        if name == "predict":
            p.add_argument("--future", choices=ACTIONS)
            p.add_argument("--inbetween", choices=GAIT_ACTIONS)
            p.add_argument("--S", type=int)
        else:
            p.add_argument("--pairs", help="comma-separated FUTURE:INBETWEEN pairs")

    p = sub.add_parser("eval", parents=[common], help="metrics for predicted sequences")
    p.add_argument("--pred", required=True, action="append")
    p.add_argument("--gt")
    p.add_argument("--split", choices=("train", "test"), help="keep only records of this split")
    p.add_argument("--label")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.set_defaults(fn=cmd_grad_check)
    return ap


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = RunConfig.load(args.config)
        if args.seed is None:
            args.seed = int(cfg["seed"])
        return args.fn(args, cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, RuntimeError, CheckpointError, DataFormatError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli())
