"""Action-conditioned motion diffusion with a clean-sample-predicting generator.

Target clips are expressed in the frame of their first pose (ground position at
the origin, heading along +x) and normalized per feature, so a sample can be
placed anywhere by the pipeline.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import ACTIONS, N_FEATURES, MotionSequence, NormStats, compute_norm_stats
from .nn import D_MODEL, N_HEADS, LayerNorm, Linear, MLP, Module, SelfAttentionBlock, no_mask, sinusoid_enc
from .optim import ParamStore, adam_step, load_checkpoint, save_checkpoint
from .rotations import yaw_of_quat
from .tensor import Tensor
from .vae import from_canonical, to_canonical

# a callable (y_t, t, one_hot) -> predicted clean sample, all numpy
Denoiser = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def ab(self, t) -> np.ndarray:
        """alpha_bar at step t with the convention alpha_bar_0 = 1."""
        t = np.asarray(t)
        return np.where(t > 0, self.alpha_bar[np.maximum(t, 1) - 1], 1.0)

    def to_json(self) -> dict:
        return {"T": self.T, "beta_start": float(self.beta[0]), "beta_end": float(self.beta[-1])}


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    beta = np.linspace(beta_start, beta_end, T)
    alpha = 1.0 - beta
    return NoiseSchedule(T, beta, alpha, np.cumprod(alpha))


@dataclass
class DiffusionSample:
    y_t: np.ndarray
    t: int
    noise: np.ndarray


def diffuse_to_t(y0: np.ndarray, t: int, schedule: NoiseSchedule, eps: np.ndarray) -> DiffusionSample:
    """Closed-form marginal of t composed noising steps."""
    if not 1 <= t <= schedule.T:
        raise ValueError(f"t must lie in [1, {schedule.T}]")
    ab = schedule.alpha_bar[t - 1]
    return DiffusionSample(np.sqrt(ab) * y0 + np.sqrt(1.0 - ab) * eps, t, eps)


def noise_step(y_prev: np.ndarray, t: int, schedule: NoiseSchedule, eps: np.ndarray) -> np.ndarray:
    """One Markov noising step from t-1 to t."""
    a = schedule.alpha[t - 1]
    return np.sqrt(a) * y_prev + np.sqrt(1.0 - a) * eps


def posterior_coefficients(schedule: NoiseSchedule, t: int) -> tuple[float, float, float]:
    """(coef on x0, coef on y_t, variance) of q(y_{t-1} | y_t, x0)."""
    beta = schedule.beta[t - 1]
    ab_t = schedule.alpha_bar[t - 1]
    ab_prev = float(schedule.ab(t - 1))
    c0 = np.sqrt(ab_prev) * beta / (1.0 - ab_t)
    ct = np.sqrt(schedule.alpha[t - 1]) * (1.0 - ab_prev) / (1.0 - ab_t)
    var = beta * (1.0 - ab_prev) / (1.0 - ab_t)
    return float(c0), float(ct), float(var)


# -- generator --------------------------------------------------------------------

@dataclass
class MDMConfig:
    t_frames: int = 60
    d: int = D_MODEL
    heads: int = N_HEADS
    layers: int = 2
    n_actions: int = len(ACTIONS)
    n_features: int = N_FEATURES
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    seed: int = 0

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.T, self.beta_start, self.beta_end)


class GeneratorNet(Module):
    """Self-attention over frame tokens plus a timestep token and an action token."""

    def __init__(self, config: MDMConfig, norm: NormStats | None = None):
        self.config = c = config
        rng = np.random.default_rng(c.seed)
        self.norm = norm
        self.inp = Linear(c.n_features, c.d, rng)
        self.time_mlp = MLP([c.d, c.d, c.d], rng)
        self.action_emb = Linear(c.n_actions, c.d, rng)
        self.blocks = [SelfAttentionBlock(c.d, c.heads, rng) for _ in range(c.layers)]
        self.out_norm = LayerNorm(c.d)
        self.out = Linear(c.d, c.n_features, rng, init="small")

    def forward(self, y_t, t, one_hot) -> Tensor:
        c = self.config
        y_t = y_t if isinstance(y_t, Tensor) else Tensor(y_t)
        b, n, f = y_t.shape
        if f != c.n_features:
            raise T.ShapeError(f"generator expects {c.n_features} features, got {f}")
        t = np.broadcast_to(np.asarray(t), (b,))
        frames = self.inp(y_t) + sinusoid_enc(np.arange(n), c.d)
        t_tok = self.time_mlp(Tensor(sinusoid_enc(t, c.d)))
        a_tok = self.action_emb(Tensor(np.asarray(one_hot, dtype=np.float64)))
        x = T.concat([T.expand_dims(t_tok, 1), T.expand_dims(a_tok, 1), frames], axis=1)
        mask = no_mask(n + 2)
        for blk in self.blocks:
            x = blk(x, mask)
        return self.out(self.out_norm(x[:, 2:, :]))

    def denoiser(self) -> Denoiser:
        def fn(y_t, t, one_hot):
            with T.no_grad():
                return self.forward(y_t, t, one_hot).data
        return fn

    def save(self, path) -> None:
        path = Path(path)
        save_checkpoint(path, dict((k, p.data) for k, p in self.named_parameters()))
        meta = {"kind": "mdm", "config": asdict(self.config), "actions": list(ACTIONS[:self.config.n_actions]),
                "norm": self.norm.to_json() if self.norm else None}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=1))

    @classmethod
    def load(cls, path) -> "GeneratorNet":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        if meta.get("kind") != "mdm":
            raise ValueError(f"{path}: sidecar does not describe a diffusion generator")
        model = cls(MDMConfig(**meta["config"]), NormStats.from_json(meta["norm"]) if meta["norm"] else None)
        ParamStore.from_module(model).load_state_dict(load_checkpoint(path))
        return model


def one_hot(labels, n: int) -> np.ndarray:
    labels = np.atleast_1d(np.asarray(labels, dtype=int))
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise ValueError(f"action labels must lie in [0, {n})")
    out = np.zeros((len(labels), n))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def mdm_loss(gen, y0: np.ndarray, labels, schedule: NoiseSchedule, seed: int | np.random.Generator = 0,
             t: np.ndarray | None = None) -> Tensor:
    """Mean squared error between the predicted and true clean clip at random noise levels.

    ``gen`` is a GeneratorNet or any callable returning a Tensor or array.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    y0 = np.asarray(y0, dtype=np.float64)
    b = len(y0)
    if t is None:
        t = rng.integers(1, schedule.T + 1, size=b)
    eps = rng.standard_normal(y0.shape)
    ab = schedule.ab(t).reshape(b, *([1] * (y0.ndim - 1)))
    y_t = np.sqrt(ab) * y0 + np.sqrt(1.0 - ab) * eps
    n_act = gen.config.n_actions if hasattr(gen, "config") else int(np.max(labels)) + 1
    pred = gen(y_t, t, one_hot(labels, n_act))
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    diff = pred - y0
    loss = T.mean(diff * diff)
    if not np.isfinite(loss.data):
        raise FloatingPointError("diffusion loss is not finite")
    return loss


def reverse_sample_array(denoise: Denoiser, labels, schedule: NoiseSchedule, shape: tuple[int, int],
                         n_actions: int, seed: int) -> np.ndarray:
    """Ancestral sampling from pure noise; returns normalized clips of shape (B, *shape)."""
    rng = np.random.default_rng(seed)
    labels = np.atleast_1d(labels)
    oh = one_hot(labels, n_actions)
    y = rng.standard_normal((len(labels), *shape))
    for t in range(schedule.T, 0, -1):
        x0 = denoise(y, np.full(len(labels), t), oh)
        c0, ct, var = posterior_coefficients(schedule, t)
        y = c0 * x0 + ct * y
        if t > 1:
            y = y + np.sqrt(var) * rng.standard_normal(y.shape)
    return y


def clip_to_sequence(norm: NormStats, arr: np.ndarray, label: int, origin=(0.0, 0.0), yaw: float = 0.0,
                     **kw) -> MotionSequence:
    world = from_canonical(norm.invert(arr), np.asarray(origin, dtype=np.float64), yaw)
    return MotionSequence.from_array(world, label=int(label), **kw)


def reverse_sample(gen: GeneratorNet, action, seed: int, n: int = 1,
                   schedule: NoiseSchedule | None = None) -> list[MotionSequence]:
    schedule = schedule or gen.config.schedule()
    labels = np.full(n, int(action)) if np.ndim(action) == 0 else np.asarray(action)
    arr = reverse_sample_array(gen.denoiser(), labels, schedule, (gen.config.t_frames, gen.config.n_features),
                               gen.config.n_actions, seed)
    return [clip_to_sequence(gen.norm, a, lab, id=f"mdm-{seed}-{i}") for i, (a, lab) in enumerate(zip(arr, labels))]


# -- data and training ---------------------------------------------------------

def canonical_clips(seqs: Sequence[MotionSequence], t_frames: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Random crops of length ``t_frames`` re-anchored at their first frame; returns (clips, labels)."""
    clips, labels = [], []
    for s in seqs:
        if len(s) < t_frames:
            raise ValueError(f"sequence {s.id!r} is shorter than T_f={t_frames}")
        o = int(rng.integers(0, len(s) - t_frames + 1))
        arr = s.to_array()[o:o + t_frames]
        clips.append(to_canonical(arr, arr[0, :2].copy(), float(yaw_of_quat(arr[0, 3:7]))))
        labels.append(s.label)
    return np.stack(clips), np.array(labels)


def clip_stats(seqs: Sequence[MotionSequence], t_frames: int, seed: int = 0) -> NormStats:
    clips, _ = canonical_clips(seqs, t_frames, np.random.default_rng(seed))
    return compute_norm_stats([MotionSequence.from_array(c, renormalize=False) for c in clips])


def train_mdm(gen: GeneratorNet, seqs: Sequence[MotionSequence], steps: int = 2000, batch_size: int = 32,
              lr: float = 1e-3, seed: int = 0, log: Callable[[str], None] | None = None) -> list[float]:
    c = gen.config
    if gen.norm is None:
        gen.norm = clip_stats(seqs, c.t_frames, seed)
    schedule = c.schedule()
    store = ParamStore.from_module(gen)
    rng = np.random.default_rng(seed)
    losses = []
    for step in range(steps):
        idx = rng.choice(len(seqs), size=min(batch_size, len(seqs)), replace=False)
        clips, labels = canonical_clips([seqs[i] for i in idx], c.t_frames, rng)
        try:
            loss = mdm_loss(gen, gen.norm.apply(clips), labels, schedule, rng)
        except FloatingPointError as exc:
            raise RuntimeError(f"diffusion training diverged at step {step}: {exc}") from exc
        loss.backward()
        adam_step(store, lr)
        losses.append(loss.item())
        if log and (step + 1) % 100 == 0:
            log(f"mdm step {step + 1}/{steps} loss {np.mean(losses[-100:]):.4f}")
    return losses
