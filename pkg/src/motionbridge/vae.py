"""Action-conditioned in-betweening CVAE with an orientation-warping decoder.

Windows are expressed in a canonical frame anchored at the last start-context
frame (its ground position moved to the origin, its heading rotated to +x),
then normalized per feature.  The decoder emits all ``T_b`` frames at once.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import (GAIT_ACTIONS, N_FEATURES, MotionSequence, NormStats, compute_norm_stats)
from .nn import (D_MODEL, N_HEADS, PERIOD, CrossAttentionBlock, LayerNorm, Linear, MLP, Module,
                 Parameter, SelfAttentionBlock, TokenEncoder, no_mask, periodic_pos_enc)
from .optim import ParamStore, adam_step, load_checkpoint, save_checkpoint
from .rotations import (quat_canonical, quat_mul, quat_slerp, quat_to_sixd, quat_yaw, rot_z, sixd_to_quat,
                        yaw_of_quat)
from .tensor import Tensor

LOG_SIGMA_MIN = float(np.log(1e-6))
LOG_SIGMA_MAX = float(np.log(1e6))
MODES = ("full", "no_ofe", "mhsa")


@dataclass
class VAELossWeights:
    w_mse: float = 100.0
    w_kl: float = 0.001

    def __post_init__(self):
        if self.w_mse < 0 or self.w_kl < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class VAEConfig:
    t_start: int = 5
    t_end: int = 5
    t_between: int = 20
    d: int = D_MODEL
    d_z: int = 32
    heads: int = N_HEADS
    layers: int = 2
    period: int = PERIOD
    n_actions: int = len(GAIT_ACTIONS)
    n_features: int = N_FEATURES
    mode: str = "full"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")

    @property
    def window(self) -> int:
        return self.t_start + self.t_between + self.t_end


@dataclass
class GaussianParams:
    mu: Tensor
    log_sigma: Tensor

    @property
    def sigma(self) -> Tensor:
        return T.exp(self.log_sigma)


# -- canonical frames ------------------------------------------------------------

def canonical_frame(seq: MotionSequence, index: int) -> tuple[np.ndarray, float]:
    """Ground-plane anchor and heading of frame ``index``."""
    return seq.trans[index, :2].copy(), float(yaw_of_quat(seq.quat[index]))


def to_canonical(arr: np.ndarray, origin: np.ndarray, yaw: float) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, copy=True)
    r = rot_z(-yaw)
    shifted = out[..., :3].copy()
    shifted[..., :2] -= origin
    out[..., :3] = shifted @ r.T
    out[..., 3:7] = quat_canonical(quat_mul(quat_yaw(-yaw), out[..., 3:7]))
    return out


def from_canonical(arr: np.ndarray, origin: np.ndarray, yaw: float) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, copy=True)
    r = rot_z(yaw)
    pos = out[..., :3] @ r.T
    pos[..., :2] += origin
    out[..., :3] = pos
    out[..., 3:7] = quat_canonical(quat_mul(quat_yaw(yaw), out[..., 3:7]))
    return out


@dataclass
class InbetweenBatch:
    """Normalized canonical windows; ``orient_*`` are 6-vectors of the boundary root rotations."""

    start: np.ndarray        # (B, T_s, N)
    end: np.ndarray          # (B, T_e, N)
    between: np.ndarray | None  # (B, T_b, N)
    action: np.ndarray       # (B, A) one-hot
    orient_start: np.ndarray  # (B, 6)
    orient_end: np.ndarray    # (B, 6)
    anchors: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.start)


# -- the model ------------------------------------------------------------------

class AinBVAE(Module):
    def __init__(self, config: VAEConfig, norm: NormStats | None = None):
        self.config = c = config
        rng = np.random.default_rng(c.seed)
        self.norm = norm
        n, d = c.n_features, c.d
        self.enc_start = TokenEncoder(n, d, rng, c.layers, c.heads, c.period)
        self.enc_end = TokenEncoder(n, d, rng, c.layers, c.heads, c.period)
        self.enc_between = TokenEncoder(n, d, rng, c.layers, c.heads, c.period, causal=True)
        self.enc_action = MLP([c.n_actions, d, d], rng)
        self.posterior = MLP([4 * d, d, 2 * c.d_z], rng)
        self.prior = MLP([3 * d, d, 2 * c.d_z], rng)
        self.z_proj = Linear(c.d_z, d, rng)
        self.query_embed = Parameter(rng.normal(0.0, 0.02, size=(c.t_between, d)))
        if c.mode == "full":
            self.ofe_start = MLP([6, d, d], rng)
            self.ofe_end = MLP([6, d, d], rng)
            self.offset_regressor = MLP([d, d, d], rng)
        elif c.mode == "no_ofe":
            self.offset_regressor = MLP([6, d, d], rng)
        if c.mode != "mhsa":
            self.offset_proj = Linear(d, d, rng)
            self.decoder = [CrossAttentionBlock(d, c.heads, rng) for _ in range(c.layers)]
        else:
            self.decoder = [SelfAttentionBlock(d, c.heads, rng) for _ in range(c.layers)]
        self.out_norm = LayerNorm(d)
        self.out = Linear(d, n, rng)
        self.last_decode_inputs: dict | None = None

    # -- encoders ------------------------------------------------------------
    def _check_frames(self, x: np.ndarray) -> None:
        if x.shape[-1] != self.config.n_features:
            raise ValueError(f"frame width {x.shape[-1]} does not match the model skeleton "
                             f"({self.config.n_features} features)")

    def encode_context(self, frames: np.ndarray, which: str) -> Tensor:
        self._check_frames(frames)
        enc = {"start": self.enc_start, "end": self.enc_end}[which]
        return enc(Tensor(frames))

    def encode_action(self, one_hot: np.ndarray) -> Tensor:
        one_hot = np.atleast_2d(one_hot)
        if one_hot.shape[-1] != self.config.n_actions:
            raise ValueError(f"action vector must have {self.config.n_actions} entries")
        return self.enc_action(Tensor(one_hot))

    def encode_inbetween(self, frames: np.ndarray) -> Tensor:
        self._check_frames(frames)
        return self.enc_between(Tensor(frames))

    @staticmethod
    def _gaussian(raw: Tensor, d_z: int) -> GaussianParams:
        mu = raw[:, :d_z]
        log_sigma = T.clip(raw[:, d_z:], LOG_SIGMA_MIN, LOG_SIGMA_MAX)
        return GaussianParams(mu, log_sigma)

    def posterior_params(self, f_start: Tensor, f_end: Tensor, f_between: Tensor | None,
                         f_action: Tensor) -> GaussianParams:
        if f_between is None:
            raise ValueError("the posterior needs the in-betweening embedding (training only)")
        raw = self.posterior(T.concat([f_start, f_end, f_between, f_action], axis=-1))
        return self._gaussian(raw, self.config.d_z)

    def prior_params(self, f_start: Tensor, f_end: Tensor, f_action: Tensor) -> GaussianParams:
        raw = self.prior(T.concat([f_start, f_end, f_action], axis=-1))
        return self._gaussian(raw, self.config.d_z)

    # -- orientation warping ---------------------------------------------------
    def owm_features(self, orient_start: np.ndarray, orient_end: np.ndarray):
        """Returns (F^p_s, F^p_e, regressor input, F^o); OFE outputs are None without OFEs."""
        mode = self.config.mode
        if mode == "mhsa":
            raise ValueError("the plain self-attention decoder has no orientation module")
        os_, oe = Tensor(np.atleast_2d(orient_start)), Tensor(np.atleast_2d(orient_end))
        if mode == "full":
            fps, fpe = self.ofe_start(os_), self.ofe_end(oe)
            reg_in = fpe - fps
        else:
            fps = fpe = None
            reg_in = oe - os_
        return fps, fpe, reg_in, self.offset_regressor(reg_in)

    def owm_offset(self, orient_start: np.ndarray, orient_end: np.ndarray) -> Tensor:
        return self.owm_features(orient_start, orient_end)[3]

    # -- decoder -----------------------------------------------------------
    def condition(self, batch: InbetweenBatch) -> dict:
        """Everything the decoder and the prior need, computed once per batch."""
        f_s = self.encode_context(batch.start, "start")
        f_e = self.encode_context(batch.end, "end")
        f_a = self.encode_action(batch.action)
        cond = {"f_start": f_s, "f_end": f_e, "f_action": f_a,
                "prior": self.prior_params(f_s, f_e, f_a)}
        if self.config.mode != "mhsa":
            cond["f_offset"] = self.owm_offset(batch.orient_start, batch.orient_end)
        self.last_decode_inputs = {"start": batch.start.copy(), "end": batch.end.copy()}
        return cond

    def decode_from(self, cond: dict, z: Tensor) -> Tensor:
        c = self.config
        kv = T.stack([self.z_proj(z), cond["f_action"], cond["f_start"], cond["f_end"]], axis=1)
        pooled = T.mean(kv, axis=1, keepdims=True)
        pos = periodic_pos_enc(np.arange(c.t_between), c.period, c.d)
        query = self.query_embed + pos + pooled
        if c.mode != "mhsa":
            query = query + T.expand_dims(self.offset_proj(cond["f_offset"]), 1)
            x = query
            for blk in self.decoder:
                x = blk(x, kv)
        else:
            x = T.concat([kv, query], axis=1)
            mask = no_mask(x.shape[1])
            for blk in self.decoder:
                x = blk(x, mask)
            x = x[:, 4:, :]
        return self.out(self.out_norm(x))

    def decode(self, batch: InbetweenBatch, z: Tensor | np.ndarray) -> Tensor:
        z = z if isinstance(z, Tensor) else Tensor(np.atleast_2d(z))
        return self.decode_from(self.condition(batch), z)

    # -- serialization -------------------------------------------------------
    def save(self, path) -> None:
        path = Path(path)
        save_checkpoint(path, dict((k, p.data) for k, p in self.named_parameters()))
        meta = {"kind": "ainb-vae", "config": asdict(self.config),
                "norm": self.norm.to_json() if self.norm else None}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=1))

    @classmethod
    def load(cls, path) -> "AinBVAE":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        if meta.get("kind") != "ainb-vae":
            raise ValueError(f"{path}: sidecar does not describe an in-betweening VAE")
        model = cls(VAEConfig(**meta["config"]), NormStats.from_json(meta["norm"]) if meta["norm"] else None)
        ParamStore.from_module(model).load_state_dict(load_checkpoint(path))
        return model


# -- probabilistic pieces ---------------------------------------------------------

def reparameterize(g: GaussianParams, eps) -> Tensor:
    eps = eps if isinstance(eps, Tensor) else Tensor(eps)
    return g.mu + g.sigma * eps


def kl_diag_gaussians(q: GaussianParams, p: GaussianParams) -> Tensor:
    """KL(q || p) per row, summed over latent dimensions."""
    if q.mu.shape != p.mu.shape:
        raise ValueError(f"latent shapes differ: {q.mu.shape} vs {p.mu.shape}")
    var_ratio = T.exp(2.0 * (q.log_sigma - p.log_sigma))
    diff = (q.mu - p.mu) * T.exp(-p.log_sigma)
    terms = (p.log_sigma - q.log_sigma) + 0.5 * (var_ratio + diff * diff) - 0.5
    return T.tsum(terms, axis=-1)


def kl_diag_numpy(mu_q, sigma_q, mu_p, sigma_p) -> np.ndarray:
    sigma_q, sigma_p = np.asarray(sigma_q, float), np.asarray(sigma_p, float)
    if np.any(sigma_q <= 0) or np.any(sigma_p <= 0):
        raise ValueError("standard deviations must be positive")
    return np.sum(np.log(sigma_p / sigma_q) + (sigma_q ** 2 + (np.asarray(mu_q) - mu_p) ** 2)
                  / (2 * sigma_p ** 2) - 0.5, axis=-1)


def mse(pred: Tensor, target) -> Tensor:
    diff = pred - target
    return T.mean(diff * diff)


def elbo_loss(pred: Tensor, target, q: GaussianParams, p: GaussianParams,
              w: VAELossWeights = VAELossWeights()) -> Tensor:
    return w.w_mse * mse(pred, target) + w.w_kl * T.mean(kl_diag_gaussians(q, p))


# -- data plumbing -----------------------------------------------------------------

def _orient6(quats: np.ndarray) -> np.ndarray:
    return quat_to_sixd(quats)


def make_batch(starts: Sequence[np.ndarray], ends: Sequence[np.ndarray], actions: Sequence[int],
               config: VAEConfig, norm: NormStats, betweens: Sequence[np.ndarray] | None = None,
               anchors: Sequence | None = None) -> InbetweenBatch:
    """Build a batch from raw (world-frame) feature arrays; anchors default to the last start frame."""
    s_list, e_list, b_list, os_list, oe_list, anc = [], [], [], [], [], []
    for i, (xs, xe) in enumerate(zip(starts, ends)):
        xs, xe = np.asarray(xs, dtype=np.float64), np.asarray(xe, dtype=np.float64)
        if anchors is not None:
            origin, yaw = anchors[i]
        else:
            origin, yaw = xs[-1, :2].copy(), float(yaw_of_quat(xs[-1, 3:7]))
        cs, ce = to_canonical(xs, origin, yaw), to_canonical(xe, origin, yaw)
        s_list.append(norm.apply(cs))
        e_list.append(norm.apply(ce))
        os_list.append(_orient6(cs[-1, 3:7]))
        oe_list.append(_orient6(ce[0, 3:7]))
        if betweens is not None:
            b_list.append(norm.apply(to_canonical(betweens[i], origin, yaw)))
        anc.append((origin, yaw))
    onehot = np.zeros((len(s_list), config.n_actions))
    for i, a in enumerate(actions):
        if not 0 <= int(a) < config.n_actions:
            raise ValueError(f"in-betweening action index {a} outside [0, {config.n_actions})")
        onehot[i, int(a)] = 1.0
    return InbetweenBatch(np.stack(s_list), np.stack(e_list), np.stack(b_list) if b_list else None,
                          onehot, np.stack(os_list), np.stack(oe_list), anc)


def windows_from_sequences(seqs: Sequence[MotionSequence], config: VAEConfig, rng: np.random.Generator,
                           per_sequence: int = 1):
    """Random contiguous (start, between, end) windows in world coordinates."""
    ts, tb = config.t_start, config.t_between
    out = []
    for s in seqs:
        if s.label >= config.n_actions:
            raise ValueError(f"sequence {s.id!r} has non in-betweening label {s.label}")
        if len(s) < config.window:
            continue
        arr = s.to_array()
        for _ in range(per_sequence):
            o = int(rng.integers(0, len(s) - config.window + 1))
            out.append((arr[o:o + ts], arr[o + ts:o + ts + tb], arr[o + ts + tb:o + config.window], s.label))
    return out


def canonical_window_stats(seqs: Sequence[MotionSequence], config: VAEConfig, seed: int = 0) -> NormStats:
    """Per-feature normalization over canonicalized training windows."""
    rng = np.random.default_rng(seed)
    pieces = []
    for xs, yb, xe, _ in windows_from_sequences(seqs, config, rng, per_sequence=4):
        origin, yaw = xs[-1, :2], float(yaw_of_quat(xs[-1, 3:7]))
        full = np.concatenate([xs, yb, xe])
        pieces.append(MotionSequence.from_array(to_canonical(full, origin, yaw), renormalize=False))
    return compute_norm_stats(pieces)


def batch_from_windows(windows, config: VAEConfig, norm: NormStats) -> InbetweenBatch:
    return make_batch([w[0] for w in windows], [w[2] for w in windows], [w[3] for w in windows],
                      config, norm, betweens=[w[1] for w in windows])


# -- training and sampling ---------------------------------------------------------

def forward_loss(model: AinBVAE, batch: InbetweenBatch, eps: np.ndarray,
                 weights: VAELossWeights = VAELossWeights()):
    """Posterior path: encode, reparameterize, decode; returns (loss, mse, kl)."""
    cond = model.condition(batch)
    f_b = model.encode_inbetween(batch.between)
    q = model.posterior_params(cond["f_start"], cond["f_end"], f_b, cond["f_action"])
    z = reparameterize(q, eps)
    pred = model.decode_from(cond, z)
    rec = mse(pred, batch.between)
    kl = T.mean(kl_diag_gaussians(q, cond["prior"]))
    loss = weights.w_mse * rec + weights.w_kl * kl
    return loss, rec, kl


def train_step(model: AinBVAE, store: ParamStore, batch: InbetweenBatch, rng: np.random.Generator,
               lr: float = 1e-3, weights: VAELossWeights = VAELossWeights()) -> float:
    if len(batch) == 0:
        raise ValueError("empty batch")
    eps = rng.standard_normal((len(batch), model.config.d_z))
    try:
        loss, _, _ = forward_loss(model, batch, eps, weights)
    except FloatingPointError as exc:
        raise RuntimeError(f"in-betweening VAE produced a non-finite value at step {store.step}: {exc}") from exc
    loss.backward()
    adam_step(store, lr)
    return loss.item()


def reconstruction_mse(model: AinBVAE, batch: InbetweenBatch, seed: int = 0) -> float:
    """Posterior-path reconstruction MSE in normalized space (no parameter update)."""
    with T.no_grad():
        eps = np.random.default_rng(seed).standard_normal((len(batch), model.config.d_z))
        _, rec, _ = forward_loss(model, batch, eps)
    return rec.item()


def train_vae(model: AinBVAE, seqs: Sequence[MotionSequence], epochs: int = 500, batch_size: int = 32,
              lr: float = 1e-3, seed: int = 0, weights: VAELossWeights = VAELossWeights(),
              log: Callable[[str], None] | None = None) -> list[float]:
    rng = np.random.default_rng(seed)
    if model.norm is None:
        model.norm = canonical_window_stats(seqs, model.config, seed)
    store = ParamStore.from_module(model)
    losses = []
    for epoch in range(epochs):
        wins = windows_from_sequences(seqs, model.config, rng)
        order = rng.permutation(len(wins))
        for i in range(0, len(order), batch_size):
            chunk = [wins[j] for j in order[i:i + batch_size]]
            losses.append(train_step(model, store, batch_from_windows(chunk, model.config, model.norm),
                                     rng, lr, weights))
        if log:
            log(f"vae epoch {epoch + 1}/{epochs} loss {np.mean(losses[-max(1, len(order) // batch_size):]):.4f}")
    return losses


def decode_to_world(model: AinBVAE, pred: np.ndarray, batch: InbetweenBatch, labels=None) -> list[MotionSequence]:
    out = []
    for i in range(len(pred)):
        origin, yaw = batch.anchors[i]
        arr = from_canonical(model.norm.invert(pred[i]), origin, yaw)
        lab = int(np.argmax(batch.action[i])) if labels is None else int(labels[i])
        out.append(MotionSequence.from_array(arr, label=lab))
    return out


def sample_batch(model: AinBVAE, batch: InbetweenBatch, rng: np.random.Generator,
                 z: np.ndarray | None = None) -> list[MotionSequence]:
    """Prior sampling for every row of ``batch``."""
    with T.no_grad():
        cond = model.condition(batch)
        if z is None:
            eps = rng.standard_normal((len(batch), model.config.d_z))
            z = reparameterize(cond["prior"], eps)
        pred = model.decode_from(cond, z if isinstance(z, Tensor) else Tensor(z))
    return decode_to_world(model, pred.data, batch)


def sample_inbetween(model: AinBVAE, start: MotionSequence, end: MotionSequence, action: int,
                     seed: int) -> MotionSequence:
    if len(start) != model.config.t_start or len(end) != model.config.t_end:
        raise ValueError(f"context lengths must be ({model.config.t_start}, {model.config.t_end})")
    batch = make_batch([start.to_array()], [end.to_array()], [action], model.config, model.norm)
    return sample_batch(model, batch, np.random.default_rng(seed))[0]


def decode_inbetween(model: AinBVAE, start: MotionSequence, end: MotionSequence, action: int,
                     z: np.ndarray, t_between: int | None = None) -> MotionSequence:
    if t_between is not None and t_between != model.config.t_between:
        raise ValueError(f"model was trained for T_b={model.config.t_between}, not {t_between}")
    batch = make_batch([start.to_array()], [end.to_array()], [action], model.config, model.norm)
    with T.no_grad():
        pred = model.decode(batch, np.atleast_2d(z))
    return decode_to_world(model, pred.data, batch)[0]


def interpolate_inbetween(start: MotionSequence, end: MotionSequence, t_between: int) -> MotionSequence:
    """Non-learned baseline: lerp the root position, slerp every rotation.

    Interpolates from the last start frame to the first end frame; neither
    boundary frame is repeated in the output.
    """
    if t_between < 1:
        raise ValueError("t_between must be positive")
    s = np.arange(1, t_between + 1) / (t_between + 1)
    trans = (1 - s[:, None]) * start.trans[-1] + s[:, None] * end.trans[0]
    quat = quat_canonical(quat_slerp(start.quat[-1], end.quat[0], s))
    qa, qb = sixd_to_quat(start.joints[-1]), sixd_to_quat(end.joints[0])
    joints = quat_to_sixd(quat_slerp(qa[None], qb[None], s[:, None]))
    return MotionSequence(trans, quat, joints, label=end.label, fps=start.fps)
