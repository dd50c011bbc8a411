"""Post-hoc diversity sampler: one latent draw mapped to L affine branches.

Each branch is written relative to the learned prior,

    z_l = mu_p + sigma_p * (M_l eps + c_l),   eps ~ N(0, I),

so ``A_l = diag(sigma_p) M_l`` and ``b_l = mu_p + sigma_p * c_l``.  A branch
with ``M_l = I`` and ``c_l = 0`` reproduces the prior exactly, and its KL to the
prior reduces to ``KL(N(c_l, M_l M_l^T) || N(0, I))``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import MotionSequence
from .metrics import apd
from .nn import MLP, Module, Parameter
from .optim import ParamStore, adam_step, load_checkpoint, save_checkpoint
from .tensor import Tensor
from .vae import (AinBVAE, GaussianParams, InbetweenBatch, batch_from_windows, decode_to_world,
                  windows_from_sequences)

LOGDET_FLOOR = -60.0  # per latent dimension


@dataclass
class SamplerWeights:
    w_div: float = 200.0
    w_kl_samp: float = 1.0

    def __post_init__(self):
        if self.w_div < 0 or self.w_kl_samp < 0:
            raise ValueError("sampler weights must be nonnegative")


@dataclass
class SamplerConfig:
    n_branches: int = 5
    d: int = 64
    d_z: int = 32
    offset_init: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.n_branches < 2:
            raise ValueError("the sampler needs at least two branches")


@dataclass
class BranchKL:
    value: Tensor        # (..., L)
    clamped: bool        # some log-determinant hit the floor


# -- Gaussian algebra --------------------------------------------------------------

def map_latents(eps: np.ndarray, A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """z_l = A_l eps + b_l for every branch; eps (..., d), A (L, d, d), b (L, d) -> (..., L, d)."""
    A, b = np.asarray(A, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if A.ndim != 3 or len(A) < 2:
        raise ValueError("need at least two affine branches")
    return np.einsum("lij,...j->...li", A, eps) + b


def full_vs_diag_kl(b: np.ndarray, A: np.ndarray, mu_p: np.ndarray, sigma_p: np.ndarray) -> tuple[float, bool]:
    """KL(N(b, A A^T) || N(mu_p, diag(sigma_p^2))) with a floored log-determinant."""
    sigma_p = np.asarray(sigma_p, dtype=np.float64)
    if np.any(sigma_p <= 0):
        raise ValueError("prior standard deviations must be positive")
    d = len(b)
    m = A / sigma_p[:, None]
    c = (b - mu_p) / sigma_p
    _, logdet = np.linalg.slogdet(m @ m.T)
    floor = LOGDET_FLOOR * d
    clamped = not np.isfinite(logdet) or logdet < floor
    logdet = floor if clamped else logdet
    return 0.5 * float(np.sum(m * m) + c @ c - d - logdet), bool(clamped)


def whitened_kl(M: Tensor, c: Tensor) -> BranchKL:
    """KL(N(c, M M^T) || N(0, I)) over trailing axes; M (..., d, d), c (..., d)."""
    d = c.shape[-1]
    sign, raw = np.linalg.slogdet(M.data)
    floor = LOGDET_FLOOR * d / 2.0  # on log|det M|, i.e. half of log det(M M^T)
    clamped = bool(np.any(sign == 0) or np.any(raw < floor))
    logdet = T.clip(T.logabsdet(M), floor, np.inf) if not np.any(sign == 0) else Tensor(np.full(raw.shape, floor))
    tr = T.tsum(T.tsum(M * M, axis=-1), axis=-1)
    kl = 0.5 * (tr + T.tsum(c * c, axis=-1) - d) - logdet
    return BranchKL(kl, clamped)


# -- the map -----------------------------------------------------------------------

class SamplerMap(Module):
    """Context-conditioned residual affine maps, one per branch."""

    def __init__(self, config: SamplerConfig):
        self.config = c = config
        rng = np.random.default_rng(c.seed)
        L, dz = c.n_branches, c.d_z
        self.net = MLP([3 * c.d, c.d, L * (dz * dz + dz)], rng, last_init="zeros")
        # fixed-size per-branch offsets break the symmetry between branches
        self.offsets = Parameter(rng.normal(0.0, c.offset_init, size=(L, dz)))

    def whitened(self, f_start: Tensor, f_end: Tensor, f_action: Tensor) -> tuple[Tensor, Tensor]:
        """Per-context (M, c) with shapes (B, L, d_z, d_z) and (B, L, d_z)."""
        c = self.config
        L, dz = c.n_branches, c.d_z
        h = self.net(T.concat([f_start, f_end, f_action], axis=-1))
        b = h.shape[0]
        dm = T.reshape(h[:, :L * dz * dz], (b, L, dz, dz))
        dc = T.reshape(h[:, L * dz * dz:], (b, L, dz))
        return dm + np.eye(dz), dc + self.offsets

    def branches(self, cond: dict) -> tuple[Tensor, Tensor]:
        """World-latent (A, b) for each context and branch."""
        M, cvec = self.whitened(cond["f_start"], cond["f_end"], cond["f_action"])
        prior: GaussianParams = cond["prior"]
        sig = T.expand_dims(prior.sigma, 1)
        A = T.expand_dims(sig, -1) * M
        return A, T.expand_dims(prior.mu, 1) + sig * cvec

    def latents(self, cond: dict, eps) -> Tensor:
        """(B, L, d_z) mapped latents from a single draw ``eps`` (B, d_z) per context."""
        M, cvec = self.whitened(cond["f_start"], cond["f_end"], cond["f_action"])
        prior: GaussianParams = cond["prior"]
        eps = eps if isinstance(eps, Tensor) else Tensor(eps)
        w = T.tsum(M * T.expand_dims(T.expand_dims(eps, 1), 2), axis=-1) + cvec
        return T.expand_dims(prior.mu, 1) + T.expand_dims(prior.sigma, 1) * w

    def kl(self, cond: dict) -> BranchKL:
        M, cvec = self.whitened(cond["f_start"], cond["f_end"], cond["f_action"])
        return whitened_kl(M, cvec)

    def save(self, path) -> None:
        path = Path(path)
        save_checkpoint(path, dict((k, p.data) for k, p in self.named_parameters()))
        path.with_suffix(".json").write_text(json.dumps({"kind": "sampler", "config": asdict(self.config)}, indent=1))

    @classmethod
    def load(cls, path) -> "SamplerMap":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        if meta.get("kind") != "sampler":
            raise ValueError(f"{path}: sidecar does not describe a diversity sampler")
        model = cls(SamplerConfig(**meta["config"]))
        ParamStore.from_module(model).load_state_dict(load_checkpoint(path))
        return model


# -- loss ----------------------------------------------------------------------------

def pairwise_sq(decoded: Tensor) -> Tensor:
    """(B, L, L) mean squared distance between branch outputs over all frames and features."""
    diff = T.expand_dims(decoded, 2) - T.expand_dims(decoded, 1)
    b, l = decoded.shape[:2]
    return T.tsum(T.reshape(diff * diff, (b, l, l, -1)), axis=-1) / float(decoded.shape[2])


def diversity_term(decoded: Tensor, reduce: str = "min") -> Tensor:
    """Per-context minimum (or mean) pairwise distance, averaged over contexts."""
    b, l = decoded.shape[:2]
    if l < 2:
        raise ValueError("diversity needs at least two branches")
    if reduce == "min":
        # pick the closest pair on the forward values, differentiate through that pair
        diff_np = decoded.data[:, :, None] - decoded.data[:, None, :]
        n_frames = decoded.shape[2]
        dist = np.sum(diff_np.reshape(b, l, l, -1) ** 2, axis=-1)
        dist[:, np.arange(l), np.arange(l)] = np.inf
        flat = dist.reshape(b, -1).argmin(axis=1)
        i, j = np.unravel_index(flat, (l, l))
        rows = np.arange(b)
        d = decoded[rows, i] - decoded[rows, j]
        return T.mean(T.tsum(T.reshape(d * d, (b, -1)), axis=-1)) / float(n_frames)
    if reduce == "mean":
        pw = pairwise_sq(decoded)
        return T.tsum(pw) / float(b * l * (l - 1))
    raise ValueError(f"unknown reduction {reduce!r}")


def sampler_loss(decoded: Tensor, kls: Tensor, w: SamplerWeights = SamplerWeights(), reduce: str = "min") -> Tensor:
    """-w_div * min pairwise distance + w_kl * sum of branch KLs (both averaged over contexts).

    decoded: (B, L, T_b, N) normalized in-betweenings; kls: (B, L).
    """
    kl = T.mean(T.tsum(kls, axis=-1)) if kls.ndim > 1 else T.tsum(kls)
    return -w.w_div * diversity_term(decoded, reduce) + w.w_kl_samp * kl


# -- frozen-decoder plumbing ---------------------------------------------------------

def decoder_hash(model: AinBVAE) -> str:
    h = hashlib.sha256()
    for name, p in sorted(model.named_parameters()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def tile_cond(cond: dict, L: int) -> dict:
    """Repeat every context row L times, detached (the VAE is frozen)."""
    rep = lambda t: Tensor(np.repeat(t.data, L, axis=0))
    out = {k: rep(v) for k, v in cond.items() if isinstance(v, Tensor)}
    out["prior"] = GaussianParams(rep(cond["prior"].mu), rep(cond["prior"].log_sigma))
    return out


def decode_branches(vae: AinBVAE, cond: dict, z: Tensor) -> Tensor:
    """Decode (B, L, d_z) latents -> (B, L, T_b, N)."""
    b, L, dz = z.shape
    pred = vae.decode_from(tile_cond(cond, L), T.reshape(z, (b * L, dz)))
    return T.reshape(pred, (b, L) + pred.shape[1:])


def sampler_step_loss(sampler: SamplerMap, vae: AinBVAE, batch: InbetweenBatch, eps: np.ndarray,
                      w: SamplerWeights = SamplerWeights()):
    with T.no_grad():
        cond = vae.condition(batch)
    cond = {k: (Tensor(v.data) if isinstance(v, Tensor) else v) for k, v in cond.items()}
    z = sampler.latents(cond, eps)
    decoded = decode_branches(vae, cond, z)
    kl = sampler.kl(cond)
    return sampler_loss(decoded, kl.value, w), kl


def train_sampler(sampler: SamplerMap, vae: AinBVAE, seqs: Sequence[MotionSequence], epochs: int = 30,
                  lr: float = 0.01, batch_size: int = 32, seed: int = 0, w: SamplerWeights = SamplerWeights(),
                  log: Callable[[str], None] | None = None) -> list[float]:
    if sampler.config.d_z != vae.config.d_z or sampler.config.d != vae.config.d:
        raise ValueError("sampler and VAE widths disagree")
    before = decoder_hash(vae)
    vae.freeze()
    rng = np.random.default_rng(seed)
    store = ParamStore.from_module(sampler)
    losses = []
    try:
        for epoch in range(epochs):
            wins = windows_from_sequences(seqs, vae.config, rng)
            order = rng.permutation(len(wins))
            for i in range(0, len(order), batch_size):
                batch = batch_from_windows([wins[j] for j in order[i:i + batch_size]], vae.config, vae.norm)
                eps = rng.standard_normal((len(batch), vae.config.d_z))
                loss, _ = sampler_step_loss(sampler, vae, batch, eps, w)
                loss.backward()
                adam_step(store, lr)
                losses.append(loss.item())
            if log:
                log(f"sampler epoch {epoch + 1}/{epochs} loss {np.mean(losses[-max(1, len(order) // batch_size):]):.4f}")
    finally:
        vae.unfreeze()
    if decoder_hash(vae) != before:
        raise RuntimeError("decoder parameters changed during sampler training")
    return losses


def sample_branches(sampler: SamplerMap, vae: AinBVAE, batch: InbetweenBatch, rng: np.random.Generator,
                    ) -> list[list[MotionSequence]]:
    """For every context: L world-space in-betweenings from one latent draw."""
    with T.no_grad():
        cond = vae.condition(batch)
        eps = rng.standard_normal((len(batch), vae.config.d_z))
        z = sampler.latents(cond, eps)
        decoded = decode_branches(vae, cond, z).data
    out = []
    for bi in range(len(batch)):
        sub = InbetweenBatch(batch.start[[bi]], batch.end[[bi]], None, batch.action[[bi]],
                             batch.orient_start[[bi]], batch.orient_end[[bi]], [batch.anchors[bi]])
        out.append([decode_to_world(vae, decoded[bi, [l]], sub)[0] for l in range(decoded.shape[1])])
    return out


def prior_draws(vae: AinBVAE, batch: InbetweenBatch, n: int, rng: np.random.Generator) -> list[list[MotionSequence]]:
    """n independent prior samples per context, for comparison with the sampler."""
    with T.no_grad():
        cond = vae.condition(batch)
        eps = rng.standard_normal((len(batch), n, vae.config.d_z))
        p = cond["prior"]
        z = T.expand_dims(p.mu, 1) + T.expand_dims(p.sigma, 1) * Tensor(eps)
        decoded = decode_branches(vae, cond, z).data
    out = []
    for bi in range(len(batch)):
        sub = InbetweenBatch(batch.start[[bi]], batch.end[[bi]], None, batch.action[[bi]],
                             batch.orient_start[[bi]], batch.orient_end[[bi]], [batch.anchors[bi]])
        out.append([decode_to_world(vae, decoded[bi, [l]], sub)[0] for l in range(n)])
    return out


def apd_gain(sampler: SamplerMap, vae: AinBVAE, batch: InbetweenBatch, seed: int = 0) -> np.ndarray:
    """Per-context ratio APD(sampler branches) / APD(same number of prior draws)."""
    rng = np.random.default_rng(seed)
    mapped = sample_branches(sampler, vae, batch, rng)
    prior = prior_draws(vae, batch, sampler.config.n_branches, rng)
    return np.array([apd(m) / max(apd(p), 1e-12) for m, p in zip(mapped, prior)])

