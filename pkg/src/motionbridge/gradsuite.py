"""Finite-difference checks for every shipped layer and composite loss at a small width."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .classifier import ActionClassifier, ClassifierConfig, N_INPUT
from .data import NormStats
from .diffusion import GeneratorNet, MDMConfig, make_schedule, mdm_loss
from .gradcheck import GradCheckReport, grad_check
from .nn import (CrossAttentionBlock, LayerNorm, Linear, MLP, MultiHeadAttention, Parameter,
                 SelfAttentionBlock, TokenEncoder, periodic_causal_mask)
from .sampler import SamplerConfig, SamplerMap, decode_branches, sampler_loss
from .vae import AinBVAE, InbetweenBatch, VAEConfig, forward_loss

WIDTH = 8


def _params(module, extra: dict | None = None) -> dict:
    out = dict(module.named_parameters())
    out.update(extra or {})
    return out


def _weighted_sum(rng, shape):
    # a random linear read-out makes every output coordinate matter
    w = rng.standard_normal(shape)
    return lambda y: T.tsum(y * w)


def _vae_case(rng, mode: str, d: int):
    cfg = VAEConfig(t_start=2, t_end=2, t_between=4, d=d, d_z=4, heads=2, layers=1, period=3,
                    n_features=13, n_actions=3, mode=mode, seed=int(rng.integers(1 << 30)))
    model = AinBVAE(cfg)
    b = 2
    six = rng.standard_normal((2, b, 6))
    batch = InbetweenBatch(rng.standard_normal((b, 2, 13)), rng.standard_normal((b, 2, 13)),
                           rng.standard_normal((b, 4, 13)), np.eye(3)[rng.integers(0, 3, b)],
                           six[0], six[1])
    eps = rng.standard_normal((b, cfg.d_z))
    return model, lambda: forward_loss(model, batch, eps)[0]


def cases(seed: int, d: int = WIDTH):
    """Yields (name, loss_fn, params) triples; each loss rebuilds its graph."""
    rng = np.random.default_rng(seed)
    x = Parameter(rng.standard_normal((2, 5, d)))
    kv = Parameter(rng.standard_normal((2, 3, d)))

    lin = Linear(d, d, rng)
    ro = _weighted_sum(rng, (2, 5, d))
    yield "Linear", lambda: ro(lin(x)), _params(lin, {"x": x})

    ln = LayerNorm(d)
    ln.gain.data[:] = rng.normal(1.0, 0.1, d)
    yield "LayerNorm", lambda: ro(ln(x)), _params(ln, {"x": x})

    mlp = MLP([d, 2 * d, d], rng)
    yield "MLP+GELU", lambda: ro(mlp(x)), _params(mlp, {"x": x})

    mha = MultiHeadAttention(d, 2, rng)
    mask = periodic_causal_mask(5, 2)
    yield "MHSA(periodic-causal)", lambda: ro(mha(x, x, mask)), _params(mha, {"x": x})
    yield "MHCA", lambda: ro(mha(x, kv)), _params(mha, {"x": x, "kv": kv})

    sab = SelfAttentionBlock(d, 2, rng)
    yield "SelfAttentionBlock", lambda: ro(sab(x, mask)), _params(sab, {"x": x})

    cab = CrossAttentionBlock(d, 2, rng)
    yield "CrossAttentionBlock", lambda: ro(cab(x, kv)), _params(cab, {"x": x, "kv": kv})

    enc = TokenEncoder(d, d, rng, layers=1, heads=2, period=3, causal=True)
    ro2 = _weighted_sum(rng, (2, d))
    yield "TokenEncoder", lambda: ro2(enc(x)), _params(enc, {"x": x})

    m = Parameter(rng.standard_normal((3, 4, 4)) + 3 * np.eye(4))
    yield "logabsdet", lambda: T.tsum(T.logabsdet(m) * np.array([1.0, -0.5, 2.0])), {"m": m}

    for mode in ("full", "no_ofe", "mhsa"):
        model, fn = _vae_case(rng, mode, d)
        yield f"ELBO[{mode}]", fn, _params(model)

    gcfg = MDMConfig(t_frames=6, d=d, heads=2, layers=1, n_actions=3, n_features=5, seed=seed)
    gen = GeneratorNet(gcfg)
    y0 = rng.standard_normal((3, 6, 5))
    labels = rng.integers(0, 3, 3)
    sched = make_schedule(50, 1e-3, 0.2)
    t = rng.integers(1, 51, 3)
    yield "diffusion loss", lambda: mdm_loss(gen, y0, labels, sched, seed, t=t), _params(gen)

    ccfg = ClassifierConfig(d=d, heads=2, layers=1, n_classes=4, seed=seed)
    clf = ActionClassifier(ccfg, NormStats(np.zeros(N_INPUT), np.ones(N_INPUT)))
    xin = rng.standard_normal((3, 6, N_INPUT))
    y = rng.integers(0, 4, 3)
    yield "classifier cross-entropy", lambda: T.cross_entropy(clf.logits(xin), y), _params(clf)

    vae, _ = _vae_case(rng, "full", d)
    samp = SamplerMap(SamplerConfig(n_branches=3, d=d, d_z=4, offset_init=0.5, seed=seed))
    # perturb the zero-initialized head so the check sees a generic point
    last = samp.net.layers[-1]
    last.weight.data[:] = rng.normal(0.0, 0.05, last.weight.shape)
    b = 2
    six = rng.standard_normal((2, b, 6))
    batch = InbetweenBatch(rng.standard_normal((b, 2, 13)), rng.standard_normal((b, 2, 13)), None,
                           np.eye(3)[rng.integers(0, 3, b)], six[0], six[1])
    with T.no_grad():
        cond = vae.condition(batch)
    eps = rng.standard_normal((b, 4))

    def samp_loss():
        z = samp.latents(cond, eps)
        return sampler_loss(decode_branches(vae, cond, z), samp.kl(cond).value)

    yield "sampler loss", samp_loss, _params(samp)


def run_suite(seed: int = 0, d: int = WIDTH, tolerance: float = 1e-3, max_entries: int = 3,
              max_params: int = 24) -> GradCheckReport:
    """One error per case; large composites probe a seed-dependent subset of their tensors."""
    report = GradCheckReport(tolerance=tolerance)
    rng = np.random.default_rng(seed + 1)
    for name, fn, params in cases(seed, d):
        sub = grad_check(fn, params, tolerance, max_entries=max_entries, rng=rng, max_params=max_params)
        report.errors[name] = sub.max_error
    return report
