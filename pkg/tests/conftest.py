import numpy as np
import pytest

from motionbridge.data import GAIT_ACTIONS, make_split
from motionbridge.diffusion import GeneratorNet, MDMConfig, train_mdm
from motionbridge.pipeline import Models
from motionbridge.sampler import SamplerConfig, SamplerMap, train_sampler
from motionbridge.vae import AinBVAE, VAEConfig, train_vae

TINY_TB = 8


@pytest.fixture(scope="session")
def tiny_split():
    # every action, short clips: enough for plumbing tests
    return make_split(per_action=4, test_per_action=2, n_frames=40, seed=3)


@pytest.fixture(scope="session")
def gait_seqs(tiny_split):
    return [s for s in tiny_split.train if s.label < len(GAIT_ACTIONS)]


@pytest.fixture(scope="session")
def tiny_models(tiny_split, gait_seqs):
    vae = AinBVAE(VAEConfig(t_between=TINY_TB, d=16, d_z=8, heads=2, layers=1, seed=1))
    train_vae(vae, gait_seqs, epochs=2, batch_size=8, seed=1)
    gen = GeneratorNet(MDMConfig(t_frames=20, d=16, heads=2, layers=1, T=30, beta_start=1e-3,
                                 beta_end=0.3, seed=2))
    train_mdm(gen, tiny_split.train, steps=5, batch_size=8, seed=2)
    samp = SamplerMap(SamplerConfig(n_branches=3, d=16, d_z=8, offset_init=1.0, seed=4))
    train_sampler(samp, vae, gait_seqs, epochs=1, batch_size=8, seed=4)
    return Models({TINY_TB: vae}, gen, {TINY_TB: samp})


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# -- acceptance summary --------------------------------------------------------------

ACCEPTANCE: dict[int, list[tuple[str, bool, str]]] = {}


def record(criterion: int, part: str, ok: bool, detail: str) -> None:
    ACCEPTANCE.setdefault(criterion, []).append((part, bool(ok), detail))
    print(f"criterion {criterion} [{part}]: {'PASS' if ok else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[n]
        ok = all(p[1] for p in parts)
        detail = "; ".join(f"{name}: {'ok' if good else 'FAILED'} ({d})" for name, good, d in parts)
        tr.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
