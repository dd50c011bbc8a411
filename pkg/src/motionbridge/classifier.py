"""Small action-recognition network supplying FID features and AF predictions."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import ACTIONS, MotionSequence, NormStats
from .nn import Linear, Module, TokenEncoder
from .optim import ParamStore, adam_step, load_checkpoint, save_checkpoint
from .rotations import rot_z, yaw_of_quat
from .tensor import Tensor

N_INPUT = 5 + 48


@dataclass
class ClassifierConfig:
    d: int = 32
    heads: int = 4
    layers: int = 2
    n_classes: int = len(ACTIONS)
    min_crop: int = 20
    seed: int = 0


def motion_features(seq: MotionSequence) -> np.ndarray:
    """Per-frame, heading-invariant inputs: local root velocity, height, yaw rate, joints."""
    yaw = np.unwrap(yaw_of_quat(seq.quat))
    vel = np.gradient(seq.trans, axis=0) * seq.fps if len(seq) > 1 else np.zeros_like(seq.trans)
    local = np.einsum("tji,tj->ti", rot_z(yaw), vel)
    yaw_rate = np.gradient(yaw) * seq.fps if len(seq) > 1 else np.zeros(len(seq))
    return np.concatenate([local, seq.trans[:, 2:3], yaw_rate[:, None],
                           seq.joints.reshape(len(seq), -1)], axis=1)


class ActionClassifier(Module):
    def __init__(self, config: ClassifierConfig, norm: NormStats | None = None):
        self.config = c = config
        rng = np.random.default_rng(c.seed)
        self.norm = norm
        self.encoder = TokenEncoder(N_INPUT, c.d, rng, c.layers, c.heads, period=10_000)
        self.head = Linear(c.d, c.n_classes, rng)

    @property
    def n_classes(self) -> int:
        return self.config.n_classes

    @property
    def feature_dim(self) -> int:
        return self.config.d

    def _inputs(self, seqs: Sequence[MotionSequence]) -> np.ndarray:
        lengths = {len(s) for s in seqs}
        if len(lengths) != 1:
            raise ValueError("a batch must share one sequence length")
        return np.stack([self.norm.apply(motion_features(s)) for s in seqs])

    def feature_tensor(self, x: np.ndarray) -> Tensor:
        return self.encoder(Tensor(x))

    def logits(self, x: np.ndarray) -> Tensor:
        return self.head(self.feature_tensor(x))

    def _grouped(self, seqs: Sequence[MotionSequence], fn) -> np.ndarray:
        out: list = [None] * len(seqs)
        by_len: dict[int, list[int]] = {}
        for i, s in enumerate(seqs):
            by_len.setdefault(len(s), []).append(i)
        with T.no_grad():
            for idx in by_len.values():
                res = fn(self._inputs([seqs[i] for i in idx]))
                for k, i in enumerate(idx):
                    out[i] = res[k]
        return np.stack(out)

    def features(self, seqs: Sequence[MotionSequence]) -> np.ndarray:
        """Head-input activations (the FID feature layer)."""
        return self._grouped(seqs, lambda x: self.feature_tensor(x).data)

    def predict_proba(self, seqs: Sequence[MotionSequence]) -> np.ndarray:
        def probs(x):
            return T.softmax(self.logits(x), axis=-1).data
        return self._grouped(seqs, probs)

    def predict(self, seqs: Sequence[MotionSequence]) -> np.ndarray:
        return np.argmax(self.predict_proba(seqs), axis=-1)

    def save(self, path) -> None:
        path = Path(path)
        save_checkpoint(path, dict((k, p.data) for k, p in self.named_parameters()))
        path.with_suffix(".json").write_text(json.dumps(
            {"kind": "classifier", "config": asdict(self.config), "norm": self.norm.to_json()}, indent=1))

    @classmethod
    def load(cls, path) -> "ActionClassifier":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        if meta.get("kind") != "classifier":
            raise ValueError(f"{path}: sidecar does not describe a classifier")
        model = cls(ClassifierConfig(**meta["config"]), NormStats.from_json(meta["norm"]))
        ParamStore.from_module(model).load_state_dict(load_checkpoint(path))
        return model


def accuracy(model: ActionClassifier, seqs: Sequence[MotionSequence]) -> float:
    return float(np.mean(model.predict(seqs) == np.array([s.label for s in seqs])))


def _feature_norm(seqs: Sequence[MotionSequence]) -> NormStats:
    x = np.concatenate([motion_features(s) for s in seqs])
    return NormStats(x.mean(axis=0), np.maximum(x.std(axis=0), 1e-6))


def train_classifier(train: Sequence[MotionSequence], epochs: int = 30, lr: float = 1e-3,
                     batch_size: int = 32, seed: int = 0, config: ClassifierConfig | None = None,
                     log: Callable[[str], None] | None = None) -> ActionClassifier:
    """Cross-entropy training on random crops so that short clips classify too."""
    labels = np.array([s.label for s in train])
    if len(np.unique(labels)) < 2:
        raise ValueError("classifier training needs at least two action classes")
    config = config or ClassifierConfig(seed=seed)
    model = ActionClassifier(config, _feature_norm(train))
    store = ParamStore.from_module(model)
    rng = np.random.default_rng(seed)
    min_len = min(len(s) for s in train)
    for epoch in range(epochs):
        order = rng.permutation(len(train))
        losses = []
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            crop = int(rng.integers(min(config.min_crop, min_len), min_len + 1))
            clips = []
            for j in idx:
                s = train[j]
                o = int(rng.integers(0, len(s) - crop + 1))
                clips.append(s.slice(o, o + crop))
            loss = T.cross_entropy(model.logits(model._inputs(clips)), labels[idx])
            loss.backward()
            adam_step(store, lr)
            losses.append(loss.item())
        if log:
            log(f"classifier epoch {epoch + 1}/{epochs} loss {np.mean(losses):.4f}")
    return model
