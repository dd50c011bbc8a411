"""Run configuration: JSON file merged over built-in defaults."""
from __future__ import annotations

import copy
import json
from pathlib import Path

from .data import ACTIONS

DEFAULTS: dict = {
    "seed": 0,
    "out_dir": "runs",
    "dataset": "{out_dir}/dataset.jsonl",
    "checkpoints": {
        "vae": "{out_dir}/vae_tb{T_b}.mfpk",
        "mdm": "{out_dir}/mdm.mfpk",
        "sampler": "{out_dir}/sampler_tb{T_b}.mfpk",
        "classifier": "{out_dir}/classifier.mfpk",
    },
    "data": {"actions": list(ACTIONS), "per_action": 100, "test_per_action": 50, "n_frames": 60,
             "turn_range": 1.5707963267948966},
    "vae": {"t_between": [20, 40], "t_start": 5, "t_end": 5, "epochs": 40, "batch_size": 32, "lr": 1e-3,
            "d": 64, "d_z": 32, "heads": 4, "layers": 2, "mode": "full", "w_mse": 100.0, "w_kl": 0.001},
    "mdm": {"steps": 1500, "batch_size": 32, "lr": 1e-3, "d": 64, "heads": 4, "layers": 2, "T": 1000,
            "beta_start": 1e-4, "beta_end": 0.02, "t_frames": 60},
    "sampler": {"epochs": 30, "lr": 0.01, "batch_size": 32, "n_branches": 5, "w_div": 200.0, "w_kl_samp": 1.0},
    "classifier": {"epochs": 30, "lr": 1e-3, "batch_size": 32, "d": 32, "layers": 2},
    "predict": {"future_action": "Wave", "inbetween_action": "Walk", "T_b": 40, "S": 3, "use_sampler": False,
                "history": None, "history_action": "Walk", "history_frames": 30, "history_turn": 0.0},
    "rollout": {"pairs": [["Wave", "Walk"], ["SitDown", "Step"], ["Reach", "Jog"]]},
}


class ConfigError(ValueError):
    pass


def deep_merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            out[k] = deep_merge(base[k], v, f"{path}{k}.")
        else:
            out[k] = v
    return out


class RunConfig:
    """Merged settings plus path resolution for datasets and checkpoints."""

    def __init__(self, values: dict | None = None):
        self.values = deep_merge(DEFAULTS, values or {})

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls()
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} not found") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
        return cls(raw)

    def __getitem__(self, key):
        return self.values[key]

    def _fmt(self, template: str, **kw) -> Path:
        return Path(template.format(out_dir=self.values["out_dir"], **kw))

    @property
    def dataset(self) -> Path:
        return self._fmt(self.values["dataset"])

    def checkpoint(self, kind: str, t_between: int | None = None) -> Path:
        return self._fmt(self.values["checkpoints"][kind], T_b=t_between)

    def to_json(self) -> dict:
        return copy.deepcopy(self.values)
