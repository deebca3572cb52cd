"""Run configuration: one JSON document, unknown keys rejected."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass

from .denoiser.model import ModelConfig
from .denoiser.training import TrainConfig
from .flows import VARIANTS, FlowVariant
from .molgraph import AtomVocabulary
from .molgraph.molecule import DEFAULT_ELEMENTS, TOY_ELEMENTS
from .schedules import MODALITIES, InterpolantSchedule


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "variant": "ctmc",
    "seed": 0,
    "n_steps": 100,
    "elements": list(TOY_ELEMENTS),
    "charges": [-1, 0, 1],
    "schedule": {},
    "prior": {"simplex_blur_sigma": 0.2},
    "ot": {"max_iters": 10, "restarts": 0},
    "ctmc": {"eta": 30.0, "tau": 0.05},
    "dirichlet": {"omega_max": 10.0},
    "model": {"blocks": 2, "scalar_dim": 64, "vector_dim": 8, "edge_dim": 32, "n_cp": 2, "rbf_dim": 16, "rbf_dmax": 6.0},
    "train": {"lr": 1e-3, "steps": 2000, "batch": 32, "checkpoint_every": 500},
    "loss": {"weights": [3.0, 0.4, 1.0, 2.0]},
}
SCHEDULE_KEYS = {"kind", "nu"}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        where = f"{path}{key}"
        if key not in base and path != "schedule.":
            raise ConfigError(f"unknown config key {where!r}")
        if path == "schedule.":
            if key not in MODALITIES:
                raise ConfigError(f"unknown config key {where!r}")
            if not isinstance(val, dict) or set(val) - SCHEDULE_KEYS:
                raise ConfigError(f"schedule.{key} accepts only 'kind' and 'nu'")
            out[key] = dict(val)
        elif isinstance(base.get(key), dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = _merge(base[key], val, where + ".")
        else:
            out[key] = val
    return out


@dataclass
class RunConfig:
    raw: dict

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        if not isinstance(obj, dict):
            raise ConfigError("config must be a JSON object")
        raw = _merge(DEFAULTS, obj)
        cfg = cls(raw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                obj = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        return cls.from_dict(obj)

    def validate(self) -> None:
        r = self.raw
        if r["variant"] not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        seed = r["seed"]
        if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2**64:
            raise ConfigError("seed must be an integer in [0, 2**64)")
        if not isinstance(r["n_steps"], int) or r["n_steps"] < 1:
            raise ConfigError("n_steps must be a positive integer")
        try:
            self.vocabulary()
            self.flow_variant()
            self.train_config()
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None

    def vocabulary(self) -> AtomVocabulary:
        els = self.raw["elements"]
        unknown = [e for e in els if e not in DEFAULT_ELEMENTS]
        if unknown:
            raise ConfigError(f"elements without valence rules: {unknown}")
        return AtomVocabulary.from_table(els, tuple(self.raw["charges"]))

    def flow_variant(self) -> FlowVariant:
        r = self.raw
        scheds = {m: InterpolantSchedule(**s) for m, s in r["schedule"].items()}
        return FlowVariant(
            r["variant"],
            scheds,
            eta=float(r["ctmc"]["eta"]),
            tau=float(r["ctmc"]["tau"]),
            omega_max=float(r["dirichlet"]["omega_max"]),
            simplex_sigma=float(r["prior"]["simplex_blur_sigma"]),
        )

    def train_config(self) -> TrainConfig:
        r = self.raw
        t = r["train"]
        return TrainConfig(
            steps=int(t["steps"]),
            batch=int(t["batch"]),
            lr=float(t["lr"]),
            loss_weights=tuple(float(w) for w in r["loss"]["weights"]),
            ot_max_iters=int(r["ot"]["max_iters"]),
            ot_restarts=int(r["ot"]["restarts"]),
            checkpoint_every=int(t["checkpoint_every"]),
            seed=int(r["seed"]) % 2**63,
            model=ModelConfig(**r["model"]),
        )

    def to_json(self) -> dict:
        return copy.deepcopy(self.raw)
