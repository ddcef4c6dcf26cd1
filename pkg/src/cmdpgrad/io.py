"""JSON loaders for models, schedules and experiment configs.

An MDP file holds per-action transition matrices ``transitions[u][i][j]``,
a cost table ``cost[i][u]``, constraint tables ``constraints[l][i][u]`` with
``bounds[l]``, and optionally ``action_counts`` and a reference ``theta``.
"""
from __future__ import annotations

import hashlib
import json
from importlib import resources
from pathlib import Path

import numpy as np

from .mdp import MdpModel, ModelError
from .optimize import Hyper, ModelSchedule
from .wireless import TxModel

BUNDLED = ("estimation", "tracking_a", "tracking_b", "tracking", "wireless")


class ConfigError(ValueError):
    pass


def _read(path) -> tuple[dict, Path | None]:
    """Load a JSON file; bare names refer to the bundled data files."""
    p = Path(path)
    if p.exists():
        return json.loads(p.read_text()), p.parent
    name = p.stem if p.suffix == ".json" else p.name
    if p.parent == Path(".") and name in BUNDLED:
        text = resources.files("cmdpgrad.data").joinpath(f"{name}.json").read_text()
        return json.loads(text), None
    raise ConfigError(f"no such file: {path}")


def bundled_path(name: str) -> str:
    return str(resources.files("cmdpgrad.data").joinpath(f"{name}.json"))


def model_from_dict(d: dict) -> MdpModel:
    try:
        return MdpModel.from_dense(d["transitions"], d["cost"], d.get("constraints", []),
                                   d.get("bounds", []), d.get("action_counts"))
    except KeyError as exc:
        raise ConfigError(f"model is missing field {exc}") from None


def load_model(path) -> MdpModel:
    return model_from_dict(_read(path)[0])


def load_theta(path):
    """Reference policy table stored alongside a model, or ``None``."""
    d = _read(path)[0]
    return None if "theta" not in d else np.asarray(d["theta"], dtype=float)


def model_to_dict(model: MdpModel) -> dict:
    S = model.num_states
    U = int(model.action_counts.max())
    tr = np.zeros((U, S, S))
    cost = np.zeros((S, U))
    cons = np.zeros((model.num_constraints, S, U))
    for z, (i, a) in enumerate(zip(model.pair_state, model.pair_action)):
        tr[a, i] = model.pair_transitions[z]
        cost[i, a] = model.cost[z]
        cons[:, i, a] = model.constraints[:, z]
    return {"transitions": tr.tolist(), "cost": cost.tolist(), "constraints": cons.tolist(),
            "bounds": model.bounds.tolist(), "action_counts": model.action_counts.tolist()}


def load_schedule(cfg: dict, base: Path | None = None) -> ModelSchedule:
    """``cfg["schedule"]`` is a list of ``{"start": t, "model": path-or-inline}``."""
    entries = cfg.get("schedule")
    if not entries:
        raise ConfigError("schedule is empty")
    times, models = [], []
    for e in entries:
        m = e["model"]
        if isinstance(m, dict):
            models.append(model_from_dict(m))
        else:
            p = Path(m)
            if base is not None and not p.is_absolute() and (base / p).exists():
                p = base / p
            models.append(load_model(p))
        times.append(int(e["start"]))
    try:
        return ModelSchedule(times, models)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_tracking(path):
    """Tracking config: ``(schedule, hyper, settings)``."""
    cfg, base = _read(path)
    sched = load_schedule(cfg, base)
    try:
        hyper = Hyper(**cfg.get("hyper", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad hyperparameters: {exc}") from None
    return sched, hyper, cfg


def load_txmodel(path) -> TxModel:
    d = _read(path)[0]
    try:
        return TxModel(d["channel"], d["success"], d["tx_cost"], d["delay_cost"],
                       float(d["arrival"]), float(d["bound"]), int(d.get("capacity", 20)))
    except KeyError as exc:
        raise ConfigError(f"wireless model is missing field {exc}") from None


def load_config(path) -> dict:
    return _read(path)[0]


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


__all__ = ["ConfigError", "ModelError", "load_model", "load_theta", "load_schedule", "load_tracking",
           "load_txmodel", "load_config", "model_to_dict", "model_from_dict", "config_hash", "bundled_path"]
