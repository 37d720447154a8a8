"""Self-describing JSON checkpoints: named shapes, row-major values and a checksum."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from . import nn
from .gnn import GnnParams
from .graph import FeatureScaler
from .lambda_solver import LambdaVec
from .pseudo import EncoderModel
from .train import ModelState, TrainConfig

FORMAT = "fairwos-checkpoint/1"


class ChecksumError(ValueError):
    pass


def _array(a) -> dict:
    a = np.asarray(a)
    return {"shape": list(a.shape), "values": a.ravel().tolist()}


def _unarray(d: dict, dtype=np.float64) -> np.ndarray:
    return np.array(d["values"], dtype=dtype).reshape(d["shape"])


def _params(ps: nn.ParameterSet) -> dict:
    # JSON keys get sorted, so the parameter order is stored separately
    return {"order": ps.names(), "arrays": {k: _array(v) for k, v in ps.values.items()}}


def _unparams(d: dict) -> nn.ParameterSet:
    ps = nn.ParameterSet()
    for k in d["order"]:
        ps.add(k, _unarray(d["arrays"][k]))
    return ps


def _canonical(body: dict) -> bytes:
    return json.dumps(body, sort_keys=True, separators=(",", ":")).encode()


def state_to_dict(state: ModelState) -> dict:
    body = {
        "format": FORMAT,
        "kind": state.kind,
        "backbone": state.gnn.backbone,
        "seed": state.config.seed,
        "selected_epoch": state.selected_epoch,
        "config": {k: getattr(state.config, k) for k in TrainConfig.field_names()},
        "scaler": {"mean": _array(state.scaler.mean), "std": _array(state.scaler.std)},
        "encoder": None,
        "gnn": state.gnn.to_dict(),
        "lambda": {"weights": _array(state.lam.weights), "active": _array(state.lam.active.astype(int))},
        "thresholds": _array(state.thresholds),
    }
    if state.encoder is not None:
        enc = state.encoder
        body["encoder"] = {"dim": enc.dim, "seed": enc.seed, "params": _params(enc.params)}
    return body


def state_from_dict(body: dict) -> ModelState:
    if body.get("format") != FORMAT:
        raise ValueError(f"unsupported checkpoint format {body.get('format')!r}")
    config = TrainConfig(**body["config"])
    scaler = FeatureScaler(_unarray(body["scaler"]["mean"]), _unarray(body["scaler"]["std"]))
    enc = None
    if body["encoder"] is not None:
        e = body["encoder"]
        enc = EncoderModel(_unparams(e["params"]), int(e["dim"]), int(e["seed"]))
    lam = LambdaVec(_unarray(body["lambda"]["weights"]), _unarray(body["lambda"]["active"], bool))
    return ModelState(config, scaler, enc, GnnParams.from_dict(body["gnn"]), lam,
                      _unarray(body["thresholds"]), int(body["selected_epoch"]), body["kind"])


def save_checkpoint(state: ModelState, path) -> str:
    """Write ``state`` to ``path``; returns the sha256 of the body."""
    body = state_to_dict(state)
    digest = hashlib.sha256(_canonical(body)).hexdigest()
    Path(path).write_text(json.dumps({"sha256": digest, "body": body}, sort_keys=True))
    return digest


def load_checkpoint(path) -> ModelState:
    try:
        doc = json.loads(Path(path).read_text())
        body, digest = doc["body"], doc["sha256"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ChecksumError(f"{path}: unreadable checkpoint ({exc})") from exc
    if hashlib.sha256(_canonical(body)).hexdigest() != digest:
        raise ChecksumError(f"{path}: checksum mismatch")
    return state_from_dict(body)
