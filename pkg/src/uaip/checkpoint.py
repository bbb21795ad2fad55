"""Model checkpoints as plain JSON.

Floats are written through ``json``'s repr-based encoder, which emits the
shortest string that parses back to the identical double, so a save/load
round trip is bit-exact. Every file carries a format version and a kind
tag; both are checked before any reconstruction happens.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import nets
from .concepts import ConceptModelParams, ConceptTrainConfig
from .errors import CheckpointError
from .pursuit import FullConceptModel, PursuitModel, PursuitTrainConfig

FORMAT_VERSION = 1

_KINDS = ("pursuit", "full_concept", "concept_model")


def _encode_array(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": [float(x) for x in a.ravel()]}


def _decode_array(d: dict) -> np.ndarray:
    arr = np.asarray(d["data"], dtype=np.float64)
    return arr.reshape(d["shape"])


def _encode_layers(layers: list[nets.DenseLayer]) -> list[dict]:
    return [{"weight": _encode_array(l.weight.value),
             "bias": _encode_array(l.bias.value)} for l in layers]


def _decode_layers(items: list[dict]) -> list[nets.DenseLayer]:
    import_layers = []
    for item in items:
        w = _decode_array(item["weight"])
        b = _decode_array(item["bias"])
        import_layers.append(nets.DenseLayer(weight=ad.tensor(w), bias=ad.tensor(b)))
    return import_layers


def _meta_jsonable(meta: dict) -> dict:
    out = {}
    for key, value in meta.items():
        if isinstance(value, np.ndarray):
            out[key] = [float(x) for x in value.ravel()]
        elif isinstance(value, (np.floating, np.integer)):
            out[key] = value.item()
        else:
            out[key] = value
    return out


def save_checkpoint(model: PursuitModel | FullConceptModel | ConceptModelParams,
                    path: str | Path) -> None:
    if isinstance(model, PursuitModel):
        payload = {
            "kind": "pursuit",
            "querier": _encode_layers(model.querier),
            "classifier": _encode_layers(model.classifier),
            "n_queries": model.n_queries,
            "n_classes": model.n_classes,
            "config": asdict(model.config),
            "variant": model.variant,
            "train_meta": _meta_jsonable(model.train_meta),
        }
    elif isinstance(model, FullConceptModel):
        payload = {
            "kind": "full_concept",
            "classifier": _encode_layers(model.classifier),
            "n_queries": model.n_queries,
            "n_classes": model.n_classes,
            "config": asdict(model.config),
            "train_meta": _meta_jsonable(model.train_meta),
        }
    elif isinstance(model, ConceptModelParams):
        payload = {
            "kind": "concept_model",
            "layers": _encode_layers(model.layers),
            "dropout": model.dropout,
            "feature_dim": model.feature_dim,
            "n_queries": model.n_queries,
            "config": asdict(model.config),
            "train_meta": _meta_jsonable(model.train_meta),
        }
    else:
        raise CheckpointError(f"cannot checkpoint object of type {type(model).__name__}")
    payload["format_version"] = FORMAT_VERSION
    Path(path).write_text(json.dumps(payload, indent=1), encoding="utf-8")


def _pursuit_config(d: dict) -> PursuitTrainConfig:
    d = dict(d)
    d["hidden"] = tuple(d["hidden"])
    return PursuitTrainConfig(**d)


def load_checkpoint(path: str | Path) -> PursuitModel | FullConceptModel | ConceptModelParams:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as err:
        raise CheckpointError(f"cannot read checkpoint {path}: {err}") from err
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as err:
        raise CheckpointError(
            f"corrupt checkpoint {path}: invalid JSON at offset {err.pos} ({err.msg})"
        ) from err
    if not isinstance(payload, dict):
        raise CheckpointError(f"corrupt checkpoint {path}: top level is not an object")
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint {path} has format version {version!r}, "
            f"this build reads version {FORMAT_VERSION}"
        )
    kind = payload.get("kind")
    if kind not in _KINDS:
        raise CheckpointError(f"checkpoint {path} has unknown kind {kind!r}")
    try:
        if kind == "pursuit":
            return PursuitModel(
                querier=_decode_layers(payload["querier"]),
                classifier=_decode_layers(payload["classifier"]),
                n_queries=int(payload["n_queries"]),
                n_classes=int(payload["n_classes"]),
                config=_pursuit_config(payload["config"]),
                variant=payload["variant"],
                train_meta=payload["train_meta"],
            )
        if kind == "full_concept":
            return FullConceptModel(
                classifier=_decode_layers(payload["classifier"]),
                n_queries=int(payload["n_queries"]),
                n_classes=int(payload["n_classes"]),
                config=_pursuit_config(payload["config"]),
                train_meta=payload["train_meta"],
            )
        cfg = dict(payload["config"])
        cfg["hidden"] = tuple(cfg["hidden"])
        return ConceptModelParams(
            layers=_decode_layers(payload["layers"]),
            dropout=float(payload["dropout"]),
            feature_dim=int(payload["feature_dim"]),
            n_queries=int(payload["n_queries"]),
            config=ConceptTrainConfig(**cfg),
            train_meta=payload["train_meta"],
        )
    except (KeyError, TypeError, ValueError) as err:
        raise CheckpointError(f"corrupt checkpoint {path}: {err}") from err
