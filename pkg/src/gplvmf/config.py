"""Declarative JSON configuration: schema, model dimensions, training options.

One file drives the whole pipeline::

    {
      "seed": 0,
      "delimiter": ",",
      "rating_scale": [1, 5],
      "schema": {
        "user_count": 50,
        "item_count": 30,
        "contexts": [
          {"name": "mood", "kind": "categorical", "cardinality": 6},
          {"name": "price", "kind": "real"}
        ]
      },
      "model": {"inducing_count": 10, "item_dim": 2, "context_dim": 2,
                "item_bias_dim": 1, "context_bias_dim": 1, "use_mean": true},
      "train": {"method": "sgd", "epochs": 150, "learning_rate": 0.02,
                "lr_decay": 0.998, "clip_norm": 100.0},
      "synthetic": { ... SyntheticSpec fields ... }
    }

Only ``schema`` is mandatory for training; every other key has defaults.
"""

from __future__ import annotations

import json
from pathlib import Path

from .data import ContextSchema, ContextVariable
from .harness import SyntheticSpec
from .optim import TrainConfig

_MODEL_KEYS = (
    "inducing_count",
    "item_dim",
    "context_dim",
    "item_bias_dim",
    "context_bias_dim",
    "use_mean",
)
_TRAIN_KEYS = (
    "method",
    "epochs",
    "learning_rate",
    "lr_decay",
    "clip_norm",
    "tolerance",
    "patience",
    "init_mean_scale",
    "init_variance",
    "jitter",
)


def load_config(path) -> dict:
    with Path(path).open("r", encoding="utf-8") as fh:
        return json.load(fh)


def schema_from_config(cfg: dict) -> ContextSchema:
    try:
        sd = cfg["schema"]
    except KeyError as exc:
        raise KeyError("config is missing the 'schema' section") from exc
    contexts = tuple(
        ContextVariable(name=c["name"], kind=c["kind"], cardinality=c.get("cardinality"))
        for c in sd.get("contexts", [])
    )
    return ContextSchema(
        user_count=sd["user_count"], item_count=sd["item_count"], contexts=contexts
    )


def train_config_from_config(cfg: dict) -> TrainConfig:
    kwargs = {"seed": cfg.get("seed", 0)}
    for key in _MODEL_KEYS:
        if key in cfg.get("model", {}):
            kwargs[key] = cfg["model"][key]
    for key in _TRAIN_KEYS:
        if key in cfg.get("train", {}):
            kwargs[key] = cfg["train"][key]
    return TrainConfig(**kwargs)


def rating_scale_from_config(cfg: dict):
    scale = cfg.get("rating_scale")
    return tuple(float(v) for v in scale) if scale is not None else None


def synthetic_spec_from_config(cfg: dict) -> SyntheticSpec:
    try:
        sd = cfg["synthetic"]
    except KeyError as exc:
        raise KeyError("config is missing the 'synthetic' section") from exc
    schema = schema_from_config(cfg)
    return SyntheticSpec(
        user_count=schema.user_count,
        item_count=schema.item_count,
        contexts=schema.contexts,
        ratings_per_user=sd["ratings_per_user"],
        item_dim=sd.get("item_dim", 2),
        context_dim=sd.get("context_dim", 2),
        item_alpha=sd.get("item_alpha", 1.0),
        context_alphas=tuple(sd.get("context_alphas", [1.0] * schema.context_count)),
        signal_variance=sd.get("signal_variance", 1.0),
        noise_precision=sd.get("noise_precision", 4.0),
        include_bias=sd.get("include_bias", True),
        user_bias_mean=sd.get("user_bias_mean", 0.0),
        user_bias_std=sd.get("user_bias_std", 1.0),
        bias_scale=sd.get("bias_scale", 1.0),
        real_weights=tuple(sd.get("real_weights", [])),
        seed=sd.get("seed", cfg.get("seed", 0)),
    )
