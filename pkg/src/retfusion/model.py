"""A retrieval model: one query encoder and one document encoder with
identical architecture but disjoint weights, plus npz persistence."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from .encoder import EncoderConfig, EncoderParams, init_encoder_params, named_parameters
from .errors import DataError


@dataclass
class RetrievalModel:
    cfg: EncoderConfig
    query_params: EncoderParams
    doc_params: EncoderParams


def init_model(cfg: EncoderConfig, seed: int) -> RetrievalModel:
    cfg.validate()
    return RetrievalModel(
        cfg=cfg,
        query_params=init_encoder_params(np.random.default_rng([seed, 0]), cfg),
        doc_params=init_encoder_params(np.random.default_rng([seed, 1]), cfg),
    )


def model_named_parameters(model: RetrievalModel):
    yield from named_parameters(model.query_params, "query.")
    yield from named_parameters(model.doc_params, "doc.")


def save_model(model: RetrievalModel, path: str) -> None:
    arrays = {name: t.data for name, t in model_named_parameters(model)}
    cfg = dataclasses.asdict(model.cfg)
    cfg["source_dims"] = list(cfg["source_dims"])
    arrays["__config__"] = np.array(json.dumps(cfg))
    np.savez(path, **arrays)


def load_model(path: str) -> RetrievalModel:
    with np.load(path, allow_pickle=False) as archive:
        if "__config__" not in archive:
            raise DataError(f"{path} is not a saved model (missing config entry)")
        cfg_dict = json.loads(str(archive["__config__"]))
        cfg_dict["source_dims"] = tuple(cfg_dict["source_dims"])
        cfg = EncoderConfig(**cfg_dict)
        model = init_model(cfg, seed=0)
        for name, t in model_named_parameters(model):
            if name not in archive:
                raise DataError(f"saved model {path} is missing parameter {name}")
            stored = archive[name]
            if stored.shape != t.data.shape:
                raise DataError(
                    f"saved parameter {name} has shape {stored.shape}, expected {t.data.shape}"
                )
            t.data = stored.astype(np.float64)
    return model
