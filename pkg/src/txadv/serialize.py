"""Versioned model save/load. JSON numbers round-trip floats exactly, so a
saved model scores bit-identically after reload."""

from __future__ import annotations

import json

from .data import SCHEMA_VERSION, ValidationError
from .defenses import (FilteredModel, FilterModel, NnMixModel,
                       PermutationAverageModel, SubsampleEnsembleModel)
from .gru import GruClassifier
from .models import EnsembleModel, GbdtScoreModel, SurrogatePool

MODEL_SCHEMA = "txadv.model"


def model_to_doc(model) -> dict:
    if isinstance(model, GruClassifier):
        return model.to_doc()
    if isinstance(model, GbdtScoreModel):
        return model.to_doc()
    if isinstance(model, EnsembleModel):
        return {"kind": "ensemble",
                "members": [{"weight": w, "model": model_to_doc(m)}
                            for m, w in model.members]}
    if isinstance(model, SurrogatePool):
        return {"kind": "surrogate_pool", "seed": model.seed,
                "members": [m.to_doc() for m in model.members]}
    if isinstance(model, SubsampleEnsembleModel):
        return {"kind": "subsample_ensemble", "share": model.share,
                "repeats": model.repeats, "seed": model.seed,
                "base": model_to_doc(model.base)}
    if isinstance(model, NnMixModel):
        return {"kind": "nn_mix", "share": model.share, "runs": model.runs,
                "seed": model.seed, "base": model_to_doc(model.base)}
    if isinstance(model, PermutationAverageModel):
        return {"kind": "permutation_average", "n_perm": model.n_perm,
                "seed": model.seed, "base": model_to_doc(model.base)}
    if isinstance(model, FilteredModel):
        return {"kind": "filtered", "theta": model.theta,
                "filter_model": model.filter_model.to_doc(),
                "base": model_to_doc(model.base)}
    raise ValidationError(f"cannot serialize model type {type(model).__name__}")


def model_from_doc(doc: dict):
    kind = doc["kind"]
    if kind == "gru":
        return GruClassifier.from_doc(doc)
    if kind == "gbdt":
        return GbdtScoreModel.from_doc(doc)
    if kind == "ensemble":
        return EnsembleModel([(model_from_doc(m["model"]), m["weight"])
                              for m in doc["members"]])
    if kind == "surrogate_pool":
        return SurrogatePool(
            members=[GbdtScoreModel.from_doc(m) for m in doc["members"]],
            seed=doc["seed"])
    if kind == "subsample_ensemble":
        return SubsampleEnsembleModel(base=model_from_doc(doc["base"]),
                                      share=doc["share"], repeats=doc["repeats"],
                                      seed=doc["seed"])
    if kind == "nn_mix":
        return NnMixModel(base=model_from_doc(doc["base"]), share=doc["share"],
                          runs=doc["runs"], seed=doc["seed"])
    if kind == "permutation_average":
        return PermutationAverageModel(base=model_from_doc(doc["base"]),
                                       n_perm=doc["n_perm"], seed=doc["seed"])
    if kind == "filtered":
        return FilteredModel(filter_model=FilterModel.from_doc(doc["filter_model"]),
                             base=model_from_doc(doc["base"]), theta=doc["theta"])
    raise ValidationError(f"unknown model kind {kind!r}")


def save_model(model, path):
    doc = {"schema": MODEL_SCHEMA, "version": SCHEMA_VERSION,
           "model": model_to_doc(model)}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, sort_keys=True)


def load_model(path):
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    if doc.get("schema") != MODEL_SCHEMA or doc.get("version") != SCHEMA_VERSION:
        raise ValidationError("bad model file")
    return model_from_doc(doc["model"])
