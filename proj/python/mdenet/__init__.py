"""Python bindings for the mdenet C++ core.

Configs and reports are plain dicts; everything heavy runs in C++.
"""

import json

from . import _mdenet
from ._mdenet import (
    ConfigError,
    Dataset,
    DatasetSplit,
    Error,
    InputError,
    IoError,
    ParseError,
    SchemaError,
    ShapeError,
    SplitError,
    TrainedModel,
    TrainingError,
    TripletError,
    admissible_weight_pairs,
    cls_accuracy,
    gaussian_similarity,
    load_checkpoint,
    load_jsonl,
    save_checkpoint,
    split_known_unknown,
    write_jsonl,
)

__all__ = [
    "ConfigError", "Dataset", "DatasetSplit", "Error", "InputError", "IoError", "ParseError",
    "SchemaError", "ShapeError", "SplitError", "TrainedModel", "TrainingError", "TripletError",
    "ablate", "admissible_weight_pairs", "cls_accuracy", "config_hash", "default_config",
    "det_accuracy", "detect", "evaluate", "gaussian_similarity", "gen_synthetic", "grid_search",
    "load_checkpoint", "load_jsonl", "model_config", "save_checkpoint", "split_known_unknown",
    "train", "write_jsonl",
]


def default_config(**overrides):
    """Full config dict with library defaults, updated with overrides."""
    cfg = json.loads(_mdenet.normalize_config("{}"))
    cfg.update(overrides)
    return json.loads(_mdenet.normalize_config(json.dumps(cfg)))


def model_config(model):
    return json.loads(model.config_json)


def config_hash(config):
    return _mdenet.config_hash(json.dumps(config))


def gen_synthetic(seed=7, **spec):
    return _mdenet.gen_synthetic(json.dumps(spec), seed)


def train(config, split):
    """Returns (model, history) where history has "steps" and "epochs" lists."""
    model, history = _mdenet.train(json.dumps(config), split)
    return model, json.loads(history)


def evaluate(model, split):
    """Returns (metrics dict, confusion CSV text)."""
    metrics, confusion = _mdenet.evaluate(model, split)
    return json.loads(metrics), confusion


def detect(model, dataset):
    return _mdenet.detect(model, dataset)


def grid_search(config, split, epochs_per_cell):
    """Returns (grid CSV text, panels dict)."""
    csv, panels = _mdenet.grid_search(json.dumps(config), split, epochs_per_cell)
    return csv, json.loads(panels)


def ablate(config, split):
    return _mdenet.ablate(json.dumps(config), split)


def det_accuracy(known_on_known, known_on_unknown):
    tpr, tnr, det = _mdenet.det_accuracy(list(known_on_known), list(known_on_unknown))
    return {"tpr": tpr, "tnr": tnr, "det_acc": det}
