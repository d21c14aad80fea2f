"""Python front end for the advin core library.

Configs cross into C++ as JSON; these wrappers accept plain dicts.
"""

import json

from . import _advin
from ._advin import Dataset, FormatError, Model, ShapeError, load_checkpoint, load_dataset, parse_fraction

__all__ = [
    "Dataset",
    "FormatError",
    "Model",
    "ShapeError",
    "archive_metadata",
    "evaluate",
    "glyphset",
    "init_model",
    "load_checkpoint",
    "load_dataset",
    "load_poisoned",
    "parse_fraction",
    "poison",
    "train",
]


def glyphset(**params):
    """(train, test) GlyphSet splits; keyword arguments override the defaults."""
    return _advin.load_source(json.dumps({"source": "glyphset", "glyphset": params}))


def init_model(spec, seed=0):
    return _advin.init_model(json.dumps(spec), seed)


def spec_for(data, arch="miniconv", width=1.0):
    c, h, w = data.images.shape[1:]
    return {"arch": arch, "input": [c, h, w], "classes": data.classes, "width": width}


def train(data, config=None, spec=None, test=None):
    """Returns (model, trace_csv). An "inner" attack in config selects adversarial training."""
    spec = spec or spec_for(data)
    return _advin.train(data, json.dumps(spec), json.dumps(config or {}), test)


def evaluate(model, test, attack=None, seed=0):
    return json.loads(_advin.evaluate(model, test, json.dumps(attack) if attack else "", seed))


def poison(recipe, out):
    """Runs a recipe's forge step; returns a dict with hash, psr, rounds and deltas."""
    h, psr, rounds, deltas = _advin.poison(json.dumps(recipe), str(out))
    return {"hash": h, "psr": psr, "rounds": rounds, "deltas": deltas}


def load_poisoned(archive):
    return _advin.load_poisoned(str(archive))


def archive_metadata(archive):
    return json.loads(_advin.archive_metadata(str(archive)))
