"""JSON model archives.

Floats are written with ``repr``, the shortest string that parses back to the
same float64, so a save/load round trip reproduces forward passes bit for bit.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .core import ParameterSet
from .errors import SchemaError
from .outcome import OutcomeModel
from .treatment import TreatmentModel

FORMAT_VERSION = 1


def _plain(obj):
    """Convert numpy scalars/arrays nested in metadata to JSON-native values."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def _network_dict(params: ParameterSet) -> dict:
    return {
        "widths": params.widths,
        "activations": list(params.activations),
        "weights": [w.ravel().tolist() for w in params.weights],
        "biases": [b.tolist() for b in params.biases],
    }


def _network_from(doc: dict) -> ParameterSet:
    widths = doc["widths"]
    weights = [np.asarray(w, dtype=np.float64).reshape(widths[l + 1], widths[l])
               for l, w in enumerate(doc["weights"])]
    biases = [np.asarray(b, dtype=np.float64) for b in doc["biases"]]
    return ParameterSet(weights, biases, list(doc["activations"]))


def model_to_dict(model: TreatmentModel | OutcomeModel) -> dict:
    if isinstance(model, TreatmentModel):
        doc = {
            "head": model.head,
            "K": model.n_components,
            "x_names": model.x_names,
            "z_names": model.z_names,
            "standardization": {
                "input_mean": model.input_mean, "input_std": model.input_std,
                "p_mean": model.p_mean, "p_std": model.p_std,
            },
            "categories": None if model.categories is None else model.categories,
            "sigma_floor": model.sigma_floor,
        }
    elif isinstance(model, OutcomeModel):
        doc = {
            "head": "scalar",
            "K": 1,
            "x_names": model.x_names,
            "standardization": {
                "x_mean": model.x_mean, "x_std": model.x_std, "p_mean": model.p_mean,
                "p_std": model.p_std, "y_mean": model.y_mean, "y_std": model.y_std,
            },
        }
    else:
        raise TypeError(f"cannot archive {type(model).__name__}")
    doc["format_version"] = FORMAT_VERSION
    doc["keep_probability"] = model.keep_probability
    doc["network"] = _network_dict(model.network)
    doc["seed"] = model.metadata.get("seed")
    doc["training"] = {k: v for k, v in model.metadata.items() if k != "seed"}
    return _plain(doc)


def model_from_dict(doc: dict) -> TreatmentModel | OutcomeModel:
    try:
        head = doc["head"]
        std = doc["standardization"]
        network = _network_from(doc["network"])
        metadata = dict(doc.get("training", {}))
        metadata["seed"] = doc.get("seed")
        if head == "scalar":
            return OutcomeModel(
                network=network, x_names=list(doc["x_names"]),
                x_mean=np.asarray(std["x_mean"], dtype=np.float64),
                x_std=np.asarray(std["x_std"], dtype=np.float64),
                p_mean=std["p_mean"], p_std=std["p_std"], y_mean=std["y_mean"], y_std=std["y_std"],
                keep_probability=doc["keep_probability"], metadata=metadata,
            )
        if head not in ("mixture", "categorical"):
            raise SchemaError(f"unknown head {head!r}")
        cats = doc.get("categories")
        return TreatmentModel(
            network=network, head=head, n_components=doc["K"],
            x_names=list(doc["x_names"]), z_names=list(doc["z_names"]),
            input_mean=np.asarray(std["input_mean"], dtype=np.float64),
            input_std=np.asarray(std["input_std"], dtype=np.float64),
            p_mean=std["p_mean"], p_std=std["p_std"],
            categories=None if cats is None else np.asarray(cats, dtype=np.float64),
            keep_probability=doc["keep_probability"], sigma_floor=doc["sigma_floor"],
            metadata=metadata,
        )
    except KeyError as exc:
        raise SchemaError(f"model archive is missing {exc}") from exc


def dumps_model(model) -> str:
    return json.dumps(model_to_dict(model), indent=1, sort_keys=True) + "\n"


def save_model(model, path: str | Path) -> None:
    Path(path).write_text(dumps_model(model))


def load_model(path: str | Path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON ({exc})") from exc
    return model_from_dict(doc)
