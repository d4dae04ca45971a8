"""Binary model files and model-grid directories.

A model file is a little-endian header ``<4sIIIddd`` (magic ``CIDR``,
version, M, p, T_s, soc, temperature) followed by A, B, C, D and res0 as
contiguous float64 arrays in row-major order. A JSON sidecar with the same
stem and a ``.json`` suffix lists the output labels. A grid directory holds
one model per setpoint, ``grid.json`` with the realisation config and the
file index, and a copy of the cell parameters in ``params.ini``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .cellparams import dump_params, load_params
from .realisation import ModelGrid, RealisationConfig, StateSpaceModel
from .tfgen import OutputLabel

MAGIC = b"CIDR"
VERSION = 1
_HEADER = struct.Struct("<4sIIIddd")
GRID_INDEX = "grid.json"
GRID_PARAMS = "params.ini"


class ModelFormatError(ValueError):
    pass


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def model_bytes(model: StateSpaceModel) -> bytes:
    M, p = model.order, model.n_outputs
    parts = [_HEADER.pack(MAGIC, VERSION, M, p, model.T_s, model.soc, model.temp)]
    for arr in (model.A, model.B, model.C, model.D, model.res0):
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def model_from_bytes(data: bytes, labels: list[OutputLabel] | None = None) -> StateSpaceModel:
    if len(data) < _HEADER.size:
        raise ModelFormatError("file shorter than the header")
    magic, version, M, p, T_s, soc, temp = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ModelFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ModelFormatError(f"unsupported format version {version}")
    sizes = [M * M, M, p * M, p, p]
    expected = _HEADER.size + 8 * sum(sizes)
    if len(data) != expected:
        raise ModelFormatError(f"expected {expected} bytes for M={M}, p={p}, got {len(data)}")
    flat = np.frombuffer(data, dtype="<f8", offset=_HEADER.size).astype(float)
    A, B, C, D, res0 = np.split(flat, np.cumsum(sizes)[:-1])
    return StateSpaceModel(A.reshape(M, M), B, C.reshape(p, M), D, res0, T_s, labels or [], soc=soc, temp=temp)


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def save_model(model: StateSpaceModel, path) -> Path:
    path = Path(path)
    path.write_bytes(model_bytes(model))
    meta = {
        "format": "CIDR",
        "version": VERSION,
        "order": model.order,
        "sample_period_s": model.T_s,
        "soc": model.soc,
        "temperature_K": model.temp,
        "markov_error": None if np.isnan(model.markov_error) else model.markov_error,
        "labels": [lab.to_dict() for lab in model.labels],
    }
    sidecar_path(path).write_text(_dumps(meta), encoding="utf-8")
    return path


def load_model(path) -> StateSpaceModel:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"model file not found: {path}")
    side = sidecar_path(path)
    labels = []
    meta = {}
    if side.is_file():
        meta = json.loads(side.read_text(encoding="utf-8"))
        labels = [OutputLabel.from_dict(d) for d in meta.get("labels", [])]
    model = model_from_bytes(path.read_bytes(), labels)
    if meta.get("markov_error") is not None:
        model.markov_error = float(meta["markov_error"])
    return model


def model_filename(soc: float, temp: float) -> str:
    return f"model_soc{soc * 100:06.2f}_T{temp:07.2f}.cidr"


def save_grid(grid: ModelGrid, out_dir) -> list[Path]:
    """Write every model of ``grid`` plus the ``grid.json`` index; returns written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries, written = [], []
    for (soc, temp), model in sorted(grid.models.items()):
        name = model_filename(soc, temp)
        p = save_model(model, out / name)
        written += [p, sidecar_path(p)]
        entries.append({"soc": soc, "temperature_K": temp, "file": name})
    index = {"config": grid.config.to_dict(), "models": entries}
    if grid.params is not None:
        (out / GRID_PARAMS).write_text(dump_params(grid.params), encoding="utf-8")
        written.append(out / GRID_PARAMS)
        index["params"] = GRID_PARAMS
    (out / GRID_INDEX).write_text(_dumps(index), encoding="utf-8")
    written.append(out / GRID_INDEX)
    return written


def load_grid(model_dir) -> ModelGrid:
    d = Path(model_dir)
    idx = d / GRID_INDEX
    if not idx.is_file():
        raise FileNotFoundError(f"no {GRID_INDEX} in {d}")
    index = json.loads(idx.read_text(encoding="utf-8"))
    config = RealisationConfig.from_dict(index["config"])
    models = {}
    for e in index["models"]:
        models[(float(e["soc"]), float(e["temperature_K"]))] = load_model(d / e["file"])
    params = load_params(d / index["params"]) if "params" in index else None
    return ModelGrid(models, config, params=params)
