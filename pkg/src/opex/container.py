"""
container.py – On-disk format for datasets, checkpoints, surrogates and results.

A container is two files side by side:

    name.json   UTF-8 manifest: kind, a free-form header and one entry per
                array (name, element type "f64", shape, byte offset, CRC32)
    name.bin    every array back to back as little-endian float64

Reading validates the manifest with pydantic, checks that the blob covers
every array and verifies each CRC32 before any array is handed back, so
an export followed by an import gives byte-identical arrays.

Result tables are not containers: they are written as a JSON mirror plus
an RFC-4180 CSV in long format (method, setting, metric, mean, std, ...).

Usage
-----
    export(dataset, out / "train.json")
    data  = import_dataset(out / "train.json")
    model = import_deeponet(out / "model.json")
"""

from __future__ import annotations

import csv
import json
import logging
import zlib
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence, Union

import numpy as np
import torch
from numpy.typing import NDArray
from pydantic import BaseModel, ValidationError, field_validator, model_validator

from .dataset import OperatorDataset
from .deeponet import DeepONet, build_deeponet
from .errors import ChecksumFailure, DimensionMismatch, ManifestMismatch
from .multifidelity import GprModel, MfgprModel, Mfnn
from .solvers import external_problem, problem_for
from .types import (
    DeepONetConfig,
    GaussianFieldSpec,
    KernelKind,
    MfnnConfig,
    ProblemKind,
    ResultRow,
    ResultTable,
    parse_enum,
)

logger = logging.getLogger(__name__)

FORMAT  = "opex-container"
VERSION = 1
_DTYPE  = np.dtype("<f8")
_KINDS  = {"dataset", "deeponet", "gpr", "mfgpr", "mfnn"}

PathLike = Union[str, Path]


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

class ArrayEntry(BaseModel):
    name:   str
    dtype:  str = "f64"
    shape:  list[int]
    offset: int
    nbytes: int
    crc32:  int

    @field_validator("dtype")
    @classmethod
    def validate_dtype(cls, v: str) -> str:
        if v != "f64":
            raise ValueError(f"only f64 arrays are supported, got {v!r}")
        return v

    @model_validator(mode="after")
    def validate_size(self) -> "ArrayEntry":
        if any(n < 0 for n in self.shape) or self.offset < 0:
            raise ValueError(f"array {self.name}: negative shape or offset")
        if self.nbytes != _DTYPE.itemsize * int(np.prod(self.shape, dtype=np.int64)):
            raise ValueError(f"array {self.name}: nbytes does not match shape {self.shape}")
        return self


class Manifest(BaseModel):
    format:  str = FORMAT
    version: int = VERSION
    kind:    str
    header:  dict[str, Any]
    arrays:  list[ArrayEntry]
    blob:    str

    @field_validator("format")
    @classmethod
    def validate_format(cls, v: str) -> str:
        if v != FORMAT:
            raise ValueError(f"not an {FORMAT} manifest: {v!r}")
        return v

    @field_validator("version")
    @classmethod
    def validate_version(cls, v: int) -> int:
        if v != VERSION:
            raise ValueError(f"unsupported container version {v}")
        return v

    @field_validator("kind")
    @classmethod
    def validate_kind(cls, v: str) -> str:
        if v not in _KINDS:
            raise ValueError(f"unknown container kind {v!r}")
        return v

    def entry(self, name: str) -> ArrayEntry:
        for entry in self.arrays:
            if entry.name == name:
                return entry
        raise ManifestMismatch(f"array {name!r} missing from {self.kind} container")


def write_container(
    path: PathLike,
    kind: str,
    header: Mapping[str, Any],
    arrays: Mapping[str, NDArray[np.float64]],
) -> Manifest:
    """Write ``arrays`` to the blob next to ``path`` and the manifest to ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob_path = path.with_suffix(".bin")
    entries: list[ArrayEntry] = []
    offset = 0
    with blob_path.open("wb") as fh:
        for name, arr in arrays.items():
            raw = np.ascontiguousarray(arr, dtype=_DTYPE).tobytes()
            fh.write(raw)
            entries.append(ArrayEntry(name=name, shape=list(np.shape(arr)), offset=offset,
                                      nbytes=len(raw), crc32=zlib.crc32(raw)))
            offset += len(raw)
    manifest = Manifest(kind=kind, header=dict(header), arrays=entries, blob=blob_path.name)
    path.write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
    logger.info("Wrote %s container %s (%d arrays, %d bytes)", kind, path, len(entries), offset)
    return manifest


def read_container(
    path: PathLike, kind: Optional[str] = None
) -> tuple[Manifest, dict[str, NDArray[np.float64]]]:
    path = Path(path)
    try:
        manifest = Manifest.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as exc:
        raise ManifestMismatch(f"{path}: {exc.errors()[0]['msg']}") from exc
    if kind is not None and manifest.kind != kind:
        raise ManifestMismatch(f"expected a {kind} container, {path} holds {manifest.kind}")
    blob = (path.parent / manifest.blob).read_bytes()
    arrays: dict[str, NDArray[np.float64]] = {}
    for entry in manifest.arrays:
        raw = blob[entry.offset:entry.offset + entry.nbytes]
        got = zlib.crc32(raw)
        if len(raw) != entry.nbytes or got != entry.crc32:
            raise ChecksumFailure(entry.name, entry.crc32, got)
        arr = np.frombuffer(raw, dtype=_DTYPE).astype(np.float64).reshape(entry.shape)
        arrays[entry.name] = arr
    return manifest, arrays


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

def export_dataset(dataset: OperatorDataset, path: PathLike) -> Manifest:
    header = {
        "problem":   dataset.problem.name,
        "query_dim": dataset.query_dim,
        "field":     None if dataset.field is None else dataset.field.model_dump(mode="json"),
        "seed":      dataset.seed,
    }
    return write_container(path, "dataset", header, {
        "branch_inputs": dataset.branch_inputs,
        "queries":       dataset.queries,
        "targets":       dataset.targets,
        "sensors":       dataset.sensors,
    })


def import_dataset(path: PathLike) -> OperatorDataset:
    """
    Load a dataset, including ones solved outside opex.  The header's
    query_dim must match the trailing dimension of the queries array.
    """
    manifest, arrays = read_container(path, "dataset")
    header = manifest.header
    try:
        problem = parse_enum(ProblemKind, header.get("problem", "EXTERNAL"))
        field   = header.get("field")
        declared = int(header["query_dim"])
    except (KeyError, ValueError, TypeError) as exc:
        raise ManifestMismatch(f"bad dataset header: {exc}") from exc
    for name in ("branch_inputs", "queries", "targets", "sensors"):
        manifest.entry(name)
    queries = arrays["queries"]
    if queries.shape[-1] != declared:
        raise ManifestMismatch(f"header declares query dimension {declared}, "
                               f"queries have {queries.shape[-1]}")
    try:
        return OperatorDataset(
            branch_inputs = arrays["branch_inputs"],
            queries       = queries,
            targets       = arrays["targets"],
            sensors       = arrays["sensors"],
            problem       = ProblemKind(problem),
            field         = None if field is None else GaussianFieldSpec.model_validate(field),
            seed          = header.get("seed"),
        )
    except (ValueError, DimensionMismatch) as exc:
        raise ManifestMismatch(str(exc)) from exc


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------

def _state_arrays(module: torch.nn.Module, prefix: str = "") -> dict[str, NDArray[np.float64]]:
    return {prefix + k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def _load_state(module: torch.nn.Module, arrays: Mapping[str, NDArray[np.float64]]) -> None:
    expected = module.state_dict()
    if set(expected) != set(arrays):
        raise ManifestMismatch(f"parameter names differ: {sorted(set(expected) ^ set(arrays))}")
    for name, tensor in expected.items():
        if tuple(tensor.shape) != arrays[name].shape:
            raise ManifestMismatch(f"parameter {name}: expected shape {tuple(tensor.shape)}, "
                                   f"got {arrays[name].shape}")
    module.load_state_dict({k: torch.as_tensor(v) for k, v in arrays.items()})


def export_deeponet(
    model: DeepONet,
    path: PathLike,
    *,
    iteration: Optional[int] = None,
    metrics: Optional[Mapping[str, float]] = None,
    coefficients: Optional[Mapping[str, float]] = None,
) -> Manifest:
    header = {
        "config":       model.config.model_dump(mode="json"),
        "problem":      model.problem_kind.name,
        "coefficients": dict(coefficients or {}),
        "iteration":    iteration,
        "metrics":      dict(metrics or {}),
    }
    return write_container(path, "deeponet", header, _state_arrays(model))


def import_deeponet(path: PathLike) -> DeepONet:
    """Rebuild a checkpointed DeepONet, re-attaching its problem's hard constraint."""
    manifest, arrays = read_container(path, "deeponet")
    try:
        config  = DeepONetConfig.model_validate(manifest.header["config"])
        kind    = ProblemKind(parse_enum(ProblemKind, manifest.header["problem"]))
        coeffs  = manifest.header.get("coefficients") or {}
    except (KeyError, ValueError) as exc:
        raise ManifestMismatch(f"bad checkpoint header: {exc}") from exc
    problem = external_problem(config.query_dim) if kind is ProblemKind.EXTERNAL \
        else problem_for(kind, **coeffs)
    model = build_deeponet(config, problem)
    _load_state(model, arrays)
    return model


def _gpr_header(model: GprModel) -> dict[str, Any]:
    return {
        "kernel":          model.kernel.name,
        "length_scale":    model.length_scale,
        "signal_variance": model.signal_variance,
        "noise_variance":  model.noise_variance,
        "nlml":            model.nlml,
        "periodicity":     model.periodicity,
    }


def _gpr_arrays(model: GprModel, prefix: str = "") -> dict[str, NDArray[np.float64]]:
    return {prefix + name: getattr(model, name) for name in ("x", "y", "beta", "chol", "alpha")}


def _parse_gpr(header: Mapping[str, Any], arrays: Mapping[str, NDArray[np.float64]],
               prefix: str = "") -> GprModel:
    try:
        return GprModel(
            kernel          = KernelKind(parse_enum(KernelKind, header["kernel"])),
            length_scale    = float(header["length_scale"]),
            signal_variance = float(header["signal_variance"]),
            noise_variance  = float(header["noise_variance"]),
            x               = arrays[prefix + "x"],
            y               = arrays[prefix + "y"],
            beta            = arrays[prefix + "beta"],
            chol            = arrays[prefix + "chol"],
            alpha           = arrays[prefix + "alpha"],
            nlml            = float(header["nlml"]),
            periodicity     = float(header.get("periodicity", 1.0)),
        )
    except (KeyError, ValueError) as exc:
        raise ManifestMismatch(f"bad GPR payload: {exc}") from exc


def export_gpr(model: GprModel, path: PathLike) -> Manifest:
    return write_container(path, "gpr", _gpr_header(model), _gpr_arrays(model))


def import_gpr(path: PathLike) -> GprModel:
    manifest, arrays = read_container(path, "gpr")
    return _parse_gpr(manifest.header, arrays)


def export_mfgpr(model: MfgprModel, path: PathLike) -> Manifest:
    header = {"low": _gpr_header(model.low), "delta": _gpr_header(model.delta),
              "rho": model.rho, "fixed_rho": model.fixed_rho}
    return write_container(path, "mfgpr", header,
                           {**_gpr_arrays(model.low, "low."), **_gpr_arrays(model.delta, "delta.")})


def import_mfgpr(path: PathLike) -> MfgprModel:
    manifest, arrays = read_container(path, "mfgpr")
    header = manifest.header
    return MfgprModel(
        low       = _parse_gpr(header.get("low", {}), arrays, "low."),
        delta     = _parse_gpr(header.get("delta", {}), arrays, "delta."),
        rho       = float(header.get("rho", 0.0)),
        fixed_rho = bool(header.get("fixed_rho", False)),
    )


def export_mfnn(model: Mfnn, path: PathLike) -> Manifest:
    header = {"config": model.config.model_dump(mode="json"), "query_dim": model.query_dim}
    return write_container(path, "mfnn", header, _state_arrays(model))


def import_mfnn(path: PathLike) -> Mfnn:
    manifest, arrays = read_container(path, "mfnn")
    try:
        model = Mfnn(int(manifest.header["query_dim"]),
                     MfnnConfig.model_validate(manifest.header["config"]))
    except (KeyError, ValueError) as exc:
        raise ManifestMismatch(f"bad MFNN header: {exc}") from exc
    _load_state(model, arrays)
    return model


# ---------------------------------------------------------------------------
# Result tables
# ---------------------------------------------------------------------------

CSV_COLUMNS = ["method", "setting", "metric", "mean", "std", "runtime_s", "count", "config_hash"]


def write_csv(rows: Sequence[ResultRow], path: PathLike) -> None:
    """Long-format CSV, one column per extra key seen in any row."""
    extras = sorted({key for row in rows for key in row.extras})
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS + extras)
        for row in rows:
            writer.writerow([getattr(row, col) for col in CSV_COLUMNS]
                            + [row.extras.get(key, "") for key in extras])


def export_table(table: ResultTable, path: PathLike) -> tuple[Path, Path]:
    """Write ``path`` with .json and .csv suffixes; rows in stable (method, setting) order."""
    path      = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    json_path = path.with_suffix(".json")
    csv_path  = path.with_suffix(".csv")
    ordered   = table.model_copy(update={"rows": table.sorted_rows()})
    json_path.write_text(ordered.model_dump_json(indent=2), encoding="utf-8")
    write_csv(ordered.rows, csv_path)
    logger.info("Wrote result table %s (%d rows)", json_path, len(table.rows))
    return json_path, csv_path


def import_table(path: PathLike) -> ResultTable:
    json_path = Path(path).with_suffix(".json")
    try:
        return ResultTable.model_validate(json.loads(json_path.read_text(encoding="utf-8")))
    except (ValidationError, json.JSONDecodeError) as exc:
        raise ManifestMismatch(f"{json_path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------

Exportable = Union[OperatorDataset, DeepONet, GprModel, MfgprModel, Mfnn, ResultTable]


def export(obj: Exportable, path: PathLike) -> Path:
    """Write any dataset, model or result table; returns the manifest (or JSON) path."""
    if isinstance(obj, OperatorDataset):
        export_dataset(obj, path)
    elif isinstance(obj, DeepONet):
        export_deeponet(obj, path)
    elif isinstance(obj, MfgprModel):
        export_mfgpr(obj, path)
    elif isinstance(obj, GprModel):
        export_gpr(obj, path)
    elif isinstance(obj, Mfnn):
        export_mfnn(obj, path)
    elif isinstance(obj, ResultTable):
        return export_table(obj, path)[0]
    else:
        raise TypeError(f"cannot export {type(obj).__name__}")
    return Path(path)


def load(path: PathLike) -> Exportable:
    """Inverse of :func:`export`, dispatching on the manifest kind."""
    path = Path(path)
    try:
        kind = json.loads(path.read_text(encoding="utf-8")).get("kind")
    except json.JSONDecodeError as exc:
        raise ManifestMismatch(f"{path}: not JSON") from exc
    loaders = {
        "dataset":  import_dataset,
        "deeponet": import_deeponet,
        "gpr":      import_gpr,
        "mfgpr":    import_mfgpr,
        "mfnn":     import_mfnn,
    }
    if kind is None:
        return import_table(path)
    if kind not in loaders:
        raise ManifestMismatch(f"unknown container kind {kind!r}")
    return loaders[kind](path)   # type: ignore[operator]
