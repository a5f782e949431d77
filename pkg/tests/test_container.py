"""
tests/test_container.py – Manifest + blob containers and result tables.

They verify that:
  1. Arrays survive a write/read cycle bit for bit, and re-exporting an
     imported object reproduces the blob byte for byte.
  2. Truncated or corrupted blobs raise ChecksumFailure; bad manifests,
     wrong kinds, missing arrays and inconsistent headers raise
     ManifestMismatch.
  3. Externally produced datasets with per-function 2-D query grids load
     as EXTERNAL problems.
  4. DeepONet checkpoints, GPR, MFGPR and MFNN surrogates predict exactly
     as before after a round trip; checkpoints re-attach hard constraints.
  5. Result tables are written as sorted JSON plus CSV with extra columns,
     and load() dispatches on the manifest kind.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
import pytest

from opex.container import (
    CSV_COLUMNS,
    export,
    export_dataset,
    export_deeponet,
    export_table,
    import_dataset,
    import_deeponet,
    import_gpr,
    import_mfgpr,
    import_mfnn,
    import_table,
    load,
    read_container,
    write_container,
)
from opex.dataset import OperatorDataset
from opex.deeponet import build_deeponet, dataset_predictions, predict
from opex.errors import ChecksumFailure, ManifestMismatch
from opex.fields import sensor_grid
from opex.multifidelity import (
    gpr_fit,
    gpr_predict,
    mfgpr_fit,
    mfgpr_predict,
    mfnn_fit,
    mfnn_predict,
)
from opex.solvers import generate_dataset, problem_for
from opex.types import (
    DeepONetConfig,
    GaussianFieldSpec,
    KernelKind,
    MfnnConfig,
    ProblemKind,
    ResultRow,
    ResultTable,
)

M = 10


def _dataset(n: int = 3) -> OperatorDataset:
    return generate_dataset(problem_for(ProblemKind.ANTIDERIVATIVE),
                            GaussianFieldSpec(length_scale=0.4), n=n, seed=11,
                            sensors=sensor_grid(M))


def _config(**kwargs) -> DeepONetConfig:
    defaults = dict(sensor_count=M, branch_depth=2, branch_width=8, trunk_depth=2,
                    trunk_width=8, latent_width=8, seed=1)
    return DeepONetConfig(**{**defaults, **kwargs})


def _row(**kwargs) -> ResultRow:
    defaults = dict(method="gpr", setting="n_obs=5", mean=0.1, std=0.01, config_hash="abc")
    return ResultRow(**{**defaults, **kwargs})


def _external(path: Path, n: int = 2, q: int = 6, **header) -> None:
    rng = np.random.default_rng(0)
    write_container(path, "dataset", {"problem": "EXTERNAL", "query_dim": 2, **header}, {
        "branch_inputs": rng.standard_normal((n, M)),
        "queries":       rng.uniform(size=(n, q, 2)),
        "targets":       rng.standard_normal((n, q)),
        "sensors":       sensor_grid(M),
    })


# ---------------------------------------------------------------------------
# Raw containers
# ---------------------------------------------------------------------------

class TestRawContainer:
    def test_round_trip_is_exact(self, tmp_path: Path, rng: np.random.Generator) -> None:
        arrays = {"a": rng.standard_normal((3, 4)), "b": np.array([np.pi, -0.0, 1e-300])}
        manifest = write_container(tmp_path / "x.json", "dataset", {"note": "hi"}, arrays)
        assert manifest.blob == "x.bin"
        assert [e.offset for e in manifest.arrays] == [0, 96]
        got_manifest, got = read_container(tmp_path / "x.json")
        assert got_manifest.header == {"note": "hi"}
        for name, arr in arrays.items():
            assert got[name].tobytes() == arr.tobytes()

    def test_truncated_blob(self, tmp_path: Path) -> None:
        write_container(tmp_path / "x.json", "dataset", {}, {"a": np.arange(10.0)})
        blob = tmp_path / "x.bin"
        blob.write_bytes(blob.read_bytes()[:-8])
        with pytest.raises(ChecksumFailure) as exc:
            read_container(tmp_path / "x.json")
        assert exc.value.array == "a"

    def test_corrupted_byte(self, tmp_path: Path) -> None:
        write_container(tmp_path / "x.json", "dataset", {}, {"a": np.arange(4.0), "b": np.ones(2)})
        blob = tmp_path / "x.bin"
        data = bytearray(blob.read_bytes())
        data[33] ^= 0xFF
        blob.write_bytes(bytes(data))
        with pytest.raises(ChecksumFailure) as exc:
            read_container(tmp_path / "x.json")
        assert exc.value.array == "b"

    def test_wrong_kind(self, tmp_path: Path) -> None:
        write_container(tmp_path / "x.json", "gpr", {}, {})
        with pytest.raises(ManifestMismatch, match="expected a dataset"):
            read_container(tmp_path / "x.json", "dataset")

    @pytest.mark.parametrize("field, value", [("format", "other"), ("version", 2),
                                              ("kind", "spreadsheet")])
    def test_bad_manifest(self, tmp_path: Path, field: str, value: object) -> None:
        path = tmp_path / "x.json"
        write_container(path, "dataset", {}, {"a": np.zeros(2)})
        doc = json.loads(path.read_text())
        doc[field] = value
        path.write_text(json.dumps(doc))
        with pytest.raises(ManifestMismatch):
            read_container(path)

    def test_inconsistent_entry_size(self, tmp_path: Path) -> None:
        path = tmp_path / "x.json"
        write_container(path, "dataset", {}, {"a": np.zeros(2)})
        doc = json.loads(path.read_text())
        doc["arrays"][0]["shape"] = [3]
        path.write_text(json.dumps(doc))
        with pytest.raises(ManifestMismatch, match="nbytes"):
            read_container(path)


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

class TestDatasets:
    def test_round_trip(self, tmp_path: Path) -> None:
        data = _dataset()
        export_dataset(data, tmp_path / "train.json")
        got = import_dataset(tmp_path / "train.json")
        for name in ("branch_inputs", "queries", "targets", "sensors"):
            assert getattr(got, name).tobytes() == getattr(data, name).tobytes()
        assert got.problem is ProblemKind.ANTIDERIVATIVE
        assert got.field == data.field
        assert got.seed == 11

    def test_reexport_is_byte_identical(self, tmp_path: Path) -> None:
        export_dataset(_dataset(), tmp_path / "a.json")
        export_dataset(import_dataset(tmp_path / "a.json"), tmp_path / "b.json")
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()

    def test_external_two_dimensional(self, tmp_path: Path) -> None:
        _external(tmp_path / "ext.json", n=2, q=6)
        data = import_dataset(tmp_path / "ext.json")
        assert data.problem is ProblemKind.EXTERNAL
        assert not data.shared_queries
        assert data.queries_for(1).shape == (6, 2)
        assert data.field is None and data.seed is None

    def test_declared_dimension_mismatch(self, tmp_path: Path) -> None:
        _external(tmp_path / "ext.json", query_dim=1)
        with pytest.raises(ManifestMismatch, match="query dimension"):
            import_dataset(tmp_path / "ext.json")

    def test_missing_array(self, tmp_path: Path) -> None:
        write_container(tmp_path / "x.json", "dataset", {"query_dim": 1},
                        {"branch_inputs": np.zeros((1, 2)), "queries": np.zeros((3, 1))})
        with pytest.raises(ManifestMismatch, match="missing"):
            import_dataset(tmp_path / "x.json")

    def test_missing_query_dim(self, tmp_path: Path) -> None:
        write_container(tmp_path / "x.json", "dataset", {}, {"a": np.zeros(1)})
        with pytest.raises(ManifestMismatch, match="header"):
            import_dataset(tmp_path / "x.json")

    def test_inconsistent_shapes(self, tmp_path: Path) -> None:
        write_container(tmp_path / "x.json", "dataset", {"query_dim": 1}, {
            "branch_inputs": np.zeros((2, 3)),
            "queries":       np.zeros((4, 1)),
            "targets":       np.zeros((2, 5)),
            "sensors":       np.linspace(0, 1, 3),
        })
        with pytest.raises(ManifestMismatch):
            import_dataset(tmp_path / "x.json")


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------

class TestModels:
    def test_deeponet_round_trip(self, tmp_path: Path) -> None:
        model = build_deeponet(_config(), problem_for(ProblemKind.ANTIDERIVATIVE))
        export_deeponet(model, tmp_path / "m.json", iteration=500, metrics={"train_loss": 0.1})
        got = import_deeponet(tmp_path / "m.json")
        data = _dataset()
        assert np.array_equal(dataset_predictions(got, data), dataset_predictions(model, data))
        assert got.config == model.config
        assert got.problem_kind is ProblemKind.ANTIDERIVATIVE
        assert predict(got, data.branch_inputs[0], [0.0]) == 0.0
        header = read_container(tmp_path / "m.json")[0].header
        assert header["iteration"] == 500 and header["metrics"] == {"train_loss": 0.1}

    def test_deeponet_coefficients_restored(self, tmp_path: Path) -> None:
        problem = problem_for(ProblemKind.BURGERS, nu=0.05)
        model = build_deeponet(_config(query_dim=2), problem)
        export_deeponet(model, tmp_path / "m.json", coefficients=problem.coefficients)
        export_deeponet(import_deeponet(tmp_path / "m.json"), tmp_path / "n.json",
                        coefficients=problem.coefficients)
        assert (tmp_path / "m.bin").read_bytes() == (tmp_path / "n.bin").read_bytes()

    def test_deeponet_shape_mismatch(self, tmp_path: Path) -> None:
        export_deeponet(build_deeponet(_config()), tmp_path / "m.json")
        doc = json.loads((tmp_path / "m.json").read_text())
        doc["header"]["config"]["trunk_width"] = 9
        (tmp_path / "m.json").write_text(json.dumps(doc))
        with pytest.raises(ManifestMismatch, match="shape"):
            import_deeponet(tmp_path / "m.json")

    def test_gpr_round_trip(self, tmp_path: Path) -> None:
        x = np.linspace(0, 1, 6)
        model = gpr_fit(x, np.cos(3 * x), KernelKind.MATERN15, restarts=1)
        export(model, tmp_path / "g.json")
        got = import_gpr(tmp_path / "g.json")
        q = np.linspace(0, 1, 13)
        assert got.kernel is KernelKind.MATERN15
        assert np.array_equal(gpr_predict(got, q)[0], gpr_predict(model, q)[0])

    def test_mfgpr_round_trip(self, tmp_path: Path) -> None:
        lx, hx = np.linspace(0, 1, 20), np.array([0.1, 0.5, 0.9])
        model = mfgpr_fit(lx, np.sin(3 * lx), hx, 2 * np.sin(3 * hx))
        export(model, tmp_path / "mf.json")
        got = import_mfgpr(tmp_path / "mf.json")
        q = np.linspace(0, 1, 7)
        assert got.rho == model.rho and got.fixed_rho == model.fixed_rho
        assert np.array_equal(mfgpr_predict(got, q), mfgpr_predict(model, q))

    def test_mfnn_round_trip(self, tmp_path: Path) -> None:
        x = np.linspace(0, 1, 10)
        cfg = MfnnConfig(low_depth=2, low_width=6, high_depth=2, high_width=4, iterations=5)
        model, _ = mfnn_fit(x, x ** 2, x[::4], x[::4] ** 2 + 0.1, cfg)
        export(model, tmp_path / "nn.json")
        got = import_mfnn(tmp_path / "nn.json")
        assert got.config == cfg
        assert np.array_equal(mfnn_predict(got, x), mfnn_predict(model, x))


# ---------------------------------------------------------------------------
# Result tables and dispatch
# ---------------------------------------------------------------------------

class TestTables:
    def _table(self) -> ResultTable:
        return ResultTable(config_hash="abc", seeds=[0, 1], version="0.1.0", rows=[
            _row(method="mfgpr", setting="n_obs=5", extras={"rho": 1.2}),
            _row(method="gpr", setting="n_obs=7"),
            _row(method="gpr", setting="n_obs=5", extras={"w2": 0.3}),
        ])

    def test_json_sorted(self, tmp_path: Path) -> None:
        json_path, csv_path = export_table(self._table(), tmp_path / "repair")
        assert json_path.name == "repair.json" and csv_path.name == "repair.csv"
        got = import_table(json_path)
        assert [(r.method, r.setting) for r in got.rows] == [
            ("gpr", "n_obs=5"), ("gpr", "n_obs=7"), ("mfgpr", "n_obs=5")]
        assert got.seeds == [0, 1]

    def test_csv_columns(self, tmp_path: Path) -> None:
        _, csv_path = export_table(self._table(), tmp_path / "repair")
        with csv_path.open(newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == CSV_COLUMNS + ["rho", "w2"]
        assert len(rows) == 4
        assert rows[1][0] == "gpr" and rows[1][-1] == "0.3" and rows[1][-2] == ""

    def test_import_bad_table(self, tmp_path: Path) -> None:
        (tmp_path / "t.json").write_text('{"config_hash": "abc"}')
        with pytest.raises(ManifestMismatch):
            import_table(tmp_path / "t.json")


class TestDispatch:
    def test_load_each_kind(self, tmp_path: Path) -> None:
        x = np.linspace(0, 1, 5)
        objects = {
            "data": _dataset(),
            "model": build_deeponet(_config()),
            "gpr": gpr_fit(x, x ** 2, restarts=0),
            "table": ResultTable(config_hash="h", seeds=[0], version="0.1.0"),
        }
        for name, obj in objects.items():
            path = export(obj, tmp_path / f"{name}.json")
            assert type(load(path)) is type(obj)

    def test_export_unknown_type(self, tmp_path: Path) -> None:
        with pytest.raises(TypeError):
            export("not a model", tmp_path / "x.json")  # type: ignore[arg-type]

    def test_load_not_json(self, tmp_path: Path) -> None:
        (tmp_path / "x.json").write_text("{not json")
        with pytest.raises(ManifestMismatch, match="not JSON"):
            load(tmp_path / "x.json")

    def test_load_unknown_kind(self, tmp_path: Path) -> None:
        (tmp_path / "x.json").write_text('{"kind": "spreadsheet"}')
        with pytest.raises(ManifestMismatch, match="unknown"):
            load(tmp_path / "x.json")
