"""
dataset.py – Operator-learning datasets.

An OperatorDataset is the (branch input, query point, target) triplet
layout shared by training, fine-tuning and evaluation:

    branch_inputs : (n, m)      input functions at the m sensors
    queries       : (Q, d)      one query grid shared by every function, or
                    (n, Q, d)   a grid per function (imported data)
    targets       : (n, Q)      reference outputs at the queries
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numpy.typing import NDArray

from .errors import DimensionMismatch
from .types import GaussianFieldSpec, ProblemKind


@dataclass(frozen=True)
class OperatorDataset:
    branch_inputs: NDArray[np.float64]
    queries:       NDArray[np.float64]
    targets:       NDArray[np.float64]
    sensors:       NDArray[np.float64]
    problem:       ProblemKind                 = ProblemKind.EXTERNAL
    field:         Optional[GaussianFieldSpec] = None
    seed:          Optional[int]               = None

    def __post_init__(self) -> None:
        for name in ("branch_inputs", "queries", "targets", "sensors"):
            value = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            object.__setattr__(self, name, value)
        n, m = self.branch_inputs.shape if self.branch_inputs.ndim == 2 else (-1, -1)
        if n < 1:
            raise DimensionMismatch("(n, m) with n >= 1", self.branch_inputs.shape, "branch inputs")
        if self.sensors.shape != (m,):
            raise DimensionMismatch((m,), self.sensors.shape, "sensor grid")
        if self.queries.ndim == 2:
            q = self.queries.shape[0]
        elif self.queries.ndim == 3 and self.queries.shape[0] == n:
            q = self.queries.shape[1]
        else:
            raise DimensionMismatch("(Q, d) or (n, Q, d)", self.queries.shape, "queries")
        if self.targets.shape != (n, q):
            raise DimensionMismatch((n, q), self.targets.shape, "targets")
        for name in ("branch_inputs", "queries", "targets"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"dataset {name} contain non-finite values")

    def __len__(self) -> int:
        return int(self.branch_inputs.shape[0])

    @property
    def sensor_count(self) -> int:
        return int(self.branch_inputs.shape[1])

    @property
    def query_dim(self) -> int:
        return int(self.queries.shape[-1])

    @property
    def shared_queries(self) -> bool:
        return self.queries.ndim == 2

    def queries_for(self, i: int) -> NDArray[np.float64]:
        return self.queries if self.shared_queries else self.queries[i]

    def subset(self, index: Sequence[int]) -> "OperatorDataset":
        idx = np.asarray(index, dtype=np.intp)
        return OperatorDataset(
            branch_inputs = self.branch_inputs[idx],
            queries       = self.queries if self.shared_queries else self.queries[idx],
            targets       = self.targets[idx],
            sensors       = self.sensors,
            problem       = self.problem,
            field         = self.field,
            seed          = self.seed,
        )
