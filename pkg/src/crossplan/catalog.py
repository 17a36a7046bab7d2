"""Catalog of tables, registered models, parameters and derived relations.

Model weights larger than half the memory budget are materialized as tiled
parameter relations at registration time, so tensor-relational rewrites can
scan them like data. Matrices are tiled vertically (by output columns);
each tile row stores the transposed column block, and the last tile may be
ragged. Only 1-D and 2-D parameters can be tiled.

Catalog mutation is single-writer; all stored objects are immutable, so
concurrent readers always see consistent snapshots.
"""

from __future__ import annotations

import json
from typing import Mapping

import numpy as np

from . import mlfn
from .errors import CrossplanError, UnknownModel, UnknownTable
from .tables import (
    INT64,
    TEXT,
    Schema,
    Statistics,
    Table,
    schema,
    stats_collect,
    table_create,
    tensor,
    vector,
)

DEFAULT_MEMORY_BUDGET = 256 * 1024 * 1024
DEFAULT_TILE_WIDTH = 64

TILE_PREFIX = "$tiles/"
TREE_PREFIX = "$trees/"
CENTROID_PREFIX = "$centroids/"


class Catalog:
    def __init__(
        self,
        memory_budget_bytes: int = DEFAULT_MEMORY_BUDGET,
        tile_width: int = DEFAULT_TILE_WIDTH,
        histogram_buckets: int = 32,
    ):
        if memory_budget_bytes <= 0:
            raise CrossplanError("memory budget must be positive")
        self.memory_budget_bytes = memory_budget_bytes
        self.tile_width = tile_width
        self.histogram_buckets = histogram_buckets
        self.tables: dict[str, Table] = {}
        self.models: dict[str, mlfn.MLGraph] = {}
        self.params: dict[str, np.ndarray] = {}
        self.forests: dict[str, mlfn.Forest | mlfn.Tree] = {}
        self._stats: dict[str, Statistics] = {}

    # -- tables -------------------------------------------------------------

    def register_table(self, name: str, table: Table) -> None:
        self.tables[name] = table
        self._stats.pop(name, None)

    def table(self, name: str) -> Table:
        if name not in self.tables:
            raise UnknownTable(name)
        return self.tables[name]

    def table_stats(self, name: str) -> Statistics:
        if name not in self._stats:
            self._stats[name] = stats_collect(self.table(name), self.histogram_buckets)
        return self._stats[name]

    # -- parameters ---------------------------------------------------------

    def param(self, ref: str) -> np.ndarray:
        if ref not in self.params:
            raise UnknownModel(f"parameter {ref!r} not registered")
        return self.params[ref]

    def has_param(self, ref: str) -> bool:
        return ref in self.params or ref in self.forests

    def forest(self, ref: str):
        if ref not in self.forests:
            raise UnknownModel(f"forest {ref!r} not registered")
        return self.forests[ref]

    # -- models -------------------------------------------------------------

    def register_model(
        self,
        name: str,
        graph: mlfn.MLGraph,
        weights: Mapping[str, np.ndarray] | None = None,
        forests: Mapping[str, mlfn.Forest | mlfn.Tree] | None = None,
    ) -> None:
        """Register a computation graph under ``name``. Weight keys are
        namespaced to ``name.key``; graph nodes must already use the
        namespaced refs. Oversized weights are materialized as tile
        relations immediately."""
        if name in self.models:
            raise CrossplanError(f"model {name!r} already registered")
        for key, w in (weights or {}).items():
            self.params[f"{name}.{key}"] = np.asarray(w, dtype=np.float64)
        for key, f in (forests or {}).items():
            self.forests[f"{name}.{key}"] = f
        self.models[name] = graph
        for key in weights or {}:
            ref = f"{name}.{key}"
            arr = self.params[ref]
            if arr.ndim <= 2 and arr.nbytes > self.memory_budget_bytes / 2:
                self.materialize(ref)

    def model(self, name: str) -> mlfn.MLGraph:
        if name not in self.models:
            raise UnknownModel(name)
        return self.models[name]

    # -- tiled parameter relations -------------------------------------------

    def tile_table_name(self, ref: str) -> str:
        return TILE_PREFIX + ref

    def is_materialized(self, ref: str) -> bool:
        return self.tile_table_name(ref) in self.tables

    def materialize(self, ref: str, tile_width: int | None = None) -> str:
        """Create (or return) the tile relation for a 1-D or 2-D parameter."""
        tname = self.tile_table_name(ref)
        if tname in self.tables:
            return tname
        arr = self.param(ref)
        width = tile_width or self.tile_width
        if arr.ndim == 2:
            k, m = arr.shape
            tile_shape = (min(width, m), k)
            rows = []
            for i, start in enumerate(range(0, m, width)):
                block = np.ascontiguousarray(arr[:, start : start + width].T)
                rows.append([i, block])
            sch = schema([("col_id", INT64), ("w_tile", tensor(tile_shape))])
        elif arr.ndim == 1:
            (m,) = arr.shape
            tile_shape = (min(width, m),)
            rows = []
            for i, start in enumerate(range(0, m, width)):
                rows.append([i, arr[start : start + width]])
            sch = schema([("col_id", INT64), ("w_tile", tensor(tile_shape))])
        else:
            raise CrossplanError(
                f"cannot tile {arr.ndim}-d parameter {ref!r}; only 1-d and 2-d supported"
            )
        self.register_table(tname, table_create(sch, rows))
        return tname

    def assemble_tiles(self, ref: str) -> np.ndarray:
        """Rebuild the original tensor from its tile relation (ordered by
        col_id); inverse of :meth:`materialize`."""
        t = self.table(self.tile_table_name(ref))
        order = np.argsort(np.asarray(t.column("col_id")))
        blocks = [t.column("w_tile")[i] for i in order]
        if blocks[0].ndim == 2:
            return np.concatenate([b.T for b in blocks], axis=1)
        return np.concatenate(blocks)

    # -- relations for forests and centroid sets ------------------------------

    def forest_table_name(self, ref: str) -> str:
        return TREE_PREFIX + ref

    def materialize_forest(self, ref: str) -> str:
        tname = self.forest_table_name(ref)
        if tname in self.tables:
            return tname
        forest = self.forest(ref)
        if isinstance(forest, mlfn.Tree):
            forest = mlfn.Forest((forest,))
        sch = schema([("tree_id", INT64), ("tree", TEXT)])
        rows = [
            [i, json.dumps(t.to_doc(), separators=(",", ":"))]
            for i, t in enumerate(forest.trees)
        ]
        self.register_table(tname, table_create(sch, rows))
        return tname

    def centroid_table_name(self, ref: str) -> str:
        return CENTROID_PREFIX + ref

    def materialize_centroids(self, ref: str) -> str:
        tname = self.centroid_table_name(ref)
        if tname in self.tables:
            return tname
        c = self.param(ref)
        if c.ndim != 2:
            raise CrossplanError(f"centroid parameter {ref!r} must be 2-d")
        sch = schema([("centroid_id", INT64), ("centroid", vector(c.shape[1]))])
        rows = [[i, c[i]] for i in range(c.shape[0])]
        self.register_table(tname, table_create(sch, rows))
        return tname

    # -- derived parameter slices (factorized rewrites) ------------------------

    def derive_row_slice(self, ref: str, start: int, stop: int) -> str:
        """Register (idempotently) the row slice ``param[start:stop]`` and
        return its ref. Used when a weight is split across join sides."""
        new_ref = f"{ref}[r{start}:{stop}]"
        if new_ref not in self.params:
            arr = self.param(ref)
            if arr.ndim != 2:
                raise CrossplanError(f"row slice needs a 2-d parameter, got {arr.ndim}-d")
            self.params[new_ref] = np.ascontiguousarray(arr[start:stop, :])
        return new_ref

    def resident_param_bytes(self, ref: str) -> int:
        if ref in self.params:
            return int(self.params[ref].nbytes)
        if ref in self.forests:
            obj = self.forests[ref]
            trees = obj.trees if isinstance(obj, mlfn.Forest) else (obj,)
            # feature/threshold/left/right/value per node
            return sum(len(t.feature) * 40 for t in trees)
        return 0
