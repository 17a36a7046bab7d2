"""Workspace persistence: catalog tables as columnar JSON, model graphs as
JSON with parameters in .npy files, and search forests for warm restarts.

Layout::

    <workspace>/
      catalog.json                  # budgets and knobs
      tables/<name>.json
      models/<name>/graph.json
      models/<name>/params/<key>.npy
      models/<name>/forests/<key>.json
      queries/<qid>.json            # written by gen-workload
      manifest.json
"""

from __future__ import annotations

import json
import os

import numpy as np

from . import mlfn, plandoc
from .catalog import Catalog
from .tables import dump_json_doc, load_json_doc


def save_catalog(cat: Catalog, root: str) -> None:
    os.makedirs(os.path.join(root, "tables"), exist_ok=True)
    meta = {
        "memory_budget_bytes": cat.memory_budget_bytes,
        "tile_width": cat.tile_width,
        "histogram_buckets": cat.histogram_buckets,
        "tables": [],
        "models": sorted(cat.models),
    }
    for name, table in sorted(cat.tables.items()):
        if name.startswith("$"):
            continue  # derived relations are rebuilt on demand
        meta["tables"].append(name)
        with open(os.path.join(root, "tables", f"{name}.json"), "w") as f:
            json.dump(dump_json_doc(table), f)
    for name in sorted(cat.models):
        mdir = os.path.join(root, "models", name)
        os.makedirs(os.path.join(mdir, "params"), exist_ok=True)
        with open(os.path.join(mdir, "graph.json"), "w") as f:
            json.dump(plandoc.graph_to_doc(cat.models[name]), f)
        prefix = name + "."
        for ref, arr in cat.params.items():
            if ref.startswith(prefix):
                key = ref[len(prefix):]
                np.save(os.path.join(mdir, "params", f"{key}.npy"), arr)
        forests = {
            ref[len(prefix):]: obj
            for ref, obj in cat.forests.items()
            if ref.startswith(prefix)
        }
        if forests:
            os.makedirs(os.path.join(mdir, "forests"), exist_ok=True)
            for key, obj in forests.items():
                if isinstance(obj, mlfn.Tree):
                    doc = {"tree": obj.to_doc()}
                else:
                    doc = obj.to_doc()
                with open(os.path.join(mdir, "forests", f"{key}.json"), "w") as f:
                    json.dump(doc, f)
    with open(os.path.join(root, "catalog.json"), "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)


def load_catalog(root: str) -> Catalog:
    with open(os.path.join(root, "catalog.json")) as f:
        meta = json.load(f)
    cat = Catalog(
        memory_budget_bytes=meta["memory_budget_bytes"],
        tile_width=meta["tile_width"],
        histogram_buckets=meta.get("histogram_buckets", 32),
    )
    for name in meta["tables"]:
        with open(os.path.join(root, "tables", f"{name}.json")) as f:
            cat.register_table(name, load_json_doc(json.load(f)))
    for name in meta["models"]:
        mdir = os.path.join(root, "models", name)
        weights = {}
        pdir = os.path.join(mdir, "params")
        if os.path.isdir(pdir):
            for fn in sorted(os.listdir(pdir)):
                if fn.endswith(".npy"):
                    weights[fn[:-4]] = np.load(os.path.join(pdir, fn))
        forests = {}
        fdir = os.path.join(mdir, "forests")
        if os.path.isdir(fdir):
            for fn in sorted(os.listdir(fdir)):
                with open(os.path.join(fdir, fn)) as f:
                    doc = json.load(f)
                if "tree" in doc:
                    forests[fn[:-5]] = mlfn.Tree.from_doc(doc["tree"])
                else:
                    forests[fn[:-5]] = mlfn.Forest.from_doc(doc)
        # params must be visible while the graph doc is rebuilt
        for key, w in weights.items():
            cat.params[f"{name}.{key}"] = w
        for key, obj in forests.items():
            cat.forests[f"{name}.{key}"] = obj
        with open(os.path.join(mdir, "graph.json")) as f:
            graph = plandoc.graph_from_doc(json.load(f), cat, path=f"model.{name}")
        for key in weights:
            del cat.params[f"{name}.{key}"]
        for key in forests:
            del cat.forests[f"{name}.{key}"]
        cat.register_model(name, graph, weights, forests)
    return cat
