"""JSON network files, CSV/JSON datasets and per-stage snapshot CSVs."""

from __future__ import annotations

import csv
import json
import os

import numpy as np

from .errors import DuplicatePoints, ShapeMismatch
from .geometry import Layer, Network, forward_trace
from .memorize import LabeledDataset

FORMAT_VERSION = 1


# ---------------------------------------------------------------- networks

def _rows(a):
    # float() of a float64 keeps the value; json writes the shortest repr
    return [[float(x) for x in row] for row in np.asarray(a)]


def network_to_dict(net, meta=None):
    layers = []
    for layer in net.layers:
        entry = {"w": _rows(layer.weights), "b": [float(x) for x in layer.bias]}
        if layer.post is not None:
            entry["a"] = _rows(layer.post)
        layers.append(entry)
    return {"format": FORMAT_VERSION, "input_dim": net.input_dim, "layers": layers, "meta": meta or {}}


def network_from_dict(doc):
    try:
        layers = []
        for j, entry in enumerate(doc["layers"]):
            w = np.array(entry["w"], dtype=np.float64).reshape(len(entry["w"]), -1)
            layers.append(Layer(w, np.array(entry["b"], dtype=np.float64), entry.get("a")))
        return Network(layers, int(doc["input_dim"])), doc.get("meta", {})
    except KeyError as exc:
        raise ValueError(f"network file is missing field {exc}") from None


def dumps(doc):
    return json.dumps(doc, sort_keys=True, indent=1, allow_nan=False) + "\n"


def save_network(net, path, meta=None):
    with open(path, "w") as fh:
        fh.write(dumps(network_to_dict(net, meta)))


def load_network(path):
    with open(path) as fh:
        return network_from_dict(json.load(fh))


def trace_meta(trace):
    return [{"name": s.name, "start": s.start, "stop": s.stop} for s in trace.stages]


# ---------------------------------------------------------------- datasets

def _kind_for(labels, columns):
    if columns > 1:
        return "vector"
    if np.all(labels >= 0) and np.all(labels == np.round(labels)):
        return "class"
    return "real"


def dataset_from_arrays(points, labels, label_kind=None):
    labels = np.asarray(labels, dtype=np.float64)
    cols = labels.shape[1] if labels.ndim == 2 else 1
    if cols == 1 and labels.ndim == 2:
        labels = labels[:, 0]
    kind = label_kind or _kind_for(labels, cols)
    return LabeledDataset(points, labels, kind)


def _read_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        rows = [r for r in reader if r and any(c.strip() for c in r)]
    xs = [i for i, h in enumerate(header) if h.startswith("x")]
    if "label" in header:
        ys = [header.index("label")]
        kind = None
    else:
        ys = [i for i, h in enumerate(header) if h.startswith("y")]
        kind = "vector" if len(ys) > 1 else None
    if not xs or not ys:
        raise ValueError(f"{path}: header needs x1..xd and label (or y1..ym) columns")
    try:
        data = np.array([[float(r[i]) for i in range(len(header))] for r in rows])
    except (ValueError, IndexError) as exc:
        raise ValueError(f"{path}: malformed row ({exc})") from None
    if data.size == 0:
        raise ValueError(f"{path}: no data rows")
    return data[:, xs], data[:, ys], kind


def load_dataset(path):
    """Read a CSV (x1..xd,label or y1..ym) or JSON {points, labels[, label_kind]}."""
    try:
        if str(path).endswith(".json"):
            with open(path) as fh:
                doc = json.load(fh)
            return dataset_from_arrays(doc["points"], doc["labels"], doc.get("label_kind"))
        X, Y, kind = _read_csv(path)
        return dataset_from_arrays(X, Y, kind)
    except DuplicatePoints as exc:
        rows = ", ".join(f"{i} and {j}" for i, j in exc.pairs[:10])
        raise DuplicatePoints(f"{path}: duplicate points at data rows {rows}", exc.pairs) from None


def save_dataset(ds, path):
    if str(path).endswith(".json"):
        doc = {"points": _rows(ds.points), "labels": ds.labels.tolist(), "label_kind": ds.label_kind}
        with open(path, "w") as fh:
            fh.write(dumps(doc))
        return
    Y = ds.labels.reshape(ds.N, -1)
    header = [f"x{k + 1}" for k in range(ds.d)]
    header += ["label"] if ds.labels.ndim == 1 else [f"y{k + 1}" for k in range(Y.shape[1])]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for x, y in zip(ds.points, Y):
            w.writerow([repr(float(v)) for v in x] + [repr(float(v)) for v in y])


# ---------------------------------------------------------------- traces

def stage_snapshots(net, meta, X):
    """(name, positions) after every recorded stage; a depth-0 net gives the input."""
    if net.depth == 0:
        return [("input", np.asarray(X, dtype=np.float64))]
    stages = meta.get("stages") if meta else None
    if not stages:
        raise ValueError("network file has no stage metadata")
    states = forward_trace(net, X)
    out = []
    for s in stages:
        if not 0 < s["stop"] <= net.depth:
            raise ShapeMismatch(f"stage {s['name']} ends at layer {s['stop']} of {net.depth}")
        out.append((s["name"], states[s["stop"] - 1]))
    return out


def write_stage_csvs(snapshots, labels, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    Y = np.asarray(labels, dtype=np.float64).reshape(len(labels), -1)
    paths = []
    for k, (name, P) in enumerate(snapshots):
        P = np.asarray(P).reshape(len(Y), -1)
        path = os.path.join(out_dir, f"stage{k}_{name}.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            lab = ["label"] if Y.shape[1] == 1 else [f"y{j + 1}" for j in range(Y.shape[1])]
            w.writerow(["point_id"] + lab + [f"c{j + 1}" for j in range(P.shape[1])])
            for i in range(len(Y)):
                w.writerow([i] + [repr(float(v)) for v in Y[i]] + [repr(float(v)) for v in P[i]])
        paths.append(path)
    return paths
