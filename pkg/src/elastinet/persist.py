"""On-disk formats: model/supernet bundles, datasets, latency tables, pools, logs.

Structured files are sorted-key JSON or CSV text so they diff cleanly; weights
go into a separate blob whose first byte is the layout version, followed by
little-endian float64 arrays in row-major order: head W, b; tail W, b; then for
every block (models: layers in order, supernets: variants in ``(start, j)``
order) each layer's W1, b1, W2, b2.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import Dataset
from .elastic import BinAccuracy, SupernetWeights, TrainRecord
from .engine import PARAM_NAMES, BottleneckBlockParams, Linear, MissingBlockError, ToyClassifier
from .graph import ChainSpec, LayerSpec, SupernetGraph, VariantKey, elasticize, key_str, parse_key
from .latsim import LatencyTable
from .runtime import LogRecord, PoolEntry, SubnetPool
from .search import HistoryRecord

BLOB_VERSION = 1
MODEL_FILE = "model.json"
SUPERNET_FILE = "supernet.json"
META_FILE = "meta.json"
WEIGHTS_FILE = "weights.bin"
_LE_F64 = np.dtype("<f8")


class FormatError(ValueError):
    """Malformed input file; the message starts with ``path:line:``."""

    def __init__(self, path, line: int | None, msg: str):
        where = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{where}: {msg}")
        self.path = str(path)
        self.line = line


# -- small helpers ------------------------------------------------------------------

def dumps_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _write_text(path: Path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)


def _read_json(path: Path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise FormatError(path, None, "file not found") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(path, exc.lineno, f"invalid JSON: {exc.msg} (column {exc.colno})") from None


def _require(doc: dict, key: str, path, kind=None):
    if key not in doc:
        raise FormatError(path, None, f"missing field {key!r}")
    val = doc[key]
    if kind is not None and not isinstance(val, kind):
        raise FormatError(path, None, f"field {key!r} has the wrong type")
    return val


def jsonl_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".jsonl")


def write_jsonl(path, rows: Iterable[dict]):
    _write_text(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))


def read_jsonl(path) -> list[dict]:
    rows = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if line.strip():
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise FormatError(path, lineno, f"invalid JSON: {exc.msg}") from None
    return rows


def _float(text: str, path, lineno: int, what: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise FormatError(path, lineno, f"bad {what} {text!r}") from None


def _int(text: str, path, lineno: int, what: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise FormatError(path, lineno, f"bad {what} {text!r}") from None


def _write_csv(path, header: Sequence[str], rows: Iterable[Sequence], comments: Sequence[str] = ()):
    buf = io.StringIO()
    for c in comments:
        buf.write(f"# {c}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(r)
    _write_text(path, buf.getvalue())


def _read_csv(path, header: Sequence[str]) -> tuple[list[str], list[tuple[int, list[str]]]]:
    """Return (comment lines, [(lineno, fields)]) after checking the header."""
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except FileNotFoundError:
        raise FormatError(path, None, "file not found") from None
    comments, body = [], []
    seen_header = False
    for lineno, line in enumerate(lines, start=1):
        if not seen_header and line.startswith("#"):
            comments.append(line[1:].strip())
            continue
        if not line.strip():
            continue
        fields = next(csv.reader([line]))
        if not seen_header:
            if fields != list(header):
                raise FormatError(path, lineno, f"expected header {','.join(header)}")
            seen_header = True
            continue
        if len(fields) != len(header):
            raise FormatError(path, lineno, f"expected {len(header)} fields, got {len(fields)}")
        body.append((lineno, fields))
    if not seen_header:
        raise FormatError(path, None, "missing header line")
    return comments, body


def _comment_fields(comments: Sequence[str]) -> dict[str, str]:
    out = {}
    for c in comments:
        if ":" in c:
            k, v = c.split(":", 1)
            out[k.strip()] = v.strip()
    return out


# -- weight blob ------------------------------------------------------------------------

def _layer_arrays(p: BottleneckBlockParams) -> list[np.ndarray]:
    return [getattr(p, name) for name in PARAM_NAMES]


def encode_blob(arrays: Iterable[np.ndarray]) -> bytes:
    parts = [bytes([BLOB_VERSION])]
    for a in arrays:
        parts.append(np.ascontiguousarray(a, dtype=_LE_F64).tobytes())
    return b"".join(parts)


class _BlobReader:
    def __init__(self, data: bytes, path):
        if not data:
            raise FormatError(path, None, "empty weight blob")
        if data[0] != BLOB_VERSION:
            raise FormatError(path, None, f"unsupported blob layout version {data[0]}")
        self.data = data
        self.path = path
        self.offset = 1

    def take(self, shape: tuple[int, ...]) -> np.ndarray:
        count = int(np.prod(shape)) if shape else 1
        end = self.offset + 8 * count
        if end > len(self.data):
            raise FormatError(self.path, None, f"weight blob truncated at byte {self.offset}")
        arr = np.frombuffer(self.data, dtype=_LE_F64, count=count, offset=self.offset)
        self.offset = end
        return arr.astype(np.float64).reshape(shape)

    def finish(self):
        if self.offset != len(self.data):
            raise FormatError(self.path, None,
                              f"weight blob has {len(self.data) - self.offset} trailing bytes")


def _read_layer(reader: _BlobReader, spec: LayerSpec) -> BottleneckBlockParams:
    return BottleneckBlockParams(reader.take((spec.in_dim, spec.width)), reader.take((spec.width,)),
                                 reader.take((spec.width, spec.out_dim)), reader.take((spec.out_dim,)))


def _head_tail_shapes(chain: ChainSpec):
    return ((chain.input_dim, chain.feature_dim), (chain.feature_dim,),
            (chain.out_dim, chain.n_classes), (chain.n_classes,))


# -- chain / model -------------------------------------------------------------------------

def chain_to_dict(chain: ChainSpec) -> dict:
    return {"input_dim": chain.input_dim, "n_classes": chain.n_classes,
            "layers": [asdict(l) for l in chain.layers]}


def chain_from_dict(doc: dict, path="<memory>") -> ChainSpec:
    try:
        layers = tuple(LayerSpec(int(l["in_dim"]), int(l["out_dim"]), int(l["width"]),
                                 None if l.get("fusion") is None else int(l["fusion"]),
                                 int(l.get("stage", 0)))
                       for l in doc["layers"])
        return ChainSpec(int(doc["input_dim"]), int(doc["n_classes"]), layers)
    except (KeyError, TypeError) as exc:
        raise FormatError(path, None, f"bad chain description: {exc}") from None
    except ValueError as exc:
        raise FormatError(path, None, str(exc)) from None


def save_model(model: ToyClassifier, out_dir, meta: dict | None = None) -> dict[str, int]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    arrays = [model.head.W, model.head.b, model.tail.W, model.tail.b]
    for p in model.layers:
        arrays.extend(_layer_arrays(p))
    blob = encode_blob(arrays)
    (out / WEIGHTS_FILE).write_bytes(blob)
    doc = {"format": "elastinet-model", "version": BLOB_VERSION, "chain": chain_to_dict(model.chain),
           "weights": WEIGHTS_FILE, "weights_sha256": hashlib.sha256(blob).hexdigest(),
           "meta": meta or {}}
    _write_text(out / MODEL_FILE, dumps_json(doc))
    return {MODEL_FILE: (out / MODEL_FILE).stat().st_size, WEIGHTS_FILE: len(blob)}


def load_model(model_dir) -> ToyClassifier:
    base = Path(model_dir)
    path = base / MODEL_FILE
    doc = _read_json(path)
    if doc.get("format") != "elastinet-model":
        raise FormatError(path, None, "not a model descriptor")
    chain = chain_from_dict(_require(doc, "chain", path, dict), path)
    blob_path = base / _require(doc, "weights", path, str)
    reader = _BlobReader(_read_bytes(blob_path), blob_path)
    hW, hb, tW, tb = _head_tail_shapes(chain)
    head = Linear(reader.take(hW), reader.take(hb))
    tail = Linear(reader.take(tW), reader.take(tb))
    layers = [_read_layer(reader, spec) for spec in chain.layers]
    reader.finish()
    return ToyClassifier(chain, head, layers, tail)


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except FileNotFoundError:
        raise FormatError(path, None, "file not found") from None


# -- supernet bundle -------------------------------------------------------------------------

def _variant_records(graph: SupernetGraph) -> list[dict]:
    chain = graph.chain()
    records, offset = [], 1 + 8 * (chain.head_params + chain.tail_params)
    for key in graph.keys():
        v = graph.variants[key]
        n = sum(l.param_size for l in v.layers)
        records.append({"key": key_str(key), "offset": offset, "length": 8 * n,
                        "layers": [[l.in_dim, l.width, l.out_dim] for l in v.layers]})
        offset += 8 * n
    return records


def graph_descriptor(graph: SupernetGraph) -> dict:
    return {
        "chain": chain_to_dict(graph.chain()),
        "gamma": graph.gamma,
        "max_merge": graph.max_merge,
        "shrink_rates": list(graph.shrink_rates),
        "p0": graph.p0,
        "positions": [{"index": p.index, "layer_start": p.layer_start, "layer_stop": p.layer_stop,
                       "in_dim": p.in_dim, "out_dim": p.out_dim, "param_size": p.param_size,
                       "fusion_group": p.fusion_group} for p in graph.positions],
    }


def graph_from_descriptor(doc: dict, path="<memory>") -> SupernetGraph:
    chain = chain_from_dict(_require(doc, "chain", path, dict), path)
    try:
        graph = elasticize(chain, float(doc["gamma"]), int(doc["max_merge"]),
                           tuple(float(r) for r in doc["shrink_rates"]))
    except KeyError as exc:
        raise FormatError(path, None, f"missing field {exc}") from None
    except ValueError as exc:
        raise FormatError(path, None, str(exc)) from None
    if graph_descriptor(graph)["positions"] != doc.get("positions"):
        raise FormatError(path, None, "positions do not match the chain partition")
    return graph


def _weights_arrays(weights: SupernetWeights, graph: SupernetGraph) -> list[np.ndarray]:
    arrays = [weights.head.W, weights.head.b, weights.tail.W, weights.tail.b]
    for key in graph.keys():
        layers = weights.block(key)
        for spec, p in zip(graph.variants[key].layers, layers):
            if (p.in_dim, p.width, p.out_dim) != (spec.in_dim, spec.width, spec.out_dim):
                raise ValueError(f"weights of {key_str(key)} do not match the graph")
            arrays.extend(_layer_arrays(p))
    return arrays


def save_bundle(graph: SupernetGraph, weights: SupernetWeights, out_dir, meta: dict | None = None
                ) -> dict[str, int]:
    """Write descriptor, weight blob and metadata; returns file sizes in bytes."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    blob = encode_blob(_weights_arrays(weights, graph))
    (out / WEIGHTS_FILE).write_bytes(blob)
    desc = graph_descriptor(graph)
    desc.update({"format": "elastinet-supernet", "version": BLOB_VERSION, "weights": WEIGHTS_FILE,
                 "variants": _variant_records(graph)})
    _write_text(out / SUPERNET_FILE, dumps_json(desc))
    meta_doc = dict(meta or {})
    meta_doc["provenance_sha256"] = hashlib.sha256(
        (out / SUPERNET_FILE).read_bytes() + blob).hexdigest()
    _write_text(out / META_FILE, dumps_json(meta_doc))
    return {name: (out / name).stat().st_size for name in (SUPERNET_FILE, WEIGHTS_FILE, META_FILE)}


def load_descriptor(bundle_dir) -> tuple[SupernetGraph, dict]:
    path = Path(bundle_dir) / SUPERNET_FILE
    doc = _read_json(path)
    if doc.get("format") != "elastinet-supernet":
        raise FormatError(path, None, "not a supernet descriptor")
    graph = graph_from_descriptor(doc, path)
    records = _require(doc, "variants", path, list)
    expected = _variant_records(graph)
    if records != expected:
        got = {r.get("key") for r in records if isinstance(r, dict)}
        want = {r["key"] for r in expected}
        missing = sorted(want - got)
        detail = f"missing variants {missing}" if missing else "variant shapes or offsets differ"
        raise FormatError(path, None, f"descriptor does not match the supernet: {detail}")
    return graph, doc


def load_bundle(bundle_dir) -> tuple[SupernetGraph, SupernetWeights, dict]:
    base = Path(bundle_dir)
    graph, doc = load_descriptor(base)
    blob_path = base / doc["weights"]
    data = _read_bytes(blob_path)
    reader = _BlobReader(data, blob_path)
    chain = graph.chain()
    hW, hb, tW, tb = _head_tail_shapes(chain)
    head = Linear(reader.take(hW), reader.take(hb)).freeze()
    tail = Linear(reader.take(tW), reader.take(tb)).freeze()
    original, branches = {}, {}
    for key in graph.keys():
        layers = [_read_layer(reader, spec) for spec in graph.variants[key].layers]
        if key[1] == 0:
            original[key] = tuple(p.freeze() for p in layers)
        else:
            branches[key] = layers
    reader.finish()
    meta_path = base / META_FILE
    meta = _read_json(meta_path) if meta_path.exists() else {}
    return graph, SupernetWeights(head, tail, original, branches), meta


class BlobWeightStore:
    """Pages individual blocks straight out of a bundle's weight blob."""

    def __init__(self, bundle_dir):
        base = Path(bundle_dir)
        self.graph, doc = load_descriptor(base)
        self.path = base / doc["weights"]
        self._records = {parse_key(r["key"]): r for r in doc["variants"]}
        head_tail = _read_bytes(self.path)
        reader = _BlobReader(head_tail, self.path)
        hW, hb, tW, tb = _head_tail_shapes(self.graph.chain())
        self.head = Linear(reader.take(hW), reader.take(hb)).freeze()
        self.tail = Linear(reader.take(tW), reader.take(tb)).freeze()
        expected = reader.offset + sum(r["length"] for r in self._records.values())
        if len(head_tail) != expected:
            raise FormatError(self.path, None, f"blob holds {len(head_tail)} bytes, descriptor implies {expected}")

    def has(self, key: VariantKey) -> bool:
        return key in self._records

    def block_params(self, key: VariantKey) -> int:
        return self._records[key]["length"] // 8

    def load(self, key: VariantKey) -> list[BottleneckBlockParams]:
        rec = self._records.get(key)
        if rec is None:
            raise MissingBlockError(f"no weights for block {key_str(key)}")
        with open(self.path, "rb") as f:
            f.seek(rec["offset"])
            chunk = f.read(rec["length"])
        reader = _BlobReader(bytes([BLOB_VERSION]) + chunk, self.path)
        layers = [_read_layer(reader, LayerSpec(i, o, w)) for i, w, o in rec["layers"]]
        reader.finish()
        return [p.freeze() for p in layers]


# -- datasets -----------------------------------------------------------------------------------

def save_dataset(data: Dataset, path, meta: dict | None = None):
    header = ["label"] + [f"x{k}" for k in range(data.dim)]
    comments = [f"n_classes: {data.n_classes}"] + [f"{k}: {v}" for k, v in sorted((meta or {}).items())]
    rows = [[int(label)] + [repr(float(v)) for v in row] for row, label in zip(data.X, data.y)]
    _write_csv(path, header, rows, comments)
    write_jsonl(jsonl_path(path), ({"label": r[0], "x": [float(v) for v in r[1:]]} for r in rows))


def load_dataset(path) -> Dataset:
    path = Path(path)
    with open(path, encoding="utf-8") as f:
        first_lines = []
        for line in f:
            if not line.startswith("#"):
                first_lines.append(line)
                break
    if not first_lines:
        raise FormatError(path, None, "missing header line")
    header = next(csv.reader([first_lines[0].strip()]))
    if not header or header[0] != "label":
        raise FormatError(path, None, "header must start with 'label'")
    comments, body = _read_csv(path, header)
    fields = _comment_fields(comments)
    if "n_classes" not in fields:
        raise FormatError(path, 1, "missing '# n_classes:' comment")
    n_classes = _int(fields["n_classes"], path, 1, "n_classes")
    X = np.empty((len(body), len(header) - 1))
    y = np.empty(len(body), dtype=np.int64)
    for row, (lineno, f) in enumerate(body):
        y[row] = _int(f[0], path, lineno, "label")
        if not 0 <= y[row] < n_classes:
            raise FormatError(path, lineno, f"label {y[row]} outside [0, {n_classes})")
        for k, v in enumerate(f[1:]):
            X[row, k] = _float(v, path, lineno, "feature")
    return Dataset(X, y, n_classes)


# -- latency tables ------------------------------------------------------------------------------

def format_table(table: LatencyTable) -> str:
    lines = ["# elastinet latency table v1", f"# device_id: {table.device_id}",
             f"# profiled_at: {table.profiled_at!r}", f"# timing_calls: {table.timing_calls}"]
    for key in sorted(table.entries):
        lines.append(f"{key_str(key)} {table.entries[key]!r}")
    return "\n".join(lines) + "\n"


def save_table(table: LatencyTable, path):
    _write_text(path, format_table(table))
    write_jsonl(jsonl_path(path), [{"device_id": table.device_id, "profiled_at": table.profiled_at,
                                    "timing_calls": table.timing_calls}] +
                [{"key": key_str(k), "ms": table.entries[k]} for k in sorted(table.entries)])


def parse_table(text: str, path="<memory>") -> LatencyTable:
    header: dict[str, str] = {}
    entries: dict[VariantKey, float] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s:
            continue
        if s.startswith("#"):
            body = s[1:].strip()
            if ":" in body:
                k, v = body.split(":", 1)
                header[k.strip()] = v.strip()
            continue
        parts = s.split()
        if len(parts) != 2:
            raise FormatError(path, lineno, "expected 'start:j ms'")
        try:
            key = parse_key(parts[0])
        except ValueError:
            raise FormatError(path, lineno, f"bad block key {parts[0]!r}") from None
        if key in entries:
            raise FormatError(path, lineno, f"duplicate entry for {parts[0]}")
        ms = _float(parts[1], path, lineno, "latency")
        if not (ms > 0 and math.isfinite(ms)):
            raise FormatError(path, lineno, f"latency must be positive and finite, got {parts[1]}")
        entries[key] = ms
    if not entries:
        raise FormatError(path, None, "latency table has no entries")
    try:
        profiled_at = float(header.get("profiled_at", "0.0"))
        calls = int(header.get("timing_calls", "0"))
    except ValueError as exc:
        raise FormatError(path, None, f"bad header: {exc}") from None
    return LatencyTable(entries, header.get("device_id", "sim"), profiled_at, calls)


def load_table(path) -> LatencyTable:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise FormatError(path, None, "file not found") from None
    return parse_table(text, path)


# -- pools, histories, logs, reports ----------------------------------------------------------------

POOL_HEADER = ("arch", "latency", "accuracy", "relative_latency")
HISTORY_HEADER = ("generation", "arch", "latency", "accuracy")
EVENT_HEADER = ("t", "observed_ms", "r", "action", "arch")


def save_pool(pool: SubnetPool, path):
    comments = [f"T_budget: {pool.T_budget!r}", f"window: {pool.window[0]!r} {pool.window[1]!r}"]
    rows = [(e.arch, repr(e.latency), repr(e.accuracy), repr(e.relative_latency)) for e in pool.entries]
    _write_csv(path, POOL_HEADER, rows, comments)
    write_jsonl(jsonl_path(path), [{"T_budget": pool.T_budget, "window": list(pool.window)}] +
                [asdict(e) for e in pool.entries])


def load_pool(path) -> SubnetPool:
    comments, body = _read_csv(path, POOL_HEADER)
    fields = _comment_fields(comments)
    try:
        T = float(fields["T_budget"])
        lo, hi = (float(v) for v in fields["window"].split())
    except (KeyError, ValueError):
        raise FormatError(path, 1, "pool header needs '# T_budget:' and '# window: lo hi'") from None
    entries = []
    for lineno, f in body:
        entries.append(PoolEntry(f[0], _float(f[1], path, lineno, "latency"),
                                 _float(f[2], path, lineno, "accuracy"),
                                 _float(f[3], path, lineno, "relative latency")))
    return SubnetPool(entries, (lo, hi), T)


def save_history(history: Sequence[HistoryRecord], path):
    rows = [(h.generation, h.arch, repr(h.latency), repr(h.accuracy)) for h in history]
    _write_csv(path, HISTORY_HEADER, rows)
    write_jsonl(jsonl_path(path), (asdict(h) for h in history))


def load_history(path) -> list[HistoryRecord]:
    _, body = _read_csv(path, HISTORY_HEADER)
    return [HistoryRecord(_int(f[0], path, n, "generation"), f[1], _float(f[2], path, n, "latency"),
                          _float(f[3], path, n, "accuracy")) for n, f in body]


def save_events(records: Sequence[LogRecord], path):
    rows = [(repr(r.t), repr(r.observed_ms), repr(r.r), r.action, r.arch) for r in records]
    _write_csv(path, EVENT_HEADER, rows)
    write_jsonl(jsonl_path(path), (asdict(r) for r in records))


def load_events(path) -> list[LogRecord]:
    _, body = _read_csv(path, EVENT_HEADER)
    return [LogRecord(_float(f[0], path, n, "time"), _float(f[1], path, n, "latency"),
                      _float(f[2], path, n, "ratio"), f[3], f[4]) for n, f in body]


EVAL_HEADER = ("call", "candidates", "block_forwards", "naive_forwards", "peak_cached_features",
               "batches_loaded")


def save_eval_reports(reports: Sequence, path):
    """One row per group evaluation call of a search."""
    rows = [(k, len(r.accuracies), r.block_forward_count, r.naive_forward_count, r.peak_cached_features,
             r.batches_loaded) for k, r in enumerate(reports)]
    _write_csv(path, EVAL_HEADER, rows)
    write_jsonl(jsonl_path(path), (dict(zip(EVAL_HEADER, r)) for r in rows))


def save_report(report: Sequence[TrainRecord], bins: Sequence[tuple[float, float]], path):
    header = ["epoch", "phase", "loss"] + [f"acc[{lo!r},{hi!r})" for lo, hi in bins]
    rows = []
    for rec in report:
        by_bin = {(b.low, b.high): b for b in rec.bins}
        cells = [repr(by_bin[b].mean_accuracy) if b in by_bin else "" for b in bins]
        rows.append([rec.epoch, rec.phase, repr(rec.loss)] + cells)
    _write_csv(path, header, rows)
    write_jsonl(jsonl_path(path), ({"epoch": r.epoch, "phase": r.phase,
                                    "loss": None if math.isnan(r.loss) else r.loss,
                                    "bins": [asdict(b) for b in r.bins]} for r in report))


def load_report(path) -> list[TrainRecord]:
    out = []
    for row in read_jsonl(jsonl_path(path)):
        loss = float("nan") if row["loss"] is None else row["loss"]
        out.append(TrainRecord(row["epoch"], row["phase"], loss,
                               [BinAccuracy(**b) for b in row["bins"]]))
    return out
