"""Layer traces: recorded hidden states and attention maps, plus their JSON-lines format.

File format
-----------
One JSON object per line, one line per (sample, layer). Lines of a sample
are contiguous and ordered by layer ``0..num_layers``; layer 0 holds the
input embeddings, layer ``l`` the output of block ``l``.

============================  ==============================================
field                         meaning
============================  ==============================================
``sample_id`` (str)           sample key, shared by all lines of a sample
``layer`` (int)               0..num_layers
``num_layers`` (int)          L, identical on every line of a sample
``tokens``                    layer-0 line only: ``[[index, modality, position_id], ...]``
                              with modality in ``system | visual | textual``
``live`` (list[int])          ascending token indices present at this layer
``hidden``                    ``len(live) x d`` nested list (float32 values)
``attention_queries``         optional; token indices of the stored query rows
                              (subset of ``live``, defaults to all of ``live``)
``attention``                 optional; ``heads x len(attention_queries) x len(live)``;
                              keys later than the query must be 0 and every row
                              must sum to 1 within 1e-4
``pairing``                   optional; ``reference`` or ``mismatched``
``pair_id``                   optional; groups a mismatched trace with its reference
============================  ==============================================

Values are written as float32 and promoted to float64 on load.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, NamedTuple, Optional

import jsonschema
import numpy as np

SYSTEM = "system"
VISUAL = "visual"
TEXTUAL = "textual"
MODALITIES = (SYSTEM, VISUAL, TEXTUAL)
PAIRINGS = ("reference", "mismatched")

ROW_SUM_TOL = 1e-4


class TraceToken(NamedTuple):
    index: int
    modality: str
    position_id: int


class TraceSchemaError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class LayerTrace:
    sample_id: str
    tokens: List[TraceToken]
    hidden: List[np.ndarray]
    live: List[np.ndarray]
    attention: Optional[List[Optional[np.ndarray]]] = None
    attention_queries: Optional[List[Optional[np.ndarray]]] = None
    pairing: Optional[str] = None
    pair_id: Optional[str] = None
    _modality: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._modality = {t.index: t.modality for t in self.tokens}

    @property
    def num_layers(self) -> int:
        return len(self.hidden) - 1

    def modality_of(self, index: int) -> str:
        return self._modality[index]

    def indices(self, modality: str) -> np.ndarray:
        return np.array(sorted(t.index for t in self.tokens if t.modality == modality), dtype=np.int64)

    def rows(self, layer: int, token_indices) -> np.ndarray:
        """Hidden vectors at ``layer`` for tokens that are live there (in the given order)."""
        live = self.live[layer]
        pos = np.searchsorted(live, token_indices)
        return self.hidden[layer][pos]

    def live_subset(self, layer: int, token_indices) -> np.ndarray:
        return np.intersect1d(self.live[layer], token_indices)

    def has_attention(self, layer: int) -> bool:
        return self.attention is not None and layer < len(self.attention) and self.attention[layer] is not None

    def query_indices(self, layer: int) -> np.ndarray:
        if self.attention_queries is not None and self.attention_queries[layer] is not None:
            return self.attention_queries[layer]
        return self.live[layer]


# ------------------------------------------------------------------ schema

# numeric payloads are shape/type-checked with numpy below; jsonschema per float is too slow
_MATRIX = {"type": "array"}

RECORD_SCHEMA = {
    "type": "object",
    "required": ["sample_id", "layer", "num_layers", "live", "hidden"],
    "additionalProperties": False,
    "properties": {
        "sample_id": {"type": "string", "minLength": 1},
        "layer": {"type": "integer", "minimum": 0},
        "num_layers": {"type": "integer", "minimum": 1},
        "tokens": {
            "type": "array",
            "items": {
                "type": "array",
                "prefixItems": [
                    {"type": "integer", "minimum": 0},
                    {"enum": list(MODALITIES)},
                    {"type": "integer"},
                ],
                "minItems": 3,
                "maxItems": 3,
            },
        },
        "live": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "hidden": _MATRIX,
        "attention_queries": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "attention": {"type": "array", "items": _MATRIX},
        "pairing": {"enum": [*PAIRINGS, None]},
        "pair_id": {"type": ["string", "null"]},
    },
}

_validator = jsonschema.Draft202012Validator(RECORD_SCHEMA)


def _numeric(value, name: str, line: int) -> np.ndarray:
    try:
        return np.asarray(value, dtype=np.float64)
    except (TypeError, ValueError):
        raise TraceSchemaError(f"{name} must be a rectangular array of numbers", line) from None


def _check_record(rec: dict, state: dict, line: int) -> None:
    err = next(iter(_validator.iter_errors(rec)), None)
    if err is not None:
        where = "/".join(str(p) for p in err.absolute_path) or "record"
        raise TraceSchemaError(f"{where}: {err.message}", line)

    layer = rec["layer"]
    if layer == 0:
        if "tokens" not in rec:
            raise TraceSchemaError("layer-0 record must carry the token table", line)
        idx = [t[0] for t in rec["tokens"]]
        if len(set(idx)) != len(idx):
            raise TraceSchemaError("token indices must be unique (one modality per token)", line)
        state.clear()
        state.update(sample=rec["sample_id"], L=rec["num_layers"], next=1,
                     tokens=set(idx), d=None, pairing=rec.get("pairing"))
    else:
        if "tokens" in rec:
            raise TraceSchemaError("token table belongs on the layer-0 record only", line)
        if state.get("sample") != rec["sample_id"] or state.get("next") != layer:
            raise TraceSchemaError(
                f"expected layer {state.get('next', 0)} of sample {state.get('sample')!r}, "
                f"got layer {layer} of {rec['sample_id']!r}", line)
        if rec["num_layers"] != state["L"]:
            raise TraceSchemaError("num_layers changes within a sample", line)
        state["next"] = layer + 1
    if layer > rec["num_layers"]:
        raise TraceSchemaError(f"layer {layer} exceeds num_layers {rec['num_layers']}", line)

    live = rec["live"]
    if any(b <= a for a, b in zip(live, live[1:])):
        raise TraceSchemaError("live indices must be strictly ascending", line)
    if not set(live) <= state["tokens"]:
        raise TraceSchemaError("live references an unknown token index", line)

    hidden = _numeric(rec["hidden"], "hidden", line)
    if len(live) == 0:
        hidden = hidden.reshape(0, state["d"] or 0)
    if hidden.ndim != 2 or hidden.shape[0] != len(live):
        raise TraceSchemaError(f"hidden must be len(live) x d, got shape {hidden.shape}", line)
    if state["d"] is None:
        state["d"] = hidden.shape[1]
    elif hidden.shape[1] != state["d"]:
        raise TraceSchemaError(f"hidden width {hidden.shape[1]} != {state['d']}", line)
    if not np.all(np.isfinite(hidden)):
        raise TraceSchemaError("hidden contains non-finite values", line)

    if "attention" in rec:
        queries = rec.get("attention_queries", live)
        if not set(queries) <= set(live):
            raise TraceSchemaError("attention_queries must be a subset of live", line)
        att = _numeric(rec["attention"], "attention", line)
        if att.ndim != 3 or att.shape[1:] != (len(queries), len(live)):
            raise TraceSchemaError(
                f"attention must be heads x {len(queries)} x {len(live)}, got {att.shape}", line)
        if not np.all(np.isfinite(att)) or np.any(att < 0):
            raise TraceSchemaError("attention weights must be finite and nonnegative", line)
        future = np.asarray(live)[None, :] > np.asarray(queries)[:, None]
        if np.any(att[:, future] != 0):
            raise TraceSchemaError("attention puts weight on a non-causal key", line)
        sums = att.sum(-1)
        bad = np.argwhere(np.abs(sums - 1.0) > ROW_SUM_TOL)
        if bad.size:
            h, q = bad[0]
            raise TraceSchemaError(
                f"attention row (head {h}, query {queries[q]}) sums to {sums[h, q]:.6f}, not 1", line)
    elif "attention_queries" in rec:
        raise TraceSchemaError("attention_queries given without attention", line)


def _iter_records(path) -> Iterator[tuple]:
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise TraceSchemaError(f"invalid JSON: {exc.msg}", lineno) from None
            if not isinstance(rec, dict):
                raise TraceSchemaError("record must be a JSON object", lineno)
            yield lineno, rec


def validate_trace_file(path) -> List[str]:
    """Return a list of schema problems (empty when the file is valid)."""
    try:
        read_traces(path)
    except TraceSchemaError as exc:
        return [str(exc)]
    return []


def read_traces(path) -> List[LayerTrace]:
    traces: List[LayerTrace] = []
    state: dict = {}
    cur = None
    last_line = 0

    def close(line):
        if cur is not None and state.get("next") != state.get("L") + 1:
            raise TraceSchemaError(
                f"sample {state['sample']!r} ends at layer {state['next'] - 1}, "
                f"expected {state['L']}", line)

    for lineno, rec in _iter_records(path):
        last_line = lineno
        if rec.get("layer") == 0:
            close(lineno)
        _check_record(rec, state, lineno)
        layer = rec["layer"]
        if layer == 0:
            tokens = [TraceToken(int(i), m, int(p)) for i, m, p in rec["tokens"]]
            cur = LayerTrace(rec["sample_id"], tokens, [], [], None, None,
                             rec.get("pairing"), rec.get("pair_id"))
            traces.append(cur)
        live = np.asarray(rec["live"], dtype=np.int64)
        cur.live.append(live)
        cur.hidden.append(np.asarray(rec["hidden"], dtype=np.float64).reshape(len(live), state["d"]))
        if "attention" in rec:
            if cur.attention is None:
                cur.attention = [None] * layer
                cur.attention_queries = [None] * layer
            cur.attention.append(np.asarray(rec["attention"], dtype=np.float64))
            cur.attention_queries.append(np.asarray(rec.get("attention_queries", rec["live"]), dtype=np.int64))
        elif cur.attention is not None:
            cur.attention.append(None)
            cur.attention_queries.append(None)
    close(last_line)
    if not traces:
        raise TraceSchemaError("trace file holds no records")
    return traces


def _f32(a) -> list:
    return np.asarray(a, dtype=np.float32).tolist()


def trace_records(trace: LayerTrace) -> Iterator[dict]:
    for layer in range(trace.num_layers + 1):
        rec = {"sample_id": trace.sample_id, "layer": layer, "num_layers": trace.num_layers}
        if layer == 0:
            rec["tokens"] = [[int(t.index), t.modality, int(t.position_id)] for t in trace.tokens]
        rec["live"] = [int(i) for i in trace.live[layer]]
        rec["hidden"] = _f32(trace.hidden[layer])
        if trace.has_attention(layer):
            q = trace.query_indices(layer)
            if not np.array_equal(q, trace.live[layer]):
                rec["attention_queries"] = [int(i) for i in q]
            rec["attention"] = _f32(trace.attention[layer])
        if trace.pairing is not None:
            rec["pairing"] = trace.pairing
        if trace.pair_id is not None:
            rec["pair_id"] = trace.pair_id
        yield rec


def write_traces(path, traces) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for trace in traces:
            for rec in trace_records(trace):
                fh.write(json.dumps(rec, separators=(",", ":")))
                fh.write("\n")
