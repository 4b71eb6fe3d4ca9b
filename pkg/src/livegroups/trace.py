"""Trace records, CSV persistence and run manifests."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, TextIO, Tuple

TRACE_FORMAT_VERSION = "1.0"
COLUMNS = ("time_ms", "kind", "node", "peer", "epoch", "ed", "level", "vector", "crc_ok")
KINDS = frozenset(
    {"tx", "rx", "beacon_tx", "beacon_rx", "collision", "loss", "epoch_change", "level_change"}
)


class TraceFormatError(ValueError):
    pass


class TraceRecord(NamedTuple):
    time_ms: float
    kind: str
    node: int
    peer: Optional[int] = None
    epoch: Optional[int] = None
    ed: Optional[int] = None
    level: Optional[int] = None
    vector: Optional[Tuple[int, ...]] = None
    crc_ok: Optional[bool] = None


def hex_width(M: int) -> int:
    return len(format(M, "x"))


def encode_vector(vec: Sequence[int], width: int) -> str:
    return "".join(format(x, f"0{width}x") for x in vec)


def decode_vector(text: str, width: int, n: int) -> Tuple[int, ...]:
    if len(text) != width * n:
        raise TraceFormatError(f"vector {text!r} does not hold {n} entries of width {width}")
    return tuple(int(text[i:i + width], 16) for i in range(0, len(text), width))


def _opt(x) -> str:
    return "" if x is None else str(x)


def write_trace(records: Iterable[TraceRecord], fh: TextIO, meta: Dict[str, object]) -> None:
    """Write the CSV trace: comment header lines, column header, one row per record."""
    M = int(meta["M"])
    width = hex_width(M)
    fh.write(f"# format_version={TRACE_FORMAT_VERSION}\n")
    for key in sorted(meta):
        fh.write(f"# {key}={meta[key]}\n")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(COLUMNS)
    count = 0
    for r in records:
        w.writerow((
            f"{r.time_ms:.3f}", r.kind, r.node, _opt(r.peer), _opt(r.epoch), _opt(r.ed),
            _opt(r.level), "" if r.vector is None else encode_vector(r.vector, width),
            "" if r.crc_ok is None else int(r.crc_ok),
        ))
        count += 1
    fh.write(f"# end records={count}\n")


@dataclass
class ParsedTrace:
    meta: Dict[str, str]
    records: List[TraceRecord]
    errors: List[Tuple[int, str]] = field(default_factory=list)
    partial: bool = False

    @property
    def n_nodes(self) -> int:
        return int(self.meta["n_nodes"])


def _int(s: str) -> Optional[int]:
    return None if s == "" else int(s)


def read_trace(fh: TextIO) -> ParsedTrace:
    """Parse a CSV trace, keeping going past malformed rows.

    Malformed rows are reported with their 1-based line numbers and mark the
    trace as partial. A trace without its ``# end`` trailer, or whose record
    count disagrees with it, is also partial.
    """
    meta: Dict[str, str] = {}
    lines = fh.read().split("\n")
    # an unterminated final line may be cut mid-field, so it is never trusted
    tail = lines.pop() if lines else ""
    end_count = None
    if lines and lines[-1].startswith("# end"):
        _, _, count = lines.pop().partition("records=")
        end_count = int(count) if count.strip().isdigit() else None
    lineno = 0
    while lineno < len(lines) and lines[lineno].startswith("#"):
        body = lines[lineno][1:].strip()
        if "=" in body:
            k, v = body.split("=", 1)
            meta[k.strip()] = v.strip()
        lineno += 1
    version = meta.get("format_version")
    if version is None:
        raise TraceFormatError("missing '# format_version' header")
    if version.split(".")[0] != TRACE_FORMAT_VERSION.split(".")[0]:
        raise TraceFormatError(f"unsupported trace format_version {version}")
    for key in ("n_nodes", "M"):
        if key not in meta:
            raise TraceFormatError(f"missing '# {key}' header")
    if lineno >= len(lines) or tuple(next(csv.reader([lines[lineno]]))) != COLUMNS:
        raise TraceFormatError("missing or unexpected column header")
    n = int(meta["n_nodes"])
    width = hex_width(int(meta["M"]))
    out = ParsedTrace(meta=meta, records=[])
    last_t = float("-inf")
    for i, row in enumerate(csv.reader(lines[lineno + 1:]), start=lineno + 2):
        try:
            if len(row) != len(COLUMNS):
                raise TraceFormatError(f"expected {len(COLUMNS)} fields, got {len(row)}")
            t = float(row[0])
            if t < last_t:
                raise TraceFormatError("time goes backwards")
            if row[1] not in KINDS:
                raise TraceFormatError(f"unknown kind {row[1]!r}")
            rec = TraceRecord(
                time_ms=t, kind=row[1], node=int(row[2]), peer=_int(row[3]),
                epoch=_int(row[4]), ed=_int(row[5]), level=_int(row[6]),
                vector=decode_vector(row[7], width, n) if row[7] else None,
                crc_ok=None if row[8] == "" else bool(int(row[8])),
            )
        except (ValueError, TraceFormatError) as exc:
            out.errors.append((i, str(exc)))
            out.partial = True
            continue
        last_t = t
        out.records.append(rec)
    if tail:
        out.errors.append((len(lines) + 1, f"truncated final line {tail[:40]!r}"))
    if end_count is None:
        out.partial = True
    elif end_count != len(out.records) + len(out.errors):
        out.partial = True
    return out


def trace_bytes(records: Iterable[TraceRecord], meta: Dict[str, object]) -> bytes:
    buf = io.StringIO()
    write_trace(records, buf, meta)
    return buf.getvalue().encode()


def canonical_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


@dataclass
class RunManifest:
    config_hash: str
    scenario_hash: str
    seed: int
    tool_version: str
    start_ms: float
    end_ms: float
    config: Dict[str, object]
    overrides: Dict[str, object] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        return cls(**json.loads(text))
