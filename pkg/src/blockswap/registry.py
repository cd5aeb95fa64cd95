"""Model registry: info tables, parameter files, layer extraction, blocks, skeletons.

A model is described twice. The *info table* carries per-layer size, depth
and FLOPs and is all the planner needs. The *parameter file* carries the
actual float32 payload in an index-aligned binary layout, and the
*skeleton* carries the architecture with one unbound reference slot per
parameter entry.
"""
from __future__ import annotations

import csv
import io
import json
import re
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

KB = 1 << 10
MB = 1 << 20
GB = 1 << 30

ALIGN = 64
MAGIC = b"SWPB"
VERSION = 1
DTYPE_FLOAT32 = 1
_DTYPES = {DTYPE_FLOAT32: np.dtype("<f4")}

TABLE_HEADER = ["layer_index", "kind", "size", "depth", "flops", "skip_from"]


class RegistryError(Exception):
    pass


class ParseError(RegistryError):
    pass


class StructuralError(RegistryError):
    pass


class InfeasibleCutError(RegistryError):
    def __init__(self, edge: tuple[int, int], point: int):
        self.edge = edge
        self.point = point
        super().__init__(
            f"cut at {point} crosses skip edge {edge[0]}->{edge[1]}"
        )


# ---------------------------------------------------------------------------
# layer kinds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dense:
    in_dim: int
    out_dim: int

    def __str__(self) -> str:
        return f"dense:{self.in_dim}:{self.out_dim}"

    def param_dims(self) -> list[tuple[int, ...]]:
        return [(self.out_dim, self.in_dim), (self.out_dim,)]


@dataclass(frozen=True)
class ReLU:
    def __str__(self) -> str:
        return "relu"

    def param_dims(self) -> list[tuple[int, ...]]:
        return []


@dataclass(frozen=True)
class Add:
    skip_from: int

    def __str__(self) -> str:
        return "add"

    def param_dims(self) -> list[tuple[int, ...]]:
        return []


@dataclass(frozen=True)
class Opaque:
    """A profiled layer with no executable semantics (planning only)."""

    def __str__(self) -> str:
        return "opaque"

    def param_dims(self) -> None:
        return None


LayerKind = Dense | ReLU | Add | Opaque


def parse_kind(text: str, skip_from: str | int | None = None) -> LayerKind:
    text = text.strip().lower()
    if text.startswith("dense"):
        parts = text.split(":")
        if len(parts) != 3:
            raise ParseError(f"dense kind needs in/out dims, got {text!r}")
        return Dense(int(parts[1]), int(parts[2]))
    if text == "relu":
        return ReLU()
    if text == "add":
        if skip_from is None or skip_from == "":
            raise ParseError("add layer without skip_from")
        return Add(int(skip_from))
    if text == "opaque":
        return Opaque()
    raise ParseError(f"unknown layer kind {text!r}")


# ---------------------------------------------------------------------------
# info table
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LayerRecord:
    index: int
    kind: LayerKind
    size: int
    depth: int
    flops: int

    def __post_init__(self):
        if self.size < 0 or self.depth < 0 or self.flops < 0:
            raise StructuralError(f"layer {self.index}: negative size/depth/flops")
        if isinstance(self.kind, (ReLU, Add)) and (self.size or self.depth):
            raise StructuralError(
                f"layer {self.index}: {self.kind} layers carry no parameters"
            )
        if isinstance(self.kind, Add) and not 0 <= self.kind.skip_from < self.index:
            raise StructuralError(
                f"layer {self.index}: skip source {self.kind.skip_from} must precede it"
            )
        if isinstance(self.kind, Dense) and self.depth != 2:
            raise StructuralError(f"layer {self.index}: dense layers have depth 2")


@dataclass(frozen=True)
class ModelInfoTable:
    name: str
    layers: tuple[LayerRecord, ...]

    def __post_init__(self):
        if not self.layers:
            raise StructuralError(f"model {self.name!r}: empty layer list")
        for pos, layer in enumerate(self.layers):
            if layer.index != pos:
                raise StructuralError(
                    f"model {self.name!r}: layer indices not contiguous "
                    f"(position {pos} holds index {layer.index})"
                )

    def __len__(self) -> int:
        return len(self.layers)

    @property
    def total_size(self) -> int:
        return sum(layer.size for layer in self.layers)

    @property
    def total_depth(self) -> int:
        return sum(layer.depth for layer in self.layers)

    @property
    def total_flops(self) -> int:
        return sum(layer.flops for layer in self.layers)

    def skip_edges(self) -> list[tuple[int, int]]:
        return [
            (layer.kind.skip_from, layer.index)
            for layer in self.layers
            if isinstance(layer.kind, Add)
        ]

    def crossing_edge(self, point: int) -> tuple[int, int] | None:
        """Return the first skip edge a cut before layer `point` would sever."""
        for src, dst in self.skip_edges():
            if src < point <= dst:
                return (src, dst)
        return None

    def feasible_cuts(self) -> list[int]:
        blocked = [False] * (len(self) + 1)
        for src, dst in self.skip_edges():
            for p in range(src + 1, dst + 1):
                blocked[p] = True
        return [p for p in range(1, len(self)) if not blocked[p]]

    def scaled(self, factor: int) -> "ModelInfoTable":
        """Copy with every parameter size multiplied by `factor`."""
        return ModelInfoTable(
            self.name,
            tuple(
                LayerRecord(l.index, l.kind, l.size * factor, l.depth, l.flops)
                for l in self.layers
            ),
        )


_QUANTITY = re.compile(r"^\s*([-+]?[0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)\s*([A-Za-z]*)\s*$")
_SIZE_UNITS = {"": 1, "B": 1, "KB": KB, "MB": MB, "GB": GB}
_COUNT_UNITS = {"": 1, "K": 10**3, "M": 10**6, "G": 10**9}


def parse_quantity(text: str, units: dict[str, int], default: str = "") -> int:
    """Parse '0.38 MB' / '26.2 M' / '4096' into an integer count."""
    m = _QUANTITY.match(str(text))
    if not m:
        raise ValueError(f"cannot parse quantity {text!r}")
    value, suffix = m.groups()
    suffix = suffix.upper() or default.upper()
    if suffix not in units:
        raise ValueError(f"unknown unit {suffix!r} in {text!r}")
    return int(round(float(value) * units[suffix]))


def parse_size(text: str, default: str = "B") -> int:
    return parse_quantity(text, _SIZE_UNITS, default)


def parse_count(text: str, default: str = "") -> int:
    return parse_quantity(text, _COUNT_UNITS, default)


def load_model_table(
    path: str | Path,
    size_unit: str = "B",
    flops_unit: str = "",
    name: str | None = None,
) -> ModelInfoTable:
    """Read a model info table CSV.

    Cells may carry their own suffix (``0.38 MB``, ``26.2 M``); bare numbers
    are interpreted in `size_unit` / `flops_unit`. Sizes use binary units,
    FLOP counts decimal ones.
    """
    path = Path(path)
    if size_unit.upper() not in _SIZE_UNITS:
        raise ValueError(f"unknown size unit {size_unit!r}")
    if flops_unit.upper() not in _COUNT_UNITS:
        raise ValueError(f"unknown flops unit {flops_unit!r}")
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        missing = set(TABLE_HEADER) - set(reader.fieldnames or [])
        if missing:
            raise ParseError(f"{path}: missing columns {sorted(missing)}")
        layers = []
        for row_no, row in enumerate(reader, start=2):
            try:
                kind = parse_kind(row["kind"], row["skip_from"])
                record = LayerRecord(
                    index=int(row["layer_index"]),
                    kind=kind,
                    size=parse_size(row["size"], size_unit),
                    depth=int(row["depth"]),
                    flops=parse_count(row["flops"], flops_unit),
                )
            except (ValueError, TypeError, ParseError) as exc:
                raise ParseError(f"{path}: malformed row {row_no}: {exc}") from exc
            except StructuralError as exc:
                raise StructuralError(f"{path}: row {row_no}: {exc}") from exc
            layers.append(record)
    try:
        return ModelInfoTable(name or path.stem, tuple(layers))
    except StructuralError as exc:
        raise StructuralError(f"{path}: {exc}") from exc


def save_model_table(table: ModelInfoTable, path: str | Path) -> None:
    Path(path).write_text(table_to_csv(table))


# ---------------------------------------------------------------------------
# parameter file
# ---------------------------------------------------------------------------


def align_up(n: int, alignment: int = ALIGN) -> int:
    return (n + alignment - 1) // alignment * alignment


@dataclass(frozen=True)
class ParamEntry:
    index: int
    dtype: int
    dims: tuple[int, ...]
    offset: int  # relative to the payload region
    length: int

    @property
    def count(self) -> int:
        return int(np.prod(self.dims, dtype=np.int64)) if self.dims else 1


@dataclass(frozen=True)
class ParameterFile:
    """Index of a parameter file. The payload itself stays on disk."""

    entries: tuple[ParamEntry, ...]
    payload_start: int
    payload_length: int
    path: Path | None = None
    version: int = VERSION

    def __post_init__(self):
        end = 0
        for pos, e in enumerate(self.entries):
            if e.index != pos:
                raise StructuralError(
                    f"param entry at position {pos} has index {e.index} (not index-aligned)"
                )
            if e.offset % ALIGN:
                raise StructuralError(f"param {e.index}: offset {e.offset} not {ALIGN}-byte aligned")
            if e.offset < end:
                raise StructuralError(f"param {e.index}: byte range overlaps previous entry")
            end = e.offset + e.length
            if end > self.payload_length:
                raise StructuralError(f"param {e.index}: byte range exceeds payload")
            if e.dtype not in _DTYPES:
                raise StructuralError(f"param {e.index}: unknown dtype code {e.dtype}")
            if e.count * _DTYPES[e.dtype].itemsize != e.length:
                raise StructuralError(
                    f"param {e.index}: dims {list(e.dims)} disagree with byte length {e.length}"
                )

    @property
    def entry_count(self) -> int:
        return len(self.entries)

    def span(self, start: int, stop: int) -> tuple[int, int]:
        """(offset, length) of the payload bytes covering entries [start, stop)."""
        if start >= stop:
            return (self.entries[start].offset if start < len(self.entries) else self.payload_length, 0)
        first, last = self.entries[start], self.entries[stop - 1]
        return (first.offset, last.offset + last.length - first.offset)


def _header_length(dims_list: Sequence[Sequence[int]]) -> int:
    n = 4 + 4 + 4
    for dims in dims_list:
        n += 4 + 1 + 1 + 4 * len(dims) + 8 + 8
    return n


def build_parameter_index(dims_list: Sequence[Sequence[int]], path: Path | None = None) -> ParameterFile:
    """Lay out float32 entries of the given shapes without touching any payload."""
    entries = []
    offset = 0
    for idx, dims in enumerate(dims_list):
        dims = tuple(int(d) for d in dims)
        length = int(np.prod(dims, dtype=np.int64)) * 4 if dims else 4
        entries.append(ParamEntry(idx, DTYPE_FLOAT32, dims, offset, length))
        offset = align_up(offset + length)
    payload_length = entries[-1].offset + entries[-1].length if entries else 0
    return ParameterFile(
        tuple(entries), align_up(_header_length(dims_list)), payload_length, path
    )


def write_parameter_file(path: str | Path, arrays: Sequence[np.ndarray]) -> ParameterFile:
    path = Path(path)
    arrays = [np.ascontiguousarray(a, dtype="<f4") for a in arrays]
    index = build_parameter_index([a.shape for a in arrays], path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(arrays)))
        for e in index.entries:
            f.write(struct.pack("<IBB", e.index, e.dtype, len(e.dims)))
            f.write(struct.pack(f"<{len(e.dims)}I", *e.dims))
            f.write(struct.pack("<QQ", e.offset, e.length))
        f.write(b"\0" * (index.payload_start - f.tell()))
        for e, a in zip(index.entries, arrays):
            pad = index.payload_start + e.offset - f.tell()
            f.write(b"\0" * pad)
            f.write(a.tobytes())
    return index


def read_parameter_index(path: str | Path) -> ParameterFile:
    """Parse header and entry records; the payload is not read."""
    path = Path(path)
    file_size = path.stat().st_size
    with open(path, "rb") as f:

        def take(n: int, what: str) -> bytes:
            pos = f.tell()
            chunk = f.read(n)
            if len(chunk) != n:
                raise ParseError(f"{path}: truncated {what} at offset {pos}")
            return chunk

        if take(4, "magic") != MAGIC:
            raise ParseError(f"{path}: bad magic at offset 0")
        version, count = struct.unpack("<II", take(8, "header"))
        if version != VERSION:
            raise ParseError(f"{path}: unsupported version {version} at offset 4")
        entries = []
        for _ in range(count):
            idx, dtype, rank = struct.unpack("<IBB", take(6, "entry record"))
            dims = struct.unpack(f"<{rank}I", take(4 * rank, "entry dims"))
            offset, length = struct.unpack("<QQ", take(16, "entry span"))
            entries.append(ParamEntry(idx, dtype, tuple(dims), offset, length))
        payload_start = align_up(f.tell())
    try:
        return ParameterFile(tuple(entries), payload_start, max(file_size - payload_start, 0), path)
    except StructuralError as exc:
        raise ParseError(f"{path}: {exc} (entry table at offset 12)") from exc


def read_payload(params: ParameterFile) -> bytes:
    with open(params.path, "rb") as f:
        f.seek(params.payload_start)
        return f.read(params.payload_length)


# ---------------------------------------------------------------------------
# layer extraction and blocks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Layer:
    record: LayerRecord
    params: range


@dataclass(frozen=True)
class LayerSequence:
    name: str
    table: ModelInfoTable
    params: ParameterFile
    layers: tuple[Layer, ...]

    def __len__(self) -> int:
        return len(self.layers)


_layer_cache: dict[tuple[ModelInfoTable, ParameterFile], LayerSequence] = {}
extraction_count = 0


def get_layers(table: ModelInfoTable, params: ParameterFile) -> LayerSequence:
    """Split a model into its layers once; later calls hit the cache."""
    global extraction_count
    key = (table, params)
    cached = _layer_cache.get(key)
    if cached is not None:
        return cached
    if table.total_depth != params.entry_count:
        raise StructuralError(
            f"model {table.name!r}: table depth {table.total_depth} != "
            f"{params.entry_count} parameter entries"
        )
    layers = []
    start = 0
    for record in table.layers:
        layers.append(Layer(record, range(start, start + record.depth)))
        start += record.depth
    extraction_count += 1
    seq = LayerSequence(table.name, table, params, tuple(layers))
    _layer_cache[key] = seq
    return seq


@dataclass(frozen=True)
class Block:
    model: str
    index: int
    start: int
    end: int
    size: int
    depth: int
    flops: int
    params: range
    offset: int  # payload span of the block
    length: int

    @property
    def range(self) -> tuple[int, int]:
        return (self.start, self.end)


def check_points(table: ModelInfoTable, points: Iterable[int]) -> tuple[int, ...]:
    points = tuple(int(p) for p in points)
    prev = 0
    for p in points:
        if not 1 <= p <= len(table) - 1:
            raise ValueError(f"partition point {p} outside 1..{len(table) - 1}")
        if p <= prev:
            raise ValueError(f"partition points must be strictly ascending: {list(points)}")
        prev = p
        edge = table.crossing_edge(p)
        if edge is not None:
            raise InfeasibleCutError(edge, p)
    return points


def block_ranges(n_layers: int, points: Sequence[int]) -> list[tuple[int, int]]:
    bounds = [0, *points, n_layers]
    return list(zip(bounds[:-1], bounds[1:]))


def create_blocks(part_points: Sequence[int], name: str, layers: LayerSequence) -> list[Block]:
    """Form blocks from cached layers. Only layer/parameter indices move."""
    points = check_points(layers.table, part_points)
    blocks = []
    for i, (start, end) in enumerate(block_ranges(len(layers), points)):
        members = layers.layers[start:end]
        p0 = members[0].params.start
        p1 = members[-1].params.stop
        offset, length = layers.params.span(p0, p1)
        blocks.append(
            Block(
                model=name,
                index=i,
                start=start,
                end=end,
                size=sum(l.record.size for l in members),
                depth=sum(l.record.depth for l in members),
                flops=sum(l.record.flops for l in members),
                params=range(p0, p1),
                offset=offset,
                length=length,
            )
        )
    return blocks


# ---------------------------------------------------------------------------
# skeleton
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SkeletonLayer:
    index: int
    kind: LayerKind
    slots: tuple[int, ...]


@dataclass(eq=False)
class Skeleton:
    """Architecture with reference slots in place of parameter payload.

    `slots[i]` is None while parameter i is unbound, otherwise a read-only
    view into whichever block buffer currently holds it.
    """

    name: str
    layers: tuple[SkeletonLayer, ...]
    edges: tuple[tuple[int, int], ...]
    attr: dict = field(default_factory=dict)
    slots: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if not self.slots:
            self.slots = [None] * self.slot_count

    @property
    def slot_count(self) -> int:
        return sum(len(l.slots) for l in self.layers)

    @cached_property
    def owner(self) -> dict[int, SkeletonLayer]:
        return {p: l for l in self.layers for p in l.slots}

    def expected_dims(self, param_index: int) -> tuple[int, ...] | None:
        layer = self.owner[param_index]
        dims = layer.kind.param_dims()
        if dims is None:
            return None
        return dims[param_index - layer.slots[0]]

    def to_dict(self) -> dict:
        return {
            "attr": self.attr,
            "edges": [list(e) for e in self.edges],
            "layers": [
                {"index": l.index, "kind": str(l.kind), "slots": list(l.slots)}
                | ({"skip_from": l.kind.skip_from} if isinstance(l.kind, Add) else {})
                for l in self.layers
            ],
            "name": self.name,
            "slot_count": self.slot_count,
        }

    def serialize(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def deserialize(cls, text: str) -> "Skeleton":
        d = json.loads(text)
        layers = tuple(
            SkeletonLayer(l["index"], parse_kind(l["kind"], l.get("skip_from")), tuple(l["slots"]))
            for l in d["layers"]
        )
        return cls(d["name"], layers, tuple(tuple(e) for e in d["edges"]), d["attr"])


def extract_skeleton(
    table: ModelInfoTable, params: ParameterFile, attr: dict | None = None
) -> Skeleton:
    """Keep kinds, topology and one unbound slot per parameter entry."""
    layers = get_layers(table, params)
    out = []
    for layer in layers.layers:
        kind = layer.record.kind
        expected = kind.param_dims()
        if expected is not None:
            actual = [params.entries[p].dims for p in layer.params]
            if [tuple(d) for d in expected] != actual:
                raise StructuralError(
                    f"layer {layer.record.index}: {kind} expects dims {expected}, "
                    f"file has {actual}"
                )
        size = sum(params.entries[p].length for p in layer.params)
        if size != layer.record.size:
            raise StructuralError(
                f"layer {layer.record.index}: table size {layer.record.size} != "
                f"file bytes {size}"
            )
        out.append(SkeletonLayer(layer.record.index, kind, tuple(layer.params)))
    edges = [(i - 1, i) for i in range(1, len(table))] + table.skip_edges()
    attr = {"name": table.name, "version": 1} if attr is None else dict(attr)
    return Skeleton(table.name, tuple(out), tuple(sorted(edges)), attr)


def table_to_csv(table: ModelInfoTable) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(TABLE_HEADER)
    for layer in table.layers:
        skip = layer.kind.skip_from if isinstance(layer.kind, Add) else ""
        writer.writerow([layer.index, str(layer.kind), layer.size, layer.depth, layer.flops, skip])
    return buf.getvalue()
