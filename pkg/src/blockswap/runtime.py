"""Execute a model block by block under a hard parameter-memory budget.

Swap-in reads a block's payload span from the parameter file straight into
one freshly allocated 64-byte aligned buffer. Assembly writes a read-only
view of each entry into the skeleton's reference slots, so no parameter
byte is ever copied. Swap-out clears the slots and drops the buffer with
nothing written back. A ledger admits at most `m` resident blocks and
refuses anything that would push resident parameter bytes past
``budget * (1 - delta)``.

Dense layers accumulate ``W[:, j] * x[j]`` over ascending j in float32,
starting from zeros, and add the bias last. Swapped and monolithic runs
therefore produce bit-identical outputs.
"""
from __future__ import annotations

import hashlib
import json
import queue
import threading
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from .partitioner import DEFAULT_DELTA, DEFAULT_PARALLELISM
from .profiler import DelayEstimate, DeviceProfile, estimate_delays
from .registry import (
    Add,
    Block,
    Dense,
    ModelInfoTable,
    Opaque,
    ParamEntry,
    ParameterFile,
    ReLU,
    Skeleton,
    SkeletonLayer,
    StructuralError,
    create_blocks,
    get_layers,
)


class RuntimeContractError(RuntimeError):
    pass


class ContractViolation(RuntimeContractError):
    pass


class DimsMismatch(RuntimeContractError):
    def __init__(self, param_index: int, expected, actual):
        self.param_index = param_index
        super().__init__(
            f"param {param_index}: skeleton expects dims {list(expected)}, file entry has {list(actual)}"
        )


class BudgetInfeasible(RuntimeError):
    def __init__(self, message: str, snapshot: dict | None = None):
        self.snapshot = snapshot
        super().__init__(message)


class SwapIOError(IOError):
    pass


class Aborted(RuntimeError):
    pass


@dataclass
class Counters:
    allocations: int = 0
    staging_copies: int = 0
    storage_writes: int = 0
    payload_copies: int = 0
    bytes_read: int = 0
    slot_writes: int = 0
    slot_resets: int = 0
    releases: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def add(self, **deltas: int) -> None:
        with self._lock:
            for k, v in deltas.items():
                setattr(self, k, getattr(self, k) + v)

    def as_dict(self) -> dict[str, int]:
        with self._lock:
            return {f.name: getattr(self, f.name) for f in fields(self) if not f.name.startswith("_")}


class MemoryLedger:
    """Resident-block accounting; every update happens under one lock."""

    def __init__(self, budget: int, delta: float = DEFAULT_DELTA, m: int = DEFAULT_PARALLELISM):
        if budget <= 0:
            raise ValueError("budget must be positive")
        self.budget = budget
        self.delta = delta
        self.m = m
        self._cond = threading.Condition()
        self._resident: dict[str, dict[int, int]] = {}
        self.resident_bytes = 0
        self.peak_bytes = 0
        self.max_blocks = 0
        self.history: list[tuple[float, str, int, int, int]] = []  # (t, model, block, blocks, bytes)
        self._aborted = False
        self._t0 = time.perf_counter()

    @property
    def limit(self) -> float:
        return self.budget * (1 - self.delta)

    def resident_blocks(self, model: str) -> list[int]:
        with self._cond:
            return sorted(self._resident.get(model, {}))

    def _log(self, model: str, block: int) -> None:
        count = len(self._resident.get(model, {}))
        self.history.append((time.perf_counter() - self._t0, model, block, count, self.resident_bytes))

    def admit(self, model: str, block: int, nbytes: int) -> None:
        with self._cond:
            held = self._resident.setdefault(model, {})
            if block in held:
                raise ContractViolation(f"{model} block {block} is already resident")
            if len(held) >= self.m:
                raise ContractViolation(
                    f"{model}: swap-in of block {block} with {len(held)} blocks resident (m={self.m})"
                )
            if self.resident_bytes + nbytes > self.limit:
                raise BudgetInfeasible(
                    f"{model} block {block}: {self.resident_bytes + nbytes} B would exceed "
                    f"budget*(1-delta) = {self.limit:.0f} B",
                    self._snapshot(),
                )
            held[block] = nbytes
            self.resident_bytes += nbytes
            self.peak_bytes = max(self.peak_bytes, self.resident_bytes)
            self.max_blocks = max(self.max_blocks, len(held))
            self._log(model, block)

    def release(self, model: str, block: int) -> None:
        with self._cond:
            held = self._resident.get(model, {})
            if block not in held:
                raise ContractViolation(f"{model} block {block} released but not resident")
            self.resident_bytes -= held.pop(block)
            self._log(model, block)
            self._cond.notify_all()

    def wait_for_slot(self, model: str) -> None:
        with self._cond:
            while len(self._resident.get(model, {})) >= self.m:
                if self._aborted:
                    raise Aborted(model)
                self._cond.wait()
            if self._aborted:
                raise Aborted(model)

    def abort(self) -> None:
        with self._cond:
            self._aborted = True
            self._cond.notify_all()

    def _snapshot(self) -> dict:
        return {
            "budget": self.budget,
            "delta": self.delta,
            "limit": self.limit,
            "resident": {m: dict(b) for m, b in self._resident.items()},
            "resident_bytes": self.resident_bytes,
            "peak_bytes": self.peak_bytes,
            "max_blocks": self.max_blocks,
        }

    def snapshot(self) -> dict:
        with self._cond:
            return self._snapshot()


def aligned_empty(nbytes: int, alignment: int = 64) -> np.ndarray:
    """One allocation, sliced so the first byte sits on an `alignment` boundary."""
    raw = np.empty(nbytes + alignment, dtype=np.uint8)
    skew = (-raw.ctypes.data) % alignment
    return raw[skew : skew + nbytes]


@dataclass(eq=False)
class BlockBuffer:
    model: str
    index: int
    data: np.ndarray | None
    offset: int
    length: int
    entries: tuple[ParamEntry, ...]
    released: bool = False

    @property
    def address_range(self) -> tuple[int, int]:
        base = self.data.ctypes.data
        return base, base + self.length


def swap_in(
    params: ParameterFile,
    block: Block,
    ledger: MemoryLedger,
    counters: Counters | None = None,
) -> BlockBuffer:
    counters = counters if counters is not None else Counters()
    ledger.admit(block.model, block.index, block.size)
    try:
        buf = aligned_empty(block.length)
        counters.add(allocations=1)
        view = memoryview(buf)
        got = 0
        # unbuffered FileIO: readinto lands directly in the block buffer
        with open(params.path, "rb", buffering=0) as f:
            f.seek(params.payload_start + block.offset)
            while got < block.length:
                k = f.readinto(view[got:])
                if not k:
                    raise SwapIOError(
                        f"{block.model} block {block.index}: short read "
                        f"({got}/{block.length} B at payload offset {block.offset})"
                    )
                got += k
        counters.add(bytes_read=got)
    except OSError as exc:
        ledger.release(block.model, block.index)
        if isinstance(exc, SwapIOError):
            raise
        raise SwapIOError(f"{block.model} block {block.index}: {exc}") from exc
    except BaseException:
        ledger.release(block.model, block.index)
        raise
    entries = tuple(params.entries[p] for p in block.params)
    return BlockBuffer(block.model, block.index, buf, block.offset, block.length, entries)


@dataclass(eq=False)
class AssembledBlock:
    skeleton: Skeleton
    block: Block
    buffer: BlockBuffer
    layers: tuple[SkeletonLayer, ...]

    def bound_views(self) -> dict[int, np.ndarray]:
        return {p: self.skeleton.slots[p] for p in self.block.params}

    def contained(self) -> bool:
        """Every bound slot resolves to bytes inside the block buffer."""
        lo, hi = self.buffer.address_range
        for view in self.bound_views().values():
            if view is None:
                return False
            start = view.ctypes.data
            if not (lo <= start and start + view.nbytes <= hi):
                return False
        return True


def assemble_by_reference(
    skeleton: Skeleton,
    block: Block,
    buf: BlockBuffer,
    counters: Counters | None = None,
) -> AssembledBlock:
    """Bind slots in one index-aligned pass over the block's entries."""
    counters = counters if counters is not None else Counters()
    if buf.released or buf.data is None:
        raise ContractViolation(f"{block.model} block {block.index}: buffer already released")
    if len(buf.entries) != block.depth or len(block.params) != block.depth:
        raise ContractViolation(
            f"{block.model} block {block.index}: {len(buf.entries)} entries for {block.depth} slots"
        )
    for p, entry in zip(block.params, buf.entries):
        if entry.index != p:
            raise ContractViolation(f"entry {entry.index} not aligned with slot {p}")
        if skeleton.slots[p] is not None:
            raise ContractViolation(f"slot {p} already bound")
        expected = skeleton.expected_dims(p)
        if expected is not None and tuple(expected) != tuple(entry.dims):
            raise DimsMismatch(p, expected, entry.dims)
        view = np.frombuffer(
            buf.data, dtype="<f4", count=entry.count, offset=entry.offset - buf.offset
        ).reshape(entry.dims)
        view.flags.writeable = False
        skeleton.slots[p] = view
        counters.add(slot_writes=1)
    layers = skeleton.layers[block.start : block.end]
    return AssembledBlock(skeleton, block, buf, layers)


def dispatch(assembled: AssembledBlock) -> BlockBuffer:
    """Hand a block to the compute engine. Shared address space: the buffer is returned as is."""
    return assembled.buffer


def dense(W: np.ndarray, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    y = np.zeros(W.shape[0], dtype=np.float32)
    for j in range(W.shape[1]):
        y += W[:, j] * x[j]
    y += b
    return y


def run_layers(
    layers: Sequence[SkeletonLayer],
    param: Callable[[int], np.ndarray],
    x: np.ndarray,
) -> np.ndarray:
    """Apply `layers` in order; skip sources are kept only while needed."""
    first = layers[0].index if layers else 0
    needed = {l.kind.skip_from for l in layers if isinstance(l.kind, Add)}
    acts: dict[int, np.ndarray] = {}
    x = np.asarray(x, dtype=np.float32)
    for layer in layers:
        kind = layer.kind
        if isinstance(kind, Dense):
            if x.shape != (kind.in_dim,):
                raise ValueError(f"layer {layer.index}: input shape {x.shape}, expected ({kind.in_dim},)")
            x = dense(param(layer.slots[0]), param(layer.slots[1]), x)
        elif isinstance(kind, ReLU):
            x = np.maximum(x, np.float32(0))
        elif isinstance(kind, Add):
            if kind.skip_from < first or kind.skip_from not in acts:
                raise ContractViolation(
                    f"layer {layer.index}: skip source {kind.skip_from} not inside this block"
                )
            src = acts[kind.skip_from]
            if src.shape != x.shape:
                raise ValueError(f"layer {layer.index}: cannot add {src.shape} to {x.shape}")
            x = x + src
        elif isinstance(kind, Opaque):
            raise StructuralError(f"layer {layer.index}: opaque layers cannot be executed")
        if layer.index in needed:
            acts[layer.index] = x
    return x


def execute_block(assembled: AssembledBlock, x: np.ndarray) -> np.ndarray:
    slots = assembled.skeleton.slots

    def param(p: int) -> np.ndarray:
        v = slots[p]
        if v is None:
            raise ContractViolation(f"slot {p} reached while unbound")
        return v

    dispatch(assembled)
    return run_layers(assembled.layers, param, x)


def swap_out(
    assembled: AssembledBlock,
    buf: BlockBuffer,
    ledger: MemoryLedger,
    counters: Counters | None = None,
) -> None:
    """Drop the block: reset its slots and free the buffer. Nothing is written back."""
    counters = counters if counters is not None else Counters()
    if buf.released:
        raise ContractViolation(f"{buf.model} block {buf.index} released twice")
    for p in assembled.block.params:
        assembled.skeleton.slots[p] = None
    counters.add(slot_resets=len(assembled.block.params), releases=1)
    buf.released = True
    buf.data = None
    ledger.release(buf.model, buf.index)


# ---------------------------------------------------------------------------
# whole-model runs
# ---------------------------------------------------------------------------


def digest(x: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(x, dtype="<f4").tobytes()).hexdigest()


def skeleton_table(skeleton: Skeleton, params: ParameterFile) -> ModelInfoTable:
    """Rebuild an info table from a skeleton and its parameter index."""
    from .registry import LayerRecord

    layers = []
    for l in skeleton.layers:
        size = sum(params.entries[p].length for p in l.slots)
        if isinstance(l.kind, Dense):
            flops = 2 * l.kind.in_dim * l.kind.out_dim
        else:
            flops = 0
        layers.append(LayerRecord(l.index, l.kind, size, len(l.slots), flops))
    return ModelInfoTable(skeleton.name, tuple(layers))


@dataclass
class PhaseRecord:
    block: int
    phase: str
    start: float
    end: float


@dataclass
class ExecutionReport:
    model: str
    points: tuple[int, ...]
    phases: list[PhaseRecord]
    output: np.ndarray
    digest: str
    ledger: dict
    counters: dict[str, int]
    activation_bytes: int
    predicted: list[DelayEstimate] | None = None

    @property
    def n(self) -> int:
        return len(self.points) + 1

    def to_dict(self) -> dict:
        d = {
            "model": self.model,
            "points": list(self.points),
            "blocks": self.n,
            "digest": self.digest,
            "ledger": self.ledger,
            "counters": self.counters,
            "activation_bytes": self.activation_bytes,
            "phases": [asdict(p) for p in self.phases],
        }
        if self.predicted is not None:
            d["predicted"] = [asdict(p) for p in self.predicted]
        return d

    def to_text(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def timeline_csv(self) -> str:
        lines = ["model,block,phase,start_ms,end_ms"]
        for p in self.phases:
            lines.append(f"{self.model},{p.block},{p.phase},{p.start * 1e3:.6f},{p.end * 1e3:.6f}")
        return "\n".join(lines) + "\n"


def _window_peak(sizes: Sequence[int], m: int) -> int:
    w = min(m, len(sizes))
    return max(sum(sizes[i : i + w]) for i in range(len(sizes) - w + 1))


def run_model_swapped(
    skeleton: Skeleton,
    params: ParameterFile,
    points: Sequence[int],
    x: np.ndarray,
    budget: int,
    delta: float = DEFAULT_DELTA,
    m: int = DEFAULT_PARALLELISM,
    profile: DeviceProfile | None = None,
    table: ModelInfoTable | None = None,
    ledger: MemoryLedger | None = None,
) -> ExecutionReport:
    """Pipelined run: loader, compute and release lanes share only the ledger.

    While block i executes, block i-1 is released and block i+1 loaded as
    soon as a residency slot frees up.
    """
    table = table or skeleton_table(skeleton, params)
    layers = get_layers(table, params)
    blocks = create_blocks(points, skeleton.name, layers)
    ledger = ledger or MemoryLedger(budget, delta, m)
    peak = _window_peak([b.size for b in blocks], ledger.m)
    if peak > ledger.limit:
        raise BudgetInfeasible(
            f"{skeleton.name}: scheme {list(points)} needs {peak} B resident, "
            f"budget*(1-delta) is {ledger.limit:.0f} B",
            ledger.snapshot(),
        )
    counters = Counters()
    phases: list[PhaseRecord] = []
    phase_lock = threading.Lock()
    t0 = time.perf_counter()

    def record(block: int, phase: str, start: float, end: float):
        with phase_lock:
            phases.append(PhaseRecord(block, phase, start - t0, end - t0))

    ready: queue.Queue = queue.Queue()
    finished: queue.Queue = queue.Queue()
    live: dict[int, tuple[AssembledBlock | None, BlockBuffer]] = {}
    live_lock = threading.Lock()
    errors: list[BaseException] = []

    def loader():
        try:
            for blk in blocks:
                ledger.wait_for_slot(blk.model)
                a = time.perf_counter()
                buf = swap_in(params, blk, ledger, counters)
                with live_lock:
                    live[blk.index] = (None, buf)
                b = time.perf_counter()
                asm = assemble_by_reference(skeleton, blk, buf, counters)
                with live_lock:
                    live[blk.index] = (asm, buf)
                c = time.perf_counter()
                record(blk.index, "swap_in", a, b)
                record(blk.index, "assemble", b, c)
                ready.put(asm)
        except Aborted:
            pass
        except BaseException as exc:  # handed to the compute lane
            errors.append(exc)
            ready.put(None)

    def releaser():
        while True:
            asm = finished.get()
            if asm is None:
                return
            a = time.perf_counter()
            swap_out(asm, asm.buffer, ledger, counters)
            with live_lock:
                live.pop(asm.block.index, None)
            record(asm.block.index, "swap_out", a, time.perf_counter())

    load_thread = threading.Thread(target=loader, name=f"{skeleton.name}-load", daemon=True)
    release_thread = threading.Thread(target=releaser, name=f"{skeleton.name}-release", daemon=True)
    load_thread.start()
    release_thread.start()
    act = np.asarray(x, dtype=np.float32)
    act_bytes = act.nbytes
    try:
        for _ in blocks:
            asm = ready.get()
            if asm is None:
                raise errors[0]
            a = time.perf_counter()
            act = execute_block(asm, act)
            act_bytes = max(act_bytes, act.nbytes)
            record(asm.block.index, "execute", a, time.perf_counter())
            finished.put(asm)
    except BaseException as exc:
        ledger.abort()
        finished.put(None)
        load_thread.join()
        release_thread.join()
        with live_lock:
            leftovers = list(live.values())
            live.clear()
        for asm, buf in leftovers:
            if not buf.released:
                if asm is not None:
                    swap_out(asm, buf, ledger, counters)
                else:
                    buf.released = True
                    buf.data = None
                    ledger.release(buf.model, buf.index)
        if isinstance(exc, BudgetInfeasible):
            raise BudgetInfeasible(str(exc), ledger.snapshot()) from exc
        raise
    finished.put(None)
    load_thread.join()
    release_thread.join()

    phases.sort(key=lambda p: (p.block, p.start))
    snap = ledger.snapshot()
    predicted = None
    if profile is not None:
        predicted = [estimate_delays(profile, b.size, b.depth, b.flops) for b in blocks]
    return ExecutionReport(
        model=skeleton.name,
        points=tuple(points),
        phases=phases,
        output=act,
        digest=digest(act),
        ledger={
            "budget": ledger.budget,
            "delta": ledger.delta,
            "limit": ledger.limit,
            "peak_bytes": ledger.peak_bytes,
            "max_resident_blocks": ledger.max_blocks,
            "final_resident_bytes": snap["resident_bytes"],
        },
        counters=counters.as_dict(),
        activation_bytes=act_bytes,
        predicted=predicted,
    )


def run_model_monolithic(skeleton: Skeleton, params: ParameterFile, x: np.ndarray) -> np.ndarray:
    """Load the whole payload once and run every layer; the losslessness reference."""
    with open(params.path, "rb") as f:
        f.seek(params.payload_start)
        payload = f.read(params.payload_length)
    views = {
        e.index: np.frombuffer(payload, dtype="<f4", count=e.count, offset=e.offset).reshape(e.dims)
        for e in params.entries
    }
    return run_layers(skeleton.layers, views.__getitem__, x)
