"""Seeded synthetic models: small executable nets and a ResNet-101-shaped table."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .profiler import DeviceProfile
from .registry import (
    MB,
    Add,
    Dense,
    LayerRecord,
    ModelInfoTable,
    Opaque,
    ParameterFile,
    ReLU,
    build_parameter_index,
    save_model_table,
    write_parameter_file,
)

# Rough edge-GPU magnitudes: ~1 ms/MB reads, ~52 us per reference bind,
# ~60 ms per GFLOP, ~10 us per reference reset.
EDGE_PROFILE = DeviceProfile(alpha=1e-3 / MB, beta=52e-6, gamma=6e-11, eta=1e-5)

# Layers the ResNet-101 info table lists explicitly: (size MB, depth, FLOPs).
_RESNET_HEAD = [(0.38, 1, 26.2e6), (1.49, 5, 0.8e3), (1.12, 1, 123.9e6), (5.93, 5, 4.2e3), (4.38, 6, 316.7e6)]
_RESNET_TAIL = [(23.6, 1, 30e3), (17.45, 1, 5e3)]
RESNET_TOTAL = 170 * MB
RESNET_FLOPS = 7_800_000_000


def _f32_bytes(mb: float) -> int:
    return int(round(mb * MB)) // 4 * 4


def resnet101_table(total: int = RESNET_TOTAL, seed: int = 101) -> ModelInfoTable:
    """101 opaque layers: the rows quoted for ResNet-101 plus a seeded middle.

    The 94 middle layers repeat a bottleneck-like depth pattern and are
    scaled so the model totals `total` bytes. All sizes are float32 multiples.
    """
    rng = np.random.default_rng(seed)
    head = [(_f32_bytes(s), d, int(f)) for s, d, f in _RESNET_HEAD]
    tail = [(_f32_bytes(s), d, int(f)) for s, d, f in _RESNET_TAIL]
    fixed = sum(s for s, _, _ in head + tail)
    n_mid = 101 - len(head) - len(tail)
    stage = np.repeat([1.0, 2.0, 4.0, 8.0], [8, 18, 52, 16])[:n_mid]
    weights = stage * rng.uniform(0.5, 1.5, n_mid)
    mid_sizes = [int(w) // 4 * 4 for w in weights / weights.sum() * (total - fixed)]
    mid_sizes[-1] += total - fixed - sum(mid_sizes)
    depths = [(1, 5, 6)[i % 3] for i in range(n_mid)]
    fixed_flops = sum(f for _, _, f in head + tail)
    fw = rng.uniform(0.5, 1.5, n_mid)
    mid_flops = [int(v) for v in fw / fw.sum() * (RESNET_FLOPS - fixed_flops)]
    rows = head + list(zip(mid_sizes, depths, mid_flops)) + tail
    layers = tuple(LayerRecord(i, Opaque(), s, d, f) for i, (s, d, f) in enumerate(rows))
    return ModelInfoTable("resnet101", layers)


def opaque_parameter_index(table: ModelInfoTable) -> ParameterFile:
    """Metadata-only parameter index whose entries split each layer's bytes."""
    dims = []
    for layer in table.layers:
        if layer.depth == 0:
            continue
        count = layer.size // 4
        base, extra = divmod(count, layer.depth)
        for k in range(layer.depth):
            dims.append((base + (1 if k < extra else 0),))
    return build_parameter_index(dims)


def random_net_spec(rng: np.random.Generator, n_layers: int, width: int = 8, add_prob: float = 0.25):
    """Layer kinds for a random Dense/ReLU/Add net. The first layer is Dense."""
    kinds = []
    widths = []  # output width of each layer
    cur = width
    for i in range(n_layers):
        r = rng.random()
        candidates = [j for j in range(max(0, i - 6), i - 1) if widths[j] == cur]
        if i > 0 and candidates and r < add_prob:
            kinds.append(Add(int(rng.choice(candidates))))
        elif i > 0 and r < add_prob + 0.25:
            kinds.append(ReLU())
        else:
            out = int(rng.choice([cur, cur, max(2, cur // 2), cur * 2])) if i > 0 else width
            out = min(out, 32)
            kinds.append(Dense(cur, out))
            cur = out
        widths.append(cur)
    return kinds


def random_net(seed: int, n_layers: int = 16, width: int = 8, name: str | None = None):
    """Return (table, weight arrays, input vector) for a seeded random net."""
    rng = np.random.default_rng(seed)
    kinds = random_net_spec(rng, n_layers, width)
    layers = []
    arrays = []
    for i, kind in enumerate(kinds):
        if isinstance(kind, Dense):
            W = (rng.standard_normal((kind.out_dim, kind.in_dim)) / np.sqrt(kind.in_dim)).astype("<f4")
            b = (0.1 * rng.standard_normal(kind.out_dim)).astype("<f4")
            arrays += [W, b]
            layers.append(LayerRecord(i, kind, W.nbytes + b.nbytes, 2, 2 * kind.in_dim * kind.out_dim))
        else:
            layers.append(LayerRecord(i, kind, 0, 0, 0))
    x = rng.standard_normal(width).astype("<f4")
    return ModelInfoTable(name or f"toy{seed}", tuple(layers)), arrays, x


def write_toy_model(directory: str | Path, seed: int, n_layers: int = 16, width: int = 8) -> Path:
    """Write table.csv and params.swpb for a random net into `directory`."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    table, arrays, x = random_net(seed, n_layers, width, name=directory.name)
    save_model_table(table, directory / "table.csv")
    write_parameter_file(directory / "params.swpb", arrays)
    np.save(directory / "input.npy", x)
    return directory
