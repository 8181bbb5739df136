"""Analytic complexity accounting and generated-weight statistics.

FLOP convention: one multiply-accumulate counts as 2 FLOPs, so a k x k
convolution contributes 2*C_out*C_in*k^2*H'*W'. Elementwise operations count
one FLOP per output element, 2x2 max pooling three comparisons per output
element, and pure data movement (upsampling, concatenation, constant grids)
counts zero. Only ratios between model variants are meaningful contracts;
the absolute numbers depend on these conventions.

Peak activation memory is a forward-only estimate: the plan below mirrors the
runtime operation order, every output is allocated at 4 bytes per element,
and an input is freed as soon as no later operation needs it.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .backbone import ConfigError, conv_plan
from .heads import HeadVariant
from .model import ModelSpec
from .tensor import Tensor

__all__ = [
    "ComplexityReport",
    "WeightStats",
    "count_complexity",
    "weight_stats",
    "export_stats_pgm",
    "load_stats_csv",
    "format_report_text",
    "format_report_kv",
]

BYTES_PER_ELEM = 4
STAT_NAMES = ("max", "mean", "min", "l2", "std")


@dataclass(frozen=True)
class ComplexityReport:
    params: int
    flops: int
    peak_activation_bytes: int
    input_shape: tuple[int, ...]


@dataclass
class _Node:
    name: str
    out_elems: int
    params: int
    flops: int
    inputs: list[int]


class _Plan:
    def __init__(self):
        self.nodes: list[_Node] = []

    def emit(self, name: str, out_elems: int, inputs: list[int], params: int = 0, flops: int = 0) -> int:
        self.nodes.append(_Node(name, out_elems, params, flops, inputs))
        return len(self.nodes) - 1

    def conv(self, name: str, src: int, c_in: int, c_out: int, k: int, hw: int) -> int:
        return self.emit(name, c_out * hw, [src], params=c_out * c_in * k * k, flops=2 * c_out * c_in * k * k * hw)

    def elemwise(self, name: str, src_ids: list[int], out_elems: int) -> int:
        return self.emit(name, out_elems, src_ids, flops=out_elems)


def _plan_model(spec: ModelSpec, h: int, w: int) -> _Plan:
    from dataclasses import replace

    cfg = replace(spec.backbone, in_channels=spec.backbone_in_channels)
    plan = _Plan()
    c_img = spec.backbone.in_channels
    x = plan.emit("input", c_img * h * w, [])
    if spec.head is HeadVariant.BASE_F:
        coords = plan.emit("coords", 2 * h * w, [])
        x = plan.emit("concat_input", (c_img + 2) * h * w, [x, coords])

    widths = cfg.level_widths
    hw = h * w
    prev_c = cfg.in_channels
    skips: list[tuple[int, int, int]] = []  # (node, channels, hw)
    for level in range(cfg.depth - 1):
        cw = widths[level]
        x = plan.conv(f"enc{level}.conv1", x, prev_c, cw, 3, hw)
        x = plan.elemwise(f"enc{level}.relu1", [x], cw * hw)
        x = plan.conv(f"enc{level}.conv2", x, cw, cw, 3, hw)
        x = plan.elemwise(f"enc{level}.relu2", [x], cw * hw)
        skips.append((x, cw, hw))
        hw //= 4
        x = plan.emit(f"enc{level}.pool", cw * hw, [x], flops=3 * cw * hw)
        prev_c = cw
    cw = widths[-1]
    x = plan.conv("center.conv1", x, prev_c, cw, 3, hw)
    x = plan.elemwise("center.relu1", [x], cw * hw)
    x = plan.conv("center.conv2", x, cw, cw, 3, hw)
    x = plan.elemwise("center.relu2", [x], cw * hw)
    prev_c = cw
    for level in reversed(range(cfg.depth - 1)):
        skip_node, skip_c, skip_hw = skips[level]
        hw = skip_hw
        x = plan.emit(f"dec{level}.up", prev_c * hw, [x])
        x = plan.emit(f"dec{level}.concat", (prev_c + skip_c) * hw, [x, skip_node])
        cw = widths[level]
        x = plan.conv(f"dec{level}.conv1", x, prev_c + skip_c, cw, 3, hw)
        x = plan.elemwise(f"dec{level}.relu1", [x], cw * hw)
        x = plan.conv(f"dec{level}.conv2", x, cw, cw, 3, hw)
        x = plan.elemwise(f"dec{level}.relu2", [x], cw * hw)
        prev_c = cw

    c_feat = spec.backbone.feature_channels
    n = spec.n_classes
    hphi = spec.phi_hidden
    hw = h * w
    if spec.head is HeadVariant.BASE or spec.head is HeadVariant.BASE_F:
        plan.conv("head.classify", x, c_feat, n, 1, hw)
    elif spec.head is HeadVariant.BASE_B:
        coords = plan.emit("head.coords", 2 * hw, [])
        xc = plan.emit("head.concat", (c_feat + 2) * hw, [x, coords])
        plan.conv("head.classify", xc, c_feat + 2, n, 1, hw)
    else:
        phi_out = n * c_feat if spec.head is HeadVariant.SCP_FINAL else 2 * c_feat
        s = plan.emit("head.posenc", 4 * hw, [])
        p = plan.conv("head.phi.conv1", s, 4, hphi, 1, hw)
        p = plan.elemwise("head.phi.relu1", [p], hphi * hw)
        p = plan.conv("head.phi.conv2", p, hphi, hphi, 1, hw)
        p = plan.elemwise("head.phi.relu2", [p], hphi * hw)
        p = plan.conv("head.phi.conv3", p, hphi, phi_out, 1, hw)
        if spec.head is HeadVariant.SCP_FINAL:
            # (W + w_r) * X summed over channels, w_r is a (C, N) parameter
            wsum = plan.elemwise("head.add_residual", [p], n * c_feat * hw)
            prod = plan.elemwise("head.mul_features", [wsum, x], n * c_feat * hw)
            plan.elemwise("head.chan_sum", [prod], n * hw)
            plan.nodes[wsum].params += c_feat * n
        else:
            z = plan.elemwise("head.normalize", [p, x], 2 * c_feat * hw)
            plan.conv("head.classify", z, c_feat, n, 1, hw)
    return plan


def count_complexity(spec: ModelSpec, input_shape: tuple[int, int, int]) -> ComplexityReport:
    c, h, w = input_shape
    if c != spec.backbone.in_channels:
        raise ConfigError(f"input has {c} channels, model expects {spec.backbone.in_channels}")
    f = spec.backbone.pool_factor
    if h % f or w % f:
        raise ConfigError(f"input {h}x{w} not divisible by 2^(depth-1) = {f}")
    plan = _plan_model(spec, h, w)
    params = sum(node.params for node in plan.nodes)
    flops = sum(node.flops for node in plan.nodes)

    last_use = {i: i for i in range(len(plan.nodes))}
    for i, node in enumerate(plan.nodes):
        for src in node.inputs:
            last_use[src] = i
    live = 0
    peak = 0
    for i, node in enumerate(plan.nodes):
        live += node.out_elems * BYTES_PER_ELEM
        peak = max(peak, live)
        # free every tensor whose last consumer is this node
        for src in set(node.inputs):
            if last_use[src] == i:
                live -= plan.nodes[src].out_elems * BYTES_PER_ELEM
    return ComplexityReport(params=params, flops=flops, peak_activation_bytes=peak, input_shape=tuple(input_shape))


def format_report_text(report: ComplexityReport) -> str:
    rows = [
        ("input shape", "x".join(str(d) for d in report.input_shape)),
        ("parameters", f"{report.params:,}"),
        ("forward FLOPs", f"{report.flops:,}"),
        ("peak activation bytes", f"{report.peak_activation_bytes:,}"),
    ]
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows)


def format_report_kv(report: ComplexityReport) -> str:
    return "\n".join(
        [
            f"input_shape={'x'.join(str(d) for d in report.input_shape)}",
            f"params={report.params}",
            f"flops={report.flops}",
            f"peak_activation_bytes={report.peak_activation_bytes}",
        ]
    )


# ---------------------------------------------------------------------------
# generated-weight statistics (per-pixel reductions along the channel axis)
# ---------------------------------------------------------------------------


@dataclass
class WeightStats:
    """Five (H, W) maps, each min-max normalized to [0, 1]; raw maps retained.

    ``constant_maps`` lists any statistic whose raw map had zero range and was
    therefore normalized to all zeros.
    """

    maps: dict[str, np.ndarray]
    raw: dict[str, np.ndarray]
    constant_maps: tuple[str, ...]


def weight_stats(wmap) -> WeightStats:
    arr = wmap.data if isinstance(wmap, Tensor) else np.asarray(wmap)
    if arr.ndim != 3:
        raise ValueError(f"weight map must be (channels, H, W), got {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError("weight map contains non-finite values")
    a = arr.astype(np.float64)
    raw = {
        "max": a.max(axis=0),
        "mean": a.mean(axis=0),
        "min": a.min(axis=0),
        "l2": np.sqrt((a * a).sum(axis=0)),
        "std": a.std(axis=0),  # population std
    }
    maps = {}
    constant = []
    for name, m in raw.items():
        lo, hi = float(m.min()), float(m.max())
        if hi > lo:
            maps[name] = (m - lo) / (hi - lo)
        else:
            maps[name] = np.zeros_like(m)
            constant.append(name)
    return WeightStats(maps=maps, raw=raw, constant_maps=tuple(constant))


def export_stats_pgm(stats: WeightStats, out_dir: str) -> list[str]:
    """Write five 8-bit P5 images plus a CSV of the raw per-pixel values."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for name in STAT_NAMES:
        m = stats.maps[name]
        h, w = m.shape
        path = os.path.join(out_dir, f"{name}.pgm")
        try:
            with open(path, "wb") as f:
                f.write(f"P5\n{w} {h}\n255\n".encode())
                f.write(np.floor(255.0 * m + 0.5).astype(np.uint8).tobytes())  # round half up
        except OSError as exc:
            raise OSError(f"failed writing {path}: {exc}") from exc
        written.append(path)
    csv_path = os.path.join(out_dir, "stats.csv")
    h, w = stats.raw["max"].shape
    with open(csv_path, "w") as f:
        f.write("i,j," + ",".join(STAT_NAMES) + "\n")
        for i in range(h):
            for j in range(w):
                vals = ",".join(f"{stats.raw[name][i, j]:.8e}" for name in STAT_NAMES)
                f.write(f"{i},{j},{vals}\n")
    written.append(csv_path)
    return written


def load_stats_csv(path: str) -> dict[str, np.ndarray]:
    rows = []
    with open(path) as f:
        header = f.readline().strip().split(",")
        for line in f:
            rows.append([float(v) for v in line.strip().split(",")])
    data = np.asarray(rows)
    h = int(data[:, 0].max()) + 1
    w = int(data[:, 1].max()) + 1
    out = {}
    for k, name in enumerate(header[2:]):
        m = np.zeros((h, w))
        m[data[:, 0].astype(int), data[:, 1].astype(int)] = data[:, 2 + k]
        out[name] = m
    return out
