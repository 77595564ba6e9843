"""Dense volume containers and the elementary tensor operations on them.

Cost and feature volumes are stored as float32 arrays; probability volumes
and disparity maps are float64 so that regression results survive oracle
comparison at tight tolerances.  Every operation is a pure function over
immutable inputs.  Per-pixel reductions always run over a fixed axis of a
fixed-shape array, so results are bitwise reproducible regardless of the
thread count used by callers: parallelism only ever splits work across
disjoint disparity slices.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np


def _all_finite(arr) -> bool:
    """One-pass finiteness check.

    A float64 sum of float32 data can only be non-finite if the data is;
    for float64 data a non-finite sum falls back to the exact check.
    """
    s = arr.sum(dtype=np.float64)
    if np.isfinite(s):
        return True
    return bool(np.all(np.isfinite(arr)))


def _as_float32(data, name):
    arr = np.asarray(data, dtype=np.float32)
    if not _all_finite(arr):
        raise ValueError(f"{name}: data contains non-finite values")
    return arr


@dataclass
class FeatureMap:
    """Per-pixel feature vectors, laid out (channels, height, width).

    resolution_scale is the denominator relative to the full image, e.g. 4
    for feature maps at quarter resolution.
    """

    data: np.ndarray
    resolution_scale: int = 1

    def __post_init__(self):
        self.data = _as_float32(self.data, "FeatureMap")
        if self.data.ndim != 3:
            raise ValueError("FeatureMap data must be (channels, height, width)")
        if self.resolution_scale < 1:
            raise ValueError("resolution_scale must be >= 1")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass
class CostVolume:
    """4D cost volume, laid out (channels, disparities, height, width).

    The channel axis holds correlation groups, concatenated feature
    channels, or a single attention channel depending on the producer.
    """

    data: np.ndarray
    resolution_scale: int = 1

    def __post_init__(self):
        self.data = _as_float32(self.data, "CostVolume")
        if self.data.ndim != 4:
            raise ValueError("CostVolume data must be (channels, disparities, height, width)")
        if self.resolution_scale < 1:
            raise ValueError("resolution_scale must be >= 1")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def disparities(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[2]

    @property
    def width(self) -> int:
        return self.data.shape[3]

    @property
    def elements(self) -> int:
        return self.data.size


@dataclass
class ProbabilityVolume:
    """Softmax-normalized volume, (disparities, height, width), float64."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3:
            raise ValueError("ProbabilityVolume data must be (disparities, height, width)")
        if not _all_finite(arr):
            raise ValueError("ProbabilityVolume: data contains non-finite values")
        if np.any(arr < 0.0):
            raise ValueError("ProbabilityVolume: negative probability")
        sums = arr.sum(axis=0)
        if np.any(np.abs(sums - 1.0) > 1e-5):
            raise ValueError("ProbabilityVolume: per-pixel sums deviate from 1")
        self.data = arr

    @property
    def disparities(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass
class DisparityMap:
    """Real-valued disparities in pixels at the stated resolution scale."""

    data: np.ndarray
    resolution_scale: int = 1

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError("DisparityMap data must be (height, width)")
        if not _all_finite(arr):
            raise ValueError("DisparityMap: data contains non-finite values")
        if self.resolution_scale < 1:
            raise ValueError("resolution_scale must be >= 1")
        self.data = arr

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


def _run_over_disparities(n_disp, worker, threads):
    """Run worker(d) for every disparity, optionally on a thread pool.

    Each worker writes a disjoint output slice, so scheduling order cannot
    change results.
    """
    if threads <= 1 or n_disp <= 1:
        for d in range(n_disp):
            worker(d)
        return
    with ThreadPoolExecutor(max_workers=min(threads, n_disp)) as pool:
        list(pool.map(worker, range(n_disp)))


def _group_inner(fl_g, fr_g, d):
    """Per-group inner products <f_l(x), f_r(x - d)> with zero fill at x < d.

    Inputs are (groups, cpg, height, width) views; output is (groups,
    height, width).  einsum with a fixed contraction order keeps the
    per-pixel reduction deterministic.
    """
    g, _, h, w = fl_g.shape
    out = np.zeros((g, h, w), dtype=np.float32)
    if d < w:
        out[..., d:] = np.einsum("gchw,gchw->ghw", fl_g[..., d:], fr_g[..., :w - d])
    return out


def softmax_over_disparity(v: CostVolume) -> ProbabilityVolume:
    """Convert a single-channel cost volume to per-pixel disparity probabilities.

    Stabilized by subtracting the per-pixel maximum before exponentiation.
    """
    if v.channels != 1:
        raise ValueError("softmax_over_disparity: cost volume must have a single channel")
    logits = v.data[0].astype(np.float64)
    if not _all_finite(logits):
        raise ValueError("non-finite cost")
    shifted = logits - logits.max(axis=0, keepdims=True)
    expd = np.exp(shifted)
    return ProbabilityVolume(expd / expd.sum(axis=0, keepdims=True))


def soft_argmin(p: ProbabilityVolume, resolution_scale: int = 1) -> DisparityMap:
    """Expected disparity under a probability volume (soft argmin regression)."""
    bins = np.arange(p.disparities, dtype=np.float64)
    disp = np.einsum("d,dhw->hw", bins, p.data)
    return DisparityMap(disp, resolution_scale)


def group_correlation(f_l: FeatureMap, f_r: FeatureMap, d_max: int, n_groups: int,
                      threads: int = 1) -> CostVolume:
    """Group-wise correlation volume between left and right feature maps.

    out(g, d, y, x) = (n_groups / channels) * <f_l^g(y, x), f_r^g(y, x - d)>
    where f^g is the g-th contiguous channel block.  Samples with x - d < 0
    contribute zero.
    """
    if f_l.data.shape != f_r.data.shape:
        raise ValueError("group_correlation: feature map shapes differ")
    c, h, w = f_l.data.shape
    if n_groups < 1 or c % n_groups != 0:
        raise ValueError(f"group_correlation: {c} channels not divisible into {n_groups} groups")
    if d_max < 1:
        raise ValueError("group_correlation: d_max must be >= 1")
    cpg = c // n_groups
    scale = np.float32(n_groups / c)
    fl_g = f_l.data.reshape(n_groups, cpg, h, w)
    fr_g = f_r.data.reshape(n_groups, cpg, h, w)
    volume = np.zeros((n_groups, d_max, h, w), dtype=np.float32)

    def run(d):
        volume[:, d] = _group_inner(fl_g, fr_g, d) * scale

    _run_over_disparities(d_max, run, threads)
    return CostVolume(volume, f_l.resolution_scale)


def build_concat_volume(f_l: FeatureMap, f_r: FeatureMap, d_max: int) -> CostVolume:
    """Concatenation volume: left features stacked on d-shifted right features.

    The first half of the channels repeats f_l over every disparity level,
    the second half holds f_r(x - d, y), zero filled where x - d < 0.
    """
    if f_l.data.shape != f_r.data.shape:
        raise ValueError("build_concat_volume: feature map shapes differ")
    c, h, w = f_l.data.shape
    volume = np.zeros((2 * c, d_max, h, w), dtype=np.float32)
    volume[:c] = f_l.data[:, None]
    for d in range(d_max):
        if d == 0:
            volume[c:, 0] = f_r.data
        elif d < w:
            volume[c:, d, :, d:] = f_r.data[..., :w - d]
    return CostVolume(volume, f_l.resolution_scale)


def _resize_linear(arr, axis, out_len, align_corners=True):
    """Linear resample of one axis.

    align_corners=True maps the first/last samples onto each other.  With
    align_corners=False the axis keeps its index scale (output index j reads
    input coordinate j * n / out_len) and the trailing positions clamp to
    the edge.
    """
    n = arr.shape[axis]
    if out_len == n:
        return arr.copy()
    if n == 1:
        reps = [1] * arr.ndim
        reps[axis] = out_len
        return np.tile(arr, reps)
    if align_corners:
        pos = np.arange(out_len, dtype=np.float64) * (n - 1) / (out_len - 1)
    else:
        pos = np.arange(out_len, dtype=np.float64) * n / out_len
    i0 = np.clip(np.floor(pos).astype(np.intp), 0, n - 2)
    t = np.clip(pos - i0, 0.0, 1.0).astype(arr.dtype)
    shape = [1] * arr.ndim
    shape[axis] = out_len
    t = t.reshape(shape)
    lo = np.take(arr, i0, axis=axis)
    hi = np.take(arr, i0 + 1, axis=axis)
    return lo + t * (hi - lo)


def upsample_volume_trilinear(v: CostVolume, factor: int) -> CostVolume:
    """Upsample disparity, height and width by an integer factor.

    Corner-aligned linear interpolation along all three axes; factor 1 is
    the identity.  Disparity values regressed from the result must be
    rescaled by the factor, since the disparity axis is stretched too.
    """
    if int(factor) != factor or factor < 1:
        raise ValueError("upsample factor must be a positive integer")
    factor = int(factor)
    if factor == 1:
        return CostVolume(v.data.copy(), v.resolution_scale)
    out = v.data
    for axis in (1, 2, 3):
        out = _resize_linear(out, axis, v.data.shape[axis] * factor, align_corners=True)
    new_scale = max(1, v.resolution_scale // factor)
    return CostVolume(np.ascontiguousarray(out, dtype=np.float32), new_scale)


CROSS_OFFSETS = ((0, 0), (0, -1), (0, 1), (-1, 0), (1, 0))
CROSS_NAMES = ("center", "up", "down", "left", "right")


def _cross_sample_2d(arr, radius):
    """Stack arr sampled at the center and four cross offsets, edge replicated."""
    h, w = arr.shape[-2:]
    planes = []
    for dx, dy in CROSS_OFFSETS:
        ys = np.clip(np.arange(h) + dy * radius, 0, h - 1)
        xs = np.clip(np.arange(w) + dx * radius, 0, w - 1)
        planes.append(arr[..., ys[:, None], xs[None, :]])
    return np.stack(planes, axis=0)


def unfold_cross(v: CostVolume, radius: int) -> CostVolume:
    """Unfold a single-channel volume over a cross-shaped spatial neighborhood.

    Output channel order is (center, up, down, left, right); e.g. the
    "left" channel at (x, y) holds v at (x - radius, y).  Borders replicate
    the nearest edge value.
    """
    if v.channels != 1:
        raise ValueError("unfold_cross: cost volume must have a single channel")
    if radius < 1:
        raise ValueError("unfold_cross: radius must be >= 1")
    planes = _cross_sample_2d(v.data[0], radius)
    return CostVolume(planes, v.resolution_scale)
