"""Attention concatenation volume construction.

Builds a multi-level adaptive patch-matching correlation volume, compresses
it into single-channel attention weights, and filters a concatenation
volume with them.  Patch weights are plain configuration here (uniform by
default) and the learned aggregation network is replaced by a pluggable
regularizer callable, so every step stays a deterministic tensor operation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence, Tuple

import numpy as np

from .volume_core import (
    CostVolume,
    DisparityMap,
    FeatureMap,
    _group_inner,
    _run_over_disparities,
    soft_argmin,
    softmax_over_disparity,
)

# A regularizer smooths or passes through a cost volume without changing
# its shape; it stands in for learned 3D aggregation.
VolumeRegularizer = Callable[[CostVolume], CostVolume]


def identity_regularizer(v: CostVolume) -> CostVolume:
    return v


_PATCH_LEVELS = (1, 2, 3)


@dataclass
class PatchWeights:
    """Nine tap weights over the dilated 3x3 patch of one pyramid level.

    Taps cover offsets level * {-1, 0, +1} in both axes; weights are stored
    as a (3, 3) array indexed (row offset, column offset).
    """

    level: int
    weights: np.ndarray

    def __post_init__(self):
        if self.level not in _PATCH_LEVELS:
            raise ValueError(f"patch level must be one of {_PATCH_LEVELS}")
        w = np.asarray(self.weights, dtype=np.float32).reshape(3, 3)
        if not np.all(np.isfinite(w)):
            raise ValueError("PatchWeights: non-finite weight")
        self.weights = w

    @classmethod
    def uniform(cls, level: int) -> "PatchWeights":
        return cls(level, np.full((3, 3), 1.0 / 9.0, dtype=np.float32))

    @classmethod
    def center_only(cls, level: int) -> "PatchWeights":
        w = np.zeros((3, 3), dtype=np.float32)
        w[1, 1] = 1.0
        return cls(level, w)


@dataclass
class AcvConfig:
    """Disparity range and group layout for attention volume construction."""

    d_max: int
    n_groups: int = 40
    group_split: Tuple[int, int, int] = (8, 16, 16)
    concat_channels: int = 32

    def __post_init__(self):
        if self.d_max < 4 or self.d_max % 4 != 0:
            raise ValueError("d_max must be a positive multiple of 4")
        if sum(self.group_split) != self.n_groups:
            raise ValueError("group_split must sum to n_groups")
        if any(g < 1 for g in self.group_split):
            raise ValueError("group_split entries must be positive")
        if self.concat_channels < 1:
            raise ValueError("concat_channels must be positive")


def _shift_slices(h, w, dy, dx):
    """Destination/source slice pairs realizing out(y, x) = src(y - dy, x - dx)."""
    ys_dst = slice(max(dy, 0), h + min(dy, 0))
    xs_dst = slice(max(dx, 0), w + min(dx, 0))
    ys_src = slice(max(-dy, 0), h + min(-dy, 0))
    xs_src = slice(max(-dx, 0), w + min(-dx, 0))
    return ys_dst, xs_dst, ys_src, xs_src


def mapm_level(f_l: FeatureMap, f_r: FeatureMap, level: int, w: PatchWeights,
               d_max: int, n_groups: int, threads: int = 1,
               out: np.ndarray | None = None) -> CostVolume:
    """Multi-level adaptive patch matching correlation for one pyramid level.

    For every group g, disparity d and pixel (x, y):

        out = (n_groups / channels) * sum_{(i,j)} w_ij *
              <f_l^g(x - i, y - j), f_r^g(x - i - d, y - j)>

    with tap offsets i, j in level * {-1, 0, +1}.  Taps whose left or right
    sample falls outside the frame contribute zero.  `out`, when given, is
    a preallocated float32 (n_groups, d_max, height, width) target.
    """
    if level not in _PATCH_LEVELS:
        raise ValueError(f"patch level must be one of {_PATCH_LEVELS}")
    if w.level != level:
        raise ValueError("patch weights were built for a different level")
    if f_l.data.shape != f_r.data.shape:
        raise ValueError("mapm_level: feature map shapes differ")
    c, h, width = f_l.data.shape
    if n_groups < 1 or c % n_groups != 0:
        raise ValueError(f"mapm_level: {c} channels not divisible into {n_groups} groups")
    cpg = c // n_groups
    scale = np.float32(n_groups / c)
    offsets = (-level, 0, level)
    # Weight and normalization fold into one factor per tap; a weight of
    # exactly 1.0 therefore reproduces group_correlation bit for bit.
    taps = [(np.float32(w.weights[jj, ii] * scale), offsets[jj], offsets[ii])
            for jj in range(3) for ii in range(3)
            if w.weights[jj, ii] != 0.0]
    fl_g = f_l.data.reshape(n_groups, cpg, h, width)
    fr_g = f_r.data.reshape(n_groups, cpg, h, width)
    if out is None:
        out = np.zeros((n_groups, d_max, h, width), dtype=np.float32)
    elif out.shape != (n_groups, d_max, h, width) or out.dtype != np.float32:
        raise ValueError("mapm_level: bad preallocated output")

    def run(d):
        base = _group_inner(fl_g, fr_g, d)
        acc = np.zeros_like(base)
        for factor, dy, dx in taps:
            ys_dst, xs_dst, ys_src, xs_src = _shift_slices(h, width, dy, dx)
            acc[:, ys_dst, xs_dst] += factor * base[:, ys_src, xs_src]
        out[:, d] = acc

    _run_over_disparities(d_max, run, threads)
    return CostVolume(out, f_l.resolution_scale)


def build_mapm_volume(levels: Sequence[Tuple[FeatureMap, FeatureMap, PatchWeights]],
                      cfg: AcvConfig, threads: int = 1) -> CostVolume:
    """Concatenate per-level patch matching volumes into one grouped volume.

    levels supplies one (left features, right features, patch weights)
    triple per pyramid level.  Level k contributes cfg.group_split[k]
    correlation groups; the groups are stacked in level order, giving a
    volume of cfg.n_groups groups over cfg.d_max // 4 disparity bins.
    """
    if len(levels) != len(cfg.group_split):
        raise ValueError(f"expected {len(cfg.group_split)} levels, got {len(levels)}")
    d_bins = cfg.d_max // 4
    shape_hw = levels[0][0].data.shape[1:]
    cpg = None
    for (f_l, f_r, w), split in zip(levels, cfg.group_split):
        if f_l.data.shape != f_r.data.shape:
            raise ValueError("build_mapm_volume: left/right shapes differ")
        if f_l.data.shape[1:] != shape_hw:
            raise ValueError("build_mapm_volume: levels disagree on spatial size")
        if f_l.channels % split != 0:
            raise ValueError("build_mapm_volume: level channels not divisible by its group count")
        level_cpg = f_l.channels // split
        if cpg is None:
            cpg = level_cpg
        elif level_cpg != cpg:
            raise ValueError("build_mapm_volume: levels disagree on channels per group")
    volume = np.zeros((cfg.n_groups, d_bins) + shape_hw, dtype=np.float32)
    g0 = 0
    for (f_l, f_r, w), split in zip(levels, cfg.group_split):
        mapm_level(f_l, f_r, w.level, w, d_bins, split, threads, out=volume[g0:g0 + split])
        g0 += split
    return CostVolume(volume, levels[0][0].resolution_scale)


def generate_attention_weights(c_patch: CostVolume,
                               regularizer: VolumeRegularizer = identity_regularizer) -> CostVolume:
    """Regularize a grouped correlation volume and compress it to one channel.

    The compression is the arithmetic mean over groups, the unweighted
    stand-in for a learned 1x1x1 channel-reduction convolution.
    """
    reg = regularizer(c_patch)
    if reg.data.shape[1:] != c_patch.data.shape[1:]:
        raise ValueError("regularizer changed the volume geometry")
    return CostVolume(reg.data.mean(axis=0, keepdims=True), c_patch.resolution_scale)


def attention_filter(a: CostVolume, c_concat: CostVolume) -> CostVolume:
    """Scale every channel of a concatenation volume by the attention weights."""
    if a.channels != 1:
        raise ValueError("attention_filter: attention volume must have a single channel")
    if a.data.shape[1:] != c_concat.data.shape[1:]:
        raise ValueError("attention_filter: attention/concat shape mismatch")
    return CostVolume(a.data * c_concat.data, c_concat.resolution_scale)


def regress_attention_disparity(a: CostVolume) -> DisparityMap:
    """Soft-argmin disparity regressed from single-channel attention weights."""
    return soft_argmin(softmax_over_disparity(a), a.resolution_scale)
