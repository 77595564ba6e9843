"""Volume attention propagation and fine-to-important hypothesis selection.

The fast construction path regresses an initial disparity from an upsampled
low-resolution correlation volume, scores cross-shaped neighbor disparities
by feature similarity and distribution confidence, propagates reliable
correlation values, and finally keeps only the top-K disparity hypotheses
per pixel to build a compact filtered concatenation volume.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .volume_core import (
    CROSS_NAMES,
    CostVolume,
    DisparityMap,
    FeatureMap,
    ProbabilityVolume,
    _cross_sample_2d,
    soft_argmin,
    softmax_over_disparity,
)

N_CROSS = len(CROSS_NAMES)


@dataclass
class VapConfig:
    """Propagation geometry and the confidence mapping coefficients.

    alpha and beta are learned in a trained network; here they default to
    confidence that decreases linearly with distribution variance.
    """

    upsample_factor: int = 2
    radius: int = 1
    alpha: float = 1.0
    beta: float = -1.0

    def __post_init__(self):
        if self.upsample_factor < 1:
            raise ValueError("upsample_factor must be >= 1")
        if self.radius < 1:
            raise ValueError("radius must be >= 1")
        if not (np.isfinite(self.alpha) and np.isfinite(self.beta)):
            raise ValueError("alpha/beta must be finite")


@dataclass
class HypothesisSet:
    """Per-pixel K disparity hypotheses with their attention weights.

    a_f rows are sorted descending per pixel, d_hyp holds the matching
    disparity bin indices (distinct per pixel), and per-pixel weight sums
    never exceed 1 beyond rounding.
    """

    d_hyp: np.ndarray
    a_f: np.ndarray

    def __post_init__(self):
        d_hyp = np.asarray(self.d_hyp)
        a_f = np.asarray(self.a_f, dtype=np.float64)
        if d_hyp.ndim != 3 or a_f.shape != d_hyp.shape:
            raise ValueError("HypothesisSet: d_hyp and a_f must both be (K, height, width)")
        if not np.issubdtype(d_hyp.dtype, np.integer):
            raise ValueError("HypothesisSet: d_hyp must be integer disparity indices")
        if np.any(d_hyp < 0):
            raise ValueError("HypothesisSet: negative disparity index")
        if not np.all(np.isfinite(a_f)) or np.any(a_f < 0):
            raise ValueError("HypothesisSet: attention weights must be finite and non-negative")
        if d_hyp.shape[0] > 1:
            if np.any(np.diff(a_f, axis=0) > 0):
                raise ValueError("HypothesisSet: attention weights must be sorted descending")
            if np.any(np.diff(np.sort(d_hyp, axis=0), axis=0) == 0):
                raise ValueError("HypothesisSet: duplicate disparity hypothesis")
        if np.any(a_f.sum(axis=0) > 1.0 + 1e-5):
            raise ValueError("HypothesisSet: weight sum exceeds 1")
        self.d_hyp = d_hyp.astype(np.int32)
        self.a_f = a_f

    @property
    def k(self) -> int:
        return self.d_hyp.shape[0]


@dataclass
class PropagationField:
    """Matching scores, confidences and combined cross-propagation weights."""

    s: np.ndarray
    c: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.s, dtype=np.float32)
        c = np.asarray(self.c, dtype=np.float32)
        w = np.asarray(self.w, dtype=np.float32)
        if not (s.shape == c.shape == w.shape) or s.ndim != 3 or s.shape[0] != N_CROSS:
            raise ValueError(f"PropagationField arrays must share shape ({N_CROSS}, height, width)")
        for name, arr in (("s", s), ("c", c), ("w", w)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"PropagationField: non-finite {name}")
        self.s, self.c, self.w = s, c, w


def regress_initial_disparity(v_init: CostVolume) -> Tuple[ProbabilityVolume, DisparityMap]:
    """Probability volume and soft-argmin disparity from an initial volume."""
    p = softmax_over_disparity(v_init)
    return p, soft_argmin(p, v_init.resolution_scale)


def sample_cross_disparities(d_init: DisparityMap, radius: int) -> np.ndarray:
    """Disparity candidates from the center and four cross neighbors.

    Returns a (5, height, width) array ordered (center, up, down, left,
    right); border samples replicate the nearest edge pixel.
    """
    if radius < 1:
        raise ValueError("sample_cross_disparities: radius must be >= 1")
    return _cross_sample_2d(d_init.data, radius).astype(np.float64)


def cross_sample_map(values: np.ndarray, radius: int) -> np.ndarray:
    """Cross-shaped sampling of any per-pixel map, same layout as above."""
    if radius < 1:
        raise ValueError("cross_sample_map: radius must be >= 1")
    return _cross_sample_2d(np.asarray(values), radius)


def matching_score(f_l: FeatureMap, f_r: FeatureMap, d_m: np.ndarray) -> np.ndarray:
    """Channel-normalized inner product at the sampled candidate disparities.

    S_m(y, x) = (1 / C) * <F_l(y, x), F_r(y, x - d_m(y, x))>.  Fractional
    disparities sample F_r by linear interpolation along width; samples
    that fall outside the frame score zero.
    """
    if f_l.data.shape != f_r.data.shape:
        raise ValueError("matching_score: feature map shapes differ")
    d_m = np.asarray(d_m, dtype=np.float64)
    c, h, w = f_l.data.shape
    if d_m.ndim != 3 or d_m.shape[1:] != (h, w):
        raise ValueError("matching_score: candidate planes must be (M, height, width)")
    xs = np.arange(w, dtype=np.float64)
    scores = np.empty(d_m.shape, dtype=np.float32)
    sum_dtype = np.float64 if c > 256 else np.float32
    for m in range(d_m.shape[0]):
        u = xs[None, :] - d_m[m]
        inside = (u >= 0.0) & (u <= w - 1)
        u0 = np.clip(np.floor(u).astype(np.intp), 0, max(w - 2, 0))
        u1 = np.minimum(u0 + 1, w - 1)
        t = np.clip(u - u0, 0.0, 1.0).astype(np.float32)
        rows = np.arange(h)[:, None]
        lo = f_r.data[:, rows, u0]
        hi = f_r.data[:, rows, u1]
        sampled = lo + t[None] * (hi - lo)
        s = (f_l.data * sampled).sum(axis=0, dtype=sum_dtype) / np.float32(c)
        scores[m] = np.where(inside, s, 0.0)
    return scores


def estimate_uncertainty(p_init: ProbabilityVolume, d_init: DisparityMap) -> np.ndarray:
    """Variance of the disparity distribution around the regressed disparity."""
    if p_init.data.shape[1:] != d_init.data.shape:
        raise ValueError("estimate_uncertainty: shape mismatch")
    bins = np.arange(p_init.disparities, dtype=np.float64)[:, None, None]
    return ((bins - d_init.data[None]) ** 2 * p_init.data).sum(axis=0)


def confidence(u: np.ndarray, alpha: float, beta: float) -> np.ndarray:
    """Affine confidence from uncertainty: C = alpha + beta * U."""
    return (alpha + beta * np.asarray(u, dtype=np.float64)).astype(np.float32)


def propagation_weights(s: np.ndarray, c: np.ndarray) -> PropagationField:
    """Combine matching scores with sigmoid-squashed confidences.

    W_m = S_m * sigmoid(C_m), computed in double precision so saturated
    confidences pass scores through unchanged.
    """
    s = np.asarray(s, dtype=np.float32)
    c = np.asarray(c, dtype=np.float32)
    if s.shape != c.shape:
        raise ValueError("propagation_weights: score/confidence shape mismatch")
    sig = 1.0 / (1.0 + np.exp(-c.astype(np.float64)))
    w = (s.astype(np.float64) * sig).astype(np.float32)
    return PropagationField(s, c, w)


def cross_propagate(v_u: CostVolume, w: PropagationField) -> CostVolume:
    """Convex combination of the unfolded planes, weighted per pixel.

    The weights are a per-pixel softmax over the five cross positions,
    shared across all disparity bins.
    """
    if v_u.channels != N_CROSS:
        raise ValueError(f"cross_propagate: expected {N_CROSS} unfolded channels")
    if w.w.shape[1:] != v_u.data.shape[2:]:
        raise ValueError("cross_propagate: weight/volume shape mismatch")
    logits = w.w.astype(np.float64)
    logits -= logits.max(axis=0, keepdims=True)
    expw = np.exp(logits)
    probs = expw / expw.sum(axis=0, keepdims=True)
    out = np.einsum("mdhw,mhw->dhw", v_u.data.astype(np.float64), probs)
    return CostVolume(out[None].astype(np.float32), v_u.resolution_scale)


def f2i_topk(p: ProbabilityVolume, k: int) -> HypothesisSet:
    """Keep the K most probable disparities per pixel, descending.

    Ties between equal probabilities resolve toward the smaller disparity
    index, so results are independent of any internal sort details.
    """
    if not 1 <= k <= p.disparities:
        raise ValueError(f"f2i_topk: k must be in [1, {p.disparities}]")
    order = np.argsort(-p.data, axis=0, kind="stable")[:k]
    a_f = np.take_along_axis(p.data, order, axis=0)
    return HypothesisSet(order.astype(np.int32), a_f)


def build_compact_concat(f_l: FeatureMap, f_r: FeatureMap, d_hyp: np.ndarray) -> CostVolume:
    """Concatenation volume restricted to the per-pixel disparity hypotheses.

    Slice k at (x, y) stacks f_l(x, y) on f_r(x - d_hyp[k](x, y), y); the
    right half is zero where the hypothesis points outside the frame.
    """
    if f_l.data.shape != f_r.data.shape:
        raise ValueError("build_compact_concat: feature map shapes differ")
    d_hyp = np.asarray(d_hyp)
    if not np.issubdtype(d_hyp.dtype, np.integer):
        raise ValueError("build_compact_concat: d_hyp must be integer indices")
    c, h, w = f_l.data.shape
    if d_hyp.ndim != 3 or d_hyp.shape[1:] != (h, w):
        raise ValueError("build_compact_concat: d_hyp must be (K, height, width)")
    k = d_hyp.shape[0]
    volume = np.zeros((2 * c, k, h, w), dtype=np.float32)
    xs = np.arange(w)[None, None, :]
    src = xs - d_hyp
    inside = (src >= 0) & (src <= w - 1)
    src = np.clip(src, 0, w - 1)
    rows = np.arange(h)[None, :, None]
    gathered = f_r.data[:, rows, src]
    volume[:c] = f_l.data[:, None]
    volume[c:] = np.where(inside[None], gathered, 0.0)
    return CostVolume(volume, f_l.resolution_scale)


def fast_attention_filter(a_f: np.ndarray, c_compact: CostVolume) -> CostVolume:
    """Scale each hypothesis slice of the compact volume by its attention weight."""
    a_f = np.asarray(a_f, dtype=np.float32)
    if a_f.shape != c_compact.data.shape[1:]:
        raise ValueError("fast_attention_filter: weight/volume shape mismatch")
    return CostVolume(a_f[None] * c_compact.data, c_compact.resolution_scale)


def predict_from_hypotheses(v: CostVolume, d_hyp: np.ndarray, top: int = 2) -> DisparityMap:
    """Softmax-expected disparity over the strongest aggregated hypotheses.

    Selects the `top` largest values per pixel from the single-channel
    aggregated volume, softmaxes them, and returns the expectation of the
    matching hypothesis disparities (at the volume's resolution scale; the
    caller rescales to full resolution).
    """
    if v.channels != 1:
        raise ValueError("predict_from_hypotheses: volume must have a single channel")
    d_hyp = np.asarray(d_hyp)
    if d_hyp.shape != v.data.shape[1:]:
        raise ValueError("predict_from_hypotheses: hypothesis/volume shape mismatch")
    k = v.disparities
    if not 1 <= top <= k:
        raise ValueError(f"predict_from_hypotheses: top must be in [1, {k}]")
    vals = v.data[0].astype(np.float64)
    order = np.argsort(-vals, axis=0, kind="stable")[:top]
    sel = np.take_along_axis(vals, order, axis=0)
    hyps = np.take_along_axis(d_hyp.astype(np.float64), order, axis=0)
    sel -= sel.max(axis=0, keepdims=True)
    expv = np.exp(sel)
    weights = expv / expv.sum(axis=0, keepdims=True)
    return DisparityMap((weights * hyps).sum(axis=0), v.resolution_scale)
