"""End-to-end non-learned stereo matchers built from the volume operations.

Census (or gradient) features stand in for a trained backbone and a
separable box filter stands in for 3D aggregation networks, so the full
and fast attention-volume construction paths run as deterministic tensor
pipelines.  Raw census correlations live on a much smaller numeric scale
than trained network logits, so each pipeline multiplies its compressed
cost volume by a configurable temperature before any softmax; without it
the disparity expectation collapses toward the range midpoint.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from .acv import (
    AcvConfig,
    PatchWeights,
    VolumeRegularizer,
    attention_filter,
    build_mapm_volume,
    generate_attention_weights,
    identity_regularizer,
)
from .fast_acv import (
    VapConfig,
    build_compact_concat,
    cross_sample_map,
    confidence,
    cross_propagate,
    estimate_uncertainty,
    f2i_topk,
    fast_attention_filter,
    matching_score,
    predict_from_hypotheses,
    propagation_weights,
    regress_initial_disparity,
    sample_cross_disparities,
)
from .volume_core import (
    CostVolume,
    DisparityMap,
    FeatureMap,
    _resize_linear,
    build_concat_volume,
    group_correlation,
    soft_argmin,
    softmax_over_disparity,
    unfold_cross,
)

CHANNELS_PER_GROUP = 8
FAST_CORR_GROUPS = 12
CENSUS_WINDOW = 5

MODES = ("acv", "fast_acv")
FEATURE_BACKENDS = ("census", "gradient")
REGULARIZERS = ("identity", "box3d")

STAGES = ("feature_extraction", "volume_construction", "aggregation", "prediction")


@dataclass
class PipelineConfig:
    """Everything needed to run one matcher end to end."""

    mode: str
    d_max: int
    acv: Optional[AcvConfig] = None
    vap: VapConfig = field(default_factory=VapConfig)
    k: int = 24
    feature_backend: str = "census"
    regularizer: str = "identity"
    box_radius: int = 1
    temperature: float = 64.0
    threads: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.feature_backend not in FEATURE_BACKENDS:
            raise ValueError(f"feature_backend must be one of {FEATURE_BACKENDS}")
        if self.regularizer not in REGULARIZERS:
            raise ValueError(f"regularizer must be one of {REGULARIZERS}")
        if self.acv is None:
            self.acv = AcvConfig(d_max=self.d_max)
        if self.acv.d_max != self.d_max:
            raise ValueError("acv.d_max disagrees with pipeline d_max")
        if self.mode == "fast_acv":
            low_scale = 4 * self.vap.upsample_factor
            if self.d_max % low_scale != 0:
                raise ValueError(f"d_max must be divisible by {low_scale} in fast_acv mode")
            if not 1 <= self.k <= self.d_max // 4:
                raise ValueError("k must lie in [1, d_max / 4]")
        if self.box_radius < 0:
            raise ValueError("box_radius must be >= 0")
        if not (np.isfinite(self.temperature) and self.temperature > 0):
            raise ValueError("temperature must be positive")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    def as_dict(self) -> Dict[str, object]:
        return {
            "mode": self.mode,
            "d_max": self.d_max,
            "n_groups": self.acv.n_groups,
            "group_split": list(self.acv.group_split),
            "concat_channels": self.acv.concat_channels,
            "upsample_factor": self.vap.upsample_factor,
            "radius": self.vap.radius,
            "alpha": self.vap.alpha,
            "beta": self.vap.beta,
            "k": self.k,
            "feature_backend": self.feature_backend,
            "regularizer": self.regularizer,
            "box_radius": self.box_radius,
            "temperature": self.temperature,
            "threads": self.threads,
        }


class AllocationMeter:
    """Tracks named volume allocations and the peak number of live elements."""

    def __init__(self):
        self.counts: Dict[str, int] = {}
        self._live = 0
        self.peak = 0

    def alloc(self, name: str, elements: int):
        if name in self.counts:
            raise ValueError(f"duplicate allocation name {name!r}")
        self.counts[name] = int(elements)
        self._live += int(elements)
        self.peak = max(self.peak, self._live)

    def release(self, name: str):
        self._live -= self.counts[name]


@dataclass
class RunReport:
    """Per-stage wall times, volume allocation accounting and a config echo."""

    mode: str = ""
    stage_ms: Dict[str, float] = field(default_factory=dict)
    volume_elements: Dict[str, int] = field(default_factory=dict)
    peak_volume_elements: int = 0
    config: Dict[str, object] = field(default_factory=dict)

    def construction_plus_aggregation_ms(self) -> float:
        return self.stage_ms.get("volume_construction", 0.0) + self.stage_ms.get("aggregation", 0.0)

    def to_dict(self) -> Dict[str, object]:
        return {
            "mode": self.mode,
            "stage_ms": dict(self.stage_ms),
            "volume_elements": dict(self.volume_elements),
            "peak_volume_elements": self.peak_volume_elements,
            "config": dict(self.config),
        }

    def lines(self):
        out = [f"mode: {self.mode}"]
        for stage in STAGES:
            if stage in self.stage_ms:
                out.append(f"stage {stage}: {self.stage_ms[stage]:.2f} ms")
        for name, count in self.volume_elements.items():
            out.append(f"volume {name}: {count} elements")
        out.append(f"peak volume elements: {self.peak_volume_elements}")
        cfg = " ".join(f"{k}={v}" for k, v in self.config.items())
        out.append(f"config: {cfg}")
        return out


# ---------------------------------------------------------------------------
# Deterministic feature extraction

def census_features(intensities: np.ndarray, window: int = CENSUS_WINDOW,
                    resolution_scale: int = 1) -> FeatureMap:
    """Census transform: one +/-1 sign channel per off-center window pixel.

    Channel b holds sign(I(neighbor_b) - I(center)); ties map to 0 and the
    border replicates edge pixels.
    """
    if window % 2 == 0 or window < 3:
        raise ValueError("census window must be odd and >= 3")
    img = np.asarray(intensities, dtype=np.float32)
    if img.ndim != 2:
        raise ValueError("census_features expects a 2D intensity array")
    r = window // 2
    padded = np.pad(img, r, mode="edge")
    h, w = img.shape
    channels = []
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dy == 0 and dx == 0:
                continue
            neigh = padded[r + dy:r + dy + h, r + dx:r + dx + w]
            channels.append(np.sign(neigh - img))
    return FeatureMap(np.stack(channels, axis=0), resolution_scale)


def gradient_features(intensities: np.ndarray, resolution_scale: int = 1) -> FeatureMap:
    """Central-difference gradients plus their signs as a 4-channel map."""
    img = np.asarray(intensities, dtype=np.float32)
    if img.ndim != 2:
        raise ValueError("gradient_features expects a 2D intensity array")
    padded = np.pad(img, 1, mode="edge")
    dx = 0.5 * (padded[1:-1, 2:] - padded[1:-1, :-2])
    dy = 0.5 * (padded[2:, 1:-1] - padded[:-2, 1:-1])
    return FeatureMap(np.stack([dx, dy, np.sign(dx), np.sign(dy)], axis=0), resolution_scale)


def _base_features(img: np.ndarray, backend: str, scale: int) -> FeatureMap:
    if backend == "census":
        return census_features(img, CENSUS_WINDOW, scale)
    return gradient_features(img, scale)


def box_downsample(img: np.ndarray, factor: int) -> np.ndarray:
    """Mean-pool by an integer factor, edge padding any ragged remainder."""
    if factor < 1:
        raise ValueError("downsample factor must be >= 1")
    if factor == 1:
        return np.asarray(img, dtype=np.float32).copy()
    img = np.asarray(img, dtype=np.float32)
    h, w = img.shape
    hp = -(-h // factor) * factor
    wp = -(-w // factor) * factor
    padded = np.pad(img, ((0, hp - h), (0, wp - w)), mode="edge")
    return padded.reshape(hp // factor, factor, wp // factor, factor).mean(axis=(1, 3))


def _tile_channels(data: np.ndarray, n: int) -> np.ndarray:
    return np.take(data, np.arange(n) % data.shape[0], axis=0)


def _resize_features(data: np.ndarray, height: int, width: int) -> np.ndarray:
    out = _resize_linear(data, 1, height, align_corners=True)
    return _resize_linear(out, 2, width, align_corners=True)


@dataclass
class FeaturePyramid:
    """Feature maps the pipelines consume, all derived from one image."""

    levels: Tuple[FeatureMap, FeatureMap, FeatureMap]
    f_quarter: FeatureMap
    f_corr: FeatureMap


def build_feature_pyramid(image: np.ndarray, cfg: PipelineConfig) -> FeaturePyramid:
    """Census/gradient features at the scales both matchers need.

    Pseudo-levels l1..l3 at quarter resolution come from the quarter image
    and its 2x / 4x box-downsampled versions (upsampled back), with channel
    counts tiled to the grouped correlation layout.  f_quarter feeds
    concatenation volumes and f_corr feeds the low-resolution correlation.
    """
    img = np.asarray(getattr(image, "intensities", image), dtype=np.float32)
    if img.ndim != 2:
        raise ValueError("expected a 2D grayscale image")
    h, w = img.shape
    if h % 8 != 0 or w % 8 != 0:
        raise ValueError("image dimensions must be divisible by 8")
    backend = cfg.feature_backend
    h4, w4 = h // 4, w // 4

    img4 = box_downsample(img, 4)
    base4 = _base_features(img4, backend, 4)
    base8 = _base_features(box_downsample(img, 8), backend, 8)
    base16 = _base_features(box_downsample(img, 16), backend, 16)

    split = cfg.acv.group_split
    l1 = FeatureMap(_tile_channels(base4.data, split[0] * CHANNELS_PER_GROUP), 4)
    l2 = FeatureMap(_tile_channels(_resize_features(base8.data, h4, w4),
                                   split[1] * CHANNELS_PER_GROUP), 4)
    l3 = FeatureMap(_tile_channels(_resize_features(base16.data, h4, w4),
                                   split[2] * CHANNELS_PER_GROUP), 4)
    f_quarter = FeatureMap(_tile_channels(base4.data, cfg.acv.concat_channels), 4)

    corr_scale = 4 * cfg.vap.upsample_factor if cfg.mode == "fast_acv" else 8
    corr_base = base8 if corr_scale == 8 else _base_features(box_downsample(img, corr_scale),
                                                             backend, corr_scale)
    f_corr = FeatureMap(_tile_channels(corr_base.data, FAST_CORR_GROUPS * CHANNELS_PER_GROUP),
                        corr_scale)
    return FeaturePyramid((l1, l2, l3), f_quarter, f_corr)


# ---------------------------------------------------------------------------
# Regularizers

def box3d_regularize(v: CostVolume, radius: int) -> CostVolume:
    """Separable mean filter over (d, y, x) windows of side 2*radius + 1.

    Edges replicate; radius 0 is the identity.  Stands in for learned 3D
    aggregation.
    """
    if radius < 0:
        raise ValueError("box3d radius must be >= 0")
    if radius == 0:
        return CostVolume(v.data.copy(), v.resolution_scale)
    out = v.data.astype(np.float64)
    win = 2 * radius + 1
    for axis in (1, 2, 3):
        pad = [(0, 0)] * 4
        pad[axis] = (radius, radius)
        padded = np.pad(out, pad, mode="edge")
        cs = np.cumsum(padded, axis=axis, dtype=np.float64)
        zero_shape = list(cs.shape)
        zero_shape[axis] = 1
        cs = np.concatenate([np.zeros(zero_shape), cs], axis=axis)
        n = v.data.shape[axis]
        upper = np.take(cs, np.arange(win, win + n), axis=axis)
        lower = np.take(cs, np.arange(0, n), axis=axis)
        out = (upper - lower) / win
    return CostVolume(out.astype(np.float32), v.resolution_scale)


def make_regularizer(name: str, box_radius: int = 1) -> VolumeRegularizer:
    if name == "identity":
        return identity_regularizer
    if name == "box3d":
        return lambda v: box3d_regularize(v, box_radius)
    raise ValueError(f"unknown regularizer {name!r}")


def compress_concat_volume(v: CostVolume) -> CostVolume:
    """Reduce a concatenation volume to one matching-cost channel.

    Averages the products of corresponding left/right channel pairs, i.e. a
    fixed correlation readout of the stacked halves.  A plain channel mean
    would cancel on sign-coded features and carry no matching evidence.
    """
    if v.channels % 2 != 0:
        raise ValueError("concatenation volume must have an even channel count")
    half = v.channels // 2
    prod = v.data[:half] * v.data[half:]
    sum_dtype = np.float64 if half > 256 else np.float32
    cost = prod.sum(axis=0, dtype=sum_dtype) / np.float32(half)
    return CostVolume(cost[None].astype(np.float32), v.resolution_scale)


# ---------------------------------------------------------------------------
# Volume accounting

def expected_volume_elements(cfg: PipelineConfig, height: int, width: int) -> Dict[str, int]:
    """Analytic element counts for every volume a pipeline run allocates."""
    h4, w4 = height // 4, width // 4
    d4 = cfg.d_max // 4
    nc2 = 2 * cfg.acv.concat_channels
    if cfg.mode == "acv":
        return {
            "correlation": cfg.acv.n_groups * d4 * h4 * w4,
            "attention": d4 * h4 * w4,
            "concat": nc2 * d4 * h4 * w4,
            "filtered": nc2 * d4 * h4 * w4,
            "compressed": d4 * h4 * w4,
        }
    low = 4 * cfg.vap.upsample_factor
    dl, hl, wl = cfg.d_max // low, height // low, width // low
    return {
        "correlation": FAST_CORR_GROUPS * dl * hl * wl,
        "low_res_attention": dl * hl * wl,
        "v_init": d4 * h4 * w4,
        "unfolded": 5 * d4 * h4 * w4,
        "propagated": d4 * h4 * w4,
        "compact_concat": nc2 * cfg.k * h4 * w4,
        "compressed": cfg.k * h4 * w4,
        "filtered": cfg.k * h4 * w4,
    }


# ---------------------------------------------------------------------------
# Pipelines

def _check_pair(left, right):
    l = np.asarray(getattr(left, "intensities", left), dtype=np.float32)
    r = np.asarray(getattr(right, "intensities", right), dtype=np.float32)
    if l.ndim != 2 or r.ndim != 2:
        raise ValueError("expected 2D grayscale images")
    if l.shape != r.shape:
        raise ValueError("image size mismatch")
    if l.shape[0] % 8 != 0 or l.shape[1] % 8 != 0:
        raise ValueError("image dimensions must be divisible by 8")
    return l, r


def _upsample_fast_volume(v: CostVolume, factor: int) -> CostVolume:
    """Fast-path volume upsampling to quarter resolution.

    Spatial axes interpolate corner-aligned; the disparity axis keeps its
    index scale (output bin j reads input coordinate j / factor, clamped at
    the top) so that bin indices remain integer pixel disparities for
    hypothesis selection and compact gathers.
    """
    if factor == 1:
        return CostVolume(v.data.copy(), v.resolution_scale)
    out = _resize_linear(v.data, 1, v.disparities * factor, align_corners=False)
    out = _resize_linear(out, 2, v.height * factor, align_corners=True)
    out = _resize_linear(out, 3, v.width * factor, align_corners=True)
    return CostVolume(np.ascontiguousarray(out, dtype=np.float32),
                      max(1, v.resolution_scale // factor))


def _upsample_disparity_full(d: DisparityMap, height: int, width: int) -> DisparityMap:
    data = _resize_linear(d.data, 0, height, align_corners=True)
    data = _resize_linear(data, 1, width, align_corners=True)
    return DisparityMap(data, 1)


def _scaled(v: CostVolume, gain: float) -> CostVolume:
    return CostVolume(v.data * np.float32(gain), v.resolution_scale)


def run_acv_pipeline(left, right, cfg: PipelineConfig,
                     report: Optional[RunReport] = None) -> DisparityMap:
    """Full attention-concatenation-volume matcher at full output resolution.

    Features -> patch-matching volume -> attention weights -> concatenation
    volume -> attention filtering -> compression and regularization ->
    tempered softmax and soft-argmin -> x4 scale and bilinear upsampling.
    """
    l_img, r_img = _check_pair(left, right)
    h, w = l_img.shape
    reg = make_regularizer(cfg.regularizer, cfg.box_radius)
    meter = AllocationMeter()
    stage_ms = {}

    t0 = time.perf_counter()
    pyr_l = build_feature_pyramid(l_img, cfg)
    pyr_r = build_feature_pyramid(r_img, cfg)
    stage_ms["feature_extraction"] = (time.perf_counter() - t0) * 1000.0

    t0 = time.perf_counter()
    weights = [PatchWeights.uniform(k) for k in (1, 2, 3)]
    levels = [(pyr_l.levels[i], pyr_r.levels[i], weights[i]) for i in range(3)]
    c_patch = build_mapm_volume(levels, cfg.acv, cfg.threads)
    meter.alloc("correlation", c_patch.elements)
    a = generate_attention_weights(c_patch, reg)
    meter.alloc("attention", a.elements)
    meter.release("correlation")
    del c_patch
    c_concat = build_concat_volume(pyr_l.f_quarter, pyr_r.f_quarter, cfg.d_max // 4)
    meter.alloc("concat", c_concat.elements)
    filtered = attention_filter(a, c_concat)
    meter.alloc("filtered", filtered.elements)
    meter.release("concat")
    del c_concat
    stage_ms["volume_construction"] = (time.perf_counter() - t0) * 1000.0

    t0 = time.perf_counter()
    cost = compress_concat_volume(filtered)
    meter.alloc("compressed", cost.elements)
    meter.release("filtered")
    del filtered
    cost = reg(cost)
    stage_ms["aggregation"] = (time.perf_counter() - t0) * 1000.0

    t0 = time.perf_counter()
    p = softmax_over_disparity(_scaled(cost, cfg.temperature))
    d_quarter = soft_argmin(p, resolution_scale=4)
    full = _upsample_disparity_full(DisparityMap(d_quarter.data * 4.0, 4), h, w)
    stage_ms["prediction"] = (time.perf_counter() - t0) * 1000.0

    if report is not None:
        report.mode = "acv"
        report.stage_ms = stage_ms
        report.volume_elements = meter.counts
        report.peak_volume_elements = meter.peak
        report.config = cfg.as_dict()
    return full


def run_fast_acv_pipeline(left, right, cfg: PipelineConfig,
                          report: Optional[RunReport] = None) -> DisparityMap:
    """Fast attention-volume matcher: low-res correlation, VAP, top-K filter.

    Low-resolution group correlation -> regularized attention compression ->
    upsampling -> volume attention propagation -> top-K hypothesis
    selection -> compact filtered concatenation volume -> top-2 softmax
    prediction -> x4 scale and bilinear upsampling.
    """
    l_img, r_img = _check_pair(left, right)
    h, w = l_img.shape
    reg = make_regularizer(cfg.regularizer, cfg.box_radius)
    meter = AllocationMeter()
    stage_ms = {}
    factor = cfg.vap.upsample_factor

    t0 = time.perf_counter()
    pyr_l = build_feature_pyramid(l_img, cfg)
    pyr_r = build_feature_pyramid(r_img, cfg)
    stage_ms["feature_extraction"] = (time.perf_counter() - t0) * 1000.0

    t0 = time.perf_counter()
    d_low = cfg.d_max // (4 * factor)
    corr = group_correlation(pyr_l.f_corr, pyr_r.f_corr, d_low, FAST_CORR_GROUPS, cfg.threads)
    meter.alloc("correlation", corr.elements)
    a_low = generate_attention_weights(corr, reg)
    meter.alloc("low_res_attention", a_low.elements)
    meter.release("correlation")
    del corr
    v_init = _scaled(_upsample_fast_volume(a_low, factor), cfg.temperature)
    meter.alloc("v_init", v_init.elements)
    meter.release("low_res_attention")
    del a_low

    p_init, d_init = regress_initial_disparity(v_init)
    planes = sample_cross_disparities(d_init, cfg.vap.radius)
    scores = matching_score(pyr_l.f_quarter, pyr_r.f_quarter, planes)
    u = estimate_uncertainty(p_init, d_init)
    conf = cross_sample_map(confidence(u, cfg.vap.alpha, cfg.vap.beta), cfg.vap.radius)
    pw = propagation_weights(scores, conf)
    unfolded = unfold_cross(v_init, cfg.vap.radius)
    meter.alloc("unfolded", unfolded.elements)
    v_prop = cross_propagate(unfolded, pw)
    meter.alloc("propagated", v_prop.elements)
    meter.release("unfolded")
    meter.release("v_init")
    del unfolded, v_init

    hyp = f2i_topk(softmax_over_disparity(v_prop), cfg.k)
    meter.release("propagated")
    del v_prop
    compact = build_compact_concat(pyr_l.f_quarter, pyr_r.f_quarter, hyp.d_hyp)
    meter.alloc("compact_concat", compact.elements)
    stage_ms["volume_construction"] = (time.perf_counter() - t0) * 1000.0

    # The hypothesis axis is probability-ranked, not a disparity continuum:
    # the configured regularizer only touches the dense low-resolution volume
    # above, and filtering happens after compression so the attention enters
    # the per-hypothesis costs linearly rather than squared.
    t0 = time.perf_counter()
    cost_k = compress_concat_volume(compact)
    meter.alloc("compressed", cost_k.elements)
    meter.release("compact_concat")
    del compact
    cost = fast_attention_filter(hyp.a_f, cost_k)
    meter.alloc("filtered", cost.elements)
    meter.release("compressed")
    del cost_k
    stage_ms["aggregation"] = (time.perf_counter() - t0) * 1000.0

    t0 = time.perf_counter()
    top = min(2, cfg.k)
    d_quarter = predict_from_hypotheses(_scaled(cost, cfg.temperature), hyp.d_hyp, top)
    full = _upsample_disparity_full(DisparityMap(d_quarter.data * 4.0, 4), h, w)
    stage_ms["prediction"] = (time.perf_counter() - t0) * 1000.0

    if report is not None:
        report.mode = "fast_acv"
        report.stage_ms = stage_ms
        report.volume_elements = meter.counts
        report.peak_volume_elements = meter.peak
        report.config = cfg.as_dict()
    return full


def run_pipeline(left, right, cfg: PipelineConfig,
                 report: Optional[RunReport] = None) -> DisparityMap:
    """Dispatch on cfg.mode."""
    if cfg.mode == "acv":
        return run_acv_pipeline(left, right, cfg, report)
    return run_fast_acv_pipeline(left, right, cfg, report)
