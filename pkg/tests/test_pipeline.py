import numpy as np
import pytest

from stereo_costvol import selftest
from stereo_costvol.acv import PatchWeights, build_mapm_volume, \
    generate_attention_weights
from stereo_costvol.io_formats import StereogramSpec, generate_stereogram
from stereo_costvol.metrics import epe, exclude_border
from stereo_costvol.pipeline import (
    CHANNELS_PER_GROUP,
    FAST_CORR_GROUPS,
    PipelineConfig,
    RunReport,
    box3d_regularize,
    box_downsample,
    build_feature_pyramid,
    census_features,
    compress_concat_volume,
    expected_volume_elements,
    gradient_features,
    run_acv_pipeline,
    run_fast_acv_pipeline,
    run_pipeline,
)
from stereo_costvol.volume_core import CostVolume


def stereogram(disparity=8, seed=7, h=128, w=256):
    return generate_stereogram(StereogramSpec(h, w, disparity, 0.5, seed))


# ---------------------------------------------------------------------------
# config

def test_config_divisibility_rules():
    with pytest.raises(ValueError):
        PipelineConfig("acv", 30)
    with pytest.raises(ValueError):
        PipelineConfig("fast_acv", 36)  # multiple of 4 but not 8
    PipelineConfig("acv", 36, k=9)
    with pytest.raises(ValueError):
        PipelineConfig("fast_acv", 32, k=9)  # k above d_max / 4


def test_config_rejects_unknown_names():
    with pytest.raises(ValueError):
        PipelineConfig("both", 32)
    with pytest.raises(ValueError):
        PipelineConfig("acv", 32, feature_backend="sift")
    with pytest.raises(ValueError):
        PipelineConfig("acv", 32, regularizer="hourglass")
    with pytest.raises(ValueError):
        PipelineConfig("acv", 32, temperature=0.0)


# ---------------------------------------------------------------------------
# census features

def test_census_constant_image_is_zero():
    feats = census_features(np.full((6, 6), 0.5, dtype=np.float32), 5)
    assert feats.channels == 24
    assert np.all(feats.data == 0.0)


def test_census_vertical_step_edge():
    img = np.zeros((6, 8), dtype=np.float32)
    img[:, 4:] = 1.0
    feats = census_features(img, 3)
    # channel order for window 3: (-1,-1)..(1,1) skipping center; "right
    # neighbor" channel is index 4, "left neighbor" channel is index 3
    right_ch, left_ch = 4, 3
    assert np.all(feats.data[right_ch, :, 3] == 1.0)   # brighter pixel to the right
    assert np.all(feats.data[left_ch, :, 4] == -1.0)   # darker pixel to the left
    assert np.all(feats.data[:, :, 0] == 0.0)          # flat region


def test_census_rejects_even_window():
    with pytest.raises(ValueError):
        census_features(np.zeros((4, 4), dtype=np.float32), 4)


def test_gradient_features_shape_and_sign():
    img = np.tile(np.linspace(0, 1, 8, dtype=np.float32), (4, 1))
    feats = gradient_features(img)
    assert feats.channels == 4
    assert np.all(feats.data[0, :, 1:-1] > 0)       # dx positive on a ramp
    assert np.all(feats.data[2, :, 1:-1] == 1.0)    # its sign channel


# ---------------------------------------------------------------------------
# pyramid

def test_pyramid_channel_layout():
    cfg = PipelineConfig("fast_acv", 32, k=8)
    img = np.random.default_rng(0).random((32, 64)).astype(np.float32)
    pyr = build_feature_pyramid(img, cfg)
    assert [lvl.channels for lvl in pyr.levels] == \
        [s * CHANNELS_PER_GROUP for s in cfg.acv.group_split]
    assert pyr.f_quarter.channels == cfg.acv.concat_channels
    assert pyr.f_corr.channels == FAST_CORR_GROUPS * CHANNELS_PER_GROUP
    assert pyr.f_quarter.data.shape[1:] == (8, 16)
    assert pyr.f_corr.data.shape[1:] == (4, 8)


def test_pyramid_determinism_and_constant_invariance():
    cfg = PipelineConfig("acv", 32)
    img = np.random.default_rng(1).random((32, 64)).astype(np.float32)
    a = build_feature_pyramid(img, cfg)
    b = build_feature_pyramid(img, cfg)
    for fa, fb in zip(a.levels + (a.f_quarter, a.f_corr),
                      b.levels + (b.f_quarter, b.f_corr)):
        assert np.array_equal(fa.data, fb.data)
    const = build_feature_pyramid(np.full((32, 64), 0.3, dtype=np.float32), cfg)
    for fm in const.levels + (const.f_quarter, const.f_corr):
        assert np.all(fm.data == 0.0)


def test_pyramid_rejects_bad_dimensions():
    cfg = PipelineConfig("acv", 32)
    with pytest.raises(ValueError):
        build_feature_pyramid(np.zeros((30, 64), dtype=np.float32), cfg)


def test_box_downsample_pads_ragged_edges():
    img = np.arange(15, dtype=np.float32).reshape(3, 5)
    out = box_downsample(img, 2)
    assert out.shape == (2, 3)


# ---------------------------------------------------------------------------
# box3d regularizer

def test_box3d_radius_zero_is_identity():
    rng = np.random.default_rng(2)
    vol = CostVolume(rng.standard_normal((2, 3, 4, 5)).astype(np.float32))
    out = box3d_regularize(vol, 0)
    assert np.array_equal(out.data, vol.data)


def test_box3d_constant_volume_unchanged():
    vol = CostVolume(np.full((1, 4, 4, 4), 2.5, dtype=np.float32))
    assert np.max(np.abs(box3d_regularize(vol, 1).data - 2.5)) < 1e-6


def test_box3d_matches_dense_oracle():
    rng = np.random.default_rng(3)
    vol = CostVolume(rng.standard_normal((1, 6, 6, 6)).astype(np.float32))
    out = box3d_regularize(vol, 1)
    for d in range(6):
        for y in range(6):
            for x in range(6):
                acc = 0.0
                for dd in (-1, 0, 1):
                    for dy in (-1, 0, 1):
                        for dx in (-1, 0, 1):
                            acc += vol.data[0, min(max(d + dd, 0), 5),
                                            min(max(y + dy, 0), 5),
                                            min(max(x + dx, 0), 5)]
                assert abs(out.data[0, d, y, x] - acc / 27.0) < 1e-6


def test_compress_concat_requires_even_channels():
    with pytest.raises(ValueError):
        compress_concat_volume(CostVolume(np.zeros((3, 2, 2, 2), dtype=np.float32)))


# ---------------------------------------------------------------------------
# end-to-end pipelines

def test_acv_pipeline_recovers_constant_disparity():
    left, right, gt, mask = stereogram()
    cfg = PipelineConfig("acv", 32)
    pred = run_acv_pipeline(left, right, cfg)
    interior = exclude_border(mask, 32)
    assert epe(pred, gt, interior) < 0.5
    assert pred.data.shape == (128, 256)


def test_fast_pipeline_recovers_constant_disparity():
    left, right, gt, mask = stereogram()
    interior = exclude_border(mask, 32)
    for k in (8, 4):
        cfg = PipelineConfig("fast_acv", 32, k=k)
        pred = run_fast_acv_pipeline(left, right, cfg)
        assert epe(pred, gt, interior) < 0.7


def test_k_sweep_self_consistency():
    left, right, gt, mask = stereogram(seed=21)
    interior = exclude_border(mask, 32)
    errors = {}
    for k in (8, 4):
        cfg = PipelineConfig("fast_acv", 32, k=k)
        errors[k] = epe(run_fast_acv_pipeline(left, right, cfg), gt, interior)
    assert abs(errors[8] - errors[4]) < 0.2


def test_identical_pair_collapses_to_zero():
    left, _, _, _ = stereogram(seed=3)
    for mode in ("acv", "fast_acv"):
        cfg = PipelineConfig(mode, 32, k=8)
        pred = run_pipeline(left, left, cfg)
        assert np.median(pred.data) < 1.0


def test_swapped_pair_search_range_semantics():
    # a swapped pair needs negative disparities, which the volume cannot
    # represent: outputs stay inside [0, D-1] and the attention signal
    # collapses toward zero instead of locking onto the true magnitude
    left, right, gt, mask = stereogram(seed=7)
    cfg = PipelineConfig("acv", 32)
    pred = run_acv_pipeline(right, left, cfg)
    assert pred.data.min() >= 0.0
    assert pred.data.max() <= cfg.d_max - 1

    def attention_stats(l_img, r_img):
        pyr_l = build_feature_pyramid(l_img.intensities, cfg)
        pyr_r = build_feature_pyramid(r_img.intensities, cfg)
        weights = [PatchWeights.uniform(i) for i in (1, 2, 3)]
        levels = [(pyr_l.levels[i], pyr_r.levels[i], weights[i]) for i in range(3)]
        a = generate_attention_weights(build_mapm_volume(levels, cfg.acv))
        inner = a.data[0][:, 8:-8, 8:-8]
        return inner.max(axis=0).mean(), np.median(inner.argmax(axis=0))

    aligned_peak, aligned_argmax = attention_stats(left, right)
    swapped_peak, swapped_argmax = attention_stats(right, left)
    assert swapped_peak < 0.5 * aligned_peak
    assert swapped_argmax <= aligned_argmax


def test_shift_equivariance():
    for mode in ("acv", "fast_acv"):
        medians = []
        for d in (8, 12):
            left, right, gt, mask = stereogram(disparity=d, seed=11)
            cfg = PipelineConfig(mode, 32, k=8)
            pred = run_pipeline(left, right, cfg)
            interior = exclude_border(mask, 32)
            medians.append(float(np.median(pred.data[interior.valid])))
        assert abs((medians[1] - medians[0]) - 4.0) <= 0.5


def test_pipelines_are_bitwise_deterministic_across_threads():
    left, right, _, _ = stereogram(seed=5, h=64, w=128)
    for mode in ("acv", "fast_acv"):
        runs = []
        for threads in (1, 8):
            cfg = PipelineConfig(mode, 32, k=8, threads=threads)
            runs.append(run_pipeline(left, right, cfg).data)
        assert np.array_equal(runs[0], runs[1])


def test_concurrent_invocations_share_no_state():
    from concurrent.futures import ThreadPoolExecutor

    left, right, _, _ = stereogram(seed=5, h=64, w=128)
    cfg = PipelineConfig("fast_acv", 32, k=8, threads=2)
    reference = run_pipeline(left, right, cfg).data
    with ThreadPoolExecutor(max_workers=4) as pool:
        futures = [pool.submit(run_pipeline, left, right, cfg) for _ in range(4)]
        for fut in futures:
            assert np.array_equal(fut.result().data, reference)


def test_output_range_invariant():
    left, right, _, _ = stereogram(seed=9, h=64, w=128)
    for mode in ("acv", "fast_acv"):
        cfg = PipelineConfig(mode, 32, k=8)
        pred = run_pipeline(left, right, cfg)
        assert pred.data.min() >= 0.0
        assert pred.data.max() <= cfg.d_max - 1


def test_image_size_mismatch_rejected():
    left, right, _, _ = stereogram(seed=1, h=64, w=128)
    small = left.intensities[:32, :64]
    cfg = PipelineConfig("acv", 32)
    with pytest.raises(ValueError, match="image size mismatch"):
        run_acv_pipeline(left.intensities, small, cfg)


def test_report_counts_match_analytic_formulas():
    left, right, _, _ = stereogram(seed=2, h=64, w=128)
    for mode in ("acv", "fast_acv"):
        cfg = PipelineConfig(mode, 32, k=6)
        report = RunReport()
        run_pipeline(left, right, cfg, report)
        assert report.volume_elements == expected_volume_elements(cfg, 64, 128)
        assert report.peak_volume_elements > 0
        assert all(v >= 0.0 for v in report.stage_ms.values())
        assert report.config["mode"] == mode


def test_fast_peak_memory_below_acv_peak():
    left, right, _, _ = stereogram(seed=4, h=64, w=128)
    peaks = {}
    for mode in ("acv", "fast_acv"):
        cfg = PipelineConfig(mode, 32, k=8)
        report = RunReport()
        run_pipeline(left, right, cfg, report)
        peaks[mode] = report.peak_volume_elements
    assert peaks["fast_acv"] < peaks["acv"]


def test_compact_volume_element_arithmetic():
    cfg = PipelineConfig("fast_acv", 192, k=24)
    counts = expected_volume_elements(cfg, 512, 960)
    full_cfg = PipelineConfig("acv", 192)
    full = expected_volume_elements(full_cfg, 512, 960)
    assert counts["compact_concat"] / full["concat"] == 0.5
    assert counts["compact_concat"] * 2 == full["concat"]


def test_box3d_regularizer_through_pipeline():
    # box averaging divides the cost peak by roughly the window size per
    # regularized disparity pass, so the sharpness factor scales with it;
    # the true disparity sits mid-range so the d-axis smear stays symmetric
    left, right, gt, mask = stereogram(disparity=16, seed=6, h=192, w=384)
    interior = exclude_border(mask, 64)
    fast_cfg = PipelineConfig("fast_acv", 64, k=16, regularizer="box3d", box_radius=1)
    assert epe(run_fast_acv_pipeline(left, right, fast_cfg), gt, interior) < 2.0
    acv_cfg = PipelineConfig("acv", 64, regularizer="box3d", box_radius=1,
                             temperature=256.0)
    pred = run_acv_pipeline(left, right, acv_cfg)
    assert epe(pred, gt, interior) < 1.0
    assert pred.data.min() >= 0.0 and pred.data.max() <= 63.0


def test_gradient_backend_runs():
    left, right, gt, mask = stereogram(seed=8)
    cfg = PipelineConfig("fast_acv", 32, k=8, feature_backend="gradient")
    pred = run_fast_acv_pipeline(left, right, cfg)
    interior = exclude_border(mask, 32)
    assert epe(pred, gt, interior) < 2.0


@pytest.mark.parametrize("check", [
    selftest.check_census_features,
    selftest.check_build_feature_pyramid,
    selftest.check_box3d_regularize,
    selftest.check_run_acv_pipeline,
    selftest.check_run_fast_acv_pipeline,
])
def test_randomized_oracles(check):
    check(np.random.default_rng(77), 6)
