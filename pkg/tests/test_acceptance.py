"""Acceptance suite: one test per release criterion, each printing a
PASS line with its measured numbers (run with -s to see them inline)."""

import io
import json
import time
from contextlib import redirect_stdout

import numpy as np
import pytest

from stereo_costvol import cli, selftest
from stereo_costvol.fast_acv import (
    cross_propagate,
    f2i_topk,
    propagation_weights,
)
from stereo_costvol.io_formats import StereogramSpec, generate_stereogram, write_pfm
from stereo_costvol.metrics import EvalMask, epe, exclude_border, smooth_l1
from stereo_costvol.pipeline import PipelineConfig, run_acv_pipeline, \
    run_fast_acv_pipeline, run_pipeline
from stereo_costvol.volume_core import (
    CostVolume,
    DisparityMap,
    ProbabilityVolume,
    softmax_over_disparity,
)

BENCH_ARGS = ["bench", "--sizes", "960x512", "--dmax", "192", "--k-sweep", "24",
              "--runs", "1", "--json"]


def _report(criterion, message):
    print(f"ACCEPTANCE {criterion} PASS: {message}")


@pytest.fixture(scope="module")
def bench_results():
    """Bench command output at 960x512, D=192, K=24 for threads 1 and 8."""
    results = {}
    for threads in (1, 8):
        buf = io.StringIO()
        with redirect_stdout(buf):
            code = cli.main(BENCH_ARGS + ["--threads", str(threads)])
        assert code == 0
        results[threads] = json.loads(buf.getvalue())
    return results


def test_criterion_1_oracle_equivalence():
    checks = [
        ("group_correlation", selftest.check_group_correlation),
        ("mapm_level", selftest.check_mapm_level),
        ("box3d_regularize", selftest.check_box3d_regularize),
        ("unfold_cross", selftest.check_unfold_cross),
        ("sample_cross_disparities", selftest.check_sample_cross_disparities),
        ("cross_propagate", selftest.check_cross_propagate),
        ("f2i_topk", selftest.check_f2i_topk),
        ("attention_filter", selftest.check_attention_filter),
        ("fast_attention_filter", selftest.check_fast_attention_filter),
    ]
    t0 = time.perf_counter()
    for name, fn in checks:
        fn(np.random.default_rng(1234), 100)
    elapsed = time.perf_counter() - t0
    assert elapsed < 60.0
    _report(1, f"{len(checks)} operations x 100 randomized oracle instances "
               f"in {elapsed:.1f} s")


def test_criterion_2_closed_forms():
    rng = np.random.default_rng(0)
    # softmax normalization within 1e-5
    for _ in range(20):
        logits = (rng.standard_normal((1, 16, 5, 5)) * 40).astype(np.float32)
        p = softmax_over_disparity(CostVolume(logits))
        assert np.all(np.abs(p.data.sum(axis=0) - 1.0) <= 1e-5)
    # uniform-distribution variance, exact
    from stereo_costvol.fast_acv import estimate_uncertainty
    from stereo_costvol.volume_core import soft_argmin
    for d in (2, 4, 8, 16):
        uni = ProbabilityVolume(np.full((d, 3, 3), 1.0 / d))
        u = estimate_uncertainty(uni, soft_argmin(uni))
        assert np.all(u == (d * d - 1) / 12.0)
    # smooth-L1 branch values
    m = EvalMask.full(1, 1)
    zero = DisparityMap([[0.0]])
    assert smooth_l1(zero, zero, m) == 0.0
    assert smooth_l1(DisparityMap([[0.5]]), zero, m) == 0.125
    assert smooth_l1(DisparityMap([[2.0]]), zero, m) == 1.5
    # sigmoid saturation bounds on propagation weights
    s = rng.standard_normal((5, 4, 4)).astype(np.float32)
    assert np.max(np.abs(propagation_weights(
        s, np.full((5, 4, 4), 20.0, np.float32)).w - s)) < 1e-8
    assert np.max(np.abs(propagation_weights(
        s, np.zeros((5, 4, 4), np.float32)).w - 0.5 * s)) < 1e-7
    _report(2, "softmax normalization 1e-5, uniform variance (D^2-1)/12 exact for "
               "D in {2,4,8,16}, smooth-L1 {0, 0.125, 1.5}, sigmoid saturation bounds")


def test_criterion_3_convexity():
    rng = np.random.default_rng(7)
    pixels = 0
    violations = 0
    while pixels < 1000:
        d, h, w = int(rng.integers(1, 7)), int(rng.integers(3, 9)), int(rng.integers(3, 9))
        v_u = CostVolume((rng.standard_normal((5, d, h, w)) * 20).astype(np.float32))
        field = propagation_weights(rng.standard_normal((5, h, w)).astype(np.float32) * 3,
                                    rng.standard_normal((5, h, w)).astype(np.float32) * 3)
        out = cross_propagate(v_u, field)
        lo = v_u.data.min(axis=0)
        hi = v_u.data.max(axis=0)
        violations += int(np.sum((out.data[0] < lo) | (out.data[0] > hi)))
        pixels += h * w
    assert violations == 0
    _report(3, f"cross_propagate convexity on {pixels} pixels, 0 violations")


def test_criterion_4_topk_semantics():
    selftest.check_f2i_topk(np.random.default_rng(99), 60)
    # deliberately duplicated probabilities exercise the smaller-index rule
    p = np.array([0.2, 0.2, 0.2, 0.2, 0.2]).reshape(5, 1, 1)
    hyp = f2i_topk(ProbabilityVolume(p), 3)
    assert list(hyp.d_hyp[:, 0, 0]) == [0, 1, 2]
    mixed = np.array([0.1, 0.3, 0.3, 0.2, 0.1]).reshape(5, 1, 1)
    hyp = f2i_topk(ProbabilityVolume(mixed), 2)
    assert list(hyp.d_hyp[:, 0, 0]) == [1, 2]
    _report(4, "top-K equals full-sort oracle incl. smaller-index tie rule "
               "on duplicated probabilities")


def test_criterion_5_synthetic_recovery():
    left, right, gt, mask = generate_stereogram(StereogramSpec(128, 256, 8, 0.5, 7))
    interior = exclude_border(mask, 32)
    timings = {}

    t0 = time.perf_counter()
    acv_pred = run_acv_pipeline(left, right, PipelineConfig("acv", 32))
    timings["acv"] = time.perf_counter() - t0
    acv_epe = epe(acv_pred, gt, interior)
    assert acv_epe < 0.5

    fast_epe = {}
    for k in (8, 4):
        t0 = time.perf_counter()
        pred = run_fast_acv_pipeline(left, right, PipelineConfig("fast_acv", 32, k=k))
        timings[f"fast_k{k}"] = time.perf_counter() - t0
        fast_epe[k] = epe(pred, gt, interior)
        assert fast_epe[k] < 0.7

    assert all(t < 10.0 for t in timings.values())
    _report(5, f"acv EPE {acv_epe:.3f} < 0.5, fast EPE k=8 {fast_epe[8]:.3f} / "
               f"k=4 {fast_epe[4]:.3f} < 0.7, max runtime "
               f"{max(timings.values()):.2f} s < 10 s")


def test_criterion_6_volume_size_arithmetic(bench_results):
    payload = bench_results[1]
    ratio = payload["ratios"][0]
    assert ratio["compact_ratio_analytic"] == 24 / 48 == 0.5
    assert ratio["compact_ratio_measured"] == ratio["compact_ratio_analytic"]
    assert ratio["compact_ratio_match"] is True
    expected_corr = (12 * (192 // 8) * (512 // 8) * (960 // 8)) \
        / (40 * (192 // 4) * (512 // 4) * (960 // 4))
    assert ratio["correlation_ratio_analytic"] == expected_corr
    assert ratio["correlation_ratio_measured"] == expected_corr
    assert ratio["correlation_ratio_match"] is True
    rows = {r["mode"]: r for r in payload["rows"]}
    assert rows["fast_acv"]["counts_match_analytic"] is True
    assert rows["acv"]["counts_match_analytic"] is True
    _report(6, f"compact/full = 0.5 exactly, correlation ratio "
               f"{expected_corr:.6f} analytic == measured bit-for-bit")


def test_criterion_7_bench_trend(bench_results):
    for threads, payload in bench_results.items():
        trend = payload["trends"][0]
        assert trend["fast_below_acv"] is True, f"threads={threads}"
    summary = ", ".join(
        f"threads={t}: fast {p['trends'][0]['fast_ms']:.0f} ms < "
        f"acv {p['trends'][0]['acv_ms']:.0f} ms"
        for t, p in bench_results.items())
    _report(7, f"fast construction+aggregation below acv at 960x512 D=192 K=24 "
               f"({summary})")


def test_criterion_8_thread_determinism():
    left, right, _, _ = generate_stereogram(StereogramSpec(128, 256, 8, 0.5, 7))
    for mode in ("acv", "fast_acv"):
        outputs = []
        for threads in (1, 8):
            cfg = PipelineConfig(mode, 32, k=8, threads=threads)
            outputs.append(run_pipeline(left, right, cfg).data)
        assert np.array_equal(outputs[0], outputs[1]), mode
    _report(8, "bitwise identical disparity maps for threads 1 vs 8, both modes")


def test_criterion_9_metric_fixture_through_cmd_eval(tmp_path, capsys):
    gt = DisparityMap(np.array([[100.0, 10.0], [5.0, 5.0]]))
    pred = DisparityMap(np.array([[104.0, 14.0], [5.0, 6.5]]))
    gt_p, pred_p = tmp_path / "gt.pfm", tmp_path / "pred.pfm"
    gt_p.write_bytes(write_pfm(gt))
    pred_p.write_bytes(write_pfm(pred))
    assert cli.main(["eval", str(pred_p), str(gt_p)]) == 0
    out = capsys.readouterr().out
    for line in ("EPE:   2.38", "D1:    25.00", "bad-1: 75.00",
                 "bad-2: 50.00", "bad-3: 50.00"):
        assert line in out
    _report(9, "hand-computed 4-pixel fixture matches cmd_eval 2-decimal output")


def test_criterion_10_io_round_trips():
    selftest.check_pfm_round_trip(np.random.default_rng(5), 100)
    selftest.check_kitti_png_round_trip(np.random.default_rng(6), 100)
    _report(10, "PFM and KITTI PNG write/read bitwise identity on 100 random "
                "maps each, including invalid-pixel patterns")
