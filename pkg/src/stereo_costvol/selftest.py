"""Embedded oracle suite: every operation checked against a naive reference.

Each check builds small randomized instances, recomputes the expected
result with straightforward scalar loops (or closed forms), and compares.
The checks are deliberately independent of the implementation paths they
verify.  `run_selftest` prints one line per operation and reports the
first failure; the same checks back the acceptance test suite at higher
case counts.
"""

from __future__ import annotations

import math

import numpy as np

from . import acv, fast_acv, io_formats, metrics, pipeline, volume_core


def _rand_feature(rng, c, h, w, scale=1):
    return volume_core.FeatureMap(rng.standard_normal((c, h, w)).astype(np.float32), scale)


# ---------------------------------------------------------------------------
# volume_core oracles

def check_softmax_over_disparity(rng, cases):
    for _ in range(cases):
        d, h, w = int(rng.integers(2, 9)), int(rng.integers(1, 7)), int(rng.integers(1, 7))
        logits = rng.standard_normal((1, d, h, w)).astype(np.float32) * 3
        p = volume_core.softmax_over_disparity(volume_core.CostVolume(logits))
        for y in range(h):
            for x in range(w):
                col = logits[0, :, y, x].astype(np.float64)
                m = col.max()
                e = [math.exp(v - m) for v in col]
                s = sum(e)
                for i in range(d):
                    assert abs(p.data[i, y, x] - e[i] / s) < 1e-12
        assert np.all(np.abs(p.data.sum(axis=0) - 1.0) < 1e-5)


def check_soft_argmin(rng, cases):
    for _ in range(cases):
        d, h, w = int(rng.integers(2, 9)), int(rng.integers(1, 7)), int(rng.integers(1, 7))
        raw = rng.random((d, h, w)) + 1e-3
        p = volume_core.ProbabilityVolume(raw / raw.sum(axis=0, keepdims=True))
        disp = volume_core.soft_argmin(p)
        for y in range(h):
            for x in range(w):
                expect = sum(i * p.data[i, y, x] for i in range(d))
                assert abs(disp.data[y, x] - expect) < 1e-12
        assert disp.data.min() >= 0.0 and disp.data.max() <= d - 1
    one_hot = np.zeros((8, 2, 2))
    one_hot[2] = 1.0
    hit = volume_core.soft_argmin(volume_core.ProbabilityVolume(one_hot))
    assert np.all(hit.data == 2.0)


def check_group_correlation(rng, cases):
    for _ in range(cases):
        g, cpg = int(rng.integers(1, 4)), int(rng.integers(1, 5))
        h, w = int(rng.integers(2, 10)), int(rng.integers(3, 16))
        d_max = int(rng.integers(1, 9))
        f_l = _rand_feature(rng, g * cpg, h, w)
        f_r = _rand_feature(rng, g * cpg, h, w)
        vol = volume_core.group_correlation(f_l, f_r, d_max, g)
        scale = g / (g * cpg)
        for gi in range(g):
            for d in range(d_max):
                for y in range(h):
                    for x in range(w):
                        if x - d < 0:
                            expect = 0.0
                        else:
                            expect = scale * sum(
                                float(f_l.data[gi * cpg + c, y, x]) *
                                float(f_r.data[gi * cpg + c, y, x - d])
                                for c in range(cpg))
                        assert abs(vol.data[gi, d, y, x] - expect) < 1e-6


def check_build_concat_volume(rng, cases):
    for _ in range(cases):
        c = int(rng.integers(1, 5))
        h, w = int(rng.integers(2, 8)), int(rng.integers(3, 12))
        d_max = int(rng.integers(1, 9))
        f_l = _rand_feature(rng, c, h, w)
        f_r = _rand_feature(rng, c, h, w)
        vol = volume_core.build_concat_volume(f_l, f_r, d_max)
        assert vol.channels == 2 * c
        for d in range(d_max):
            for y in range(h):
                for x in range(w):
                    for ci in range(c):
                        assert vol.data[ci, d, y, x] == f_l.data[ci, y, x]
                        expect = f_r.data[ci, y, x - d] if x - d >= 0 else 0.0
                        assert vol.data[c + ci, d, y, x] == expect


def check_upsample_volume_trilinear(rng, cases):
    for _ in range(cases):
        d, h, w = int(rng.integers(2, 6)), int(rng.integers(2, 6)), int(rng.integers(2, 6))
        vol = volume_core.CostVolume(rng.standard_normal((1, d, h, w)).astype(np.float32))
        same = volume_core.upsample_volume_trilinear(vol, 1)
        assert np.array_equal(same.data, vol.data)
        const = volume_core.CostVolume(np.full((1, d, h, w), 1.25, dtype=np.float32))
        up = volume_core.upsample_volume_trilinear(const, 2)
        assert up.data.shape == (1, 2 * d, 2 * h, 2 * w)
        assert np.all(up.data == 1.25)
        ramp = np.broadcast_to(np.arange(d, dtype=np.float32)[:, None, None] * 0.5,
                               (d, h, w))[None].copy()
        upr = volume_core.upsample_volume_trilinear(volume_core.CostVolume(ramp), 2)
        for j in range(2 * d):
            expect = 0.5 * j * (d - 1) / (2 * d - 1)
            assert np.all(np.abs(upr.data[0, j] - expect) < 1e-6)


def check_unfold_cross(rng, cases):
    for _ in range(cases):
        d, h, w = int(rng.integers(1, 5)), int(rng.integers(2, 9)), int(rng.integers(2, 9))
        radius = int(rng.integers(1, 3))
        vol = volume_core.CostVolume(rng.standard_normal((1, d, h, w)).astype(np.float32))
        unf = volume_core.unfold_cross(vol, radius)
        assert np.array_equal(unf.data[0], vol.data[0])
        offsets = {"up": (0, -radius), "down": (0, radius),
                   "left": (-radius, 0), "right": (radius, 0)}
        for m, name in enumerate(volume_core.CROSS_NAMES):
            dx, dy = (0, 0) if name == "center" else offsets[name]
            for di in range(d):
                for y in range(h):
                    for x in range(w):
                        sy = min(max(y + dy, 0), h - 1)
                        sx = min(max(x + dx, 0), w - 1)
                        assert unf.data[m, di, y, x] == vol.data[0, di, sy, sx]


# ---------------------------------------------------------------------------
# acv oracles

def _mapm_oracle(f_l, f_r, level, weights, d_max, n_groups):
    c, h, w = f_l.data.shape
    cpg = c // n_groups
    scale = n_groups / c
    offs = (-level, 0, level)
    out = np.zeros((n_groups, d_max, h, w))
    for gi in range(n_groups):
        for d in range(d_max):
            for y in range(h):
                for x in range(w):
                    acc = 0.0
                    for jj in range(3):
                        for ii in range(3):
                            yl, xl = y - offs[jj], x - offs[ii]
                            xr = xl - d
                            if not (0 <= yl < h and 0 <= xl < w and 0 <= xr):
                                continue
                            inner = sum(float(f_l.data[gi * cpg + cc, yl, xl]) *
                                        float(f_r.data[gi * cpg + cc, yl, xr])
                                        for cc in range(cpg))
                            acc += float(weights[jj, ii]) * inner
                    out[gi, d, y, x] = scale * acc
    return out


def check_mapm_level(rng, cases):
    for _ in range(cases):
        level = int(rng.integers(1, 4))
        g, cpg = int(rng.integers(1, 3)), int(rng.integers(1, 4))
        h, w = int(rng.integers(4, 11)), int(rng.integers(5, 13))
        d_max = int(rng.integers(1, 5))
        f_l = _rand_feature(rng, g * cpg, h, w)
        f_r = _rand_feature(rng, g * cpg, h, w)
        weights = acv.PatchWeights(level, rng.random((3, 3)).astype(np.float32))
        vol = acv.mapm_level(f_l, f_r, level, weights, d_max, g)
        expect = _mapm_oracle(f_l, f_r, level, weights.weights, d_max, g)
        assert np.max(np.abs(vol.data - expect)) < 1e-6
        center = acv.PatchWeights.center_only(level)
        direct = acv.mapm_level(f_l, f_r, level, center, d_max, g)
        plain = volume_core.group_correlation(f_l, f_r, d_max, g)
        assert np.array_equal(direct.data, plain.data)


def check_build_mapm_volume(rng, cases):
    for _ in range(cases):
        cpg = int(rng.integers(1, 3))
        split = (2, 3, 3)
        h, w = int(rng.integers(6, 10)), int(rng.integers(8, 14))
        cfg = acv.AcvConfig(d_max=8, n_groups=sum(split), group_split=split)
        levels = []
        for k, s in zip((1, 2, 3), split):
            levels.append((_rand_feature(rng, s * cpg, h, w),
                           _rand_feature(rng, s * cpg, h, w),
                           acv.PatchWeights.uniform(k)))
        vol = acv.build_mapm_volume(levels, cfg)
        assert vol.channels == cfg.n_groups
        assert vol.disparities == cfg.d_max // 4
        g0 = 0
        for (f_l, f_r, w_), s in zip(levels, split):
            part = acv.mapm_level(f_l, f_r, w_.level, w_, cfg.d_max // 4, s)
            assert np.array_equal(vol.data[g0:g0 + s], part.data)
            g0 += s


def check_generate_attention_weights(rng, cases):
    for _ in range(cases):
        g = int(rng.integers(1, 6))
        d, h, w = int(rng.integers(1, 5)), int(rng.integers(2, 7)), int(rng.integers(2, 7))
        vol = volume_core.CostVolume(rng.standard_normal((g, d, h, w)).astype(np.float32))
        a = acv.generate_attention_weights(vol)
        assert a.channels == 1
        for di in range(d):
            for y in range(h):
                for x in range(w):
                    expect = sum(float(vol.data[gi, di, y, x]) for gi in range(g)) / g
                    assert abs(a.data[0, di, y, x] - expect) < 1e-6


def check_attention_filter(rng, cases):
    for _ in range(cases):
        c = int(rng.integers(1, 7))
        d, h, w = int(rng.integers(1, 5)), int(rng.integers(2, 7)), int(rng.integers(2, 7))
        a = volume_core.CostVolume(rng.standard_normal((1, d, h, w)).astype(np.float32))
        concat = volume_core.CostVolume(rng.standard_normal((c, d, h, w)).astype(np.float32))
        out = acv.attention_filter(a, concat)
        for ci in range(c):
            for di in range(d):
                for y in range(h):
                    for x in range(w):
                        assert out.data[ci, di, y, x] == np.float32(
                            a.data[0, di, y, x] * concat.data[ci, di, y, x])
        ones = volume_core.CostVolume(np.ones((1, d, h, w), dtype=np.float32))
        assert np.array_equal(acv.attention_filter(ones, concat).data, concat.data)


def check_regress_attention_disparity(rng, cases):
    for _ in range(cases):
        d, h, w = int(rng.integers(2, 9)), int(rng.integers(2, 6)), int(rng.integers(2, 6))
        a = volume_core.CostVolume(rng.standard_normal((1, d, h, w)).astype(np.float32))
        disp = acv.regress_attention_disparity(a)
        p = volume_core.softmax_over_disparity(a)
        expect = volume_core.soft_argmin(p)
        assert np.max(np.abs(disp.data - expect.data)) < 1e-9
    flat = volume_core.CostVolume(np.zeros((1, 8, 3, 3), dtype=np.float32))
    assert np.all(np.abs(acv.regress_attention_disparity(flat).data - 3.5) < 1e-12)


# ---------------------------------------------------------------------------
# fast_acv oracles

def check_regress_initial_disparity(rng, cases):
    for _ in range(cases):
        d, h, w = int(rng.integers(2, 9)), int(rng.integers(2, 6)), int(rng.integers(2, 6))
        v = volume_core.CostVolume(rng.standard_normal((1, d, h, w)).astype(np.float32))
        p, disp = fast_acv.regress_initial_disparity(v)
        p2 = volume_core.softmax_over_disparity(v)
        assert np.array_equal(p.data, p2.data)
        assert np.max(np.abs(disp.data - volume_core.soft_argmin(p2).data)) < 1e-9


def check_sample_cross_disparities(rng, cases):
    for _ in range(cases):
        h, w = int(rng.integers(3, 9)), int(rng.integers(3, 9))
        radius = int(rng.integers(1, 3))
        d_init = volume_core.DisparityMap(rng.random((h, w)) * 7)
        planes = fast_acv.sample_cross_disparities(d_init, radius)
        assert planes.shape == (5, h, w)
        assert np.array_equal(planes[0], d_init.data)
        offsets = {1: (0, -radius), 2: (0, radius), 3: (-radius, 0), 4: (radius, 0)}
        for m, (dx, dy) in offsets.items():
            for y in range(h):
                for x in range(w):
                    sy = min(max(y + dy, 0), h - 1)
                    sx = min(max(x + dx, 0), w - 1)
                    assert planes[m, y, x] == d_init.data[sy, sx]


def check_matching_score(rng, cases):
    for _ in range(cases):
        c, h, w = int(rng.integers(1, 6)), int(rng.integers(2, 7)), int(rng.integers(4, 12))
        f_l = _rand_feature(rng, c, h, w)
        f_r = _rand_feature(rng, c, h, w)
        d_m = (rng.random((5, h, w)) * (w + 2) - 1.0)
        scores = fast_acv.matching_score(f_l, f_r, d_m)
        for m in range(5):
            for y in range(h):
                for x in range(w):
                    u = x - d_m[m, y, x]
                    if u < 0 or u > w - 1:
                        expect = 0.0
                    else:
                        u0 = int(math.floor(u))
                        u1 = min(u0 + 1, w - 1)
                        t = u - u0
                        expect = sum(
                            float(f_l.data[ci, y, x]) *
                            ((1 - t) * float(f_r.data[ci, y, u0]) +
                             t * float(f_r.data[ci, y, u1]))
                            for ci in range(c)) / c
                    assert abs(scores[m, y, x] - expect) < 1e-5
    f = _rand_feature(rng, 4, 3, 6)
    self_score = fast_acv.matching_score(f, f, np.zeros((5, 3, 6)))
    assert np.all(self_score >= 0.0)
    far = fast_acv.matching_score(f, f, np.full((5, 3, 6), 99.0))
    assert np.all(far == 0.0)


def check_estimate_uncertainty(rng, cases):
    for _ in range(cases):
        d, h, w = int(rng.integers(2, 9)), int(rng.integers(2, 6)), int(rng.integers(2, 6))
        raw = rng.random((d, h, w)) + 1e-3
        p = volume_core.ProbabilityVolume(raw / raw.sum(axis=0, keepdims=True))
        disp = volume_core.soft_argmin(p)
        u = fast_acv.estimate_uncertainty(p, disp)
        for y in range(h):
            for x in range(w):
                expect = sum(p.data[i, y, x] * (i - disp.data[y, x]) ** 2 for i in range(d))
                assert abs(u[y, x] - expect) < 1e-9
        assert np.all(u >= 0.0)
    for d in (2, 4, 8, 16):
        uni = volume_core.ProbabilityVolume(np.full((d, 2, 2), 1.0 / d))
        disp = volume_core.soft_argmin(uni)
        u = fast_acv.estimate_uncertainty(uni, disp)
        assert np.all(u == (d * d - 1) / 12.0)


def check_confidence(rng, cases):
    for _ in range(cases):
        h, w = int(rng.integers(2, 7)), int(rng.integers(2, 7))
        u = rng.random((h, w)) * 5
        alpha, beta = float(rng.normal()), float(rng.normal())
        c = fast_acv.confidence(u, alpha, beta)
        for y in range(h):
            for x in range(w):
                assert abs(c[y, x] - (alpha + beta * u[y, x])) < 1e-6
    assert np.all(fast_acv.confidence(np.zeros((2, 2)), 1.0, -1.0) == 1.0)
    assert np.all(fast_acv.confidence(np.full((2, 2), 4.0), 2.0, -0.5) == 0.0)


def check_propagation_weights(rng, cases):
    for _ in range(cases):
        h, w = int(rng.integers(2, 7)), int(rng.integers(2, 7))
        s = rng.standard_normal((5, h, w)).astype(np.float32)
        c = rng.standard_normal((5, h, w)).astype(np.float32) * 3
        field = fast_acv.propagation_weights(s, c)
        for m in range(5):
            for y in range(h):
                for x in range(w):
                    sig = 1.0 / (1.0 + math.exp(-float(c[m, y, x])))
                    assert abs(field.w[m, y, x] - s[m, y, x] * sig) < 1e-6
    s = rng.standard_normal((5, 3, 3)).astype(np.float32)
    half = fast_acv.propagation_weights(s, np.zeros((5, 3, 3), dtype=np.float32))
    assert np.max(np.abs(half.w - 0.5 * s)) < 1e-7
    sat = fast_acv.propagation_weights(s, np.full((5, 3, 3), 20.0, dtype=np.float32))
    assert np.max(np.abs(sat.w - s)) < 1e-8


def check_cross_propagate(rng, cases):
    for _ in range(cases):
        d, h, w = int(rng.integers(1, 6)), int(rng.integers(2, 8)), int(rng.integers(2, 8))
        v_u = volume_core.CostVolume(rng.standard_normal((5, d, h, w)).astype(np.float32))
        s = rng.standard_normal((5, h, w)).astype(np.float32)
        c = rng.standard_normal((5, h, w)).astype(np.float32)
        field = fast_acv.propagation_weights(s, c)
        out = fast_acv.cross_propagate(v_u, field)
        lo = v_u.data.min(axis=0)
        hi = v_u.data.max(axis=0)
        assert np.all(out.data[0] >= lo) and np.all(out.data[0] <= hi)
        for y in range(h):
            for x in range(w):
                col = field.w[:, y, x].astype(np.float64)
                e = np.exp(col - col.max())
                probs = e / e.sum()
                for di in range(d):
                    expect = sum(probs[m] * float(v_u.data[m, di, y, x]) for m in range(5))
                    assert abs(out.data[0, di, y, x] - expect) < 1e-6
    # center-dominant weights reproduce the center plane
    v_u = volume_core.CostVolume(rng.standard_normal((5, 3, 4, 4)).astype(np.float32))
    w_dom = np.full((5, 4, 4), -20.0, dtype=np.float32)
    w_dom[0] = 20.0
    field = fast_acv.PropagationField(np.ones((5, 4, 4), np.float32),
                                      np.zeros((5, 4, 4), np.float32), w_dom)
    out = fast_acv.cross_propagate(v_u, field)
    assert np.max(np.abs(out.data[0] - v_u.data[0])) < 1e-6


def check_f2i_topk(rng, cases):
    for _ in range(cases):
        d, h, w = int(rng.integers(2, 9)), int(rng.integers(2, 6)), int(rng.integers(2, 6))
        # quantized logits produce exactly duplicated probabilities
        logits = rng.integers(0, 3, size=(1, d, h, w)).astype(np.float32)
        p = volume_core.softmax_over_disparity(volume_core.CostVolume(logits))
        k = int(rng.integers(1, d + 1))
        hyp = fast_acv.f2i_topk(p, k)
        assert hyp.k == k
        for y in range(h):
            for x in range(w):
                order = sorted(range(d), key=lambda i: (-p.data[i, y, x], i))[:k]
                assert list(hyp.d_hyp[:, y, x]) == order
                for j, i in enumerate(order):
                    assert hyp.a_f[j, y, x] == p.data[i, y, x]
        assert np.all(hyp.a_f.sum(axis=0) <= 1.0 + 1e-5)
        if k == d:
            assert np.all(np.abs(hyp.a_f.sum(axis=0) - 1.0) < 1e-5)


def check_build_compact_concat(rng, cases):
    for _ in range(cases):
        c, h, w = int(rng.integers(1, 5)), int(rng.integers(2, 7)), int(rng.integers(3, 10))
        k = int(rng.integers(1, 5))
        f_l = _rand_feature(rng, c, h, w)
        f_r = _rand_feature(rng, c, h, w)
        d_hyp = rng.integers(0, w + 2, size=(k, h, w)).astype(np.int32)
        vol = fast_acv.build_compact_concat(f_l, f_r, d_hyp)
        assert vol.channels == 2 * c and vol.disparities == k
        for ki in range(k):
            for y in range(h):
                for x in range(w):
                    src = x - int(d_hyp[ki, y, x])
                    for ci in range(c):
                        assert vol.data[ci, ki, y, x] == f_l.data[ci, y, x]
                        expect = f_r.data[ci, y, src] if src >= 0 else 0.0
                        assert vol.data[c + ci, ki, y, x] == expect


def check_fast_attention_filter(rng, cases):
    for _ in range(cases):
        c, k = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        h, w = int(rng.integers(2, 7)), int(rng.integers(2, 7))
        a_f = rng.random((k, h, w)).astype(np.float32)
        vol = volume_core.CostVolume(rng.standard_normal((c, k, h, w)).astype(np.float32))
        out = fast_acv.fast_attention_filter(a_f, vol)
        for ci in range(c):
            for ki in range(k):
                for y in range(h):
                    for x in range(w):
                        assert out.data[ci, ki, y, x] == np.float32(
                            a_f[ki, y, x] * vol.data[ci, ki, y, x])
        ident = fast_acv.fast_attention_filter(np.ones((k, h, w), np.float32), vol)
        assert np.array_equal(ident.data, vol.data)
        zero = fast_acv.fast_attention_filter(np.zeros((k, h, w), np.float32), vol)
        assert np.all(zero.data == 0.0)


def check_predict_from_hypotheses(rng, cases):
    for _ in range(cases):
        k, h, w = int(rng.integers(2, 8)), int(rng.integers(2, 6)), int(rng.integers(2, 6))
        top = int(rng.integers(1, k + 1))
        v = volume_core.CostVolume(rng.standard_normal((1, k, h, w)).astype(np.float32) * 4)
        d_hyp = rng.integers(0, 48, size=(k, h, w)).astype(np.int32)
        disp = fast_acv.predict_from_hypotheses(v, d_hyp, top)
        for y in range(h):
            for x in range(w):
                order = sorted(range(k), key=lambda i: (-v.data[0, i, y, x], i))[:top]
                vals = [float(v.data[0, i, y, x]) for i in order]
                m = max(vals)
                e = [math.exp(val - m) for val in vals]
                s = sum(e)
                expect = sum(e[j] / s * float(d_hyp[order[j], y, x])
                             for j in range(top))
                assert abs(disp.data[y, x] - expect) < 1e-9


# ---------------------------------------------------------------------------
# pipeline oracles

def check_census_features(rng, cases):
    for _ in range(cases):
        h, w = int(rng.integers(3, 10)), int(rng.integers(3, 10))
        img = rng.random((h, w)).astype(np.float32)
        feats = pipeline.census_features(img, 5)
        assert feats.channels == 24
        m = 0
        for dy in range(-2, 3):
            for dx in range(-2, 3):
                if dy == 0 and dx == 0:
                    continue
                for y in range(h):
                    for x in range(w):
                        sy = min(max(y + dy, 0), h - 1)
                        sx = min(max(x + dx, 0), w - 1)
                        diff = float(img[sy, sx]) - float(img[y, x])
                        expect = 0.0 if diff == 0 else math.copysign(1.0, diff)
                        assert feats.data[m, y, x] == expect
                m += 1
    flat = pipeline.census_features(np.full((6, 6), 0.5, dtype=np.float32), 5)
    assert np.all(flat.data == 0.0)


def check_build_feature_pyramid(rng, cases):
    cfg = pipeline.PipelineConfig("fast_acv", 16, k=4)
    img = rng.random((16, 32)).astype(np.float32)
    pyr_a = pipeline.build_feature_pyramid(img, cfg)
    pyr_b = pipeline.build_feature_pyramid(img, cfg)
    split = cfg.acv.group_split
    assert pyr_a.levels[0].channels == split[0] * pipeline.CHANNELS_PER_GROUP
    assert pyr_a.levels[1].channels == split[1] * pipeline.CHANNELS_PER_GROUP
    assert pyr_a.levels[2].channels == split[2] * pipeline.CHANNELS_PER_GROUP
    assert pyr_a.f_quarter.channels == cfg.acv.concat_channels
    assert pyr_a.f_corr.channels == pipeline.FAST_CORR_GROUPS * pipeline.CHANNELS_PER_GROUP
    for fm_a, fm_b in zip(pyr_a.levels + (pyr_a.f_quarter, pyr_a.f_corr),
                          pyr_b.levels + (pyr_b.f_quarter, pyr_b.f_corr)):
        assert np.array_equal(fm_a.data, fm_b.data)
    const = pipeline.build_feature_pyramid(np.full((16, 32), 0.75, np.float32), cfg)
    for fm in const.levels + (const.f_quarter, const.f_corr):
        assert np.all(fm.data == 0.0)


def check_box3d_regularize(rng, cases):
    for _ in range(cases):
        c = int(rng.integers(1, 3))
        d, h, w = int(rng.integers(2, 7)), int(rng.integers(2, 7)), int(rng.integers(2, 7))
        vol = volume_core.CostVolume(rng.standard_normal((c, d, h, w)).astype(np.float32))
        ident = pipeline.box3d_regularize(vol, 0)
        assert np.array_equal(ident.data, vol.data)
        out = pipeline.box3d_regularize(vol, 1)
        for ci in range(c):
            for di in range(d):
                for y in range(h):
                    for x in range(w):
                        acc = 0.0
                        for dd in (-1, 0, 1):
                            for dy in (-1, 0, 1):
                                for dx in (-1, 0, 1):
                                    sd = min(max(di + dd, 0), d - 1)
                                    sy = min(max(y + dy, 0), h - 1)
                                    sx = min(max(x + dx, 0), w - 1)
                                    acc += float(vol.data[ci, sd, sy, sx])
                        assert abs(out.data[ci, di, y, x] - acc / 27.0) < 1e-6
    const = volume_core.CostVolume(np.full((1, 3, 4, 4), 2.5, dtype=np.float32))
    assert np.max(np.abs(pipeline.box3d_regularize(const, 2).data - 2.5)) < 1e-6


def _stereogram_case(seed, disparity=8):
    # disparity 8 stays an integer shift at 1/8 resolution, so the fast
    # path's low-resolution stage is well posed
    spec = io_formats.StereogramSpec(64, 128, disparity, 0.5, seed)
    return io_formats.generate_stereogram(spec)


def check_run_acv_pipeline(rng, cases):
    for seed in range(min(cases, 2)):
        left, right, gt, mask = _stereogram_case(seed)
        cfg = pipeline.PipelineConfig("acv", 16)
        pred = pipeline.run_acv_pipeline(left, right, cfg)
        interior = metrics.exclude_border(mask, 16)
        assert metrics.epe(pred, gt, interior) < 0.5
        assert pred.data.min() >= 0.0 and pred.data.max() <= cfg.d_max - 1


def check_run_fast_acv_pipeline(rng, cases):
    for seed in range(min(cases, 2)):
        left, right, gt, mask = _stereogram_case(seed)
        cfg = pipeline.PipelineConfig("fast_acv", 16, k=4)
        pred = pipeline.run_fast_acv_pipeline(left, right, cfg)
        interior = metrics.exclude_border(mask, 16)
        assert metrics.epe(pred, gt, interior) < 0.7
        assert pred.data.min() >= 0.0 and pred.data.max() <= cfg.d_max - 1


# ---------------------------------------------------------------------------
# metrics oracles

def _random_eval_case(rng, h, w):
    pred = volume_core.DisparityMap(rng.random((h, w)) * 30)
    gt = volume_core.DisparityMap(rng.random((h, w)) * 30)
    valid = rng.random((h, w)) < 0.8
    if not valid.any():
        valid[0, 0] = True
    return pred, gt, metrics.EvalMask(valid)


def check_epe(rng, cases):
    for _ in range(cases):
        h, w = int(rng.integers(2, 9)), int(rng.integers(2, 9))
        pred, gt, mask = _random_eval_case(rng, h, w)
        got = metrics.epe(pred, gt, mask)
        acc, n = 0.0, 0
        for y in range(h):
            for x in range(w):
                if mask.valid[y, x]:
                    acc += abs(pred.data[y, x] - gt.data[y, x])
                    n += 1
        assert abs(got - acc / n) < 1e-12
    same = volume_core.DisparityMap(np.full((3, 3), 4.0))
    assert metrics.epe(same, same, metrics.EvalMask.full(3, 3)) == 0.0


def check_d1(rng, cases):
    for _ in range(cases):
        h, w = int(rng.integers(2, 9)), int(rng.integers(2, 9))
        pred, gt, mask = _random_eval_case(rng, h, w)
        got = metrics.d1(pred, gt, mask)
        bad, n = 0, 0
        for y in range(h):
            for x in range(w):
                if mask.valid[y, x]:
                    err = abs(pred.data[y, x] - gt.data[y, x])
                    if err > max(3.0, 0.05 * abs(gt.data[y, x])):
                        bad += 1
                    n += 1
        assert abs(got - 100.0 * bad / n) < 1e-9
    m = metrics.EvalMask.full(1, 1)
    assert metrics.d1(volume_core.DisparityMap([[104.0]]),
                      volume_core.DisparityMap([[100.0]]), m) == 0.0
    assert metrics.d1(volume_core.DisparityMap([[14.0]]),
                      volume_core.DisparityMap([[10.0]]), m) == 100.0


def check_bad_x(rng, cases):
    for _ in range(cases):
        h, w = int(rng.integers(2, 9)), int(rng.integers(2, 9))
        pred, gt, mask = _random_eval_case(rng, h, w)
        x_thr = float(rng.random() * 4 + 0.25)
        got = metrics.bad_x(pred, gt, mask, x_thr)
        bad, n = 0, 0
        for y in range(h):
            for xx in range(w):
                if mask.valid[y, xx]:
                    if abs(pred.data[y, xx] - gt.data[y, xx]) > x_thr:
                        bad += 1
                    n += 1
        assert abs(got - 100.0 * bad / n) < 1e-9


def check_smooth_l1(rng, cases):
    for _ in range(cases):
        h, w = int(rng.integers(2, 9)), int(rng.integers(2, 9))
        pred, gt, mask = _random_eval_case(rng, h, w)
        got = metrics.smooth_l1(pred, gt, mask)
        acc, n = 0.0, 0
        for y in range(h):
            for x in range(w):
                if mask.valid[y, x]:
                    e = abs(pred.data[y, x] - gt.data[y, x])
                    acc += 0.5 * e * e if e < 1.0 else e - 0.5
                    n += 1
        assert abs(got - acc / n) < 1e-12
    m = metrics.EvalMask.full(1, 1)
    zero = volume_core.DisparityMap([[0.0]])
    assert metrics.smooth_l1(zero, zero, m) == 0.0
    assert metrics.smooth_l1(volume_core.DisparityMap([[0.5]]), zero, m) == 0.125
    assert metrics.smooth_l1(volume_core.DisparityMap([[2.0]]), zero, m) == 1.5


def check_acv_total_loss(rng, cases):
    for _ in range(cases):
        h, w = int(rng.integers(2, 7)), int(rng.integers(2, 7))
        maps = [volume_core.DisparityMap(rng.random((h, w)) * 10) for _ in range(5)]
        mask = metrics.EvalMask.full(h, w)
        w_ = metrics.LossWeights()
        got = metrics.acv_total_loss(maps[0], maps[1], maps[2], maps[3], maps[4], mask, w_)
        expect = (w_.lambda_att * metrics.smooth_l1(maps[0], maps[4], mask)
                  + w_.lambda_0 * metrics.smooth_l1(maps[1], maps[4], mask)
                  + w_.lambda_1 * metrics.smooth_l1(maps[2], maps[4], mask)
                  + w_.lambda_2 * metrics.smooth_l1(maps[3], maps[4], mask))
        assert abs(got - expect) < 1e-9


def check_fast_acv_total_loss(rng, cases):
    for _ in range(cases):
        h, w = int(rng.integers(2, 7)), int(rng.integers(2, 7))
        maps = [volume_core.DisparityMap(rng.random((h, w)) * 10) for _ in range(3)]
        mask = metrics.EvalMask.full(h, w)
        w_ = metrics.LossWeights()
        got = metrics.fast_acv_total_loss(maps[0], maps[1], maps[2], mask, w_)
        expect = (w_.lambda_att_f * metrics.smooth_l1(maps[0], maps[2], mask)
                  + w_.lambda_f * metrics.smooth_l1(maps[1], maps[2], mask))
        assert abs(got - expect) < 1e-9


# ---------------------------------------------------------------------------
# io_formats oracles

def check_pfm_round_trip(rng, cases):
    for _ in range(cases):
        h, w = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        data = (rng.standard_normal((h, w)) * 40).astype(np.float32)
        m = volume_core.DisparityMap(data.astype(np.float64))
        back = io_formats.read_pfm(io_formats.write_pfm(m))
        assert np.array_equal(back.data, data.astype(np.float64))
        assert io_formats.write_pfm(back) == io_formats.write_pfm(m)
    # hand-packed big-endian fixture: positive scale, rows bottom to top
    import struct
    payload = struct.pack(">4f", 3.0, 4.0, 1.0, 2.0)
    parsed = io_formats.read_pfm(b"Pf\n2 2\n1.0\n" + payload)
    assert np.array_equal(parsed.data, np.array([[1.0, 2.0], [3.0, 4.0]]))
    try:
        io_formats.read_pfm(b"PF\n1 1\n-1.0\n" + b"\x00" * 12)
        raise AssertionError("color PFM accepted")
    except io_formats.PfmError as exc:
        assert "color" in str(exc)


def check_kitti_png_round_trip(rng, cases):
    for _ in range(cases):
        h, w = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        raw = rng.integers(0, 60000, size=(h, w)).astype(np.uint16)
        raw[rng.random((h, w)) < 0.2] = 0
        m = volume_core.DisparityMap(raw.astype(np.float64) / 256.0)
        mask = metrics.EvalMask(raw > 0)
        blob = io_formats.write_kitti_disp_png(m, mask)
        back, back_mask = io_formats.read_kitti_disp_png(blob)
        assert np.array_equal(back_mask.valid, raw > 0)
        assert np.array_equal(np.round(back.data * 256).astype(np.uint16), raw)
        assert io_formats.write_kitti_disp_png(back, back_mask) == blob
    img = io_formats.GrayImage(rng.random((4, 5)).astype(np.float32))
    try:
        io_formats.read_kitti_disp_png(io_formats.write_gray_png(img))
        raise AssertionError("8-bit PNG accepted as disparity")
    except io_formats.PngError:
        pass


def check_generate_stereogram(rng, cases):
    for seed in range(cases):
        spec = io_formats.StereogramSpec(12, 40, int(seed % 5), 0.5, seed)
        left, right, gt, mask = io_formats.generate_stereogram(spec)
        left2, right2, _, _ = io_formats.generate_stereogram(spec)
        assert np.array_equal(left.intensities, left2.intensities)
        assert np.array_equal(right.intensities, right2.intensities)
        for y in range(12):
            for x in range(40):
                if mask.valid[y, x]:
                    d = int(gt.data[y, x])
                    assert left.intensities[y, x] == right.intensities[y, x - d]
    # two-region disparity: occlusion band of width (d2 - d1) left of the jump
    h, w, b = 16, 64, 32
    disp = np.full((h, w), 4, dtype=np.int64)
    disp[:, b:] = 12
    left, right, gt, mask = io_formats.generate_stereogram(
        io_formats.StereogramSpec(h, w, disp, 0.5, 1))
    expect_valid = np.ones((h, w), dtype=bool)
    expect_valid[:, :4] = False          # left border of the d=4 region
    expect_valid[:, b - 8:b] = False     # occlusion band, width 12 - 4
    assert np.array_equal(mask.valid, expect_valid)
    for y in range(h):
        for x in range(w):
            if mask.valid[y, x]:
                assert left.intensities[y, x] == right.intensities[y, x - int(gt.data[y, x])]


CHECKS = [
    ("softmax_over_disparity", check_softmax_over_disparity),
    ("soft_argmin", check_soft_argmin),
    ("group_correlation", check_group_correlation),
    ("build_concat_volume", check_build_concat_volume),
    ("upsample_volume_trilinear", check_upsample_volume_trilinear),
    ("unfold_cross", check_unfold_cross),
    ("mapm_level", check_mapm_level),
    ("build_mapm_volume", check_build_mapm_volume),
    ("generate_attention_weights", check_generate_attention_weights),
    ("attention_filter", check_attention_filter),
    ("regress_attention_disparity", check_regress_attention_disparity),
    ("regress_initial_disparity", check_regress_initial_disparity),
    ("sample_cross_disparities", check_sample_cross_disparities),
    ("matching_score", check_matching_score),
    ("estimate_uncertainty", check_estimate_uncertainty),
    ("confidence", check_confidence),
    ("propagation_weights", check_propagation_weights),
    ("cross_propagate", check_cross_propagate),
    ("f2i_topk", check_f2i_topk),
    ("build_compact_concat", check_build_compact_concat),
    ("fast_attention_filter", check_fast_attention_filter),
    ("predict_from_hypotheses", check_predict_from_hypotheses),
    ("census_features", check_census_features),
    ("build_feature_pyramid", check_build_feature_pyramid),
    ("box3d_regularize", check_box3d_regularize),
    ("run_acv_pipeline", check_run_acv_pipeline),
    ("run_fast_acv_pipeline", check_run_fast_acv_pipeline),
    ("epe", check_epe),
    ("d1", check_d1),
    ("bad_x", check_bad_x),
    ("smooth_l1", check_smooth_l1),
    ("acv_total_loss", check_acv_total_loss),
    ("fast_acv_total_loss", check_fast_acv_total_loss),
    ("pfm_round_trip", check_pfm_round_trip),
    ("kitti_png_round_trip", check_kitti_png_round_trip),
    ("generate_stereogram", check_generate_stereogram),
]


def run_selftest(cases: int = 6, seed: int = 0, emit=print) -> int:
    """Run every oracle check; returns 0 when all pass, 1 otherwise."""
    failures = []
    for name, fn in CHECKS:
        rng = np.random.default_rng(seed)
        try:
            fn(rng, cases)
        except Exception as exc:  # noqa: BLE001 - report and continue
            failures.append((name, exc))
            emit(f"FAIL {name}: {exc}")
        else:
            emit(f"ok {name}: {cases} cases")
    emit(f"{len(CHECKS) - len(failures)}/{len(CHECKS)} operations passed")
    if failures:
        emit(f"selftest failed at {failures[0][0]}")
        return 1
    return 0
