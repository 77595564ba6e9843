"""Command-line front end: match, eval, bench and selftest subcommands.

Exit codes: 0 success, 1 test or metric failure, 2 usage or input error.
Options may come from a flat key=value config file (--config); explicit
flags always win.  STEREO_COSTVOL_THREADS provides the thread cap when
--threads is not given.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from statistics import median

from . import io_formats, metrics, selftest
from .fast_acv import VapConfig
from .pipeline import (
    PipelineConfig,
    RunReport,
    expected_volume_elements,
    run_pipeline,
)

_CONFIG_KEYS = {
    "mode": str,
    "dmax": int,
    "k": int,
    "alpha": float,
    "beta": float,
    "radius": int,
    "regularizer": str,
    "box-radius": int,
    "format": str,
    "threads": int,
    "temperature": float,
    "seed": int,
    "backend": str,
}


def _fail(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return 2


def read_config_file(path: str) -> dict:
    """Parse a flat key=value config file; '#' starts a comment."""
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, val = (part.strip() for part in line.split("=", 1))
            key = key.replace("_", "-")
            if key not in _CONFIG_KEYS:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            try:
                values[key] = _CONFIG_KEYS[key](val)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: bad value for {key}: {val!r}") from exc
    return values


def _env_threads() -> int | None:
    raw = os.environ.get("STEREO_COSTVOL_THREADS")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        return None


def _resolve(args, file_cfg, key, default):
    flag = getattr(args, key.replace("-", "_"), None)
    if flag is not None:
        return flag
    if key in file_cfg:
        return file_cfg[key]
    return default


def _build_pipeline_config(args, file_cfg) -> PipelineConfig:
    mode = _resolve(args, file_cfg, "mode", "fast_acv")
    d_max = _resolve(args, file_cfg, "dmax", 64)
    k = _resolve(args, file_cfg, "k", None)
    if k is None:
        k = min(24, max(1, d_max // 4))
    threads = _resolve(args, file_cfg, "threads", None)
    if threads is None:
        threads = _env_threads() or 1
    vap = VapConfig(
        radius=_resolve(args, file_cfg, "radius", 1),
        alpha=_resolve(args, file_cfg, "alpha", 1.0),
        beta=_resolve(args, file_cfg, "beta", -1.0),
    )
    return PipelineConfig(
        mode=mode,
        d_max=d_max,
        vap=vap,
        k=k,
        feature_backend=_resolve(args, file_cfg, "backend", "census"),
        regularizer=_resolve(args, file_cfg, "regularizer", "identity"),
        box_radius=_resolve(args, file_cfg, "box-radius", 1),
        temperature=_resolve(args, file_cfg, "temperature", 64.0),
        threads=threads,
    )


def _load_disparity(path: str):
    """Read a PFM or KITTI PNG disparity file to (map, mask)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:2] in (b"Pf", b"PF"):
        disp = io_formats.read_pfm(blob)
        return disp, metrics.EvalMask.full(disp.height, disp.width)
    return io_formats.read_kitti_disp_png(blob)


# ---------------------------------------------------------------------------
# match

def cmd_match(args) -> int:
    try:
        file_cfg = read_config_file(args.config) if args.config else {}
    except (OSError, ValueError) as exc:
        return _fail(str(exc))
    try:
        with open(args.left, "rb") as fh:
            left = io_formats.read_gray_image(fh.read())
        with open(args.right, "rb") as fh:
            right = io_formats.read_gray_image(fh.read())
    except (OSError, io_formats.FormatError) as exc:
        return _fail(str(exc))
    if left.intensities.shape != right.intensities.shape:
        return _fail("image size mismatch")
    try:
        cfg = _build_pipeline_config(args, file_cfg)
        report = RunReport()
        disp = run_pipeline(left, right, cfg, report)
    except ValueError as exc:
        return _fail(str(exc))

    out_format = _resolve(args, file_cfg, "format", "pfm")
    if out_format not in ("pfm", "kitti"):
        return _fail(f"unknown output format {out_format!r}")
    out_path = args.output or ("disparity.pfm" if out_format == "pfm" else "disparity.png")
    try:
        if out_format == "pfm":
            blob = io_formats.write_pfm(disp)
        else:
            blob = io_formats.write_kitti_disp_png(
                disp, metrics.EvalMask.full(disp.height, disp.width))
        with open(out_path, "wb") as fh:
            fh.write(blob)
    except (OSError, ValueError) as exc:
        return _fail(str(exc))

    if args.json:
        print(json.dumps({"output": out_path, "format": out_format,
                          "report": report.to_dict()}, indent=2))
    else:
        print(f"wrote {out_path}")
        for line in report.lines():
            print(line)
    return 0


# ---------------------------------------------------------------------------
# eval

def cmd_eval(args) -> int:
    try:
        pred, _ = _load_disparity(args.pred)
        gt, gt_mask = _load_disparity(args.gt)
    except (OSError, io_formats.FormatError) as exc:
        return _fail(str(exc))
    if pred.data.shape != gt.data.shape:
        return _fail("prediction/ground-truth size mismatch")
    mask = gt_mask
    if args.mask:
        try:
            with open(args.mask, "rb") as fh:
                extra = io_formats.read_gray_image(fh.read())
        except (OSError, io_formats.FormatError) as exc:
            return _fail(str(exc))
        if extra.intensities.shape != gt.data.shape:
            return _fail("mask size mismatch")
        mask = mask.intersect(metrics.EvalMask(extra.intensities > 0))
    if mask.count == 0:
        return _fail("no valid pixels to evaluate")

    results = {
        "epe": metrics.epe(pred, gt, mask),
        "d1": metrics.d1(pred, gt, mask),
        "bad_1": metrics.bad_x(pred, gt, mask, 1.0),
        "bad_2": metrics.bad_x(pred, gt, mask, 2.0),
        "bad_3": metrics.bad_x(pred, gt, mask, 3.0),
    }
    if args.json:
        print(json.dumps({k: round(v, 2) for k, v in results.items()}, indent=2))
    else:
        print(f"EPE:   {results['epe']:.2f}")
        print(f"D1:    {results['d1']:.2f}")
        print(f"bad-1: {results['bad_1']:.2f}")
        print(f"bad-2: {results['bad_2']:.2f}")
        print(f"bad-3: {results['bad_3']:.2f}")
    return 0


# ---------------------------------------------------------------------------
# bench

def _parse_sizes(raw):
    sizes = []
    for token in raw.split(","):
        w, _, h = token.strip().partition("x")
        sizes.append((int(h), int(w)))
    return sizes


def _bench_case(mode, height, width, d_max, k, threads, runs, seed, temperature):
    disparity = min(8, max(1, width // 4 - 1))
    spec = io_formats.StereogramSpec(height, width, disparity, 0.5, seed)
    left, right, _, _ = io_formats.generate_stereogram(spec)
    cfg = PipelineConfig(mode=mode, d_max=d_max, k=k, temperature=temperature,
                         threads=threads)
    reports = []
    for _ in range(runs + 1):  # first run is warmup
        rep = RunReport()
        run_pipeline(left, right, cfg, rep)
        reports.append(rep)
    timed = reports[1:]
    stage_ms = {stage: median(r.stage_ms[stage] for r in timed)
                for stage in timed[0].stage_ms}
    counts = timed[0].volume_elements
    for rep in timed:
        if rep.volume_elements != counts:
            raise AssertionError("volume element counts varied between runs")
    analytic = expected_volume_elements(cfg, height, width)
    return {
        "mode": mode, "height": height, "width": width, "d_max": d_max,
        "k": k if mode == "fast_acv" else None, "threads": threads,
        "stage_ms": stage_ms,
        "construction_plus_aggregation_ms":
            stage_ms["volume_construction"] + stage_ms["aggregation"],
        "volume_elements": counts,
        "analytic_elements": analytic,
        "counts_match_analytic": counts == analytic,
        "peak_volume_elements": timed[0].peak_volume_elements,
    }


def cmd_bench(args) -> int:
    try:
        modes = [m.strip() for m in args.modes.split(",")]
        sizes = _parse_sizes(args.sizes)
        ks = [int(t) for t in args.k_sweep.split(",")]
    except ValueError as exc:
        return _fail(f"bad sweep specification: {exc}")
    for m in modes:
        if m not in ("acv", "fast_acv"):
            return _fail(f"unknown mode {m!r}")

    rows = []
    try:
        for height, width in sizes:
            for mode in modes:
                k_values = ks if mode == "fast_acv" else [ks[0]]
                for k in k_values:
                    rows.append(_bench_case(mode, height, width, args.dmax, k,
                                            args.threads, args.runs, args.seed,
                                            args.temperature))
                    if mode != "fast_acv":
                        break
    except (ValueError, AssertionError) as exc:
        return _fail(str(exc))

    ratios = []
    trends = []
    for height, width in sizes:
        acv_rows = [r for r in rows if r["mode"] == "acv"
                    and (r["height"], r["width"]) == (height, width)]
        fast_rows = [r for r in rows if r["mode"] == "fast_acv"
                     and (r["height"], r["width"]) == (height, width)]
        if not acv_rows:
            continue
        acv_row = acv_rows[0]
        for row in fast_rows:
            corr_analytic = (row["analytic_elements"]["correlation"]
                             / acv_row["analytic_elements"]["correlation"])
            corr_measured = (row["volume_elements"]["correlation"]
                             / acv_row["volume_elements"]["correlation"])
            compact_analytic = (row["analytic_elements"]["compact_concat"]
                                / acv_row["analytic_elements"]["concat"])
            compact_measured = (row["volume_elements"]["compact_concat"]
                                / acv_row["volume_elements"]["concat"])
            ratios.append({
                "height": height, "width": width, "d_max": args.dmax, "k": row["k"],
                "correlation_ratio_analytic": corr_analytic,
                "correlation_ratio_measured": corr_measured,
                "correlation_ratio_match": corr_analytic == corr_measured,
                "compact_ratio_analytic": compact_analytic,
                "compact_ratio_measured": compact_measured,
                "compact_ratio_match": compact_analytic == compact_measured,
            })
            trends.append({
                "height": height, "width": width, "k": row["k"],
                "threads": args.threads,
                "fast_ms": row["construction_plus_aggregation_ms"],
                "acv_ms": acv_row["construction_plus_aggregation_ms"],
                "fast_below_acv":
                    row["construction_plus_aggregation_ms"]
                    < acv_row["construction_plus_aggregation_ms"],
            })

    if args.json:
        print(json.dumps({"rows": rows, "ratios": ratios, "trends": trends}, indent=2))
        return 0

    header = (f"{'mode':9s} {'size':9s} {'D':>4s} {'K':>4s} {'thr':>3s} "
              f"{'feat_ms':>9s} {'constr_ms':>10s} {'agg_ms':>8s} {'pred_ms':>8s} "
              f"{'corr_elems':>12s} {'peak_elems':>12s}")
    print(header)
    for r in rows:
        print(f"{r['mode']:9s} {r['width']}x{r['height']:<4d} {r['d_max']:4d} "
              f"{str(r['k'] or '-'):>4s} {r['threads']:3d} "
              f"{r['stage_ms']['feature_extraction']:9.1f} "
              f"{r['stage_ms']['volume_construction']:10.1f} "
              f"{r['stage_ms']['aggregation']:8.1f} "
              f"{r['stage_ms']['prediction']:8.1f} "
              f"{r['volume_elements']['correlation']:12d} "
              f"{r['peak_volume_elements']:12d}")
        if not r["counts_match_analytic"]:
            print("  WARNING: measured element counts deviate from analytic formulas")
    for rt in ratios:
        print(f"ratio {rt['width']}x{rt['height']} D={rt['d_max']} K={rt['k']}: "
              f"correlation analytic={rt['correlation_ratio_analytic']:.6f} "
              f"measured={rt['correlation_ratio_measured']:.6f} "
              f"match={'yes' if rt['correlation_ratio_match'] else 'NO'}; "
              f"compact analytic={rt['compact_ratio_analytic']:.6f} "
              f"measured={rt['compact_ratio_measured']:.6f} "
              f"match={'yes' if rt['compact_ratio_match'] else 'NO'}")
    for tr in trends:
        print(f"trend {tr['width']}x{tr['height']} K={tr['k']} threads={tr['threads']}: "
              f"fast constr+agg {tr['fast_ms']:.1f} ms vs acv {tr['acv_ms']:.1f} ms -> "
              f"{'fast wins' if tr['fast_below_acv'] else 'ACV WINS (unexpected)'}")
    return 0


# ---------------------------------------------------------------------------
# selftest

def cmd_selftest(args) -> int:
    return selftest.run_selftest(cases=args.cases, seed=args.seed or 0)


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stereo-costvol",
        description="Attention-filtered cost volume stereo matcher and benchmark harness")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_pipeline_flags(p):
        p.add_argument("--mode", choices=("acv", "fast_acv"))
        p.add_argument("--dmax", type=int)
        p.add_argument("--k", type=int)
        p.add_argument("--alpha", type=float)
        p.add_argument("--beta", type=float)
        p.add_argument("--radius", type=int, help="cross sampling radius")
        p.add_argument("--regularizer", choices=("identity", "box3d"))
        p.add_argument("--box-radius", type=int, dest="box_radius")
        p.add_argument("--temperature", type=float,
                       help="cost-to-probability sharpness factor")
        p.add_argument("--threads", type=int)
        p.add_argument("--backend", choices=("census", "gradient"))
        p.add_argument("--seed", type=int)
        p.add_argument("--config", help="flat key=value config file")

    p_match = sub.add_parser("match", help="compute a disparity map for a stereo pair")
    p_match.add_argument("left")
    p_match.add_argument("right")
    add_pipeline_flags(p_match)
    p_match.add_argument("--format", choices=("pfm", "kitti"))
    p_match.add_argument("-o", "--output")
    p_match.add_argument("--json", action="store_true")
    p_match.set_defaults(func=cmd_match)

    p_eval = sub.add_parser("eval", help="score a disparity map against ground truth")
    p_eval.add_argument("pred")
    p_eval.add_argument("gt")
    p_eval.add_argument("--mask", help="extra validity mask image (nonzero = valid)")
    p_eval.add_argument("--json", action="store_true")
    p_eval.set_defaults(func=cmd_eval)

    p_bench = sub.add_parser("bench", help="time volume construction across configurations")
    p_bench.add_argument("--modes", default="acv,fast_acv")
    p_bench.add_argument("--sizes", default="320x192",
                         help="comma-separated WxH image sizes")
    p_bench.add_argument("--dmax", type=int, default=192)
    p_bench.add_argument("--k-sweep", default="16,24,32,48", dest="k_sweep")
    p_bench.add_argument("--runs", type=int, default=5,
                         help="timed runs per case (after one warmup)")
    p_bench.add_argument("--threads", type=int, default=None)
    p_bench.add_argument("--temperature", type=float, default=64.0)
    p_bench.add_argument("--seed", type=int, default=0)
    p_bench.add_argument("--json", action="store_true")
    p_bench.set_defaults(func=cmd_bench)

    p_self = sub.add_parser("selftest", help="run the embedded oracle suite")
    p_self.add_argument("--cases", type=int, default=6)
    p_self.add_argument("--seed", type=int, default=0)
    p_self.set_defaults(func=cmd_selftest)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "threads", None) is None and hasattr(args, "threads"):
        env = _env_threads()
        if env is not None and args.command == "bench":
            args.threads = env
    if args.command == "bench" and args.threads is None:
        args.threads = 1
    if args.command == "bench" and args.k_sweep:
        for token in args.k_sweep.split(","):
            if not token.strip().isdigit():
                return _fail(f"bad K value {token.strip()!r}")
        for k in (int(t) for t in args.k_sweep.split(",")):
            if not 1 <= k <= args.dmax // 4:
                return _fail(f"K={k} outside [1, dmax/4]")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
