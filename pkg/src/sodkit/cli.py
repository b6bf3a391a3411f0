"""Command-line entry point.

Exit codes: 0 success, 1 a check failed, 2 usage or configuration error.
Every command that takes ``--out`` writes ``run-manifest.json`` there with
the fully resolved configuration.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import platform
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, backend
from .errors import ContractError

FUSE_TOL = 1e-9
REGRESS_LR = 1.0  # fixed by the convergence oracle run, see README

BENCH_SCHEMA = {
    "type": "object",
    "required": ["backend", "repetitions", "shapes"],
    "properties": {
        "backend": {"type": "string"},
        "repetitions": {"type": "integer", "minimum": 1},
        "shapes": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["input", "out_channels", "macs_fused", "macs_branchwise",
                             "macs_vanilla", "mac_ratio", "median_s_fused", "median_s_branchwise"],
                "properties": {
                    "input": {"type": "array", "items": {"type": "integer"}, "minItems": 4,
                              "maxItems": 4},
                    "out_channels": {"type": "integer", "minimum": 1},
                    "macs_fused": {"type": "integer"},
                    "macs_branchwise": {"type": "integer"},
                    "macs_vanilla": {"type": "integer"},
                    "mac_ratio": {"type": "number"},
                    "median_s_fused": {"type": "number", "minimum": 0},
                    "median_s_branchwise": {"type": "number", "minimum": 0},
                },
            },
        },
    },
}


class CheckFailed(Exception):
    pass


def parse_config_file(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment. Values are parsed as
    JSON when possible (numbers, booleans), else kept as strings."""
    out = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


def _write_manifest(args, extra=None):
    if not getattr(args, "out", None):
        return
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = {k: v for k, v in vars(args).items() if k not in ("func",)}
    manifest = {
        "command": args.command,
        "config": cfg,
        "version": __version__,
        "backend": backend.name,
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    if extra:
        manifest.update(extra)
    (out / "run-manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))


def _emit(args, report: dict, table: str = None):
    if args.format == "table" and table is not None:
        print(table)
    else:
        print(json.dumps(report, indent=2, sort_keys=True, default=float))


# ---------------------------------------------------------------------------
# commands


def fuse_check(seed: int, trials: int, width: int, spatial: int, tol: float = FUSE_TOL,
               corrupt: bool = False) -> dict:
    from .diffconv import ConvBranchSet, FusedConv, eeconv_forward_fused, eeconv_forward_train, fuse

    if trials < 1 or width < 1 or spatial < 1:
        raise ContractError("trials, width and spatial must be >= 1")
    rng = np.random.default_rng(seed)
    worst = 0.0
    t0 = time.perf_counter()
    for _ in range(trials):
        c_in = int(rng.integers(1, width + 1))
        c_out = int(rng.integers(1, width + 1))
        h = int(rng.integers(1, spatial + 1))
        w = int(rng.integers(1, spatial + 1))
        b = int(rng.integers(1, 3))
        act = ("relu", "sigmoid", "identity")[int(rng.integers(0, 3))]
        branches = ConvBranchSet.random(rng, c_in, c_out, activation=act)
        fused = fuse(branches)
        if corrupt:
            fused = FusedConv(fused.w_final, fused.b_final + 1e-6, fused.activation)
        x = rng.normal(size=(b, c_in, h, w))
        dev = float(np.abs(eeconv_forward_train(x, branches) - eeconv_forward_fused(x, fused)).max())
        worst = max(worst, dev)
    return {"trials": trials, "seed": seed, "width": width, "spatial": spatial,
            "max_deviation": worst, "tolerance": tol, "passed": worst <= tol,
            "seconds": time.perf_counter() - t0}


def cmd_fuse_check(args):
    report = fuse_check(args.seed, args.trials, args.width, args.spatial, args.tol, args.corrupt)
    _write_manifest(args)
    _emit(args, report, f"fuse-check: max deviation {report['max_deviation']:.3e} "
                        f"(tol {report['tolerance']:.0e}) -> {'PASS' if report['passed'] else 'FAIL'}")
    if not report["passed"]:
        raise CheckFailed("fusion deviation above tolerance")


def parse_shape(spec: str) -> tuple:
    """``BxCxHxW:COUT`` -> ((B, C, H, W), COUT)."""
    try:
        dims, cout = spec.split(":")
        shape = tuple(int(v) for v in dims.lower().split("x"))
        if len(shape) != 4:
            raise ValueError
        return shape, int(cout)
    except ValueError:
        raise ContractError(f"bad shape {spec!r}; expected BxCxHxW:COUT") from None


DEFAULT_BENCH_SHAPES = ("1x8x16x16:8", "1x16x32x32:16", "2x8x32x32:16", "1x32x16x16:32")


def bench(shapes, repetitions: int = 20, kernels_name: str = None, seed: int = 0) -> dict:
    from .diffconv import (ConvBranchSet, eeconv_flops, eeconv_forward_branchwise,
                           eeconv_forward_fused, flop_count, fuse)
    from . import tensor

    kern = backend.get(kernels_name) if kernels_name else backend.kernels
    rng = np.random.default_rng(seed)
    rows = []
    original = backend.kernels
    backend.kernels = kern
    try:
        for shape, cout in shapes:
            branches = ConvBranchSet.random(rng, shape[1], cout)
            fused = fuse(branches)
            x = rng.normal(size=shape)

            def timed(fn):
                ts = []
                for _ in range(repetitions):
                    t0 = time.perf_counter()
                    fn(x)
                    ts.append(time.perf_counter() - t0)
                return statistics.median(ts)

            f_macs = eeconv_flops(shape, cout, fused=True)
            b_macs = eeconv_flops(shape, cout, fused=False)
            rows.append({
                "input": list(shape),
                "out_channels": cout,
                "macs_fused": f_macs,
                "macs_branchwise": b_macs,
                "macs_vanilla": flop_count(shape, cout),
                "mac_ratio": b_macs / f_macs,
                "median_s_fused": timed(lambda v: eeconv_forward_fused(v, fused)),
                "median_s_branchwise": timed(lambda v: eeconv_forward_branchwise(v, branches)),
            })
    finally:
        backend.kernels = original
    name = kernels_name or backend.name
    return {"backend": name, "repetitions": repetitions, "shapes": rows}


def cmd_bench(args):
    shapes = [parse_shape(s) for s in (args.shapes or DEFAULT_BENCH_SHAPES)]
    if args.repetitions < 1:
        raise ContractError("repetitions must be >= 1")
    names = backend.available() if args.backend == "both" else [args.backend or backend.name]
    reports = [bench(shapes, args.repetitions, n, args.seed) for n in names]
    _write_manifest(args)
    if args.format == "table":
        for rep in reports:
            print(f"backend: {rep['backend']}")
            print(f"{'input':<16}{'cout':>5}{'MACs fused':>14}{'ratio':>7}{'fused ms':>10}{'4-branch ms':>13}")
            for r in rep["shapes"]:
                print(f"{'x'.join(map(str, r['input'])):<16}{r['out_channels']:>5}{r['macs_fused']:>14}"
                      f"{r['mac_ratio']:>7.1f}{1e3 * r['median_s_fused']:>10.3f}"
                      f"{1e3 * r['median_s_branchwise']:>13.3f}")
    else:
        print(json.dumps(reports[0] if len(reports) == 1 else reports, indent=2))


def cmd_gen(args):
    from .synthgen import SceneSpec, write_dataset

    if args.images < 1:
        raise ContractError("--images must be >= 1")
    spec = SceneSpec(seed=args.seed)
    manifest = write_dataset(args.out, spec, args.images, render=not args.no_render)
    _write_manifest(args, {"dataset": manifest["stats"]})
    _emit(args, manifest["stats"])


def cmd_eval(args):
    from .metrics import EvalConfig, evaluate, format_table, load_detections, load_ground_truth

    cfg = EvalConfig(tuple(args.iou_thr), args.max_det, args.score_cut)
    report = evaluate(load_detections(args.pred), load_ground_truth(args.gt), cfg)
    _write_manifest(args)
    if args.out:
        (Path(args.out) / "eval-report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    _emit(args, report, format_table(report))


def cmd_regress(args):
    from .loss import FocalerConfig, SiouConfig, WiseConfig, random_pairs, regress_demo

    rng = np.random.default_rng(args.seed)
    preds, targets = random_pairs(rng, args.pairs)
    rep = regress_demo(preds, targets, args.steps, args.lr,
                       fcfg=FocalerConfig(args.d, args.u),
                       scfg=SiouConfig(args.theta, symmetric_shape_exponent=args.symmetric_shape),
                       wcfg=WiseConfig(args.alpha, args.delta, modulation=args.modulation))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "mean_loss", "mean_iou", "ema_mean", "mean_gamma"])
    for row in rep.rows():
        writer.writerow([row[0]] + [f"{v:.10g}" for v in row[1:]])
    summary = {
        "pairs": args.pairs, "steps": rep.steps_run, "lr": args.lr,
        "initial_mean_iou": rep.mean_iou[0], "final_mean_iou": rep.mean_iou[-1],
        "initial_mean_loss": rep.mean_loss[0], "final_mean_loss": rep.mean_loss[-1],
        "diverged": rep.diverged,
    }
    _write_manifest(args, {"summary": summary})
    if args.out:
        (Path(args.out) / "regress.csv").write_text(buf.getvalue())
        (Path(args.out) / "regress-summary.json").write_text(json.dumps(summary, indent=2))
    else:
        sys.stdout.write(buf.getvalue())
    print(json.dumps(summary, indent=2))


def cmd_gamma_curve(args):
    from .loss import WiseConfig, wise_gamma

    cfg = WiseConfig(args.alpha, args.delta)
    betas = np.linspace(0.0, args.beta_max, args.samples)
    gammas = wise_gamma(betas, cfg)
    lines = ["beta,gamma"] + [f"{b:.6g},{g:.10g}" for b, g in zip(betas, gammas)]
    text = "\n".join(lines) + "\n"
    _write_manifest(args)
    if args.out:
        (Path(args.out) / "gamma-curve.csv").write_text(text)
    else:
        sys.stdout.write(text)


def cmd_featmap(args):
    from .pipeline import BlockStack, dump_taps
    from .pnm import read_pnm
    from .synthgen import SceneSpec, generate_scene, resize_bilinear

    if not args.out:
        raise ContractError("featmap needs --out")
    if args.input:
        arr = read_pnm(args.input).astype(np.float64) / 255.0
        img = arr.transpose(2, 0, 1)[None] if arr.ndim == 3 else np.repeat(arr[None, None], 3, 1)
    else:
        img, _ = generate_scene(SceneSpec(seed=args.seed), args.image_id)
    size = args.size
    if img.shape[-2:] != (size, size):
        img = resize_bilinear(img, size, size)
    taps = {}
    BlockStack.random(args.seed, k=args.k).forward(img, taps)
    out = Path(args.out)
    paths = dump_taps(taps, out)
    _write_manifest(args)
    _emit(args, {"written": [str(p) for p in paths],
                 "shapes": {k: list(v.shape) for k, v in taps.items()}})


def cmd_pipeline(args):
    from .pipeline import run_pipeline

    if args.images < 1:
        raise ContractError("--images must be >= 1")
    res = run_pipeline(args.seed, args.images, args.jitter, args.score_noise, args.out,
                       args.feature_size, args.k)
    _write_manifest(args, {"result": {k: v for k, v in res.items() if k != "eval"}})
    if args.out:
        (Path(args.out) / "pipeline-report.json").write_text(json.dumps(res, indent=2, default=float))
    _emit(args, {k: v for k, v in res.items() if k != "eval"})


# ---------------------------------------------------------------------------
# parser


def _floats(s: str) -> list:
    try:
        return [float(v) for v in s.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {s!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="RNG seed (default: 0)")
    common.add_argument("--out", default=None, help="output directory; receives run-manifest.json")
    common.add_argument("--format", choices=("json", "table"), default="json",
                        help="report format (default: json)")
    common.add_argument("--config", default=None,
                        help="flat key = value config file; explicit flags win")

    p = argparse.ArgumentParser(prog="sodkit", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen", parents=[common], help="generate a synthetic scene dataset")
    s.add_argument("--images", type=int, default=10, help="number of images (default: 10)")
    s.add_argument("--no-render", action="store_true", help="write annotations only")
    s.set_defaults(func=cmd_gen)

    s = sub.add_parser("eval", parents=[common], help="COCO-style evaluation of JSON-lines boxes")
    s.add_argument("--gt", required=True, help="ground-truth JSON-lines file")
    s.add_argument("--pred", required=True, help="prediction JSON-lines file (with scores)")
    s.add_argument("--iou-thr", type=_floats, default=[round(0.5 + 0.05 * i, 2) for i in range(10)],
                   help="IoU thresholds, comma separated (default: 0.5:0.05:0.95)")
    s.add_argument("--max-det", type=int, default=300, help="max detections per image (default: 300)")
    s.add_argument("--score-cut", type=float, default=0.5,
                   help="score threshold for headline P/R (default: 0.5)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("fuse-check", parents=[common], help="verify EEConv fusion equivalence")
    s.add_argument("--trials", type=int, default=200, help="random trials (default: 200)")
    s.add_argument("--width", type=int, default=16, help="max channel count (default: 16)")
    s.add_argument("--spatial", type=int, default=32, help="max spatial size (default: 32)")
    s.add_argument("--tol", type=float, default=FUSE_TOL, help="pass tolerance (default: 1e-9)")
    s.add_argument("--corrupt", action="store_true", help="test mode: perturb the fused bias")
    s.set_defaults(func=cmd_fuse_check)

    s = sub.add_parser("bench", parents=[common], help="MAC counts and timing, fused vs 4-branch")
    s.add_argument("--shapes", nargs="*", default=None,
                   help=f"shapes as BxCxHxW:COUT (default: {' '.join(DEFAULT_BENCH_SHAPES)})")
    s.add_argument("--repetitions", type=int, default=20, help="timing repetitions (default: 20)")
    s.add_argument("--backend", choices=("compiled", "python", "both"), default=None,
                   help="kernel backend (default: the one selected at import)")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("regress", parents=[common], help="gradient-descent box regression demo")
    s.add_argument("--pairs", type=int, default=100, help="box pairs (default: 100)")
    s.add_argument("--steps", type=int, default=2000, help="descent steps (default: 2000)")
    s.add_argument("--lr", type=float, default=REGRESS_LR, help=f"learning rate (default: {REGRESS_LR})")
    s.add_argument("--alpha", type=float, default=1.9, help="modulation alpha (default: 1.9)")
    s.add_argument("--delta", type=float, default=3.0, help="modulation delta (default: 3.0)")
    s.add_argument("--d", type=float, default=0.0, help="focaler lower bound (default: 0)")
    s.add_argument("--u", type=float, default=0.95, help="focaler upper bound (default: 0.95)")
    s.add_argument("--theta", type=float, default=4.0, help="shape exponent (default: 4)")
    s.add_argument("--symmetric-shape", action="store_true",
                   help="raise both shape terms to theta")
    s.add_argument("--modulation", choices=("gamma", "literal"), default="gamma",
                   help="gamma(beta) or the beta**(1+delta) product (default: gamma)")
    s.set_defaults(func=cmd_regress)

    s = sub.add_parser("gamma-curve", parents=[common], help="emit (beta, gamma) samples as CSV")
    s.add_argument("--alpha", type=float, default=1.9, help="(default: 1.9)")
    s.add_argument("--delta", type=float, default=3.0, help="(default: 3.0)")
    s.add_argument("--beta-max", type=float, default=10.0, help="(default: 10)")
    s.add_argument("--samples", type=int, default=1001, help="(default: 1001)")
    s.set_defaults(func=cmd_gamma_curve)

    s = sub.add_parser("featmap", parents=[common], help="dump block-stack tap points as PGM")
    s.add_argument("--input", default=None, help="PPM/PGM image (default: a generated scene)")
    s.add_argument("--image-id", type=int, default=0, help="generated scene id (default: 0)")
    s.add_argument("--size", type=int, default=160, help="resize input to SIZE x SIZE (default: 160)")
    s.add_argument("--k", type=int, default=31, help="large-kernel size (default: 31)")
    s.set_defaults(func=cmd_featmap)

    s = sub.add_parser("pipeline", parents=[common], help="gen -> blocks -> featmap -> eval smoke run")
    s.add_argument("--images", type=int, default=2, help="generated images (default: 2)")
    s.add_argument("--jitter", type=float, default=0.0, help="oracle box jitter (default: 0)")
    s.add_argument("--score-noise", type=float, default=0.05, help="oracle score noise (default: 0.05)")
    s.add_argument("--feature-size", type=int, default=640,
                   help="resolution fed to the block stack (default: 640)")
    s.add_argument("--k", type=int, default=31, help="large-kernel size (default: 31)")
    s.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.config:
            cfg = parse_config_file(args.config)
            sub = parser._subparsers._group_actions[0].choices[args.command]
            known = {a.dest for a in sub._actions}
            unknown = set(cfg) - known
            if unknown:
                raise ContractError(f"unknown config keys for {args.command}: {sorted(unknown)}")
            sub.set_defaults(**cfg)
            args = parser.parse_args(argv)
        args.func(args)
    except SystemExit as e:
        return int(e.code or 0)
    except CheckFailed as e:
        print(f"check failed: {e}", file=sys.stderr)
        return 1
    except (ContractError, FileNotFoundError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
