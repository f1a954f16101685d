"""Command-line entry point: ``mpgd <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text):
    return [int(v) for v in text.split(",") if v.strip()]


def _float_list(text):
    return [float(v) for v in text.split(",") if v.strip()]


def _add_seed(p):
    p.add_argument("--seed", type=int, default=0, help="master random seed (default: 0)")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="mpgd", description=__doc__.splitlines()[0], formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("degrade", help="degrade a directory of PNGs", formatter_class=fmt)
    p.add_argument("--input", required=True, help="directory of 8-bit PNG images")
    p.add_argument("--task", required=True, choices=["sr4x", "deblur"])
    p.add_argument("--sigma", type=float, default=0.05, help="additive noise std on the [0,1] scale")
    p.add_argument("--side", type=int, default=64, help="working resolution (square)")
    p.add_argument("--blur-size", type=int, default=61, help="Gaussian kernel length (deblur)")
    p.add_argument("--blur-sigma", type=float, default=3.0, help="Gaussian kernel std in pixels (deblur)")
    p.add_argument("--jobs", type=int, default=1, help="parallel workers")
    p.add_argument("--out", required=True, help="output directory for gt/, deg/ and meta.json")
    _add_seed(p)

    p = sub.add_parser("restore", help="restore one measurement", formatter_class=fmt)
    p.add_argument("--measurement", required=True, help="measurement as .npy (raw) or .png")
    p.add_argument("--task", required=True, choices=["sr4x", "deblur"])
    p.add_argument("--m", type=int, default=15, help="inner gradient steps per timestep")
    p.add_argument("--scale", type=float, default=7.5, help="guidance scale")
    p.add_argument("--ddim-steps", type=int, default=20, help="number of DDIM timesteps")
    p.add_argument("--step-mode", choices=["budget", "raw"], default="budget")
    p.add_argument("--projector", default="identity", help="'identity' or a projector file")
    p.add_argument("--denoiser", choices=["gaussian", "gmm"], default="gaussian")
    p.add_argument("--prior-dir", default=None, help="fit the prior to the PNGs in this directory")
    p.add_argument("--prior-mean", type=float, default=0.5, help="constant prior mean (no --prior-dir)")
    p.add_argument("--prior-var", type=float, default=0.05, help="prior variance (no --prior-dir)")
    p.add_argument("--blur-size", type=int, default=61)
    p.add_argument("--blur-sigma", type=float, default=3.0)
    p.add_argument("--out", required=True, help="output PNG")
    _add_seed(p)

    p = sub.add_parser("metrics", help="PSNR/SSIM between two PNGs", formatter_class=fmt)
    p.add_argument("--reference", required=True)
    p.add_argument("--test", required=True)

    p = sub.add_parser("sweep", help="run the benchmark grid", formatter_class=fmt)
    p.add_argument("--config", default=None, help="YAML/JSON file with SweepConfig fields")
    p.add_argument("--input", dest="dataset_dir", default=None, help="dataset directory")
    p.add_argument("--task", default=None, help="sr4x, deblur or both")
    p.add_argument("--inner-steps", type=_int_list, default=None, help="e.g. 1,3,7,15,20")
    p.add_argument("--ddim-steps", type=_int_list, default=None, help="e.g. 20,50,100")
    p.add_argument("--scales", type=_float_list, default=None, help="e.g. 4,7.5,17.5")
    p.add_argument("--side", dest="working_side", type=int, default=None, help="working resolution (64)")
    p.add_argument("--sigma", type=float, default=None, help="noise std (0.05)")
    p.add_argument("--denoiser", default=None, help="gaussian, gmm or projector-augmented")
    p.add_argument("--step-mode", default=None, choices=["budget", "raw"])
    p.add_argument("--warmup-runs", type=int, default=None, help="untimed warmups per cell (2)")
    p.add_argument("--jobs", type=int, default=None, help="parallel image workers (1)")
    p.add_argument("--self-test", action="store_true", help="check residual(m=15) <= residual(m=1)")
    p.add_argument("--replay", default=None, help="manifest.json to replay a single cell from")
    p.add_argument("--cell", default=None, help="task,m,ddim_steps,scale for --replay")
    p.add_argument("--out", default=None, help="output directory (required unless --replay)")
    p.add_argument("--seed", type=int, default=None, help="master random seed (0)")

    p = sub.add_parser("projector-train", help="fit a PCA projector", formatter_class=fmt)
    p.add_argument("--input", required=True, help="directory of PNG images")
    p.add_argument("--k", type=int, required=True, help="number of principal components")
    p.add_argument("--side", type=int, default=64, help="working resolution")
    p.add_argument("--out", required=True, help="projector file")

    p = sub.add_parser("adjoint-check", help="verify <Ax,y> = <x,A^T y>", formatter_class=fmt)
    p.add_argument("--task", choices=["sr4x", "deblur", "both"], default="both")
    p.add_argument("--side", type=int, default=16)
    p.add_argument("--pairs", type=int, default=100)
    p.add_argument("--blur-size", type=int, default=61)
    p.add_argument("--blur-sigma", type=float, default=3.0)
    _add_seed(p)

    p = sub.add_parser("selftest", help="run the embedded verification suite", formatter_class=fmt)
    p.add_argument("--corrupt-adjoint", action="store_true", help=argparse.SUPPRESS)
    return parser


# -- subcommands --------------------------------------------------------------


def cmd_degrade(args) -> int:
    from .harness import degrade_dataset
    from .operators import NoiseSpec

    if not Path(args.input).is_dir():
        raise UsageError(f"--input {args.input} is not a directory")
    out = degrade_dataset(args.input, args.task, NoiseSpec(args.sigma, args.seed), args.side,
                          args.out, args.blur_size, args.blur_sigma, jobs=args.jobs)
    meta = json.loads((out / "meta.json").read_text())
    for entry in meta["files"]:
        print(f"{entry['name']}: gt {tuple(entry['gt_shape'])} -> deg {tuple(entry['deg_shape'])} "
              f"seed {entry['seed']}")
    for entry in meta["skipped"]:
        print(f"skipped {entry['file']}: {entry['error']}")
    return EXIT_OK


def _load_measurement(path: Path):
    from .imagecore import as_image, load_image

    if path.suffix.lower() == ".npy":
        return as_image(np.load(path))
    return load_image(path)


def cmd_restore(args) -> int:
    from .diffusion import GaussianAnalyticDenoiser, GmmAnalyticDenoiser, make_schedule
    from .guidance import GuidanceConfig, IdentityProjector, load_projector, restore
    from .harness import build_denoiser
    from .imagecore import center_crop_resize, load_image, save_image
    from .operators import build_operator

    y = _load_measurement(Path(args.measurement))
    h, w, c = y.shape
    shape = (4 * h, 4 * w, c) if args.task == "sr4x" else (h, w, c)
    op = build_operator(args.task, shape, args.blur_size, args.blur_sigma)
    schedule = make_schedule()
    if args.prior_dir:
        files = sorted(Path(args.prior_dir).glob("*.png"))
        if not files:
            raise UsageError(f"--prior-dir {args.prior_dir} has no PNG files")
        imgs = []
        for f in files:
            im = center_crop_resize(load_image(f), shape[0])
            if im.shape[2] != c:
                im = np.repeat(im.mean(axis=2, keepdims=True), c, axis=2)
            imgs.append(im)
        denoiser, _ = build_denoiser({"kind": args.denoiser}, imgs, schedule, seed=args.seed)
    elif args.denoiser == "gaussian":
        denoiser = GaussianAnalyticDenoiser(np.full(shape, args.prior_mean), args.prior_var, schedule)
    else:
        spread = np.sqrt(args.prior_var)
        comps = [(0.5, np.full(shape, args.prior_mean - spread), args.prior_var / 2),
                 (0.5, np.full(shape, args.prior_mean + spread), args.prior_var / 2)]
        denoiser = GmmAnalyticDenoiser(comps, schedule)
    projector = IdentityProjector() if args.projector == "identity" else load_projector(args.projector)
    cfg = GuidanceConfig(args.m, args.scale, args.step_mode, projector)
    start = time.perf_counter()
    with np.errstate(over="ignore", invalid="ignore"):
        x = restore(y, op, denoiser, schedule, args.ddim_steps, cfg, args.seed)
    elapsed = (time.perf_counter() - start) * 1e3
    save_image(x, args.out)
    residual = float(np.linalg.norm(y - op.apply(x)))
    print(f"residual ||y - A x|| = {residual:.6g}")
    print(f"elapsed {elapsed:.1f} ms")
    return EXIT_OK


def cmd_metrics(args) -> int:
    from .imagecore import load_image
    from .metrics import evaluate

    report = evaluate(load_image(args.test), load_image(args.reference))
    print(json.dumps(report.as_dict()))
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .harness import SweepConfig, load_config, replay_cell, run_sweep

    if args.replay:
        if not args.cell:
            raise UsageError("--replay needs --cell task,m,ddim_steps,scale")
        try:
            task, m, ddim, scale = args.cell.split(",")
            row = replay_cell(args.replay, task, int(m), int(ddim), float(scale))
        except ValueError as exc:
            raise UsageError(f"bad --cell {args.cell!r}: {exc}") from exc
        _print_rows([row])
        return EXIT_OK
    if not args.out:
        raise UsageError("--out is required")
    data = {}
    if args.config:
        data = {k: v for k, v in vars(load_config(args.config)).items()}
    overrides = {
        "dataset_dir": args.dataset_dir, "task": args.task, "inner_steps_list": args.inner_steps,
        "ddim_steps_list": args.ddim_steps, "scales_list": args.scales,
        "working_side": args.working_side, "sigma": args.sigma, "step_mode": args.step_mode,
        "warmup_runs": args.warmup_runs, "jobs": args.jobs, "seed": args.seed,
    }
    data.update({k: v for k, v in overrides.items() if v is not None})
    if args.denoiser:
        data["denoiser_spec"] = {**data.get("denoiser_spec", {}), "kind": args.denoiser}
    if args.self_test:
        data["self_test"] = True
    if "dataset_dir" not in data:
        raise UsageError("a dataset directory is required (--input or config dataset_dir)")
    try:
        cfg = SweepConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    rows = run_sweep(cfg, args.out)
    _print_rows(rows)
    print(f"wrote {len(rows)} rows to {Path(args.out) / 'results.csv'}")
    if cfg.self_test:
        manifest = json.loads((Path(args.out) / "manifest.json").read_text())
        if not manifest["self_test"]["passed"]:
            for p in manifest["self_test"]["problems"]:
                print(f"self-test FAIL: {p}")
            return EXIT_RUNTIME
        print("self-test PASS")
    return EXIT_OK


def _print_rows(rows):
    for r in rows:
        psnr = "inf" if np.isinf(r.psnr_mean) else f"{r.psnr_mean:.3f}"
        print(f"{r.task} m={r.m} ddim={r.ddim_steps} scale={r.scale:g} n={r.n_images} "
              f"ssim={r.ssim_mean:.4f} psnr={psnr} time={r.time_ms:.1f}ms")


def cmd_projector_train(args) -> int:
    from .guidance import save_projector, train_pca_projector
    from .imagecore import center_crop_resize, load_image

    files = sorted(Path(args.input).glob("*.png"))
    if len(files) < 2:
        raise UsageError(f"need at least 2 PNG files in {args.input}")
    imgs = [center_crop_resize(load_image(f), args.side) for f in files]
    try:
        proj = train_pca_projector(imgs, args.k)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    save_projector(proj, args.out)
    print(f"projector k={proj.k} d={proj.d} written to {args.out}")
    return EXIT_OK


def cmd_adjoint_check(args) -> int:
    from .operators import build_operator

    tasks = ["sr4x", "deblur"] if args.task == "both" else [args.task]
    rng = np.random.default_rng(args.seed)
    ok = True
    for task in tasks:
        op = build_operator(task, (args.side, args.side, 1), args.blur_size, args.blur_sigma)
        worst = 0.0
        for _ in range(args.pairs):
            x = rng.standard_normal(op.input_shape)
            y = rng.standard_normal(op.output_shape)
            ax = op.apply(x)
            err = abs(np.vdot(ax, y) - np.vdot(x, op.adjoint(y))) / (np.linalg.norm(ax) * np.linalg.norm(y))
            worst = max(worst, err)
        passed = worst < 1e-10
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} adjoint {task}: max rel. error {worst:.3e}")
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    start = time.perf_counter()
    results = run_selftest(corrupt_adjoint=args.corrupt_adjoint)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail} ({r.seconds:.2f}s)")
    n_ok = sum(r.passed for r in results)
    print(f"{n_ok}/{len(results)} checks passed in {time.perf_counter() - start:.1f}s")
    return EXIT_OK if n_ok == len(results) else EXIT_RUNTIME


COMMANDS = {
    "degrade": cmd_degrade,
    "restore": cmd_restore,
    "metrics": cmd_metrics,
    "sweep": cmd_sweep,
    "projector-train": cmd_projector_train,
    "adjoint-check": cmd_adjoint_check,
    "selftest": cmd_selftest,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help, --version and usage errors
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .guidance import GuidanceDivergenceError
    from .imagecore import ImageError

    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"mpgd {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except GuidanceDivergenceError as exc:
        print(f"mpgd {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ImageError, OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"mpgd {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
