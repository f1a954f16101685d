"""Dataset degradation, parameter sweeps, timing and result tables.

Seed derivation (all from the single master ``seed``):

* measurement noise of the i-th dataset file: ``seed + i``
* initial diffusion noise when restoring image i: ``seed + RESTORE_SEED_OFFSET + i``

Every grid cell reuses the same restore seeds, so cells differ only in their
guidance settings.
"""

from __future__ import annotations

import csv
import datetime as _dt
import itertools
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .diffusion import GaussianAnalyticDenoiser, GmmAnalyticDenoiser, NoiseSchedule, make_schedule
from .guidance import (
    GuidanceConfig,
    GuidanceDivergenceError,
    IdentityProjector,
    restore,
    train_pca_projector,
)
from .imagecore import ImageError, center_crop_resize, load_image, save_image
from .metrics import evaluate, format_psnr
from .operators import (
    DEFAULT_BLUR_SIGMA,
    DEFAULT_BLUR_SIZE,
    DEFAULT_NOISE_SIGMA,
    LinearDegradation,
    NoiseSpec,
    add_noise,
    build_operator,
    operator_norm,
)

log = logging.getLogger(__name__)

__all__ = [
    "SweepConfig",
    "ResultRow",
    "SweepCellError",
    "TASKS",
    "CSV_COLUMNS",
    "RESTORE_SEED_OFFSET",
    "degrade_dataset",
    "load_pairs",
    "build_denoiser",
    "time_restore",
    "run_sweep",
    "run_cell",
    "replay_cell",
    "load_config",
    "monotonicity_check",
]

TASKS = ("sr4x", "deblur")
RESTORE_SEED_OFFSET = 2**32
CSV_COLUMNS = [
    "task", "m", "ddim_steps", "scale", "n_images", "n_failures", "ssim_mean", "ssim_std",
    "psnr_mean", "psnr_std", "n_inf", "lpips", "time_ms",
]
OPERATOR_NORM_ITERS = 100


class SweepCellError(RuntimeError):
    """Every restoration in a grid cell failed."""


@dataclass
class SweepConfig:
    task: str | list[str] = "sr4x"
    inner_steps_list: list[int] = field(default_factory=lambda: [1, 3, 7, 15, 20])
    ddim_steps_list: list[int] = field(default_factory=lambda: [20, 50, 100])
    scales_list: list[float] = field(default_factory=lambda: [4.0, 7.5, 17.5])
    seed: int = 0
    dataset_dir: str = "."
    working_side: int = 64
    denoiser_spec: dict = field(default_factory=lambda: {"kind": "gaussian"})
    warmup_runs: int = 2
    sigma: float = DEFAULT_NOISE_SIGMA
    step_mode: str = "budget"
    blur_size: int = DEFAULT_BLUR_SIZE
    blur_sigma: float = DEFAULT_BLUR_SIGMA
    jobs: int = 1
    self_test: bool = False

    def __post_init__(self):
        for name in ("inner_steps_list", "ddim_steps_list", "scales_list"):
            if not getattr(self, name):
                raise ValueError(f"{name} must be non-empty")
        for t in self.tasks:
            if t not in TASKS:
                raise ValueError(f"unknown task {t!r}, expected one of {TASKS}")
        if self.warmup_runs < 0:
            raise ValueError("warmup_runs must be >= 0")

    @property
    def tasks(self) -> list[str]:
        if isinstance(self.task, str):
            return list(TASKS) if self.task == "both" else [self.task]
        return list(self.task)

    @property
    def grid_size(self) -> int:
        return len(self.inner_steps_list) * len(self.ddim_steps_list) * len(self.scales_list)

    def grid(self):
        return itertools.product(self.inner_steps_list, self.ddim_steps_list, self.scales_list)

    @classmethod
    def from_dict(cls, data: dict) -> "SweepConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown SweepConfig fields: {sorted(unknown)}")
        return cls(**data)


def load_config(path) -> SweepConfig:
    """Read a YAML (or JSON) file whose keys are SweepConfig field names."""
    import yaml

    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected a mapping of SweepConfig fields")
    return SweepConfig.from_dict(data)


@dataclass
class ResultRow:
    task: str
    m: int
    ddim_steps: int
    scale: float
    n_images: int
    n_failures: int
    ssim_mean: float
    ssim_std: float
    psnr_mean: float
    psnr_std: float
    n_inf: int
    lpips: str
    time_ms: float
    residual_mean: float = float("nan")

    def csv_record(self) -> list:
        rec = asdict(self)
        out = []
        for col in CSV_COLUMNS:
            v = rec[col]
            if isinstance(v, float):
                v = "inf" if math.isinf(v) else ("nan" if math.isnan(v) else repr(v))
            out.append(v)
        return out


# -- degradation --------------------------------------------------------------


def _list_pngs(dataset_dir: Path) -> list[Path]:
    return sorted(p for p in dataset_dir.iterdir() if p.is_file() and p.suffix.lower() == ".png")


def degrade_dataset(dataset_dir, task: str, noise: NoiseSpec, working_side: int, out_dir,
                    blur_size: int = DEFAULT_BLUR_SIZE, blur_sigma: float = DEFAULT_BLUR_SIGMA,
                    jobs: int = 1) -> Path:
    """Write ``gt/``, ``deg/`` and ``meta.json`` under ``out_dir``.

    The i-th PNG (sorted by name) gets noise seed ``noise.seed + i``. Besides
    the clamped ``deg/<name>.png`` the raw measurement is kept as
    ``deg/<name>.npy``; restorations read the ``.npy``.
    """
    dataset_dir = Path(dataset_dir)
    out_dir = Path(out_dir)
    if not dataset_dir.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {dataset_dir}")
    files = _list_pngs(dataset_dir)
    if not files:
        raise ValueError(f"no PNG files in {dataset_dir}")
    (out_dir / "gt").mkdir(parents=True, exist_ok=True)
    (out_dir / "deg").mkdir(parents=True, exist_ok=True)

    ops: dict[tuple, LinearDegradation] = {}

    def one(index_path):
        index, path = index_path
        try:
            img = load_image(path)
        except ImageError as exc:
            log.warning("skipping %s: %s", path, exc)
            return {"file": path.name, "error": str(exc)}
        gt = center_crop_resize(img, working_side)
        save_image(gt, out_dir / "gt" / f"{path.stem}.png")
        # measure the quantized ground truth so the stored pair is consistent
        gt = load_image(out_dir / "gt" / f"{path.stem}.png")
        key = gt.shape
        if key not in ops:
            ops[key] = build_operator(task, key, blur_size, blur_sigma)
        op = ops[key]
        seed = noise.seed + index
        y = add_noise(op.apply(gt), NoiseSpec(noise.sigma, seed))
        np.save(out_dir / "deg" / f"{path.stem}.npy", y)
        save_image(y, out_dir / "deg" / f"{path.stem}.png")
        return {"name": path.stem, "source": str(path), "seed": seed,
                "gt_shape": list(gt.shape), "deg_shape": list(y.shape), "operator": op.params()}

    indexed = list(enumerate(files))
    if jobs > 1:
        # build operators up front so worker threads only read the cache
        for shape in {(working_side, working_side, c) for c in (1, 3)}:
            ops[shape] = build_operator(task, shape, blur_size, blur_sigma)
        with ThreadPoolExecutor(jobs) as pool:
            results = list(pool.map(one, indexed))
    else:
        results = [one(item) for item in indexed]

    entries = [r for r in results if "name" in r]
    skipped = [r for r in results if "error" in r]
    if not entries:
        raise ValueError(f"no readable PNG files in {dataset_dir}")
    meta = {
        "task": task,
        "sigma": noise.sigma,
        "seed": noise.seed,
        "working_side": working_side,
        "kernel": {"size": blur_size, "sigma": blur_sigma} if task == "deblur" else None,
        "files": entries,
        "skipped": skipped,
    }
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=2))
    return out_dir


def load_pairs(pair_dir) -> tuple[dict, list[tuple[str, np.ndarray, np.ndarray]]]:
    """Return ``(meta, [(name, gt, y), ...])`` from a degraded-pair directory."""
    pair_dir = Path(pair_dir)
    meta = json.loads((pair_dir / "meta.json").read_text())
    pairs = []
    for entry in meta["files"]:
        name = entry["name"]
        gt = load_image(pair_dir / "gt" / f"{name}.png")
        raw = pair_dir / "deg" / f"{name}.npy"
        y = np.load(raw) if raw.exists() else load_image(pair_dir / "deg" / f"{name}.png")
        pairs.append((name, gt, y))
    return meta, pairs


# -- priors -------------------------------------------------------------------

MIN_PRIOR_VAR = 1e-3


def build_denoiser(spec: dict, images: Sequence[np.ndarray], schedule: NoiseSchedule, seed: int = 0):
    """Analytic denoiser (and projector) described by ``spec``.

    ``spec["kind"]`` is ``gaussian``, ``gmm`` or ``projector-augmented``.
    Parameters missing from ``spec`` are fitted to ``images``.
    Returns ``(denoiser, projector)``.
    """
    kind = spec.get("kind", "gaussian")
    stack = np.stack([np.asarray(im, dtype=np.float64) for im in images])
    if kind in ("gaussian", "projector-augmented"):
        mean = np.full(stack.shape[1:], float(spec["mean"])) if "mean" in spec else stack.mean(axis=0)
        var = float(spec.get("prior_var", max(float(np.mean((stack - mean) ** 2)), MIN_PRIOR_VAR)))
        den = GaussianAnalyticDenoiser(mean, var, schedule)
        projector = IdentityProjector()
        if kind == "projector-augmented":
            n = stack.shape[0]
            k = min(int(spec.get("k", 4)), n - 1, stack[0].size)
            projector = train_pca_projector(list(stack), k)
        return den, projector
    if kind == "gmm":
        from scipy.cluster.vq import kmeans2

        n = stack.shape[0]
        k = min(int(spec.get("components", 2)), n)
        flat = stack.reshape(n, -1)
        centroids, labels = kmeans2(flat, k, seed=seed, minit="++")
        comps = []
        for j in range(k):
            members = flat[labels == j]
            if members.size == 0:
                continue
            var = max(float(np.mean((members - centroids[j]) ** 2)), MIN_PRIOR_VAR)
            comps.append((members.shape[0] / n, centroids[j].reshape(stack.shape[1:]), var))
        total = sum(c[0] for c in comps)
        comps = [(w / total, m, v) for w, m, v in comps]
        return GmmAnalyticDenoiser(comps, schedule), IdentityProjector()
    raise ValueError(f"unknown denoiser kind {kind!r}")


# -- timing -------------------------------------------------------------------


def time_restore(fn: Callable[[], object], warmup_runs: int = 2) -> float:
    """Call ``fn`` ``warmup_runs`` times untimed, then once timed; return milliseconds."""
    if warmup_runs < 0:
        raise ValueError("warmup_runs must be >= 0")
    for _ in range(warmup_runs):
        fn()
    start = time.perf_counter_ns()
    fn()
    return (time.perf_counter_ns() - start) / 1e6


# -- sweep --------------------------------------------------------------------


@dataclass
class _TaskContext:
    task: str
    pair_dir: Path
    meta: dict
    pairs: list
    op: LinearDegradation
    lipschitz: float
    denoiser: object
    projector: object
    restore_seeds: list[int]


def _prepare_task(cfg: SweepConfig, task: str, out_dir: Path, schedule: NoiseSchedule,
                  regenerate: bool = True) -> _TaskContext:
    pair_dir = out_dir / "pairs" / task
    if regenerate or not (pair_dir / "meta.json").exists():
        degrade_dataset(cfg.dataset_dir, task, NoiseSpec(cfg.sigma, cfg.seed), cfg.working_side,
                        pair_dir, cfg.blur_size, cfg.blur_sigma, jobs=cfg.jobs)
    meta, pairs = load_pairs(pair_dir)
    shapes = {gt.shape for _, gt, _ in pairs}
    if len(shapes) != 1:
        raise ValueError(f"mixed image shapes in {pair_dir}: {sorted(shapes)}")
    shape = shapes.pop()
    op = build_operator(task, shape, cfg.blur_size, cfg.blur_sigma)
    lipschitz = operator_norm(op, OPERATOR_NORM_ITERS, seed=cfg.seed)
    prior_images = [gt for _, gt, _ in pairs]
    if "prior_dir" in cfg.denoiser_spec:
        prior_dir = Path(cfg.denoiser_spec["prior_dir"])
        prior_images = [center_crop_resize(load_image(p), cfg.working_side) for p in _list_pngs(prior_dir)]
    spec = {k: v for k, v in cfg.denoiser_spec.items() if k != "prior_dir"}
    denoiser, projector = build_denoiser(spec, prior_images, schedule, seed=cfg.seed)
    # restore seeds follow the file index used for noise seeds
    index = {e["name"]: e["seed"] - cfg.seed for e in meta["files"]}
    seeds = [cfg.seed + RESTORE_SEED_OFFSET + index[name] for name, _, _ in pairs]
    return _TaskContext(task, pair_dir, meta, pairs, op, lipschitz, denoiser, projector, seeds)


def _aggregate(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return float("nan"), float("nan")
    return float(np.mean(arr)), float(np.std(arr))


def run_cell(ctx: _TaskContext, cfg: SweepConfig, schedule: NoiseSchedule, m: int,
             ddim_steps: int, scale: float) -> ResultRow:
    gcfg = GuidanceConfig(inner_steps=m, guidance_scale=scale, step_mode=cfg.step_mode,
                          projector=ctx.projector)

    def restore_one(i):
        _, _, y = ctx.pairs[i]
        return restore(y, ctx.op, ctx.denoiser, schedule, ddim_steps, gcfg, ctx.restore_seeds[i],
                       lipschitz=ctx.lipschitz)

    def measure(i):
        box = {}

        def call():
            box["x"] = restore_one(i)

        warm = cfg.warmup_runs if i == 0 else 0
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                ms = time_restore(call, warm)
        except GuidanceDivergenceError as exc:
            log.warning("%s m=%d ddim=%d scale=%g image %s: %s", ctx.task, m, ddim_steps, scale,
                        ctx.pairs[i][0], exc)
            return None
        x = box["x"]
        if not np.all(np.isfinite(x)):
            return None
        _, gt, y = ctx.pairs[i]
        report = evaluate(np.clip(x, 0.0, 1.0), gt)
        residual = float(np.linalg.norm(y - ctx.op.apply(x)))
        return report, ms, residual

    n = len(ctx.pairs)
    if cfg.jobs > 1 and n > 1:
        first = [measure(0)]
        with ThreadPoolExecutor(cfg.jobs) as pool:
            results = first + list(pool.map(measure, range(1, n)))
    else:
        results = [measure(i) for i in range(n)]

    ok = [r for r in results if r is not None]
    failures = n - len(ok)
    if not ok:
        raise SweepCellError(f"all {n} restorations failed in cell task={ctx.task} m={m} "
                             f"ddim_steps={ddim_steps} scale={scale}")
    psnrs = [r[0].psnr_db for r in ok]
    finite = [p for p in psnrs if not math.isinf(p)]
    n_inf = len(psnrs) - len(finite)
    ssim_mean, ssim_std = _aggregate([r[0].ssim for r in ok])
    psnr_mean, psnr_std = _aggregate(finite)
    if not finite:
        psnr_mean, psnr_std = float("inf"), 0.0
    return ResultRow(
        task=ctx.task, m=m, ddim_steps=ddim_steps, scale=float(scale), n_images=len(ok),
        n_failures=failures, ssim_mean=ssim_mean, ssim_std=ssim_std, psnr_mean=psnr_mean,
        psnr_std=psnr_std, n_inf=n_inf, lpips="", time_ms=float(np.mean([r[1] for r in ok])),
        residual_mean=float(np.mean([r[2] for r in ok])),
    )


def monotonicity_check(rows: Sequence[ResultRow], low: int = 1, high: int = 15) -> list[str]:
    """Cells where mean residual at ``m=high`` exceeds that at ``m=low``."""
    by_key = {(r.task, r.m, r.ddim_steps, r.scale): r for r in rows}
    problems = []
    for (task, m, ddim, scale), row in sorted(by_key.items()):
        if m != low or (task, high, ddim, scale) not in by_key:
            continue
        hi = by_key[(task, high, ddim, scale)]
        if hi.residual_mean > row.residual_mean:
            problems.append(f"{task} ddim={ddim} scale={scale}: residual m={high} "
                            f"{hi.residual_mean:.6g} > m={low} {row.residual_mean:.6g}")
    return problems


def _schedule_record(schedule: NoiseSchedule) -> dict:
    return {"T": schedule.T, "beta_start": float(schedule.betas[0]),
            "beta_end": float(schedule.betas[-1])}


def write_results(rows: Sequence[ResultRow], out_dir) -> None:
    out_dir = Path(out_dir)
    with open(out_dir / "results.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow(row.csv_record())
    lines = [
        "| Task | Steps (m) | DDIM steps | Scale | n | LPIPS ↓ | SSIM ↑ | PSNR ↑ | Time (ms) ↓ |",
        "|---|---|---|---|---|---|---|---|---|",
    ]
    for r in rows:
        psnr_txt = "inf" if math.isinf(r.psnr_mean) else f"{r.psnr_mean:.2f}"
        lines.append(f"| {r.task} | {r.m} | {r.ddim_steps} | {r.scale:g} | {r.n_images} | – "
                     f"| {r.ssim_mean:.3f} | {psnr_txt} | {r.time_ms:.1f} |")
    (out_dir / "results.md").write_text("\n".join(lines) + "\n")


def run_sweep(cfg: SweepConfig, out_dir) -> list[ResultRow]:
    """Run every grid cell for every selected task and write the result files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    schedule = make_schedule()
    rows: list[ResultRow] = []
    manifest = {
        "engine_version": __version__,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "config": asdict(cfg),
        "schedule": _schedule_record(schedule),
        "seed_derivation": {"noise": "seed + file_index",
                            "restore": f"seed + {RESTORE_SEED_OFFSET} + file_index"},
        "tasks": {},
        "cells": [],
    }
    for task in cfg.tasks:
        ctx = _prepare_task(cfg, task, out_dir, schedule)
        manifest["tasks"][task] = {
            "pairs_dir": str(ctx.pair_dir.relative_to(out_dir)),
            "operator": ctx.op.params(),
            "lipschitz": ctx.lipschitz,
            "images": [name for name, _, _ in ctx.pairs],
            "noise_seeds": [e["seed"] for e in ctx.meta["files"]],
            "restore_seeds": ctx.restore_seeds,
            "skipped": ctx.meta["skipped"],
        }
        for m, ddim, scale in cfg.grid():
            log.info("cell %s m=%d ddim=%d scale=%g", task, m, ddim, scale)
            row = run_cell(ctx, cfg, schedule, m, ddim, scale)
            rows.append(row)
            manifest["cells"].append({"task": task, "m": m, "ddim_steps": ddim, "scale": scale,
                                      "restore_seeds": ctx.restore_seeds,
                                      "n_failures": row.n_failures})
    if cfg.self_test:
        problems = monotonicity_check(rows)
        manifest["self_test"] = {"passed": not problems, "problems": problems}
        for p in problems:
            log.warning("self-test: %s", p)
    write_results(rows, out_dir)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return rows


def replay_cell(manifest_path, task: str, m: int, ddim_steps: int, scale: float,
                out_dir=None) -> ResultRow:
    """Recompute one grid cell from a manifest written by :func:`run_sweep`."""
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    cfg = SweepConfig.from_dict(manifest["config"])
    root = Path(out_dir) if out_dir is not None else manifest_path.parent
    schedule = make_schedule(**{"T": manifest["schedule"]["T"],
                                "beta_start": manifest["schedule"]["beta_start"],
                                "beta_end": manifest["schedule"]["beta_end"]})
    if task not in manifest["tasks"]:
        raise KeyError(f"task {task!r} not in manifest")
    ctx = _prepare_task(cfg, task, root, schedule, regenerate=False)
    if ctx.restore_seeds != manifest["tasks"][task]["restore_seeds"]:
        raise ValueError("restore seeds differ from the manifest; dataset changed?")
    return run_cell(ctx, cfg, schedule, m, ddim_steps, scale)
