"""Embedded verification checks run by ``mpgd selftest``."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .diffusion import GaussianAnalyticDenoiser, make_schedule, sample_unconditional
from .guidance import (
    GuidanceConfig,
    fidelity_grad,
    fidelity_loss,
    guided_inner_loop,
    restore,
    train_pca_projector,
)
from .metrics import ssim, ssim_window
from .operators import LinearDegradation, MatrixOperator, build_blur, build_sr4x, operator_norm


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


class _CorruptAdjoint(LinearDegradation):
    """Wraps an operator and perturbs its adjoint (fault-injection hook)."""

    def __init__(self, op):
        self.op = op
        self.kind = op.kind
        self.input_shape = op.input_shape
        self.output_shape = op.output_shape

    def apply(self, x):
        return self.op.apply(x)

    def adjoint(self, y):
        out = self.op.adjoint(y)
        return out + 1e-3 * np.roll(out, 1, axis=0)


def block_average(shape, factor=2) -> MatrixOperator:
    """Explicit ``factor x factor`` block-mean downsampling."""
    h, w, c = shape
    r = sp.kron(sp.eye(h // factor), np.full((1, factor), 1.0 / factor))
    s = sp.kron(sp.eye(w // factor), np.full((1, factor), 1.0 / factor))
    return MatrixOperator(sp.kron(r, s), shape, (h // factor, w // factor, c), kind="block_average")


def linear_gaussian_posterior_mean(op: MatrixOperator, mu, prior_var, y, noise_sigma):
    """Dense ``mu + S A^T (A S A^T + s^2 I)^-1 (y - A mu)`` for a single channel."""
    a = op.matrix.toarray()
    s = prior_var * np.eye(a.shape[1])
    gram = a @ s @ a.T + noise_sigma**2 * np.eye(a.shape[0])
    pm = mu.ravel() + s @ a.T @ np.linalg.solve(gram, y.ravel() - a @ mu.ravel())
    return pm.reshape(mu.shape)


def _check_adjoint(corrupt):
    rng = np.random.default_rng(0)
    worst = 0.0
    for op in (build_blur((16, 16, 1), size=15, sigma=3.0), build_sr4x((16, 16, 1))):
        if corrupt:
            op = _CorruptAdjoint(op)
        for _ in range(100):
            x = rng.standard_normal(op.input_shape)
            y = rng.standard_normal(op.output_shape)
            ax = op.apply(x)
            err = abs(np.vdot(ax, y) - np.vdot(x, op.adjoint(y))) / (np.linalg.norm(ax) * np.linalg.norm(y))
            worst = max(worst, err)
    return worst < 1e-10, f"max relative inner-product error {worst:.2e}"


def _check_gradient():
    rng = np.random.default_rng(1)
    worst = 0.0
    h = 1e-5
    for op in (build_blur((8, 8, 1), size=5, sigma=3.0), build_sr4x((8, 8, 1))):
        for _ in range(3):
            x = rng.random(op.input_shape)
            y = rng.random(op.output_shape)
            g = fidelity_grad(y, op, x)
            fd = np.zeros_like(x)
            for idx in np.ndindex(x.shape):
                e = np.zeros_like(x)
                e[idx] = h
                fd[idx] = (fidelity_loss(y, op, x + e) - fidelity_loss(y, op, x - e)) / (2 * h)
            worst = max(worst, np.linalg.norm(g - fd) / np.linalg.norm(fd))
    return worst < 1e-6, f"max relative error vs central differences {worst:.2e}"


def _check_posterior_mean():
    sched = make_schedule()
    op = block_average((4, 4, 1))
    rng = np.random.default_rng(2)
    prior_var = 0.04
    mu = rng.uniform(0.3, 0.7, (4, 4, 1))
    x = mu + np.sqrt(prior_var) * rng.standard_normal(mu.shape)
    y = op.apply(x) + 0.05 * rng.standard_normal(op.output_shape)
    pm = linear_gaussian_posterior_mean(op, mu, prior_var, y, 0.05)
    den = GaussianAnalyticDenoiser(mu, prior_var, sched)
    cfg = GuidanceConfig(15, 7.5, "budget")
    lip = operator_norm(op)
    avg = np.mean([restore(y, op, den, sched, 100, cfg, s, lip) for s in range(200)], axis=0)
    err = np.linalg.norm(avg - pm) / np.linalg.norm(pm)
    base = np.linalg.norm(mu - pm) / np.linalg.norm(pm)
    return err < 0.5 * base, (
        f"seed-averaged restoration rel. L2 {err:.4f} from posterior mean (prior mean: {base:.4f})")


def _check_ssim():
    rng = np.random.default_rng(3)
    win = ssim_window()
    c1, c2 = 0.01**2, 0.03**2
    worst = 0.0
    for _ in range(2):
        a = rng.random((24, 24))
        b = np.clip(a + 0.2 * rng.standard_normal(a.shape), 0, 1)
        vals = []
        for i in range(a.shape[0] - 10):
            for j in range(a.shape[1] - 10):
                pa, pb = a[i : i + 11, j : j + 11], b[i : i + 11, j : j + 11]
                ma, mb = np.sum(win * pa), np.sum(win * pb)
                va = np.sum(win * (pa - ma) ** 2)
                vb = np.sum(win * (pb - mb) ** 2)
                cov = np.sum(win * (pa - ma) * (pb - mb))
                vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
        worst = max(worst, abs(np.mean(vals) - ssim(a, b)))
    return worst < 1e-6, f"max |ssim - sliding-window reference| {worst:.2e}"


def _check_descent():
    rng = np.random.default_rng(4)
    op = build_sr4x((16, 16, 1))
    lip = operator_norm(op)
    worst = -np.inf
    for _ in range(20):
        m = int(rng.integers(1, 21))
        g = float(rng.uniform(0.05, 1.99)) * m
        trace: list[float] = []
        guided_inner_loop(rng.random(op.input_shape), rng.random(op.output_shape), op,
                          GuidanceConfig(m, g, "budget"), lip, trace=trace)
        worst = max(worst, float(np.max(np.diff(trace))))
    return worst <= 1e-12, f"largest loss increase across inner iterations {worst:.2e}"


def _check_m0_reduction():
    sched = make_schedule()
    op = build_sr4x((8, 8, 1))
    den = GaussianAnalyticDenoiser(np.full((8, 8, 1), 0.5), 0.05, sched)
    y = np.full(op.output_shape, 0.5)
    a = restore(y, op, den, sched, 20, GuidanceConfig(0, 7.5), seed=11)
    b = sample_unconditional(den, sched, 20, seed=11, shape=(8, 8, 1))
    return bool(np.array_equal(a, b)), "m=0 restore bit-identical to unconditional sample"


def _check_projector():
    rng = np.random.default_rng(5)
    basis = rng.standard_normal((3, 16))
    imgs = [(0.5 + rng.standard_normal(3) @ basis).reshape(4, 4, 1) for _ in range(10)]
    proj = train_pca_projector(imgs, 3)
    x = rng.random((4, 4, 1))
    px = proj.project(x)
    idem = np.linalg.norm(proj.project(px) - px) / np.linalg.norm(px)
    recon = max(np.linalg.norm(proj.project(im) - im) for im in imgs)
    return idem < 1e-9 and recon < 1e-8, f"idempotence {idem:.1e}, training reconstruction {recon:.1e}"


CHECKS: dict[str, Callable] = {
    "adjoint": _check_adjoint,
    "gradient": _check_gradient,
    "posterior-mean": _check_posterior_mean,
    "ssim": _check_ssim,
    "descent": _check_descent,
    "m0-reduction": _check_m0_reduction,
    "projector": _check_projector,
}


def run_selftest(corrupt_adjoint: bool = False) -> list[CheckResult]:
    results = []
    for name, fn in CHECKS.items():
        start = time.perf_counter()
        try:
            passed, detail = fn(corrupt_adjoint) if name == "adjoint" else fn()
        except Exception as exc:  # a crashing check is a failing check
            passed, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(name, bool(passed), detail, time.perf_counter() - start))
    return results
