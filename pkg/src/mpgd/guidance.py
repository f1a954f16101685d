"""Multi-step manifold-preserving guidance.

At each retained DDIM timestep the Tweedie estimate is refined by ``m``
projected gradient steps on the data-fidelity loss
``0.5 * ||y - A x0||^2`` before the DDIM transition uses it.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .diffusion import (
    Denoiser,
    NoiseSchedule,
    ddim_step,
    initial_noise,
    make_ddim_timesteps,
    tweedie_x0,
)
from .operators import LinearDegradation

__all__ = [
    "GuidanceDivergenceError",
    "ManifoldProjector",
    "IdentityProjector",
    "PcaProjector",
    "GuidanceConfig",
    "fidelity_loss",
    "fidelity_grad",
    "step_size",
    "guided_inner_loop",
    "restore",
    "train_pca_projector",
    "save_projector",
    "load_projector",
    "PROJECTOR_MAGIC",
]

STEP_MODES = ("budget", "raw")


class GuidanceDivergenceError(FloatingPointError):
    """A guidance update produced NaN or Inf."""

    def __init__(self, iteration: int, timestep: int | None = None):
        self.iteration = iteration
        self.timestep = timestep
        where = f"inner iteration {iteration}"
        if timestep is not None:
            where += f" at timestep {timestep}"
        super().__init__(f"guidance diverged: non-finite estimate after {where}")


class ManifoldProjector(Protocol):
    def project(self, x: np.ndarray) -> np.ndarray: ...


class IdentityProjector:
    def project(self, x):
        return x

    def __repr__(self):
        return "IdentityProjector()"


class PcaProjector:
    """Orthogonal projection onto the affine subspace ``mean + span(basis)``.

    ``basis`` holds orthonormal rows over flattened pixels, shape ``(k, d)``.
    Images of any shape with ``d`` entries are accepted.
    """

    def __init__(self, mean, basis):
        self.mean = np.asarray(mean, dtype=np.float64).ravel()
        basis = np.asarray(basis, dtype=np.float64)
        if basis.ndim != 2 or basis.shape[1] != self.mean.size:
            raise ValueError(f"basis shape {basis.shape} incompatible with d={self.mean.size}")
        self.basis = basis

    @property
    def k(self) -> int:
        return self.basis.shape[0]

    @property
    def d(self) -> int:
        return self.mean.size

    def project(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.size != self.d:
            raise ValueError(f"projector expects {self.d} values, got array of shape {x.shape}")
        centered = x.ravel() - self.mean
        out = self.mean + self.basis.T @ (self.basis @ centered)
        return out.reshape(x.shape)

    def orthogonal_residual(self, x) -> float:
        """Norm of the part of ``x - mean`` outside the span of the basis."""
        centered = np.asarray(x, dtype=np.float64).ravel() - self.mean
        return float(np.linalg.norm(centered - self.basis.T @ (self.basis @ centered)))

    def __repr__(self):
        return f"PcaProjector(k={self.k}, d={self.d})"


@dataclass
class GuidanceConfig:
    inner_steps: int = 15
    guidance_scale: float = 7.5
    step_mode: str = "budget"
    projector: ManifoldProjector = field(default_factory=IdentityProjector)

    def __post_init__(self):
        if self.inner_steps < 0:
            raise ValueError(f"inner_steps must be >= 0, got {self.inner_steps}")
        if not self.guidance_scale > 0:
            raise ValueError(f"guidance_scale must be positive, got {self.guidance_scale}")
        if self.step_mode not in STEP_MODES:
            raise ValueError(f"step_mode must be one of {STEP_MODES}, got {self.step_mode!r}")


def _residual(y, op, x0):
    y = np.asarray(y, dtype=np.float64)
    ax = op.apply(x0)
    if ax.shape != y.shape:
        raise ValueError(f"measurement shape {y.shape} != operator output shape {ax.shape}")
    return ax - y


def fidelity_loss(y, op: LinearDegradation, x0) -> float:
    r = _residual(y, op, x0)
    return 0.5 * float(np.vdot(r, r))


def fidelity_grad(y, op: LinearDegradation, x0) -> np.ndarray:
    """``A^T (A x0 - y)``."""
    return op.adjoint(_residual(y, op, x0))


def step_size(cfg: GuidanceConfig, lipschitz: float) -> float:
    """Per-iteration step: ``g / (m L)`` in budget mode, ``g`` in raw mode."""
    if cfg.step_mode == "raw":
        return cfg.guidance_scale
    if not lipschitz > 0:
        raise ValueError(f"operator-norm estimate must be positive, got {lipschitz}")
    return cfg.guidance_scale / (max(cfg.inner_steps, 1) * lipschitz)


def guided_inner_loop(x0hat, y, op: LinearDegradation, cfg: GuidanceConfig,
                      lipschitz: float, timestep: int | None = None,
                      trace: list | None = None) -> np.ndarray:
    """Apply ``cfg.inner_steps`` projected gradient steps to ``x0hat``.

    If ``trace`` is a list, the fidelity loss before the first and after
    every iteration is appended to it.
    """
    if cfg.inner_steps == 0:
        return x0hat
    rho = step_size(cfg, lipschitz)
    x = np.asarray(x0hat, dtype=np.float64)
    if trace is not None:
        trace.append(fidelity_loss(y, op, x))
    for it in range(1, cfg.inner_steps + 1):
        x = cfg.projector.project(x - rho * fidelity_grad(y, op, x))
        if not np.all(np.isfinite(x)):
            raise GuidanceDivergenceError(it, timestep)
        if trace is not None:
            trace.append(fidelity_loss(y, op, x))
    return x


def restore(y, op: LinearDegradation, denoiser: Denoiser, schedule: NoiseSchedule,
            num_ddim_steps: int, cfg: GuidanceConfig, seed: int,
            lipschitz: float | None = None) -> np.ndarray:
    """Guided DDIM restoration of ``x`` from ``y = A x + n``.

    ``lipschitz`` defaults to :func:`operator_norm` of ``op`` (seed 0); pass a
    precomputed value when restoring many images with one operator.
    """
    if lipschitz is None and cfg.inner_steps > 0 and cfg.step_mode == "budget":
        from .operators import operator_norm

        lipschitz = operator_norm(op)
    x = initial_noise(op.input_shape, seed)
    timesteps = make_ddim_timesteps(num_ddim_steps, schedule.T)
    x0 = x
    for i, t in enumerate(timesteps):
        t_prev = timesteps[i + 1] if i + 1 < len(timesteps) else 0
        eps = denoiser.predict_eps(x, t)
        x0 = tweedie_x0(x, eps, schedule.alpha_bar(t))
        x0 = guided_inner_loop(x0, y, op, cfg, lipschitz, timestep=t)
        x = ddim_step(x, x0, eps, schedule.alpha_bar(t_prev))
    return x0


def train_pca_projector(images: Sequence[np.ndarray], k: int) -> PcaProjector:
    """Fit a rank-``k`` PCA projector to a stack of same-shaped images.

    Directions with (numerically) zero variance are dropped, so the basis can
    have fewer than ``k`` rows on degenerate data.
    """
    if len(images) < 2:
        raise ValueError("need at least 2 images to fit a projector")
    shapes = {np.shape(im) for im in images}
    if len(shapes) != 1:
        raise ValueError(f"all images must share one shape, got {sorted(shapes)}")
    data = np.stack([np.asarray(im, dtype=np.float64).ravel() for im in images])
    n, d = data.shape
    if not 1 <= k <= min(n - 1, d):
        raise ValueError(f"k must be in [1, {min(n - 1, d)}], got {k}")
    mean = data.mean(axis=0)
    _, s, vt = np.linalg.svd(data - mean, full_matrices=False)
    # scale by the data magnitude so rounding noise in the centring is not kept
    tol = max(n, d) * np.finfo(np.float64).eps * max(s[0], np.linalg.norm(data))
    rank = int(np.sum(s[:k] > tol))
    return PcaProjector(mean, vt[:rank])


PROJECTOR_MAGIC = b"MPGDPCA1"
_HEADER = struct.Struct("<8sQQ")


def save_projector(proj: PcaProjector, path) -> None:
    """Write ``magic | k | d`` (uint64 LE), then the mean and row-major basis as float64 LE."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(PROJECTOR_MAGIC, proj.k, proj.d))
        fh.write(proj.mean.astype("<f8").tobytes())
        fh.write(np.ascontiguousarray(proj.basis).astype("<f8").tobytes())


def load_projector(path) -> PcaProjector:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated projector header")
    magic, k, d = _HEADER.unpack_from(raw)
    if magic != PROJECTOR_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    expected = _HEADER.size + 8 * d * (k + 1)
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for k={k}, d={d}, got {len(raw)}")
    body = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    return PcaProjector(body[:d].copy(), body[d:].reshape(k, d).copy())
