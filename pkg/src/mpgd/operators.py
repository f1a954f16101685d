"""Linear degradation operators with exact adjoints.

Both operators use circular (periodic) boundary handling so that the adjoint
is an exact transpose:

* Gaussian blur, applied separably as two 1-D circular convolutions.
* Bicubic downsampling (Keys kernel, ``a = -0.5``, antialiased), stored as an
  explicit sparse matrix acting on the flattened ``(H*W, C)`` image.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .imagecore import as_image

__all__ = [
    "NoiseSpec",
    "LinearDegradation",
    "BlurOperator",
    "MatrixOperator",
    "IdentityOperator",
    "gaussian_kernel",
    "keys_cubic",
    "resample_matrix",
    "blur_apply",
    "blur_adjoint",
    "build_blur",
    "build_sr4x",
    "build_downsample",
    "build_operator",
    "add_noise",
    "operator_norm",
    "DEFAULT_BLUR_SIZE",
    "DEFAULT_BLUR_SIGMA",
    "DEFAULT_NOISE_SIGMA",
]

DEFAULT_BLUR_SIZE = 61
DEFAULT_BLUR_SIGMA = 3.0
DEFAULT_NOISE_SIGMA = 0.05
KEYS_A = -0.5


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float = DEFAULT_NOISE_SIGMA
    seed: int = 0

    def __post_init__(self):
        if not np.isfinite(self.sigma) or self.sigma < 0:
            raise ValueError(f"noise sigma must be finite and >= 0, got {self.sigma}")


class LinearDegradation:
    """A linear map ``A`` between image shapes together with its adjoint."""

    kind: str = "linear"
    input_shape: tuple[int, int, int]
    output_shape: tuple[int, int, int]

    def apply(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x):
        return self.apply(x)

    def params(self) -> dict:
        """JSON-friendly description used in metadata files."""
        return {"kind": self.kind, "input_shape": list(self.input_shape),
                "output_shape": list(self.output_shape)}

    def _check(self, arr, shape, what):
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 2 and shape[2] == 1:
            arr = arr[:, :, None]
        if arr.shape != tuple(shape):
            raise ValueError(f"{self.kind}: {what} shape {arr.shape} != expected {tuple(shape)}")
        return arr


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian of odd length ``size``."""
    if size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be a positive odd integer, got {size}")
    if not sigma > 0:
        raise ValueError(f"kernel sigma must be positive, got {sigma}")
    c = (size - 1) / 2
    i = np.arange(size, dtype=np.float64)
    k = np.exp(-((i - c) ** 2) / (2.0 * sigma**2))
    return k / k.sum()


@lru_cache(maxsize=64)
def _circulant(kernel_bytes: bytes, n: int) -> np.ndarray:
    k = np.frombuffer(kernel_bytes, dtype=np.float64)
    c = (k.size - 1) // 2
    rows = np.arange(n)
    mat = np.zeros((n, n))
    for j, kj in enumerate(k):
        # out[i] += k[j] * x[i - (j - c)]
        np.add.at(mat, (rows, (rows - (j - c)) % n), kj)
    mat.setflags(write=False)
    return mat


def _check_kernel(kernel, h, w):
    k = np.ascontiguousarray(kernel, dtype=np.float64)
    if k.ndim != 1 or k.size % 2 == 0:
        raise ValueError(f"kernel must be 1-D with odd length, got shape {k.shape}")
    if k.size > min(h, w):
        raise ValueError(f"kernel length {k.size} exceeds image side {min(h, w)}")
    return k


def blur_apply(img, kernel) -> np.ndarray:
    """Separable circular convolution, horizontal pass then vertical pass."""
    img = as_image(img)
    h, w, c = img.shape
    k = _check_kernel(kernel, h, w)
    kw = _circulant(k.tobytes(), w)
    kh = _circulant(k.tobytes(), h)
    # horizontal pass as one GEMM over the (W, H*C) view
    out = (kw @ img.transpose(1, 0, 2).reshape(w, h * c)).reshape(w, h, c).transpose(1, 0, 2)
    return (kh @ out.reshape(h, w * c)).reshape(h, w, c)


def blur_adjoint(img, kernel) -> np.ndarray:
    """Adjoint of :func:`blur_apply`: convolution with the reversed kernel."""
    k = np.asarray(kernel, dtype=np.float64)
    return blur_apply(img, k[::-1].copy())


class BlurOperator(LinearDegradation):
    kind = "gaussian_blur"

    def __init__(self, shape, size: int = DEFAULT_BLUR_SIZE, sigma: float = DEFAULT_BLUR_SIGMA,
                 kernel=None):
        self.input_shape = self.output_shape = tuple(int(s) for s in shape)
        self.size = size
        self.sigma = sigma
        self.kernel = gaussian_kernel(size, sigma) if kernel is None else np.asarray(kernel, float)
        _check_kernel(self.kernel, *self.input_shape[:2])

    def apply(self, x):
        return blur_apply(self._check(x, self.input_shape, "input"), self.kernel)

    def adjoint(self, y):
        return blur_adjoint(self._check(y, self.output_shape, "input"), self.kernel)

    def params(self):
        return {**super().params(), "kernel_size": self.size, "kernel_sigma": self.sigma}


class MatrixOperator(LinearDegradation):
    """Operator given by an explicit sparse matrix over flattened pixels.

    The same ``(H'W', HW)`` matrix is applied to every channel.
    """

    def __init__(self, matrix, input_shape, output_shape, kind: str = "matrix", **extra):
        self.matrix = sp.csr_matrix(matrix, dtype=np.float64)
        self.matrix_t = self.matrix.T.tocsr()
        self.input_shape = tuple(int(s) for s in input_shape)
        self.output_shape = tuple(int(s) for s in output_shape)
        self.kind = kind
        self.extra = extra
        h, w, _ = self.input_shape
        ho, wo, _ = self.output_shape
        if self.matrix.shape != (ho * wo, h * w):
            raise ValueError(f"matrix shape {self.matrix.shape} inconsistent with "
                             f"{self.input_shape} -> {self.output_shape}")

    def apply(self, x):
        x = self._check(x, self.input_shape, "input")
        h, w, c = self.input_shape
        return (self.matrix @ x.reshape(h * w, c)).reshape(self.output_shape)

    def adjoint(self, y):
        y = self._check(y, self.output_shape, "input")
        ho, wo, c = self.output_shape
        return (self.matrix_t @ y.reshape(ho * wo, c)).reshape(self.input_shape)

    def params(self):
        return {**super().params(), **self.extra}


class SeparableOperator(MatrixOperator):
    """Operator ``kron(Rh, Rw)`` applied as two dense 1-D passes.

    ``matrix`` is still available as the explicit sparse Kronecker product.
    """

    def __init__(self, rh, rw, input_shape, kind: str = "separable", **extra):
        self.rh = np.asarray(rh.toarray() if sp.issparse(rh) else rh, dtype=np.float64)
        self.rw = np.asarray(rw.toarray() if sp.issparse(rw) else rw, dtype=np.float64)
        h, w, c = (int(s) for s in input_shape)
        if self.rh.shape[1] != h or self.rw.shape[1] != w:
            raise ValueError(f"factor shapes {self.rh.shape}, {self.rw.shape} do not match {(h, w)}")
        super().__init__(sp.kron(self.rh, self.rw), (h, w, c),
                         (self.rh.shape[0], self.rw.shape[0], c), kind=kind, **extra)

    @staticmethod
    def _passes(x, a, b):
        h, w, c = x.shape
        t = (a @ x.reshape(h, w * c)).reshape(a.shape[0], w, c)
        ho = a.shape[0]
        t = b @ t.transpose(1, 0, 2).reshape(w, ho * c)
        return t.reshape(b.shape[0], ho, c).transpose(1, 0, 2)

    def apply(self, x):
        x = self._check(x, self.input_shape, "input")
        return np.ascontiguousarray(self._passes(x, self.rh, self.rw))

    def adjoint(self, y):
        y = self._check(y, self.output_shape, "input")
        return np.ascontiguousarray(self._passes(y, self.rh.T, self.rw.T))


class IdentityOperator(LinearDegradation):
    kind = "identity"

    def __init__(self, shape):
        self.input_shape = self.output_shape = tuple(int(s) for s in shape)

    def apply(self, x):
        return self._check(x, self.input_shape, "input").copy()

    def adjoint(self, y):
        return self._check(y, self.output_shape, "input").copy()


def keys_cubic(x, a: float = KEYS_A) -> np.ndarray:
    """Keys cubic convolution kernel, support ``[-2, 2]``."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def resample_matrix(n_in: int, n_out: int, a: float = KEYS_A) -> sp.csr_matrix:
    """1-D bicubic resampling weights, ``(n_out, n_in)``, circular boundary.

    When shrinking, the kernel is stretched by ``n_in / n_out`` (antialiasing).
    Each row is normalized to sum to one.
    """
    if n_in < 1 or n_out < 1:
        raise ValueError("resample sizes must be positive")
    scale = n_in / n_out
    stretch = max(scale, 1.0)
    support = 2.0 * stretch
    rows, cols, vals = [], [], []
    for i in range(n_out):
        center = (i + 0.5) * scale - 0.5
        lo = int(np.floor(center - support)) + 1
        hi = int(np.ceil(center + support))
        taps = np.arange(lo, hi)
        wts = keys_cubic((taps - center) / stretch, a)
        keep = wts != 0
        taps, wts = taps[keep], wts[keep]
        wts = wts / wts.sum()
        rows.append(np.full(taps.size, i))
        cols.append(taps % n_in)
        vals.append(wts)
    m = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_out, n_in),
    )
    return m.tocsr()  # duplicate (wrapped) indices are summed


def build_downsample(input_shape, factor: int, kind: str | None = None) -> SeparableOperator:
    """Antialiased bicubic downsampling by an integer factor."""
    h, w, c = (int(s) for s in input_shape)
    if factor < 1 or h % factor or w % factor:
        raise ValueError(f"image shape {(h, w)} is not divisible by factor {factor}")
    ho, wo = h // factor, w // factor
    # row-major flattening: pixel (r, s) -> r * W + s, so the matrix is kron(Rh, Rw)
    return SeparableOperator(resample_matrix(h, ho), resample_matrix(w, wo), (h, w, c),
                             kind=kind or f"downsample{factor}x_bicubic", factor=factor)


def build_sr4x(input_shape) -> SeparableOperator:
    return build_downsample(input_shape, 4, kind="sr4x_bicubic")


def build_blur(input_shape, size: int = DEFAULT_BLUR_SIZE,
               sigma: float = DEFAULT_BLUR_SIGMA) -> BlurOperator:
    return BlurOperator(input_shape, size=size, sigma=sigma)


def build_operator(task: str, input_shape, blur_size: int = DEFAULT_BLUR_SIZE,
                   blur_sigma: float = DEFAULT_BLUR_SIGMA) -> LinearDegradation:
    """Operator for a task name (``sr4x`` or ``deblur``).

    A blur kernel longer than the image is truncated to the largest odd
    length that fits.
    """
    if task == "sr4x":
        return build_sr4x(input_shape)
    if task == "deblur":
        side = min(input_shape[0], input_shape[1])
        size = min(blur_size, side if side % 2 else side - 1)
        return build_blur(input_shape, size=size, sigma=blur_sigma)
    raise ValueError(f"unknown task {task!r}, expected 'sr4x' or 'deblur'")


def add_noise(img, spec: NoiseSpec) -> np.ndarray:
    """``img + sigma * z`` with ``z`` drawn from ``default_rng(spec.seed)``; never clamped."""
    img = np.asarray(img, dtype=np.float64)
    if spec.sigma == 0:
        return img.copy()
    rng = np.random.default_rng(spec.seed)
    return img + spec.sigma * rng.standard_normal(img.shape)


def operator_norm(op: LinearDegradation, iters: int = 100, seed: int = 0) -> float:
    """Power-iteration estimate of the largest eigenvalue of ``A^T A``.

    Returns the Rayleigh quotient ``|A v|^2`` of the normalized iterate, which
    never decreases with ``iters``.
    """
    if iters < 1:
        raise ValueError("iters must be positive")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(op.input_shape)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(iters):
        av = op.apply(v)
        est = float(np.vdot(av, av))
        w = op.adjoint(av)
        nrm = np.linalg.norm(w)
        if nrm == 0:
            return est
        v = w / nrm
    av = op.apply(v)
    return float(np.vdot(av, av))
