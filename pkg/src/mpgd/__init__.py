"""Training-free multi-step guided diffusion restoration for linear inverse problems."""

__version__ = "0.1.0"

from .diffusion import (  # noqa: E402
    GaussianAnalyticDenoiser,
    GmmAnalyticDenoiser,
    NoiseSchedule,
    make_ddim_timesteps,
    make_schedule,
    sample_unconditional,
)
from .guidance import (  # noqa: E402
    GuidanceConfig,
    GuidanceDivergenceError,
    IdentityProjector,
    PcaProjector,
    restore,
    train_pca_projector,
)
from .operators import NoiseSpec, add_noise, build_blur, build_sr4x, operator_norm  # noqa: E402

__all__ = [
    "__version__",
    "GaussianAnalyticDenoiser",
    "GmmAnalyticDenoiser",
    "NoiseSchedule",
    "make_ddim_timesteps",
    "make_schedule",
    "sample_unconditional",
    "GuidanceConfig",
    "GuidanceDivergenceError",
    "IdentityProjector",
    "PcaProjector",
    "restore",
    "train_pca_projector",
    "NoiseSpec",
    "add_noise",
    "build_blur",
    "build_sr4x",
    "operator_norm",
]
