"""Perceptually-uniform image morphing with latent diffusion models."""

from .adaptation import (
    AdapterSet,
    LowRankDelta,
    RankPolicy,
    adapt_conditional,
    adapt_unconditional,
    adapted_predict,
    heuristic_rank,
    make_predictor,
    rppd,
)
from .config import RunConfig, RunManifest
from .errors import (
    BackendCapabilityError,
    DegeneratePairError,
    MorphError,
    NumericalError,
    PhaseError,
    SearchError,
    ValidationError,
)
from .guidance import GuidanceConfig, SigmaBoostPlan, cfg_combine, convex_cfg_schedule, sigma_boost_plan
from .interpolation import (
    FrameCache,
    FrameContext,
    MorphSequence,
    MorphSpec,
    generate_frame,
    lerp_embedding,
    perceptual_uniform_alphas,
    perceptual_uniform_search,
    slerp_latent,
)
from .metrics import (
    PathMetricsReport,
    endpoint_error,
    fid_hook,
    fit_gaussian,
    frechet_distance,
    max_lpips,
    ppl_uniform,
    total_lpips,
)
from .morpher import ImageMorpher
from .schedule import (
    LatentState,
    NoiseSchedule,
    ddim_reverse_step,
    denoise_trajectory,
    invert_trajectory,
    ode_inversion_step,
)
from .textual_inversion import (
    EmbeddingVector,
    InversionConfig,
    dpm_loss,
    init_common_embedding,
    optimize_embedding,
    optimize_embedding_pair,
)

__version__ = "0.1.0"

from .pipeline import run_pipeline  # noqa: E402  (pipeline reads __version__)
