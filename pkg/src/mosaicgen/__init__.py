"""Subject-driven generation by mosaic latent completion.

Core pieces: mosaic layout construction over reference latents, a masked
flow-matching completion loop generic over velocity denoisers, cascaded
multi-scale attention scores, a small trainable patch-token denoiser with an
analytic Gaussian oracle, a procedural synthetic-subject corpus with toy
identity metrics, and prompt construction/parsing utilities.
"""

from .grids import (
    Latent,
    MosaicLayout,
    PanelMask,
    extract_panel,
    make_assignment,
    place_panel,
    region_mask,
    target_mask,
    to_latent,
    unfold,
)
from .sampler import (
    DivergenceError,
    SamplerConfig,
    Schedule,
    apply_mask,
    complete,
    complete_region,
    guided_velocity,
    noise_blend,
)
from .cascade import (
    TokenGrid,
    TokenScorePyramid,
    TokenSlices,
    cascade_attention,
    cascade_scores,
    pool_tokens,
    score_map,
    slices_from_layout,
    slices_from_mask,
    upsample_scores,
)
from .denoiser import (
    AnalyticGaussianDenoiser,
    Condition,
    ToyModelConfig,
    TransformerDenoiser,
    analytic_velocity,
    fm_loss,
)

__version__ = "0.1.0"
