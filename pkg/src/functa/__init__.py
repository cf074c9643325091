"""Neural fields as data: meta-learned latents for images and tools built on them."""

from .field import CoordGrid, FieldParams, SirenConfig, field_backward, field_forward, make_coord_grid, siren_init
from .functaset import (
    BadMagicError,
    Functaset,
    FunctasetFormatError,
    NormStats,
    QuantSpec,
    TruncatedFileError,
    VersionMismatchError,
    ZeroVarianceError,
    compute_norm_stats,
    denormalize,
    dequantize,
    load,
    normalize,
    quantize,
    save,
)
from .latent_maps import LatentMap, init_latent_map, interpolate_modulation, latent_to_modulation, modulations_for_grid
from .meta import (
    DivergenceError,
    MetaConfig,
    MetaState,
    build_functaset,
    decode,
    encode_batch,
    init_meta_state,
    inner_fit,
    load_state,
    meta_train,
    outer_step,
    save_state,
)

__version__ = "0.1.0"
