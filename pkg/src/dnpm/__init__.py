"""Neural parametric model of facial displacement detail, with an (id, exp) encoder,
a degraded-map restorer and a speech-driven animation front end."""
from .errors import (
    ChartError,
    ConfigError,
    DNPMError,
    EmptyInputError,
    PreconditionError,
    RangeError,
    ShapeError,
    TrainingDivergedError,
)
from .geometry import (
    DEFAULT_D_MAX,
    Camera,
    CoreTensor,
    Mesh,
    apply_displacement,
    bake_map,
    bilinear_proxy,
    compute_vertex_normals,
    sample_map,
    subdivide_midpoint,
)
from .fitting import FitConfig, FitResult, fit_landmarks
from .synth import SynthConfig, synth_dataset
from .generator import (
    DNPMTrainConfig,
    Generator,
    GeneratorConfig,
    average_latent,
    broadcast_w_to_wplus,
    mapping_forward,
    synthesis_forward,
    train_dnpm,
)
from .encoder import (
    Detailed3DMM,
    Detailed3DMMEncoder,
    EncoderConfig,
    EncoderTrainConfig,
    detailed3dmm_generate,
    encoder_forward,
    style_allocation,
    train_encoder,
)
from .restoration import (
    DegradationSpec,
    Restorer,
    RestorerConfig,
    RestorerTrainConfig,
    degrade,
    reconstruct_from_degraded_image,
    restore,
    restorer_forward,
    train_restorer,
)
from .audio2exp import (
    ARKIT_NAMES,
    Audio2ExpDecoder,
    AudioFeatureSeq,
    DecoderConfig,
    animate,
    decoder_step,
    rollout,
    train_audio2exp,
)
from .metrics import EvalRow, eval_table, psnr, ssim

__version__ = "0.1.0"
