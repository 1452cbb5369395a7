"""segshield: make segmentation datasets unlearnable, then prove it.

Protects image/mask datasets by training bounded contour- and
texture-aware perturbation generators (plus an error-minimizing
baseline), and verifies protection by training exploiter segmenters and
measuring clean-test DSC/Jaccard, invisibility PSNR/SSIM, and robustness
to input defenses and adversarial training.
"""

from .core import Perturbation, RngSeed, Sample, clip_interval, masked_mul
from .errors import (
    ConfigurationError,
    DimensionError,
    IngestionError,
    MissingPerturbationError,
    NonFiniteLossError,
    SegShieldError,
)
from .maskgeom import ContourBandSpec, extract_contour_band, interior_map
from .nets import CdcConv2d, NetSpec, build_model, cdc_conv2d, net_forward
from .perturb import (
    DEFAULT_EPSILON,
    ProtectedSample,
    ProtectorState,
    contour_perturbation,
    em_update,
    protect_image,
    texture_perturbation,
)
from .texture import LbpConfig, lbp_codes, texture_intensity_map
from .train import (
    TrainConfig,
    dice_loss,
    seg_loss,
    train_em,
    train_exploiter,
    train_exploiter_adversarial,
    train_umed,
)
from .evaluation import (
    MatrixConfig,
    MetricReport,
    defense_gaussian_blur,
    defense_jpeg,
    dsc,
    jaccard,
    psnr,
    run_matrix,
    ssim,
)
from .dataio import (
    DatasetManifest,
    SynthSpec,
    generate_synthetic,
    load_dataset,
    load_split,
    save_dataset,
    save_protected,
)

__version__ = "0.1.0"
