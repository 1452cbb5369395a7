"""Segmentation metrics, invisibility metrics, input defenses and the
protector x exploiter x defense experiment matrix.

Overlap metrics (DSC, Jaccard) are computed on binarized predictions
against clean test masks; invisibility (PSNR, SSIM) compares protected
training images with their clean originals. Defenses transform training
images only, never masks; adversarial training is handled as a trainer
switch rather than an input transform.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy.ndimage import convolve1d
from scipy.signal import convolve2d

from .core import RngSeed, Sample, validate_mask
from .errors import ConfigurationError, DimensionError
from .maskgeom import ContourBandSpec
from .nets import NetSpec, net_forward
from .perturb import DEFAULT_EPSILON, ProtectorState, protect_image
from .texture import LbpConfig

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

INPUT_DEFENSES = ("gaussian_blur", "jpeg")
DEFENSES = ("none",) + INPUT_DEFENSES + ("adv_training",)


# ---------------------------------------------------------------- metrics


def _confusion_counts(pred, gt):
    pred = validate_mask(pred, "pred").astype(bool)
    gt = validate_mask(gt, "gt").astype(bool)
    if pred.shape != gt.shape:
        raise DimensionError(f"pred {pred.shape} vs gt {gt.shape}")
    inter = int(np.logical_and(pred, gt).sum())
    return inter, int(pred.sum()), int(gt.sum())


def dsc(pred: np.ndarray, gt: np.ndarray) -> float:
    """Dice similarity 2|P&G| / (|P| + |G|); 1.0 when both are empty."""
    inter, p, g = _confusion_counts(pred, gt)
    if p + g == 0:
        return 1.0
    return 2.0 * inter / (p + g)


def jaccard(pred: np.ndarray, gt: np.ndarray) -> float:
    """Intersection over union; 1.0 when both are empty."""
    inter, p, g = _confusion_counts(pred, gt)
    union = p + g - inter
    if union == 0:
        return 1.0
    return inter / union


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for unit dynamic range.

    Identical inputs give ``math.inf``; the JSON writers serialize that
    as a null-with-flag sentinel.
    """
    if a.shape != b.shape:
        raise DimensionError(f"psnr shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return -10.0 * math.log10(mse)


def _gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    r = size // 2
    d = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(d**2) / (2.0 * sigma**2))
    w = np.outer(k, k)
    return w / w.sum()


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local SSIM, 11x11 Gaussian window (sigma 1.5), L = 1.

    Multi-channel inputs are scored per channel and averaged. Only
    positions where the window fits entirely are scored.
    """
    if a.shape != b.shape:
        raise DimensionError(f"ssim shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        return float(np.mean([ssim(a[..., c], b[..., c]) for c in range(a.shape[2])]))
    if min(a.shape) < SSIM_WINDOW:
        raise ConfigurationError(
            f"image {a.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    w = _gaussian_window()
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2

    mu_a = convolve2d(a, w, mode="valid")
    mu_b = convolve2d(b, w, mode="valid")
    var_a = convolve2d(a * a, w, mode="valid") - mu_a * mu_a
    var_b = convolve2d(b * b, w, mode="valid") - mu_b * mu_b
    cov = convolve2d(a * b, w, mode="valid") - mu_a * mu_b

    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------- defenses


def defense_gaussian_blur(x: np.ndarray, kernel_size: int = 3, sigma: float = 0.8) -> np.ndarray:
    """Separable Gaussian blur with replicate borders, clipped to [0, 1]."""
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ConfigurationError(f"kernel_size must be odd and >= 1, got {kernel_size}")
    r = kernel_size // 2
    d = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(d**2) / (2.0 * sigma**2))
    k /= k.sum()
    out = x.astype(np.float64)
    out = convolve1d(out, k, axis=0, mode="nearest")
    out = convolve1d(out, k, axis=1, mode="nearest")
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def defense_jpeg(x: np.ndarray, quality: int = 60) -> np.ndarray:
    """8-bit baseline JPEG round trip (grayscale or 4:2:0 color)."""
    if not 1 <= int(quality) <= 100:
        raise ConfigurationError(f"jpeg quality must be in [1, 100], got {quality}")
    arr = np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)
    if x.ndim == 3 and x.shape[2] == 1:
        img = Image.fromarray(arr[..., 0], mode="L")
        kwargs = {}
    elif x.ndim == 3 and x.shape[2] == 3:
        img = Image.fromarray(arr, mode="RGB")
        kwargs = {"subsampling": 2}  # 4:2:0
    else:
        raise DimensionError(f"defense_jpeg expects (H, W, 1|3), got {x.shape}")
    buf = io.BytesIO()
    img.save(buf, format="JPEG", quality=int(quality), **kwargs)
    buf.seek(0)
    back = np.asarray(Image.open(buf)).astype(np.float32) / 255.0
    if back.ndim == 2:
        back = back[..., None]
    return back


def apply_input_defense(samples: list[Sample], kind: str, **params) -> list[Sample]:
    """Transform images of a dataset; masks pass through untouched."""
    if kind == "gaussian_blur":
        fn = lambda im: defense_gaussian_blur(
            im, params.get("kernel_size", 3), params.get("sigma", 0.8)
        )
    elif kind == "jpeg":
        fn = lambda im: defense_jpeg(im, params.get("quality", 60))
    else:
        raise ConfigurationError(f"unknown input defense {kind!r}")
    return [Sample(fn(s.image), s.mask.copy(), s.sample_id) for s in samples]


# ---------------------------------------------------------------- reports


def _psnr_json(value):
    if value is None:
        return {"psnr": None, "psnr_infinite": False}
    if math.isinf(value):
        return {"psnr": None, "psnr_infinite": True}
    return {"psnr": value, "psnr_infinite": False}


@dataclass
class MetricReport:
    """One matrix cell: protection quality plus invisibility numbers."""

    protector: str
    exploiter: str
    defense: str
    dsc_mean: float | None = None
    jaccard_mean: float | None = None
    psnr_mean: float | None = None
    ssim_mean: float | None = None
    dsc_per_sample: list = field(default_factory=list)
    jaccard_per_sample: list = field(default_factory=list)
    psnr_per_sample: list = field(default_factory=list)
    ssim_per_sample: list = field(default_factory=list)
    n_test: int = 0
    n_train: int = 0
    config_echo: dict = field(default_factory=dict)
    failed: bool = False
    error: str = ""

    def cell_id(self) -> str:
        return f"{self.protector}__{self.exploiter}__{self.defense}"

    def to_json_dict(self) -> dict:
        d = {
            "protector": self.protector,
            "exploiter": self.exploiter,
            "defense": self.defense,
            "dsc": self.dsc_mean,
            "jaccard": self.jaccard_mean,
            "ssim": self.ssim_mean,
            "dsc_per_sample": self.dsc_per_sample,
            "jaccard_per_sample": self.jaccard_per_sample,
            "ssim_per_sample": self.ssim_per_sample,
            "psnr_per_sample": [
                None if (v is not None and math.isinf(v)) else v
                for v in self.psnr_per_sample
            ],
            "n_test": self.n_test,
            "n_train": self.n_train,
            "config_echo": self.config_echo,
            "failed": self.failed,
            "error": self.error,
        }
        d.update(_psnr_json(self.psnr_mean))
        return d


def flatten_report_rows(reports) -> list[dict]:
    """One CSV row per cell per metric; infinite PSNR flagged, not faked."""
    rows = []
    for rep in reports:
        for metric, value in (
            ("dsc", rep.dsc_mean),
            ("jaccard", rep.jaccard_mean),
            ("psnr", rep.psnr_mean),
            ("ssim", rep.ssim_mean),
        ):
            infinite = value is not None and isinstance(value, float) and math.isinf(value)
            rows.append(
                {
                    "protector": rep.protector,
                    "exploiter": rep.exploiter,
                    "defense": rep.defense,
                    "metric": metric,
                    "value": "" if (value is None or infinite) else f"{value:.6f}",
                    "infinite": str(infinite).lower(),
                    "failed": str(rep.failed).lower(),
                }
            )
    return rows


# ---------------------------------------------------------------- matrix


@dataclass
class MatrixConfig:
    """Shared knobs for a full protector/exploiter/defense sweep."""

    epsilon: float = DEFAULT_EPSILON
    band: ContourBandSpec = ContourBandSpec()
    lbp: LbpConfig = LbpConfig()
    floor: float = 0.1
    net_depth: int = 4
    net_base: int = 16
    protect_epochs: int = 100
    protect_batch: int = 16
    lr_surrogate: float = 1e-4
    lr_generator: float = 1e-4
    exploit_epochs: int = 150
    exploit_batch: int = 32
    lr_exploiter: float = 1e-4
    schedule_modulus: int = 5
    em_rounds: int = 10
    em_steps: int = 10
    em_step_size: float | None = None
    jpeg_quality: int = 60
    blur_kernel: int = 3
    blur_sigma: float = 0.8
    adv_epsilon: float = 4.0 / 255.0
    adv_steps: int = 7
    adv_step_size: float = 1.0 / 255.0
    seed: RngSeed = RngSeed(0)

    def echo(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "band_width": self.band.band_width,
            "lbp_neighbors": self.lbp.neighbors,
            "floor": self.floor,
            "net_depth": self.net_depth,
            "net_base": self.net_base,
            "protect_epochs": self.protect_epochs,
            "exploit_epochs": self.exploit_epochs,
            "seed": self.seed.seed,
        }


def protect_training_split(train_samples, protector: str, mcfg: MatrixConfig):
    """Train a protector and protect the training split.

    Returns ``(protected_samples, full_records, state, log)`` where
    ``protected_samples`` feed exploiter training and ``full_records``
    keep the per-sample perturbations.
    """
    from .train import TrainConfig, train_em, train_umed

    channels = train_samples[0].image.shape[2]
    if protector == "none":
        state = ProtectorState(kind="none", epsilon=mcfg.epsilon)
        log = []
    elif protector == "umed":
        cfg = TrainConfig(
            epochs=mcfg.protect_epochs,
            batch_size=mcfg.protect_batch,
            lr_surrogate=mcfg.lr_surrogate,
            lr_generator=mcfg.lr_generator,
            schedule_modulus=mcfg.schedule_modulus,
            seed=mcfg.seed.spawn("protect", "umed"),
        )
        state, log = train_umed(
            train_samples,
            cfg,
            surrogate_spec=_net_spec(mcfg, "unet", channels, 1),
            gen_contour_spec=_net_spec(mcfg, "unet_cdc_encoder", channels, channels),
            gen_texture_spec=_net_spec(mcfg, "unet", channels, channels),
            band=mcfg.band,
            lbp=mcfg.lbp,
            epsilon=mcfg.epsilon,
            floor=mcfg.floor,
        )
    elif protector == "em":
        cfg = TrainConfig(
            epochs=mcfg.protect_epochs,
            batch_size=mcfg.protect_batch,
            lr_surrogate=mcfg.lr_surrogate,
            seed=mcfg.seed.spawn("protect", "em"),
        )
        state, log = train_em(
            train_samples,
            cfg,
            surrogate_spec=_net_spec(mcfg, "unet", channels, 1),
            epsilon=mcfg.epsilon,
            rounds=mcfg.em_rounds,
            pgd_steps=mcfg.em_steps,
            pgd_step_size=mcfg.em_step_size,
        )
    else:
        raise ConfigurationError(f"unknown protector {protector!r}")

    records = [protect_image(s.image, s.mask, state, s.sample_id) for s in train_samples]
    protected = [
        Sample(rec.image_p, rec.mask, s.sample_id)
        for rec, s in zip(records, train_samples)
    ]
    return protected, records, state, log


def _net_spec(mcfg: MatrixConfig, arch: str, in_channels: int, out_channels: int) -> NetSpec:
    return NetSpec(
        arch=arch,
        depth=mcfg.net_depth,
        base_channels=mcfg.net_base,
        in_channels=in_channels,
        out_channels=out_channels,
    )


def evaluate_segmenter(model, samples: list[Sample]):
    """Per-sample DSC/Jaccard of a frozen model on clean test samples."""
    dscs, jacs = [], []
    for s in samples:
        logits = net_forward(model, s.image[None].astype(np.float32))[0, ..., 0]
        pred = (logits >= 0.0).astype(np.uint8)  # sigmoid >= 0.5
        dscs.append(dsc(pred, s.mask))
        jacs.append(jaccard(pred, s.mask))
    return dscs, jacs


def invisibility_metrics(protected_images, clean_images):
    """Per-sample PSNR/SSIM between protected and clean training images."""
    psnrs = [psnr(p, c) for p, c in zip(protected_images, clean_images)]
    ssims = [ssim(p, c) for p, c in zip(protected_images, clean_images)]
    return psnrs, ssims


def _mean_psnr(values):
    if any(math.isinf(v) for v in values):
        return math.inf
    return float(np.mean(values)) if values else None


def run_matrix(
    protectors: list[str],
    exploiters: list[str],
    defenses: list[str],
    train_samples: list[Sample],
    test_samples: list[Sample],
    mcfg: MatrixConfig,
) -> list[MetricReport]:
    """Evaluate the full cross-product; failed cells are recorded, not fatal."""
    from .train import TrainConfig, train_exploiter, train_exploiter_adversarial

    reports = []
    for protector in protectors:
        try:
            protected, _, _, _ = protect_training_split(train_samples, protector, mcfg)
            inv_psnr, inv_ssim = invisibility_metrics(
                [p.image for p in protected], [s.image for s in train_samples]
            )
        except Exception as exc:  # record and skip the whole protector row
            for exploiter in exploiters:
                for defense in defenses:
                    reports.append(
                        MetricReport(
                            protector, exploiter, defense, failed=True, error=str(exc)
                        )
                    )
            continue

        for exploiter in exploiters:
            for defense in defenses:
                report = MetricReport(
                    protector,
                    exploiter,
                    defense,
                    psnr_mean=_mean_psnr(inv_psnr),
                    ssim_mean=float(np.mean(inv_ssim)),
                    psnr_per_sample=inv_psnr,
                    ssim_per_sample=inv_ssim,
                    n_train=len(train_samples),
                    n_test=len(test_samples),
                    config_echo=mcfg.echo(),
                )
                try:
                    fit_samples = protected
                    if defense in INPUT_DEFENSES:
                        params = (
                            {"quality": mcfg.jpeg_quality}
                            if defense == "jpeg"
                            else {"kernel_size": mcfg.blur_kernel, "sigma": mcfg.blur_sigma}
                        )
                        fit_samples = apply_input_defense(protected, defense, **params)
                    elif defense not in ("none", "adv_training"):
                        raise ConfigurationError(f"unknown defense {defense!r}")

                    spec = _net_spec(mcfg, exploiter, train_samples[0].image.shape[2], 1)
                    cfg = TrainConfig(
                        epochs=mcfg.exploit_epochs,
                        batch_size=mcfg.exploit_batch,
                        lr_exploiter=mcfg.lr_exploiter,
                        seed=mcfg.seed.spawn("exploit"),
                    )
                    if defense == "adv_training":
                        model, _ = train_exploiter_adversarial(
                            fit_samples,
                            spec,
                            cfg,
                            adv_epsilon=mcfg.adv_epsilon,
                            adv_steps=mcfg.adv_steps,
                            adv_step_size=mcfg.adv_step_size,
                        )
                    else:
                        model, _ = train_exploiter(fit_samples, spec, cfg)
                    dscs, jacs = evaluate_segmenter(model, test_samples)
                    report.dsc_mean = float(np.mean(dscs))
                    report.jaccard_mean = float(np.mean(jacs))
                    report.dsc_per_sample = dscs
                    report.jaccard_per_sample = jacs
                except Exception as exc:
                    report.failed = True
                    report.error = str(exc)
                reports.append(report)
    return reports
