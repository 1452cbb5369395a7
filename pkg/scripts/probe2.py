"""Grid-probe synthetic-data hardness vs hand-made shortcut efficacy."""

import itertools
import sys
import time

import numpy as np

from segshield.core import RngSeed, Sample
from segshield.dataio import SynthSpec, generate_synthetic
from segshield.evaluation import evaluate_segmenter
from segshield.maskgeom import ContourBandSpec, extract_contour_band, interior_map
from segshield.nets import NetSpec
from segshield.train import TrainConfig, train_exploiter

EPS = 4.0 / 255.0


def hand_poison(samples, pattern="stripes", eps=EPS):
    out = []
    for s in samples:
        band = extract_contour_band(s.mask, ContourBandSpec(1))
        interior = interior_map(s.mask, band)
        region = ((band | interior) > 0).astype(np.float32)
        h, w = s.mask.shape
        r, c = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        if pattern == "checker":
            sign = np.where((r + c) % 2 == 0, 1.0, -1.0)
        else:  # diagonal stripes, ~8 px period
            sign = np.sign(np.sin(2 * np.pi * (r + c) / 8.0) + 1e-9)
        delta = (eps * sign.astype(np.float32) * region)[..., None]
        img = np.clip(s.image + delta, 0.0, 1.0).astype(np.float32)
        out.append(Sample(img, s.mask, s.sample_id))
    return out


def run(spec_kw, epochs, pattern):
    spec = SynthSpec(n_samples=200, size=64, seed=RngSeed(11), **spec_kw)
    train, test = generate_synthetic(spec)
    net = NetSpec(arch="unet", depth=3, base_channels=8)
    cfg = TrainConfig(epochs=epochs, batch_size=16, lr_exploiter=1e-3, seed=RngSeed(101))

    model, log = train_exploiter(train, net, cfg)
    clean_dsc = float(np.mean(evaluate_segmenter(model, test)[0]))
    model, logp = train_exploiter(hand_poison(train, pattern), net, cfg)
    poison_dsc = float(np.mean(evaluate_segmenter(model, test)[0]))
    print(
        f"{spec_kw} epochs={epochs} pattern={pattern}: "
        f"clean {clean_dsc:.3f} (loss {log[-1]['loss']:.3f}) | "
        f"poisoned {poison_dsc:.3f} (loss {logp[-1]['loss']:.3f})",
        flush=True,
    )


if __name__ == "__main__":
    grids = [
        (dict(noise_level=0.0, boundary_contrast=(0.03, 0.08), texture_amplitude=0.04), 40, "stripes"),
        (dict(noise_level=0.0, boundary_contrast=(0.03, 0.08), texture_amplitude=0.04), 40, "checker"),
        (dict(noise_level=0.0, boundary_contrast=(0.05, 0.12), texture_amplitude=0.06), 40, "stripes"),
    ]
    for spec_kw, epochs, pattern in grids:
        run(spec_kw, epochs, pattern)
