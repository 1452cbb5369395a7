"""Separate 'task too easy' from 'protector too weak'.

Trains an exploiter on a hand-made, maximally learnable bounded
perturbation (checkerboard sign pattern on band + interior at the full
budget). If even this fails to poison, the synthetic task itself is too
easy for the budget; if it poisons, the protector training is the weak
link.
"""

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


def hand_poison(samples, eps=EPS):
    out = []
    for s in samples:
        band = extract_contour_band(s.mask, ContourBandSpec(1))
        interior = interior_map(s.mask, band)
        region = ((band | interior) > 0).astype(np.float32)
        r, c = np.meshgrid(np.arange(s.mask.shape[0]), np.arange(s.mask.shape[1]),
                           indexing="ij")
        sign = np.where((r + c) % 2 == 0, 1.0, -1.0).astype(np.float32)
        delta = (eps * sign * region)[..., None]
        img = np.clip(s.image + delta, 0.0, 1.0).astype(np.float32)
        out.append(Sample(img, s.mask, s.sample_id))
    return out


def main():
    noise = float(sys.argv[1]) if len(sys.argv) > 1 else 0.005
    contrast_lo = float(sys.argv[2]) if len(sys.argv) > 2 else 0.10
    contrast_hi = float(sys.argv[3]) if len(sys.argv) > 3 else 0.25
    epochs = int(sys.argv[4]) if len(sys.argv) > 4 else 40

    spec = SynthSpec(n_samples=200, size=64, noise_level=noise,
                     boundary_contrast=(contrast_lo, contrast_hi), seed=RngSeed(11))
    train, test = generate_synthetic(spec)
    net = NetSpec(arch="unet", depth=3, base_channels=8)
    cfg = TrainConfig(epochs=epochs, batch_size=16, lr_exploiter=1e-3, seed=RngSeed(101))

    t0 = time.time()
    model, log = train_exploiter(train, net, cfg)
    dscs, _ = evaluate_segmenter(model, test)
    print(f"noise={noise} contrast=[{contrast_lo},{contrast_hi}] epochs={epochs}")
    print(f"clean-trained:  DSC {np.mean(dscs):.3f}  last_loss {log[-1]['loss']:.3f}  {time.time()-t0:.0f}s",
          flush=True)

    t0 = time.time()
    model, log = train_exploiter(hand_poison(train), net, cfg)
    dscs, _ = evaluate_segmenter(model, test)
    print(f"hand-poisoned:  DSC {np.mean(dscs):.3f}  last_loss {log[-1]['loss']:.3f}  {time.time()-t0:.0f}s",
          flush=True)


if __name__ == "__main__":
    main()
