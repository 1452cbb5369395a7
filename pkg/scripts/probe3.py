"""Full pipeline probe on the weak-cue data design."""

import json
import sys
import time

import numpy as np

from segshield.core import RngSeed, Sample
from segshield.dataio import SynthSpec, generate_synthetic
from segshield.evaluation import evaluate_segmenter, invisibility_metrics
from segshield.nets import NetSpec
from segshield.perturb import protect_image
from segshield.train import TrainConfig, train_em, train_exploiter, train_umed

EPS = 4.0 / 255.0
DATA = dict(noise_level=0.0, boundary_contrast=(0.05, 0.12), texture_amplitude=0.06)


def spec_for(arch, out=1):
    return NetSpec(arch=arch, depth=3, base_channels=8, in_channels=1, out_channels=out)


def protected_set(train, state):
    recs = [protect_image(s.image, s.mask, state, s.sample_id) for s in train]
    return [Sample(r.image_p, r.mask, r.sample_id) for r in recs]


def fit_eval(train, test, arch, epochs, seed=101):
    cfg = TrainConfig(epochs=epochs, batch_size=16, lr_exploiter=1e-3, seed=RngSeed(seed))
    model, log = train_exploiter(train, spec_for(arch), cfg)
    dscs, _ = evaluate_segmenter(model, test)
    return float(np.mean(dscs)), log[-1]["loss"]


def main():
    exp_epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 60
    umed_epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 150

    train, test = generate_synthetic(SynthSpec(n_samples=200, size=64, seed=RngSeed(11), **DATA))

    dsc, loss = fit_eval(train, test, "unet", exp_epochs)
    print(f"clean unet @{exp_epochs}ep: DSC {dsc:.3f} loss {loss:.3f}", flush=True)

    t0 = time.time()
    umed_cfg = TrainConfig(epochs=umed_epochs, batch_size=16, lr_surrogate=1e-3,
                           lr_generator=1e-3, seed=RngSeed(202))
    state, log = train_umed(train, umed_cfg,
                            surrogate_spec=spec_for("unet"),
                            gen_contour_spec=spec_for("unet_cdc_encoder"),
                            gen_texture_spec=spec_for("unet"),
                            epsilon=EPS)
    gen_losses = [e["loss"] for e in log if e["updated_component"] == "generators"]
    print(f"umed {umed_epochs}ep in {time.time()-t0:.0f}s; "
          f"gen losses {gen_losses[0]:.3f} -> {gen_losses[-1]:.3f}", flush=True)

    umed_train = protected_set(train, state)
    p, s = invisibility_metrics([x.image for x in umed_train], [x.image for x in train])
    print(f"umed invisibility: psnr {np.mean(p):.2f} ssim {np.mean(s):.4f}", flush=True)

    dsc, loss = fit_eval(umed_train, test, "unet", exp_epochs)
    print(f"umed-protected unet: DSC {dsc:.3f} loss {loss:.3f}", flush=True)

    t0 = time.time()
    em_cfg = TrainConfig(epochs=1, batch_size=16, lr_surrogate=1e-3, seed=RngSeed(303))
    em_state, _ = train_em(train, em_cfg, surrogate_spec=spec_for("unet"),
                           epsilon=EPS, rounds=10, pgd_steps=10)
    em_train = protected_set(train, em_state)
    p, s = invisibility_metrics([x.image for x in em_train], [x.image for x in train])
    print(f"em in {time.time()-t0:.0f}s; invisibility psnr {np.mean(p):.2f} ssim {np.mean(s):.4f}",
          flush=True)

    dsc, loss = fit_eval(em_train, test, "unet", exp_epochs)
    print(f"em-protected unet: DSC {dsc:.3f} loss {loss:.3f}", flush=True)


if __name__ == "__main__":
    main()
