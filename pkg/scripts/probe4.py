"""Probe UMed bi-level hyperparameters for desk-scale poisoning."""

import sys
import time

import numpy as np

from segshield.core import RngSeed, Sample
from segshield.dataio import SynthSpec, generate_synthetic
from segshield.evaluation import evaluate_segmenter, invisibility_metrics
from segshield.nets import NetSpec
from segshield.perturb import protect_image
from segshield.train import TrainConfig, train_exploiter, train_umed

EPS = 4.0 / 255.0
DATA = dict(noise_level=0.0, boundary_contrast=(0.05, 0.12), texture_amplitude=0.06)


def spec_for(arch, depth=3, base=8):
    return NetSpec(arch=arch, depth=depth, base_channels=base, in_channels=1, out_channels=1)


def main():
    umed_epochs = int(sys.argv[1])
    gen_depth = int(sys.argv[2])
    lr_gen = float(sys.argv[3])
    lr_surr = float(sys.argv[4])
    exp_epochs = int(sys.argv[5]) if len(sys.argv) > 5 else 60

    train, test = generate_synthetic(SynthSpec(n_samples=200, size=64, seed=RngSeed(11), **DATA))

    t0 = time.time()
    cfg = TrainConfig(epochs=umed_epochs, batch_size=16, lr_surrogate=lr_surr,
                      lr_generator=lr_gen, seed=RngSeed(202))
    state, log = train_umed(train, cfg,
                            surrogate_spec=spec_for("unet"),
                            gen_contour_spec=spec_for("unet_cdc_encoder", depth=gen_depth),
                            gen_texture_spec=spec_for("unet", depth=gen_depth),
                            epsilon=EPS)
    gl = [e["loss"] for e in log if e["updated_component"] == "generators"]
    sl = [e["loss"] for e in log if e["updated_component"] == "surrogate"]
    print(f"umed e={umed_epochs} gd={gen_depth} lrg={lr_gen} lrs={lr_surr}: "
          f"{time.time()-t0:.0f}s gen {gl[0]:.3f}->{gl[-1]:.3f} surr {sl[0]:.3f}->{sl[-1]:.3f}",
          flush=True)

    recs = [protect_image(s.image, s.mask, state, s.sample_id) for s in train]
    umed_train = [Sample(r.image_p, r.mask, r.sample_id) for r in recs]
    p, s = invisibility_metrics([x.image for x in umed_train], [x.image for x in train])

    ecfg = TrainConfig(epochs=exp_epochs, batch_size=16, lr_exploiter=1e-3, seed=RngSeed(101))
    model, elog = train_exploiter(umed_train, spec_for("unet"), ecfg)
    dscs, _ = evaluate_segmenter(model, test)
    print(f"  -> protected-trained unet DSC {np.mean(dscs):.3f} "
          f"(train loss {elog[0]['loss']:.3f}->{elog[-1]['loss']:.3f}) "
          f"psnr {np.mean(p):.2f} ssim {np.mean(s):.4f}", flush=True)


if __name__ == "__main__":
    main()
