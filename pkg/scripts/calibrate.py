"""Desk-scale calibration: measure the protection gap end to end.

Not part of the package or test suite; used to pick the acceptance-run
hyperparameters honestly before freezing them in tests.
"""

import json
import sys
import time

import numpy as np

from segshield.core import RngSeed
from segshield.dataio import SynthSpec, generate_synthetic
from segshield.evaluation import (
    apply_input_defense,
    evaluate_segmenter,
    invisibility_metrics,
)
from segshield.nets import NetSpec
from segshield.perturb import protect_image
from segshield.core import Sample
from segshield.train import (
    TrainConfig,
    train_em,
    train_exploiter,
    train_exploiter_adversarial,
    train_umed,
)

EPS = 4.0 / 255.0


def spec_for(arch, channels=1, out=1, depth=3, base=8):
    return NetSpec(arch=arch, depth=depth, base_channels=base,
                   in_channels=channels, out_channels=out)


def protected_set(train, state):
    recs = [protect_image(s.image, s.mask, state, s.sample_id) for s in train]
    return [Sample(r.image_p, r.mask, r.sample_id) for r in recs]


def fit_and_eval(train, test, arch, epochs, seed, adversarial=False):
    cfg = TrainConfig(epochs=epochs, batch_size=16, lr_exploiter=1e-3,
                      seed=RngSeed(seed))
    t0 = time.time()
    if adversarial:
        model, log = train_exploiter_adversarial(train, spec_for(arch), cfg,
                                                 adv_epsilon=EPS, adv_steps=7,
                                                 adv_step_size=1 / 255)
    else:
        model, log = train_exploiter(train, spec_for(arch), cfg)
    dscs, jacs = evaluate_segmenter(model, test)
    return {
        "dsc": float(np.mean(dscs)), "jaccard": float(np.mean(jacs)),
        "first_loss": log[0]["loss"], "last_loss": log[-1]["loss"],
        "seconds": round(time.time() - t0, 1),
    }


def main():
    results = {}
    exp_epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 40
    umed_epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 50
    lr_gen = float(sys.argv[3]) if len(sys.argv) > 3 else 1e-3

    train, test = generate_synthetic(SynthSpec(n_samples=200, size=64, seed=RngSeed(11)))
    print(f"data: {len(train)} train, {len(test)} test", flush=True)

    results["clean_unet"] = fit_and_eval(train, test, "unet", exp_epochs, seed=101)
    print("clean unet:", results["clean_unet"], flush=True)

    results["clean_attn"] = fit_and_eval(train, test, "unet_attn_lite", exp_epochs, seed=101)
    print("clean attn:", results["clean_attn"], flush=True)

    t0 = time.time()
    umed_cfg = TrainConfig(epochs=umed_epochs, batch_size=16, lr_surrogate=1e-3,
                           lr_generator=lr_gen, seed=RngSeed(202))
    umed_state, umed_log = train_umed(
        train, umed_cfg,
        surrogate_spec=spec_for("unet"),
        gen_contour_spec=spec_for("unet_cdc_encoder", out=1),
        gen_texture_spec=spec_for("unet", out=1),
        epsilon=EPS,
    )
    print(f"umed trained in {time.time()-t0:.0f}s; gen-epoch losses: "
          f"{[round(e['loss'],3) for e in umed_log if e['updated_component']=='generators'][::8]}",
          flush=True)
    umed_train = protected_set(train, umed_state)
    psnr_u, ssim_u = invisibility_metrics([s.image for s in umed_train],
                                          [s.image for s in train])
    results["umed_invisibility"] = {"psnr": float(np.mean(psnr_u)),
                                    "ssim": float(np.mean(ssim_u))}
    print("umed invisibility:", results["umed_invisibility"], flush=True)

    results["umed_unet"] = fit_and_eval(umed_train, test, "unet", exp_epochs, seed=101)
    print("umed-protected unet:", results["umed_unet"], flush=True)

    results["umed_attn"] = fit_and_eval(umed_train, test, "unet_attn_lite", exp_epochs, seed=101)
    print("umed-protected attn:", results["umed_attn"], flush=True)

    t0 = time.time()
    em_cfg = TrainConfig(epochs=1, batch_size=16, lr_surrogate=1e-3, seed=RngSeed(303))
    em_state, _ = train_em(train, em_cfg, surrogate_spec=spec_for("unet"),
                           epsilon=EPS, rounds=10, pgd_steps=10)
    print(f"em trained in {time.time()-t0:.0f}s", flush=True)
    em_train = protected_set(train, em_state)
    psnr_e, ssim_e = invisibility_metrics([s.image for s in em_train],
                                          [s.image for s in train])
    results["em_invisibility"] = {"psnr": float(np.mean(psnr_e)),
                                  "ssim": float(np.mean(ssim_e))}
    print("em invisibility:", results["em_invisibility"], flush=True)

    results["em_unet"] = fit_and_eval(em_train, test, "unet", exp_epochs, seed=101)
    print("em-protected unet:", results["em_unet"], flush=True)

    jpeg_train = apply_input_defense(umed_train, "jpeg", quality=60)
    results["umed_jpeg_unet"] = fit_and_eval(jpeg_train, test, "unet", exp_epochs, seed=101)
    print("umed+jpeg unet:", results["umed_jpeg_unet"], flush=True)

    results["umed_adv_unet"] = fit_and_eval(umed_train, test, "unet", exp_epochs,
                                            seed=101, adversarial=True)
    print("umed+advtrain unet:", results["umed_adv_unet"], flush=True)

    with open("/tmp/calibration.json", "w") as fh:
        json.dump(results, fh, indent=2)
    print("saved /tmp/calibration.json", flush=True)


if __name__ == "__main__":
    main()
