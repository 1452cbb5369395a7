"""Command-line surface: synth, protect, train, eval, defend, report.

Stages communicate only through on-disk artifacts, so any stage can be
rerun in isolation. Configuration is a nested document assembled from
defaults, an optional config file, ``SEGSHIELD_``-prefixed environment
variables, and dotted command-line overrides, in increasing precedence:

    segshield synth --out data/clean --data.n_samples 200
    segshield protect --data data/clean --out data/umed --protect.kind umed
    SEGSHIELD_TRAIN__EPOCHS=40 segshield train --data data/umed --out runs/a

The effective config of every run is echoed into its output directory.
Exit codes: 0 success, 2 user/config error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from .core import RngSeed
from .dataio import (
    SynthSpec,
    generate_synthetic,
    load_split,
    parse_budget,
    save_dataset,
    save_protected,
)
from .errors import ConfigurationError, NonFiniteLossError, SegShieldError
from .evaluation import (
    MetricReport,
    apply_input_defense,
    evaluate_segmenter,
    flatten_report_rows,
    invisibility_metrics,
    _mean_psnr,
)
from .maskgeom import ContourBandSpec
from .nets import NetSpec, load_checkpoint, save_checkpoint
from .perturb import ProtectorState, protect_image
from .texture import LbpConfig
from .train import (
    TrainConfig,
    train_em,
    train_exploiter,
    train_exploiter_adversarial,
    train_umed,
    write_log,
)

ENV_PREFIX = "SEGSHIELD_"

DEFAULTS = {
    "seed": 0,
    "data": {
        "n_samples": 200,
        "size": 64,
        "shape_family": "blobs",
        "interior_freq": [8.0, 14.0],
        "background_freq": [2.0, 5.0],
        "texture_amplitude": 0.08,
        "boundary_contrast": [0.10, 0.25],
        "noise_level": 0.005,
        "train_fraction": 0.8,
        "bit_depth": 16,
    },
    "protect": {
        "kind": "umed",  # umed | em | none
        "epsilon": "4/255",
        "band_width": 1,
        "floor": 0.1,
        "epochs": 100,
        "batch_size": 16,
        "lr_surrogate": 1e-4,
        "lr_generator": 1e-4,
        "schedule_modulus": 5,
        "em_rounds": 10,
        "em_steps": 10,
        "em_step_size": None,
        "net_depth": 4,
        "net_base": 16,
        "bit_depth": 16,
        "save_deltas": True,
        "override_precision": False,
    },
    "train": {
        "arch": "unet",
        "net_depth": 4,
        "net_base": 16,
        "epochs": 150,
        "batch_size": 32,
        "lr": 1e-4,
        "adversarial": False,
        "adv_epsilon": "4/255",
        "adv_steps": 7,
        "adv_step_size": "1/255",
    },
    "defense": {
        "kind": "jpeg",  # jpeg | gaussian_blur
        "jpeg_quality": 60,
        "blur_kernel": 3,
        "blur_sigma": 0.8,
    },
}


# ------------------------------------------------------------------ config


def _set_path(config: dict, dotted: str, value) -> None:
    node = config
    parts = dotted.split(".")
    for part in parts[:-1]:
        if not isinstance(node, dict) or part not in node:
            raise ConfigurationError(f"unknown config key {dotted!r}")
        node = node[part]
    if not isinstance(node, dict) or parts[-1] not in node:
        raise ConfigurationError(f"unknown config key {dotted!r}")
    node[parts[-1]] = value


def _merge(config: dict, incoming: dict, prefix="") -> None:
    for key, value in incoming.items():
        dotted = f"{prefix}{key}"
        if key not in config:
            raise ConfigurationError(f"unknown config key {dotted!r}")
        if isinstance(config[key], dict) and isinstance(value, dict):
            _merge(config[key], value, prefix=f"{dotted}.")
        elif isinstance(config[key], dict):
            raise ConfigurationError(f"config key {dotted!r} must be a section")
        else:
            config[key] = value


def _env_overrides() -> list[tuple[str, object]]:
    found = []
    for name, raw in sorted(os.environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        dotted = name[len(ENV_PREFIX):].lower().replace("__", ".")
        found.append((dotted, yaml.safe_load(raw)))
    return found


def build_config(config_file=None, overrides=()) -> dict:
    """defaults < config file < environment < command line."""
    config = copy.deepcopy(DEFAULTS)
    if config_file:
        path = Path(config_file)
        if not path.exists():
            raise ConfigurationError(f"config file not found: {path}")
        with open(path, "r", encoding="utf-8") as fh:
            loaded = yaml.safe_load(fh) or {}
        if not isinstance(loaded, dict):
            raise ConfigurationError(f"config file {path} must hold a mapping")
        _merge(config, loaded)
    for dotted, value in _env_overrides():
        _set_path(config, dotted, value)
    for dotted, value in overrides:
        _set_path(config, dotted, value)
    return config


def _parse_overrides(extras: list[str]) -> list[tuple[str, object]]:
    pairs = []
    i = 0
    while i < len(extras):
        token = extras[i]
        if not token.startswith("--"):
            raise ConfigurationError(f"unexpected argument {token!r}")
        key = token[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
        else:
            if i + 1 >= len(extras):
                raise ConfigurationError(f"override {token!r} is missing a value")
            raw = extras[i + 1]
            i += 1
        pairs.append((key, yaml.safe_load(raw)))
        i += 1
    return pairs


def _echo_config(out_dir: Path, config: dict, command: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, "config": config}
    with open(out_dir / "effective_config.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def _seed(config) -> RngSeed:
    return RngSeed(int(config["seed"]))


# ---------------------------------------------------------------- commands


def cmd_synth(args, config) -> int:
    data = config["data"]
    spec = SynthSpec(
        n_samples=int(data["n_samples"]),
        size=int(data["size"]),
        shape_family=data["shape_family"],
        interior_freq=tuple(data["interior_freq"]),
        background_freq=tuple(data["background_freq"]),
        texture_amplitude=float(data["texture_amplitude"]),
        boundary_contrast=tuple(data["boundary_contrast"]),
        noise_level=float(data["noise_level"]),
        train_fraction=float(data["train_fraction"]),
        seed=_seed(config).spawn("synth"),
    )
    train, test = generate_synthetic(spec)
    out = Path(args.out)
    _echo_config(out, config, "synth")
    save_dataset(out, train, test, bit_depth=int(data["bit_depth"]))
    print(f"wrote {len(train)} train / {len(test)} test samples to {out}")
    return 0


def _protect_train_config(config) -> TrainConfig:
    p = config["protect"]
    return TrainConfig(
        epochs=int(p["epochs"]),
        batch_size=int(p["batch_size"]),
        lr_surrogate=float(p["lr_surrogate"]),
        lr_generator=float(p["lr_generator"]),
        schedule_modulus=int(p["schedule_modulus"]),
        seed=_seed(config).spawn("protect"),
    )


def cmd_protect(args, config) -> int:
    p = config["protect"]
    train_samples = load_split(args.data, "train")
    test_samples = load_split(args.data, "test")
    channels = train_samples[0].image.shape[2]
    epsilon = parse_budget(p["epsilon"])
    band = ContourBandSpec(int(p["band_width"]))
    lbp = LbpConfig()
    out = Path(args.out)
    _echo_config(out, config, "protect")

    def spec(arch, out_channels):
        return NetSpec(
            arch=arch,
            depth=int(p["net_depth"]),
            base_channels=int(p["net_base"]),
            in_channels=channels,
            out_channels=out_channels,
        )

    log = []
    if p["kind"] == "none":
        state = ProtectorState(kind="none", epsilon=epsilon, band=band, lbp=lbp)
    elif p["kind"] == "umed":
        state, log = train_umed(
            train_samples,
            _protect_train_config(config),
            surrogate_spec=spec("unet", 1),
            gen_contour_spec=spec("unet_cdc_encoder", channels),
            gen_texture_spec=spec("unet", channels),
            band=band,
            lbp=lbp,
            epsilon=epsilon,
            floor=float(p["floor"]),
        )
    elif p["kind"] == "em":
        step = p["em_step_size"]
        state, log = train_em(
            train_samples,
            _protect_train_config(config),
            surrogate_spec=spec("unet", 1),
            epsilon=epsilon,
            rounds=int(p["em_rounds"]),
            pgd_steps=int(p["em_steps"]),
            pgd_step_size=None if step is None else parse_budget(step),
        )
    else:
        raise ConfigurationError(f"unknown protector kind {p['kind']!r}")

    records = [
        protect_image(s.image, s.mask, state, s.sample_id) for s in train_samples
    ]
    save_protected(
        records,
        state,
        out,
        bit_depth=int(p["bit_depth"]),
        test_samples=test_samples,
        save_deltas=bool(p["save_deltas"]),
        override_precision=bool(p["override_precision"]),
        extra_meta={"seed": int(config["seed"])},
    )
    write_log(out / "train_log.jsonl", log)
    if state.kind == "umed":
        save_checkpoint(out / "gen_contour.npz", state.gen_contour, state.gen_contour_spec)
        save_checkpoint(out / "gen_texture.npz", state.gen_texture, state.gen_texture_spec)
    print(f"protected {len(records)} training samples with {state.kind} -> {out}")
    return 0


def cmd_train(args, config) -> int:
    t = config["train"]
    samples = load_split(args.data, "train")
    channels = samples[0].image.shape[2]
    spec = NetSpec(
        arch=t["arch"],
        depth=int(t["net_depth"]),
        base_channels=int(t["net_base"]),
        in_channels=channels,
        out_channels=1,
    )
    cfg = TrainConfig(
        epochs=int(t["epochs"]),
        batch_size=int(t["batch_size"]),
        lr_exploiter=float(t["lr"]),
        seed=_seed(config).spawn("train"),
    )
    out = Path(args.out)
    _echo_config(out, config, "train")
    if bool(t["adversarial"]):
        model, log = train_exploiter_adversarial(
            samples,
            spec,
            cfg,
            adv_epsilon=parse_budget(t["adv_epsilon"]),
            adv_steps=int(t["adv_steps"]),
            adv_step_size=parse_budget(t["adv_step_size"]),
        )
    else:
        model, log = train_exploiter(samples, spec, cfg)
    save_checkpoint(out / "model.npz", model, spec)
    write_log(out / "train_log.jsonl", log)
    print(f"trained {spec.arch} for {cfg.epochs} epochs -> {out / 'model.npz'}")
    return 0


def cmd_eval(args, config) -> int:
    model, spec = load_checkpoint(args.model)
    test_samples = load_split(args.data, "test")
    dscs, jacs = evaluate_segmenter(model, test_samples)

    protector = "none"
    psnr_vals, ssim_vals = [], []
    if args.protected:
        manifest_path = Path(args.protected) / "manifest.json"
        if manifest_path.exists():
            manifest = json.loads(manifest_path.read_text())
            protector = manifest.get("protector", {}).get("kind", "none")
        clean_train = load_split(args.data, "train")
        prot_train = load_split(args.protected, "train")
        clean_by_id = {s.sample_id: s for s in clean_train}
        pairs = [
            (p.image, clean_by_id[p.sample_id].image)
            for p in prot_train
            if p.sample_id in clean_by_id
        ]
        psnr_vals, ssim_vals = invisibility_metrics(
            [a for a, _ in pairs], [b for _, b in pairs]
        )

    report = MetricReport(
        protector=protector,
        exploiter=spec.arch,
        defense=args.defense_label,
        dsc_mean=float(np.mean(dscs)),
        jaccard_mean=float(np.mean(jacs)),
        psnr_mean=_mean_psnr(psnr_vals) if psnr_vals else None,
        ssim_mean=float(np.mean(ssim_vals)) if ssim_vals else None,
        dsc_per_sample=dscs,
        jaccard_per_sample=jacs,
        psnr_per_sample=psnr_vals,
        ssim_per_sample=ssim_vals,
        n_test=len(test_samples),
        n_train=len(psnr_vals),
        config_echo={"seed": int(config["seed"])},
    )
    out = Path(args.out)
    _echo_config(out, config, "eval")
    with open(out / "metrics.json", "w", encoding="utf-8") as fh:
        json.dump(report.to_json_dict(), fh, indent=2, sort_keys=True)
    (out / "done").write_text("done\n")
    msg = f"DSC {report.dsc_mean:.4f}  Jaccard {report.jaccard_mean:.4f}"
    if report.psnr_mean is not None:
        shown = "inf" if report.psnr_mean == float("inf") else f"{report.psnr_mean:.2f}"
        msg += f"  PSNR {shown}  SSIM {report.ssim_mean:.4f}"
    print(msg)
    return 0


def cmd_defend(args, config) -> int:
    d = config["defense"]
    train_samples = load_split(args.data, "train")
    test_samples = load_split(args.data, "test")
    if d["kind"] == "jpeg":
        defended = apply_input_defense(
            train_samples, "jpeg", quality=int(d["jpeg_quality"])
        )
    elif d["kind"] == "gaussian_blur":
        defended = apply_input_defense(
            train_samples,
            "gaussian_blur",
            kernel_size=int(d["blur_kernel"]),
            sigma=float(d["blur_sigma"]),
        )
    else:
        raise ConfigurationError(f"unknown defense kind {d['kind']!r}")
    out = Path(args.out)
    _echo_config(out, config, "defend")
    save_dataset(
        out,
        defended,
        test_samples,
        bit_depth=16,
        extra_meta={"defense": {k: d[k] for k in d}},
    )
    print(f"applied {d['kind']} to {len(defended)} training samples -> {out}")
    return 0


def _load_cell_reports(cells_dir: Path) -> list[MetricReport]:
    reports = []
    for metrics_file in sorted(cells_dir.glob("**/metrics.json")):
        if not (metrics_file.parent / "done").exists():
            continue  # producer not finished; skip silently
        data = json.loads(metrics_file.read_text())
        psnr_mean = data.get("psnr")
        if data.get("psnr_infinite"):
            psnr_mean = float("inf")
        reports.append(
            MetricReport(
                protector=data.get("protector", "none"),
                exploiter=data.get("exploiter", "unknown"),
                defense=data.get("defense", "none"),
                dsc_mean=data.get("dsc"),
                jaccard_mean=data.get("jaccard"),
                psnr_mean=psnr_mean,
                ssim_mean=data.get("ssim"),
                failed=data.get("failed", False),
                error=data.get("error", ""),
            )
        )
    return reports


def cmd_report(args, config) -> int:
    cells_dir = Path(args.cells)
    if not cells_dir.is_dir():
        raise ConfigurationError(f"cells directory not found: {cells_dir}")
    reports = _load_cell_reports(cells_dir)
    if not reports:
        raise ConfigurationError(f"no completed cells under {cells_dir}")
    out = Path(args.out)
    _echo_config(out, config, "report")

    rows = flatten_report_rows(reports)
    fields = ["protector", "exploiter", "defense", "metric", "value", "infinite", "failed"]
    with open(out / "matrix.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labeled = [(r.cell_id(), r.dsc_mean) for r in reports if r.dsc_mean is not None]
    if labeled:
        names, values = zip(*labeled)
        fig, ax = plt.subplots(figsize=(max(4, len(names) * 1.2), 4))
        ax.bar(range(len(names)), values, color="#4878a8")
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=45, ha="right", fontsize=8)
        ax.set_ylabel("clean-test DSC")
        ax.set_ylim(0, 1)
        fig.tight_layout()
        fig.savefig(out / "dsc_per_cell.png", metadata={"Software": "segshield"})
        plt.close(fig)
    print(f"merged {len(reports)} cells -> {out / 'matrix.csv'}")
    return 0


# ------------------------------------------------------------------- main


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="segshield",
        description="Protect segmentation datasets and verify the protection.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, **flags):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="YAML/JSON config file")
        for flag, (required, help_flag) in flags.items():
            p.add_argument(f"--{flag}", required=required, help=help_flag)
        return p

    add("synth", "generate a synthetic dataset", out=(True, "output dataset dir"))
    add(
        "protect",
        "train a protector and write the protected dataset",
        data=(True, "clean dataset dir"),
        out=(True, "protected dataset dir"),
    )
    add(
        "train",
        "train an exploiter segmenter on a dataset",
        data=(True, "(protected) dataset dir"),
        out=(True, "run output dir"),
    )
    p_eval = add(
        "eval",
        "evaluate a model on the clean test split",
        model=(True, "model checkpoint (.npz)"),
        data=(True, "clean dataset dir"),
        out=(True, "cell output dir"),
    )
    p_eval.add_argument("--protected", default=None, help="protected dataset dir for invisibility metrics")
    p_eval.add_argument("--defense-label", default="none", help="defense name recorded in the report")
    add(
        "defend",
        "apply an input defense to a dataset's training split",
        data=(True, "dataset dir"),
        out=(True, "defended dataset dir"),
    )
    add(
        "report",
        "merge completed cell metrics into CSV and plots",
        cells=(True, "directory containing cell outputs"),
        out=(True, "report output dir"),
    )
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "protect": cmd_protect,
    "train": cmd_train,
    "eval": cmd_eval,
    "defend": cmd_defend,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args, extras = parser.parse_known_args(argv)
    try:
        overrides = _parse_overrides(extras)
        config = build_config(args.config, overrides)
        return COMMANDS[args.command](args, config)
    except NonFiniteLossError as err:
        out = getattr(args, "out", None)
        if out:
            Path(out).mkdir(parents=True, exist_ok=True)
            with open(Path(out) / "failure_diagnostics.json", "w", encoding="utf-8") as fh:
                json.dump(err.diagnostics, fh, indent=2, sort_keys=True)
        print(f"error: {err}", file=sys.stderr)
        return 3
    except SegShieldError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
