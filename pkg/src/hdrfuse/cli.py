"""Command-line entry points tying the pipeline together.

Every command takes ``--config`` plus optional overrides, writes its
artifacts under the configured output directory, and drops the
effective configuration (after overrides) next to them so any run can
be reproduced from its own output folder.
"""

import argparse
import csv
import dataclasses
import sys
from pathlib import Path

import cv2
import numpy as np

from . import evaluation, rgbe, training
from .config import ConfigError, load_config
from .dataset import load_scene, read_manifest, scene_radiance
from .features import FeatureSource, load_backbone
from .imaging import mu_law
from .matching import progressive_match, single_scale_match
from .network import ModelInputs

__all__ = ["main", "run_cli"]

_FLAG_TO_FIELD = {
    "no_ms_hdr": "no_ms_hdr",
    "no_nft": "no_nft",
    "single_scale_vgg": "single_scale_vgg",
    "match_with_encoder": "match_with_encoder_features",
    "no_motion_att": "no_motion_attention",
    "no_scale_att": "no_scale_attention",
}


def _parser():
    parser = argparse.ArgumentParser(prog="hdrfuse", description="Multi-exposure HDR fusion pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("train", "optimize a model on the manifest's training scenes"),
        ("infer", "restore HDR outputs for the manifest's test scenes"),
        ("eval", "compute PSNR/SSIM metrics over the test scenes"),
        ("sweep-translation", "robustness sweep over synthetic camera shifts"),
        ("ablate", "train and compare the flag-variant networks"),
        ("match-debug", "dump the texture match field for one scene"),
    ):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", required=True, help="YAML run configuration")
        cmd.add_argument("--seed", type=int, default=None)
        cmd.add_argument("--checkpoint", default=None)
        cmd.add_argument("--manifest", default=None)
        cmd.add_argument("--out", default=None)
        cmd.add_argument("--delta-list", default=None, help="comma-separated sweep deltas")
        cmd.add_argument("--variants", default=None, help="comma-separated ablation flags")
        cmd.add_argument("--scene", default=None, help="scene directory (match-debug)")
        for flag, field_name in _FLAG_TO_FIELD.items():
            cmd.add_argument(f"--{flag.replace('_', '-')}", dest=field_name, action="store_true", default=None)
    return parser


def _apply_overrides(run, args):
    flags = {f: getattr(args, f) for f in _FLAG_TO_FIELD.values() if getattr(args, f)}
    if flags:
        run.net = run.net.with_flags(**flags)
    if args.seed is not None:
        run.train = dataclasses.replace(run.train, seed=args.seed)
    for key in ("checkpoint", "manifest", "out"):
        value = getattr(args, key)
        if value is not None:
            run.paths[key] = str(Path(value).resolve())
    if args.delta_list is not None:
        run.deltas = [int(d) for d in args.delta_list.split(",") if d != ""]
    if args.variants is not None:
        run.variants = [v for v in args.variants.split(",") if v != ""]
    return run


def _feature_source(run):
    if run.feature_kind == "backbone":
        backbone_path = run.path("backbone")
        if backbone_path is None or not backbone_path.exists():
            raise ConfigError(
                "features.source is 'backbone' but paths.backbone is missing or does not exist"
            )
        return FeatureSource("backbone", load_backbone(backbone_path), mu=run.domain.mu)
    return FeatureSource("handcrafted", mu=run.domain.mu)


def _out_dir(run, command):
    out = run.path("out") or Path("runs")
    directory = out / command
    directory.mkdir(parents=True, exist_ok=True)
    run.write_yaml(directory / "effective_config.yaml")
    return directory


def _write_preview(path, radiance, mu):
    tone = np.clip(mu_law(radiance, mu, clamp=True) * 255.0, 0, 255).astype(np.uint8)
    cv2.imwrite(str(path), tone[:, :, ::-1])


def _cmd_train(run):
    out = _out_dir(run, "train")
    checkpoint = training.train_loop(
        run.path("manifest", required=True),
        net_config=run.net,
        train_config=run.train,
        out_dir=out,
        feature_source=_feature_source(run),
        params=run.domain,
        resume_from=run.paths.get("checkpoint"),
    )
    print(f"final checkpoint: {checkpoint}")
    return 0


def _load_model(run):
    ckpt = run.path("checkpoint", required=True)
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    model, _, _, _, _ = training.load_checkpoint(ckpt, _feature_source(run))
    return model


def _cmd_infer(run):
    out = _out_dir(run, "infer")
    model = _load_model(run)
    _, test_dirs = read_manifest(run.path("manifest", required=True))
    for directory in test_dirs:
        record = load_scene(directory)
        pred, _ = model.infer(ModelInputs.from_record(record, run.domain))
        rgbe.write_hdr(out / f"{record.scene_id}.hdr", np.clip(pred, 0, None).astype(np.float64))
        _write_preview(out / f"{record.scene_id}_preview.png", pred, run.domain.mu)
        print(f"restored {record.scene_id}")
    return 0


def _cmd_eval(run):
    out = _out_dir(run, "eval")
    report = evaluation.evaluate_dataset(
        _load_model(run),
        run.path("manifest", required=True),
        params=run.domain,
        margin=run.margin,
        mu=run.domain.mu,
        out_dir=out,
    )
    for metric, value in report.aggregate.items():
        print(f"{metric}: {value:.4f}")
    return 0


def _cmd_sweep(run):
    out = _out_dir(run, "sweep-translation")
    rows = evaluation.translation_sweep(
        _load_model(run),
        run.path("manifest", required=True),
        deltas=run.deltas,
        params=run.domain,
        mu=run.domain.mu,
        out_dir=out,
    )
    for row in rows:
        print(f"delta={row['delta']}: psnr_mu={row['psnr_mu']:.4f}")
    return 0


def _cmd_ablate(run):
    out = _out_dir(run, "ablate")
    table = evaluation.ablation_suite(
        run.net,
        run.path("manifest", required=True),
        run.variants,
        run.train,
        out,
        params=run.domain,
        feature_source=_feature_source(run),
    )
    print(f"full model psnr_mu: {table['full']['psnr_mu']:.4f}")
    for name, row in table["variants"].items():
        print(f"{name}: delta_psnr_mu={row['delta_psnr_mu']:+.4f}")
    return 0


def _cmd_match_debug(run, scene_dir):
    if scene_dir is None:
        raise ConfigError("match-debug requires --scene <directory>")
    out = _out_dir(run, "match-debug")
    record = load_scene(scene_dir)
    h_s, h_m, _, h_s_masked, _, _ = scene_radiance(record, run.domain)
    source_map = h_s if run.net.no_ms_hdr else h_s_masked
    feature_source = _feature_source(run)
    src_pyr = feature_source.pyramid(source_map.pixels)
    tgt_pyr = feature_source.pyramid(h_m.pixels)
    matcher = single_scale_match if run.net.single_scale_vgg else progressive_match
    field = matcher(src_pyr, tgt_pyr, run.net.window, run.net.normalization)

    rgbe.write_hdr(out / f"{record.scene_id}_ms_hdr.hdr", h_s_masked)
    csv_path = out / f"{record.scene_id}_matches.csv"
    with open(csv_path, "w", newline="") as fh:
        fh.write(f"# scene={record.scene_id}\n")
        fh.write(f"# match_source={'raw_short' if run.net.no_ms_hdr else 'ms_hdr'}\n")
        fh.write(f"# features={feature_source.kind}\n")
        fh.write(f"# normalization={run.net.normalization}\n")
        fh.write(f"# single_scale={run.net.single_scale_vgg}\n")
        writer = csv.writer(fh)
        writer.writerow(["level", "k_row", "k_col", "j_row", "j_col", "score"])
        for row in field.iter_rows():
            writer.writerow([*row[:5], f"{row[5]:.8f}"])
    print(f"match field written to {csv_path}")
    return 0


def run_cli(argv):
    """Dispatch one command; returns the process exit status."""
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 0
    try:
        run = _apply_overrides(load_config(args.config), args)
        if args.command == "train":
            return _cmd_train(run)
        if args.command == "infer":
            return _cmd_infer(run)
        if args.command == "eval":
            return _cmd_eval(run)
        if args.command == "sweep-translation":
            return _cmd_sweep(run)
        if args.command == "ablate":
            return _cmd_ablate(run)
        if args.command == "match-debug":
            return _cmd_match_debug(run, args.scene)
        parser.error(f"unknown command {args.command!r}")
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run_cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
