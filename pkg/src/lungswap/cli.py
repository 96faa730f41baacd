"""Single entry-point CLI wiring the modules into reproducible workflows.

Subcommands: synth-data, train, swap, eval-swap, augment, finetune. Every
command is deterministic given --seed; reruns with identical flags rewrite
identical outputs, and --force clears the output directory first. A YAML
key-value file passed with --config supplies defaults that explicit flags
override. Failures exit nonzero with a single `ErrorClass: message` line
on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import shutil
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import augmentation, corpus, metrics, oracle, training
from .errors import LungSwapError, MissingFile
from .networks import NetworkConfig, load_checkpoint
from .objectives import LossWeights


@dataclass
class CommandResult:
    exit_code: int
    artifacts: list[Path] = field(default_factory=list)
    summary: dict = field(default_factory=dict)


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    import yaml

    p = Path(path)
    if not p.exists():
        raise MissingFile(f"config file {p} does not exist")
    data = yaml.safe_load(p.read_text()) or {}
    if not isinstance(data, dict):
        raise LungSwapError(f"config file {p} must be a flat key-value mapping")
    return data


def _merge(args: argparse.Namespace, config: dict, key: str, default):
    """Flag value if given, else config-file value, else default."""
    value = getattr(args, key.replace("-", "_"), None)
    if value is not None:
        return value
    if key in config:
        return config[key]
    return default


def _prepare_out_dir(path: Path, force: bool) -> None:
    if force and path.exists():
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)


def _network_config(args, cfg: dict) -> NetworkConfig:
    kwargs = {}
    for f in dataclasses.fields(NetworkConfig):
        value = _merge(args, cfg, f.name, None)
        if value is not None:
            if f.name == "nce_layers" and not isinstance(value, tuple):
                value = tuple(int(v) for v in str(value).split(","))
            kwargs[f.name] = value
    return NetworkConfig(**kwargs)


def _save_plot(fig, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110)


def _plot_loss_csv(csv_path: Path, out_png: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = np.genfromtxt(csv_path, delimiter=",", names=True)
    if rows.ndim == 0:
        rows = rows.reshape(1)
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for name in ("recon", "adv_g", "in_tex", "sup"):
        axes[0].plot(rows["iteration"], rows[name], label=name, lw=0.8)
    axes[0].set_title("generator losses")
    for name in ("d_img", "d_patch", "r1"):
        axes[1].plot(rows["iteration"], rows[name], label=name, lw=0.8)
    axes[1].set_title("discriminator losses")
    for ax in axes:
        ax.set_xlabel("iteration")
        ax.legend(fontsize=7)
    fig.tight_layout()
    _save_plot(fig, out_png)
    plt.close(fig)


def cmd_synth_data(args) -> CommandResult:
    cfg = _load_config_file(args.config)
    out = Path(_merge(args, cfg, "out", "synth_corpus"))
    _prepare_out_dir(out, args.force)
    spec = corpus.SyntheticSpec(
        n_images=int(_merge(args, cfg, "n", 200)),
        resolution=int(_merge(args, cfg, "resolution", 64)),
        texture_classes=int(_merge(args, cfg, "classes", 2)),
        seed=int(_merge(args, cfg, "seed", 0)),
    )
    manifest = corpus.generate_synthetic_corpus(spec, out)
    return CommandResult(
        exit_code=0,
        artifacts=[out / "manifest.csv"],
        summary={
            "images": len(manifest),
            "label_vocab": ";".join(manifest.label_vocab),
            "train": len(manifest.split("train")),
            "val": len(manifest.split("val")),
            "test": len(manifest.split("test")),
        },
    )


def cmd_train(args) -> CommandResult:
    cfg = _load_config_file(args.config)
    manifest = corpus.load_manifest(Path(_merge(args, cfg, "manifest", None)))
    out = Path(_merge(args, cfg, "out", "checkpoint"))
    if not args.resume:
        _prepare_out_dir(out, args.force)
    weights = LossWeights(
        adversarial=float(_merge(args, cfg, "adversarial_weight", 0.5)),
        in_texture=float(_merge(args, cfg, "in_texture_weight", 1.0)),
        suppression=float(_merge(args, cfg, "suppression_weight", 1.0)),
        nce_temperature=float(_merge(args, cfg, "nce_temperature", 0.07)),
        r1_gamma=float(_merge(args, cfg, "r1_gamma", 10.0)),
        r1_interval=int(_merge(args, cfg, "r1_interval", 16)),
    )
    lr_d = _merge(args, cfg, "lr_d", None)
    train_cfg = training.TrainConfig(
        iterations=int(_merge(args, cfg, "iters", 1000)),
        batch_size=int(_merge(args, cfg, "batch", 16)),
        lr=float(_merge(args, cfg, "lr", 1e-3)),
        lr_discriminator=float(lr_d) if lr_d is not None else None,
        betas=tuple(float(b) for b in str(_merge(args, cfg, "betas", "0.9,0.999")).split(",")),
        weights=weights,
        network=_network_config(args, cfg),
        checkpoint_interval=int(_merge(args, cfg, "checkpoint_interval", 1000)),
        seed=int(_merge(args, cfg, "seed", 0)),
        nce_positions=int(_merge(args, cfg, "nce_positions", 256)),
    )
    _, stream = training.train_lsae(
        train_cfg, manifest, out, resume=args.resume, log_every=args.log_every
    )
    curve_png = out / "loss_curves.png"
    _plot_loss_csv(out / training.LOSS_LOG, curve_png)
    last = stream[-1] if stream else None
    return CommandResult(
        exit_code=0,
        artifacts=[out / training.LOSS_LOG, curve_png] + [out / f"{n}.pt" for n in ("enc_s", "enc_t", "dec", "d_img", "d_patch", "meta")],
        summary={
            "iterations": train_cfg.iterations,
            "final_recon": last.recon if last else float("nan"),
            "final_total": last.total if last else float("nan"),
        },
    )


def _load_image_for(model, path: Path) -> np.ndarray:
    return corpus.preprocess(corpus.read_image(path), model.config.image_size)


def cmd_swap(args) -> CommandResult:
    import torch

    model, _ = load_checkpoint(Path(args.checkpoint))
    structure = _load_image_for(model, Path(args.structure))
    texture = _load_image_for(model, Path(args.texture))
    with torch.no_grad():
        hybrid = model.swap_generate(
            torch.from_numpy(structure)[None, None], torch.from_numpy(texture)[None, None]
        )[0, 0].numpy()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    corpus.write_image(out, hybrid)
    gap = np.ones((structure.shape[0], 2), dtype=np.float32)
    grid = np.concatenate([structure, gap, hybrid, gap, texture], axis=1)
    grid_path = out.with_name(out.stem + "_grid.png")
    corpus.write_image(grid_path, grid)
    return CommandResult(
        exit_code=0,
        artifacts=[out, grid_path],
        summary={"hybrid": str(out), "grid": str(grid_path)},
    )


def _get_extractor(args, cfg, manifest, out_dir: Path):
    oracle_path = _merge(args, cfg, "oracle", None)
    if oracle_path is not None and Path(oracle_path).exists():
        return oracle.load_oracle(oracle_path), Path(oracle_path), None
    judge, acc = oracle.train_texture_oracle(
        manifest,
        resolution=int(_merge(args, cfg, "oracle_resolution", 64)),
        seed=int(_merge(args, cfg, "seed", 0)),
    )
    saved = Path(oracle_path) if oracle_path is not None else out_dir / "oracle.pt"
    oracle.save_oracle(judge, saved)
    return judge, saved, acc


def cmd_eval_swap(args) -> CommandResult:
    import torch

    cfg = _load_config_file(args.config)
    manifest = corpus.load_manifest(Path(args.manifest))
    model, meta = load_checkpoint(Path(args.checkpoint))
    res = model.config.image_size
    out = Path(_merge(args, cfg, "out", "swap_eval"))
    _prepare_out_dir(out, args.force)
    seed = int(_merge(args, cfg, "seed", 0))
    layer = int(_merge(args, cfg, "layer", 2))
    positive = set(str(_merge(args, cfg, "positive_labels", "")).split(";")) - {""}
    healthy_raw = _merge(args, cfg, "healthy_labels", None)
    healthy = set(str(healthy_raw).split(";")) - {""} if healthy_raw else None
    pairs = corpus.sample_swap_pairs(
        manifest,
        positive,
        int(_merge(args, cfg, "n_pairs", 100)),
        seed,
        healthy_labels=healthy,
        split=_merge(args, cfg, "split", "test"),
    )
    judge, judge_path, judge_acc = _get_extractor(args, cfg, manifest, out)

    sifid_hybrid, sifid_init, overlaps = [], [], []
    ordering_hits = 0
    for pos_rec, neg_rec in pairs:
        img_p = corpus.load_normalized(pos_rec, res)
        img_n = corpus.load_normalized(neg_rec, res)
        mask_p = corpus.read_mask(pos_rec.mask_path, res)
        mask_n = corpus.read_mask(neg_rec.mask_path, res)
        # both swap directions: (structure, texture) = (n, p) and (p, n)
        for (s_img, s_mask), (t_img, t_mask) in (
            ((img_n, mask_n), (img_p, mask_p)),
            ((img_p, mask_p), (img_n, mask_n)),
        ):
            with torch.no_grad():
                hybrid = model.swap_generate(
                    torch.from_numpy(s_img)[None, None], torch.from_numpy(t_img)[None, None]
                )[0, 0].numpy()
            hybrid = np.clip(hybrid, 0.0, 1.0)
            d_hyb = metrics.masked_sifid(hybrid, s_mask, t_img, t_mask, judge, layer)
            d_init = metrics.masked_sifid(s_img, s_mask, t_img, t_mask, judge, layer)
            sifid_hybrid.append(d_hyb)
            sifid_init.append(d_init)
            ordering_hits += d_hyb < d_init
            seg = metrics.threshold_lung_segmentation(hybrid)
            overlaps.append(metrics.overlap_metrics(seg, s_mask))

    report = {
        "masked_sifid_mean": float(np.mean(sifid_hybrid)),
        "masked_sifid_init_mean": float(np.mean(sifid_init)),
        "sifid_ordering_fraction": ordering_hits / len(sifid_hybrid),
        "miou": float(np.mean([o.miou for o in overlaps])),
        "pixel_acc": float(np.mean([o.pixel_acc for o in overlaps])),
        "dice": float(np.mean([o.dice for o in overlaps])),
        "n_pairs": len(pairs),
        "provenance": {
            "checkpoint": str(args.checkpoint),
            "checkpoint_iteration": meta["iteration"],
            "manifest": str(args.manifest),
            "oracle": str(judge_path),
            "oracle_test_accuracy": judge_acc,
            "seed": seed,
            "layer": layer,
        },
    }
    report_path = out / "swap_report.json"
    report_path.write_text(json.dumps(report, indent=2))
    summary = {k: report[k] for k in (
        "masked_sifid_mean", "masked_sifid_init_mean", "sifid_ordering_fraction",
        "miou", "pixel_acc", "dice",
    )}
    return CommandResult(exit_code=0, artifacts=[report_path, judge_path], summary=summary)


def cmd_augment(args) -> CommandResult:
    cfg = _load_config_file(args.config)
    target = corpus.load_manifest(Path(args.target_manifest))
    source = corpus.load_manifest(Path(args.source_manifest))
    out = Path(_merge(args, cfg, "out", "augmented"))
    _prepare_out_dir(out, args.force)
    source_labels = _merge(args, cfg, "source_labels", None)
    if source_labels:
        names = set(str(source_labels).split(";")) - {""}
        source_filter = augmentation.label_filter(names, source.label_vocab)
    else:
        source_filter = augmentation.healthy_only
    plan = augmentation.AugmentationPlan(
        k=int(_merge(args, cfg, "k", 2)),
        output_dir=out,
        seed=int(_merge(args, cfg, "seed", 0)),
        source_filter=source_filter,
    )
    augmented = augmentation.build_hybrid_augmentation(target, source, Path(args.checkpoint), plan)
    return CommandResult(
        exit_code=0,
        artifacts=[out / "manifest.csv"],
        summary={
            "original_train": len(target.split("train")),
            "augmented_train": len(augmented.split("train")),
            "k": plan.k,
        },
    )


MODE_ALIASES = {"linear": "linear_eval", "1pct": "semi_1pct", "10pct": "semi_10pct", "full": "full"}


def cmd_finetune(args) -> CommandResult:
    cfg = _load_config_file(args.config)
    manifest = corpus.load_manifest(Path(args.manifest))
    out = Path(_merge(args, cfg, "out", "finetune"))
    _prepare_out_dir(out, args.force)
    ft_cfg = training.FinetuneConfig(
        mode=MODE_ALIASES[args.mode],
        batch_size=int(_merge(args, cfg, "batch", 56)),
        epochs=int(_merge(args, cfg, "epochs", 60)),
        seed=int(_merge(args, cfg, "seed", 0)),
    )
    classifier_path = out / "classifier.pt"
    _, report = training.finetune_texture_encoder(
        Path(args.checkpoint), manifest, ft_cfg, out_path=classifier_path
    )
    report_path = out / "finetune_report.json"
    report_path.write_text(json.dumps(report, indent=2))

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    history = report["history"]
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
    axes[0].plot(history["train_loss"])
    axes[0].set_title("train loss")
    axes[0].set_xlabel("epoch")
    axes[1].plot(history["val_mauc"])
    axes[1].set_title("validation mAUC")
    axes[1].set_xlabel("epoch")
    axes[2].plot(history["lr"])
    axes[2].set_title("learning rate")
    axes[2].set_xlabel("step")
    fig.tight_layout()
    curves_path = out / "finetune_curves.png"
    _save_plot(fig, curves_path)
    plt.close(fig)

    return CommandResult(
        exit_code=0,
        artifacts=[classifier_path, report_path, curves_path],
        summary={"mode": ft_cfg.mode, "mauc": report["mauc"], "ber": report["ber"]},
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lungswap",
        description="Structure-texture disentangling autoencoder workflows",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML key-value file; flags override its values")
        p.add_argument("--seed", type=int, help="random seed (default 0)")
        p.add_argument("--force", action="store_true", help="clear the output dir before writing")

    p = sub.add_parser("synth-data", help="generate the procedural synthetic corpus")
    common(p)
    p.add_argument("--out", help="output directory")
    p.add_argument("--n", type=int, help="number of images (default 200)")
    p.add_argument("--resolution", type=int, help="image side in pixels (default 64)")
    p.add_argument("--classes", type=int, help="texture classes (default 2)")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train (or resume/adapt) the autoencoder")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="checkpoint directory")
    p.add_argument("--iters", type=int, help="total iterations (default 1000)")
    p.add_argument("--batch", type=int, help="batch size (default 16)")
    p.add_argument("--lr", type=float, help="Adam learning rate (default 1e-3)")
    p.add_argument("--lr-d", type=float, help="discriminator learning rate (default: same as --lr)")
    p.add_argument("--betas", help="Adam betas as 'b1,b2' (default 0.9,0.999)")
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
    p.add_argument("--checkpoint-interval", type=int)
    p.add_argument("--log-every", type=int, default=0, help="print a loss line every N iterations")
    p.add_argument("--image-size", type=int, help="network input side (default 256)")
    p.add_argument("--downsample-factor", type=int, help="structure grid factor (default 16)")
    p.add_argument("--base-width", type=int)
    p.add_argument("--structure-max-width", type=int)
    p.add_argument("--texture-max-width", type=int)
    p.add_argument("--disc-max-width", type=int)
    p.add_argument("--patch-size", type=int, help="patch discriminator operating side (default 64)")
    p.add_argument("--n-ref-patches", type=int, help="reference patches per query (default 4)")
    p.add_argument("--nce-positions", type=int, help="contrastive positions per layer (default 256)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("swap", help="generate one hybrid image plus a side-by-side grid")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--structure", required=True, help="image providing anatomy")
    p.add_argument("--texture", required=True, help="image providing texture")
    p.add_argument("--out", required=True, help="output hybrid PNG path")
    p.set_defaults(func=cmd_swap)

    p = sub.add_parser("eval-swap", help="swap-pair evaluation: masked Frechet + overlap metrics")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="report directory")
    p.add_argument("--positive-labels", help="';'-separated labels defining the positive set")
    p.add_argument("--healthy-labels", help="optional ';'-separated labels for the healthy set")
    p.add_argument("--split", help="manifest split to draw pairs from (default test)")
    p.add_argument("--n-pairs", type=int, help="number of swap pairs (default 100)")
    p.add_argument("--layer", type=int, help="extractor feature layer (default 2)")
    p.add_argument("--oracle", help="path to a saved texture judge (trained here if absent)")
    p.set_defaults(func=cmd_eval_swap)

    p = sub.add_parser("augment", help="hybrid-image augmentation of a labeled train split")
    common(p)
    p.add_argument("--target-manifest", required=True, help="labeled manifest to enlarge")
    p.add_argument("--source-manifest", required=True, help="manifest providing structures")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="output directory")
    p.add_argument("--k", type=int, help="structures per target image (default 2)")
    p.add_argument("--source-labels", help="structure-source label filter (default: unlabeled only)")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("finetune", help="texture-encoder classification harness")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", choices=sorted(MODE_ALIASES), required=True)
    p.add_argument("--out", help="output directory")
    p.add_argument("--epochs", type=int, help="training epochs (default 60)")
    p.add_argument("--batch", type=int, help="batch size (default 56)")
    p.set_defaults(func=cmd_finetune)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        result = args.func(args)
    except LungSwapError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    for key, value in result.summary.items():
        print(f"{key}: {value}")
    for artifact in result.artifacts:
        print(f"artifact: {artifact}")
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
