"""Adversarial training loop (pretraining and domain adaptation) and the
downstream texture-encoder classification harness.

Batch composition is a pure function of (manifest, seed, iteration), so a
run that is checkpointed and resumed replays exactly the batches an
uninterrupted run would have seen; together with saved optimizer and RNG
state this makes resumption bit-compatible on a fixed device.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .corpus import CorpusManifest, ImageRecord, load_normalized, read_mask
from .errors import (
    EmptySubsample,
    InsufficientRecords,
    MissingComponent,
    NonFiniteLoss,
)
from .masking import grid_region_cells, sample_patch
from .metrics import balanced_error_rate, mean_auc, per_class_auc
from .networks import LungSwapModel, NetworkConfig, load_checkpoint, save_checkpoint
from .objectives import (
    LossBreakdown,
    LossWeights,
    discriminator_loss,
    extract_rotated_patch,
    generator_adversarial_loss,
    in_lung_texture_loss,
    r1_penalty,
    reconstruction_loss,
    structure_suppression_loss,
    total_loss,
)
from .oracle import record_class

LOSS_LOG = "losses.csv"

FINETUNE_MODES = ("linear_eval", "semi_1pct", "semi_10pct", "full")
LABEL_FRACTION = {"linear_eval": 1.0, "semi_1pct": 0.01, "semi_10pct": 0.10, "full": 1.0}


@dataclass
class TrainConfig:
    iterations: int
    batch_size: int = 16
    lr: float = 1e-3
    lr_discriminator: float | None = None  # None: same as lr
    lr_patch_discriminator: float | None = None  # None: same as lr_discriminator
    patch_side_range: tuple[int, int] | None = None  # None: resolution-scaled
    betas: tuple[float, float] = (0.9, 0.999)
    weights: LossWeights = field(default_factory=LossWeights)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    checkpoint_interval: int = 1000
    seed: int = 0
    device: str = "cpu"
    nce_positions: int = 256  # per layer, clamped to the available out-cells

    def __post_init__(self) -> None:
        if self.iterations <= 0:
            raise ValueError("iterations must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (swapping needs pairs)")

    @property
    def d_lr(self) -> float:
        return self.lr if self.lr_discriminator is None else self.lr_discriminator

    @property
    def d_patch_lr(self) -> float:
        return self.d_lr if self.lr_patch_discriminator is None else self.lr_patch_discriminator

    def build_discriminator_optimizer(self, model) -> torch.optim.Adam:
        return torch.optim.Adam(
            [
                {"params": model.d_img.parameters(), "lr": self.d_lr},
                {"params": model.d_patch.parameters(), "lr": self.d_patch_lr},
            ],
            lr=self.d_lr,
            betas=self.betas,
        )


@dataclass
class FinetuneConfig:
    mode: str = "full"
    batch_size: int = 56
    lr_start: float = 0.004
    lr_end: float = 0.001
    epochs: int = 60
    seed: int = 0
    device: str = "cpu"

    def __post_init__(self) -> None:
        if self.mode not in FINETUNE_MODES:
            raise ValueError(f"mode must be one of {FINETUNE_MODES}")

    @property
    def label_fraction(self) -> float:
        return LABEL_FRACTION[self.mode]


def r1_due(iteration: int, interval: int = 16) -> bool:
    """Lazy regularization schedule: true on every `interval`-th iteration."""
    if iteration < 1:
        raise ValueError("iterations are 1-based")
    return iteration % interval == 0


def finetune_lr(step: int, total_steps: int, start: float = 0.004, end: float = 0.001) -> float:
    """Exponential decay from `start` to `end` over `total_steps`."""
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise ValueError(f"need 0 <= step <= total_steps, got {step}/{total_steps}")
    return start * (end / start) ** (step / total_steps)


class _TrainData:
    """Preprocessed train-split cache: images and masks as arrays."""

    def __init__(self, manifest: CorpusManifest, resolution: int, split: str = "train"):
        records = manifest.split(split)
        if not records:
            raise InsufficientRecords(f"manifest has no records in split {split!r}")
        self.records = records
        self.images = np.stack([load_normalized(r, resolution) for r in records])
        self.masks = np.stack([read_mask(r.mask_path, resolution) for r in records])

    def __len__(self) -> int:
        return len(self.records)


def _batch_plan(seed: int, iteration: int, n: int, batch_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic batch indices and a swap-partner derangement."""
    rng = np.random.default_rng([seed, 7, iteration])
    replace = n < batch_size
    idx = rng.choice(n, size=batch_size, replace=replace)
    for _ in range(100):
        perm = rng.permutation(batch_size)
        if not np.any(perm == np.arange(batch_size)):
            return idx, perm
    return idx, np.roll(np.arange(batch_size), 1)


def _min_out_cells(feature_maps, masks: np.ndarray) -> int:
    counts = []
    for fmap in feature_maps:
        grid = (fmap.shape[2], fmap.shape[3])
        for mask in masks:
            counts.append(len(grid_region_cells(grid, mask, "out")))
    return min(counts)


def _d_patch_r1(model: LungSwapModel, images: torch.Tensor, masks: np.ndarray,
                rng: np.random.Generator, gamma: float,
                side_range: tuple[int, int] | None = None) -> torch.Tensor:
    """R1 penalty for the patch discriminator at real patch pairs."""
    cfg = model.config
    n_items = min(2, images.shape[0])
    refs, queries = [], []
    for i in range(n_items):
        pix = images[i, 0].numpy()
        item_refs = []
        for _ in range(cfg.n_ref_patches):
            g = sample_patch(pix, masks[i], "in", rng, side_range=side_range)
            item_refs.append(extract_rotated_patch(images[i, 0], g.center, g.side, g.rotation, cfg.patch_size))
        refs.append(torch.stack(item_refs))
        g = sample_patch(pix, masks[i], "in", rng, side_range=side_range)
        queries.append(extract_rotated_patch(images[i, 0], g.center, g.side, g.rotation, cfg.patch_size))
    ref_stack = torch.stack(refs).detach().requires_grad_(True)
    query = torch.stack(queries).detach().requires_grad_(True)
    logits = model.d_patch(ref_stack, query)
    grads = torch.autograd.grad(logits.sum(), [ref_stack, query], create_graph=True)
    sq = grads[0].flatten(1).pow(2).sum(dim=1) + grads[1].flatten(1).pow(2).sum(dim=1)
    return (gamma / 2.0) * sq.mean()


def train_lsae(
    config: TrainConfig,
    manifest: CorpusManifest,
    checkpoint_dir: Path | str,
    resume: bool = False,
    log_every: int = 0,
) -> tuple[Path, list[LossBreakdown]]:
    """Run the adversarial training loop; returns (checkpoint dir, loss stream).

    Per iteration: sample a batch, pair items by in-batch derangement,
    update the three generator components on the weighted total, then the
    two discriminators on their own losses (with the lazy R1 penalty every
    `r1_interval` iterations, scaled by the interval). Losses stream to
    ``losses.csv``; checkpoints land every `checkpoint_interval` and at the
    end. Resume restores parameters, optimizers, and RNG state.
    """
    checkpoint_dir = Path(checkpoint_dir)
    checkpoint_dir.mkdir(parents=True, exist_ok=True)
    w = config.weights
    net_cfg = config.network
    data = _TrainData(manifest, net_cfg.image_size)

    start_iteration = 0
    if resume:
        model, meta = load_checkpoint(checkpoint_dir)
        start_iteration = meta["iteration"]
        opt_g = torch.optim.Adam(model.generator_parameters(), lr=config.lr, betas=config.betas)
        opt_d = config.build_discriminator_optimizer(model)
        opt_g.load_state_dict(meta["optimizer_state"]["g"])
        opt_d.load_state_dict(meta["optimizer_state"]["d"])
        torch.set_rng_state(meta["rng_state"]["torch"])
    else:
        torch.manual_seed(config.seed)
        model = LungSwapModel(net_cfg)
        opt_g = torch.optim.Adam(model.generator_parameters(), lr=config.lr, betas=config.betas)
        opt_d = config.build_discriminator_optimizer(model)
        (checkpoint_dir / LOSS_LOG).write_text(LossBreakdown.CSV_HEADER + "\n")

    model.train()
    stream: list[LossBreakdown] = []
    log_path = checkpoint_dir / LOSS_LOG

    def _save(iteration: int) -> None:
        save_checkpoint(
            model,
            checkpoint_dir,
            iteration,
            rng_state={"torch": torch.get_rng_state()},
            optimizer_state={"g": opt_g.state_dict(), "d": opt_d.state_dict()},
        )

    with open(log_path, "a") as log:
        for iteration in range(start_iteration + 1, config.iterations + 1):
            rng = np.random.default_rng([config.seed, 7, iteration])
            idx, perm = _batch_plan(config.seed, iteration, len(data), config.batch_size)
            x1 = torch.from_numpy(data.images[idx])[:, None]
            m1 = data.masks[idx]
            x2, m2 = x1[perm], m1[perm]

            # generator step
            code1, feats1 = model.enc_s(x1)
            tex1 = model.enc_t(x1)
            recon = model.dec(code1, tex1)
            hybrid = model.dec(code1, tex1[perm])
            l_recon = reconstruction_loss(x1, recon)
            g_logits = model.d_img(torch.cat([recon, hybrid]))
            b = x1.shape[0]
            l_adv = generator_adversarial_loss(g_logits[:b], g_logits[b:])
            l_tex_g, l_dpatch = in_lung_texture_loss(
                hybrid, x2, m1, m2, model.d_patch, rng,
                n_ref=net_cfg.n_ref_patches, patch_size=net_cfg.patch_size,
                side_range=config.patch_side_range,
            )
            _, hybrid_feats = model.enc_s(hybrid)
            nce_layers = net_cfg.nce_layer_indices
            n_pos = min(config.nce_positions,
                        _min_out_cells([feats1[i] for i in nce_layers], m1))
            l_sup = structure_suppression_loss(
                hybrid_feats, feats1, m1, n_pos, w.nce_temperature, rng, nce_layers
            )
            g_total = (
                l_recon
                + w.adversarial * l_adv
                + w.in_texture * l_tex_g
                + w.suppression * l_sup
            )
            opt_g.zero_grad()
            g_total.backward()
            opt_g.step()

            # discriminator step (on the pre-update generator outputs)
            real_logits = model.d_img(x1)
            fake_logits = model.d_img(torch.cat([recon.detach(), hybrid.detach()]))
            l_dimg = discriminator_loss(real_logits, fake_logits)
            d_total = l_dimg + l_dpatch
            r1_value = 0.0
            if r1_due(iteration, w.r1_interval):
                pen = r1_penalty(model.d_img, x1, w.r1_gamma)
                pen = pen + _d_patch_r1(model, x2, m2, rng, w.r1_gamma, config.patch_side_range)
                r1_value = pen.detach().item()
                d_total = d_total + pen * w.r1_interval
            opt_d.zero_grad()
            d_total.backward()
            opt_d.step()

            parts = {
                "recon": l_recon.item(), "adv_g": l_adv.item(),
                "in_tex": l_tex_g.item(), "sup": l_sup.item(),
                "d_img": l_dimg.item(), "d_patch": l_dpatch.item(),
            }
            try:
                breakdown = total_loss(
                    parts["recon"], parts["adv_g"], parts["in_tex"], parts["sup"], w,
                    d_img_loss=parts["d_img"], d_patch_loss=parts["d_patch"], r1=r1_value,
                )
            except Exception:
                dump = {"iteration": iteration, **parts, "r1": r1_value}
                (checkpoint_dir / "nonfinite_dump.json").write_text(json.dumps(dump, indent=2))
                raise NonFiniteLoss(f"non-finite loss at iteration {iteration}: {dump}")
            stream.append(breakdown)
            log.write(breakdown.csv_row(iteration) + "\n")
            log.flush()
            if log_every and (iteration % log_every == 0 or iteration == 1):
                print(f"[train] {breakdown.csv_row(iteration)}", flush=True)
            if iteration % config.checkpoint_interval == 0 and iteration < config.iterations:
                _save(iteration)
        _save(config.iterations)
    return checkpoint_dir, stream


class TextureClassifier(nn.Module):
    """Frozen-or-finetuned texture encoder plus a linear prediction head."""

    def __init__(self, encoder, n_labels: int):
        super().__init__()
        self.encoder = encoder
        self.head = nn.Linear(encoder.config.texture_dim, n_labels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.encoder(x))


def stratified_subsample(
    records: list[ImageRecord], fraction: float, seed: int
) -> list[ImageRecord]:
    """Deterministic label-presence-stratified subset.

    Strata are "carries at least one label" vs "carries none"; each
    stratum contributes max(1, round(fraction * stratum size)) records.
    """
    if fraction >= 1.0:
        return list(records)
    strata: dict[bool, list[ImageRecord]] = {True: [], False: []}
    for r in records:
        strata[bool(r.labels.any())].append(r)
    rng = np.random.default_rng([seed, 0x5AB])
    chosen: list[ImageRecord] = []
    for key in (True, False):
        pool = strata[key]
        if not pool:
            continue
        k = max(1, round(fraction * len(pool)))
        order = rng.permutation(len(pool))[:k]
        chosen.extend(pool[i] for i in order)
    if not chosen:
        raise EmptySubsample("stratified subsampling selected no records")
    return chosen


def _label_matrix(records: list[ImageRecord]) -> np.ndarray:
    return np.stack([r.labels for r in records]).astype(np.float32)


@torch.no_grad()
def _scores(classifier: TextureClassifier, images: np.ndarray, batch: int = 64) -> np.ndarray:
    classifier.eval()
    outs = []
    for start in range(0, len(images), batch):
        x = torch.from_numpy(images[start : start + batch])[:, None]
        outs.append(torch.sigmoid(classifier(x)).numpy())
    return np.concatenate(outs)


def _multilabel_ber(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mean per-class balanced error rate at the 0.5 threshold, over the
    classes that have both positives and negatives."""
    bers = []
    for c in range(labels.shape[1]):
        lab = labels[:, c] > 0.5
        if lab.all() or not lab.any():
            continue
        bers.append(balanced_error_rate(scores[:, c] >= 0.5, lab))
    return float(np.mean(bers)) if bers else float("nan")


def finetune_texture_encoder(
    checkpoint_dir: Path | str,
    manifest: CorpusManifest,
    config: FinetuneConfig,
    out_path: Path | str | None = None,
) -> tuple[TextureClassifier, dict]:
    """Attach a linear head to the pretrained texture encoder and train it.

    linear_eval freezes everything but the head; the semi modes train the
    whole classifier on a deterministic stratified subset of the train
    split. Model selection is best validation macro AUC; the returned
    report carries test mAUC, BER, and per-class AUCs.
    """
    model, meta = load_checkpoint(checkpoint_dir)
    encoder = model.enc_t
    resolution = model.config.image_size
    n_labels = len(manifest.label_vocab)
    if n_labels == 0:
        raise MissingComponent("manifest has an empty label vocabulary")

    torch.manual_seed(config.seed)
    classifier = TextureClassifier(encoder, n_labels)
    if config.mode == "linear_eval":
        for p in classifier.encoder.parameters():
            p.requires_grad_(False)
        trainable = list(classifier.head.parameters())
    else:
        trainable = list(classifier.parameters())

    train_records = stratified_subsample(
        manifest.split("train"), config.label_fraction, config.seed
    )
    val_records = manifest.split("val")
    test_records = manifest.split("test")
    if not train_records or not val_records or not test_records:
        raise InsufficientRecords("finetuning needs non-empty train/val/test splits")

    train_x = np.stack([load_normalized(r, resolution) for r in train_records])
    train_y = _label_matrix(train_records)
    val_x = np.stack([load_normalized(r, resolution) for r in val_records])
    val_y = _label_matrix(val_records)
    test_x = np.stack([load_normalized(r, resolution) for r in test_records])
    test_y = _label_matrix(test_records)

    opt = torch.optim.Adam(trainable, lr=config.lr_start)
    steps_per_epoch = math.ceil(len(train_x) / config.batch_size)
    total_steps = max(config.epochs * steps_per_epoch, 1)
    rng = np.random.default_rng(config.seed)

    best_state, best_mauc = None, -1.0
    history = {"train_loss": [], "val_mauc": [], "lr": []}
    global_step = 0
    for _ in range(config.epochs):
        classifier.train()
        order = rng.permutation(len(train_x))
        epoch_losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            lr = finetune_lr(global_step, total_steps, config.lr_start, config.lr_end)
            for group in opt.param_groups:
                group["lr"] = lr
            x = torch.from_numpy(train_x[idx])[:, None]
            y = torch.from_numpy(train_y[idx])
            loss = F.binary_cross_entropy_with_logits(classifier(x), y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_losses.append(float(loss))
            history["lr"].append(lr)
            global_step += 1
        val_scores = _scores(classifier, val_x)
        try:
            val_mauc = mean_auc(val_scores, val_y, manifest.label_vocab)
        except Exception:
            val_mauc = float("nan")
        history["train_loss"].append(float(np.mean(epoch_losses)))
        history["val_mauc"].append(val_mauc)
        if math.isfinite(val_mauc) and val_mauc > best_mauc:
            best_mauc = val_mauc
            best_state = {k: v.detach().clone() for k, v in classifier.state_dict().items()}

    if best_state is not None:
        classifier.load_state_dict(best_state)
    classifier.eval()

    test_scores = _scores(classifier, test_x)
    aucs, excluded = per_class_auc(test_scores, test_y, manifest.label_vocab)
    report = {
        "mode": config.mode,
        "n_train": len(train_records),
        "mauc": float(np.mean(list(aucs.values()))) if aucs else float("nan"),
        "ber": _multilabel_ber(test_scores, test_y),
        "per_class_auc": aucs,
        "excluded_classes": excluded,
        "best_val_mauc": best_mauc,
        "history": history,
        "provenance": {
            "checkpoint": str(checkpoint_dir),
            "checkpoint_iteration": meta["iteration"],
            "seed": config.seed,
        },
    }
    if out_path is not None:
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(
            {
                "head": classifier.head.state_dict(),
                "enc_t": classifier.encoder.state_dict(),
                "network_config": dataclasses.asdict(model.config),
                "label_vocab": manifest.label_vocab,
                "finetune_config": dataclasses.asdict(config),
                "report": report,
            },
            out_path,
        )
    return classifier, report
