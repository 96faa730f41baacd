"""Hybrid-image data augmentation: enlarge a labeled train split to
(K+1)x its size with generated hybrids that inherit the texture image's
label and the structure image's lung mask."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .corpus import (
    CorpusManifest,
    ImageRecord,
    load_normalized,
    save_manifest,
    write_image,
)
from .errors import InsufficientSources
from .networks import load_checkpoint


def healthy_only(record: ImageRecord) -> bool:
    """Default structure-source filter: the all-zero label vector."""
    return record.is_healthy()


def label_filter(names: set[str], vocab: list[str]) -> Callable[[ImageRecord], bool]:
    """Filter accepting records that carry at least one of `names`."""
    idx = [vocab.index(n) for n in names]

    def accept(record: ImageRecord) -> bool:
        return any(record.labels[i] for i in idx)

    return accept


@dataclass
class AugmentationPlan:
    k: int  # structure templates per target image
    output_dir: Path
    seed: int = 0
    source_filter: Callable[[ImageRecord], bool] = field(default=healthy_only)

    def __post_init__(self) -> None:
        if self.k < 0:
            raise ValueError("k must be non-negative")
        self.output_dir = Path(self.output_dir)


def build_hybrid_augmentation(
    target: CorpusManifest,
    source: CorpusManifest,
    checkpoint_dir: Path | str,
    plan: AugmentationPlan,
) -> CorpusManifest:
    """Generate k hybrids per target train record and return the union.

    For each target record the structure templates are k distinct source
    records (without replacement per target, with replacement across
    targets). Hybrids take the texture (and labels) from the target and
    the structure (and mask path) from the source; they always land in the
    train split. Deterministic given (manifests, checkpoint, seed).
    """
    if plan.k == 0:
        return CorpusManifest(records=list(target.records), label_vocab=list(target.label_vocab))

    pool = [r for r in source.records if plan.source_filter(r)]
    if len(pool) < plan.k:
        raise InsufficientSources(
            f"source pool has {len(pool)} records after filtering but k={plan.k}"
        )
    model, _ = load_checkpoint(checkpoint_dir)
    model.eval()
    resolution = model.config.image_size
    images_dir = plan.output_dir / "images"

    hybrids: list[ImageRecord] = []
    for t_idx, dst in enumerate(target.split("train")):
        rng = np.random.default_rng([plan.seed, t_idx])
        chosen = rng.choice(len(pool), size=plan.k, replace=False)
        texture = torch.from_numpy(load_normalized(dst, resolution))[None, None]
        structures = torch.stack(
            [torch.from_numpy(load_normalized(pool[i], resolution)) for i in chosen]
        )[:, None]
        with torch.no_grad():
            out = model.swap_generate(structures, texture.expand(plan.k, -1, -1, -1))
        for j, src_i in enumerate(chosen):
            src = pool[src_i]
            hybrid_id = f"{dst.id}__x__{src.id}"
            image_path = images_dir / f"{hybrid_id}.png"
            write_image(image_path, out[j, 0].numpy())
            hybrids.append(
                ImageRecord(
                    id=hybrid_id,
                    image_path=image_path.resolve(),
                    mask_path=Path(src.mask_path),
                    labels=dst.labels.copy(),
                    split="train",
                    domain=dst.domain,
                )
            )
    augmented = CorpusManifest(
        records=list(target.records) + hybrids, label_vocab=list(target.label_vocab)
    )
    save_manifest(augmented, plan.output_dir / "manifest.csv")
    return augmented
