import numpy as np
import pytest
import torch

from lungswap.augmentation import (
    AugmentationPlan,
    build_hybrid_augmentation,
    healthy_only,
    label_filter,
)
from lungswap.corpus import CorpusManifest, ImageRecord, load_manifest
from lungswap.errors import InsufficientSources
from lungswap.networks import LungSwapModel, NetworkConfig, save_checkpoint

NET = dict(
    image_size=64, downsample_factor=8, base_width=8,
    structure_max_width=32, texture_max_width=32, disc_max_width=32,
    patch_size=16, n_ref_patches=2, texture_dim=64,
)


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    torch.manual_seed(0)
    model = LungSwapModel(NetworkConfig(**NET))
    out = tmp_path_factory.mktemp("aug_ckpt")
    save_checkpoint(model, out, iteration=0)
    return out


@pytest.fixture(scope="module")
def target_250(small_corpus):
    """250-record train split built by re-referencing corpus files."""
    manifest, _ = small_corpus
    pool = manifest.records
    records = []
    for i in range(250):
        src = pool[i % len(pool)]
        records.append(
            ImageRecord(
                id=f"t{i:03d}", image_path=src.image_path, mask_path=src.mask_path,
                labels=src.labels.copy(), split="train", domain="target",
            )
        )
    for i, src in enumerate(pool[:20]):
        records.append(
            ImageRecord(
                id=f"v{i:03d}", image_path=src.image_path, mask_path=src.mask_path,
                labels=src.labels.copy(), split="val" if i < 10 else "test", domain="target",
            )
        )
    return CorpusManifest(records=records, label_vocab=list(manifest.label_vocab))


class TestBuildAugmentation:
    def test_250_times_k2_gives_750(self, target_250, small_corpus, checkpoint, tmp_path):
        manifest, _ = small_corpus
        plan = AugmentationPlan(
            k=2, output_dir=tmp_path / "aug", seed=1,
            source_filter=label_filter({"texture_class_0"}, manifest.label_vocab),
        )
        augmented = build_hybrid_augmentation(target_250, manifest, checkpoint, plan)
        assert len(augmented.split("train")) == 750
        assert len(augmented) == len(target_250) + 500

    def test_k0_identity(self, target_250, small_corpus, checkpoint, tmp_path):
        manifest, _ = small_corpus
        plan = AugmentationPlan(k=0, output_dir=tmp_path / "aug0", seed=1)
        augmented = build_hybrid_augmentation(target_250, manifest, checkpoint, plan)
        assert [r.id for r in augmented.records] == [r.id for r in target_250.records]

    def test_labels_inherited_and_masks_from_source(self, target_250, small_corpus, checkpoint, tmp_path):
        manifest, _ = small_corpus
        plan = AugmentationPlan(
            k=1, output_dir=tmp_path / "aug1", seed=2,
            source_filter=label_filter({"texture_class_0"}, manifest.label_vocab),
        )
        augmented = build_hybrid_augmentation(target_250, manifest, checkpoint, plan)
        by_id = {r.id: r for r in target_250.records}
        source_masks = {str(r.mask_path) for r in manifest.records}
        hybrids = [r for r in augmented.records if "__x__" in r.id]
        assert len(hybrids) == 250
        for h in hybrids:
            dst_id, src_id = h.id.split("__x__")
            assert np.array_equal(h.labels, by_id[dst_id].labels)
            assert str(h.mask_path) in source_masks
            assert h.split == "train"
            assert h.image_path.exists()

    def test_originals_unchanged(self, target_250, small_corpus, checkpoint, tmp_path):
        manifest, _ = small_corpus
        plan = AugmentationPlan(
            k=1, output_dir=tmp_path / "aug2", seed=3,
            source_filter=label_filter({"texture_class_1"}, manifest.label_vocab),
        )
        augmented = build_hybrid_augmentation(target_250, manifest, checkpoint, plan)
        originals = {r.id: r for r in augmented.records if "__x__" not in r.id}
        assert len(originals) == len(target_250.records)
        for rec in target_250.records:
            out = originals[rec.id]
            assert out.image_path == rec.image_path
            assert out.mask_path == rec.mask_path
            assert np.array_equal(out.labels, rec.labels)
            assert out.split == rec.split

    def test_no_hybrids_in_val_test(self, target_250, small_corpus, checkpoint, tmp_path):
        manifest, _ = small_corpus
        plan = AugmentationPlan(
            k=2, output_dir=tmp_path / "aug3", seed=4,
            source_filter=label_filter({"texture_class_0"}, manifest.label_vocab),
        )
        augmented = build_hybrid_augmentation(target_250, manifest, checkpoint, plan)
        for split in ("val", "test"):
            assert all("__x__" not in r.id for r in augmented.split(split))

    def test_deterministic(self, target_250, small_corpus, checkpoint, tmp_path):
        manifest, _ = small_corpus
        outs = []
        for name in ("d1", "d2"):
            plan = AugmentationPlan(
                k=1, output_dir=tmp_path / name, seed=7,
                source_filter=label_filter({"texture_class_0"}, manifest.label_vocab),
            )
            augmented = build_hybrid_augmentation(target_250, manifest, checkpoint, plan)
            outs.append(augmented)
        ids1 = [r.id for r in outs[0].records]
        ids2 = [r.id for r in outs[1].records]
        assert ids1 == ids2
        h1 = next(r for r in outs[0].records if "__x__" in r.id)
        h2 = outs[1].by_id(h1.id)
        assert h1.image_path.read_bytes() == h2.image_path.read_bytes()

    def test_insufficient_sources(self, target_250, small_corpus, checkpoint, tmp_path):
        manifest, _ = small_corpus
        plan = AugmentationPlan(
            k=3, output_dir=tmp_path / "aug4", seed=0,
            source_filter=lambda r: r.id == manifest.records[0].id,
        )
        with pytest.raises(InsufficientSources):
            build_hybrid_augmentation(target_250, manifest, checkpoint, plan)

    def test_healthy_only_default(self, toy_manifest):
        labeled = next(r for r in toy_manifest.records if r.id.startswith("other"))
        assert healthy_only(labeled) is False  # carries classA
        neg = next(r for r in toy_manifest.records if r.id.startswith("neg"))
        assert healthy_only(neg) is True

    def test_manifest_written_and_loadable(self, target_250, small_corpus, checkpoint, tmp_path):
        manifest, _ = small_corpus
        plan = AugmentationPlan(
            k=1, output_dir=tmp_path / "aug5", seed=9,
            source_filter=label_filter({"texture_class_0"}, manifest.label_vocab),
        )
        build_hybrid_augmentation(target_250, manifest, checkpoint, plan)
        reloaded = load_manifest(tmp_path / "aug5" / "manifest.csv")
        assert len(reloaded.split("train")) == 500

    def test_plan_validation(self, tmp_path):
        with pytest.raises(ValueError):
            AugmentationPlan(k=-1, output_dir=tmp_path)
