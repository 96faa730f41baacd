import numpy as np
import pytest

from lungswap.corpus import CorpusManifest, ImageRecord, SyntheticSpec, generate_synthetic_corpus


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """Tiny synthetic corpus shared by tests that only need real files."""
    out = tmp_path_factory.mktemp("smallcorp")
    spec = SyntheticSpec(n_images=80, resolution=64, seed=21)
    manifest = generate_synthetic_corpus(spec, out)
    return manifest, out


def make_record(rid, labels, split="train", vocab_size=2, domain="toy"):
    vec = np.zeros(vocab_size, dtype=np.uint8)
    for i in labels:
        vec[i] = 1
    return ImageRecord(
        id=rid,
        image_path=f"/nonexistent/{rid}.png",
        mask_path=f"/nonexistent/{rid}_mask.png",
        labels=vec,
        split=split,
        domain=domain,
    )


@pytest.fixture
def toy_manifest():
    """In-memory manifest (no files) for label/pairing logic."""
    records = [make_record(f"pos{i}", [1]) for i in range(12)]
    records += [make_record(f"neg{i}", []) for i in range(12)]
    records += [make_record(f"other{i}", [0]) for i in range(6)]
    return CorpusManifest(records=records, label_vocab=["classA", "classB"])
