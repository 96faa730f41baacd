"""Dataset ingestion, preprocessing, swap-pair construction, and the
procedural synthetic corpus used for desk-scale verification.

Manifest format (CSV): header ``id,image_path,mask_path,labels,split,domain``
where ``labels`` is a ``;``-separated subset of the label vocabulary. The
vocabulary lives in a sidecar file next to the CSV (same name with the
``.csv`` suffix replaced by ``.labels.txt``, one label name per line).
Image paths are stored relative to the manifest's directory when possible
and resolved against it on load.

Images are 8-bit or 16-bit grayscale PNG. Masks are 8-bit PNG where a
pixel value > 127 marks lung.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import (
    DuplicateId,
    EmptyImage,
    InsufficientRecords,
    IoFailure,
    MalformedManifest,
    MissingFile,
)

MANIFEST_COLUMNS = ("id", "image_path", "mask_path", "labels", "split", "domain")
SPLITS = ("train", "val", "test")

# A NormalizedImage is a square 2-D float32 array with values in [0, 1],
# histogram-equalized before the resize that produced it.
NormalizedImage = np.ndarray


@dataclass
class ImageRecord:
    id: str
    image_path: Path
    mask_path: Path
    labels: np.ndarray  # binary uint8 vector over the manifest vocabulary
    split: str
    domain: str = "source"

    def label_names(self, vocab: list[str]) -> list[str]:
        return [name for name, bit in zip(vocab, self.labels) if bit]

    def is_healthy(self) -> bool:
        """All-zero label vector, the "No Finding" convention."""
        return not self.labels.any()


@dataclass
class CorpusManifest:
    records: list[ImageRecord]
    label_vocab: list[str]

    def __len__(self) -> int:
        return len(self.records)

    def split(self, name: str) -> list[ImageRecord]:
        if name not in SPLITS:
            raise MalformedManifest(f"unknown split {name!r}, expected one of {SPLITS}")
        return [r for r in self.records if r.split == name]

    def by_id(self, record_id: str) -> ImageRecord:
        for r in self.records:
            if r.id == record_id:
                return r
        raise MissingFile(f"no record with id {record_id!r}")


@dataclass
class SyntheticSpec:
    """Recipe for the procedural two-ellipse corpus.

    Each image holds two elliptical "lungs" filled with one of
    ``texture_classes`` procedural textures against a bright structured
    background, so texture class is decidable in-lung and lungs are
    separable from background by intensity. Geometry ranges are fractions
    of the image side.
    """

    n_images: int
    resolution: int = 64
    texture_classes: int = 2
    seed: int = 0
    # (low, high) fractional ranges for ellipse geometry
    center_y_range: tuple[float, float] = (0.42, 0.58)
    center_x_offset_range: tuple[float, float] = (0.22, 0.30)  # from midline
    semi_axis_y_range: tuple[float, float] = (0.24, 0.34)
    semi_axis_x_range: tuple[float, float] = (0.12, 0.18)
    rotation_range_deg: tuple[float, float] = (-12.0, 12.0)
    # per-class procedural noise: (blur sigma as fraction of side, low,
    # high, contrast). contrast > 1 pushes values toward the extremes,
    # turning fine noise into coarse-looking grain.
    texture_params: tuple[tuple[float, float, float, float], ...] = (
        (0.10, 0.18, 0.48, 1.0),  # smooth low-frequency cloud
        (0.014, 0.06, 0.60, 4.0),  # high-frequency bimodal speckle
    )

    def __post_init__(self) -> None:
        if self.n_images <= 0:
            raise ValueError("n_images must be positive")
        if self.texture_classes < 2:
            raise ValueError("texture_classes must be at least 2")
        if len(self.texture_params) < self.texture_classes:
            raise ValueError("texture_params must cover every class")
        outer = self.center_x_offset_range[1] + self.semi_axis_x_range[1]
        if outer >= 0.5 or self.center_y_range[1] + self.semi_axis_y_range[1] >= 1.0:
            raise ValueError("ellipse geometry ranges leave the frame")

    def label_vocab(self) -> list[str]:
        return [f"texture_class_{c}" for c in range(self.texture_classes)]


def read_image(path: Path | str) -> np.ndarray:
    """Load an 8- or 16-bit grayscale PNG as a 2-D array of raw values."""
    try:
        arr = np.asarray(Image.open(path))
    except (OSError, ValueError) as exc:
        raise MissingFile(f"cannot read image {path}: {exc}") from exc
    if arr.ndim == 3:  # tolerate accidental RGB by taking one channel
        arr = arr[..., 0]
    if arr.ndim != 2:
        raise MissingFile(f"{path} is not a 2-D grayscale image")
    return arr


def read_mask(path: Path | str, resolution: int | None = None) -> np.ndarray:
    """Load a mask PNG as a boolean array (> 127 means lung).

    When ``resolution`` is given the mask is resized with nearest-neighbor
    interpolation, preserving binarity.
    """
    arr = read_image(path)
    if resolution is not None and arr.shape != (resolution, resolution):
        img = Image.fromarray(arr.astype(np.uint8), mode="L")
        arr = np.asarray(img.resize((resolution, resolution), Image.NEAREST))
    return arr > 127


def write_image(path: Path | str, pixels: np.ndarray) -> None:
    """Write a [0, 1] float array (or uint8/uint16 array) as grayscale PNG."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if pixels.dtype == np.uint8:
            img = Image.fromarray(pixels, mode="L")
        elif pixels.dtype == np.uint16:
            img = Image.fromarray(pixels.astype(np.uint16))
        else:
            quantized = np.clip(np.rint(np.clip(pixels, 0.0, 1.0) * 255), 0, 255)
            img = Image.fromarray(quantized.astype(np.uint8), mode="L")
        img.save(path, format="PNG")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def equalize(raw: np.ndarray) -> np.ndarray:
    """Global histogram equalization over 256 bins, output in [0, 1].

    Values are binned over the image's own range, mapped through the
    normalized CDF, and quantized to the 256-level grid; a constant image
    maps to 0. The lookup table is built in integer arithmetic (pixel
    counts), so re-equalizing an equalized image reproduces it exactly.
    """
    if raw.size == 0:
        raise EmptyImage("cannot equalize an image with zero pixels")
    values = raw.astype(np.float64)
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        return np.zeros(raw.shape, dtype=np.float32)
    bins = np.floor(0.5 + (values - lo) * (255.0 / (hi - lo))).astype(np.int64)
    hist = np.bincount(bins.ravel(), minlength=256)
    counts = np.cumsum(hist)
    occupied = np.nonzero(hist)[0]
    # Round-half-up of 255*(cdf-cdf_min)/(1-cdf_min) in integer arithmetic.
    # cdf_min is iterated to a fixed point: every occupied bin that lands on
    # level 0 is folded into it, so re-equalizing reproduces the output
    # exactly (the merged histogram yields the identical lookup table).
    count_min = int(counts[occupied[0]])
    while True:
        denom = int(raw.size - count_min)
        if denom == 0:  # all mass at level 0
            return np.zeros(raw.shape, dtype=np.float32)
        levels = (2 * 255 * np.maximum(counts - count_min, 0) + denom) // (2 * denom)
        zero_bins = occupied[levels[occupied] == 0]
        new_count_min = int(counts[zero_bins[-1]])
        if new_count_min == count_min:
            break
        count_min = new_count_min
    lut = levels.astype(np.float64) / 255.0
    return lut[bins].astype(np.float32)


def resize(pixels: np.ndarray, resolution: int) -> np.ndarray:
    """Bilinear resize of a float image to a square ``resolution``.

    Uses plain (non-antialiased) bilinear sampling so that axis-aligned
    structure maps exactly: a factor-2 downscale averages pixel pairs.
    """
    if pixels.shape == (resolution, resolution):
        return pixels.astype(np.float32)
    import torch
    import torch.nn.functional as F

    t = torch.from_numpy(np.ascontiguousarray(pixels, dtype=np.float32))[None, None]
    out = F.interpolate(
        t, size=(resolution, resolution), mode="bilinear", align_corners=False, antialias=False
    )[0, 0].numpy()
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def preprocess(raw: np.ndarray, resolution: int = 256) -> NormalizedImage:
    """Equalize (256 bins, global), then resize to ``resolution``, in [0, 1]."""
    if raw.ndim != 2:
        raise EmptyImage(f"expected a 2-D single-channel image, got shape {raw.shape}")
    return resize(equalize(raw), resolution)


def load_normalized(record: ImageRecord, resolution: int) -> NormalizedImage:
    return preprocess(read_image(record.image_path), resolution)


def _sidecar_path(manifest_path: Path) -> Path:
    return manifest_path.with_name(manifest_path.stem + ".labels.txt")


def save_manifest(manifest: CorpusManifest, path: Path | str) -> None:
    """Write the CSV plus the vocabulary sidecar, with paths relativized."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    root = path.parent.resolve()

    def rel(p: Path) -> str:
        p = Path(p).resolve()
        try:
            return p.relative_to(root).as_posix()
        except ValueError:
            return str(p)

    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(MANIFEST_COLUMNS)
            for r in manifest.records:
                names = ";".join(r.label_names(manifest.label_vocab))
                writer.writerow([r.id, rel(r.image_path), rel(r.mask_path), names, r.split, r.domain])
        _sidecar_path(path).write_text("".join(f"{n}\n" for n in manifest.label_vocab))
    except OSError as exc:
        raise IoFailure(f"cannot write manifest {path}: {exc}") from exc


def load_manifest(path: Path | str, validate: bool = True) -> CorpusManifest:
    """Load and validate a manifest CSV plus its vocabulary sidecar.

    ``validate=True`` checks eagerly that every referenced file exists and
    that image and mask decode to the same height and width (PNG headers
    only, no pixel decode). ``validate=False`` defers those checks to
    first use.
    """
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"manifest {path} does not exist")
    sidecar = _sidecar_path(path)
    if not sidecar.exists():
        raise MalformedManifest(f"label vocabulary sidecar {sidecar} is missing")
    vocab = [line.strip() for line in sidecar.read_text().splitlines() if line.strip()]
    index = {name: i for i, name in enumerate(vocab)}
    root = path.parent

    records: list[ImageRecord] = []
    seen: set[str] = set()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != MANIFEST_COLUMNS:
            raise MalformedManifest(
                f"{path}: expected header {','.join(MANIFEST_COLUMNS)}, got {header}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_COLUMNS):
                raise MalformedManifest(f"{path}:{lineno}: expected {len(MANIFEST_COLUMNS)} columns")
            rid, image_path, mask_path, labels_field, split, domain = row
            if rid in seen:
                raise DuplicateId(f"{path}:{lineno}: duplicate id {rid!r}")
            seen.add(rid)
            if split not in SPLITS:
                raise MalformedManifest(f"{path}:{lineno}: unknown split {split!r}")
            labels = np.zeros(len(vocab), dtype=np.uint8)
            for name in filter(None, labels_field.split(";")):
                if name not in index:
                    raise MalformedManifest(f"{path}:{lineno}: label {name!r} not in vocabulary")
                labels[index[name]] = 1
            records.append(
                ImageRecord(
                    id=rid,
                    image_path=(root / image_path).resolve() if not Path(image_path).is_absolute() else Path(image_path),
                    mask_path=(root / mask_path).resolve() if not Path(mask_path).is_absolute() else Path(mask_path),
                    labels=labels,
                    split=split,
                    domain=domain,
                )
            )
    manifest = CorpusManifest(records=records, label_vocab=vocab)
    if validate:
        validate_manifest(manifest)
    return manifest


def validate_manifest(manifest: CorpusManifest) -> None:
    """Check file existence and image/mask shape agreement for every record."""
    for r in manifest.records:
        for p in (r.image_path, r.mask_path):
            if not Path(p).exists():
                raise MissingFile(f"record {r.id!r}: {p} does not exist")
        try:
            with Image.open(r.image_path) as img, Image.open(r.mask_path) as mask:
                if img.size != mask.size:
                    raise MissingFile(
                        f"record {r.id!r}: image is {img.size} but mask is {mask.size}"
                    )
        except OSError as exc:
            raise MissingFile(f"record {r.id!r}: unreadable file ({exc})") from exc
        if len(r.labels) != len(manifest.label_vocab):
            raise MalformedManifest(
                f"record {r.id!r}: label vector length {len(r.labels)} != vocabulary size"
            )


def sample_swap_pairs(
    manifest: CorpusManifest,
    positive_labels: set[str],
    n_pairs: int,
    seed: int,
    healthy_labels: set[str] | None = None,
    split: str | None = None,
) -> list[tuple[ImageRecord, ImageRecord]]:
    """Pair positive records with distinct healthy records, seeded.

    A record is positive when it carries at least one label from
    ``positive_labels``. "Healthy" defaults to the all-zero label vector
    (the "No Finding" convention); pass ``healthy_labels`` to instead
    match records carrying one of those labels and none of the positive
    ones, which is how the one-hot synthetic corpus is paired.
    """
    unknown = positive_labels - set(manifest.label_vocab)
    if unknown:
        raise MalformedManifest(f"positive labels {sorted(unknown)} not in vocabulary")
    pool = manifest.records if split is None else manifest.split(split)
    pos_idx = {manifest.label_vocab.index(name) for name in positive_labels}

    def is_positive(r: ImageRecord) -> bool:
        return any(r.labels[i] for i in pos_idx)

    if healthy_labels is None:
        healthy_pool = [r for r in pool if r.is_healthy()]
    else:
        unknown = healthy_labels - set(manifest.label_vocab)
        if unknown:
            raise MalformedManifest(f"healthy labels {sorted(unknown)} not in vocabulary")
        healthy_idx = {manifest.label_vocab.index(name) for name in healthy_labels}
        healthy_pool = [
            r for r in pool if any(r.labels[i] for i in healthy_idx) and not is_positive(r)
        ]
    positive_pool = [r for r in pool if is_positive(r)]

    if len(positive_pool) < n_pairs or len(healthy_pool) < n_pairs:
        raise InsufficientRecords(
            f"need {n_pairs} pairs but have {len(positive_pool)} positive "
            f"and {len(healthy_pool)} healthy records"
        )
    rng = np.random.default_rng(seed)
    pos_order = rng.permutation(len(positive_pool))[:n_pairs]
    neg_order = rng.permutation(len(healthy_pool))[:n_pairs]
    return [(positive_pool[i], healthy_pool[j]) for i, j in zip(pos_order, neg_order)]


def band_pass_response(image: np.ndarray, sigma_fine: float = 1.0, sigma_coarse: float = 3.0) -> np.ndarray:
    """Difference-of-Gaussians response used to check texture separation."""
    img = image.astype(np.float64)
    return gaussian_filter(img, sigma_fine) - gaussian_filter(img, sigma_coarse)


def _ellipse_mask(res: int, cy: float, cx: float, ay: float, ax: float, theta_deg: float) -> np.ndarray:
    yy, xx = np.mgrid[0:res, 0:res]
    y = (yy + 0.5) / res - cy
    x = (xx + 0.5) / res - cx
    t = np.deg2rad(theta_deg)
    yr = y * np.cos(t) - x * np.sin(t)
    xr = y * np.sin(t) + x * np.cos(t)
    return (yr / ay) ** 2 + (xr / ax) ** 2 <= 1.0


def _background(res: int, rng: np.random.Generator) -> np.ndarray:
    """Structured bright background posterized to a few discrete levels.

    Quantization keeps the background's mass on isolated value levels, so
    even after rank-uniformizing histogram equalization an empty band
    separates it from the darker lung textures (threshold segmentation
    stays well-posed).
    """
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64) / res
    gy, gx = rng.uniform(-0.14, 0.14, size=2)
    ramp = gy * (yy - 0.5) + gx * (xx - 0.5)
    ramp += 0.05 * np.cos(np.pi * (yy - 0.5)) * np.cos(np.pi * (xx - 0.5))
    span = ramp.max() - ramp.min()
    idx = np.clip(np.floor((ramp - ramp.min()) / (span + 1e-12) * 3), 0, 2).astype(int)
    bg = np.array([0.74, 0.82, 0.90])[idx]
    step = int(rng.integers(10, 15))
    bg[int(rng.integers(step)) :: step, :] = 0.68
    bg[:, int(rng.integers(step)) :: step] = 0.68
    return bg


def _texture(res: int, params: tuple[float, float, float, float], rng: np.random.Generator) -> np.ndarray:
    sigma_frac, low, high, contrast = params
    noise = rng.standard_normal((res, res))
    smooth = gaussian_filter(noise, max(sigma_frac * res, 0.35))
    span = smooth.max() - smooth.min()
    unit = (smooth - smooth.min()) / (span if span > 0 else 1.0)
    if contrast != 1.0:
        unit = 0.5 + 0.5 * np.tanh(contrast * (unit - 0.5)) / np.tanh(contrast * 0.5)
    return low + unit * (high - low)


def synthesize_image(spec: SyntheticSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, int]:
    """Draw one (image, mask, texture_class) triple from the spec's ranges."""
    res = spec.resolution
    cls = int(rng.integers(spec.texture_classes))
    canvas = _background(res, rng)

    cy = rng.uniform(*spec.center_y_range)
    offset = rng.uniform(*spec.center_x_offset_range)
    mask = np.zeros((res, res), dtype=bool)
    texture = _texture(res, spec.texture_params[cls], rng)
    for side in (-1.0, 1.0):
        ay = rng.uniform(*spec.semi_axis_y_range)
        ax = rng.uniform(*spec.semi_axis_x_range)
        theta = rng.uniform(*spec.rotation_range_deg) * side
        lung = _ellipse_mask(res, cy + rng.uniform(-0.02, 0.02), 0.5 + side * offset, ay, ax, theta)
        mask |= lung
    canvas = np.where(mask, texture, canvas)
    return canvas.astype(np.float32), mask, cls


def generate_synthetic_corpus(spec: SyntheticSpec, out_dir: Path | str) -> CorpusManifest:
    """Write ``spec.n_images`` image+mask PNG pairs plus a manifest.

    Deterministic given ``spec.seed``: every image uses its own seed
    substream, so reruns are byte-identical. Splits follow the ~70/10/20
    convention via a seeded shuffle. Labels are the one-hot texture class.
    """
    out_dir = Path(out_dir)
    images_dir, masks_dir = out_dir / "images", out_dir / "masks"
    vocab = spec.label_vocab()
    rng_split = np.random.default_rng([spec.seed, 0xA])
    order = rng_split.permutation(spec.n_images)
    n_train = int(round(spec.n_images * 0.7))
    n_val = int(round(spec.n_images * 0.1))
    split_of = {}
    for rank, idx in enumerate(order):
        split_of[int(idx)] = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")

    records = []
    width = max(5, len(str(spec.n_images - 1)))
    for i in range(spec.n_images):
        rng = np.random.default_rng([spec.seed, 1, i])
        pixels, mask, cls = synthesize_image(spec, rng)
        name = f"syn_{i:0{width}d}"
        image_path = images_dir / f"{name}.png"
        mask_path = masks_dir / f"{name}.png"
        write_image(image_path, pixels)
        write_image(mask_path, np.where(mask, 255, 0).astype(np.uint8))
        labels = np.zeros(len(vocab), dtype=np.uint8)
        labels[cls] = 1
        records.append(
            ImageRecord(
                id=name,
                image_path=image_path.resolve(),
                mask_path=mask_path.resolve(),
                labels=labels,
                split=split_of[i],
                domain="synthetic",
            )
        )
    manifest = CorpusManifest(records=records, label_vocab=vocab)
    save_manifest(manifest, out_dir / "manifest.csv")
    return manifest
