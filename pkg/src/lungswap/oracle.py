"""Independent texture-class judge for verification.

A small convolutional classifier trained directly on a synthetic corpus.
It never shares weights with the autoencoder, so it can referee texture
transfer (does a hybrid carry the texture source's class?) and provide
deep features for the masked Frechet metric.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .corpus import CorpusManifest, ImageRecord, load_normalized


class TextureOracle(nn.Module):
    """Tiny CNN; `features(x, layer)` exposes intermediate maps.

    The input is stacked with its own Laplacian response so local texture
    energy is visible from the first layer. Layers: 0 = stem (full res),
    1 = 1/2 res, 2 = 1/4 res, 3 = 1/8 res. The head reads concatenated
    average- and max-pooled features: texture lives in a minority of
    pixels, so a pure average would drown it in background.
    """

    LAPLACIAN = torch.tensor([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])

    def __init__(self, n_classes: int = 2, width: int = 16):
        super().__init__()
        w = width
        self.register_buffer("lap_kernel", self.LAPLACIAN.view(1, 1, 3, 3))
        self.stem = nn.Conv2d(2, w, 3, padding=1)
        self.conv1 = nn.Conv2d(w, 2 * w, 3, padding=1)
        self.conv2 = nn.Conv2d(2 * w, 4 * w, 3, padding=1)
        self.conv3 = nn.Conv2d(4 * w, 4 * w, 3, padding=1)
        # No normalization layers: per-image response energy is the signal.
        self.head = nn.Linear(8 * w, n_classes)
        self.n_classes = n_classes

    def _stages(self, x: torch.Tensor):
        lap = F.conv2d(F.pad(x, (1, 1, 1, 1), mode="replicate"), self.lap_kernel)
        # rectified and rescaled so texture energy matches the image's
        # dynamic range at init; without this the first layers start
        # nearly blind to the fine-scale signal
        h = F.leaky_relu(self.stem(torch.cat([x, 4.0 * lap.abs()], dim=1)), 0.2)
        yield h
        h = F.leaky_relu(self.conv1(F.avg_pool2d(h, 2)), 0.2)
        yield h
        h = F.leaky_relu(self.conv2(F.avg_pool2d(h, 2)), 0.2)
        yield h
        h = F.leaky_relu(self.conv3(F.avg_pool2d(h, 2)), 0.2)
        yield h

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for h in self._stages(x):
            pass
        pooled = torch.cat([h.mean(dim=(2, 3)), h.amax(dim=(2, 3))], dim=1)
        return self.head(pooled)

    @torch.no_grad()
    def features(self, image: np.ndarray, layer: int = 2) -> np.ndarray:
        """Feature map (C, h, w) of one [0,1] grayscale image at `layer`."""
        x = torch.from_numpy(np.asarray(image, dtype=np.float32))[None, None]
        for i, h in enumerate(self._stages(x)):
            if i == layer:
                return h[0].numpy()
        raise ValueError(f"layer {layer} out of range")

    @torch.no_grad()
    def classify(self, images: np.ndarray) -> np.ndarray:
        """Predicted class indices for a (B, H, W) stack of [0,1] images."""
        x = torch.from_numpy(np.asarray(images, dtype=np.float32))[:, None]
        return self.forward(x).argmax(dim=1).numpy()


def record_class(record: ImageRecord) -> int:
    """Texture class encoded by a one-hot label vector (0 when unlabeled)."""
    return int(record.labels.argmax()) if record.labels.any() else 0


def _load_split(manifest: CorpusManifest, split: str, resolution: int):
    records = manifest.split(split)
    images = np.stack([load_normalized(r, resolution) for r in records])
    classes = np.array([record_class(r) for r in records], dtype=np.int64)
    return images, classes


def train_texture_oracle(
    manifest: CorpusManifest,
    resolution: int = 64,
    epochs: int = 6,
    batch_size: int = 64,
    lr: float = 2e-3,
    seed: int = 0,
    width: int = 16,
) -> tuple[TextureOracle, float]:
    """Train the judge on the manifest's train split.

    Returns the trained model (eval mode) and its accuracy on the test
    split. Deterministic given the seed.
    """
    torch.manual_seed(seed)
    n_classes = max(len(manifest.label_vocab), 2)
    model = TextureOracle(n_classes=n_classes, width=width)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    images, classes = _load_split(manifest, "train", resolution)
    x_all = torch.from_numpy(images)[:, None]
    y_all = torch.from_numpy(classes)

    rng = np.random.default_rng(seed)
    model.train()
    for _ in range(epochs):
        order = rng.permutation(len(x_all))
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            logits = model(x_all[idx])
            loss = F.cross_entropy(logits, y_all[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    model.eval()

    test_images, test_classes = _load_split(manifest, "test", resolution)
    predictions = model.classify(test_images)
    accuracy = float((predictions == test_classes).mean())
    return model, accuracy


def save_oracle(oracle: TextureOracle, path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "state": oracle.state_dict(),
            "n_classes": oracle.n_classes,
            "width": oracle.stem.out_channels,
        },
        path,
    )


def load_oracle(path: Path | str) -> TextureOracle:
    payload = torch.load(path, weights_only=True)
    oracle = TextureOracle(n_classes=payload["n_classes"], width=payload["width"])
    oracle.load_state_dict(payload["state"])
    oracle.eval()
    return oracle
