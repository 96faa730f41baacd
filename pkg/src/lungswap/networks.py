"""The five learnable components: structure encoder, texture encoder,
decoder, image discriminator, and patch co-occurrence discriminator, plus
the composite swap generator and checkpoint serialization.

The decoder follows the modulated-convolution recipe: the flattened
texture vector drives a per-layer affine that scales convolution weights
(with demodulation), while the spatial structure code is the only spatial
input. No component has stochastic layers, so everything is a pure
function of its inputs in eval mode.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .errors import EmptyReferenceSet, MissingComponent, ShapeMismatch

COMPONENT_NAMES = ("enc_s", "enc_t", "dec", "d_img", "d_patch")
META_FILE = "meta.pt"


@dataclass
class NetworkConfig:
    image_size: int = 256
    structure_channels: int = 8  # channels of the spatial code
    downsample_factor: int = 16  # image side / structure grid side
    texture_dim: int = 2048
    base_width: int = 32
    structure_max_width: int = 256
    texture_max_width: int = 448
    disc_max_width: int = 256
    n_ref_patches: int = 4
    patch_size: int = 64  # common operating side for the patch discriminator
    # indices into the structure encoder's stage outputs used by the
    # contrastive structure loss; None means every stage
    nce_layers: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        f = self.downsample_factor
        if f < 2 or (f & (f - 1)) != 0:
            raise ValueError("downsample_factor must be a power of two >= 2")
        if self.image_size % f != 0:
            raise ValueError("image_size must be divisible by downsample_factor")
        n_stages = self.n_structure_stages
        if self.nce_layers is not None:
            if not self.nce_layers or any(not 0 <= i < n_stages for i in self.nce_layers):
                raise ValueError(f"nce_layers must be non-empty indices in [0, {n_stages})")

    @property
    def n_structure_stages(self) -> int:
        return int(math.log2(self.downsample_factor))

    @property
    def nce_layer_indices(self) -> tuple[int, ...]:
        if self.nce_layers is not None:
            return tuple(self.nce_layers)
        return tuple(range(self.n_structure_stages))


def _ladder(base: int, n: int, cap: int) -> list[int]:
    return [min(base * 2 ** (i + 1), cap) for i in range(n)]


_LAPLACIAN = torch.tensor([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]]).view(1, 1, 3, 3)


def stack_texture_channel(x: torch.Tensor) -> torch.Tensor:
    """Append a rectified, rescaled Laplacian response as a second channel.

    Texture-sensitive components start nearly blind to fine-grain energy
    because it occupies a tiny fraction of the input's dynamic range; the
    fixed band-pass channel makes it linearly visible from the first layer.
    """
    lap = F.conv2d(F.pad(x, (1, 1, 1, 1), mode="replicate"), _LAPLACIAN.to(x.dtype))
    return torch.cat([x, 4.0 * lap.abs()], dim=1)


class ResDownBlock(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.leaky_relu(self.conv1(x), 0.2)
        h = F.leaky_relu(self.conv2(h), 0.2)
        out = (h + self.skip(x)) * (1.0 / math.sqrt(2.0))
        return F.avg_pool2d(out, 2)


def _check_images(x: torch.Tensor, size: int) -> torch.Tensor:
    if x.dim() == 3:
        x = x.unsqueeze(1)
    if x.dim() != 4 or x.shape[1] != 1 or x.shape[2] != size or x.shape[3] != size:
        raise ShapeMismatch(f"expected (B, 1, {size}, {size}) images, got {tuple(x.shape)}")
    return x


class StructureEncoder(nn.Module):
    """Residual downsampling encoder with a spatial output code."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        widths = _ladder(config.base_width, config.n_structure_stages, config.structure_max_width)
        self.stem = nn.Conv2d(1, config.base_width, 3, padding=1)
        blocks, cin = [], config.base_width
        for w in widths:
            blocks.append(ResDownBlock(cin, w))
            cin = w
        self.blocks = nn.ModuleList(blocks)
        self.to_code = nn.Conv2d(cin, config.structure_channels, 1)
        self.stage_widths = widths

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """Returns (spatial code, per-stage feature maps)."""
        x = _check_images(x, self.config.image_size)
        h = F.leaky_relu(self.stem(x), 0.2)
        feats = []
        for block in self.blocks:
            h = block(h)
            feats.append(h)
        return self.to_code(h), feats


class TextureEncoder(nn.Module):
    """Residual downsampling encoder pooled to a flattened vector."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        n_stages = max(int(math.log2(config.image_size)) - 4, 1)
        widths = _ladder(config.base_width, n_stages, config.texture_max_width)
        self.stem = nn.Conv2d(2, config.base_width, 3, padding=1)
        blocks, cin = [], config.base_width
        for w in widths:
            blocks.append(ResDownBlock(cin, w))
            cin = w
        self.blocks = nn.ModuleList(blocks)
        self.to_vector = nn.Linear(cin, config.texture_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = _check_images(x, self.config.image_size)
        h = F.leaky_relu(self.stem(stack_texture_channel(x)), 0.2)
        for block in self.blocks:
            h = block(h)
        return self.to_vector(h.mean(dim=(2, 3)))


class ModulatedConv2d(nn.Module):
    """3x3 convolution whose weights are scaled per-sample by a style
    affine of the texture vector, with weight demodulation."""

    def __init__(self, cin: int, cout: int, texture_dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(cout, cin, 3, 3) / math.sqrt(cin * 9))
        self.bias = nn.Parameter(torch.zeros(cout))
        # bias 1 centers modulation on identity; the default weight init
        # keeps the texture vector influential from the first step
        self.affine = nn.Linear(texture_dim, cin)
        nn.init.ones_(self.affine.bias)

    def forward(self, x: torch.Tensor, texture: torch.Tensor) -> torch.Tensor:
        # Equivalent to convolving with the per-sample modulated/demodulated
        # weight w * s * rsqrt(sum((w*s)^2)): input-channel scaling commutes
        # through the convolution and the demodulation factor scales the
        # output channels. This form uses the fast ungrouped conv kernel.
        style = self.affine(texture)  # (B, cin)
        w2 = self.weight.pow(2).sum(dim=(2, 3))  # (cout, cin)
        demod = torch.rsqrt(style.pow(2) @ w2.T + 1e-8)  # (B, cout)
        out = F.conv2d(x * style[:, :, None, None], self.weight, padding=1)
        return out * demod[:, :, None, None] + self.bias[None, :, None, None]


class Decoder(nn.Module):
    """Upsampling decoder; every convolution is texture-modulated."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        n_stages = config.n_structure_stages
        enc_widths = _ladder(config.base_width, n_stages, config.structure_max_width)
        widths = list(reversed(enc_widths))  # widest at the coarsest grid
        self.from_code = ModulatedConv2d(config.structure_channels, widths[0], config.texture_dim)
        ups = []
        cin = widths[0]
        for w in widths[1:] + [max(config.base_width, widths[-1] // 2)]:
            ups.append(nn.ModuleList([
                ModulatedConv2d(cin, w, config.texture_dim),
                ModulatedConv2d(w, w, config.texture_dim),
            ]))
            cin = w
        self.up_stages = nn.ModuleList(ups)
        self.to_image = nn.Conv2d(cin, 1, 1)

    def forward(self, structure: torch.Tensor, texture: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        grid = cfg.image_size // cfg.downsample_factor
        if structure.dim() != 4 or structure.shape[1:] != (cfg.structure_channels, grid, grid):
            raise ShapeMismatch(
                f"expected structure code (B, {cfg.structure_channels}, {grid}, {grid}), "
                f"got {tuple(structure.shape)}"
            )
        if texture.dim() != 2 or texture.shape[1] != cfg.texture_dim:
            raise ShapeMismatch(
                f"expected texture vector (B, {cfg.texture_dim}), got {tuple(texture.shape)}"
            )
        if structure.shape[0] != texture.shape[0]:
            raise ShapeMismatch("structure and texture batch sizes differ")
        h = F.leaky_relu(self.from_code(structure, texture), 0.2)
        for conv_a, conv_b in self.up_stages:
            h = F.interpolate(h, scale_factor=2, mode="bilinear", align_corners=False)
            h = F.leaky_relu(conv_a(h, texture), 0.2)
            h = F.leaky_relu(conv_b(h, texture), 0.2)
        # linear output: a saturating nonlinearity here can strand the
        # generator when the discriminators get ahead early
        return self.to_image(h)


class ImageDiscriminator(nn.Module):
    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        n_stages = int(math.log2(config.image_size)) - 2  # down to 4x4
        widths = _ladder(config.base_width, n_stages, config.disc_max_width)
        self.stem = nn.Conv2d(2, config.base_width, 3, padding=1)
        blocks, cin = [], config.base_width
        for w in widths:
            blocks.append(ResDownBlock(cin, w))
            cin = w
        self.blocks = nn.ModuleList(blocks)
        self.final = nn.Conv2d(cin, cin, 3, padding=1)
        self.fc = nn.Linear(cin * 16, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = _check_images(x, self.config.image_size)
        h = F.leaky_relu(self.stem(stack_texture_channel(x)), 0.2)
        for block in self.blocks:
            h = block(h)
        h = F.leaky_relu(self.final(h), 0.2)
        return self.fc(h.flatten(1)).squeeze(1)


class PatchCooccurrenceDiscriminator(nn.Module):
    """Judges whether a query patch shares texture with reference patches.

    A shared embedder encodes each patch; reference embeddings are mean
    pooled (order invariant), concatenated with the query embedding, and
    scored by a two-layer head.
    """

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        n_stages = int(math.log2(config.patch_size)) - 2  # down to 4x4
        widths = _ladder(config.base_width, n_stages, config.disc_max_width)
        self.stem = nn.Conv2d(2, config.base_width, 3, padding=1)
        blocks, cin = [], config.base_width
        for w in widths:
            blocks.append(ResDownBlock(cin, w))
            cin = w
        self.blocks = nn.ModuleList(blocks)
        self.embed_dim = cin
        self.embed_fc = nn.Linear(cin * 16, cin)
        self.head = nn.Sequential(
            nn.Linear(2 * cin, cin),
            nn.LeakyReLU(0.2),
            nn.Linear(cin, 1),
        )

    def embed(self, patches: torch.Tensor) -> torch.Tensor:
        p = self.config.patch_size
        if patches.dim() != 4 or patches.shape[1] != 1 or patches.shape[2:] != (p, p):
            raise ShapeMismatch(f"expected (N, 1, {p}, {p}) patches, got {tuple(patches.shape)}")
        h = F.leaky_relu(self.stem(stack_texture_channel(patches)), 0.2)
        for block in self.blocks:
            h = block(h)
        return self.embed_fc(h.flatten(1))

    def forward(self, references: torch.Tensor, query: torch.Tensor) -> torch.Tensor:
        """references: (B, n_ref, 1, P, P); query: (B, 1, P, P) -> (B,) logits."""
        if references.dim() != 5:
            raise ShapeMismatch(f"expected 5-D reference stack, got {tuple(references.shape)}")
        b, n_ref = references.shape[:2]
        if n_ref == 0:
            raise EmptyReferenceSet("patch co-occurrence needs at least one reference patch")
        if query.shape[0] != b:
            raise ShapeMismatch("reference and query batch sizes differ")
        ref_embed = self.embed(references.reshape(b * n_ref, *references.shape[2:]))
        ref_embed = ref_embed.reshape(b, n_ref, -1).mean(dim=1)
        q_embed = self.embed(query)
        return self.head(torch.cat([ref_embed, q_embed], dim=1)).squeeze(1)


@dataclass
class LatentCodes:
    structure: torch.Tensor  # (B, C_s, H/f, W/f)
    texture: torch.Tensor  # (B, texture_dim)


class LungSwapModel(nn.Module):
    """Container for all five components plus the composite generator."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        self.enc_s = StructureEncoder(config)
        self.enc_t = TextureEncoder(config)
        self.dec = Decoder(config)
        self.d_img = ImageDiscriminator(config)
        self.d_patch = PatchCooccurrenceDiscriminator(config)

    def encode_structure(self, images: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        return self.enc_s(images)

    def encode_texture(self, images: torch.Tensor) -> torch.Tensor:
        return self.enc_t(images)

    def encode(self, images: torch.Tensor) -> LatentCodes:
        return LatentCodes(self.enc_s(images)[0], self.enc_t(images))

    def decode(self, codes: LatentCodes) -> torch.Tensor:
        return self.dec(codes.structure, codes.texture)

    def swap_generate(self, structure_images: torch.Tensor, texture_images: torch.Tensor) -> torch.Tensor:
        """Hybrid batch: structure of the first argument, texture of the second.

        With the same batch twice this is the reconstruction path.
        """
        code, _ = self.enc_s(structure_images)
        return self.dec(code, self.enc_t(texture_images))

    def discriminate(self, images: torch.Tensor) -> torch.Tensor:
        return self.d_img(images)

    def discriminate_patch(self, references: torch.Tensor, query: torch.Tensor) -> torch.Tensor:
        return self.d_patch(references, query)

    def generator_parameters(self):
        yield from self.enc_s.parameters()
        yield from self.enc_t.parameters()
        yield from self.dec.parameters()

    def discriminator_parameters(self):
        yield from self.d_img.parameters()
        yield from self.d_patch.parameters()


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def save_checkpoint(
    model: LungSwapModel,
    directory: Path | str,
    iteration: int,
    rng_state: dict | None = None,
    optimizer_state: dict | None = None,
) -> Path:
    """One file per component plus meta.pt (config, iteration, RNG state)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in COMPONENT_NAMES:
        torch.save(getattr(model, name).state_dict(), directory / f"{name}.pt")
    meta = {
        "config": dataclasses.asdict(model.config),
        "iteration": iteration,
        "rng_state": rng_state if rng_state is not None else {"torch": torch.get_rng_state()},
        "optimizer_state": optimizer_state,
    }
    torch.save(meta, directory / META_FILE)
    return directory


def load_checkpoint(directory: Path | str) -> tuple[LungSwapModel, dict]:
    """Rebuild the model from a checkpoint directory; returns (model, meta)."""
    directory = Path(directory)
    meta_path = directory / META_FILE
    if not meta_path.exists():
        raise MissingComponent(f"checkpoint {directory} has no {META_FILE}")
    meta = torch.load(meta_path, weights_only=False)
    cfg_dict = dict(meta["config"])
    if cfg_dict.get("nce_layers") is not None:
        cfg_dict["nce_layers"] = tuple(cfg_dict["nce_layers"])
    model = LungSwapModel(NetworkConfig(**cfg_dict))
    for name in COMPONENT_NAMES:
        path = directory / f"{name}.pt"
        if not path.exists():
            raise MissingComponent(f"checkpoint {directory} lacks component {name}")
        getattr(model, name).load_state_dict(torch.load(path, weights_only=True))
    model.eval()
    return model, meta
