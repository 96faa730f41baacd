"""Differentiable training objectives: reconstruction, adversarial (both
sides, with the R1 gradient penalty), in-region texture supervision via the
patch co-occurrence discriminator, the patchwise contrastive loss, the
out-of-region structure suppression loss, and the weighted total.

All log-sigmoid terms go through softplus and every softmax through
max-subtracted logsumexp, so losses stay finite for arbitrary logits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import (
    DimensionMismatch,
    NonFiniteComponent,
    ShapeMismatch,
)
from .masking import PatchSample, sample_locations, sample_patch


@dataclass
class LossWeights:
    adversarial: float = 0.5  # weight of the generator adversarial term
    in_texture: float = 1.0  # weight of the in-region texture term
    suppression: float = 1.0  # weight of the structure suppression term
    nce_temperature: float = 0.07
    r1_gamma: float = 10.0
    r1_interval: int = 16

    def __post_init__(self) -> None:
        if min(self.adversarial, self.in_texture, self.suppression) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.nce_temperature <= 0:
            raise ValueError("nce_temperature must be positive")
        if self.r1_interval < 1:
            raise ValueError("r1_interval must be at least 1")


@dataclass
class LossBreakdown:
    recon: float
    adv_g: float
    in_tex: float
    sup: float
    total: float
    d_img_loss: float = 0.0
    d_patch_loss: float = 0.0
    r1_penalty: float = 0.0

    CSV_HEADER = "iteration,recon,adv_g,in_tex,sup,d_img,d_patch,r1,total"

    def csv_row(self, iteration: int) -> str:
        return (
            f"{iteration},{self.recon},{self.adv_g},{self.in_tex},{self.sup},"
            f"{self.d_img_loss},{self.d_patch_loss},{self.r1_penalty},{self.total}"
        )


def reconstruction_loss(images: torch.Tensor, reconstructions: torch.Tensor) -> torch.Tensor:
    """Mean absolute pixel difference."""
    if images.shape != reconstructions.shape:
        raise ShapeMismatch(f"{tuple(images.shape)} vs {tuple(reconstructions.shape)}")
    return (images - reconstructions).abs().mean()


def generator_adversarial_loss(
    recon_logits: torch.Tensor, hybrid_logits: torch.Tensor
) -> torch.Tensor:
    """Non-saturating loss on both generated paths: -log sigma(logit),
    mean over the batch, summed over the two paths."""
    return F.softplus(-recon_logits).mean() + F.softplus(-hybrid_logits).mean()


def discriminator_loss(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    """softplus(-real) + softplus(fake), each mean-reduced."""
    return F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean()


def r1_penalty(discriminator, real: torch.Tensor, gamma: float = 10.0) -> torch.Tensor:
    """(gamma/2) * E[ ||d D(x)/d x||^2 ] over the real batch."""
    real = real.detach().requires_grad_(True)
    logits = discriminator(real)
    (grads,) = torch.autograd.grad(
        logits.sum(), real, create_graph=True, allow_unused=True
    )
    if grads is None:  # discriminator constant in its input
        return real.new_zeros(())
    return (gamma / 2.0) * grads.flatten(1).pow(2).sum(dim=1).mean()


def _l2_normalize(v: torch.Tensor) -> torch.Tensor:
    return v / v.norm(dim=-1, keepdim=True).clamp_min(1e-12)


def nce_loss(
    q: torch.Tensor,
    p_plus: torch.Tensor,
    p_minus: torch.Tensor | None,
    alpha: float = 0.07,
) -> torch.Tensor:
    """Contrastive cross-entropy over cosine similarities.

    All vectors are L2-normalized here before the dot products. With no
    negatives the softmax is a single-class certainty and the loss is 0.
    """
    if q.dim() != 1 or p_plus.dim() != 1 or q.shape != p_plus.shape:
        raise DimensionMismatch(f"query {tuple(q.shape)} vs positive {tuple(p_plus.shape)}")
    q_hat = _l2_normalize(q)
    logits = [(q_hat * _l2_normalize(p_plus)).sum() / alpha]
    if p_minus is not None and p_minus.numel() > 0:
        if p_minus.dim() != 2 or p_minus.shape[1] != q.shape[0]:
            raise DimensionMismatch(
                f"negatives {tuple(p_minus.shape)} incompatible with query dim {q.shape[0]}"
            )
        logits.append(_l2_normalize(p_minus) @ q_hat / alpha)
    stacked = torch.cat([logit.reshape(-1) for logit in logits])
    return torch.logsumexp(stacked, dim=0) - stacked[0]


def nce_loss_grid(queries: torch.Tensor, keys: torch.Tensor, alpha: float = 0.07) -> torch.Tensor:
    """Mean contrastive loss over N aligned (query, key) rows.

    Row i's positive is key i; its negatives are every other key. This is
    the batched form of `nce_loss` (equality is property-tested).
    """
    if queries.shape != keys.shape or queries.dim() != 2:
        raise DimensionMismatch(f"{tuple(queries.shape)} vs {tuple(keys.shape)}")
    sims = _l2_normalize(queries) @ _l2_normalize(keys).T / alpha
    return (torch.logsumexp(sims, dim=1) - sims.diagonal()).mean()


def extract_rotated_patch(
    image: torch.Tensor,
    center: tuple[int, int],
    side: int,
    rotation: float,
    out_size: int | None = None,
) -> torch.Tensor:
    """Differentiable patch extraction matching the sampler's geometry.

    `image` is (H, W) or (1, H, W); the result is (1, side, side),
    bilinearly resized to (1, out_size, out_size) when requested. Uses the
    same rotated-grid bilinear math as the mask-guided sampler, so numpy
    and torch extractions agree pixelwise.
    """
    img = image.squeeze(0) if image.dim() == 3 else image
    h, w = img.shape
    offs = torch.arange(side, dtype=img.dtype, device=img.device) - (side - 1) / 2.0
    dr, dc = torch.meshgrid(offs, offs, indexing="ij")
    t = math.radians(rotation)
    rows = center[0] + dr * math.cos(t) - dc * math.sin(t)
    cols = center[1] + dr * math.sin(t) + dc * math.cos(t)
    r0 = rows.floor().long()
    c0 = cols.floor().long()
    fr, fc = rows - r0, cols - c0
    r0c, r1c = r0.clamp(0, h - 1), (r0 + 1).clamp(0, h - 1)
    c0c, c1c = c0.clamp(0, w - 1), (c0 + 1).clamp(0, w - 1)
    top = img[r0c, c0c] * (1 - fc) + img[r0c, c1c] * fc
    bot = img[r1c, c0c] * (1 - fc) + img[r1c, c1c] * fc
    patch = (top * (1 - fr) + bot * fr).unsqueeze(0)
    if out_size is not None and out_size != side:
        patch = F.interpolate(
            patch.unsqueeze(0), size=(out_size, out_size), mode="bilinear", align_corners=False
        ).squeeze(0)
    return patch


def in_lung_texture_loss(
    hybrid: torch.Tensor,
    texture_images: torch.Tensor,
    hybrid_masks: np.ndarray,
    texture_masks: np.ndarray,
    d_patch,
    rng: np.random.Generator,
    n_ref: int = 4,
    patch_size: int = 64,
    side_range: tuple[int, int] | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """In-region texture supervision; returns (generator, discriminator) sides.

    Reference patches come from the texture source's lung; the query patch
    comes from the hybrid's lung (the structure source's mask, since the
    hybrid inherits that geometry). The discriminator side scores the
    hybrid query as fake (detached) and a fresh all-real pair, with every
    patch drawn in-lung.
    """
    b = hybrid.shape[0]
    if texture_images.shape[0] != b or len(hybrid_masks) != b or len(texture_masks) != b:
        raise ShapeMismatch("batch sizes of images and masks differ")
    refs, fake_queries, real_queries = [], [], []
    for i in range(b):
        tex_np = texture_images[i, 0].detach().numpy()
        hyb_np = hybrid[i, 0].detach().numpy()
        item_refs = []
        for _ in range(n_ref):
            g = sample_patch(tex_np, texture_masks[i], "in", rng, side_range=side_range)
            item_refs.append(
                extract_rotated_patch(texture_images[i, 0], g.center, g.side, g.rotation, patch_size)
            )
        refs.append(torch.stack(item_refs))
        g = sample_patch(hyb_np, hybrid_masks[i], "in", rng, side_range=side_range)
        fake_queries.append(
            extract_rotated_patch(hybrid[i, 0], g.center, g.side, g.rotation, patch_size)
        )
        g = sample_patch(tex_np, texture_masks[i], "in", rng, side_range=side_range)
        real_queries.append(
            extract_rotated_patch(texture_images[i, 0], g.center, g.side, g.rotation, patch_size)
        )
    ref_stack = torch.stack(refs)  # (B, n_ref, 1, P, P)
    fake_q = torch.stack(fake_queries)
    real_q = torch.stack(real_queries)

    gen_side = F.softplus(-d_patch(ref_stack, fake_q)).mean()
    disc_side = (
        F.softplus(d_patch(ref_stack, fake_q.detach())).mean()
        + F.softplus(-d_patch(ref_stack, real_q)).mean()
    )
    return gen_side, disc_side


def structure_suppression_loss(
    hybrid_features: list[torch.Tensor],
    source_features: list[torch.Tensor],
    source_masks: np.ndarray,
    n_positions: int,
    alpha: float = 0.07,
    rng: np.random.Generator | None = None,
    layers: tuple[int, ...] | None = None,
) -> torch.Tensor:
    """Out-of-region contrastive alignment of hybrid and source features.

    For every selected encoder stage, sample `n_positions` out-of-lung
    grid cells per item; each hybrid feature vector must match the source
    feature at the same cell against the other sampled cells. Gradients
    flow through both feature sets.
    """
    if rng is None:
        rng = np.random.default_rng()
    indices = layers if layers is not None else tuple(range(len(hybrid_features)))
    losses = []
    for layer_idx in indices:
        hyb, src = hybrid_features[layer_idx], source_features[layer_idx]
        if hyb.shape != src.shape:
            raise ShapeMismatch(f"layer {layer_idx}: {tuple(hyb.shape)} vs {tuple(src.shape)}")
        grid = (hyb.shape[2], hyb.shape[3])
        for b in range(hyb.shape[0]):
            locs = sample_locations(grid, source_masks[b], "out", n_positions, rng, layer_idx)
            rows = torch.from_numpy(locs.positions[:, 0])
            cols = torch.from_numpy(locs.positions[:, 1])
            q = hyb[b, :, rows, cols].T  # (N, C)
            k = src[b, :, rows, cols].T
            losses.append(nce_loss_grid(q, k, alpha))
    return torch.stack(losses).mean()


def total_loss(
    recon: float,
    adv_g: float,
    in_tex: float,
    sup: float,
    weights: LossWeights,
    d_img_loss: float = 0.0,
    d_patch_loss: float = 0.0,
    r1: float = 0.0,
) -> LossBreakdown:
    """Weighted sum of the generator-side components, as a full breakdown."""
    components = {
        "recon": recon, "adv_g": adv_g, "in_tex": in_tex, "sup": sup,
        "d_img_loss": d_img_loss, "d_patch_loss": d_patch_loss, "r1": r1,
    }
    for name, value in components.items():
        if not math.isfinite(float(value)):
            raise NonFiniteComponent(f"loss component {name} is {value}")
    total = (
        float(recon)
        + weights.adversarial * float(adv_g)
        + weights.in_texture * float(in_tex)
        + weights.suppression * float(sup)
    )
    return LossBreakdown(
        recon=float(recon),
        adv_g=float(adv_g),
        in_tex=float(in_tex),
        sup=float(sup),
        total=total,
        d_img_loss=float(d_img_loss),
        d_patch_loss=float(d_patch_loss),
        r1_penalty=float(r1),
    )
