"""Weak, strong, and style (histogram-matching) augmentations.

The weak stage is the only one that moves pixels (axis-aligned rotations and
flips), so everything derived from a weakly augmented image stays pixel
aligned with it and a single pseudo-label mask can supervise all derived
views.  Strong augmentation perturbs photometry only; style augmentation
rewrites an image's intensity distribution to match a reference drawn from a
different domain.

All functions are pure given an explicit numpy Generator.
"""

from __future__ import annotations

import dataclasses
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from .data import DatasetRegistry, DomainSample


@dataclasses.dataclass(frozen=True)
class AugmentedTriplet:
    """Three views of one unlabeled image, all pixel-aligned.

    ``strong`` and ``styled`` are both derived from ``weak``; no geometric
    change happens after the weak stage.
    """

    weak: np.ndarray
    strong: np.ndarray
    styled: np.ndarray
    reference_domain: int


@dataclasses.dataclass(frozen=True)
class StrongAugmentParams:
    """Ranges for the photometric jitter and blur sub-operations."""

    jitter_lo: float = 0.5
    jitter_hi: float = 1.5
    blur_lo: float = 0.1
    blur_hi: float = 2.0
    op_prob: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.jitter_lo <= self.jitter_hi:
            raise ValueError(f"jitter range invalid: [{self.jitter_lo}, {self.jitter_hi}]")
        if not 0.0 <= self.blur_lo <= self.blur_hi:
            raise ValueError(f"blur range invalid: [{self.blur_lo}, {self.blur_hi}]")
        if not 0.0 <= self.op_prob <= 1.0:
            raise ValueError(f"op_prob must be in [0, 1], got {self.op_prob}")


def _check_image(image: np.ndarray, name: str = "image") -> None:
    if image.ndim not in (2, 3):
        raise ValueError(f"{name} must be H x W (x C), got shape {image.shape}")
    if image.size == 0:
        raise ValueError(f"empty {name}")


def weak_augment(
    image: np.ndarray,
    mask: Optional[np.ndarray] = None,
    rng: Optional[np.random.Generator] = None,
) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Random 90-degree rotation plus independent horizontal/vertical flips.

    The same draw is applied to the mask so labels stay aligned.  Returns
    views or copies; the inputs are never modified.
    """
    _check_image(image)
    if mask is not None and mask.shape != image.shape[:2]:
        raise ValueError(
            f"mask shape {mask.shape} does not match image {image.shape[:2]}"
        )
    if rng is None:
        raise ValueError("weak_augment requires a seeded generator")
    k = int(rng.integers(0, 4))
    flip_h = bool(rng.random() < 0.5)
    flip_v = bool(rng.random() < 0.5)

    def apply(arr: np.ndarray) -> np.ndarray:
        out = np.rot90(arr, k, axes=(0, 1))
        if flip_h:
            out = np.flip(out, axis=1)
        if flip_v:
            out = np.flip(out, axis=0)
        return np.ascontiguousarray(out)

    return apply(image), (apply(mask) if mask is not None else None)


def strong_augment(
    image: np.ndarray,
    rng: np.random.Generator,
    params: StrongAugmentParams = StrongAugmentParams(),
) -> np.ndarray:
    """Photometric perturbation: brightness, contrast, saturation, blur.

    Each sub-operation fires independently with ``op_prob``; factors are
    uniform in the jitter range, blur sigma uniform in the blur range.
    Saturation only applies to 3-channel images.  Geometry is untouched and
    the output is clipped to [0, 1].
    """
    _check_image(image)
    out = image.astype(np.float64, copy=True)

    if rng.random() < params.op_prob:
        factor = rng.uniform(params.jitter_lo, params.jitter_hi)
        out = out * factor
    if rng.random() < params.op_prob:
        factor = rng.uniform(params.jitter_lo, params.jitter_hi)
        mean = out.mean()
        out = mean + factor * (out - mean)
    if out.ndim == 3 and out.shape[2] == 3 and rng.random() < params.op_prob:
        factor = rng.uniform(params.jitter_lo, params.jitter_hi)
        gray = out.mean(axis=2, keepdims=True)
        out = gray + factor * (out - gray)
    if rng.random() < params.op_prob:
        sigma = rng.uniform(params.blur_lo, params.blur_hi)
        if out.ndim == 3:
            out = gaussian_filter(out, sigma=(sigma, sigma, 0.0))
        else:
            out = gaussian_filter(out, sigma=sigma)

    return np.clip(out, 0.0, 1.0).astype(image.dtype)


def _match_channel(source: np.ndarray, reference: np.ndarray) -> np.ndarray:
    s = source.ravel().astype(np.float64)
    r = np.sort(reference.ravel().astype(np.float64))
    values, inverse, counts = np.unique(s, return_inverse=True, return_counts=True)
    source_quantiles = np.cumsum(counts) / s.size
    reference_quantiles = np.arange(1, r.size + 1) / r.size
    mapped = np.interp(source_quantiles, reference_quantiles, r)
    return mapped[inverse].reshape(source.shape)


def histogram_match(source: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Remap intensities so the output's distribution matches the reference's.

    Classic quantile mapping, per channel: each source value goes through the
    source empirical CDF, then the inverse reference CDF (linear between
    reference order statistics).  The remapping is monotone within each
    channel, so intensity ordering is preserved.  Shapes need not agree, but
    channel counts must.
    """
    _check_image(source, "source")
    _check_image(reference, "reference")
    src_channels = 1 if source.ndim == 2 else source.shape[2]
    ref_channels = 1 if reference.ndim == 2 else reference.shape[2]
    if src_channels != ref_channels:
        raise ValueError(
            f"channel mismatch: source has {src_channels}, reference has {ref_channels}"
        )
    if source.ndim == 2:
        out = _match_channel(source, reference)
    else:
        out = np.stack(
            [
                _match_channel(source[..., c], reference[..., c])
                for c in range(src_channels)
            ],
            axis=2,
        )
    return out.astype(source.dtype)


def sample_style_reference(
    sample: DomainSample, registry: DatasetRegistry, rng: np.random.Generator
) -> tuple[np.ndarray, int]:
    """Pick a reference image from a uniformly chosen other domain.

    Returns the image and its domain id.  Both the domain (among all domains
    except the sample's) and the image within it are uniform draws.
    """
    others = [d for d in registry.domain_ids if d != sample.domain_id]
    if not others:
        raise ValueError(
            "style reference needs at least 2 domains; registry has only "
            f"{registry.n_domains}"
        )
    domain = others[int(rng.integers(len(others)))]
    pool = registry.samples(domain)
    ref = pool[int(rng.integers(len(pool)))]
    return ref.image, domain


def make_triplet(
    sample: DomainSample,
    registry: DatasetRegistry,
    rng: np.random.Generator,
    params: StrongAugmentParams = StrongAugmentParams(),
) -> AugmentedTriplet:
    """Weakly augment an image, then derive its strong and styled views."""
    weak, _ = weak_augment(sample.image, None, rng)
    strong = strong_augment(weak, rng, params)
    ref_image, ref_domain = sample_style_reference(sample, registry, rng)
    styled = histogram_match(weak, ref_image)
    return AugmentedTriplet(
        weak=weak, strong=strong, styled=styled, reference_domain=ref_domain
    )
