"""Multi-domain dataset registry, splitting, leave-one-domain-out, synthetic data.

A registry is an immutable collection of named domains, each a list of
samples.  Domain ids are 1-based and follow the registry's domain order.
Splitting produces a new registry in which unlabeled samples carry no mask;
their ground truth stays behind a diagnostics-only accessor so pseudo-label
quality can be measured without leaking labels into training code.

The synthetic generator renders random ellipse scenes whose geometry
distribution is shared across domains while appearance (gamma, brightness,
contrast, additive texture and noise) is domain-specific, so domain shift is
purely photometric.
"""

from __future__ import annotations

import dataclasses
import json
import math
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1


@dataclasses.dataclass(frozen=True)
class DomainSample:
    """One image with optional ground truth, tagged by origin."""

    image: np.ndarray
    mask: Optional[np.ndarray]
    domain_id: int
    sample_id: str

    def __post_init__(self):
        img = self.image
        if img.ndim not in (2, 3):
            raise ValueError(f"image must be H x W (x C), got shape {img.shape}")
        if img.size == 0:
            raise ValueError("empty image")
        if float(img.min()) < 0.0 or float(img.max()) > 1.0:
            raise ValueError("image values must lie in [0, 1]")
        if self.mask is not None:
            if self.mask.shape != img.shape[:2]:
                raise ValueError(
                    f"mask shape {self.mask.shape} does not match image {img.shape[:2]}"
                )
            if not np.issubdtype(self.mask.dtype, np.integer):
                raise ValueError(f"mask must be integer-typed, got {self.mask.dtype}")
        if self.domain_id < 1:
            raise ValueError(f"domain_id must be >= 1, got {self.domain_id}")

    @property
    def labeled(self) -> bool:
        return self.mask is not None


class DatasetRegistry:
    """Immutable multi-domain sample collection with optional split state."""

    def __init__(
        self,
        domains: dict[str, Sequence[DomainSample]],
        n_classes: int,
        labeled_fraction: Optional[float] = None,
        hidden_masks: Optional[dict[str, np.ndarray]] = None,
    ):
        if n_classes < 2:
            raise ValueError(f"n_classes must be >= 2, got {n_classes}")
        if not domains:
            raise ValueError("registry needs at least one domain")
        self._names = tuple(domains.keys())
        self._samples: dict[int, tuple[DomainSample, ...]] = {}
        self.n_classes = n_classes
        self.labeled_fraction = labeled_fraction
        self._hidden = dict(hidden_masks or {})
        seen_ids: set[str] = set()
        for idx, name in enumerate(self._names, start=1):
            group = tuple(domains[name])
            if not group:
                raise ValueError(f"domain {name!r} has no samples")
            for s in group:
                if s.domain_id != idx:
                    raise ValueError(
                        f"sample {s.sample_id!r} carries domain_id {s.domain_id}, "
                        f"expected {idx} for domain {name!r}"
                    )
                if s.sample_id in seen_ids:
                    raise ValueError(f"duplicate sample_id {s.sample_id!r}")
                seen_ids.add(s.sample_id)
                if s.mask is not None and s.mask.max(initial=0) >= n_classes:
                    raise ValueError(
                        f"sample {s.sample_id!r} mask uses class "
                        f"{int(s.mask.max())} >= n_classes {n_classes}"
                    )
            self._samples[idx] = group

    @property
    def n_domains(self) -> int:
        return len(self._names)

    @property
    def domain_names(self) -> tuple[str, ...]:
        return self._names

    @property
    def domain_ids(self) -> tuple[int, ...]:
        return tuple(range(1, len(self._names) + 1))

    @property
    def is_split(self) -> bool:
        return self.labeled_fraction is not None

    def domain_name(self, domain_id: int) -> str:
        self._check_id(domain_id)
        return self._names[domain_id - 1]

    def samples(self, domain_id: int) -> tuple[DomainSample, ...]:
        self._check_id(domain_id)
        return self._samples[domain_id]

    def labeled(self, domain_id: int) -> tuple[DomainSample, ...]:
        if not self.is_split:
            raise RuntimeError("registry has no split; call split_labeled_unlabeled")
        return tuple(s for s in self.samples(domain_id) if s.labeled)

    def unlabeled(self, domain_id: int) -> tuple[DomainSample, ...]:
        if not self.is_split:
            raise RuntimeError("registry has no split; call split_labeled_unlabeled")
        return tuple(s for s in self.samples(domain_id) if not s.labeled)

    def hidden_mask(self, sample_id: str) -> np.ndarray:
        """Ground truth of an unlabeled sample, for diagnostics only."""
        if sample_id not in self._hidden:
            raise KeyError(
                f"no hidden mask for {sample_id!r}; only unlabeled samples of a "
                "split registry retain one"
            )
        return self._hidden[sample_id]

    @property
    def has_hidden_masks(self) -> bool:
        return bool(self._hidden)

    def describe(self) -> dict:
        return {
            "n_domains": self.n_domains,
            "n_classes": self.n_classes,
            "labeled_fraction": self.labeled_fraction,
            "domains": {
                name: {
                    "n_samples": len(self._samples[i]),
                    "n_labeled": sum(s.labeled for s in self._samples[i]),
                }
                for i, name in enumerate(self._names, start=1)
            },
        }

    def _check_id(self, domain_id: int) -> None:
        if domain_id not in self._samples:
            raise ValueError(
                f"domain_id must be in [1, {self.n_domains}], got {domain_id}"
            )


def split_labeled_unlabeled(
    registry: DatasetRegistry, fraction: float, seed: int
) -> DatasetRegistry:
    """Per-domain random split into labeled and unlabeled subsets.

    Unlabeled samples lose their mask in the returned registry; the original
    masks stay reachable through ``hidden_mask`` for diagnostics.  The number
    of labeled samples per domain is ``round(fraction * n)`` and must be
    positive everywhere.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"labeled fraction must be in (0, 1], got {fraction}")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xD5)))
    domains: dict[str, list[DomainSample]] = {}
    hidden: dict[str, np.ndarray] = {}
    for domain_id in registry.domain_ids:
        group = registry.samples(domain_id)
        n_labeled = int(round(fraction * len(group)))
        if n_labeled == 0:
            raise ValueError(
                f"fraction {fraction} keeps zero labeled samples in domain "
                f"{registry.domain_name(domain_id)!r} ({len(group)} samples)"
            )
        order = rng.permutation(len(group))
        labeled_idx = set(order[:n_labeled].tolist())
        out = []
        for i, s in enumerate(group):
            if s.mask is None:
                raise ValueError(f"sample {s.sample_id!r} has no mask; cannot split")
            if i in labeled_idx:
                out.append(s)
            else:
                hidden[s.sample_id] = s.mask
                out.append(dataclasses.replace(s, mask=None))
        domains[registry.domain_name(domain_id)] = out
    return DatasetRegistry(
        domains, registry.n_classes, labeled_fraction=fraction, hidden_masks=hidden
    )


@dataclasses.dataclass(frozen=True)
class LeaveOneOutSplit:
    train_registry: DatasetRegistry
    test_samples: tuple[DomainSample, ...]
    remap: dict[int, int]
    unseen_domain: str


def leave_one_out(registry: DatasetRegistry, unseen_domain_id: int) -> LeaveOneOutSplit:
    """Hold one domain out for testing, remap the rest to contiguous ids.

    The returned remap sends each kept original id to its new contiguous id.
    Test samples keep their full masks and original domain id.  With only two
    domains the training registry degenerates to a single source, which is
    allowed but limits cross-domain operations; callers should warn.
    """
    if registry.n_domains < 2:
        raise ValueError("leave-one-out needs at least 2 domains")
    if unseen_domain_id not in registry.domain_ids:
        raise ValueError(
            f"unseen domain id must be in [1, {registry.n_domains}], got {unseen_domain_id}"
        )
    remap: dict[int, int] = {}
    domains: dict[str, list[DomainSample]] = {}
    hidden: dict[str, np.ndarray] = {}
    new_id = 0
    for old_id in registry.domain_ids:
        if old_id == unseen_domain_id:
            continue
        new_id += 1
        remap[old_id] = new_id
        renumbered = [
            dataclasses.replace(s, domain_id=new_id) for s in registry.samples(old_id)
        ]
        for s in renumbered:
            if not s.labeled and registry.has_hidden_masks:
                hidden[s.sample_id] = registry.hidden_mask(s.sample_id)
        domains[registry.domain_name(old_id)] = renumbered
    test = registry.samples(unseen_domain_id)
    if any(not s.labeled for s in test):
        # Recover ground truth for held-out samples that were split before
        # the hold-out, so the test set is always fully labeled.
        test = tuple(
            s if s.labeled else dataclasses.replace(s, mask=registry.hidden_mask(s.sample_id))
            for s in test
        )
    train = DatasetRegistry(
        domains,
        registry.n_classes,
        labeled_fraction=registry.labeled_fraction,
        hidden_masks=hidden,
    )
    return LeaveOneOutSplit(
        train_registry=train,
        test_samples=test,
        remap=remap,
        unseen_domain=registry.domain_name(unseen_domain_id),
    )


@dataclasses.dataclass(frozen=True)
class DomainAppearance:
    """Photometric identity of one synthetic domain.

    The intensity map is ``contrast * (v**gamma - 0.5) + 0.5 + brightness``,
    monotone on [0, 1] whenever gamma and contrast are positive.  Texture is
    an additive sinusoidal pattern, noise is additive Gaussian; both are
    applied after the intensity map and before clipping.
    """

    gamma: float = 1.0
    brightness: float = 0.0
    contrast: float = 1.0
    noise: float = 0.05
    texture_freq: float = 0.0
    texture_amp: float = 0.0

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError(f"gamma must be > 0 for a monotone map, got {self.gamma}")
        if self.contrast <= 0:
            raise ValueError(f"contrast must be > 0 for a monotone map, got {self.contrast}")
        if self.noise < 0 or self.texture_amp < 0:
            raise ValueError("noise and texture_amp must be >= 0")

    def intensity_map(self, v: np.ndarray) -> np.ndarray:
        return self.contrast * (np.power(v, self.gamma) - 0.5) + 0.5 + self.brightness


@dataclasses.dataclass(frozen=True)
class SyntheticDomainSpec:
    """Recipe for a synthetic multi-domain registry."""

    appearances: tuple[DomainAppearance, ...]
    image_size: int = 64
    n_objects: tuple[int, int] = (1, 3)
    radius_range: tuple[float, float] = (0.10, 0.28)
    fg_level: float = 0.62
    bg_level: float = 0.38
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 8:
            raise ValueError(f"image_size must be >= 8, got {self.image_size}")
        if not self.appearances:
            raise ValueError("need at least one domain appearance")
        lo, hi = self.n_objects
        if lo < 1 or hi < lo:
            raise ValueError(f"n_objects range must satisfy 1 <= lo <= hi, got {self.n_objects}")
        rlo, rhi = self.radius_range
        if not 0 < rlo <= rhi < 0.5:
            raise ValueError(f"radius_range must satisfy 0 < lo <= hi < 0.5, got {self.radius_range}")


def render_scene(
    size: int,
    rng: np.random.Generator,
    n_objects: tuple[int, int] = (1, 3),
    radius_range: tuple[float, float] = (0.10, 0.28),
    fg_level: float = 0.62,
    bg_level: float = 0.38,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw random ellipses on a gently shaded background.

    Returns ``(base, mask)``: a float64 intensity field in [0, 1] and the
    binary foreground mask.  All geometric randomness comes from ``rng`` so
    the same generator state always yields the same mask.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    theta_bg = rng.uniform(0.0, 2.0 * math.pi)
    ramp = (xx * math.cos(theta_bg) + yy * math.sin(theta_bg)) * 0.06
    base = np.full((size, size), bg_level, dtype=np.float64) + ramp
    mask = np.zeros((size, size), dtype=np.int64)
    n = int(rng.integers(n_objects[0], n_objects[1] + 1))
    for _ in range(n):
        cx, cy = rng.uniform(0.2, 0.8, size=2)
        a = rng.uniform(*radius_range)
        b = rng.uniform(*radius_range)
        phi = rng.uniform(0.0, math.pi)
        level = fg_level + rng.uniform(-0.04, 0.04)
        dx, dy = xx - cx, yy - cy
        u = dx * math.cos(phi) + dy * math.sin(phi)
        v = -dx * math.sin(phi) + dy * math.cos(phi)
        inside = (u / a) ** 2 + (v / b) ** 2 <= 1.0
        base[inside] = level
        mask[inside] = 1
    return np.clip(base, 0.0, 1.0), mask


def apply_appearance(
    base: np.ndarray, appearance: DomainAppearance, rng: np.random.Generator
) -> np.ndarray:
    """Turn a base intensity field into a domain-styled float32 image."""
    img = appearance.intensity_map(base)
    if appearance.texture_amp > 0 and appearance.texture_freq > 0:
        size = base.shape[0]
        yy, xx = np.mgrid[0 : base.shape[0], 0 : base.shape[1]].astype(np.float64) / size
        theta = rng.uniform(0.0, math.pi)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        carrier = (xx * math.cos(theta) + yy * math.sin(theta)) * appearance.texture_freq
        img = img + appearance.texture_amp * np.sin(2.0 * math.pi * carrier + phase)
    if appearance.noise > 0:
        img = img + rng.normal(0.0, appearance.noise, size=base.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def make_synthetic_registry(
    spec: SyntheticDomainSpec, k_domains: int, n_per_domain: int
) -> DatasetRegistry:
    """Generate a deterministic multi-domain registry of ellipse scenes.

    Geometry and appearance randomness use separate seed streams keyed by
    (seed, domain, index), so regenerating with a different appearance but the
    same seed keeps masks identical.
    """
    if k_domains < 2:
        raise ValueError(f"k_domains must be >= 2, got {k_domains}")
    if n_per_domain < 1:
        raise ValueError(f"n_per_domain must be >= 1, got {n_per_domain}")
    if len(spec.appearances) < k_domains:
        raise ValueError(
            f"spec provides {len(spec.appearances)} appearances for {k_domains} domains"
        )
    domains: dict[str, list[DomainSample]] = {}
    for d in range(1, k_domains + 1):
        appearance = spec.appearances[d - 1]
        group = []
        for i in range(n_per_domain):
            geom_rng = np.random.default_rng(np.random.SeedSequence((spec.seed, d, i, 0)))
            app_rng = np.random.default_rng(np.random.SeedSequence((spec.seed, d, i, 1)))
            base, mask = render_scene(
                spec.image_size,
                geom_rng,
                spec.n_objects,
                spec.radius_range,
                spec.fg_level,
                spec.bg_level,
            )
            image = apply_appearance(base, appearance, app_rng)
            group.append(
                DomainSample(
                    image=image,
                    mask=mask,
                    domain_id=d,
                    sample_id=f"d{d}_{i:04d}",
                )
            )
        domains[f"domain{d}"] = group
    return DatasetRegistry(domains, n_classes=2)


def save_registry(registry: DatasetRegistry, root) -> None:
    """Write a registry as 8-bit PNGs under ``root/<domain>/{images,masks}/``.

    Image intensities are quantized to 256 levels.  Split state is not
    persisted; reload and re-split for training.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for domain_id in registry.domain_ids:
        name = registry.domain_name(domain_id)
        img_dir = root / name / "images"
        msk_dir = root / name / "masks"
        img_dir.mkdir(parents=True, exist_ok=True)
        msk_dir.mkdir(parents=True, exist_ok=True)
        for s in registry.samples(domain_id):
            arr = np.round(np.asarray(s.image, dtype=np.float64) * 255.0).astype(np.uint8)
            Image.fromarray(arr).save(img_dir / f"{s.sample_id}.png")
            mask = s.mask
            if mask is None and registry.has_hidden_masks:
                mask = registry.hidden_mask(s.sample_id)
            if mask is None:
                raise ValueError(f"sample {s.sample_id!r} has no mask to save")
            Image.fromarray(mask.astype(np.uint8)).save(msk_dir / f"{s.sample_id}.png")
    manifest = {
        "format_version": MANIFEST_VERSION,
        "n_classes": registry.n_classes,
        "domains": list(registry.domain_names),
    }
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2))


def load_registry(root) -> DatasetRegistry:
    """Read a registry written by :func:`save_registry` (or hand-assembled)."""
    root = Path(root)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise FileNotFoundError(f"no {MANIFEST_NAME} under {root}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise ValueError(
            f"unsupported dataset format_version {manifest.get('format_version')!r}"
        )
    domains: dict[str, list[DomainSample]] = {}
    for d, name in enumerate(manifest["domains"], start=1):
        img_dir = root / name / "images"
        msk_dir = root / name / "masks"
        if not img_dir.is_dir():
            raise FileNotFoundError(f"missing images directory for domain {name!r}")
        group = []
        for img_path in sorted(img_dir.iterdir()):
            if img_path.suffix.lower() not in (".png", ".bmp", ".tif", ".tiff", ".jpg", ".jpeg"):
                continue
            image = np.asarray(Image.open(img_path), dtype=np.float32) / 255.0
            mask_path = msk_dir / img_path.name
            mask = None
            if mask_path.exists():
                mask = np.asarray(Image.open(mask_path)).astype(np.int64)
            group.append(
                DomainSample(
                    image=image,
                    mask=mask,
                    domain_id=d,
                    sample_id=img_path.stem,
                )
            )
        if not group:
            raise ValueError(f"domain {name!r} has no images under {img_dir}")
        domains[name] = group
    return DatasetRegistry(domains, n_classes=int(manifest["n_classes"]))


def default_appearances() -> tuple[DomainAppearance, ...]:
    """Four photometric identities with a strong shift on the last domain."""
    return (
        DomainAppearance(gamma=0.55, brightness=0.05, contrast=1.15, noise=0.035, texture_freq=6.0, texture_amp=0.10),
        DomainAppearance(gamma=1.00, brightness=0.00, contrast=1.00, noise=0.050, texture_freq=11.0, texture_amp=0.12),
        DomainAppearance(gamma=1.45, brightness=-0.06, contrast=0.85, noise=0.060, texture_freq=17.0, texture_amp=0.12),
        DomainAppearance(gamma=2.20, brightness=-0.10, contrast=1.30, noise=0.080, texture_freq=23.0, texture_amp=0.14),
    )
