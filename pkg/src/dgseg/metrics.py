"""Segmentation metrics and pseudo-label-quality diagnostics.

Dice and average surface distance operate on 2D binary masks.  Boundary
pixels are foreground pixels with at least one background 4-neighbor, where
everything outside the image counts as background.  ASD is undefined when
either mask has no foreground; reports carry that as an explicit sentinel and
exclude the pair from aggregates rather than inventing a number.
"""

from __future__ import annotations

import dataclasses
import io
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.ndimage import distance_transform_edt

from .data import DatasetRegistry, DomainSample


def _as_bool_mask(arr: np.ndarray, name: str) -> np.ndarray:
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a 2D mask, got shape {arr.shape}")
    return arr.astype(bool)


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """Overlap 2|A∩B| / (|A|+|B|).  Both empty → 1.0, one empty → 0.0."""
    p = _as_bool_mask(pred, "pred")
    g = _as_bool_mask(gt, "gt")
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    n_p, n_g = int(p.sum()), int(g.sum())
    if n_p == 0 and n_g == 0:
        return 1.0
    intersection = int((p & g).sum())
    return 2.0 * intersection / (n_p + n_g)


def boundary_mask(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels adjacent (4-connectivity) to background.

    The image border is treated as background, so a region touching the
    border contributes its border pixels.
    """
    m = _as_bool_mask(mask, "mask")
    padded = np.pad(m, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return m & ~interior


def asd(pred: np.ndarray, gt: np.ndarray) -> Optional[float]:
    """Symmetric mean nearest-boundary distance in pixels.

    Every boundary pixel of each mask contributes its Euclidean distance to
    the other mask's nearest boundary pixel; the two sums are pooled and
    divided by the total boundary pixel count.  Returns None when either
    mask is empty.
    """
    p = _as_bool_mask(pred, "pred")
    g = _as_bool_mask(gt, "gt")
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    bp = boundary_mask(p)
    bg = boundary_mask(g)
    n_bp, n_bg = int(bp.sum()), int(bg.sum())
    if n_bp == 0 or n_bg == 0:
        return None
    dist_to_gt = distance_transform_edt(~bg)
    dist_to_pred = distance_transform_edt(~bp)
    total = float(dist_to_gt[bp].sum() + dist_to_pred[bg].sum())
    return total / (n_bp + n_bg)


@dataclasses.dataclass(frozen=True)
class EvalRow:
    """One (domain, foreground class) cell of an evaluation."""

    domain: str
    class_id: int
    n_samples: int
    dice_pct: float
    asd_px: Optional[float]
    n_asd_undefined: int


@dataclasses.dataclass(frozen=True)
class EvalReport:
    """Per-domain per-class scores with explicit undefined-ASD accounting."""

    rows: tuple[EvalRow, ...]

    @property
    def mean_dice_pct(self) -> float:
        if not self.rows:
            raise ValueError("empty report")
        return float(np.mean([r.dice_pct for r in self.rows]))

    @property
    def mean_asd_px(self) -> Optional[float]:
        defined = [r.asd_px for r in self.rows if r.asd_px is not None]
        if not defined:
            return None
        return float(np.mean(defined))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("domain,class_id,n_samples,dice_pct,asd_px,n_asd_undefined\n")
        for r in self.rows:
            asd_cell = "" if r.asd_px is None else f"{r.asd_px:.4f}"
            buf.write(
                f"{r.domain},{r.class_id},{r.n_samples},{r.dice_pct:.4f},"
                f"{asd_cell},{r.n_asd_undefined}\n"
            )
        return buf.getvalue()


def evaluate_predictions(
    samples: Sequence[DomainSample],
    predictions: Sequence[np.ndarray],
    n_classes: int,
    domain_names: Optional[dict[int, str]] = None,
) -> EvalReport:
    """Score predicted class maps against sample masks, one row per
    (domain, foreground class).  Background (class 0) is not reported.
    """
    if len(samples) != len(predictions):
        raise ValueError(
            f"{len(samples)} samples but {len(predictions)} predictions"
        )
    if not samples:
        raise ValueError("nothing to evaluate")
    by_domain: dict[int, list[tuple[DomainSample, np.ndarray]]] = {}
    for s, pred in zip(samples, predictions):
        if s.mask is None:
            raise ValueError(f"sample {s.sample_id!r} has no ground truth")
        if pred.shape != s.mask.shape:
            raise ValueError(
                f"prediction shape {pred.shape} does not match mask {s.mask.shape} "
                f"for {s.sample_id!r}"
            )
        by_domain.setdefault(s.domain_id, []).append((s, pred))
    rows = []
    for domain_id in sorted(by_domain):
        pairs = by_domain[domain_id]
        name = (domain_names or {}).get(domain_id, f"domain{domain_id}")
        for cls in range(1, n_classes):
            dice_vals = []
            asd_vals = []
            undefined = 0
            for s, pred in pairs:
                gt_c = s.mask == cls
                pr_c = pred == cls
                dice_vals.append(dice(pr_c, gt_c))
                d = asd(pr_c, gt_c)
                if d is None:
                    undefined += 1
                else:
                    asd_vals.append(d)
            rows.append(
                EvalRow(
                    domain=name,
                    class_id=cls,
                    n_samples=len(pairs),
                    dice_pct=100.0 * float(np.mean(dice_vals)),
                    asd_px=float(np.mean(asd_vals)) if asd_vals else None,
                    n_asd_undefined=undefined,
                )
            )
    return EvalReport(rows=tuple(rows))


def evaluate_model(
    predict: Callable[[Sequence[np.ndarray]], Sequence[np.ndarray]],
    samples: Sequence[DomainSample],
    n_classes: int,
    batch_size: int = 8,
    domain_names: Optional[dict[int, str]] = None,
) -> EvalReport:
    """Run a batched predictor over samples and score the results.

    ``predict`` maps a list of images to a list of class-index maps; batching
    and bookkeeping happen here so predictors stay trivial.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    preds: list[np.ndarray] = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        preds.extend(predict([s.image for s in chunk]))
    return evaluate_predictions(samples, preds, n_classes, domain_names)


PSEUDO_LABEL_MODES = ("if_ensemble", "single_bn")


def pseudo_label_quality(
    teacher,
    registry: DatasetRegistry,
    mode: str,
    t_ensemble: float = 1.0,
    batch_size: int = 6,
    seed: int = 0,
) -> dict[int, float]:
    """Mean pseudo-label Dice against hidden ground truth, per domain.

    ``if_ensemble`` feeds each domain's unlabeled pool through its own
    individual branch (blended with the aggregated branch when
    ``t_ensemble < 1``).  ``single_bn`` mimics one shared normalization
    pathway: domain-mixed batches all routed through branch 1, so batch
    statistics pool across domains.  Quality uses the full argmax map; no
    confidence masking.  Scores are macro-averaged over foreground classes.
    """
    import torch

    from .model import RoutingContext, forward_routed, stack_images
    from .norm import ForwardMode

    if mode not in PSEUDO_LABEL_MODES:
        raise ValueError(f"mode must be one of {PSEUDO_LABEL_MODES}, got {mode!r}")
    if not registry.is_split:
        raise ValueError("registry has no labeled/unlabeled split")
    if not registry.has_hidden_masks:
        raise ValueError("registry retains no hidden masks; diagnostics unavailable")
    if not 0.0 <= t_ensemble <= 1.0:
        raise ValueError(f"t_ensemble must be in [0, 1], got {t_ensemble}")

    pool = [
        (d, s) for d in registry.domain_ids for s in registry.unlabeled(d)
    ]
    if not pool:
        raise ValueError("registry has no unlabeled samples")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x9A)))
    if mode == "single_bn":
        # Domain-mixed batches are the point of this mode.
        order = rng.permutation(len(pool))
        batches = [
            [pool[i] for i in order[start : start + batch_size]]
            for start in range(0, len(pool), batch_size)
        ]
    else:
        # Batches never cross a domain boundary.
        batches = []
        for d in registry.domain_ids:
            group = [(d, s) for s in registry.unlabeled(d)]
            for start in range(0, len(group), batch_size):
                batches.append(group[start : start + batch_size])

    was_training = teacher.training
    teacher.train()
    scores: dict[int, list[float]] = {}
    try:
        with torch.no_grad():
            for chunk in batches:
                x = stack_images([s.image for _, s in chunk])
                if mode == "single_bn":
                    ctx = RoutingContext(
                        ForwardMode.INDIVIDUAL, domain_id=1, update_stats=False
                    )
                    probs = torch.softmax(forward_routed(teacher, x, ctx), dim=1)
                else:
                    domain = chunk[0][0]
                    if any(d != domain for d, _ in chunk):
                        raise RuntimeError("if_ensemble batches must be single-domain")
                    ctx = RoutingContext(
                        ForwardMode.INDIVIDUAL, domain_id=domain, update_stats=False
                    )
                    probs = t_ensemble * torch.softmax(
                        forward_routed(teacher, x, ctx), dim=1
                    )
                    if t_ensemble < 1.0:
                        af = RoutingContext(ForwardMode.AGGREGATED, update_stats=False)
                        probs = probs + (1.0 - t_ensemble) * torch.softmax(
                            forward_routed(teacher, x, af), dim=1
                        )
                labels = probs.argmax(dim=1).numpy()
                for (d, s), lab in zip(chunk, labels):
                    gt = registry.hidden_mask(s.sample_id)
                    vals = [
                        dice(lab == cls, gt == cls)
                        for cls in range(1, registry.n_classes)
                    ]
                    scores.setdefault(d, []).append(float(np.mean(vals)))
    finally:
        teacher.train(was_training)
    return {d: float(np.mean(v)) for d, v in sorted(scores.items())}
