"""Mean-teacher training loop with branch routing and consistency streams.

One step looks like:

1. supervised loss on the weakly augmented labeled batch, through the
   individual branches and (weighted) the aggregated branch;
2. teacher pseudo-labels on the weakly augmented unlabeled batch, ensembling
   individual and aggregated forwards, thresholded by confidence;
3. three unsupervised streams against those pseudo-labels: the strong view
   and the style-transferred view through the aggregated branch, the weak
   view through the random-forward path;
4. one optimizer step on the student, then an EMA update of the teacher.

A plain (unconverted) student/teacher pair runs the same loop degenerately:
single forward per loss, no branch ensembling, no random-forward stream.
"""

from __future__ import annotations

import copy
import dataclasses
import warnings
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .augment import StrongAugmentParams, make_triplet, strong_augment, weak_augment
from .config import TrainConfig
from .data import DatasetRegistry, DomainSample, leave_one_out, split_labeled_unlabeled
from .metrics import evaluate_model, pseudo_label_quality
from .model import (
    ArchSpec,
    RoutingContext,
    UNet,
    convert_model,
    forward_routed,
    image_to_tensor,
    norm_sites,
    stack_images,
    strip_individual_branches,
)
from .norm import ForwardMode


class TrainingDivergedError(RuntimeError):
    """Raised when a loss component stops being finite."""


def _scalar(t: Tensor) -> float:
    return float(t.detach())


@dataclasses.dataclass
class PseudoLabelBatch:
    """Teacher-issued targets for one unlabeled batch."""

    hard_labels: Tensor      # N x H x W, long
    confidence: Tensor       # N x H x W, float
    mask: Tensor             # N x H x W, bool: confidence >= tau

    @property
    def mask_rate(self) -> float:
        return float(self.mask.float().mean())


@dataclasses.dataclass
class ModelPair:
    """Student and its EMA teacher; the teacher never receives gradients."""

    student: nn.Module
    teacher: nn.Module
    ema_momentum: float

    def __post_init__(self):
        s_names = [n for n, _ in self.student.named_parameters()]
        t_names = [n for n, _ in self.teacher.named_parameters()]
        if s_names != t_names:
            raise ValueError("student and teacher parameter sets differ")
        for p in self.teacher.parameters():
            p.requires_grad_(False)


@dataclasses.dataclass(frozen=True)
class LabeledBatch:
    images: Tensor           # N x C x H x W
    labels: Tensor           # N x H x W, long
    domain_ids: tuple[int, ...]


@dataclasses.dataclass(frozen=True)
class UnlabeledBatch:
    weak: Tensor
    strong: Tensor
    styled: Tensor
    domain_ids: tuple[int, ...]


def _group_by_domain(domain_ids: tuple[int, ...]) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = {}
    for i, d in enumerate(domain_ids):
        groups.setdefault(d, []).append(i)
    return groups


def _routed_by_domain(
    net: nn.Module,
    x: Tensor,
    domain_ids: tuple[int, ...],
    mode: ForwardMode,
    update_stats: bool = True,
    rand_p: float = 0.0,
    rng: Optional[torch.Generator] = None,
) -> Tensor:
    """Forward each domain's sub-batch through its own branch, then
    reassemble logits in the original sample order."""
    out = None
    for d, idx in _group_by_domain(domain_ids).items():
        ctx = RoutingContext(
            mode, domain_id=d, rand_p=rand_p, rng=rng, update_stats=update_stats
        )
        logits = forward_routed(net, x[idx], ctx)
        if out is None:
            out = x.new_zeros((x.shape[0],) + logits.shape[1:])
        out[idx] = logits
    return out


def pseudo_label(
    pair: ModelPair,
    weak: Tensor,
    domain_ids: tuple[int, ...],
    cfg: TrainConfig,
    tau: Optional[float] = None,
) -> PseudoLabelBatch:
    """Ensemble the teacher's individual and aggregated predictions.

    The teacher runs in training-statistics mode (batch statistics of the
    weak view) without touching its running buffers.  Per-pixel class
    probabilities are blended as ``t * individual + (1 - t) * aggregated``,
    hard labels are the argmax (ties resolve to the lowest class index), and
    the retention mask keeps pixels whose blended confidence reaches the
    threshold.  ``tau`` overrides ``cfg.tau`` when given; values above 1
    retain nothing.
    """
    tau = cfg.tau if tau is None else tau
    teacher = pair.teacher
    was_training = teacher.training
    teacher.train()
    try:
        with torch.no_grad():
            if norm_sites(teacher):
                t = cfg.t_ensemble
                if t == 1.0:
                    combined = _teacher_probs_if(teacher, weak, domain_ids)
                elif t == 0.0:
                    combined = _teacher_probs_af(teacher, weak)
                else:
                    combined = t * _teacher_probs_if(
                        teacher, weak, domain_ids
                    ) + (1.0 - t) * _teacher_probs_af(teacher, weak)
            else:
                combined = _frozen_stats_softmax(teacher, weak)
    finally:
        teacher.train(was_training)
    confidence, hard = combined.max(dim=1)
    return PseudoLabelBatch(
        hard_labels=hard, confidence=confidence, mask=confidence >= tau
    )


def _frozen_stats_softmax(teacher: nn.Module, weak: Tensor) -> Tensor:
    """Train-mode softmax through a plain network with running stats pinned.

    Batch statistics are still used for normalization; setting the torch
    batch-norm momentum to zero just stops the buffers from drifting, and the
    tracked-batch counters are restored afterwards.
    """
    bns = [m for m in teacher.modules() if isinstance(m, nn.BatchNorm2d)]
    saved_momentum = [b.momentum for b in bns]
    saved_counts = [b.num_batches_tracked.clone() for b in bns]
    for b in bns:
        b.momentum = 0.0
    try:
        return torch.softmax(teacher(weak), dim=1)
    finally:
        for b, mo, ct in zip(bns, saved_momentum, saved_counts):
            b.momentum = mo
            b.num_batches_tracked.copy_(ct)


def _teacher_probs_if(teacher, weak, domain_ids) -> Tensor:
    logits = _routed_by_domain(
        teacher, weak, domain_ids, ForwardMode.INDIVIDUAL, update_stats=False
    )
    return torch.softmax(logits, dim=1)


def _teacher_probs_af(teacher, weak) -> Tensor:
    ctx = RoutingContext(ForwardMode.AGGREGATED, update_stats=False)
    return torch.softmax(forward_routed(teacher, weak, ctx), dim=1)


def masked_cross_entropy(
    logits: Tensor,
    hard_labels: Tensor,
    mask: Tensor,
    denominator: str = "total",
) -> Tensor:
    """Pixelwise cross-entropy, zeroed outside the mask.

    With the default ``total`` denominator the sum is divided by the full
    pixel count, so an all-masked batch contributes exactly 0.  The
    ``masked`` variant divides by the retained count and is guarded against
    empty masks.
    """
    if logits.shape[0] != hard_labels.shape[0] or logits.shape[2:] != hard_labels.shape[1:]:
        raise ValueError(
            f"logits {tuple(logits.shape)} incompatible with labels "
            f"{tuple(hard_labels.shape)}"
        )
    n_classes = logits.shape[1]
    if bool((hard_labels < 0).any()) or bool((hard_labels >= n_classes).any()):
        raise ValueError(f"labels out of range [0, {n_classes})")
    if denominator not in ("total", "masked"):
        raise ValueError(f"denominator must be total or masked, got {denominator!r}")
    ce = F.cross_entropy(logits, hard_labels, reduction="none")
    kept = ce * mask.to(ce.dtype)
    if denominator == "total":
        return kept.sum() / ce.numel()
    n_kept = mask.to(ce.dtype).sum()
    if float(n_kept) == 0.0:
        return logits.sum() * 0.0
    return kept.sum() / n_kept


def soft_dice_loss(logits: Tensor, target: Tensor, smooth: float = 1.0) -> Tensor:
    """Soft Dice over all classes: mean_c 1 − (2·Σp_c·g_c + s)/(Σp_c + Σg_c + s).

    Sums pool over batch and space, so the loss is batch-aggregated rather
    than averaged per sample.
    """
    n_classes = logits.shape[1]
    probs = torch.softmax(logits, dim=1)
    one_hot = F.one_hot(target, n_classes).permute(0, 3, 1, 2).to(probs.dtype)
    dims = (0, 2, 3)
    intersection = (probs * one_hot).sum(dim=dims)
    denom = probs.sum(dim=dims) + one_hot.sum(dim=dims)
    per_class = 1.0 - (2.0 * intersection + smooth) / (denom + smooth)
    return per_class.mean()


def _ce_dice(logits: Tensor, target: Tensor) -> Tensor:
    return F.cross_entropy(logits, target) + soft_dice_loss(logits, target)


def supervised_loss(
    student: nn.Module,
    batch: LabeledBatch,
    cfg: TrainConfig,
) -> tuple[Tensor, dict[str, float]]:
    """Cross-entropy + soft Dice on the labeled batch, both branch routes.

    A converted student pays the individual-branch loss plus ``lambda_af``
    times the aggregated-branch loss; a plain student pays a single forward.
    An empty batch warns and contributes zero.
    """
    if batch.images.shape[0] == 0:
        warnings.warn("empty labeled batch; supervised loss is 0", RuntimeWarning)
        zero = torch.zeros((), requires_grad=True)
        return zero, {"L_if": 0.0, "L_af": 0.0}
    if norm_sites(student):
        logits_if = _routed_by_domain(
            student, batch.images, batch.domain_ids, ForwardMode.INDIVIDUAL
        )
        loss_if = _ce_dice(logits_if, batch.labels)
        if cfg.lambda_af > 0:
            ctx = RoutingContext(ForwardMode.AGGREGATED)
            loss_af = _ce_dice(forward_routed(student, batch.images, ctx), batch.labels)
        else:
            loss_af = torch.zeros(())
        total = loss_if + cfg.lambda_af * loss_af
        return total, {"L_if": _scalar(loss_if), "L_af": _scalar(loss_af)}
    loss = _ce_dice(student(batch.images), batch.labels)
    return loss, {"L_if": _scalar(loss), "L_af": 0.0}


def unsupervised_loss(
    pair: ModelPair,
    batch: UnlabeledBatch,
    pseudo: PseudoLabelBatch,
    cfg: TrainConfig,
    rng: Optional[torch.Generator] = None,
) -> tuple[Tensor, dict[str, float]]:
    """The three consistency streams against one pseudo-label batch.

    Strong and styled views go through the student's aggregated route; the
    weak view goes through the random-forward route with perturbation
    probability ``p_rand``.  Zero-weight streams are skipped entirely and
    reported as 0.
    """
    student = pair.student
    converted = bool(norm_sites(student))

    def stream_af(x: Tensor) -> Tensor:
        if converted:
            return forward_routed(student, x, RoutingContext(ForwardMode.AGGREGATED))
        return student(x)

    loss_s = masked_cross_entropy(
        stream_af(batch.strong), pseudo.hard_labels, pseudo.mask, cfg.ce_denominator
    )
    parts = {"L_s": _scalar(loss_s)}
    total = loss_s
    if cfg.lambda_h > 0:
        loss_h = masked_cross_entropy(
            stream_af(batch.styled), pseudo.hard_labels, pseudo.mask, cfg.ce_denominator
        )
        total = total + cfg.lambda_h * loss_h
        parts["L_h"] = _scalar(loss_h)
    else:
        parts["L_h"] = 0.0
    if cfg.lambda_r > 0:
        if not converted:
            raise ValueError("random-forward stream requires a converted student")
        logits_r = _routed_by_domain(
            student,
            batch.weak,
            batch.domain_ids,
            ForwardMode.RANDOM,
            rand_p=cfg.p_rand,
            rng=rng,
        )
        loss_r = masked_cross_entropy(
            logits_r, pseudo.hard_labels, pseudo.mask, cfg.ce_denominator
        )
        total = total + cfg.lambda_r * loss_r
        parts["L_r"] = _scalar(loss_r)
    else:
        parts["L_r"] = 0.0
    return total, parts


def ema_update(pair: ModelPair) -> None:
    """Teacher parameters drift toward the student; buffers are copied.

    ``teacher <- m * teacher + (1 - m) * student`` per parameter.  Running
    statistics have no meaningful EMA (variances would mix incoherently), so
    buffers transfer verbatim.
    """
    m = pair.ema_momentum
    with torch.no_grad():
        for (name_t, p_t), (name_s, p_s) in zip(
            pair.teacher.named_parameters(), pair.student.named_parameters()
        ):
            if name_t != name_s:
                raise ValueError(f"parameter mismatch: {name_t} vs {name_s}")
            if p_t.shape != p_s.shape:
                raise ValueError(
                    f"shape mismatch for {name_t}: {tuple(p_t.shape)} vs {tuple(p_s.shape)}"
                )
            p_t.mul_(m).add_((1.0 - m) * p_s)
        for (name_t, b_t), (name_s, b_s) in zip(
            pair.teacher.named_buffers(), pair.student.named_buffers()
        ):
            if name_t != name_s:
                raise ValueError(f"buffer mismatch: {name_t} vs {name_s}")
            b_t.copy_(b_s)


def build_optimizer(student: nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    """Decoupled-weight-decay optimizer with the mixing logits set apart.

    The per-channel mixing logits train at ``alpha_lr_multiplier`` times the
    base learning rate with zero weight decay; everything else uses the base
    settings.
    """
    mix_params = [site.mix.logit for site in norm_sites(student)]
    mix_ids = {id(p) for p in mix_params}
    base_params = [p for p in student.parameters() if id(p) not in mix_ids]
    groups = [{"params": base_params}]
    if mix_params:
        groups.append(
            {
                "params": mix_params,
                "lr": cfg.lr * cfg.alpha_lr_multiplier,
                "weight_decay": 0.0,
            }
        )
    return torch.optim.AdamW(groups, lr=cfg.lr, weight_decay=cfg.weight_decay)


@dataclasses.dataclass
class TrainState:
    pair: ModelPair
    optimizer: torch.optim.Optimizer
    torch_rng: torch.Generator
    iteration: int = 0


def make_model_pair(arch: ArchSpec, n_domains: int, cfg: TrainConfig) -> ModelPair:
    """Build student and teacher, converted and configured per ``cfg``."""
    student = UNet(arch)
    if cfg.use_branches:
        convert_model(
            student,
            n_domains,
            alpha_init=cfg.alpha_init,
            eps=cfg.epsilon,
            momentum=cfg.norm_momentum,
        )
        if cfg.aggregated_statistics != "mixed":
            pin = 40.0 if cfg.aggregated_statistics == "batch" else -40.0
            for site in norm_sites(student):
                with torch.no_grad():
                    site.mix.logit.fill_(pin)
                site.mix.logit.requires_grad_(False)
    teacher = copy.deepcopy(student)
    return ModelPair(student=student, teacher=teacher, ema_momentum=cfg.ema_momentum)


def make_train_state(arch: ArchSpec, n_domains: int, cfg: TrainConfig) -> TrainState:
    """Seeded pair, optimizer, and perturbation stream for one run.

    Model initialization runs inside a forked RNG scope seeded from
    ``cfg.seed``, so two runs with the same config produce identical
    trajectories regardless of ambient torch RNG state.
    """
    init_seed = int(np.random.SeedSequence((cfg.seed, 0x14)).generate_state(1)[0])
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(init_seed)
        pair = make_model_pair(arch, n_domains, cfg)
    gen = torch.Generator()
    gen.manual_seed(int(np.random.SeedSequence((cfg.seed, 0x7C)).generate_state(1)[0]))
    return TrainState(
        pair=pair, optimizer=build_optimizer(pair.student, cfg), torch_rng=gen
    )


REPORT_KEYS = ("L_x", "L_s", "L_h", "L_r", "L_u", "mask_rate", "total")


def train_step(
    state: TrainState,
    labeled: LabeledBatch,
    unlabeled: UnlabeledBatch,
    cfg: TrainConfig,
) -> dict[str, float]:
    """One optimization step; returns all loss components and the mask rate."""
    pair = state.pair
    pair.student.train()
    loss_x, _ = supervised_loss(pair.student, labeled, cfg)
    pseudo = pseudo_label(pair, unlabeled.weak, unlabeled.domain_ids, cfg)
    loss_u, parts = unsupervised_loss(
        pair, unlabeled, pseudo, cfg, rng=state.torch_rng
    )
    total = loss_x + cfg.lambda_u * loss_u

    components = [
        ("L_x", _scalar(loss_x)),
        ("L_s", parts["L_s"]),
        ("L_h", parts["L_h"]),
        ("L_r", parts["L_r"]),
        ("total", _scalar(total)),
    ]
    for name, value in components:
        if not np.isfinite(value):
            raise TrainingDivergedError(
                f"non-finite loss component {name} = {value} at iteration "
                f"{state.iteration}"
            )

    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()
    ema_update(pair)
    state.iteration += 1
    return {
        "L_x": _scalar(loss_x),
        "L_s": parts["L_s"],
        "L_h": parts["L_h"],
        "L_r": parts["L_r"],
        "L_u": _scalar(loss_u),
        "mask_rate": pseudo.mask_rate,
        "total": _scalar(total),
    }


def mask_to_tensor(mask: np.ndarray) -> Tensor:
    return torch.from_numpy(np.ascontiguousarray(mask)).long()


def sample_batches(
    registry: DatasetRegistry,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> tuple[LabeledBatch, UnlabeledBatch]:
    """Draw one training batch: equal per-domain labeled and unlabeled
    sub-batches, weakly augmented, with the unlabeled triplet views built.
    """
    strong_params = StrongAugmentParams(
        jitter_lo=cfg.strong_jitter_lo,
        jitter_hi=cfg.strong_jitter_hi,
        blur_lo=cfg.strong_blur_lo,
        blur_hi=cfg.strong_blur_hi,
        op_prob=cfg.strong_op_prob,
    )
    lab_images, lab_masks, lab_domains = [], [], []
    unl_weak, unl_strong, unl_styled, unl_domains = [], [], [], []
    for d in registry.domain_ids:
        pool_l = registry.labeled(d)
        pool_u = registry.unlabeled(d) or pool_l
        for _ in range(cfg.labeled_per_domain):
            s = pool_l[int(rng.integers(len(pool_l)))]
            img, msk = weak_augment(s.image, s.mask, rng)
            lab_images.append(img)
            lab_masks.append(msk)
            lab_domains.append(d)
        for _ in range(cfg.unlabeled_per_domain):
            s = pool_u[int(rng.integers(len(pool_u)))]
            if registry.n_domains >= 2:
                triplet = make_triplet(s, registry, rng, strong_params)
                weak, strong, styled = triplet.weak, triplet.strong, triplet.styled
            else:
                # single-source degenerate case: no other domain to borrow a
                # style from, so the styled view falls back to the weak one
                weak, _ = weak_augment(s.image, None, rng)
                strong = strong_augment(weak, rng, strong_params)
                styled = weak
            unl_weak.append(weak)
            unl_strong.append(strong)
            unl_styled.append(styled)
            unl_domains.append(d)
    labeled = LabeledBatch(
        images=stack_images(lab_images),
        labels=torch.stack([mask_to_tensor(m) for m in lab_masks]),
        domain_ids=tuple(lab_domains),
    )
    unlabeled = UnlabeledBatch(
        weak=stack_images(unl_weak),
        strong=stack_images(unl_strong),
        styled=stack_images(unl_styled),
        domain_ids=tuple(unl_domains),
    )
    return labeled, unlabeled


def make_eval_predictor(net: nn.Module):
    """Wrap a plain or stripped network as an image-list predictor."""

    def predict(images):
        was_training = net.training
        net.eval()
        try:
            with torch.no_grad():
                x = stack_images(images)
                labels = net(x).argmax(dim=1).numpy()
        finally:
            net.train(was_training)
        return [labels[i] for i in range(labels.shape[0])]

    return predict


def deployment_model(net: nn.Module) -> nn.Module:
    """The network actually shipped: aggregated-only if converted."""
    if norm_sites(net):
        return strip_individual_branches(net)
    return copy.deepcopy(net)


@dataclasses.dataclass
class TrainResult:
    state: TrainState
    batch_rng: np.random.Generator
    arch: ArchSpec
    history: list[dict]
    pseudo_quality: dict[int, dict[str, dict[int, float]]]
    final_unseen_dice: Optional[float]
    unseen_domain: str
    remap: dict[int, int]

    @property
    def pair(self) -> ModelPair:
        return self.state.pair


def save_trainer_state(path, result: TrainResult) -> None:
    """Persist everything needed to continue a run where it stopped."""
    state = result.state
    torch.save(
        {
            "iteration": state.iteration,
            "student": state.pair.student.state_dict(),
            "teacher": state.pair.teacher.state_dict(),
            "optimizer": state.optimizer.state_dict(),
            "torch_rng": state.torch_rng.get_state(),
            "batch_rng": result.batch_rng.bit_generator.state,
            "arch": dataclasses.asdict(result.arch),
        },
        path,
    )


def load_trainer_state(
    path, n_domains: int, cfg: TrainConfig
) -> tuple[TrainState, np.random.Generator, ArchSpec]:
    """Rebuild a TrainState and batch stream saved by save_trainer_state."""
    payload = torch.load(path, weights_only=True)
    arch_kw = dict(payload["arch"])
    arch_kw["widths"] = tuple(arch_kw["widths"])
    arch = ArchSpec(**arch_kw)
    state = make_train_state(arch, n_domains, cfg)
    state.pair.student.load_state_dict(payload["student"])
    state.pair.teacher.load_state_dict(payload["teacher"])
    state.optimizer.load_state_dict(payload["optimizer"])
    state.torch_rng.set_state(payload["torch_rng"])
    state.iteration = int(payload["iteration"])
    batch_rng = np.random.default_rng()
    batch_rng.bit_generator.state = payload["batch_rng"]
    return state, batch_rng, arch


def train_loop(
    registry: DatasetRegistry,
    cfg: TrainConfig,
    arch: Optional[ArchSpec] = None,
    progress: Optional[callable] = None,
    resume: Optional[tuple[TrainState, np.random.Generator]] = None,
) -> TrainResult:
    """Full protocol: split, hold out, train, periodically evaluate.

    ``registry`` is the raw multi-domain registry (all masks present).  The
    unseen domain is evaluated through the deployment model (teacher with
    individual branches stripped).  History records carry loss components
    every iteration and unseen-domain Dice at evaluation points.  Passing
    ``resume`` continues a previous run's state and iteration counter; the
    data split and sampling streams are reproduced from the config seed.
    """
    split = split_labeled_unlabeled(registry, cfg.labeled_fraction, cfg.seed)
    if cfg.unseen_domain > registry.n_domains:
        raise ValueError(
            f"unseen_domain {cfg.unseen_domain} exceeds registry's "
            f"{registry.n_domains} domains"
        )
    holdout = leave_one_out(split, cfg.unseen_domain)
    train_registry = holdout.train_registry
    if train_registry.n_domains == 1:
        warnings.warn(
            "single source domain after hold-out: random-forward has no "
            "other branch to borrow from",
            RuntimeWarning,
        )
    sample0 = train_registry.samples(1)[0]
    in_channels = 1 if sample0.image.ndim == 2 else sample0.image.shape[2]
    if arch is None:
        arch = ArchSpec(
            in_channels=in_channels,
            n_classes=train_registry.n_classes,
            widths=tuple(cfg.widths),
        )
    if resume is None:
        state = make_train_state(arch, train_registry.n_domains, cfg)
        batch_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xBA)))
    else:
        state, batch_rng = resume
        if state.iteration > cfg.iterations:
            raise ValueError(
                f"resumed state is at iteration {state.iteration}, past the "
                f"configured {cfg.iterations}"
            )

    history: list[dict] = []
    quality: dict[int, dict[str, dict[int, float]]] = {}
    final_dice: Optional[float] = None

    def evaluate_unseen() -> float:
        deployed = deployment_model(state.pair.teacher)
        report = evaluate_model(
            make_eval_predictor(deployed),
            holdout.test_samples,
            registry.n_classes,
            batch_size=8,
        )
        return report.mean_dice_pct

    for it in range(state.iteration + 1, cfg.iterations + 1):
        labeled, unlabeled = sample_batches(train_registry, cfg, batch_rng)
        report = train_step(state, labeled, unlabeled, cfg)
        record = {"iteration": it, **report}
        if it in cfg.pseudo_quality_at:
            quality[it] = {
                mode: pseudo_label_quality(
                    state.pair.teacher,
                    train_registry,
                    mode,
                    t_ensemble=1.0,
                    seed=cfg.seed,
                )
                for mode in ("if_ensemble", "single_bn")
            }
        if it % cfg.eval_every == 0 or it == cfg.iterations:
            final_dice = evaluate_unseen()
            record["unseen_dice"] = final_dice
        history.append(record)
        if progress is not None:
            progress(record)
    return TrainResult(
        state=state,
        batch_rng=batch_rng,
        arch=arch,
        history=history,
        pseudo_quality=quality,
        final_unseen_dice=final_dice,
        unseen_domain=holdout.unseen_domain,
        remap=holdout.remap,
    )
