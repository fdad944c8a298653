"""Segmentation backbone, branch conversion, routing, and checkpointing.

The backbone is a small encoder-decoder network built from plain Conv2d +
BatchNorm2d + ReLU blocks.  ``convert_model`` rewrites every BatchNorm2d into
a :class:`~dgseg.norm.MultiBranchNorm2d` in place, after which every forward
pass must go through :func:`forward_routed` so each site knows which branch
to use.  ``strip_individual_branches`` produces the deployment variant that
keeps only the aggregated branch.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import io
from typing import Optional

import torch
from torch import Tensor, nn

from .norm import ForwardMode, MultiBranchNorm2d, normalize_aggregated


@dataclasses.dataclass(frozen=True)
class ArchSpec:
    """Shape of the segmentation backbone."""

    in_channels: int = 1
    n_classes: int = 2
    widths: tuple[int, ...] = (16, 32, 64, 128)

    def __post_init__(self):
        if self.in_channels < 1:
            raise ValueError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.n_classes < 2:
            raise ValueError(f"n_classes must be >= 2, got {self.n_classes}")
        if len(self.widths) < 2:
            raise ValueError("need at least two stages (one downsampling level)")
        if any(w < 1 for w in self.widths):
            raise ValueError(f"widths must be positive, got {self.widths}")


# BatchNorm2d here uses torch's momentum convention (weight on the NEW batch
# statistic), so torch momentum 0.9 corresponds to keeping 0.1 of the old
# estimate, matching the converted branches' default of 0.1 on the old value.
TORCH_BN_MOMENTUM = 0.9


def _double_conv(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, padding=1, bias=False),
        nn.BatchNorm2d(c_out, momentum=TORCH_BN_MOMENTUM),
        nn.ReLU(inplace=True),
        nn.Conv2d(c_out, c_out, 3, padding=1, bias=False),
        nn.BatchNorm2d(c_out, momentum=TORCH_BN_MOMENTUM),
        nn.ReLU(inplace=True),
    )


class UNet(nn.Module):
    """Encoder-decoder segmentation network with skip connections.

    Spatial size must be divisible by ``2 ** (len(widths) - 1)``.  Output is
    raw per-class logits at input resolution.
    """

    def __init__(self, spec: ArchSpec = ArchSpec()):
        super().__init__()
        self.spec = spec
        w = spec.widths
        self.inc = _double_conv(spec.in_channels, w[0])
        self.downs = nn.ModuleList(
            _double_conv(w[i], w[i + 1]) for i in range(len(w) - 1)
        )
        self.pool = nn.MaxPool2d(2)
        self.ups = nn.ModuleList(
            nn.ConvTranspose2d(w[i + 1], w[i], 2, stride=2)
            for i in reversed(range(len(w) - 1))
        )
        self.up_convs = nn.ModuleList(
            _double_conv(2 * w[i], w[i]) for i in reversed(range(len(w) - 1))
        )
        self.out_conv = nn.Conv2d(w[0], spec.n_classes, 1)

    def forward(self, x: Tensor) -> Tensor:
        factor = 2 ** len(self.downs)
        if x.shape[-2] % factor or x.shape[-1] % factor:
            raise ValueError(
                f"spatial size {tuple(x.shape[-2:])} not divisible by {factor}"
            )
        skips = []
        h = self.inc(x)
        for down in self.downs:
            skips.append(h)
            h = down(self.pool(h))
        for up, conv, skip in zip(self.ups, self.up_convs, reversed(skips)):
            h = conv(torch.cat([up(h), skip], dim=1))
        return self.out_conv(h)


@dataclasses.dataclass
class RoutingContext:
    """How every normalization site should behave for one forward pass.

    ``domain_id`` is 1-based and required for individual and random modes;
    the aggregated mode is domain-agnostic and must not carry one.  ``rng``
    drives the random mode's substitution draws.  ``update_stats`` gates
    running-statistics updates in training mode.
    """

    mode: ForwardMode
    domain_id: Optional[int] = None
    rand_p: float = 0.0
    rng: Optional[torch.Generator] = None
    update_stats: bool = True

    def __post_init__(self):
        if self.mode in (ForwardMode.INDIVIDUAL, ForwardMode.RANDOM):
            if self.domain_id is None:
                raise ValueError(f"{self.mode.value} forward requires a domain id")
        elif self.mode is ForwardMode.AGGREGATED:
            if self.domain_id is not None:
                raise ValueError(
                    "aggregated forward is domain-agnostic; do not pass a domain id"
                )
        if not 0.0 <= self.rand_p <= 1.0:
            raise ValueError(f"rand_p must be in [0, 1], got {self.rand_p}")


def norm_sites(net: nn.Module) -> list[MultiBranchNorm2d]:
    return [m for m in net.modules() if isinstance(m, MultiBranchNorm2d)]


def convert_model(
    net: nn.Module,
    n_domains: int,
    alpha_init: float = 0.5,
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> nn.Module:
    """Replace every BatchNorm2d with a multi-branch site, in place.

    Every individual branch and the aggregated branch start from the source
    layer's affine parameters and running statistics, so a freshly converted
    model computes the same function the unconverted one did (per branch).
    Converting twice is an error, as is converting a model with no
    normalization layers.
    """
    if n_domains < 1:
        raise ValueError(f"n_domains must be >= 1, got {n_domains}")
    if norm_sites(net):
        raise ValueError("model already converted; refusing to nest branch sites")

    replaced = 0
    for parent in list(net.modules()):
        for name, child in list(parent.named_children()):
            if isinstance(child, nn.BatchNorm2d):
                site = MultiBranchNorm2d(
                    child.num_features,
                    n_domains,
                    eps=eps,
                    momentum=momentum,
                    alpha_init=alpha_init,
                )
                with torch.no_grad():
                    for branch in list(site.individual) + [site.aggregated]:
                        branch.gamma.copy_(child.weight)
                        branch.beta.copy_(child.bias)
                        branch.running_mean.copy_(child.running_mean)
                        branch.running_var.copy_(child.running_var)
                setattr(parent, name, site)
                replaced += 1
    if replaced == 0:
        raise ValueError("model has no BatchNorm2d layers to convert")
    return net


def forward_routed(net: nn.Module, x: Tensor, ctx: RoutingContext) -> Tensor:
    """Run a converted model with every site following ``ctx``.

    The route is installed on all sites before the forward and removed
    afterwards even if the forward raises, so a failed pass cannot leak
    routing state into the next one.
    """
    sites = norm_sites(net)
    if not sites:
        raise ValueError("model has no branch sites; call convert_model first")
    for site in sites:
        site._route = ctx
    try:
        return net(x)
    finally:
        for site in sites:
            site._route = None


class AggregatedNorm2d(nn.Module):
    """Deployment normalization layer: aggregated branch only.

    Keeps the same attribute surface ``normalize_aggregated`` reads (an
    ``aggregated`` branch, a ``mix``, and ``eps``), so stripped and full
    models share one code path for the aggregated computation.
    """

    def __init__(self, source: MultiBranchNorm2d):
        super().__init__()
        self.channels = source.channels
        self.eps = source.eps
        self.aggregated = copy.deepcopy(source.aggregated)
        self.mix = copy.deepcopy(source.mix)

    def forward(self, x: Tensor) -> Tensor:
        return normalize_aggregated(self, x, self.training)

    def extra_repr(self) -> str:
        return f"{self.channels}, eps={self.eps}"


def strip_individual_branches(net: nn.Module) -> nn.Module:
    """Return a copy of a converted model with only aggregated branches.

    The result is a plain module: it forwards directly (no routing context)
    and always computes the aggregated normalization.  The input model is
    untouched.
    """
    if not norm_sites(net):
        raise ValueError("model has no branch sites; nothing to strip")
    stripped = copy.deepcopy(net)
    for parent in list(stripped.modules()):
        for name, child in list(parent.named_children()):
            if isinstance(child, MultiBranchNorm2d):
                setattr(parent, name, AggregatedNorm2d(child))
    return stripped


def parameter_counts(net: nn.Module) -> dict[str, int]:
    """Trainable parameter totals for the full model and its stripped variant."""
    total = sum(p.numel() for p in net.parameters())
    if norm_sites(net):
        inference = sum(p.numel() for p in strip_individual_branches(net).parameters())
    else:
        inference = total
    return {"train": total, "inference": inference}


def image_to_tensor(image) -> Tensor:
    """H x W (x C) float array in [0,1] to a C x H x W float32 tensor."""
    import numpy as np

    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None, ...]
    elif arr.ndim == 3:
        arr = np.transpose(arr, (2, 0, 1))
    else:
        raise ValueError(f"image must be H x W (x C), got shape {arr.shape}")
    return torch.from_numpy(arr.copy())


def stack_images(images) -> Tensor:
    """List of same-shaped images to an N x C x H x W batch tensor."""
    tensors = [image_to_tensor(im) for im in images]
    if not tensors:
        raise ValueError("empty image list")
    first = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != first:
            raise ValueError(f"inconsistent image shapes: {first} vs {t.shape}")
    return torch.stack(tensors, dim=0)


class CheckpointError(RuntimeError):
    pass


CHECKPOINT_FORMAT_VERSION = 1


def save_checkpoint(
    path,
    net: nn.Module,
    arch: ArchSpec,
    n_domains: int,
    norm_momentum: float = 0.1,
    extra: Optional[dict] = None,
) -> None:
    """Serialize a model with enough metadata to rebuild it exactly."""
    sites = [
        m
        for m in net.modules()
        if isinstance(m, (MultiBranchNorm2d, AggregatedNorm2d))
    ]
    if not sites:
        kind = "plain"
    elif all(isinstance(m, AggregatedNorm2d) for m in sites):
        kind = "stripped"
    else:
        kind = "full"
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "arch": dataclasses.asdict(arch),
        "n_domains": n_domains,
        "stripped": kind == "stripped",
        "kind": kind,
        "norm_momentum": norm_momentum,
        "state_dict": net.state_dict(),
        "extra": dict(extra or {}),
    }
    torch.save(payload, path)


def load_checkpoint(path, expect_domains: Optional[int] = None):
    """Rebuild a checkpointed model.  Returns ``(net, payload_metadata)``.

    Raises :class:`CheckpointError` on version or shape mismatches, naming
    the offending field.
    """
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"{path} is not a recognized checkpoint: missing format_version")
    if payload["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported format_version {payload['format_version']!r}, "
            f"expected {CHECKPOINT_FORMAT_VERSION}"
        )
    for key in ("arch", "n_domains", "stripped", "state_dict"):
        if key not in payload:
            raise CheckpointError(f"checkpoint missing required key {key!r}")
    arch = ArchSpec(**payload["arch"])
    n_domains = payload["n_domains"]
    if expect_domains is not None and n_domains != expect_domains:
        raise CheckpointError(
            f"n_domains mismatch: checkpoint has {n_domains}, expected {expect_domains}"
        )
    net = UNet(arch)
    momentum = payload.get("norm_momentum", 0.1)
    kind = payload.get("kind", "stripped" if payload["stripped"] else "full")
    if kind == "stripped":
        convert_model(net, n_domains, momentum=momentum)
        net = strip_individual_branches(net)
    elif kind == "full":
        convert_model(net, n_domains, momentum=momentum)
    elif kind != "plain":
        raise CheckpointError(f"unknown checkpoint kind {kind!r}")
    try:
        net.load_state_dict(payload["state_dict"])
    except RuntimeError as exc:
        raise CheckpointError(f"state_dict mismatch for {path}: {exc}") from exc
    meta = {k: v for k, v in payload.items() if k != "state_dict"}
    return net, meta


def state_hash(net: nn.Module) -> str:
    """Stable digest of all parameters and buffers, for change detection."""
    buf = io.BytesIO()
    torch.save(
        {k: v for k, v in sorted(net.state_dict().items())}, buf
    )
    return hashlib.sha256(buf.getvalue()).hexdigest()
