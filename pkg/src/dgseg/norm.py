"""Multi-branch feature normalization for multi-domain training.

A converted normalization site holds one parameter branch per source domain
plus a single aggregated branch shared by all domains.  Three behaviours are
supported:

* individual:  normalize a single-domain batch with that domain's batch
  statistics and affine parameters,
* aggregated:  normalize with a learnable per-channel convex combination of
  batch and instance statistics, using the shared affine parameters,
* random:      like individual, but with some probability substitute the
  affine parameters of another domain's branch as a feature-level
  perturbation; affine parameters never receive gradient on this path.

All activations are N x C x H x W.  Domain ids are 1-based.
"""

from __future__ import annotations

import enum
import math
import warnings

import torch
from torch import Tensor, nn


class ForwardMode(enum.Enum):
    """Which branch a normalization site uses for a forward pass."""

    INDIVIDUAL = "individual"
    AGGREGATED = "aggregated"
    RANDOM = "random"


class BranchParams(nn.Module):
    """Affine parameters and running statistics of one normalization branch.

    ``running_momentum`` is the weight kept on the *old* running estimate at
    each update: ``running <- m * running + (1 - m) * new``.
    """

    def __init__(self, channels: int, momentum: float = 0.1):
        super().__init__()
        if channels < 1:
            raise ValueError(f"channels must be >= 1, got {channels}")
        if not 0.0 <= momentum <= 1.0:
            raise ValueError(f"momentum must be in [0, 1], got {momentum}")
        self.gamma = nn.Parameter(torch.ones(channels))
        self.beta = nn.Parameter(torch.zeros(channels))
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))
        self.running_momentum = momentum

    @property
    def channels(self) -> int:
        return self.gamma.numel()

    def extra_repr(self) -> str:
        return f"{self.channels}, momentum={self.running_momentum}"


class ChannelMix(nn.Module):
    """Learnable per-channel coefficient in (0, 1), stored as a logit.

    The derived value is ``sigmoid(logit)``, so the coefficient can approach
    but never reach 0 or 1 and is unconstrained during optimization.
    """

    def __init__(self, channels: int, init: float = 0.5):
        super().__init__()
        if not 0.0 < init < 1.0:
            raise ValueError(f"mix init must be strictly inside (0, 1), got {init}")
        logit = math.log(init / (1.0 - init))
        self.logit = nn.Parameter(torch.full((channels,), logit))

    @property
    def value(self) -> Tensor:
        return torch.sigmoid(self.logit)

    def extra_repr(self) -> str:
        return f"{self.logit.numel()}"


class MultiBranchNorm2d(nn.Module):
    """One converted normalization site: K per-domain branches + 1 aggregated.

    The forward pass dispatches on a routing context installed by the model's
    routed forward (see :func:`dgseg.model.forward_routed`); calling the module
    without a route installed is an error.  Training-mode calls mutate running
    statistics and are not safe to run concurrently; evaluation-mode calls are
    read-only.
    """

    def __init__(
        self,
        channels: int,
        n_domains: int,
        eps: float = 1e-5,
        momentum: float = 0.1,
        alpha_init: float = 0.5,
    ):
        super().__init__()
        if n_domains < 1:
            raise ValueError(f"n_domains must be >= 1, got {n_domains}")
        if eps <= 0:
            raise ValueError(f"eps must be > 0, got {eps}")
        self.n_domains = n_domains
        self.channels = channels
        self.eps = eps
        self.individual = nn.ModuleList(
            BranchParams(channels, momentum) for _ in range(n_domains)
        )
        self.aggregated = BranchParams(channels, momentum)
        self.mix = ChannelMix(channels, alpha_init)
        # Routing context for the next forward call; duck-typed, set and
        # cleared by the model layer, never serialized.
        self._route = None

    def forward(self, x: Tensor) -> Tensor:
        route = self._route
        if route is None:
            raise RuntimeError(
                "MultiBranchNorm2d called without a routing context; "
                "use dgseg.model.forward_routed"
            )
        if route.mode is ForwardMode.INDIVIDUAL:
            return normalize_individual(
                self, x, route.domain_id, self.training, update_stats=route.update_stats
            )
        if route.mode is ForwardMode.AGGREGATED:
            return normalize_aggregated(
                self, x, self.training, update_stats=route.update_stats
            )
        if route.mode is ForwardMode.RANDOM:
            return normalize_random(
                self,
                x,
                route.domain_id,
                route.rand_p,
                route.rng,
                training=self.training,
                update_stats=route.update_stats,
            )
        raise ValueError(f"unknown forward mode {route.mode!r}")

    def extra_repr(self) -> str:
        return f"{self.channels}, n_domains={self.n_domains}, eps={self.eps}"


def _check_activation(x: Tensor) -> None:
    if x.dim() != 4:
        raise ValueError(f"expected N x C x H x W activation, got shape {tuple(x.shape)}")
    if x.shape[0] < 1:
        raise ValueError("empty batch: N must be >= 1")
    if x.shape[2] * x.shape[3] < 1:
        raise ValueError("empty spatial extent: H * W must be >= 1")


def _check_site_input(site, x: Tensor) -> None:
    _check_activation(x)
    if x.shape[1] != site.channels:
        raise ValueError(
            f"channel mismatch: site has {site.channels} channels, input has {x.shape[1]}"
        )


def _check_domain(site, domain_id) -> None:
    k = len(site.individual)
    if not isinstance(domain_id, int) or not 1 <= domain_id <= k:
        raise ValueError(f"domain id must be an integer in [1, {k}], got {domain_id!r}")


def compute_batch_stats(x: Tensor) -> tuple[Tensor, Tensor]:
    """Per-channel mean and biased variance over all N*H*W entries.

    Returns two length-C vectors.
    """
    _check_activation(x)
    mu = x.mean(dim=(0, 2, 3))
    var = x.var(dim=(0, 2, 3), unbiased=False)
    return mu, var


def compute_instance_stats(x: Tensor) -> tuple[Tensor, Tensor]:
    """Per-sample per-channel mean and biased variance over spatial positions.

    Returns two N x C tensors.
    """
    _check_activation(x)
    mu = x.mean(dim=(2, 3))
    var = x.var(dim=(2, 3), unbiased=False)
    return mu, var


def update_running_stats(
    branch: BranchParams, mu: Tensor, var: Tensor, momentum: float
) -> BranchParams:
    """In-place EMA update: ``running <- momentum * running + (1 - momentum) * new``."""
    if not 0.0 <= momentum <= 1.0:
        raise ValueError(f"momentum must be in [0, 1], got {momentum}")
    if bool((var < 0).any()):
        raise ValueError("negative variance passed to running-statistics update")
    with torch.no_grad():
        branch.running_mean.mul_(momentum).add_((1.0 - momentum) * mu)
        branch.running_var.mul_(momentum).add_((1.0 - momentum) * var)
    return branch


def _affine(x_hat: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    return gamma.view(1, -1, 1, 1) * x_hat + beta.view(1, -1, 1, 1)


def _unbiased(var: Tensor, n: int) -> Tensor:
    # Running buffers hold the unbiased estimate (standard convention);
    # normalization itself always uses the biased one.  n == 1 has no
    # unbiased estimate, keep the raw zeros.
    if n > 1:
        return var * (n / (n - 1))
    return var


def normalize_individual(
    site,
    x: Tensor,
    domain_id: int,
    training: bool,
    update_stats: bool = True,
) -> Tensor:
    """Normalize a single-domain batch with its own branch.

    In training mode the current batch statistics are used (and folded into
    the branch's running estimates unless ``update_stats`` is off); in
    evaluation mode the running estimates are used.
    """
    _check_site_input(site, x)
    _check_domain(site, domain_id)
    branch = site.individual[domain_id - 1]
    if training:
        if update_stats:
            mu, var = compute_batch_stats(x)
            n = x.shape[0] * x.shape[2] * x.shape[3]
            update_running_stats(
                branch,
                mu.detach(),
                _unbiased(var.detach(), n),
                branch.running_momentum,
            )
        # The stock kernel, not a hand-rolled formula: a converted site must
        # be arithmetically identical to the BatchNorm2d it replaced, down to
        # the last ulp, or single-branch conversion stops being an identity.
        return nn.functional.batch_norm(
            x, None, None, branch.gamma, branch.beta, True, 0.0, site.eps
        )
    return nn.functional.batch_norm(
        x,
        branch.running_mean,
        branch.running_var,
        branch.gamma,
        branch.beta,
        False,
        0.0,
        site.eps,
    )


def normalize_aggregated(
    site,
    x: Tensor,
    training: bool,
    update_stats: bool = True,
) -> Tensor:
    """Normalize with the per-channel convex mix of batch and instance statistics.

    With mixing coefficient ``a = sigmoid(mix.logit)`` the statistics are
    ``a * batch + (1 - a) * instance``, the batch term broadcast over samples.
    In evaluation mode the batch term comes from the running estimates while
    the instance term is always computed from the input itself.
    """
    _check_site_input(site, x)
    inst_mu, inst_var = compute_instance_stats(x)
    branch = site.aggregated
    if training:
        batch_mu, batch_var = compute_batch_stats(x)
        if update_stats:
            n = x.shape[0] * x.shape[2] * x.shape[3]
            update_running_stats(
                branch,
                batch_mu.detach(),
                _unbiased(batch_var.detach(), n),
                branch.running_momentum,
            )
    else:
        batch_mu, batch_var = branch.running_mean, branch.running_var
    alpha = site.mix.value
    mu = alpha.unsqueeze(0) * batch_mu.unsqueeze(0) + (1.0 - alpha).unsqueeze(0) * inst_mu
    var = alpha.unsqueeze(0) * batch_var.unsqueeze(0) + (1.0 - alpha).unsqueeze(0) * inst_var
    x_hat = (x - mu.unsqueeze(-1).unsqueeze(-1)) / torch.sqrt(
        var.unsqueeze(-1).unsqueeze(-1) + site.eps
    )
    return _affine(x_hat, branch.gamma, branch.beta)


def normalize_random(
    site,
    x: Tensor,
    domain_id: int,
    p: float,
    rng: torch.Generator | None,
    training: bool = True,
    update_stats: bool = True,
) -> Tensor:
    """Individual normalization with randomly substituted affine parameters.

    With probability ``p`` (drawn independently at each site) the affine
    parameters of a uniformly chosen other branch replace this domain's,
    while the statistics stay the domain's own.  Affine parameters are
    detached on this path whether or not the substitution fires, so they
    never receive gradient through a random forward.
    """
    _check_site_input(site, x)
    _check_domain(site, domain_id)
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"perturbation probability must be in [0, 1], got {p}")
    k = len(site.individual)
    if k == 1 and p > 0:
        warnings.warn(
            "random-forward with a single branch cannot perturb; "
            "behaving like individual normalization",
            RuntimeWarning,
            stacklevel=2,
        )
    affine_branch = site.individual[domain_id - 1]
    if p > 0 and k >= 2:
        if rng is None:
            raise ValueError("random-forward with p > 0 requires a seeded generator")
        if torch.rand((), generator=rng).item() < p:
            others = [i for i in range(k) if i != domain_id - 1]
            pick = others[int(torch.randint(len(others), (), generator=rng).item())]
            affine_branch = site.individual[pick]

    stats_branch = site.individual[domain_id - 1]
    gamma = affine_branch.gamma.detach()
    beta = affine_branch.beta.detach()
    if training:
        if update_stats:
            mu, var = compute_batch_stats(x)
            n = x.shape[0] * x.shape[2] * x.shape[3]
            update_running_stats(
                stats_branch,
                mu.detach(),
                _unbiased(var.detach(), n),
                stats_branch.running_momentum,
            )
        return nn.functional.batch_norm(x, None, None, gamma, beta, True, 0.0, site.eps)
    return nn.functional.batch_norm(
        x,
        stats_branch.running_mean,
        stats_branch.running_var,
        gamma,
        beta,
        False,
        0.0,
        site.eps,
    )
