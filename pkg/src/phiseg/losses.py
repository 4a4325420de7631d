"""Training objective: reconstruction CE, per-level weighted KL, deep supervision."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ShapeMismatchError
from .model import GaussianParams, PHiSegNet

LOG_EPS = 1e-10


@dataclass
class LossBreakdown:
    """Components of one training objective evaluation (torch scalars)."""

    recon_ce: torch.Tensor
    kl: list[torch.Tensor]
    deep_sup_ce: list[torch.Tensor]
    total: torch.Tensor

    def to_floats(self) -> dict:
        d = {
            "recon_ce": float(self.recon_ce),
            "deep_sup_ce": [float(v) for v in self.deep_sup_ce],
            "total": float(self.total),
        }
        if self.kl:
            d["kl"] = [float(v) for v in self.kl]
        return d


def kl_diag_gaussian(q: GaussianParams, p: GaussianParams) -> torch.Tensor:
    """KL[q || p] between diagonal Gaussians, summed over positions and
    channels, averaged over the batch dimension."""
    if q.mu.shape != p.mu.shape:
        raise ShapeMismatchError(
            f"q shape {tuple(q.mu.shape)} != p shape {tuple(p.mu.shape)}"
        )
    for g in (q, p):
        if not torch.all(g.sigma > 0):
            raise ValueError(f"non-positive sigma at level {g.level}")
    var_ratio = (q.sigma / p.sigma) ** 2
    term = 0.5 * (
        var_ratio
        + ((p.mu - q.mu) / p.sigma) ** 2
        - 1.0
        + 2.0 * torch.log(p.sigma)
        - 2.0 * torch.log(q.sigma)
    )
    return term.sum(dim=tuple(range(1, term.dim()))).mean()


def categorical_ce(
    logits: torch.Tensor,
    target: torch.Tensor,
    weights: torch.Tensor | None = None,
) -> torch.Tensor:
    """Mean over pixels (and batch) of -log softmax(logits)[target]."""
    if logits.shape[0] != target.shape[0] or logits.shape[2:] != target.shape[1:]:
        raise ShapeMismatchError(
            f"logits {tuple(logits.shape)} incompatible with target {tuple(target.shape)}"
        )
    if int(target.max()) >= logits.shape[1] or int(target.min()) < 0:
        raise ValueError("target class index out of range")
    per_pixel = F.cross_entropy(logits, target.long(), reduction="none")
    if weights is None:
        return per_pixel.mean()
    if weights.shape != per_pixel.shape:
        raise ShapeMismatchError(
            f"weights {tuple(weights.shape)} must match pixel grid {tuple(per_pixel.shape)}"
        )
    return (per_pixel * weights).sum() / weights.sum()


def deep_supervision_loss(
    pyramid: list[torch.Tensor], s_gt: torch.Tensor
) -> list[torch.Tensor]:
    """CE of the nearest-neighbour upsampled logits against full-res ground
    truth, for levels 2..L (index 0 of the result is level 2)."""
    terms = []
    for i in range(1, len(pyramid)):
        up = F.interpolate(pyramid[i], scale_factor=2**i, mode="nearest")
        terms.append(categorical_ce(up, s_gt))
    return terms


def total_loss(
    posterior_params: list[GaussianParams],
    prior_params: list[GaussianParams],
    pyramid: list[torch.Tensor],
    s_gt: torch.Tensor,
    alpha: list[float],
) -> LossBreakdown:
    """recon CE + sum_l alpha_l * KL_l + deep supervision terms.

    The prior params at level l must have been computed conditioning on the
    posterior's sampled z_{l+1} (injected), so each KL term matches the
    objective's expectation structure.
    """
    if len(posterior_params) != len(prior_params):
        raise ShapeMismatchError(
            f"posterior has {len(posterior_params)} levels, prior {len(prior_params)}"
        )
    if len(alpha) != len(posterior_params):
        raise ShapeMismatchError(
            f"alpha has {len(alpha)} entries for {len(posterior_params)} levels"
        )
    recon = categorical_ce(pyramid[0], s_gt)
    kls = [kl_diag_gaussian(q, p) for q, p in zip(posterior_params, prior_params)]
    deep = deep_supervision_loss(pyramid, s_gt)
    total = recon
    for a, kl in zip(alpha, kls):
        total = total + a * kl
    for term in deep:
        total = total + term
    return LossBreakdown(recon_ce=recon, kl=kls, deep_sup_ce=deep, total=total)


def _categorical_loglik(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-batch-element log p(s|z): sum over pixels of log softmax at target."""
    logp = F.log_softmax(logits, dim=1)
    gathered = logp.gather(1, target.long().unsqueeze(1)).squeeze(1)
    return gathered.sum(dim=(1, 2))


def _gaussian_logdensity(z: torch.Tensor, g: GaussianParams) -> torch.Tensor:
    """Per-batch-element diagonal Gaussian log density, summed over dims."""
    term = -0.5 * ((z - g.mu) / g.sigma) ** 2 - torch.log(g.sigma) - 0.5 * math.log(2 * math.pi)
    return term.sum(dim=tuple(range(1, term.dim())))


def _elbo_sample_logw(
    net: PHiSegNet, x: torch.Tensor, s: torch.Tensor, generator: torch.Generator
) -> torch.Tensor:
    """One stochastic bound sample: log p(s|z) + log p(z|x) - log q(z|s,x)."""
    q_params, z = net.posterior_forward(x, s, generator=generator)
    p_params, _ = net.prior_forward(x, injected=list(z))
    pyramid = net.likelihood_forward(z)
    logw = _categorical_loglik(pyramid[0], s)
    for zi, qi, pi in zip(z, q_params, p_params):
        logw = logw + _gaussian_logdensity(zi, pi) - _gaussian_logdensity(zi, qi)
    return logw


def single_sample_elbo_estimate(
    net: PHiSegNet, x: torch.Tensor, s: torch.Tensor, seed: int
) -> float:
    """One-draw stochastic estimate of the variational bound (frozen norm stats)."""
    generator = torch.Generator().manual_seed(seed)
    was_training = net.training
    net.eval()
    try:
        with torch.no_grad():
            logw = _elbo_sample_logw(net, x, s, generator)
    finally:
        net.train(was_training)
    return float(logw.mean())


def importance_weighted_logp_estimate(
    net: PHiSegNet, x: torch.Tensor, s: torch.Tensor, k: int, seed: int
) -> float:
    """log-mean-exp over k posterior draws of the per-sample bound weights.

    Tightens toward log p(s|x) as k grows; k=1 reduces to the single-sample
    bound estimate with the same seed.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    generator = torch.Generator().manual_seed(seed)
    was_training = net.training
    net.eval()
    try:
        with torch.no_grad():
            logws = torch.stack(
                [_elbo_sample_logw(net, x, s, generator) for _ in range(k)]
            )
    finally:
        net.train(was_training)
    estimate = torch.logsumexp(logws, dim=0) - math.log(k)
    return float(estimate.mean())
