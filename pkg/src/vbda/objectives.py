"""Loss terms of the adaptation objective and the mutual-information diagnostics.

All logarithms are natural, so every entropy and information value is in nats.
Probabilities are clamped to ``[1e-12, 1]`` before any log.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from ._kernels import kernels
from .autodiff import RngStream, Tensor
from .errors import ContractError
from .models import GaussianLatent, ModelParams, classify, discriminate, encode, reparameterize

PROB_FLOOR = 1e-12


@dataclass
class LossBreakdown:
    l_cls: float
    l_adv: float
    l_ce: float
    kl_s: float
    kl_t: float
    total: float
    i_u_s: float
    i_u_t: float
    i_l_s: float

    def as_dict(self) -> dict:
        return asdict(self)

    def is_finite(self) -> bool:
        return all(np.isfinite(v) for v in asdict(self).values())


def _log_prob(p: Tensor) -> Tensor:
    return ad.log(ad.clamp(p, PROB_FLOOR, 1.0))


def classification_loss(probs: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of the true labels."""
    labels = np.asarray(labels, dtype=np.int64)
    k = probs.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ContractError(f"labels must lie in [0, {k})")
    return ad.neg(ad.mean(_log_prob(ad.pick(probs, labels))))


def adversarial_loss(d_src: Tensor, d_tgt: Tensor) -> Tensor:
    """Binary cross-entropy of the domain discriminator (source labelled 1)."""
    src = ad.mean(_log_prob(d_src))
    tgt = ad.mean(_log_prob(ad.sub(1.0, d_tgt)))
    return ad.neg(ad.add(src, tgt))


def conditional_entropy(probs_t: Tensor) -> Tensor:
    """Mean Shannon entropy of the predicted class distribution.

    This is the non-negative entropy, the quantity that gets minimized.
    """
    plogp = ad.mul(probs_t, _log_prob(probs_t))
    return ad.neg(ad.mean(ad.sum_rows(plogp)))


def kl_to_standard_normal(latent: GaussianLatent) -> Tensor:
    """Batch mean of KL(N(mu, diag(exp(log_var))) || N(0, I))."""
    mu, lv = latent.mu, latent.log_var
    inner = ad.sub(ad.add(ad.mul(mu, mu), ad.exp(lv)), ad.add(lv, 1.0))
    return ad.scale(ad.mean(ad.sum_rows(inner)), 0.5)


def mi_upper_bound(latent) -> float:
    """Average KL from each posterior to the standard-normal prior (nats).

    Accepts a :class:`GaussianLatent` or a ``(mu, log_var)`` pair of arrays.
    """
    if isinstance(latent, GaussianLatent):
        mu, lv = latent.mu.data, latent.log_var.data
    else:
        mu, lv = (np.asarray(a, dtype=np.float64) for a in latent)
    mu, lv = np.atleast_2d(mu), np.atleast_2d(lv)
    return float(kernels.gaussian_kl_rows(np.ascontiguousarray(mu), np.ascontiguousarray(lv)).mean())


def label_entropy(labels, n_classes: int) -> float:
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=n_classes)
    freq = counts[counts > 0] / counts.sum()
    return float(-(freq * np.log(freq)).sum())


def mi_lower_bound_labels(probs, labels, label_marginal=None) -> float:
    """Label entropy minus the classifier's mean cross-entropy (nats).

    ``label_marginal`` defaults to the empirical label frequencies.
    """
    probs = probs.data if isinstance(probs, Tensor) else np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    k = probs.shape[1]
    if label_marginal is None:
        h_y = label_entropy(labels, k)
    else:
        m = np.asarray(label_marginal, dtype=np.float64)
        m = m[m > 0]
        h_y = float(-(m * np.log(m)).sum())
    cross_entropy = float(kernels.nll_rows(np.ascontiguousarray(probs), labels).mean())
    return h_y - cross_entropy


# ---------------------------------------------------------------------------
# composed objectives


def _forward(params: ModelParams, batch, rng: RngStream | None, noise):
    lat_s = encode(params, batch.x_s)
    lat_t = encode(params, batch.x_t)
    if noise is None:
        eps_s = rng.normal(lat_s.shape)
        eps_t = rng.normal(lat_t.shape)
    else:
        eps_s, eps_t = noise
    z_s = reparameterize(lat_s, eps=eps_s)
    z_t = reparameterize(lat_t, eps=eps_t)
    return lat_s, lat_t, z_s, z_t


def total_objective(params: ModelParams, batch, config, rng: RngStream | None = None, *,
                    lambda_d: float | None = None, noise=None, reverse_gradient: bool = True):
    """Weighted sum of all five terms plus diagnostics.

    The discriminator sees the latents through a unit gradient-reversal node
    and its loss is weighted by ``lambda_d`` in the total, so the
    discriminator descends ``lambda_d * l_adv`` while the encoder ascends it.
    ``lambda_d`` overrides ``config.lambda_d`` (used by the warm-up schedule).
    ``noise`` is an optional ``(eps_source, eps_target)`` pair that replaces
    the draws from ``rng``. ``reverse_gradient=False`` removes the reversal
    node, which leaves every forward value unchanged and makes the backward
    pass the plain gradient of ``total`` (what a finite-difference check sees).
    """
    lam_d = config.lambda_d if lambda_d is None else lambda_d
    lat_s, lat_t, z_s, z_t = _forward(params, batch, rng, noise)
    p_s = classify(params, z_s)
    p_t = classify(params, z_t)

    l_cls = classification_loss(p_s, batch.y_s)
    rev = reverse_gradient
    l_adv = adversarial_loss(discriminate(params, z_s, 1.0, rev), discriminate(params, z_t, 1.0, rev))
    l_ce = conditional_entropy(p_t)
    kl_s = kl_to_standard_normal(lat_s)
    kl_t = kl_to_standard_normal(lat_t)

    total = ad.add(l_cls, ad.scale(l_adv, lam_d))
    total = ad.add(total, ad.scale(l_ce, config.lambda_ce))
    total = ad.add(total, ad.scale(kl_s, config.lambda_s))
    total = ad.add(total, ad.scale(kl_t, config.lambda_t))

    breakdown = LossBreakdown(
        l_cls=l_cls.item(),
        l_adv=l_adv.item(),
        l_ce=l_ce.item(),
        kl_s=kl_s.item(),
        kl_t=kl_t.item(),
        total=total.item(),
        i_u_s=kl_s.item(),
        i_u_t=kl_t.item(),
        i_l_s=mi_lower_bound_labels(p_s.data, batch.y_s),
    )
    return total, breakdown


# Reference compositions for the ablation ladder. Each builds only the terms
# its method uses, in the same order as ``total_objective``.


def source_only_objective(params, batch, rng=None, *, noise=None) -> Tensor:
    _, _, z_s, _ = _forward(params, batch, rng, noise)
    return classification_loss(classify(params, z_s), batch.y_s)


def dann_objective(params, batch, lambda_d, rng=None, *, noise=None) -> Tensor:
    _, _, z_s, z_t = _forward(params, batch, rng, noise)
    l_cls = classification_loss(classify(params, z_s), batch.y_s)
    l_adv = adversarial_loss(discriminate(params, z_s, 1.0), discriminate(params, z_t, 1.0))
    return ad.add(l_cls, ad.scale(l_adv, lambda_d))


def dann_ce_objective(params, batch, lambda_d, lambda_ce, rng=None, *, noise=None) -> Tensor:
    _, _, z_s, z_t = _forward(params, batch, rng, noise)
    p_s, p_t = classify(params, z_s), classify(params, z_t)
    l_cls = classification_loss(p_s, batch.y_s)
    l_adv = adversarial_loss(discriminate(params, z_s, 1.0), discriminate(params, z_t, 1.0))
    l_ce = conditional_entropy(p_t)
    return ad.add(ad.add(l_cls, ad.scale(l_adv, lambda_d)), ad.scale(l_ce, lambda_ce))


def vib_only_objective(params, batch, lambda_s, lambda_t, rng=None, *, noise=None) -> Tensor:
    lat_s, lat_t, z_s, _ = _forward(params, batch, rng, noise)
    l_cls = classification_loss(classify(params, z_s), batch.y_s)
    total = ad.add(l_cls, ad.scale(kl_to_standard_normal(lat_s), lambda_s))
    return ad.add(total, ad.scale(kl_to_standard_normal(lat_t), lambda_t))
