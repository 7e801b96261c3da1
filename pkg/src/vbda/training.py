"""Optimization loop: Adam, the lambda_d warm-up, evaluation and metric records."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from ._kernels import kernels
from .autodiff import Graph, RngStream, Tensor
from .data import Dataset, DomainPair, batch_iterator
from .errors import ContractError, TrainingDiverged
from .models import Architecture, ModelParams, classify, encode, init_params, reparameterize
from .objectives import mi_lower_bound_labels, mi_upper_bound, total_objective

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lambda_d: float = 0.3
    lambda_ce: float = 0.1
    lambda_s: float = 0.1
    lambda_t: float = 0.01
    steps: int = 2000
    batch_source: int = 64
    batch_target: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup: float = 0.2
    eval_every: int = 100
    eval_size: int = 0
    seed: int = 0
    d_z: int = 16
    enc_hidden: tuple[int, ...] = (64, 64)
    cls_hidden: tuple[int, ...] = (64,)
    disc_hidden: tuple[int, ...] = (64,)
    activation: str = "tanh"
    sample_eval: bool = False
    record_wallclock: bool = False

    def validate(self) -> None:
        for name in ("lambda_d", "lambda_ce", "lambda_s", "lambda_t"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be non-negative")
        if self.steps < 0:
            raise ContractError("steps must be non-negative")
        if self.batch_source < 1 or self.batch_target < 1:
            raise ContractError("batch sizes must be positive")
        if self.lr <= 0:
            raise ContractError("lr must be positive")
        if not 0.0 <= self.warmup <= 1.0:
            raise ContractError("warmup fraction must lie in [0, 1]")
        if self.eval_every < 1:
            raise ContractError("eval_every must be positive")
        if self.activation not in ("tanh", "relu"):
            raise ContractError(f"unknown activation {self.activation!r}")

    def architecture(self, d_x: int, n_classes: int) -> Architecture:
        return Architecture(d_x=d_x, n_classes=n_classes, d_z=self.d_z, enc_hidden=self.enc_hidden,
                            cls_hidden=self.cls_hidden, disc_hidden=self.disc_hidden,
                            activation=self.activation)


@dataclass
class MetricsRecord:
    step: int
    l_cls: float
    l_adv: float
    l_ce: float
    kl_s: float
    kl_t: float
    total: float
    i_u_s: float
    i_u_t: float
    i_l_s: float
    i_l_t_oracle: float
    src_acc: float
    tgt_acc: float
    ms: float
    lambda_d: float

    def as_dict(self) -> dict:
        return asdict(self)


CSV_COLUMNS = tuple(f.name for f in fields(MetricsRecord) if f.name != "lambda_d")


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params, grads, state: AdamState, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """One bias-corrected Adam update, in place. ``None`` grads count as zero."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ContractError("params, grads and optimizer state differ in length")
    state.t += 1
    for p, g, m, v in zip(params, grads, state.m, state.v):
        data = p.data if isinstance(p, Tensor) else p
        if g is None:
            g = np.zeros_like(data)
        if not (data.shape == g.shape == m.shape == v.shape):
            raise ContractError(f"shape mismatch in adam_step: {data.shape} vs {g.shape}/{m.shape}")
        kernels.adam_update(data, g, m, v, lr, beta1, beta2, eps, state.t)


def lambda_d_at(step: int, config: TrainConfig) -> float:
    """Linear ramp from 0 over the first ``warmup`` fraction of steps, then flat."""
    boundary = config.warmup * config.steps
    if boundary <= 0:
        return config.lambda_d
    return config.lambda_d * min(1.0, step / boundary)


# ---------------------------------------------------------------------------
# evaluation


def _predict(params: ModelParams, x: np.ndarray, rng: RngStream | None, use_posterior_mean: bool):
    with Graph():
        latent = encode(params, x)
        z = latent.mu if use_posterior_mean else reparameterize(latent, rng)
        probs = classify(params, z)
    return latent, probs.data


def evaluate(params: ModelParams, dataset: Dataset, rng: RngStream | None = None,
             use_posterior_mean: bool = True) -> float:
    """Fraction of examples whose argmax prediction equals the label."""
    _, probs = _predict(params, dataset.x, rng, use_posterior_mean)
    return float(np.mean(probs.argmax(axis=1) == dataset.y))


def _subset(ds: Dataset, size: int) -> Dataset:
    if size <= 0 or size >= len(ds):
        return ds
    return Dataset(ds.x[:size], ds.y[:size], ds.n_classes)


def _diagnostics(params, pair: DomainPair, rng: RngStream, config: TrainConfig) -> dict:
    source = _subset(pair.source, config.eval_size)
    target = _subset(pair.target_eval(), config.eval_size)
    out = {}
    for tag, ds in (("s", source), ("t", target)):
        with Graph():
            latent = encode(params, ds.x)
            z = reparameterize(latent, rng)
            sampled = classify(params, z).data
            mean_probs = classify(params, latent.mu).data if not config.sample_eval else sampled
        out[f"i_u_{tag}"] = mi_upper_bound(latent)
        out[f"i_l_{tag}"] = mi_lower_bound_labels(sampled, ds.y)
        out[f"acc_{tag}"] = float(np.mean(mean_probs.argmax(axis=1) == ds.y))
    return out


# ---------------------------------------------------------------------------
# loop


def train(config: TrainConfig, data: DomainPair, params: ModelParams | None = None):
    """Run ``config.steps`` updates; returns ``(params, records)``.

    Records are taken before updates 0, eval_every, 2*eval_every, ... and
    once more after the last update. Loss fields come from the minibatch of
    that step; MI and accuracy fields from the (optionally capped) datasets.
    """
    config.validate()
    root = RngStream(config.seed)
    if params is None:
        params = init_params(config.architecture(data.d_x, data.n_classes), root.spawn("init"))
    if config.steps == 0:
        return params, []

    plist = params.parameters()
    state = AdamState.zeros_like(plist)
    batches = batch_iterator(data, config.batch_source, config.batch_target, root.spawn("batches"))
    noise_rng = root.spawn("noise")
    eval_rng = root.spawn("eval")
    start = time.perf_counter()
    records: list[MetricsRecord] = []

    def record(step, breakdown, lam_d):
        diag = _diagnostics(params, data, eval_rng, config)
        rec = MetricsRecord(
            step=step, l_cls=breakdown.l_cls, l_adv=breakdown.l_adv, l_ce=breakdown.l_ce,
            kl_s=breakdown.kl_s, kl_t=breakdown.kl_t, total=breakdown.total,
            i_u_s=diag["i_u_s"], i_u_t=diag["i_u_t"], i_l_s=diag["i_l_s"],
            i_l_t_oracle=diag["i_l_t"], src_acc=diag["acc_s"], tgt_acc=diag["acc_t"],
            ms=(time.perf_counter() - start) * 1e3, lambda_d=lam_d,
        )
        records.append(rec)
        log.debug("step %d: %s", step, rec)

    for step in range(config.steps + 1):
        lam_d = lambda_d_at(step, config)
        batch = next(batches)
        with Graph():
            total, breakdown = total_objective(params, batch, config, noise_rng, lambda_d=lam_d)
            if not breakdown.is_finite():
                raise TrainingDiverged(step, breakdown)
            if step == config.steps or step % config.eval_every == 0:
                record(step, breakdown, lam_d)
            if step == config.steps:
                break
            params.zero_grad()
            ad.backward(total)
        adam_step(plist, [p.grad for p in plist], state, config.lr, config.beta1, config.beta2, config.eps)
    return params, records
