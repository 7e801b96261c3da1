"""Stochastic encoder, classifier and domain discriminator as small MLPs."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import RngStream, Tensor
from .errors import DimensionError, FormatError

LOG_VAR_MIN, LOG_VAR_MAX = -10.0, 10.0
PROB_FLOOR = 1e-12

_ACTIVATIONS = {"tanh": ad.tanh, "relu": ad.relu}


@dataclass(frozen=True)
class Architecture:
    d_x: int
    n_classes: int
    d_z: int = 16
    enc_hidden: tuple[int, ...] = (64, 64)
    cls_hidden: tuple[int, ...] = (64,)
    disc_hidden: tuple[int, ...] = (64,)
    activation: str = "tanh"


@dataclass
class GaussianLatent:
    """Diagonal Gaussian posterior over the latent code, one row per example."""

    mu: Tensor
    log_var: Tensor

    def __post_init__(self):
        if self.mu.shape != self.log_var.shape:
            raise DimensionError(f"mu {self.mu.shape} and log_var {self.log_var.shape} differ")

    @property
    def shape(self):
        return self.mu.shape


@dataclass
class ModelParams:
    arch: Architecture
    encoder: list[tuple[Tensor, Tensor]]
    mu_head: tuple[Tensor, Tensor]
    log_var_head: tuple[Tensor, Tensor]
    classifier: list[tuple[Tensor, Tensor]]
    discriminator: list[tuple[Tensor, Tensor]]
    _named: list[tuple[str, Tensor]] = field(default=None, init=False, repr=False)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        if self._named is None:
            named = []
            for i, (w, b) in enumerate(self.encoder):
                named += [(f"encoder.{i}.weight", w), (f"encoder.{i}.bias", b)]
            named += [("encoder.mu.weight", self.mu_head[0]), ("encoder.mu.bias", self.mu_head[1])]
            named += [("encoder.log_var.weight", self.log_var_head[0]),
                      ("encoder.log_var.bias", self.log_var_head[1])]
            for i, (w, b) in enumerate(self.classifier):
                named += [(f"classifier.{i}.weight", w), (f"classifier.{i}.bias", b)]
            for i, (w, b) in enumerate(self.discriminator):
                named += [(f"discriminator.{i}.weight", w), (f"discriminator.{i}.bias", b)]
            self._named = named
        return self._named

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def encoder_parameters(self) -> list[Tensor]:
        return [t for name, t in self.named_parameters() if name.startswith("encoder.")]

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def copy(self) -> "ModelParams":
        clone = init_params(self.arch, RngStream(0))
        for (_, dst), (_, src) in zip(clone.named_parameters(), self.named_parameters()):
            dst.data[...] = src.data
        return clone


def _glorot(rng: RngStream, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, (fan_in, fan_out))


def _mlp(rng, widths, zero=False):
    layers = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        w = np.zeros((fan_in, fan_out)) if zero else _glorot(rng, fan_in, fan_out)
        layers.append((Tensor(w, requires_grad=True), Tensor(np.zeros(fan_out), requires_grad=True)))
    return layers


def init_params(arch: Architecture, rng: RngStream) -> ModelParams:
    """Glorot-uniform weights, zero biases; the log-variance head starts at zero
    so every posterior begins with unit variance."""
    enc_widths = (arch.d_x, *arch.enc_hidden)
    encoder = _mlp(rng, enc_widths)
    top = enc_widths[-1]
    (mu_head,) = _mlp(rng, (top, arch.d_z))
    (log_var_head,) = _mlp(rng, (top, arch.d_z), zero=True)
    classifier = _mlp(rng, (arch.d_z, *arch.cls_hidden, arch.n_classes))
    discriminator = _mlp(rng, (arch.d_z, *arch.disc_hidden, 1))
    return ModelParams(arch, encoder, mu_head, log_var_head, classifier, discriminator)


def _forward_mlp(layers, h, act):
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        h = ad.linear(h, w, b)
        if i < last:
            h = act(h)
    return h


def _check_width(x: Tensor, width: int, what: str):
    if x.data.ndim != 2 or x.shape[1] != width:
        raise DimensionError(f"{what} expects inputs of width {width}, got shape {x.shape}")


def encode(params: ModelParams, x) -> GaussianLatent:
    x = x if isinstance(x, Tensor) else Tensor(x)
    _check_width(x, params.arch.d_x, "encoder")
    act = _ACTIVATIONS[params.arch.activation]
    h = x
    for w, b in params.encoder:
        h = act(ad.linear(h, w, b))
    mu = ad.linear(h, *params.mu_head)
    log_var = ad.clamp(ad.linear(h, *params.log_var_head), LOG_VAR_MIN, LOG_VAR_MAX)
    return GaussianLatent(mu, log_var)


def reparameterize(latent: GaussianLatent, rng: RngStream | None = None, eps=None) -> Tensor:
    """z = mu + exp(log_var / 2) * eps with eps ~ N(0, I).

    Pass ``eps`` explicitly to freeze the noise (gradient checks, tests);
    otherwise it is drawn from ``rng``. No gradient flows into ``eps``.
    """
    if eps is None:
        if rng is None:
            raise ValueError("reparameterize needs either rng or eps")
        eps = rng.normal(latent.shape)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != latent.shape:
        raise DimensionError(f"noise shape {eps.shape} does not match latent {latent.shape}")
    std = ad.exp(ad.scale(latent.log_var, 0.5))
    return ad.add(latent.mu, ad.mul(std, Tensor._wrap(eps, False)))


def classifier_logits(params: ModelParams, z) -> Tensor:
    z = z if isinstance(z, Tensor) else Tensor(z)
    _check_width(z, params.arch.d_z, "classifier")
    return _forward_mlp(params.classifier, z, _ACTIVATIONS[params.arch.activation])


def classify(params: ModelParams, z) -> Tensor:
    """Class probabilities, one row per example."""
    return ad.softmax_rows(classifier_logits(params, z))


def discriminate(params: ModelParams, z, lambda_d: float, reverse: bool = True) -> Tensor:
    """Probability that each latent row came from the source domain.

    The latent passes through a gradient-reversal node first, so the encoder
    receives the discriminator's gradient negated and scaled by ``lambda_d``.
    ``reverse=False`` drops that node (plain gradients, used by gradient checks).
    """
    z = z if isinstance(z, Tensor) else Tensor(z)
    _check_width(z, params.arch.d_z, "discriminator")
    h = ad.gradient_reversal(z, lambda_d) if reverse else z
    logit = _forward_mlp(params.discriminator, h, _ACTIVATIONS[params.arch.activation])
    return ad.clamp(ad.sigmoid(logit), PROB_FLOOR, 1.0 - PROB_FLOOR)


# ---------------------------------------------------------------------------
# checkpoints: a text header, then one line per tensor
#   <name> <d0>x<d1>... <v0> <v1> ...      (row-major, repr() floats)

_CHECKPOINT_MAGIC = "vbda-checkpoint 1"


def _arch_line(arch: Architecture) -> str:
    hid = lambda t: ",".join(map(str, t))  # noqa: E731
    return (f"arch d_x={arch.d_x} n_classes={arch.n_classes} d_z={arch.d_z} "
            f"enc_hidden={hid(arch.enc_hidden)} cls_hidden={hid(arch.cls_hidden)} "
            f"disc_hidden={hid(arch.disc_hidden)} activation={arch.activation}")


def save_params(params: ModelParams, path) -> None:
    lines = [_CHECKPOINT_MAGIC, _arch_line(params.arch)]
    for name, t in params.named_parameters():
        dims = "x".join(map(str, t.shape))
        values = " ".join(repr(float(v)) for v in t.data.reshape(-1))
        lines.append(f"{name} {dims} {values}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_params(path) -> ModelParams:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != _CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file", offset=0)
    fields = dict(kv.split("=", 1) for kv in lines[1].split()[1:])
    tup = lambda s: tuple(int(v) for v in s.split(",") if v)  # noqa: E731
    arch = Architecture(
        d_x=int(fields["d_x"]), n_classes=int(fields["n_classes"]), d_z=int(fields["d_z"]),
        enc_hidden=tup(fields["enc_hidden"]), cls_hidden=tup(fields["cls_hidden"]),
        disc_hidden=tup(fields["disc_hidden"]), activation=fields["activation"],
    )
    params = init_params(arch, RngStream(0))
    named = dict(params.named_parameters())
    seen = set()
    for line in lines[2:]:
        name, dims, *values = line.split(" ")
        shape = tuple(int(d) for d in dims.split("x")) if dims else ()
        if name not in named or named[name].shape != shape:
            raise FormatError(f"{path}: unexpected tensor {name} with shape {shape}")
        named[name].data[...] = np.array([float(v) for v in values]).reshape(shape)
        seen.add(name)
    missing = set(named) - seen
    if missing:
        raise FormatError(f"{path}: missing tensors {sorted(missing)}")
    return params
