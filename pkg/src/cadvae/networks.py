"""Desk-scale encoder, decoder, classifiers and TC discriminator.

Parameters live in one :class:`~cadvae.autodiff.ParamSet` per network so the
trainer can route gradients group by group. Forward functions are plain
functions of ``(params, spec, inputs)``; :class:`CadVae` bundles everything.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import ParamSet, Tensor
from .errors import DimensionError
from .latent import GaussianPosterior, LatentLayout, LatentPartition

GROUPS = ("encoder", "decoder", "f_y", "f_s", "f_y_op", "f_s_op", "disc")


def glorot(rng, fan_in, fan_out, shape):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _act(kind, x):
    if kind == "relu":
        return ad.relu(x)
    if kind == "tanh":
        return ad.tanh(x)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# dense stacks


def init_mlp(params: ParamSet, rng, sizes, prefix=""):
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        params.add(f"{prefix}w{i}", glorot(rng, a, b, (a, b)))
        params.add(f"{prefix}b{i}", np.zeros(b))


def mlp_forward(params: ParamSet, x: Tensor, n_layers: int, activation="relu", prefix=""):
    h = x
    for i in range(n_layers):
        w = params[f"{prefix}w{i}"]
        if h.shape[1] != w.shape[0]:
            raise DimensionError(f"layer {prefix}w{i} expects width {w.shape[0]}, got {h.shape[1]}")
        h = ad.add_bias(ad.matmul(h, w), params[f"{prefix}b{i}"])
        if i < n_layers - 1:
            h = _act(activation, h)
    return h


# ---------------------------------------------------------------------------
# specs


@dataclass(frozen=True)
class EncoderSpec:
    image_shape: tuple = (3, 16, 16)
    channels: tuple = (16, 32)
    layout: LatentLayout = field(default_factory=LatentLayout)
    activation: str = "relu"

    def spatial(self):
        """Feature-map sizes after each stride-2 convolution."""
        _, h, w = self.image_shape
        sizes = [(h, w)]
        for _ in self.channels:
            h, w = kernels.out_size(h, 3, 2, 1), kernels.out_size(w, 3, 2, 1)
            sizes.append((h, w))
        return sizes

    @property
    def flat_dim(self):
        h, w = self.spatial()[-1]
        return self.channels[-1] * h * w

    @property
    def out_dim(self):
        return 2 * self.layout.total


@dataclass(frozen=True)
class DecoderSpec:
    image_shape: tuple = (3, 16, 16)
    channels: tuple = (32, 16)
    layout: LatentLayout = field(default_factory=LatentLayout)
    activation: str = "relu"

    def spatial(self):
        enc = EncoderSpec(self.image_shape, tuple(reversed(self.channels)), self.layout)
        return list(reversed(enc.spatial()))

    @property
    def in_dim(self):
        return self.layout.total


@dataclass(frozen=True)
class ClassifierSpec:
    in_dim: int
    n_classes: int
    hidden: tuple = (64, 64)
    activation: str = "relu"

    @property
    def sizes(self):
        return [self.in_dim, *self.hidden, self.n_classes]


@dataclass(frozen=True)
class DiscriminatorSpec:
    in_dim: int
    hidden: tuple = (128, 128, 128)
    activation: str = "relu"

    @property
    def sizes(self):
        return [self.in_dim, *self.hidden, 1]


# ---------------------------------------------------------------------------
# encoder / decoder


def init_encoder(spec: EncoderSpec, rng) -> ParamSet:
    p = ParamSet()
    c_in = spec.image_shape[0]
    for i, c_out in enumerate(spec.channels):
        p.add(f"conv{i}.w", glorot(rng, c_in * 9, c_out * 9, (c_out, c_in, 3, 3)))
        p.add(f"conv{i}.b", np.zeros(c_out))
        c_in = c_out
    p.add("fc.w", glorot(rng, spec.flat_dim, spec.out_dim, (spec.flat_dim, spec.out_dim)))
    p.add("fc.b", np.zeros(spec.out_dim))
    return p


def encode(params: ParamSet, x, spec: EncoderSpec) -> GaussianPosterior:
    x = ad.as_tensor(x)
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(spec.image_shape):
        raise DimensionError(f"encoder expects [B, {spec.image_shape}], got {x.shape}")
    h = x
    for i in range(len(spec.channels)):
        h = _act(spec.activation, ad.conv2d(h, params[f"conv{i}.w"], params[f"conv{i}.b"], stride=2, pad=1))
    h = ad.reshape(h, (x.shape[0], spec.flat_dim))
    out = ad.add_bias(ad.matmul(h, params["fc.w"]), params["fc.b"])
    total = spec.layout.total
    mu, log_var = ad.split(out, [total, total], axis=1)
    return GaussianPosterior(mu, log_var)


def init_decoder(spec: DecoderSpec, rng) -> ParamSet:
    p = ParamSet()
    sizes = spec.spatial()
    h0, w0 = sizes[0]
    flat = spec.channels[0] * h0 * w0
    p.add("fc.w", glorot(rng, spec.in_dim, flat, (spec.in_dim, flat)))
    p.add("fc.b", np.zeros(flat))
    outs = list(spec.channels[1:]) + [spec.image_shape[0]]
    c_in = spec.channels[0]
    for i, c_out in enumerate(outs):
        p.add(f"deconv{i}.w", glorot(rng, c_in * 16, c_out * 16, (c_in, c_out, 4, 4)))
        p.add(f"deconv{i}.b", np.zeros(c_out))
        c_in = c_out
    return p


def decode(params: ParamSet, z, spec: DecoderSpec) -> Tensor:
    """Bernoulli means in (0, 1) shaped like the decoder's images."""
    if isinstance(z, LatentPartition):
        if z.layout() != spec.layout:
            raise DimensionError(f"latent layout {z.layout()} does not match decoder {spec.layout}")
        z = z.joined()
    if z.ndim != 2 or z.shape[1] != spec.in_dim:
        raise DimensionError(f"decoder expects [B, {spec.in_dim}], got {z.shape}")
    sizes = spec.spatial()
    n = z.shape[0]
    h = ad.add_bias(ad.matmul(z, params["fc.w"]), params["fc.b"])
    h = _act(spec.activation, h)
    h = ad.reshape(h, (n, spec.channels[0], *sizes[0]))
    n_up = len(spec.channels)
    for i in range(n_up):
        h = ad.conv_transpose2d(h, params[f"deconv{i}.w"], params[f"deconv{i}.b"],
                                stride=2, pad=1, out_hw=sizes[i + 1])
        if i < n_up - 1:
            h = _act(spec.activation, h)
    return ad.sigmoid(h)


# ---------------------------------------------------------------------------
# classifiers and discriminator


def init_classifier(spec, rng) -> ParamSet:
    p = ParamSet()
    init_mlp(p, rng, spec.sizes)
    return p


def classifier_logits(params: ParamSet, x: Tensor, spec) -> Tensor:
    if x.ndim != 2 or x.shape[1] != spec.in_dim:
        raise DimensionError(f"classifier expects [B, {spec.in_dim}], got {x.shape}")
    return mlp_forward(params, x, len(spec.sizes) - 1, spec.activation)


def classify_target(omega_y, zY, zR, spec: ClassifierSpec) -> Tensor:
    return ad.softmax(classifier_logits(omega_y, ad.concat([zY, zR], axis=1), spec))


def classify_sensitive(omega_s, zS, zR, spec: ClassifierSpec) -> Tensor:
    return ad.softmax(classifier_logits(omega_s, ad.concat([zS, zR], axis=1), spec))


def opponent_target(omega_y_op, zS, spec: ClassifierSpec) -> Tensor:
    return ad.softmax(classifier_logits(omega_y_op, zS, spec))


def opponent_sensitive(omega_s_op, zY, spec: ClassifierSpec) -> Tensor:
    return ad.softmax(classifier_logits(omega_s_op, zY, spec))


def tc_discriminate(disc, zY, zS, zR, spec: DiscriminatorSpec) -> Tensor:
    """One unbounded logit per sample, shape ``[B]``."""
    logits = classifier_logits(disc, ad.concat([zY, zS, zR], axis=1), spec)
    return ad.reshape(logits, (logits.shape[0],))


class Head:
    """A classifier or discriminator: parameters bound to their spec."""

    def __init__(self, params: ParamSet, spec):
        self.params = params
        self.spec = spec

    @property
    def frozen(self):
        return self.params.frozen

    @property
    def in_dim(self):
        return self.spec.in_dim

    def freeze(self) -> "Head":
        return self if self.frozen else Head(self.params.frozen_view(), self.spec)

    def logits(self, x: Tensor) -> Tensor:
        return classifier_logits(self.params, x, self.spec)

    def probs(self, x: Tensor) -> Tensor:
        return ad.softmax(self.logits(x))


# ---------------------------------------------------------------------------
# bundled model


@dataclass(frozen=True)
class ModelSpec:
    image_shape: tuple = (3, 16, 16)
    layout: LatentLayout = field(default_factory=LatentLayout)
    n_y: int = 10
    n_s: int = 10
    enc_channels: tuple = (16, 32)
    cls_hidden: tuple = (64, 64)
    disc_hidden: tuple = (128, 128, 128)
    activation: str = "relu"
    # opponents additionally read z_R (conditional CMI ablation)
    opponents_see_r: bool = False

    @property
    def encoder(self):
        return EncoderSpec(tuple(self.image_shape), tuple(self.enc_channels), self.layout, self.activation)

    @property
    def decoder(self):
        return DecoderSpec(tuple(self.image_shape), tuple(reversed(self.enc_channels)), self.layout, self.activation)

    @property
    def f_y(self):
        return ClassifierSpec(self.layout.d_y + self.layout.d_r, self.n_y, tuple(self.cls_hidden), self.activation)

    @property
    def f_s(self):
        return ClassifierSpec(self.layout.d_s + self.layout.d_r, self.n_s, tuple(self.cls_hidden), self.activation)

    @property
    def f_y_op(self):
        extra = self.layout.d_r if self.opponents_see_r else 0
        return ClassifierSpec(self.layout.d_s + extra, self.n_y, tuple(self.cls_hidden), self.activation)

    @property
    def f_s_op(self):
        extra = self.layout.d_r if self.opponents_see_r else 0
        return ClassifierSpec(self.layout.d_y + extra, self.n_s, tuple(self.cls_hidden), self.activation)

    @property
    def disc(self):
        lay = self.layout
        return DiscriminatorSpec(lay.d_y + lay.d_s + lay.d_r, tuple(self.disc_hidden), self.activation)


class CadVae:
    """All seven parameter groups plus their specs."""

    def __init__(self, spec: ModelSpec, params: dict):
        self.spec = spec
        missing = set(GROUPS) - set(params)
        if missing:
            raise ValueError(f"missing parameter groups {sorted(missing)}")
        self.params = {g: params[g] for g in GROUPS}

    @classmethod
    def init(cls, spec: ModelSpec, seed=0) -> "CadVae":
        rng = np.random.default_rng(seed)
        params = {
            "encoder": init_encoder(spec.encoder, rng),
            "decoder": init_decoder(spec.decoder, rng),
            "f_y": init_classifier(spec.f_y, rng),
            "f_s": init_classifier(spec.f_s, rng),
            "f_y_op": init_classifier(spec.f_y_op, rng),
            "f_s_op": init_classifier(spec.f_s_op, rng),
            "disc": init_classifier(spec.disc, rng),
        }
        return cls(spec, params)

    @property
    def layout(self):
        return self.spec.layout

    def head(self, name, frozen=False) -> Head:
        h = Head(self.params[name], getattr(self.spec, name))
        return h.freeze() if frozen else h

    def encode(self, x, params=None) -> GaussianPosterior:
        return encode(self.params["encoder"] if params is None else params, x, self.spec.encoder)

    def decode(self, z, params=None) -> Tensor:
        return decode(self.params["decoder"] if params is None else params, z, self.spec.decoder)

    def posterior_means(self, images, batch_size=512) -> np.ndarray:
        """Posterior means for a stack of images, computed without a graph."""
        out = []
        frozen = self.params["encoder"].frozen_view()
        for lo in range(0, len(images), batch_size):
            post = self.encode(Tensor(images[lo:lo + batch_size]), frozen)
            out.append(post.mu.data)
        return np.concatenate(out, axis=0)

    def reconstruct_means(self, mu: np.ndarray, batch_size=512) -> np.ndarray:
        frozen = self.params["decoder"].frozen_view()
        out = [self.decode(Tensor(mu[lo:lo + batch_size]), frozen).data
               for lo in range(0, len(mu), batch_size)]
        return np.concatenate(out, axis=0)

    def num_params(self):
        return {g: self.params[g].num_params() for g in GROUPS}
