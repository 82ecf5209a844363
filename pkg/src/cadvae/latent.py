"""Four-way latent layout, Gaussian posteriors and code manipulation.

A latent code is split into ``X`` (task-irrelevant), ``Y`` (target),
``S`` (sensitive) and ``R`` (shared between target and sensitive). All
partitions here are batched: each component is a ``[B, d_c]`` tensor.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, RangeError, UsageError

COMPONENTS = ("X", "Y", "S", "R")
LOG_VAR_MIN, LOG_VAR_MAX = -10.0, 10.0


@dataclass(frozen=True)
class LatentLayout:
    d_x: int = 416
    d_y: int = 32
    d_s: int = 32
    d_r: int = 32

    def __post_init__(self):
        for name in ("d_x", "d_y", "d_s", "d_r"):
            if int(getattr(self, name)) < 1:
                raise DimensionError(f"{name} must be >= 1, got {getattr(self, name)}")

    @property
    def total(self) -> int:
        return self.d_x + self.d_y + self.d_s + self.d_r

    @property
    def sizes(self):
        return [self.d_x, self.d_y, self.d_s, self.d_r]

    def dim(self, component: str) -> int:
        return dict(zip(COMPONENTS, self.sizes))[component]


@dataclass(frozen=True)
class LatentPartition:
    zX: Tensor
    zY: Tensor
    zS: Tensor
    zR: Tensor

    def get(self, component: str) -> Tensor:
        return getattr(self, "z" + component)

    def parts(self):
        return [self.zX, self.zY, self.zS, self.zR]

    @property
    def batch_size(self) -> int:
        return self.zX.shape[0]

    def layout(self) -> LatentLayout:
        return LatentLayout(*(p.shape[-1] for p in self.parts()))

    def joined(self) -> Tensor:
        return ad.concat(self.parts(), axis=1)

    def detached(self) -> "LatentPartition":
        return LatentPartition(*(ad.stop_gradient(p) for p in self.parts()))

    @classmethod
    def from_tensor(cls, z: Tensor, layout: LatentLayout) -> "LatentPartition":
        if z.ndim != 2 or z.shape[1] != layout.total:
            raise DimensionError(f"latent of shape {z.shape} does not match layout total {layout.total}")
        return cls(*ad.split(z, layout.sizes, axis=1))

    @classmethod
    def from_arrays(cls, zX, zY, zS, zR) -> "LatentPartition":
        return cls(*(Tensor(np.atleast_2d(np.asarray(v, dtype=float))) for v in (zX, zY, zS, zR)))


class GaussianPosterior:
    """Diagonal Gaussian q(z|x) for a batch; ``log_var`` is clamped on construction."""

    def __init__(self, mu: Tensor, log_var: Tensor):
        if mu.shape != log_var.shape:
            raise DimensionError(f"mu {mu.shape} and log_var {log_var.shape} differ")
        if mu.ndim != 2:
            raise DimensionError(f"posterior parameters must be [B, total], got {mu.shape}")
        self.mu = mu
        self.log_var = ad.clamp(log_var, LOG_VAR_MIN, LOG_VAR_MAX)

    @property
    def total(self):
        return self.mu.shape[1]

    def mean_partition(self, layout: LatentLayout) -> LatentPartition:
        return LatentPartition.from_tensor(self.mu, layout)


def reparameterize(post: GaussianPosterior, noise, layout: LatentLayout) -> LatentPartition:
    noise = np.asarray(noise, dtype=float)
    if noise.shape != post.mu.shape or post.total != layout.total:
        raise DimensionError(
            f"noise {noise.shape} / posterior {post.mu.shape} do not match layout total {layout.total}"
        )
    std = ad.exp(ad.mul_scalar(post.log_var, 0.5))
    z = ad.add(post.mu, ad.mul(std, Tensor(noise)))
    return LatentPartition.from_tensor(z, layout)


def kl_standard_normal(post: GaussianPosterior) -> Tensor:
    """Per-sample KL(q || N(0, I)), shape ``[B]``."""
    mu, lv = post.mu, post.log_var
    terms = ad.mul(mu, mu) + ad.exp(lv) - lv
    return ad.mul_scalar(ad.add_scalar(ad.sum(terms, axis=1), -float(post.total)), 0.5)


def _check_same_layout(a: LatentPartition, b: LatentPartition):
    if a.layout() != b.layout() or a.batch_size != b.batch_size:
        raise DimensionError(f"partitions differ: {a.layout()} x{a.batch_size} vs {b.layout()} x{b.batch_size}")


def _components(mask: Iterable[str]):
    mask = set(mask)
    unknown = mask - set(COMPONENTS)
    if unknown:
        raise ValueError(f"unknown latent components {sorted(unknown)}")
    return mask


def swap_codes(source: LatentPartition, reference: LatentPartition, mask) -> LatentPartition:
    _check_same_layout(source, reference)
    mask = _components(mask)
    return LatentPartition(*(
        (reference if c in mask else source).get(c) for c in COMPONENTS
    ))


def interpolate_codes(z1: LatentPartition, z2: LatentPartition, lambdas: Mapping[str, float]) -> LatentPartition:
    """Per-component ``(1 - lam) * z1 + lam * z2``; missing components keep z1."""
    _check_same_layout(z1, z2)
    _components(lambdas)
    parts = []
    for c in COMPONENTS:
        lam = float(lambdas.get(c, 0.0))
        if not 0.0 <= lam <= 1.0:
            raise RangeError(f"lambda for {c} must lie in [0, 1], got {lam}")
        a, b = z1.get(c), z2.get(c)
        if lam == 0.0:
            parts.append(a)
        elif lam == 1.0:
            parts.append(b)
        else:
            parts.append(ad.add(ad.mul_scalar(a, 1.0 - lam), ad.mul_scalar(b, lam)))
    return LatentPartition(*parts)


def permute_codes_across_batch(batch: LatentPartition, components, rng_seed, per_dimension=False) -> LatentPartition:
    """Shuffle the batch order of each selected component independently.

    Each component is permuted as one block by default; ``per_dimension``
    draws a separate permutation for every latent dimension instead.
    ``rng_seed`` may be an int or a ``numpy.random.Generator``.
    """
    if isinstance(batch, (list, tuple)):
        if not batch:
            raise UsageError("cannot permute an empty batch")
        batch = LatentPartition(*(
            ad.concat([p.get(c) for p in batch], axis=0) for c in COMPONENTS
        ))
    n = batch.batch_size
    if n == 0:
        raise UsageError("cannot permute an empty batch")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    selected = _components(components)
    parts = []
    for c in COMPONENTS:
        t = batch.get(c)
        if c not in selected:
            parts.append(t)
        elif per_dimension:
            cols = []
            for j in range(t.shape[1]):
                col = ad.slice_axis(t, j, j + 1, axis=1)
                cols.append(ad.take_rows(col, rng.permutation(n)))
            parts.append(ad.concat(cols, axis=1))
        else:
            parts.append(ad.take_rows(t, rng.permutation(n)))
    return LatentPartition(*parts)
