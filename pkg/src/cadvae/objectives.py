"""Loss terms of the CAD-VAE objective.

Conventions: classifier arguments are :class:`~cadvae.networks.Head`
objects; latents are ``[B, d]`` tensors; labels are integer arrays.
Entropies are in nats and estimated on the mini-batch.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError, LabelError, UndefinedGroupError, UsageError
from .latent import GaussianPosterior, LatentPartition, kl_standard_normal, permute_codes_across_batch

ENTROPY_EPS = 1e-12
RECON_EPS = 1e-7


class GroupSkip(UndefinedGroupError):
    """Raised for a label value with no members in the batch; callers drop the term."""


@dataclass
class LossReport:
    recon: float
    kl: float
    l_y: float
    l_s: float
    l_cmi: float
    l_lri: float
    l_tc: float
    l_y_op: float
    l_s_op: float
    l_disc: float
    total_main: float

    def as_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# helpers


def _labels(labels, n_classes, n_rows, what):
    labels = np.asarray(labels)
    if labels.shape != (n_rows,):
        raise DimensionError(f"{what}: expected {n_rows} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes or not np.issubdtype(labels.dtype, np.integer)):
        raise LabelError(f"{what}: labels must be integers in [0, {n_classes})")
    return labels.astype(np.intp)


def _require_frozen(head, what):
    if not head.frozen:
        raise ContractError(f"{what} must be evaluated with frozen parameters")


def _require_detached(t: Tensor, what):
    if t.requires_grad:
        raise ContractError(f"{what} must be detached from the encoder (use stop_gradient)")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-probability of ``labels`` under softmax(logits)."""
    labels = _labels(labels, logits.shape[1], logits.shape[0], "cross_entropy")
    return ad.negate(ad.mean(ad.pick(ad.log_softmax(logits), labels)))


# ---------------------------------------------------------------------------
# ELBO


def elbo_loss(x, recon_mean: Tensor, post: GaussianPosterior):
    """Return ``(recon, kl)``: batch means of summed pixel BCE and of KL to N(0, I)."""
    x = ad.as_tensor(x)
    if x.shape != recon_mean.shape:
        raise DimensionError(f"elbo_loss: input {x.shape} vs reconstruction {recon_mean.shape}")
    n = x.shape[0]
    m = ad.clamp(recon_mean, RECON_EPS, 1.0 - RECON_EPS)
    xd = x.data
    ll = ad.mul(ad.log(m), Tensor(xd)) + ad.mul(ad.log(1.0 - m), Tensor(1.0 - xd))
    per_sample = ad.sum(ad.reshape(ll, (n, -1)), axis=1)
    recon = ad.negate(ad.mean(per_sample))
    kl = ad.mean(kl_standard_normal(post))
    return recon, kl


# ---------------------------------------------------------------------------
# classification terms


def joint_classification_losses(f_y, f_s, zY, zS, zR, y, s):
    """Cross-entropies of f_y(zY, zR) on y and f_s(zS, zR) on s.

    Gradients reach both the heads and (through the latents) the encoder.
    """
    l_y = cross_entropy(f_y.logits(ad.concat([zY, zR], axis=1)), y)
    l_s = cross_entropy(f_s.logits(ad.concat([zS, zR], axis=1)), s)
    return l_y, l_s


def _opponent_input(head, z, zR):
    if head.in_dim == z.shape[1]:
        return z
    if zR is not None and head.in_dim == z.shape[1] + zR.shape[1]:
        return ad.concat([z, zR], axis=1)
    raise DimensionError(f"opponent expects width {head.in_dim}, got {z.shape[1]}")


def opponent_losses(f_y_op, f_s_op, zY_detached, zS_detached, y, s, zR_detached=None):
    _require_detached(zY_detached, "zY")
    _require_detached(zS_detached, "zS")
    if zR_detached is not None:
        _require_detached(zR_detached, "zR")
    l_y_op = cross_entropy(f_y_op.logits(_opponent_input(f_y_op, zS_detached, zR_detached)), y)
    l_s_op = cross_entropy(f_s_op.logits(_opponent_input(f_s_op, zY_detached, zR_detached)), s)
    return l_y_op, l_s_op


# ---------------------------------------------------------------------------
# entropy estimators


def prediction_entropy(probs: Tensor) -> Tensor:
    """Batch mean of the Shannon entropy of each probability row."""
    if probs.ndim != 2:
        raise DimensionError(f"prediction_entropy expects [B, c], got {probs.shape}")
    rows = probs.data.sum(axis=1)
    if np.any(np.abs(rows - 1.0) > 1e-6) or np.any(probs.data < 0):
        raise ContractError("prediction_entropy: rows are not probability vectors")
    plogp = ad.mul(probs, ad.log(ad.add_scalar(probs, ENTROPY_EPS)))
    return ad.negate(ad.mul_scalar(ad.sum(plogp), 1.0 / probs.shape[0]))


def cmi_loss(f_y_op, f_s_op, zY, zS, zR=None) -> Tensor:
    """``-(H(Y_hat | zS) + H(S_hat | zY))`` under frozen opponents.

    Passing ``zR`` is only needed for opponents that were built to read it
    (the conditional variant).
    """
    _require_frozen(f_y_op, "f_y_op")
    _require_frozen(f_s_op, "f_s_op")
    h_y = prediction_entropy(f_y_op.probs(_opponent_input(f_y_op, zS, zR)))
    h_s = prediction_entropy(f_s_op.probs(_opponent_input(f_s_op, zY, zR)))
    return ad.negate(ad.add(h_y, h_s))


def pairwise_probs(head, z_own: Tensor, zR: Tensor) -> Tensor:
    """Head outputs for every (k, i) pair: row ``k * B + i`` is f(z_own[i], zR[k])."""
    b = z_own.shape[0]
    if zR.shape[0] != b:
        raise DimensionError(f"batch sizes differ: {b} vs {zR.shape[0]}")
    own_idx = np.tile(np.arange(b), b)
    r_idx = np.repeat(np.arange(b), b)
    pairs = ad.concat([ad.take_rows(z_own, own_idx), ad.take_rows(zR, r_idx)], axis=1)
    return head.probs(pairs)


def _mixing_matrix(weights: np.ndarray) -> Tensor:
    """Lift a ``[B, B]`` weight table to a ``[B, B*B]`` matrix acting on pair rows."""
    b = weights.shape[0]
    m = np.zeros((b, b * b))
    for k in range(b):
        m[k, k * b:(k + 1) * b] = weights[k]
    return Tensor(m)


def marginal_weights(b):
    return np.full((b, b), 1.0 / b)


def group_weights(labels):
    labels = np.asarray(labels)
    same = (labels[:, None] == labels[None, :]).astype(float)
    return same / same.sum(axis=1, keepdims=True)


def marginal_conditional_probs(head, z_own: Tensor, zR: Tensor, pair_probs=None) -> Tensor:
    """Row k approximates p(y_hat | zR[k]) by averaging over every z_own[i]."""
    p = pairwise_probs(head, z_own, zR) if pair_probs is None else pair_probs
    return ad.matmul(_mixing_matrix(marginal_weights(z_own.shape[0])), p)


def group_conditional_probs(head, z_own: Tensor, zR: Tensor, labels, pair_probs=None) -> Tensor:
    """Row k averages only over samples sharing sample k's label."""
    labels = np.asarray(labels)
    if labels.shape != (z_own.shape[0],):
        raise DimensionError("group_conditional_probs: one label per sample required")
    p = pairwise_probs(head, z_own, zR) if pair_probs is None else pair_probs
    return ad.matmul(_mixing_matrix(group_weights(labels)), p)


def marginal_conditional_prob(head, z_own_batch: Tensor, zR_k: Tensor) -> Tensor:
    """Single-k form: ``(1/|B|) sum_i f(z_own[i], zR_k)`` as a length-c vector."""
    b = z_own_batch.shape[0]
    if b == 0:
        raise UsageError("marginalization over an empty batch")
    zR_k = ad.reshape(zR_k, (1, zR_k.shape[-1]))
    rows = ad.take_rows(zR_k, np.zeros(b, dtype=np.intp))
    probs = head.probs(ad.concat([z_own_batch, rows], axis=1))
    return ad.mean(probs, axis=0)


def group_conditional_prob(head, z_own_group: Tensor, zR_k: Tensor) -> Tensor:
    """Average over one label group; an empty group raises :class:`GroupSkip`."""
    if z_own_group.shape[0] == 0:
        raise GroupSkip("label group is empty in this batch")
    return marginal_conditional_prob(head, z_own_group, zR_k)


def relevance_terms(head, z_own: Tensor, zR: Tensor, labels):
    """``(H(pred | zR), H(pred | label, zR))`` for one head, estimated on the batch."""
    p = pairwise_probs(head, z_own, zR)
    h_marg = prediction_entropy(marginal_conditional_probs(head, z_own, zR, pair_probs=p))
    h_group = prediction_entropy(group_conditional_probs(head, z_own, zR, labels, pair_probs=p))
    return h_marg, h_group


def lri_loss(f_y, f_s, zY, zS, zR, y, s) -> Tensor:
    """``-[I(Y_hat; Y | zR) + I(S_hat; S | zR)]`` with frozen f_y, f_s.

    Every sample belongs to its own label group, so the grouped average
    always covers the whole batch; label values absent from the batch
    contribute no term.
    """
    _require_frozen(f_y, "f_y")
    _require_frozen(f_s, "f_s")
    y = _labels(y, f_y.spec.n_classes, zY.shape[0], "lri_loss y")
    s = _labels(s, f_s.spec.n_classes, zS.shape[0], "lri_loss s")
    hy_m, hy_g = relevance_terms(f_y, zY, zR, y)
    hs_m, hs_g = relevance_terms(f_s, zS, zR, s)
    info = ad.add(ad.sub(hy_m, hy_g), ad.sub(hs_m, hs_g))
    return ad.negate(info)


# ---------------------------------------------------------------------------
# total correlation


def tc_losses(disc, zY, zS, zR, rng_seed, per_dimension=False):
    """Return ``(l_tc, l_disc)``.

    ``l_tc`` is the batch mean of log(D / (1 - D)) on joint samples, which
    equals the mean logit; D is frozen so only the latents get gradients.
    ``l_disc`` is the discriminator's binary cross-entropy (joint = 1,
    block-permuted = 0) on detached latents.
    """
    b = zY.shape[0]
    if b < 2:
        raise UsageError("tc_losses needs a batch of at least 2")
    frozen = disc.freeze()
    l_tc = ad.mean(frozen.logits(ad.concat([zY, zS, zR], axis=1)))

    joint = LatentPartition(zY, zY, zS, zR).detached()  # X slot unused
    perm = permute_codes_across_batch(joint, ("Y", "S", "R"), rng_seed, per_dimension=per_dimension)
    joint_logits = disc.logits(ad.concat([joint.zY, joint.zS, joint.zR], axis=1))
    perm_logits = disc.logits(ad.concat([perm.zY, perm.zS, perm.zR], axis=1))
    l_disc = ad.mul_scalar(
        ad.add(ad.mean(ad.softplus(ad.negate(joint_logits))), ad.mean(ad.softplus(perm_logits))),
        0.5,
    )
    return l_tc, l_disc
