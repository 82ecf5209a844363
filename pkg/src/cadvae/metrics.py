"""Fairness, generation-quality and information metrics.

DP and EOD use the max-gap form for multi-class targets and groups: the
largest difference of a prediction rate between any two sensitive groups,
taken over predicted classes (and, for EOD, over true classes). On binary
tables this is exactly the usual two-group definition.

FID/IS here are computed over a small convolutional classifier trained on
unbiased colored digits, not over an Inception network, so values are only
comparable with each other.
"""
from __future__ import annotations

import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from itertools import combinations, product

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor
from .data import LabeledDataset, batch_iter
from .errors import (
    ContractError,
    DimensionError,
    DivergenceError,
    LabelError,
    NumericError,
    UndefinedGroupError,
)
from .latent import COMPONENTS, LatentLayout, LatentPartition, interpolate_codes
from .networks import glorot, init_mlp, mlp_forward
from .objectives import cross_entropy

SHRINKAGE = 1e-6
TRAVERSE_LAMBDAS = ((0.0, 0.33, 0.66, 1.0), (0.0, 0.33, 0.66, 1.0), (0.0, 0.5, 1.0))


# ---------------------------------------------------------------------------
# fairness


@dataclass
class PredictionTable:
    y_true: np.ndarray
    y_pred: np.ndarray
    s: np.ndarray
    n_classes: int = None  # classes to iterate for EOD; inferred from y_true if None
    n_groups: int = None  # declared groups; every one must be populated if given

    def __post_init__(self):
        self.y_true = np.asarray(self.y_true, dtype=np.int64)
        self.y_pred = np.asarray(self.y_pred, dtype=np.int64)
        self.s = np.asarray(self.s, dtype=np.int64)
        n = len(self.y_true)
        if self.y_true.ndim != 1 or self.y_pred.shape != (n,) or self.s.shape != (n,):
            raise DimensionError("y_true, y_pred and s must be equal-length vectors")
        for name, arr, bound in (("y_true", self.y_true, self.n_classes),
                                 ("y_pred", self.y_pred, self.n_classes),
                                 ("s", self.s, self.n_groups)):
            if n and arr.min() < 0:
                raise LabelError(f"{name} contains negative labels")
            if n and bound is not None and arr.max() >= bound:
                raise LabelError(f"{name} has labels >= {bound}")

    def __len__(self):
        return len(self.y_true)

    def groups(self):
        if self.n_groups is None:
            return np.unique(self.s)
        return np.arange(self.n_groups)

    def accuracy(self):
        return float(np.mean(self.y_true == self.y_pred)) if len(self) else float("nan")


def _rates(pred, n_pred):
    return np.bincount(pred, minlength=n_pred) / len(pred)


def _max_pair_gap(rate_rows):
    gap = 0.0
    for a, b in combinations(rate_rows, 2):
        gap = max(gap, float(np.max(np.abs(a - b))))
    return gap


def demographic_parity(t: PredictionTable) -> float:
    """Max over predicted classes and group pairs of |P(pred=c|s=a) - P(pred=c|s=b)|."""
    n_pred = int(t.y_pred.max()) + 1 if len(t) else 1
    rows = []
    for g in t.groups():
        mask = t.s == g
        if not mask.any():
            raise UndefinedGroupError(f"sensitive group {g} has no members")
        rows.append(_rates(t.y_pred[mask], n_pred))
    return _max_pair_gap(rows)


def equalized_odds(t: PredictionTable) -> float:
    """Max over true class y, predicted class c and group pairs of the rate gap
    ``|P(pred=c|Y=y,s=a) - P(pred=c|Y=y,s=b)|``. Empty (y, s) cells are skipped.
    """
    n_pred = int(t.y_pred.max()) + 1 if len(t) else 1
    classes = np.unique(t.y_true) if t.n_classes is None else np.arange(t.n_classes)
    gap = 0.0
    for y in classes:
        rows = []
        for g in t.groups():
            mask = (t.y_true == y) & (t.s == g)
            if mask.any():
                rows.append(_rates(t.y_pred[mask], n_pred))
        if not rows:
            raise UndefinedGroupError(f"true class {y} has no members in any group")
        gap = max(gap, _max_pair_gap(rows))
    return gap


# ---------------------------------------------------------------------------
# Frechet distance and entropy score


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        d = self.mean.shape[0]
        if d < 1 or self.mean.ndim != 1 or self.cov.shape != (d, d):
            raise DimensionError(f"mean {self.mean.shape} and cov {self.cov.shape} disagree")
        if np.max(np.abs(self.cov - self.cov.T)) > 1e-10:
            raise ContractError("covariance is not symmetric")

    @property
    def dim(self):
        return self.mean.shape[0]

    @classmethod
    def from_features(cls, feats, shrinkage=SHRINKAGE) -> "GaussianStats":
        feats = np.asarray(feats, dtype=np.float64)
        n, d = feats.shape
        mean = feats.mean(axis=0)
        centered = feats - mean
        cov = centered.T @ centered / max(n - 1, 1)
        cov = 0.5 * (cov + cov.T)
        if n < d:
            warnings.warn(f"{n} samples for {d} features: covariance is rank deficient, "
                          f"adding {shrinkage:g} * I", RuntimeWarning, stacklevel=2)
            cov = cov + shrinkage * np.eye(d)
        return cls(mean, cov)


def _psd_eigh(m, what):
    vals, vecs = np.linalg.eigh(0.5 * (m + m.T))
    if vals.min() < -1e-8:
        raise NumericError(f"{what} is indefinite (eigenvalue {vals.min():.3e})")
    return np.clip(vals, 0.0, None), vecs


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    if a.dim != b.dim:
        raise NumericError(f"dimension mismatch: {a.dim} vs {b.dim}")
    vals, vecs = _psd_eigh(a.cov, "first covariance")
    sqrt_a = (vecs * np.sqrt(vals)) @ vecs.T
    _psd_eigh(b.cov, "second covariance")
    inner, _ = _psd_eigh(sqrt_a @ b.cov @ sqrt_a, "covariance product")
    diff = a.mean - b.mean
    value = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.sqrt(inner).sum())
    return max(value, 0.0)


def _check_prob_rows(p):
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise ContractError(f"expected a non-empty [N, c] probability table, got {p.shape}")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
        raise ContractError("rows must be probability vectors")
    return p


def _kl_rows(p, q):
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    return terms.sum(axis=1)


def entropy_score(probs) -> float:
    """``exp(mean_i KL(p_i || p_bar))`` with ``p_bar`` the row average."""
    p = _check_prob_rows(probs)
    marginal = p.mean(axis=0, keepdims=True)
    return float(np.exp(np.mean(_kl_rows(p, marginal))))


# ---------------------------------------------------------------------------
# discrete conditional mutual information


@dataclass
class DiscreteJoint:
    p: np.ndarray

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64)
        if self.p.ndim != 3:
            raise DimensionError(f"joint must have 3 axes (x, y, z), got {self.p.shape}")
        if np.any(self.p < 0):
            raise ContractError("joint has negative mass")
        if abs(self.p.sum() - 1.0) > 1e-12:
            raise ContractError(f"joint sums to {self.p.sum()!r}, not 1")

    def swapped(self) -> "DiscreteJoint":
        return DiscreteJoint(np.transpose(self.p, (1, 0, 2)))


def discrete_cmi(j) -> float:
    """Exact I(X; Y | Z) in nats; cells with zero mass contribute nothing."""
    if not isinstance(j, DiscreteJoint):
        j = DiscreteJoint(j)
    p = j.p
    p_z = p.sum(axis=(0, 1))
    p_xz = p.sum(axis=1)
    p_yz = p.sum(axis=0)
    total = 0.0
    nx, ny, nz = p.shape
    for x in range(nx):
        for y in range(ny):
            for z in range(nz):
                v = p[x, y, z]
                if v > 0:
                    total += v * np.log(v * p_z[z] / (p_xz[x, z] * p_yz[y, z]))
    return float(total)


# ---------------------------------------------------------------------------
# MLP probes


@dataclass
class Probe:
    params: ParamSet
    mean: np.ndarray
    scale: np.ndarray
    n_layers: int

    def logits(self, feats) -> np.ndarray:
        x = Tensor((np.asarray(feats, dtype=np.float64) - self.mean) / self.scale)
        return mlp_forward(self.params.frozen_view(), x, self.n_layers).data

    def predict(self, feats) -> np.ndarray:
        return self.logits(feats).argmax(axis=1)


def train_probe(feats, labels, n_classes, seed=0, epochs=20, batch_size=128, lr=1e-3, hidden=(64, 64)) -> Probe:
    """Fit a fresh MLP (``len(hidden) + 1`` dense layers) with Adam.

    Inputs are standardized with training-set statistics. Deterministic under
    ``seed``.
    """
    from .trainer import Adam  # trainer imports nothing from here; keep the edge one-way

    feats = np.asarray(feats, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if feats.ndim != 2 or len(feats) != len(labels):
        raise DimensionError("features must be [N, d] with one label per row")
    mean = feats.mean(axis=0)
    scale = feats.std(axis=0)
    scale = np.where(scale > 1e-12, scale, 1.0)
    xs = (feats - mean) / scale
    rng = np.random.default_rng([seed, 17])
    params = ParamSet()
    sizes = [feats.shape[1], *hidden, n_classes]
    init_mlp(params, rng, sizes)
    groups = {"probe": params}
    opt = Adam(("probe",), lr)
    opt.init_moments(groups)
    n = len(xs)
    bs = min(batch_size, n)
    for epoch in range(epochs):
        order = np.random.default_rng([seed, 29, epoch]).permutation(n)
        for lo in range(0, n - bs + 1, bs):
            idx = order[lo:lo + bs]
            loss = cross_entropy(mlp_forward(params, Tensor(xs[idx]), len(sizes) - 1), labels[idx])
            if not np.isfinite(loss.item()):
                raise DivergenceError("probe", loss.item())
            params.zero_grad()
            ad.backward(loss)
            opt.step(groups)
    return Probe(params, mean, scale, len(sizes) - 1)


def latent_slice(mu: np.ndarray, layout: LatentLayout, components) -> np.ndarray:
    offsets = np.cumsum([0, *layout.sizes])
    cols = []
    for c in components:
        k = COMPONENTS.index(c)
        cols.append(mu[:, offsets[k]:offsets[k + 1]])
    return np.concatenate(cols, axis=1)


@dataclass
class ProbeResult:
    table: PredictionTable
    accuracy: float
    dp: float
    eod: float
    components: tuple
    target: str


def probe_on_features(train_feats, train_labels, test_feats, test_y, test_s, n_classes,
                      seed=0, target_labels=None, **kw) -> ProbeResult:
    probe = train_probe(train_feats, train_labels, n_classes, seed=seed, **kw)
    truth = test_y if target_labels is None else target_labels
    table = PredictionTable(truth, probe.predict(test_feats), test_s)
    return ProbeResult(table, table.accuracy(), demographic_parity(table), equalized_odds(table), (), "y")


def probe_eval(model, train: LabeledDataset, test: LabeledDataset, components=("Y",), target="y",
               seed=0, **kw) -> ProbeResult:
    """Train a fresh probe on posterior-mean codes of ``train`` and score ``test``.

    ``target`` is "y" (digit) or "s" (color); DP/EOD are always computed
    with the color as the sensitive attribute.
    """
    lay = model.layout
    f_train = latent_slice(model.posterior_means(train.images), lay, components)
    f_test = latent_slice(model.posterior_means(test.images), lay, components)
    lab_train = train.y if target == "y" else train.s
    lab_test = test.y if target == "y" else test.s
    n_classes = train.n_y if target == "y" else train.n_s
    probe = train_probe(f_train, lab_train, n_classes, seed=seed, **kw)
    table = PredictionTable(lab_test, probe.predict(f_test), test.s)
    return ProbeResult(table, table.accuracy(), demographic_parity(table), equalized_odds(table),
                       tuple(components), target)


# ---------------------------------------------------------------------------
# feature extractor for FID / IS


class FeatureExtractor:
    """Two stride-2 convolutions, a hidden dense layer (the features) and a
    softmax head giving p(y | x)."""

    def __init__(self, params: ParamSet, image_shape, channels=(16, 32), hidden=64, n_classes=10):
        self.params = params
        self.image_shape = tuple(image_shape)
        self.channels = tuple(channels)
        self.hidden = hidden
        self.n_classes = n_classes

    @classmethod
    def init(cls, image_shape, seed=0, channels=(16, 32), hidden=64, n_classes=10):
        rng = np.random.default_rng([seed, 41])
        p = ParamSet()
        c_in, h, w = image_shape
        for i, c_out in enumerate(channels):
            p.add(f"conv{i}.w", glorot(rng, c_in * 9, c_out * 9, (c_out, c_in, 3, 3)))
            p.add(f"conv{i}.b", np.zeros(c_out))
            c_in = c_out
            h, w = (h + 1) // 2, (w + 1) // 2
        init_mlp(p, rng, [c_in * h * w, hidden, n_classes], prefix="fc.")
        return cls(p, image_shape, channels, hidden, n_classes)

    def _hidden(self, params, x: Tensor) -> Tensor:
        h = x
        for i in range(len(self.channels)):
            h = ad.relu(ad.conv2d(h, params[f"conv{i}.w"], params[f"conv{i}.b"], stride=2, pad=1))
        h = ad.reshape(h, (x.shape[0], -1))
        return ad.relu(ad.add_bias(ad.matmul(h, params["fc.w0"]), params["fc.b0"]))

    def _logits(self, params, x: Tensor) -> Tensor:
        return ad.add_bias(ad.matmul(self._hidden(params, x), params["fc.w1"]), params["fc.b1"])

    def features_and_probs(self, images, batch_size=512):
        params = self.params.frozen_view()
        feats, probs = [], []
        for lo in range(0, len(images), batch_size):
            x = Tensor(np.asarray(images[lo:lo + batch_size], dtype=np.float64))
            h = self._hidden(params, x)
            logits = ad.add_bias(ad.matmul(h, params["fc.w1"]), params["fc.b1"])
            feats.append(h.data)
            probs.append(ad.softmax(logits).data)
        return np.concatenate(feats), np.concatenate(probs)

    def fit(self, ds: LabeledDataset, epochs=3, batch_size=64, lr=1e-3, seed=0):
        from .trainer import Adam

        groups = {"fx": self.params}
        opt = Adam(("fx",), lr)
        opt.init_moments(groups)
        for epoch in range(epochs):
            for batch in batch_iter(ds, min(batch_size, len(ds)), [seed, 43, epoch]):
                loss = cross_entropy(self._logits(self.params, Tensor(batch.x)), batch.y)
                if not np.isfinite(loss.item()):
                    raise DivergenceError("feature extractor", loss.item())
                self.params.zero_grad()
                ad.backward(loss)
                opt.step(groups)
        return self


def train_feature_extractor(ds: LabeledDataset, seed=0, epochs=3) -> FeatureExtractor:
    return FeatureExtractor.init(ds.image_shape, seed=seed, n_classes=ds.n_y).fit(ds, epochs=epochs, seed=seed)


# ---------------------------------------------------------------------------
# delta metrics


@dataclass
class DeltaResult:
    delta_fid: float
    delta_is: float
    mode: str
    per_combination: list = field(default_factory=list)  # (lambdas, dfid, dis) in traverse mode

    @property
    def n_combinations(self):
        return len(self.per_combination)


def _fid_is(extractor, direct_feats, direct_probs, images):
    feats, probs = extractor.features_and_probs(images)
    dfid = frechet_distance(GaussianStats.from_features(direct_feats), GaussianStats.from_features(feats))
    dis = abs(entropy_score(direct_probs) - entropy_score(probs))
    return dfid, dis


def traverse_combinations(lambdas=TRAVERSE_LAMBDAS):
    return [dict(zip("YSR", combo)) for combo in product(*lambdas)]


def delta_metrics(model, eval_set: LabeledDataset, extractor: FeatureExtractor, mode="permute_ys",
                  seed=0, perms=None, lambdas=TRAVERSE_LAMBDAS, workers=1) -> DeltaResult:
    """Compare direct reconstructions with latent-perturbed reconstructions.

    ``permute_ys`` shuffles z_Y and z_S independently across the evaluation
    set (``perms`` may fix the permutations, keyed by component).
    ``traverse`` pairs every sample with a randomly chosen reference and
    interpolates (Y, S, R) over the 4 x 4 x 3 grid; the reported deltas are
    averages over all combinations, computed on up to ``workers`` threads.
    """
    mu = model.posterior_means(eval_set.images)
    direct = model.reconstruct_means(mu)
    d_feats, d_probs = extractor.features_and_probs(direct)
    lay = model.layout
    src = LatentPartition.from_tensor(Tensor(mu), lay)
    rng = np.random.default_rng([seed, 53])
    n = len(mu)
    if mode == "permute_ys":
        if perms is None:
            perms = {"Y": rng.permutation(n), "S": rng.permutation(n)}
        parts = [src.get(c).data[np.asarray(perms[c])] if c in perms else src.get(c).data for c in COMPONENTS]
        images = model.reconstruct_means(np.concatenate(parts, axis=1))
        dfid, dis = _fid_is(extractor, d_feats, d_probs, images)
        return DeltaResult(dfid, dis, mode)
    if mode == "traverse":
        ref_idx = rng.permutation(n) if perms is None else np.asarray(perms["ref"])
        ref = LatentPartition.from_tensor(Tensor(mu[ref_idx]), lay)

        def one(lam):
            z = interpolate_codes(src, ref, lam).joined().data
            return (lam, *_fid_is(extractor, d_feats, d_probs, model.reconstruct_means(z)))

        combos = traverse_combinations(lambdas)
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                rows = list(pool.map(one, combos))
        else:
            rows = [one(lam) for lam in combos]
        return DeltaResult(float(np.mean([r[1] for r in rows])), float(np.mean([r[2] for r in rows])), mode, rows)
    raise ValueError(f"unknown mode {mode!r}; expected 'permute_ys' or 'traverse'")


# ---------------------------------------------------------------------------
# report


@dataclass
class MetricsReport:
    accuracy: float
    dp: float
    eod: float
    delta_fid: float
    delta_is: float
    probe_seed: int
    n_eval: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)
