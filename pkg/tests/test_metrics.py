import itertools
import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cadvae.data import BiasSpec, generate_colored_digits, generate_unbiased_test
from cadvae.errors import ContractError, DimensionError, NumericError, UndefinedGroupError
from cadvae.latent import LatentLayout
from cadvae.metrics import (
    DiscreteJoint,
    FeatureExtractor,
    GaussianStats,
    MetricsReport,
    PredictionTable,
    delta_metrics,
    demographic_parity,
    discrete_cmi,
    entropy_score,
    equalized_odds,
    frechet_distance,
    latent_slice,
    probe_on_features,
    traverse_combinations,
    train_probe,
)
from cadvae.networks import CadVae, ModelSpec

from oracles import cmi_enum, dp_enum, eod_enum, kl_loop


def rows(*spec):
    """Expand (y_true, y_pred, s, count) tuples into a PredictionTable."""
    yt, yp, s = [], [], []
    for a, b, c, k in spec:
        yt += [a] * k
        yp += [b] * k
        s += [c] * k
    return PredictionTable(yt, yp, s)


# ---------------------------------------------------------------------------
# DP / EOD


def test_dp_hand_table():
    t = rows((1, 1, 0, 6), (0, 0, 0, 4), (1, 1, 1, 4), (0, 0, 1, 6))
    assert len(t) == 20
    assert demographic_parity(t) == pytest.approx(0.2, abs=1e-15)


def test_eod_hand_table():
    t = rows(
        (1, 1, 0, 8), (1, 0, 0, 2), (0, 1, 0, 2), (0, 0, 0, 8),
        (1, 1, 1, 5), (1, 0, 1, 5), (0, 1, 1, 1), (0, 0, 1, 9),
    )
    assert equalized_odds(t) == pytest.approx(0.3, abs=1e-15)


def test_fairness_trivial_cases():
    perfect = PredictionTable([0, 1, 1, 0, 1, 0], [0, 1, 1, 0, 1, 0], [0, 0, 0, 1, 1, 1])
    assert equalized_odds(perfect) == 0.0
    const = PredictionTable([0, 1, 1, 0], [1, 1, 1, 1], [0, 0, 1, 1])
    assert demographic_parity(const) == 0.0 and equalized_odds(const) == 0.0
    single = PredictionTable([0, 1, 2], [2, 1, 0], [3, 3, 3])
    assert demographic_parity(single) == 0.0
    indep = PredictionTable([0, 1, 0, 1], [0, 1, 0, 1], [0, 0, 1, 1])
    assert demographic_parity(indep) == 0.0


def test_fairness_errors():
    with pytest.raises(UndefinedGroupError):
        demographic_parity(PredictionTable([0, 1], [0, 1], [0, 0], n_groups=2))
    with pytest.raises(UndefinedGroupError):
        equalized_odds(PredictionTable([0, 1], [0, 1], [0, 0], n_classes=3))
    with pytest.raises(DimensionError):
        PredictionTable([0, 1], [0], [0, 1])
    # an empty (y, s) cell is skipped rather than fatal
    t = PredictionTable([0, 0, 1], [0, 1, 1], [0, 1, 0])
    assert equalized_odds(t) == 1.0


@pytest.mark.parametrize("seed", range(12))
def test_fairness_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    n_cls = 2 if seed % 2 == 0 else 10
    n_grp = 2 if seed % 2 == 0 else 10
    n = int(rng.integers(40, 200))
    yt = rng.integers(0, n_cls, n)
    yp = np.where(rng.random(n) < 0.6, yt, rng.integers(0, n_cls, n))
    s = np.concatenate([np.arange(n_grp), rng.integers(0, n_grp, n - n_grp)])
    t = PredictionTable(yt, yp, s)
    assert demographic_parity(t) == dp_enum(list(yp), list(s))
    assert equalized_odds(t) == eod_enum(list(yt), list(yp), list(s))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_fairness_invariant_to_group_relabeling(seed):
    rng = np.random.default_rng(seed)
    yt, yp = rng.integers(0, 3, 60), rng.integers(0, 3, 60)
    s = np.concatenate([[0, 1, 2, 3], rng.integers(0, 4, 56)])
    relabel = rng.permutation(4)
    a, b = PredictionTable(yt, yp, s), PredictionTable(yt, yp, relabel[s])
    assert demographic_parity(a) == demographic_parity(b)
    assert equalized_odds(a) == equalized_odds(b)


# ---------------------------------------------------------------------------
# Frechet distance


def test_frechet_closed_forms():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((5, 5))
    g = GaussianStats(rng.standard_normal(5), a @ a.T)
    assert frechet_distance(g, g) <= 1e-9
    assert abs(frechet_distance(GaussianStats([0.0], [[1.0]]), GaussianStats([1.0], [[1.0]])) - 1.0) <= 1e-9
    d = frechet_distance(GaussianStats([0, 0], np.diag([1.0, 4.0])), GaussianStats([0, 0], np.diag([4.0, 1.0])))
    assert abs(d - 2.0) <= 1e-9


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_frechet_diagonal_and_symmetry(d, seed):
    rng = np.random.default_rng(seed)
    va, vb = rng.uniform(0.1, 5, d), rng.uniform(0.1, 5, d)
    ma, mb = rng.standard_normal(d), rng.standard_normal(d)
    expect = float(np.sum((ma - mb) ** 2) + np.sum((np.sqrt(va) - np.sqrt(vb)) ** 2))
    a, b = GaussianStats(ma, np.diag(va)), GaussianStats(mb, np.diag(vb))
    assert abs(frechet_distance(a, b) - expect) <= 1e-9
    x, y = rng.standard_normal((d, d)), rng.standard_normal((d, d))
    a, b = GaussianStats(ma, x @ x.T), GaussianStats(mb, y @ y.T)
    assert abs(frechet_distance(a, b) - frechet_distance(b, a)) <= 1e-8 * max(1.0, frechet_distance(a, b))


def test_frechet_errors_and_shrinkage():
    with pytest.raises(NumericError):
        frechet_distance(GaussianStats([0.0], [[1.0]]), GaussianStats([0.0, 0.0], np.eye(2)))
    with pytest.raises(NumericError):
        frechet_distance(GaussianStats([0.0, 0.0], np.diag([1.0, -1.0])), GaussianStats([0.0, 0.0], np.eye(2)))
    with pytest.raises(ContractError):
        GaussianStats([0.0, 0.0], [[1.0, 0.5], [0.0, 1.0]])
    feats = np.random.default_rng(1).standard_normal((5, 8))
    with pytest.warns(RuntimeWarning, match="rank deficient"):
        g = GaussianStats.from_features(feats)
    assert np.linalg.eigvalsh(g.cov).min() > 0
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        GaussianStats.from_features(np.random.default_rng(2).standard_normal((20, 4)))


# ---------------------------------------------------------------------------
# entropy score


def test_entropy_score_cases():
    same = np.tile([0.2, 0.3, 0.5], (7, 1))
    assert entropy_score(same) == pytest.approx(1.0, abs=1e-12)
    assert entropy_score(np.eye(10)) == pytest.approx(10.0, abs=1e-10)
    with pytest.raises(ContractError):
        entropy_score([[0.5, 0.6]])
    with pytest.raises(ContractError):
        entropy_score([[1.2, -0.2]])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 30), st.integers(2, 10), st.integers(0, 2**31 - 1), st.booleans())
def test_entropy_score_matches_loop_and_bounds(n, c, seed, sparse):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.full(c, 0.3), size=n)
    if sparse:
        p[rng.random(p.shape) < 0.3] = 0.0
        p[np.arange(n), rng.integers(0, c, n)] += 1e-3
        p /= p.sum(axis=1, keepdims=True)
    got = entropy_score(p)
    assert abs(got - kl_loop(p.tolist())) <= 1e-10
    assert 1.0 - 1e-12 <= got <= c + 1e-9


# ---------------------------------------------------------------------------
# discrete CMI


def factorized_joint(rng, nx, ny, nz):
    pz = rng.dirichlet(np.ones(nz))
    px_z = rng.dirichlet(np.ones(nx), size=nz)
    py_z = rng.dirichlet(np.ones(ny), size=nz)
    p = np.einsum("zx,zy,z->xyz", px_z, py_z, pz)
    return p / p.sum()


def test_cmi_examples():
    p = np.zeros((2, 2, 1))
    p[0, 0, 0] = p[1, 1, 0] = 0.5
    assert abs(discrete_cmi(DiscreteJoint(p)) - math.log(2)) < 1e-12
    assert discrete_cmi(factorized_joint(np.random.default_rng(0), 3, 4, 2)) < 1e-12
    with pytest.raises(ContractError):
        DiscreteJoint(np.full((2, 2, 2), 0.2))
    with pytest.raises(ContractError):
        DiscreteJoint(np.array([1.5, -0.5]).reshape(2, 1, 1))
    with pytest.raises(DimensionError):
        DiscreteJoint(np.full((2, 2), 0.25))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4))
def test_cmi_matches_definition_oracle(seed, nx, ny, nz):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.full(nx * ny * nz, 0.5)).reshape(nx, ny, nz)
    p /= p.sum()
    j = DiscreteJoint(p)
    got = discrete_cmi(j)
    assert abs(got - cmi_enum(p)) < 1e-12
    assert got >= -1e-12
    assert abs(got - discrete_cmi(j.swapped())) < 1e-12


def test_cmi_zero_iff_factorized_on_enumerated_joints():
    for weights in itertools.product((0, 1, 2), repeat=8):
        w = np.array(weights, dtype=np.float64)
        if w.sum() == 0:
            continue
        p = (w / w.sum()).reshape(2, 2, 2)
        pz = p.sum(axis=(0, 1))
        factorizes = np.allclose(p * pz[None, None, :], p.sum(axis=1)[:, None, :] * p.sum(axis=0)[None, :, :],
                                 atol=1e-15, rtol=0)
        assert (discrete_cmi(DiscreteJoint(p)) < 1e-10) == factorizes, weights


# ---------------------------------------------------------------------------
# probes


def test_probe_planted_latents():
    rng = np.random.default_rng(3)
    y = rng.integers(0, 10, 2000)
    feats = np.eye(10)[y]
    ty = rng.integers(0, 10, 1000)
    res = probe_on_features(feats, y, np.eye(10)[ty], ty, rng.integers(0, 10, 1000), 10, seed=0)
    assert res.accuracy > 0.99


def test_probe_on_label_free_codes_is_at_chance():
    rng = np.random.default_rng(4)
    feats, y = rng.standard_normal((2000, 8)), rng.integers(0, 10, 2000)
    tf, ty = rng.standard_normal((4000, 8)), rng.integers(0, 10, 4000)
    res = probe_on_features(feats, y, tf, ty, rng.integers(0, 10, 4000), 10, seed=0)
    assert abs(res.accuracy - 0.1) <= 0.05


def test_probe_on_untrained_encoder_is_above_chance():
    # a random conv encoder keeps glyph shape, so the control is not at chance
    spec = BiasSpec(bias_rate=0.95, seed=5, image_size=8)
    train = generate_colored_digits(1000, spec)
    test = generate_unbiased_test(500, BiasSpec(seed=6, image_size=8))
    model = CadVae.init(ModelSpec((3, 8, 8), LatentLayout(8, 8, 8, 8)), seed=0)
    from cadvae.metrics import probe_eval

    res = probe_eval(model, train, test, seed=0, epochs=10)
    assert res.accuracy > 0.3


def test_probe_is_deterministic():
    rng = np.random.default_rng(5)
    feats, y = rng.standard_normal((300, 4)), rng.integers(0, 3, 300)
    a = train_probe(feats, y, 3, seed=7, epochs=3)
    b = train_probe(feats, y, 3, seed=7, epochs=3)
    c = train_probe(feats, y, 3, seed=8, epochs=3)
    for n, t in a.params.items():
        assert np.array_equal(t.data, b.params[n].data)
    assert any(not np.array_equal(t.data, c.params[n].data) for n, t in a.params.items())


def test_latent_slice():
    lay = LatentLayout(2, 1, 1, 3)
    mu = np.arange(14.0).reshape(2, 7)
    assert np.array_equal(latent_slice(mu, lay, ("Y",)), [[2.0], [9.0]])
    assert np.array_equal(latent_slice(mu, lay, ("Y", "R")), [[2, 4, 5, 6], [9, 11, 12, 13]])


# ---------------------------------------------------------------------------
# generation deltas


@pytest.fixture(scope="module")
def tiny_model():
    model = CadVae.init(ModelSpec((3, 8, 8), LatentLayout(4, 2, 2, 2)), seed=1)
    ds = generate_unbiased_test(80, BiasSpec(seed=9, image_size=8))
    extractor = FeatureExtractor.init((3, 8, 8), seed=0)
    return model, ds, extractor


def test_delta_identity_perturbations(tiny_model):
    model, ds, fx = tiny_model
    ident = np.arange(len(ds))
    r = delta_metrics(model, ds, fx, perms={"Y": ident, "S": ident})
    assert r.delta_fid <= 1e-6 and r.delta_is <= 1e-6
    r = delta_metrics(model, ds, fx, mode="traverse", lambdas=((0.0,), (0.0,), (0.0,)))
    assert r.n_combinations == 1
    assert r.delta_fid <= 1e-6 and r.delta_is <= 1e-6


def test_traverse_enumerates_48_combinations(tiny_model):
    model, ds, fx = tiny_model
    combos = traverse_combinations()
    assert len(combos) == 48
    assert len({tuple(sorted(c.items())) for c in combos}) == 48
    r = delta_metrics(model, ds, fx, mode="traverse", workers=2)
    assert r.n_combinations == 48
    serial = delta_metrics(model, ds, fx, mode="traverse", workers=1)
    assert r.delta_fid == serial.delta_fid and r.delta_is == serial.delta_is
    assert r.delta_fid > 0


def test_delta_fid_is_invariant_to_sample_order(tiny_model):
    model, ds, fx = tiny_model
    n = len(ds)
    rng = np.random.default_rng(10)
    py, ps, q = rng.permutation(n), rng.permutation(n), rng.permutation(n)
    qinv = np.argsort(q)
    base = delta_metrics(model, ds, fx, perms={"Y": py, "S": ps})
    shuffled = delta_metrics(model, ds.subset(q), fx, perms={"Y": qinv[py[q]], "S": qinv[ps[q]]})
    assert abs(base.delta_fid - shuffled.delta_fid) <= 1e-9 * max(1.0, base.delta_fid)
    assert abs(base.delta_is - shuffled.delta_is) <= 1e-9


def test_metrics_report_json():
    rep = MetricsReport(0.9, 0.1, 0.2, 3.0, 0.5, 7, 100)
    assert json.loads(rep.to_json()) == {
        "accuracy": 0.9, "dp": 0.1, "eod": 0.2, "delta_fid": 3.0, "delta_is": 0.5, "probe_seed": 7, "n_eval": 100,
    }
