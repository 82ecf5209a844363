import numpy as np
import pytest

from cadvae import autodiff as ad
from cadvae.autodiff import ParamSet, Tensor
from cadvae.errors import DimensionError
from cadvae.latent import LatentLayout, LatentPartition
from cadvae.networks import (
    CadVae,
    ClassifierSpec,
    DecoderSpec,
    DiscriminatorSpec,
    EncoderSpec,
    Head,
    ModelSpec,
    classifier_logits,
    classify_target,
    decode,
    encode,
    init_classifier,
    init_decoder,
    init_encoder,
    opponent_target,
    tc_discriminate,
)
from cadvae.objectives import cross_entropy, tc_losses
from cadvae.trainer import Adam

from oracles import finite_diff, rel_err

SMALL = LatentLayout(4, 2, 2, 2)


def zeroed(params: ParamSet) -> ParamSet:
    return ParamSet({n: np.zeros(t.shape) for n, t in params.items()})


def test_encoder_shapes_default_layout():
    spec = EncoderSpec()
    params = init_encoder(spec, np.random.default_rng(0))
    x = np.random.default_rng(1).uniform(size=(3, 3, 16, 16))
    post = encode(params, Tensor(x), spec)
    assert post.mu.shape == (3, 512) and post.log_var.shape == (3, 512)
    assert spec.out_dim == 1024
    twice = encode(params, Tensor(np.stack([x[0], x[0]])), spec)
    assert np.array_equal(twice.mu.data[0], twice.mu.data[1])
    assert np.array_equal(twice.log_var.data[0], twice.log_var.data[1])
    with pytest.raises(DimensionError):
        encode(params, Tensor(np.zeros((1, 3, 8, 8))), spec)


def test_encoder_first_layer_gradient():
    spec = EncoderSpec((3, 8, 8), (4, 4), SMALL, activation="tanh")
    params = init_encoder(spec, np.random.default_rng(2))
    x = Tensor(np.random.default_rng(3).uniform(size=(2, 3, 8, 8)))
    ad.backward(ad.mean(encode(params, x, spec).mu))
    w0 = params["conv0.w"].data

    def f(w):
        p = ParamSet({n: (w if n == "conv0.w" else t.data) for n, t in params.items()})
        return ad.mean(encode(p, x, spec).mu).item()

    assert rel_err(params["conv0.w"].grad, finite_diff(f, w0)) < 1e-4


def test_decoder_contract():
    spec = DecoderSpec((3, 16, 16), (32, 16), SMALL)
    params = init_decoder(spec, np.random.default_rng(4))
    z = LatentPartition.from_tensor(Tensor(np.random.default_rng(5).standard_normal((2, SMALL.total)) * 3), SMALL)
    out = decode(params, z, spec)
    assert out.shape == (2, 3, 16, 16)
    assert out.data.min() > 0 and out.data.max() < 1
    assert np.array_equal(out.data, decode(params, z, spec).data)
    other = LatentPartition.from_tensor(Tensor(np.zeros((2, 10))), LatentLayout(3, 3, 2, 2))
    with pytest.raises(DimensionError):
        decode(params, other, spec)


@pytest.mark.parametrize("size", [8, 16, 28])
def test_model_round_trip_shapes(size):
    model = CadVae.init(ModelSpec((3, size, size), SMALL), seed=0)
    x = np.random.default_rng(6).uniform(size=(2, 3, size, size))
    mu = model.posterior_means(x)
    assert model.reconstruct_means(mu).shape == x.shape


def test_classifier_rows_and_uniform_init():
    spec = ClassifierSpec(4, 10)
    params = init_classifier(spec, np.random.default_rng(7))
    rng = np.random.default_rng(8)
    zY, zR = Tensor(rng.standard_normal((5, 2))), Tensor(rng.standard_normal((5, 2)))
    p = classify_target(params, zY, zR, spec).data
    assert np.max(np.abs(p.sum(axis=1) - 1)) <= 1e-12
    u = classify_target(zeroed(params), zY, zR, spec).data
    assert np.allclose(u, 0.1, atol=1e-15)
    op_spec = ClassifierSpec(2, 10)
    u = opponent_target(zeroed(init_classifier(op_spec, rng)), zY, op_spec).data
    assert np.allclose(u, 0.1, atol=1e-15)
    with pytest.raises(DimensionError):
        classify_target(params, zY, Tensor(rng.standard_normal((5, 3))), spec)


def test_classifier_cross_entropy_gradient():
    spec = ClassifierSpec(4, 5, hidden=(6, 6), activation="tanh")
    params = init_classifier(spec, np.random.default_rng(9))
    rng = np.random.default_rng(10)
    zY, zR = rng.standard_normal((6, 2)), rng.standard_normal((6, 2))
    y = rng.integers(0, 5, size=6)
    zt = Tensor(zR, requires_grad=True)
    ad.backward(cross_entropy(classify_logits(params, zY, zt, spec), y))
    fd = finite_diff(lambda v: cross_entropy(classify_logits(params, zY, Tensor(v), spec), y).item(), zR)
    assert rel_err(zt.grad, fd) < 1e-4
    assert rel_err(params["w0"].grad, finite_diff(
        lambda w: cross_entropy(classify_logits(_with(params, "w0", w), zY, zR, spec), y).item(),
        params["w0"].data)) < 1e-4


def classify_logits(params, zY, zR, spec):
    return classifier_logits(params, ad.concat([ad.as_tensor(zY), ad.as_tensor(zR)], axis=1), spec)


def _with(params, name, value):
    return ParamSet({n: (value if n == name else t.data) for n, t in params.items()})


def train_head(head: Head, xs, labels, steps=300, lr=1e-2, seed=0):
    opt = Adam(("h",), lr)
    groups = {"h": head.params}
    opt.init_moments(groups)
    rng = np.random.default_rng(seed)
    for _ in range(steps):
        idx = rng.choice(len(xs), 64, replace=False)
        loss = cross_entropy(head.logits(Tensor(xs[idx])), labels[idx])
        head.params.zero_grad()
        ad.backward(loss)
        opt.step(groups)


def test_opponent_on_noise_stays_at_chance():
    spec = ClassifierSpec(4, 10)
    head = Head(init_classifier(spec, np.random.default_rng(11)), spec)
    rng = np.random.default_rng(12)
    train_x, train_y = rng.standard_normal((2000, 4)), rng.integers(0, 10, 2000)
    train_head(head, train_x, train_y, steps=200)
    test_x, test_y = rng.standard_normal((4000, 4)), rng.integers(0, 10, 4000)
    acc = np.mean(head.logits(Tensor(test_x)).data.argmax(1) == test_y)
    assert abs(acc - 0.1) <= 0.05


def test_discriminator_contract():
    spec = DiscriminatorSpec(6)
    params = init_classifier(spec, np.random.default_rng(13))
    rng = np.random.default_rng(14)
    zs = [Tensor(rng.standard_normal((5, 2))) for _ in range(3)]
    logits = tc_discriminate(params, *zs, spec)
    assert logits.shape == (5,)
    zero = tc_discriminate(zeroed(params), *zs, spec).data
    assert np.array_equal(zero, np.zeros(5))
    assert np.allclose(1 / (1 + np.exp(-zero)), 0.5)
    with pytest.raises(DimensionError):
        tc_discriminate(params, zs[0], zs[1], Tensor(np.zeros((5, 3))), spec)


def test_discriminator_detects_planted_copy():
    spec = DiscriminatorSpec(3, hidden=(32, 32))
    head = Head(init_classifier(spec, np.random.default_rng(15)), spec)
    opt = Adam(("d",), 5e-3)
    groups = {"d": head.params}
    opt.init_moments(groups)
    rng = np.random.default_rng(16)
    for step in range(400):
        a = rng.standard_normal((64, 1))
        zY, zS, zR = Tensor(a), Tensor(a.copy()), Tensor(rng.standard_normal((64, 1)))
        _, l_disc = tc_losses(head, zY, zS, zR, step)
        head.params.zero_grad()
        ad.backward(l_disc)
        opt.step(groups)
    a = rng.standard_normal((1000, 1))
    joint = np.concatenate([a, a, rng.standard_normal((1000, 1))], axis=1)
    perm = np.concatenate([a, a[rng.permutation(1000)], joint[rng.permutation(1000), 2:]], axis=1)
    acc = 0.5 * (np.mean(head.logits(Tensor(joint)).data[:, 0] > 0) + np.mean(head.logits(Tensor(perm)).data[:, 0] < 0))
    assert acc > 0.9
    l_tc, _ = tc_losses(head, Tensor(a), Tensor(a), Tensor(joint[:, 2:]), 0)
    assert l_tc.item() > 1


def test_model_init_is_deterministic_and_counts_match_specs():
    spec = ModelSpec((3, 16, 16), SMALL)
    a, b = CadVae.init(spec, seed=3), CadVae.init(spec, seed=3)
    for g in a.params:
        for n, t in a.params[g].items():
            assert np.array_equal(t.data, b.params[g][n].data)
    counts = a.num_params()
    assert counts["f_y"] == (4 * 64 + 64) + (64 * 64 + 64) + (64 * 10 + 10)
    assert counts["f_y_op"] == (2 * 64 + 64) + (64 * 64 + 64) + (64 * 10 + 10)
    assert counts["disc"] == (6 * 128 + 128) + 2 * (128 * 128 + 128) + (128 + 1)
