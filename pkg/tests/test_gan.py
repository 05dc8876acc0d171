import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from darkstream.errors import BudgetExceeded, ConfigWeightMismatch, EmptyBatch, ExhaustedTries, ShapeMismatch
from darkstream.gan import (
    CRITIC,
    GEN,
    FlatParams,
    GanConfig,
    critic,
    fd_gradient,
    generate,
    grad_penalty,
    init_gan,
    interpolate,
    load_gan,
    sample_pseudo_speaker,
    save_gan,
    train_toy,
    wganqc_losses,
)
from darkstream.metrics import cosine_similarity
from darkstream.weights import WeightBundle, save_weights


def linear_critic(params):
    """Zero every critic residual conv so D(e) = w.e + c; returns (params, w)."""
    p = dict(params)
    for k in p:
        if k.startswith(CRITIC) and ".conv" in k:
            p[k] = np.zeros_like(p[k])
    dim = p[f"{CRITIC}.in.weight"].shape[1]
    w = critic(np.eye(dim), p) - critic(np.zeros(dim), p)
    return p, w


def gaussian_target(rng, n):
    return np.array([2.0, -1.0]) + rng.standard_normal((n, 2))


@pytest.fixture(scope="module")
def toy_params():
    return init_gan(GanConfig.toy(), seed=3)


# -- shapes and config --------------------------------------------------------

def test_full_size_shapes():
    cfg = GanConfig()
    p = init_gan(cfg)
    z = np.random.default_rng(0).standard_normal((2, cfg.noise_dim))
    e = generate(z, p)
    assert e.shape == (2, 704)
    assert critic(e, p).shape == (2,)


def test_param_batch_axis(toy_params, rng):
    """A leading parameter axis evaluates several networks at once."""
    other = init_gan(GanConfig.toy(), seed=4)
    stacked = {k: np.stack([toy_params[k], other[k]]) for k in toy_params}
    z = rng.standard_normal((5, 4))
    both = generate(z, stacked)
    assert np.allclose(both[0], generate(z, toy_params)) and np.allclose(both[1], generate(z, other))


def test_shape_errors(toy_params):
    with pytest.raises(ShapeMismatch):
        generate(np.zeros(5), toy_params)
    with pytest.raises(ShapeMismatch):
        critic(np.zeros(3), toy_params)
    with pytest.raises(ValueError):
        GanConfig(critic_grid=6)


def test_save_load(tmp_path, toy_params):
    save_gan(toy_params, tmp_path / "g.dstw")
    assert load_gan(tmp_path / "g.dstw").equals(toy_params)
    save_weights(WeightBundle({"x": np.zeros(1)}), tmp_path / "bad.dstw")
    with pytest.raises(ConfigWeightMismatch):
        load_gan(tmp_path / "bad.dstw")


# -- losses ---------------------------------------------------------------------

@given(st.integers(0, 2**31 - 1), st.integers(1, 6))
def test_loss_identity(seed, n):
    r = np.random.default_rng(seed)
    params = init_gan(GanConfig.toy(), seed=seed % 1000)
    real, z = r.normal(size=(n, 2)), r.normal(size=(n, 4))
    loss_d, loss_g, gp = wganqc_losses(real, z, params, seed=seed, return_penalty=True)
    assert abs(loss_d + loss_g - gp - np.mean(critic(real, params))) < 1e-6


@given(st.integers(0, 2**31 - 1))
def test_penalty_nonnegative(seed):
    r = np.random.default_rng(seed)
    params = init_gan(GanConfig.toy(), seed=seed % 1000)
    assert grad_penalty(params, r.normal(scale=3.0, size=(4, 2))) >= 0.0


@pytest.mark.parametrize("seed", range(5))
def test_linear_critic_penalty(seed):
    p, w = linear_critic(init_gan(GanConfig.toy(embed_dim=6), seed=seed))
    e = np.random.default_rng(seed).normal(size=(8, 6))
    gp = grad_penalty(p, e, penalty=10.0)
    assert gp == pytest.approx(10.0 * np.sum(w * w), rel=1e-3)


def test_interpolate_endpoints(rng):
    a, b = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    assert np.array_equal(interpolate(a, b, np.ones(3)), a)
    assert np.array_equal(interpolate(a, b, np.zeros(3)), b)


def test_loss_errors(toy_params):
    with pytest.raises(EmptyBatch):
        wganqc_losses(np.zeros((0, 2)), np.zeros((0, 4)), toy_params)
    with pytest.raises(ShapeMismatch):
        wganqc_losses(np.zeros((2, 2)), np.zeros((3, 4)), toy_params)


# -- finite differences and training -------------------------------------------

def test_flat_params_roundtrip(toy_params):
    flat = FlatParams(toy_params)
    theta = flat.pack(toy_params)
    back = flat.unpack(theta)
    assert all(np.array_equal(back[k], toy_params[k]) for k in toy_params)
    gi, ci = flat.indices(GEN), flat.indices(CRITIC)
    assert len(np.intersect1d(gi, ci)) == 0 and len(gi) + len(ci) == theta.size


def test_fd_gradient_on_quadratic():
    a = np.array([1.0, -2.0, 0.5])

    def loss(stack):
        return np.sum((stack - a) ** 2, axis=-1)

    theta = np.zeros(3)
    g = fd_gradient(loss, theta, np.arange(3))
    assert np.allclose(g, -2 * a, atol=1e-8)


def test_train_toy_short_run_is_deterministic():
    cfg = GanConfig.toy()
    a, ta = train_toy(cfg, gaussian_target, steps=2, seed=1, batch=8)
    b, tb = train_toy(cfg, gaussian_target, steps=2, seed=1, batch=8)
    assert a.equals(b)
    assert np.array_equal(ta.as_array(), tb.as_array())
    assert ta.as_array().shape == (2, 3)
    assert not a.equals(init_gan(cfg, 1))


def test_train_toy_budget():
    with pytest.raises(BudgetExceeded):
        train_toy(GanConfig.toy(), gaussian_target, steps=50, batch=8, budget_s=0.0)


# -- rejection sampling -------------------------------------------------------

def test_sampler_respects_threshold(rng):
    params = init_gan(GanConfig.toy(embed_dim=8), seed=0)
    sources = rng.normal(size=(4, 8))
    emb, rejected = sample_pseudo_speaker(params, sources, seed=2)
    assert all(cosine_similarity(emb.values, s) < 0.65 for s in sources)
    assert rejected >= 0
    again, _ = sample_pseudo_speaker(params, sources, seed=2)
    assert np.array_equal(again.values, emb.values)


def test_sampler_exhausts(rng):
    params = init_gan(GanConfig.toy(embed_dim=8), seed=0)
    # no cosine lies below -1, so every draw is rejected
    with pytest.raises(ExhaustedTries):
        sample_pseudo_speaker(params, rng.normal(size=(2, 8)), threshold=-1.0, max_tries=5)
