import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from causalpush import cai
from causalpush.cai import CaiConfig, CausalActionInfluence, cai_score, gaussian_kl, kl_to_mixture, mixture_cai
from causalpush.dynmodel import ResidualDynamics

# -log((1 + e^-0.5) / 2), evaluated independently with mpmath to 16 digits
K2_WORKED = 0.21907019637983863


def hl_state(p_r=(0.5, 0.0), p_o=(1.0, 0.0), v_r=(0.0, 0.0, 0.0)):
    s = np.zeros(12)
    s[0:2], s[3:5], s[6:9] = p_r, p_o, v_r
    return s[None, :]


def test_gaussian_kl_closed_form():
    assert gaussian_kl([0.3, -0.2], [0.3, -0.2], 1.0) == 0.0
    assert gaussian_kl([1.0, 0.0], [0.0, 0.0], 1.0) == pytest.approx(0.5, abs=1e-12)
    assert gaussian_kl([2.0, 0.0], [0.0, 0.0], 2.0) == pytest.approx(0.5, abs=1e-12)
    with pytest.raises(ValueError):
        gaussian_kl([0, 0], [1, 1], 0.0)


def test_kl_to_mixture_hand_values():
    assert kl_to_mixture([0.4, 0.1], [[0.4, 0.1]] * 5, 1.0) == pytest.approx(0.0, abs=1e-12)
    assert kl_to_mixture([0.0, 0.0], [[0.0, 0.0], [0.0, 0.0]], 1.0) == pytest.approx(0.0, abs=1e-12)
    assert kl_to_mixture([0.0, 0.0], [[0.0, 0.0], [1.0, 0.0]], 1.0) == pytest.approx(K2_WORKED, abs=1e-9)


def test_worked_value_oracle():
    import mpmath

    assert float(-mpmath.log((1 + mpmath.e ** -0.5) / 2)) == pytest.approx(K2_WORKED, abs=1e-15)


def _true_kl_grid(mu_i, mus, sigma, n=601, pad=8.0):
    lo = np.min(mus, axis=0) - pad * sigma
    hi = np.max(mus, axis=0) + pad * sigma
    xs = np.linspace(lo[0], hi[0], n)
    ys = np.linspace(lo[1], hi[1], n)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    pts = np.stack([X, Y], -1)

    def logpdf(mu):
        d = pts - mu
        return -np.sum(d * d, -1) / (2 * sigma ** 2) - math.log(2 * math.pi * sigma ** 2)

    lp = logpdf(mu_i)
    comps = np.stack([logpdf(m) for m in mus])
    lq = np.logaddexp.reduce(comps, axis=0) - math.log(len(mus))
    dA = (xs[1] - xs[0]) * (ys[1] - ys[0])
    return float(np.sum(np.exp(lp) * (lp - lq)) * dA)


def test_grid_oracle_agrees_with_closed_form_single_component():
    mus = np.array([[0.3, -0.2]])
    assert _true_kl_grid(np.array([1.0, 0.5]), mus, 0.8) == pytest.approx(
        gaussian_kl([1.0, 0.5], mus[0], 0.8), abs=1e-8)


def test_kl_to_mixture_sandwiched_by_true_kl_and_jensen_bound():
    # for a component of the mixture the variational value sits between the
    # exact KL and the average pairwise KL
    rng = np.random.default_rng(0)
    for _ in range(50):
        sigma = rng.uniform(0.3, 1.5)
        mus = rng.uniform(-1.5, 1.5, (2, 2))
        mu_i = mus[rng.integers(2)]
        approx = kl_to_mixture(mu_i, mus, sigma)
        true = _true_kl_grid(mu_i, mus, sigma)
        jensen = float(np.mean(gaussian_kl(mu_i, mus, sigma)))
        assert true - 1e-9 <= approx <= jensen + 1e-12


def test_kl_to_mixture_is_tight_at_influence_scale():
    # CAI means differ by centimetres; there the overshoot is far below 0.05 nats
    rng = np.random.default_rng(1)
    for _ in range(20):
        mus = rng.uniform(-0.1, 0.1, (2, 2))
        approx, true = kl_to_mixture(mus[0], mus, 1.0), _true_kl_grid(mus[0], mus, 1.0)
        assert 0.0 <= approx - true < 5e-3


def test_mixture_cai_matches_direct_average():
    rng = np.random.default_rng(1)
    mus = rng.normal(0, 0.3, (7, 16, 2))
    direct = np.mean([[kl_to_mixture(mus[b, i], mus[b], 1.0) for i in range(16)] for b in range(7)], axis=1)
    np.testing.assert_allclose(mixture_cai(mus, 1.0), direct, rtol=1e-9, atol=1e-14)


def test_sampled_actions_box():
    cfg = CaiConfig()
    rng = np.random.default_rng(0)
    a = cai.sample_achievable_actions(np.zeros(3), cfg, rng)
    assert a.shape == (1, 64, 3)
    assert np.all(np.abs(a) <= np.array([0.3, 0.3, 0.4]))
    a = cai.sample_achievable_actions(np.array([1.0, 0.0, 0.0]), CaiConfig(n_actions=100000), rng)[0]
    assert a[:, 0].min() >= 0.7 and a[:, 0].max() <= 1.0
    # clipped box centroid: a uniform on [0.7, 1.3] clipped at 1 has mean 0.7 + 0.3 * 0.75
    se = a[:, 0].std() / math.sqrt(a.shape[0])
    assert abs(a[:, 0].mean() - (0.7 + 0.225)) < 3 * se
    assert abs(a[:, 1].mean()) < 3 * a[:, 1].std() / math.sqrt(a.shape[0])


def test_config_validation():
    with pytest.raises(ValueError):
        CaiConfig(n_actions=1)
    with pytest.raises(ValueError):
        CaiConfig(delta_v=(0.3, 0.0, 0.4))


def _prior_model():
    return ResidualDynamics(use_residual=False).initialize()


def test_far_state_scores_exactly_zero():
    s = hl_state(p_r=(0.0, 0.0), p_o=(1.0, 0.0))
    val = cai_score(_prior_model(), s, CaiConfig(), np.random.default_rng(0))
    assert val[0] <= 1e-12


def test_contact_state_scores_positive():
    s = hl_state(p_r=(0.5, 0.0), p_o=(1.0, 0.0))
    val = cai_score(_prior_model(), s, CaiConfig(), np.random.default_rng(0))
    assert val[0] > 1e-4


def test_fresh_residual_model_scores_like_prior():
    s = hl_state()
    a = cai_score(_prior_model(), s, CaiConfig(), np.random.default_rng(3))
    b = cai_score(ResidualDynamics().initialize(), s, CaiConfig(), np.random.default_rng(3))
    np.testing.assert_allclose(a, b, rtol=1e-12)


def test_constant_prediction_gives_zero():
    # no prior and an untrained (zero) residual: prediction is p_o for every action
    m = ResidualDynamics(use_prior=False).initialize()
    assert cai_score(m, hl_state(), CaiConfig(), np.random.default_rng(0))[0] == 0.0


def test_monte_carlo_spread_shrinks_with_k():
    s = hl_state(v_r=(0.2, 0.0, 0.0))
    m = _prior_model()
    stds = []
    for k in (8, 64, 512):
        vals = [cai_score(m, s, CaiConfig(n_actions=k), np.random.default_rng(seed))[0] for seed in range(20)]
        stds.append(np.std(vals))
    assert stds[0] > stds[1] > stds[2]


def test_translation_invariance_with_prior_model():
    s = hl_state(p_r=(0.4, 0.2), p_o=(1.0, 0.0), v_r=(0.3, -0.1, 0.0))
    moved = s.copy()
    moved[:, [0, 3]] += 10.0
    moved[:, [1, 4]] -= 3.0
    m = _prior_model()
    a = cai_score(m, s, CaiConfig(), np.random.default_rng(5))
    b = cai_score(m, moved, CaiConfig(), np.random.default_rng(5))
    np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(
    st.floats(-1.0, 1.0), st.floats(-1.0, 1.0),
    st.floats(-1.0, 1.0), st.floats(-1.0, 1.0), st.floats(-1.0, 1.0),
    st.integers(0, 2 ** 31),
)
def test_score_is_non_negative(dx, dy, vx, vy, wz, seed):
    m = ResidualDynamics(hidden_sizes=(8, 8)).initialize()
    m.params_.flat[:] = np.random.default_rng(seed).normal(0, 0.5, m.params_.flat.size)
    s = hl_state(p_r=(1.0 + dx, dy), v_r=(vx, vy, wz))
    assert cai_score(m, s, CaiConfig(n_actions=16), np.random.default_rng(seed))[0] >= 0.0


def test_transformer_api():
    est = CausalActionInfluence(model=_prior_model(), n_actions=32, random_state=0)
    S = np.vstack([hl_state(), hl_state(p_r=(0.0, 0.0))])
    out = est.fit(S).transform(S)
    assert out.shape == (2, 1)
    assert out[0, 0] > 0 and out[1, 0] == 0.0
    assert est.get_params()["n_actions"] == 32
    with pytest.raises(ValueError):
        est.transform(np.zeros((2, 11)))
    with pytest.raises(ValueError):
        CausalActionInfluence().fit()
