import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from diffret.denoiser import init_denoiser
from diffret.diffusion import (
    DiffusionSchedule,
    ddim_step,
    generate,
    generate_batch,
    keyed_normal,
    make_schedule,
    q_sample,
    q_step,
    run_reverse_chain,
)
from diffret.encoders import Embedding
from diffret.errors import ConfigError, ContractError, NumericError


def test_two_step_schedule_by_hand():
    s = make_schedule(2, 0.1, 0.2)
    np.testing.assert_allclose(s.beta, [0.1, 0.2])
    np.testing.assert_allclose(s.alpha_bar, [0.9, 0.72], atol=1e-15)


def test_single_step_schedule():
    s = make_schedule(1, 0.3, 0.3)
    assert s.alpha_bar.tolist() == [pytest.approx(0.7)]


def test_default_fifty_step_schedule():
    s = make_schedule(50)
    assert s.K == 50
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert s.alpha_bar[-1] > 0


@given(st.integers(1, 300), st.floats(1e-5, 0.5), st.floats(0.0, 0.49))
def test_schedule_invariants(K, start, extra):
    s = make_schedule(K, start, start + extra)
    assert np.all((s.beta > 0) & (s.beta < 1))
    assert np.all(np.diff(s.beta) >= 0)
    assert np.all(np.diff(s.alpha_bar) < 0) and s.alpha_bar[-1] > 0
    np.testing.assert_allclose(s.alpha_bar, np.cumprod(s.alpha), rtol=0, atol=1e-12)


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)])
def test_invalid_schedule(args):
    with pytest.raises(ConfigError):
        make_schedule(*args)


def test_q_sample_noise_free():
    s = make_schedule(2, 0.1, 0.2)
    out = q_sample(np.array([1.0, 0.0]), 2, np.zeros(2), s)
    np.testing.assert_allclose(out.values, [math.sqrt(0.72), 0.0])
    np.testing.assert_allclose(out.values, [0.8485, 0.0], atol=1e-4)
    assert out.noise_level == 2


def test_q_sample_full_noise_limit():
    s = make_schedule(200, 0.2, 0.4)
    eps = np.array([0.3, -1.2, 0.7])
    np.testing.assert_allclose(q_sample(np.array([1.0, 0.0, 0.0]), 200, eps, s).values, eps, atol=1e-12)


def test_q_sample_level_out_of_range():
    s = make_schedule(5)
    for k in (0, 6):
        with pytest.raises(ContractError):
            q_sample(np.zeros(2), k, np.zeros(2), s)


def test_closed_form_matches_composed_single_steps():
    s = make_schedule(50, 0.002, 0.4)
    rng = np.random.default_rng(7)
    n, k = 100_000, 12
    x0 = np.array([1.0, 0.0, 0.0])
    closed = q_sample(np.broadcast_to(x0, (n, 3)), k, rng.standard_normal((n, 3)), s).values
    chain = np.broadcast_to(x0, (n, 3)).copy()
    for level in range(1, k + 1):
        chain = q_step(chain, level, rng.standard_normal((n, 3)), s)
    abar = s.alpha_bar[k - 1]
    mean, var = math.sqrt(abar) * x0, 1 - abar
    se_mean = math.sqrt(var / n)
    se_var = var * math.sqrt(2 / (n - 1))
    for sample in (closed, chain):
        assert np.all(np.abs(sample.mean(0) - mean) < 3 * se_mean)
        assert np.all(np.abs(sample.var(0) - var) < 3 * se_var)


def test_ddim_noise_free_fixed_point():
    s = make_schedule(10, 0.01, 0.2)
    x0_hat = np.array([0.7, 0.2, 0.1])
    x_k = math.sqrt(s.abar(6)) * x0_hat
    np.testing.assert_allclose(ddim_step(x_k, x0_hat, 6, s).values, math.sqrt(s.abar(5)) * x0_hat, atol=1e-15)


def test_ddim_terminal_step_returns_estimate():
    s = make_schedule(10, 0.01, 0.2)
    x0_hat = np.array([0.25, 0.5, 0.25])
    out = ddim_step(np.array([3.0, -1.0, 0.2]), x0_hat, 1, s)
    np.testing.assert_array_equal(out.values, x0_hat)
    assert out.noise_level == 0


def test_ddim_single_step_by_hand():
    # eps_hat = (x2 - sqrt(.72) x0_hat) / sqrt(.28); x1 = sqrt(.9) x0_hat + sqrt(.1) eps_hat
    s = make_schedule(2, 0.1, 0.2)
    out = ddim_step(np.array([0.9, 0.1]), np.array([1.0, 0.0]), 2, s)
    np.testing.assert_allclose(out.values, [0.979443619413881, 0.05976143046671968], atol=1e-12)


def test_ddim_rejects_noise_at_unit_alpha_bar():
    s = DiffusionSchedule(np.array([0.0]), np.array([1.0]), np.array([1.0]))
    with pytest.raises(NumericError):
        ddim_step(np.array([1.0, 0.5]), np.array([1.0, 0.0]), 1, s)
    with pytest.raises(ContractError):
        ddim_step(np.zeros(2), np.zeros(2), 2, s)


def test_reverse_chain_with_oracle_estimate_ends_at_x0():
    s = make_schedule(50, 0.002, 0.4)
    x0 = np.eye(6)[[2, 5]]
    x_K = q_sample(x0, 50, np.random.default_rng(0).standard_normal(x0.shape), s).values
    final, traj = run_reverse_chain(lambda x, k: x0, x_K, s)
    np.testing.assert_array_equal(traj[-1][1], x0)
    np.testing.assert_array_equal(final, x0)
    assert [k for k, _, _ in traj] == list(range(50, -1, -1))


def test_reverse_chain_with_stride():
    s = make_schedule(50, 0.002, 0.4)
    _, traj = run_reverse_chain(lambda x, k: np.full_like(x, 0.5), np.zeros((1, 2)), s, stride=10)
    assert [k for k, _, _ in traj] == [50, 40, 30, 20, 10, 0]


def _untrained(D=8, seed=0):
    return init_denoiser(D, "t2a", np.random.default_rng(seed))


def test_generate_untrained_is_a_distribution():
    rng = np.random.default_rng(4)
    q = Embedding(rng.normal(size=8), "text", 3)
    cands = [Embedding(v, "audio", i) for i, v in enumerate(rng.normal(size=(5, 8)))]
    out = generate(q, cands, _untrained(), make_schedule(20, 0.005, 0.5), seed=1)
    assert out.noise_level == 0 and out.values.shape == (5,)
    assert np.all(out.values >= 0) and abs(out.values.sum() - 1) < 1e-9


def test_generate_is_deterministic():
    rng = np.random.default_rng(5)
    q, c = rng.normal(size=(3, 8)), rng.normal(size=(6, 8))
    s = make_schedule(20, 0.005, 0.5)
    a = generate_batch(q, c, _untrained(), s, seed=9)
    b = generate_batch(q, c, _untrained(), s, seed=9)
    for (ka, xa, pa), (kb, xb, pb) in zip(a[1], b[1]):
        assert ka == kb and xa.tobytes() == xb.tobytes() and pa.tobytes() == pb.tobytes()
    other = generate_batch(q, c, _untrained(), s, seed=10)
    assert other[0].tobytes() != a[0].tobytes()


def test_generate_rejects_empty_candidates():
    with pytest.raises(ContractError):
        generate(np.zeros(8), [], _untrained(), make_schedule(5), seed=0)


def test_keyed_normal_statistics_and_keying():
    z = keyed_normal(3, np.arange(300), np.arange(300))
    assert abs(z.mean()) < 3 / 300
    assert abs(z.var() - 1) < 3 * math.sqrt(2 / 90_000)
    perm = np.random.default_rng(0).permutation(300)
    np.testing.assert_array_equal(keyed_normal(3, [7], perm), keyed_normal(3, [7], np.arange(300))[:, perm])
    assert not np.array_equal(keyed_normal(3, [7], [1, 2]), keyed_normal(4, [7], [1, 2]))
