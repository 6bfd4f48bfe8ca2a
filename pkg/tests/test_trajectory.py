import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from trajdistill.errors import DegeneratePairError, OrderingError, ParameterError, ShapeError
from trajdistill.schedule import linear_beta_schedule
from trajdistill.score import ConstantScore, CountingScore, GaussianOracle, MicroNet
from trajdistill.trajectory import (
    TimeTriple,
    decode,
    extract_clean,
    forward_diffuse,
    preliminary_variance,
    refine,
    refined_direct,
    sample,
    second_order_with_intermediate,
    teacher_second_order,
    uniform_grid,
)

SMALL = linear_beta_schedule(32)


def triples(T):
    return st.integers(1, T).flatmap(
        lambda t: st.integers(0, t - 1).flatmap(lambda u: st.tuples(st.just(t), st.just(u), st.integers(0, u)))
    )


# ---------------------------------------------------------------- forward process


def test_forward_diffuse_examples(sched, rng):
    x0, e = rng.random((3, 4)), rng.standard_normal((3, 4))
    assert np.array_equal(forward_diffuse(x0, 0, e, sched), x0)
    np.testing.assert_array_equal(forward_diffuse(x0, 9, np.zeros_like(x0), sched), sched.signal(9) * x0)
    t = 200
    back = (forward_diffuse(x0, t, e, sched) - sched.signal(t) * x0) / sched.noise(t)
    np.testing.assert_allclose(back, e, atol=1e-12)
    with pytest.raises(ShapeError):
        forward_diffuse(x0, 3, e[:2], sched)


def test_preliminary_variance_is_separate(sched):
    ab = sched.cumulative(100)
    assert preliminary_variance(sched, 100) == pytest.approx(1 - ab**2)
    assert preliminary_variance(sched, 100) != pytest.approx(sched.noise(100) ** 2)


# ---------------------------------------------------------------- decoder


def test_decode_zero_length_jump(sched, rng):
    x = rng.standard_normal((2, 3))
    score = ConstantScore(rng.standard_normal((2, 3)))
    assert np.array_equal(decode(score, x, None, 50, 50, sched, allow_equal=True), x)
    with pytest.raises(OrderingError):
        decode(score, x, None, 50, 50, sched)
    with pytest.raises(OrderingError):
        decode(score, x, None, 10, 20, sched)


def test_decode_point_mass_to_zero(sched, rng):
    mu = rng.random((3, 3))
    oracle = GaussianOracle(mu, 0.0, sched)
    for t in (1, 17, 256, 512):
        x_t = forward_diffuse(mu, t, rng.standard_normal(mu.shape), sched)
        np.testing.assert_allclose(decode(oracle, x_t, None, t, 0, sched), mu, atol=1e-10)


def test_decode_constant_score_identity(sched, rng):
    e = rng.standard_normal((4,))
    x_t = rng.standard_normal(4)
    t, s = 300, 120
    x0_hat = (x_t - sched.noise(t) * e) / sched.signal(t)
    expect = sched.signal(s) * x0_hat + sched.noise(s) * e
    np.testing.assert_allclose(decode(ConstantScore(e), x_t, None, t, s, sched), expect, atol=1e-12)


@given(triples(32))
def test_decoder_semigroup_under_constant_score(tus):
    t, u, s = tus
    rng = np.random.default_rng(t * 1000 + u * 32 + s)
    score = ConstantScore(rng.standard_normal(5))
    x = rng.standard_normal(5)
    two = decode(score, decode(score, x, None, t, u, SMALL), None, u, s, SMALL, allow_equal=True)
    assert np.max(np.abs(two - decode(score, x, None, t, s, SMALL))) <= 1e-10


# ---------------------------------------------------------------- second order


def test_time_triple_validation():
    TimeTriple(5, 3, 3)
    for bad in ((5, 5, 1), (5, 2, 3), (5, 3, -1)):
        with pytest.raises(OrderingError):
            TimeTriple(*bad)
    assert TimeTriple.midpoint(9, 2).u == 5


def test_constant_collapse_exhaustive(rng):
    score = ConstantScore(rng.standard_normal(3))
    worst = 0.0
    for t in range(1, 33):
        for u in range(t):
            for s in range(u + 1):
                x = rng.standard_normal(3)
                tri = TimeTriple(t, u, s)
                worst = max(worst, np.max(np.abs(teacher_second_order(score, x, None, tri, SMALL) - decode(score, x, None, t, s, SMALL))))
    assert worst < 1e-10


def test_u_equals_s_boundary(sched, rng):
    oracle = GaussianOracle(rng.random(4), 0.1, sched)
    x = rng.standard_normal(4)
    np.testing.assert_array_equal(
        teacher_second_order(oracle, x, None, TimeTriple(80, 30, 30), sched), decode(oracle, x, None, 80, 30, sched)
    )


def test_second_order_term_by_term(sched, rng):
    mu, s2 = rng.random(6), 0.07
    t, u, s = 400, 230, 60
    x = rng.standard_normal(6)
    a = {k: np.sqrt(np.prod(1 - np.linspace(1e-4, 2e-2, 512)[:k])) for k in (t, u, s)}
    sg = {k: np.sqrt(1 - a[k] ** 2) for k in a}

    def eps(x, k):
        return sg[k] * (x - a[k] * mu) / (a[k] ** 2 * s2 + sg[k] ** 2)

    x_u = a[u] / a[t] * x + (sg[u] - a[u] / a[t] * sg[t]) * eps(x, t)
    x_s = a[s] / a[u] * x_u + (sg[s] - a[s] / a[u] * sg[u]) * eps(x_u, u)
    got = teacher_second_order(GaussianOracle(mu, s2, sched), x, None, TimeTriple(t, u, s), sched)
    np.testing.assert_allclose(got, x_s, rtol=1e-12, atol=1e-12)


def test_second_order_uses_two_evaluations(sched, rng):
    c = CountingScore(ConstantScore(0.0))
    second_order_with_intermediate(c, rng.random(3), None, TimeTriple(9, 5, 2), sched)
    assert c.evals == 2


# ---------------------------------------------------------------- refinement


def test_refine_examples(rng):
    a, b = rng.random(5), rng.random(5)
    assert np.array_equal(refine(a, b, 1.0), a)
    np.testing.assert_allclose(refine(a, b, 0.8), 0.8 * a + 0.2 * b, rtol=1e-15)
    for bad in (0.0, -0.2, 1.01):
        with pytest.raises(ParameterError):
            refine(a, b, bad)
    with pytest.raises(ShapeError):
        refine(a, b[:3], 0.5)


def test_refined_direct_at_omega_one_is_second_order(sched, rng):
    oracle = GaussianOracle(rng.random(4), 0.2, sched)
    x, tri = rng.standard_normal(4), TimeTriple(300, 150, 10)
    np.testing.assert_allclose(
        refined_direct(oracle, x, None, tri, rng.standard_normal(4), 1.0, sched),
        teacher_second_order(oracle, x, None, tri, sched), rtol=1e-12, atol=1e-12,
    )


def test_refined_direct_with_first_eval_as_shift(sched, rng):
    # eps_tilde = eps(x_t, t) folds the last term into a single first-order coefficient
    oracle = GaussianOracle(rng.random(4), 0.2, sched)
    x, tri, w = rng.standard_normal(4), TimeTriple(300, 150, 10), 0.6
    e_t = oracle(x, None, 300)
    e_u = oracle(decode(oracle, x, None, 300, 150, sched), None, 150)
    a, sg = sched.signal, sched.noise
    expect = (
        a(10) / a(300) * x + sg(10) * e_u + w * a(10) / a(150) * sg(150) * (e_t - e_u) - a(10) / a(300) * sg(300) * e_t
    )
    np.testing.assert_allclose(refined_direct(oracle, x, None, tri, e_t, w, sched), expect, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("kind", ["oracle", "net"])
def test_refinement_identity_random(sched, kind):
    from trajdistill import ratr

    rng = np.random.default_rng(11)
    shape = (2, 3, 3)
    if kind == "oracle":
        score = GaussianOracle(rng.random(shape), 0.1, sched)
    else:
        score = MicroNet(shape, hidden=(10,), emb_dim=4)
        score.params = rng.standard_normal(score.n_params) * 0.3
    for _ in range(200):
        t = int(rng.integers(1, 513))
        tri = TimeTriple.midpoint(t, int(rng.integers(0, t)))
        x, y, x0t = rng.uniform(-3, 3, shape), rng.random(shape), rng.random(shape)
        w = rng.uniform(0.01, 1.0)
        x_second, x_u = second_order_with_intermediate(score, x, y, tri, sched)
        lhs = refine(x_second, ratr.refinement_anchor(score, x_u, y, tri.u, tri.s, x0t, sched), w)
        rhs = refined_direct(score, x, y, tri, ratr.residual_noise(x, x0t, t, sched), w, sched)
        assert np.all(np.abs(lhs - rhs) <= 1e-10 * (1 + np.abs(rhs)))


# ---------------------------------------------------------------- extraction


def test_extract_from_point_mass_decode(sched, rng):
    mu = rng.random(5)
    oracle = GaussianOracle(mu, 0.0, sched)
    for t, s in ((512, 256), (100, 3), (40, 0)):
        x_t = forward_diffuse(mu, t, rng.standard_normal(5), sched)
        np.testing.assert_allclose(extract_clean(decode(oracle, x_t, None, t, s, sched), x_t, t, s, sched), mu, atol=1e-8)


def test_extract_constructed_fixed_point(sched, rng):
    c = rng.random(5)
    x_t = rng.standard_normal(5)
    t, s = 300, 100
    r = sched.noise(s) / sched.noise(t)
    x_traj = sched.signal(s) * c + r * (x_t - sched.signal(t) * c)
    np.testing.assert_allclose(extract_clean(x_traj, x_t, t, s, sched), c, atol=1e-12)


def test_extract_equals_model_clean_estimate(sched, rng):
    net = MicroNet((4,), hidden=(6,), emb_dim=4)
    net.params = rng.standard_normal(net.n_params)
    x_t, y = rng.standard_normal(4), rng.random(4)
    for t, s in ((512, 0), (400, 200), (37, 12)):
        x0_hat = (x_t - sched.noise(t) * net(x_t, y, t)) / sched.signal(t)
        got = extract_clean(decode(net, x_t, y, t, s, sched), x_t, t, s, sched)
        np.testing.assert_allclose(got, x0_hat, rtol=1e-10, atol=1e-10)


def test_extract_errors(sched, rng):
    x = rng.random(3)
    with pytest.raises(OrderingError):
        extract_clean(x, x, 0, 0, sched)
    with pytest.raises(DegeneratePairError) as exc:
        extract_clean(x, x, 50, 50, sched)  # s == t: denominator is exactly zero
    assert exc.value.t == 50 and exc.value.s == 50


def test_no_nan_in_range(sched, rng):
    oracle = GaussianOracle(rng.random(8), 0.1, sched)
    for _ in range(200):
        t = int(rng.integers(1, 513))
        tri = TimeTriple.midpoint(t, int(rng.integers(0, t)))
        x = rng.uniform(-10, 10, 8)
        assert np.all(np.isfinite(refine(teacher_second_order(oracle, x, None, tri, sched), x, 0.5)))
        assert np.all(np.isfinite(extract_clean(decode(oracle, x, None, t, tri.s, sched), x, t, tri.s, sched)))


# ---------------------------------------------------------------- samplers


def test_uniform_grid():
    assert list(uniform_grid(512, 2)) == [512, 256, 0]
    assert list(uniform_grid(10, 3)) == [10, 7, 3, 0]
    with pytest.raises(ParameterError):
        uniform_grid(10, 0)
    with pytest.raises(ParameterError):
        uniform_grid(10, 11)


@pytest.mark.parametrize("K", [1, 2, 4, 8, 16])
def test_point_mass_sampling_is_exact(sched, K):
    mu = np.random.default_rng(K).uniform(0.05, 0.95, (3, 4, 4))
    out = sample(GaussianOracle(mu, 0.0, sched), np.zeros_like(mu), K, sched, seed=K)
    assert np.max(np.abs(out - mu)) < 1e-8


def test_full_grid_point_mass_is_stable():
    s = linear_beta_schedule(64)
    mu = np.array([0.3, 0.6])
    out = sample(GaussianOracle(mu, 0.0, s), np.zeros(2), 64, s)
    assert np.max(np.abs(out - mu)) < 1e-10


def test_sampling_determinism_and_batch_consistency(sched, rng):
    oracle = GaussianOracle(rng.random((1, 3, 3)), 0.2, sched)
    y = rng.random((3, 1, 3, 3))
    for mode in ("deterministic", "ancestral"):
        a = sample(oracle, y, 4, sched, mode=mode, seed=5)
        b = sample(oracle, y, 4, sched, mode=mode, seed=5)
        assert np.array_equal(a, b)
        assert a.min() >= 0 and a.max() <= 1
    single = sample(oracle, y[1], 4, sched, seed=5)
    batch = sample(oracle, y, 4, sched, seed=5)
    assert not np.array_equal(batch[0], batch[1])
    assert single.shape == (1, 3, 3)


def test_ancestral_point_mass_ends_at_mu(sched):
    mu = np.array([0.25, 0.5, 0.75])
    out = sample(GaussianOracle(mu, 0.0, sched), np.zeros(3), 8, sched, mode="ancestral", seed=2)
    np.testing.assert_allclose(out, mu, atol=1e-8)


def test_sample_errors(sched):
    o = ConstantScore(0.0)
    with pytest.raises(ParameterError):
        sample(o, np.zeros(2), 0, sched)
    with pytest.raises(ParameterError):
        sample(o, np.zeros(2), 2, sched, mode="heun")
    with pytest.raises(ParameterError):
        sample(o, np.zeros(2), 2, sched, grid=[512, 300, 10])


def test_trace_files(tmp_path, sched):
    mu = np.full((3, 4, 4), 0.5)
    sample(GaussianOracle(mu, 0.0, sched), mu, 3, sched, trace_dir=str(tmp_path))
    assert sorted(p.name for p in tmp_path.iterdir()) == [f"step_{k:03d}.ppm" for k in range(4)]


class _NoZero:
    def __init__(self, inner):
        self.inner = inner

    def __call__(self, x_t, y, t):
        assert np.all(np.asarray(t) >= 1), "eps queried at t = 0"
        return self.inner(x_t, y, t)


def test_last_grid_pair_never_queries_t_zero(rng):
    # the pair (1, 0) has u = s = 0; the second jump has zero length
    score = _NoZero(GaussianOracle(rng.random(3), 0.1, SMALL))
    x = rng.standard_normal((2, 3))
    triple = TimeTriple.midpoint(np.array([1, 5]), np.array([0, 0]))
    x2, x_u = second_order_with_intermediate(score, x, None, triple, SMALL)
    np.testing.assert_array_equal(x2[0], x_u[0])
    np.testing.assert_array_equal(x2[0], decode(score.inner, x[:1], None, 1, 0, SMALL)[0])
    solo = teacher_second_order(score, x[:1], None, TimeTriple.midpoint(1, 0), SMALL)
    np.testing.assert_array_equal(solo, x2[:1])
