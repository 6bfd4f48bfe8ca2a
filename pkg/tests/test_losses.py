import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from trajdistill import losses
from trajdistill.errors import NumericError, ParameterError, ShapeError
from trajdistill.losses import FeatureBank, LossWeights
from trajdistill.schedule import adaptive_weight
from trajdistill.verify import gradient_errors

pairs = st.integers(1, 30).flatmap(
    lambda n: st.tuples(arrays(np.float64, n, elements=st.floats(-5, 5)), arrays(np.float64, n, elements=st.floats(-5, 5)))
)


def mse_loop(a, b):
    return sum((float(x) - float(y)) ** 2 for x, y in zip(a.ravel(), b.ravel())) / a.size


def test_weights_validation():
    with pytest.raises(ParameterError):
        LossWeights(lambda_pix=-1)
    with pytest.raises(ParameterError):
        LossWeights(lambda_per=float("nan"))


def test_eps_loss_examples(rng):
    a = rng.standard_normal((3, 4))
    assert losses.eps_loss(a, a) == 0
    assert losses.eps_loss(a, a + 1, LossWeights(1, 1, 1)) == pytest.approx(1.0, rel=1e-15)
    b = rng.standard_normal((3, 4))
    assert losses.eps_loss(a, b) == pytest.approx(mse_loop(a, b), rel=1e-12)
    with pytest.raises(ShapeError):
        losses.eps_loss(a, b[:2])


def test_distill_loss_examples(sched, rng):
    x = rng.random((2, 4))
    assert losses.distill_loss(x, x, np.array([1, 500]), sched) == 0
    y = rng.random((2, 4))
    assert losses.distill_loss(x, y, 512, sched) == pytest.approx(mse_loop(x, y), rel=1e-12)
    ab = np.cumprod(1 - np.linspace(1e-4, 2e-2, 512))
    lam = ab[4] / (1 - ab[4])
    assert losses.distill_loss(x, x + 1, 5, sched) == pytest.approx(lam, rel=1e-12)
    per_item = losses.distill_loss(x, y, np.array([5, 512]), sched)
    expect = (adaptive_weight(sched, 5) * mse_loop(x[0], y[0]) + mse_loop(x[1], y[1])) / 2
    assert per_item == pytest.approx(expect, rel=1e-12)


def test_pixel_loss_examples(rng):
    a, b = rng.random((3, 3)), rng.random((3, 3))
    assert losses.pixel_loss(a, a) == 0
    assert losses.pixel_loss(a, b, LossWeights(lambda_pix=0)) == 0
    assert losses.pixel_loss(a, b) == pytest.approx(mse_loop(a, b), rel=1e-12)


def test_perceptual_examples(rng):
    bank = FeatureBank(seed=3)
    a, b = rng.random((2, 3, 8, 8)), rng.random((2, 3, 8, 8))
    assert losses.perceptual_loss(a, a, bank) == 0
    ident = FeatureBank.identity()
    w = LossWeights(lambda_per=1.0)
    # identity features at one scale are |x|; on [0,1] images that is x itself
    assert losses.perceptual_loss(a, b, ident, w) == pytest.approx(losses.mse(a, b), rel=1e-12)
    v1 = losses.perceptual_loss(a, b, FeatureBank(seed=3))
    v2 = losses.perceptual_loss(a, b, FeatureBank(seed=3))
    assert v1 == v2 and v1 > 0


def test_feature_bank_shape():
    bank = FeatureBank()
    assert bank.filters.shape == (16, 5, 5)
    f = bank.features(np.zeros((2, 3, 8, 8)))
    assert f.size == 2 * 3 * 16 * (8 * 8 + 4 * 4)  # two scales


def test_total_loss():
    assert losses.total_loss({"a": 0.0, "b": 0.0}) == 0
    assert losses.total_loss([1.0, 2.0, 3.0]) == 6.0
    with pytest.raises(NumericError) as exc:
        losses.total_loss({"L_pix": 1.0, "L_per": float("inf")})
    assert exc.value.term == "L_per"


@given(pairs)
def test_losses_nonnegative_and_zero_iff_equal(ab):
    a, b = ab
    for f in (losses.eps_loss, losses.pixel_loss):
        v = f(a, b)
        assert v >= 0
        assert (v == 0) == bool(np.array_equal(a, b)) or np.max(np.abs(a - b)) < 1e-150


def test_gradients_through_net():
    errs = gradient_errors(probes=50, seed=1)
    assert set(errs) == {"eps", "distill", "pixel", "perceptual"}
    assert max(errs.values()) < 1e-4, errs


def test_total_gradient_is_sum_of_terms(sched):
    from trajdistill.score import MicroNet, NetScore
    from trajdistill.train import student_objective

    rng = np.random.default_rng(2)
    shape = (3, 6, 6)
    net = MicroNet(shape, hidden=(10,), emb_dim=4)
    net.params = rng.standard_normal(net.n_params) * 0.3
    model = NetScore(net, sched, "edm")
    bank = FeatureBank(n_filters=3, seed=0)
    args = dict(
        x_t=rng.standard_normal((3, *shape)), y=rng.random((3, *shape)), t=np.array([512, 256, 100]),
        s=np.array([256, 0, 50]), x0=rng.random((3, *shape)), x_target=rng.random((3, *shape)),
    )
    total = student_objective(model, **args, sched=sched, w=LossWeights(1, 1, 0.5), bank=bank)
    base = student_objective(model, **args, sched=sched, w=LossWeights(1, 0, 0), bank=bank)
    pix = student_objective(model, **args, sched=sched, w=LossWeights(1, 1, 0), bank=bank)
    per = student_objective(model, **args, sched=sched, w=LossWeights(1, 0, 0.5), bank=bank)
    np.testing.assert_allclose(total[2], pix[2] + per[2] - base[2], rtol=1e-9, atol=1e-12)
    # finite-difference check of the total
    p = model.params.copy()
    g = total[2]
    for i in rng.choice(p.size, 20, replace=False):
        hi, lo = p.copy(), p.copy()
        hi[i] += 1e-5
        lo[i] -= 1e-5
        model.params = hi
        f_hi = student_objective(model, **args, sched=sched, w=LossWeights(1, 1, 0.5), bank=bank)[1]
        model.params = lo
        f_lo = student_objective(model, **args, sched=sched, w=LossWeights(1, 1, 0.5), bank=bank)[1]
        num = (f_hi - f_lo) / 2e-5
        assert abs(g[i] - num) / max(1e-8, abs(num)) < 1e-4
    model.params = p
