import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stslab import model
from stslab.encoding import (EXACT, ONE_HOT, PosEncoding, RADEMACHER, RipSampler,
                             one_hot_pe, rademacher_matrix, sample_rip_pe)
from stslab.errors import ShapeError
from stslab.model import (FixedPE, ModelParams, Nested, ResamplePerStep, attention,
                          batch_gradients, construct_expressivity, cosine_diagnostics,
                          expressivity_alpha, extract_scalars, fixed_gradients, forward,
                          ground_truth, population_gradients, population_loss, sample_gradients,
                          sample_loss)
from stslab.numerics import RngStream
from stslab.task import Batch, Sample, TaskConfig, assemble, sample_batch, sample_instance
from stslab.verify import attention_fd_error


def aligned(d, T, C, alpha=1.0, kind=ONE_HOT):
    gt = ground_truth(d, T, kind)
    return ModelParams(C * gt.W_star, alpha * gt.V_star)


def s_plus(C, T, q):
    return 1.0 / (q + (T - q) * np.exp(-C))


def chunk_means(fn, n_chunks):
    """Batch-means estimate: returns (mean, standard error) of stacked chunk results."""
    vals = np.stack([fn(k) for k in range(n_chunks)])
    return vals.mean(axis=0), vals.std(axis=0, ddof=1) / np.sqrt(n_chunks)


# --- attention / forward ---------------------------------------------------------

def test_zero_W_gives_uniform_attention(rng):
    s = sample_instance(rng, TaskConfig(7, 2, 3))
    inp = assemble(s, one_hot_pe(7))
    assert np.allclose(attention(ModelParams.zeros(3, 7), inp), 1 / 7, atol=1e-15)


@pytest.mark.parametrize("T,q", [(5, 2), (10, 3), (50, 2)])
def test_one_hot_closed_form_grid(rng, T, q):
    s = sample_instance(rng, TaskConfig(T, q, 2))
    inp = assemble(s, one_hot_pe(T))
    inside = np.zeros(T, dtype=bool)
    inside[list(s.y)] = True
    for C in np.arange(0, 20.5, 0.5):
        a = attention(aligned(2, T, C), inp)
        sp = s_plus(C, T, q)
        assert np.max(np.abs(a[inside] - sp)) <= 1e-12
        assert np.max(np.abs(a[~inside] - (1 - q * sp) / (T - q))) <= 1e-12


def test_centering_does_not_change_one_hot_attention(rng):
    T, d = 9, 2
    s = sample_instance(rng, TaskConfig(T, 3, d))
    inp = assemble(s, one_hot_pe(T))
    P = ModelParams.zeros(d, T)
    P.W[d:, d:] = 3.7 * np.eye(T)
    assert np.allclose(attention(P, inp), attention(aligned(d, T, 3.7), inp), atol=1e-12)


@settings(max_examples=40)
@given(st.integers(0, 2**31), st.floats(0.01, 30))
def test_attention_on_simplex(seed, scale):
    rng = RngStream(seed, "eval")
    s = sample_instance(rng, TaskConfig(8, 2, 3))
    pe = PosEncoding(RADEMACHER, rademacher_matrix(rng, 20, 8))
    P = ModelParams(rng.normal((23, 23)) * scale, rng.normal((3, 23)))
    a = attention(P, assemble(s, pe, rng.normal(3)))
    assert np.all(a >= 0) and abs(a.sum() - 1) <= 1e-12


def test_forward_examples(rng):
    s = sample_instance(rng, TaskConfig(6, 2, 3))
    inp = assemble(s, one_hot_pe(6))
    P = aligned(3, 6, 40.0)
    assert np.allclose(forward(P, inp), s.target, atol=1e-6)
    zeroV = ModelParams(P.W, np.zeros_like(P.V))
    assert np.array_equal(forward(zeroV, inp), np.zeros(3))
    scaled = ModelParams(P.W, 2.5 * P.V)
    assert np.array_equal(forward(scaled, inp), 2.5 * forward(P, inp))


def test_shape_mismatch(rng):
    s = sample_instance(rng, TaskConfig(6, 2, 3))
    with pytest.raises(ShapeError):
        attention(ModelParams.zeros(3, 5), assemble(s, one_hot_pe(6)))


# --- losses -----------------------------------------------------------------------

def test_zero_params_loss_is_half_target_norm(rng):
    b = sample_batch(rng, TaskConfig(10, 2, 4), 200000)
    losses = model.batch_losses(ModelParams.zeros(4, 10), b, one_hot_pe(10))
    assert np.allclose(losses, 0.5 * np.sum(b.target ** 2, axis=1))
    assert abs(losses.mean() - 4 / (2 * 2)) < 5 * losses.std() / np.sqrt(len(losses))


def test_interpolation_loss_zero():
    X = np.ones((2, 4))
    s = Sample(X, (0, 1), np.ones(2))
    P = ModelParams.zeros(2, 4)
    P.V[:, :2] = np.eye(2)
    assert sample_loss(P, s, one_hot_pe(4)) == pytest.approx(0.0, abs=1e-30)
    g = sample_gradients(P, s, one_hot_pe(4))
    assert not g.dW.any() and not g.dV.any()


def test_ground_truth_V_uniform_attention_loss_closed_form():
    # alpha = 1, s_plus = 1/T in the two-scalar loss formula gives 0.8 here.
    T, q, d = 10, 2, 4
    sp = 1 / T
    oracle = d / (2 * (T - q)) * ((T - q) * q * (sp - 1 / q) ** 2 + (1 - q * sp) ** 2)
    assert oracle == pytest.approx(0.8)
    gt = ground_truth(d, T, ONE_HOT)
    P = ModelParams(np.zeros_like(gt.W_star), gt.V_star)
    b = sample_batch(RngStream(2, "eval"), TaskConfig(T, q, d), 10**6)
    assert abs(model.batch_losses(P, b, one_hot_pe(T)).mean() - oracle) <= 0.01


# --- gradients --------------------------------------------------------------------

@pytest.mark.parametrize("kind", [ONE_HOT, RADEMACHER])
def test_gradients_match_finite_differences(kind):
    rng = RngStream(17, "eval")
    for _ in range(8):
        assert attention_fd_error(rng, kind=kind) <= 1e-6


def test_zero_V_gives_zero_dW(rng):
    b = sample_batch(rng, TaskConfig(6, 2, 3), 20)
    P = ModelParams(rng.normal((9, 9)), np.zeros((3, 9)))
    g, _ = fixed_gradients(P, b, one_hot_pe(6), rng.normal((20, 3)))
    assert not g.dW.any()


def test_batch_of_one_equals_sample_gradients(rng):
    s = sample_instance(rng, TaskConfig(6, 2, 3))
    pe = PosEncoding(RADEMACHER, rademacher_matrix(rng, 16, 6))
    P = ModelParams(rng.normal((19, 19)), rng.normal((3, 19)))
    g1 = sample_gradients(P, s, pe)
    g2, _ = batch_gradients(P, Batch(s.X[None], np.array([s.y]), s.target[None]), FixedPE(pe))
    assert np.array_equal(g1.dW, g2.dW) and np.array_equal(g1.dV, g2.dV)


def test_resample_policy_uses_one_encoding(rng):
    cfg = TaskConfig(10, 2, 3)
    sampler = RipSampler(40, 10, 2, 0.1, threshold=0.7)
    b = sample_batch(rng, cfg, 64)
    P = ModelParams(rng.normal((43, 43)) * 0.1, rng.normal((3, 43)))
    g, _ = batch_gradients(P, b, ResamplePerStep(sampler), RngStream(5, "pe"))
    pe = sampler.draw(RngStream(5, "pe"))
    ref, _ = fixed_gradients(P, b, pe)
    assert np.array_equal(g.dW, ref.dW)


def test_nested_estimator(rng):
    cfg = TaskConfig(10, 2, 3)
    sampler = RipSampler(40, 10, 2, 0.1, threshold=0.7)
    b = sample_batch(rng, cfg, 32)
    P = ModelParams(rng.normal((43, 43)) * 0.1, rng.normal((3, 43)))
    g, losses = batch_gradients(P, b, Nested(sampler, 3, 3), RngStream(5, "pe"))
    assert np.all(np.isfinite(g.dW)) and losses.shape == (32,)
    g0, _ = batch_gradients(ModelParams(P.W, 0 * P.V), b, Nested(sampler, 2, 2),
                            RngStream(5, "pe"))
    assert not g0.dW.any()


def test_zero_init_first_step_statistics():
    T, q, d = 10, 2, 3
    cfg = TaskConfig(T, q, d)
    P = ModelParams.zeros(d, T)

    def chunk(k):
        b = sample_batch(RngStream(k, "data"), cfg, 1000)
        g, _ = fixed_gradients(P, b, one_hot_pe(T))
        assert not g.dW.any()
        return g.dV[:, :d]

    m, se = chunk_means(chunk, 100)
    diag = np.eye(d, dtype=bool)
    assert np.all(np.abs(m[diag] + 1 / T) <= 3 * se[diag])
    assert np.all(np.abs(m[~diag]) <= 3 * se[~diag])


def test_aligned_gradient_structure():
    T, q, d = 10, 2, 3
    cfg = TaskConfig(T, q, d)
    P = aligned(d, T, 1.3, 0.6)

    def chunk(k):
        b = sample_batch(RngStream(k, "data"), cfg, 1000)
        g, _ = fixed_gradients(P, b, one_hot_pe(T))
        return np.concatenate([g.dW[:d, d:].ravel(), g.dW[d:, :d].ravel(), g.dV[:, d:].ravel()])

    m, se = chunk_means(chunk, 100)
    assert np.all(np.abs(m) <= 4 * se + 1e-15)


# --- exact population quantities ---------------------------------------------------

def test_population_loss_matches_monte_carlo():
    T, q, d = 8, 2, 3
    P = aligned(d, T, 1.5, 0.7)
    P.V[:, d:] = RngStream(1, "init").normal((d, T)) * 0.2
    pe = one_hot_pe(T)
    exact = population_loss(P, pe, q)
    L = model.batch_losses(P, sample_batch(RngStream(3, "data"), TaskConfig(T, q, d), 400000), pe)
    assert abs(L.mean() - exact) <= 4 * L.std() / np.sqrt(len(L))


def test_population_gradient_matches_finite_differences():
    from stslab.verify import numeric_gradient, rel_error
    T, q, d = 6, 2, 2
    pe = one_hot_pe(T)
    rng = RngStream(4, "init")
    P = ModelParams.zeros(d, T)
    P.W[d:, :] = rng.normal((T, d + T)) * 0.5
    P.V[:] = rng.normal(P.V.shape) * 0.5

    def f(a):
        W = P.W.copy()
        W[d:] = np.asarray(a[0], dtype=np.float64)
        return population_loss(ModelParams(W, np.asarray(a[1], dtype=np.float64)), pe, q)

    num = numeric_gradient(f, [P.W[d:], P.V], h=1e-4)
    g = population_gradients(P, pe, q)
    assert not g.dW[:, :d].any()
    assert rel_error([g.dW[d:], g.dV], num) <= 1e-6


def test_population_requires_zero_token_position_block():
    P = ModelParams.zeros(2, 4)
    P.W[0, 3] = 1.0
    with pytest.raises(ValueError):
        population_gradients(P, one_hot_pe(4), 2)


# --- encodings under the model ----------------------------------------------------

def test_stochastic_symmetry_of_off_subset_attention():
    T, q, d, C = 12, 2, 1, 3.0
    sampler = RipSampler(60, T, q, 0.1, threshold=0.6)
    P = construct_expressivity(d, 60, C)
    s = sample_instance(RngStream(0, "data"), TaskConfig(T, q, d))
    s = Sample(s.X, (0, 5), s.target)
    rng = RngStream(9, "pe")
    att = np.array([attention(P, assemble(s, sampler.draw(rng))) for _ in range(10000)])
    i, j = 3, 9
    diff = att[:, i] - att[:, j]
    assert abs(diff.mean()) < 4 * diff.std(ddof=1) / np.sqrt(len(diff))


def test_s_plus_bounds_exact_rip():
    from stslab.reduced import s_plus_bounds_stochastic
    T, q, delta = 16, 2, 0.3
    rng = RngStream(2, "pe")
    Y = model.all_subsets(T, q)
    for _ in range(3):
        pe = sample_rip_pe(rng, 400, T, q, delta, mode=EXACT)
        for C in (1.0, 5.0, 10.0):
            p = model.batch_pass(construct_expressivity(1, 400, C),
                                 Batch(np.zeros((len(Y), 1, T)), Y, np.zeros((len(Y), 1))), pe)
            sp = np.take_along_axis(p.S, Y, axis=1)
            lo, hi = s_plus_bounds_stochastic(C, T, q, delta)
            assert sp.min() >= lo and sp.max() <= hi


# --- constructions and diagnostics --------------------------------------------------

def test_expressivity_alpha():
    assert expressivity_alpha(0.1, 50) == 93


def test_expressivity_zero_scale_averages_tokens(rng):
    s = sample_instance(rng, TaskConfig(7, 2, 3))
    pe = PosEncoding(RADEMACHER, rademacher_matrix(rng, 30, 7))
    out = forward(construct_expressivity(3, 30, 0.0), assemble(s, pe))
    assert np.allclose(out, s.X.mean(axis=1), atol=1e-14)


def test_expressivity_sup_error_small_case():
    T, q, d = 20, 3, 2
    pe = sample_rip_pe(RngStream(1, "pe"), 1500, T, q, 0.25, mode=EXACT)
    P = construct_expressivity(d, 1500, expressivity_alpha(0.1, T))
    b = sample_batch(RngStream(1, "data"), TaskConfig(T, q, d), 2000)
    err = np.linalg.norm(model.batch_pass(P, b, pe).out - b.target, axis=1)
    assert err.max() <= 0.1


def test_cosines():
    gt = ground_truth(2, 5, ONE_HOT)
    assert cosine_diagnostics(ModelParams(gt.W_star, gt.V_star), gt) == pytest.approx((1, 1))
    assert cosine_diagnostics(ModelParams.zeros(2, 5), gt) == (0.0, 0.0)


def test_ground_truth_blocks():
    gt = ground_truth(2, 4, RADEMACHER)
    assert np.array_equal(gt.W_star[2:, 2:], np.eye(4))
    assert np.array_equal(gt.V_star, np.hstack([np.eye(2), np.zeros((2, 4))]))
    gt1 = ground_truth(2, 4, ONE_HOT)
    assert np.allclose(gt1.W_star[2:, 2:].sum(axis=0), 0)


def test_extract_scalars():
    C, a, r = extract_scalars(aligned(3, 6, 2.5, 0.75), ONE_HOT)
    assert (C, a, r) == pytest.approx((2.5, 0.75, 0.0), abs=1e-14)
    assert extract_scalars(ModelParams.zeros(3, 6), ONE_HOT) == (0.0, 0.0, 0.0)
    P = construct_expressivity(2, 5, 4.0)
    P.W[0, 3] = 0.2
    C, a, r = extract_scalars(P, RADEMACHER)
    assert C == pytest.approx(4.0) and r == pytest.approx(0.2 / np.sqrt(16 * 5 + 2))
