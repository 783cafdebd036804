import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from igbo import attribution as attr
from igbo import ndiff as nd
from igbo import seqmodel as sm


def memoryless_linear(w):
    w = np.asarray(w, dtype=float)
    d = w.size
    return sm.SeqModelParams(
        w_hh=np.zeros((1, 1)), w_xh=np.zeros((1, d)), b_h=np.zeros(1),
        u_out=np.zeros(1), w_out=w, c_out=np.array(0.0),
    )


def test_linear_path_two_points_is_endpoints():
    x = np.array([[2.0, 1.0]])
    b = np.zeros((1, 2))
    path = attr.linear_path(x, b, 2)
    assert np.array_equal(path.points[0], b)
    assert np.array_equal(path.points[1], x)


def test_linear_path_midpoint():
    path = attr.linear_path(np.array([[2.0]]), np.array([[0.0]]), 3)
    assert np.allclose(path.points[:, 0, 0], [0.0, 1.0, 2.0])


@given(st.integers(2, 40))
@settings(max_examples=30, deadline=None)
def test_linear_path_endpoints_exact(m):
    rng = np.random.default_rng(m)
    x = rng.normal(size=(3, 2))
    b = rng.normal(size=(3, 2))
    path = attr.linear_path(x, b, m)
    assert path.m == m
    assert np.array_equal(path.points[0], b)
    assert np.array_equal(path.points[-1], x)


def test_linear_path_rejects_m_below_two():
    with pytest.raises(ValueError):
        attr.linear_path(np.zeros((1, 1)), np.zeros((1, 1)), 1)


def test_tig_memoryless_linear_exact_any_path():
    w = np.array([1.5, 0.5])
    p = memoryless_linear(w)
    x = np.array([[1.0, 1.0], [2.0, -1.0]])
    b = np.zeros_like(x)
    for m in (2, 3, 7):
        a = attr.tig(p, attr.linear_path(x, b, m)).values
        for t in range(2):
            assert np.allclose(a[t][t], w * (x[t] - b[t]), atol=1e-12)
    # kinked path with the same endpoints stays exact (constant integrand)
    pts = np.stack([b, np.array([[5.0, -3.0], [0.5, 4.0]]), x])
    a = attr.tig(p, attr.IntegrationPath(pts, "oracle")).values
    for t in range(2):
        assert np.allclose(a[t][t], w * (x[t] - b[t]), atol=1e-12)


def test_tig_zero_length_path_is_zero():
    p = sm.init_params(3, 2, 0)
    x = np.random.default_rng(1).normal(size=(3, 2))
    a = attr.tig(p, attr.linear_path(x, x, 4)).values
    assert np.allclose(a, 0.0)


def test_tig_m2_equals_jacobian_at_baseline_times_delta():
    p = sm.init_params(3, 2, 2)
    rng = np.random.default_rng(3)
    x = rng.normal(size=(3, 2))
    b = rng.normal(size=(3, 2))
    a = attr.tig(p, attr.linear_path(x, b, 2)).values
    jac = sm.input_jacobian(p, b)
    assert np.allclose(a, jac * (x - b)[None], atol=1e-12)


def test_tig_causality_zero_above_diagonal():
    p = sm.init_params(4, 3, 5)
    rng = np.random.default_rng(4)
    x = rng.normal(size=(4, 3))
    a = attr.tig(p, attr.linear_path(x, np.zeros_like(x), 6)).values
    for t in range(4):
        assert np.allclose(a[t][t + 1:], 0.0, atol=1e-9)


def test_satisfaction_fully_explained():
    p = memoryless_linear([2.0])
    x = np.array([[1.0]])
    b = np.zeros((1, 1))
    a = attr.tig(p, attr.linear_path(x, b, 2))
    rep = attr.satisfaction(p, x, b, a, beta=5.0)
    assert np.allclose(rep.scores, 1.0)
    assert np.allclose(rep.residuals, 0.0)


def test_satisfaction_hand_computed_two_features():
    p = memoryless_linear([1.5, 0.5])
    x = np.array([[1.0, 1.0]])
    b = np.zeros((1, 2))
    a = attr.tig(p, attr.linear_path(x, b, 2))
    rep = attr.satisfaction(p, x, b, a, beta=2.0)
    assert np.allclose(rep.scores, [0.5, 0.25])


def test_satisfaction_large_beta_drives_scores_down():
    p = memoryless_linear([1.5, 0.5])
    x = np.array([[1.0, 1.0]])
    b = np.zeros((1, 2))
    a = attr.tig(p, attr.linear_path(x, b, 2))
    rep = attr.satisfaction(p, x, b, a, beta=1e9)
    assert np.all(rep.scores < 1e-6)


def test_satisfaction_rejects_nonpositive_beta():
    p = memoryless_linear([1.0])
    x = np.ones((1, 1))
    a = attr.tig(p, attr.linear_path(x, np.zeros_like(x), 2))
    with pytest.raises(ValueError):
        attr.satisfaction(p, x, np.zeros_like(x), a, beta=0.0)


def test_scores_bounded_on_random_instances():
    rng = np.random.default_rng(11)
    for _ in range(200):
        h, d, t_len = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
        p = sm.init_params(h, d, int(rng.integers(1 << 30)))
        x = rng.normal(size=(t_len, d))
        b = rng.normal(size=(t_len, d))
        a = attr.tig(p, attr.linear_path(x, b, 3))
        rep = attr.satisfaction(p, x, b, a, beta=5.0)
        assert np.all(rep.scores > 0.0)
        assert np.all(rep.scores <= 1.0 + 1e-15)
        assert np.all(rep.residuals >= 0.0)


def test_completeness_converges_with_m():
    p = sm.init_params(6, 2, 21)
    rng = np.random.default_rng(8)
    x = rng.normal(size=(4, 2))
    b = np.zeros_like(x)
    err_512 = attr.completeness_error(p, x, b, 512)
    assert np.max(err_512) <= 1e-3


def test_completeness_error_halves_when_step_halves():
    p = sm.init_params(6, 2, 21)
    rng = np.random.default_rng(8)
    x = 1.5 * rng.normal(size=(4, 2))
    b = np.zeros_like(x)
    e1 = np.max(attr.completeness_error(p, x, b, 33))
    e2 = np.max(attr.completeness_error(p, x, b, 65))
    assert e1 / e2 >= 1.8


def test_satisfaction_parameter_gradient_matches_finite_diff():
    p = sm.init_params(2, 2, 9)
    rng = np.random.default_rng(10)
    x = rng.normal(size=(3, 2))
    b = np.zeros_like(x)

    def h0_at(vec):
        q = p.with_flat(vec)
        a = attr.tig(q, attr.linear_path(x, b, 4))
        rep = attr.satisfaction(q, x, b, a, beta=5.0)
        return float(rep.scores[0])

    lifted, leaves = p.leaf_copy()
    a = attr.tig(lifted, attr.linear_path(x, b, 4))
    rep = attr.satisfaction(lifted, x, b, a, beta=5.0)
    target = nd.at(rep.scores, 0)
    grads = p.grads_from(leaves, target).flatten()
    fd = nd.finite_diff(h0_at, p.flatten(), h=1e-6)
    denom = 1.0 + np.max(np.abs(grads))
    assert np.max(np.abs(grads - fd)) / denom < 1e-4


def test_attribution_csv_dump(tmp_path):
    p = memoryless_linear([1.0, 2.0])
    x = np.ones((2, 2))
    a = attr.tig(p, attr.linear_path(x, np.zeros_like(x), 2))
    out = tmp_path / "attr.csv"
    attr.write_attribution_csv(out, [a], sample_ids=[7])
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "sample_id,t,i,k,tig"
    assert len(lines) == 1 + 2 * 2 * 2
    assert lines[1].startswith("7,0,0,0,")
