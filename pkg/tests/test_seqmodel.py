import numpy as np
import pytest

from igbo import ndiff as nd
from igbo import seqmodel as sm


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.max(np.abs(a - b)) / (1.0 + np.max(np.abs(a)))


def scalar_cell(w_hh=0.5, w_xh=1.0, u=1.0, w=0.0, c=0.0, activation="linear"):
    return sm.SeqModelParams(
        w_hh=np.array([[w_hh]]),
        w_xh=np.array([[w_xh]]),
        b_h=np.zeros(1),
        u_out=np.array([u]),
        w_out=np.array([w]),
        c_out=np.array(0.0) + c,
        activation=activation,
    )


def test_zero_params_give_zero_outputs():
    p = sm.SeqModelParams(
        w_hh=np.zeros((3, 3)), w_xh=np.zeros((3, 2)), b_h=np.zeros(3),
        u_out=np.zeros(3), w_out=np.zeros(2), c_out=np.array(0.0),
    )
    y, traj = sm.forward(p, np.random.default_rng(0).normal(size=(5, 2)))
    assert np.all(y == 0.0)
    assert np.all(traj.states[0] == 0.0)


def test_hand_unrolled_scalar_recurrence():
    # h_t = 0.5 h_{t-1} + x_t, y_t = h_{t-1}, X = [1, 1] -> outputs [0, 1]
    p = scalar_cell()
    y, traj = sm.forward(p, np.array([[1.0], [1.0]]))
    assert np.allclose(y, [0.0, 1.0])
    assert np.allclose(traj.states[:, 0], [0.0, 1.0, 1.5])


def test_passthrough_output():
    p = scalar_cell(u=0.0, w=1.0)
    y, _ = sm.forward(p, np.array([[3.0], [7.0]]))
    assert np.allclose(y, [3.0, 7.0])


def test_jacobian_causality_is_exact():
    rng = np.random.default_rng(1)
    for _ in range(100):
        h, d, t_len = rng.integers(1, 4), rng.integers(1, 4), rng.integers(2, 5)
        p = sm.init_params(int(h), int(d), int(rng.integers(1 << 30)))
        x = rng.normal(size=(int(t_len), int(d)))
        jac = sm.input_jacobian(p, x)
        for t in range(int(t_len)):
            assert np.all(jac[t][t + 1:] == 0.0)


def test_jacobian_memoryless_linear_rows():
    w = np.array([1.5, -0.25])
    p = sm.SeqModelParams(
        w_hh=np.zeros((2, 2)), w_xh=np.zeros((2, 2)), b_h=np.zeros(2),
        u_out=np.zeros(2), w_out=w, c_out=np.array(0.0),
    )
    jac = sm.input_jacobian(p, np.ones((4, 2)))
    for t in range(4):
        assert np.allclose(jac[t][t], w)


def test_jacobian_scalar_cell_memory():
    p = scalar_cell()
    jac = sm.input_jacobian(p, np.array([[1.0], [1.0]]))
    # y2 = h1 = 0.5 h0 + x1
    assert np.isclose(jac[1][0, 0], 1.0)


def test_jacobian_matches_finite_differences():
    rng = np.random.default_rng(7)
    p = sm.init_params(4, 3, 11)
    x = rng.normal(size=(5, 3))
    jac = sm.input_jacobian(p, x)
    for t in [0, 2, 4]:
        fd = nd.finite_diff(lambda v: sm.forward(p, v)[0][t], x, h=1e-5)
        assert rel_err(jac[t], fd) < 1e-5


def test_task_loss_perfect_fit_zero():
    p = scalar_cell(u=0.0, w=1.0)
    x = np.array([[2.0], [5.0]])
    loss, grads = sm.task_loss(p, [(x, np.array([2.0, 5.0]))])
    assert loss == 0.0
    assert np.allclose(grads.flatten(), 0.0)


def test_task_loss_single_step():
    p = scalar_cell(u=0.0, w=1.0)
    loss, _ = sm.task_loss(p, [(np.array([[1.0]]), np.array([0.0]))])
    assert np.isclose(loss, 1.0)


def test_task_loss_gradient_matches_finite_diff():
    rng = np.random.default_rng(3)
    p = sm.init_params(3, 2, 5)
    batch = [(rng.normal(size=(4, 2)), rng.normal(size=4)) for _ in range(2)]
    _, grads = sm.task_loss(p, batch)
    flat0 = p.flatten()

    def loss_at(vec):
        q = p.with_flat(vec)
        total, count = 0.0, 0
        for x, tgt in batch:
            y, _ = sm.forward(q, x)
            total += np.sum((y - tgt) ** 2)
            count += y.size
        return total / count

    fd = nd.finite_diff(loss_at, flat0, h=1e-6)
    assert rel_err(grads.flatten(), fd) < 1e-5


def test_task_loss_empty_batch_rejected():
    with pytest.raises(ValueError):
        sm.task_loss(scalar_cell(), [])


def test_forward_is_deterministic():
    p = sm.init_params(5, 3, 42)
    x = np.random.default_rng(9).normal(size=(6, 3))
    y1, _ = sm.forward(p, x)
    y2, _ = sm.forward(p, x)
    assert np.array_equal(y1, y2)


def test_feature_mismatch_rejected():
    p = sm.init_params(3, 2, 0)
    with pytest.raises(ValueError):
        sm.forward(p, np.zeros((4, 3)))


def test_checkpoint_roundtrip(tmp_path):
    p = sm.init_params(4, 2, 17)
    path = tmp_path / "model.json"
    sm.save_checkpoint(path, p)
    q = sm.load_checkpoint(path)
    assert np.array_equal(p.flatten(), q.flatten())
    assert q.activation == p.activation

    import json
    payload = json.loads(path.read_text())
    assert payload["T_free"] is True
    assert payload["version"] == 1
    assert set(payload["params"]) == set(sm.SeqModelParams.ARRAY_FIELDS)


def test_flatten_roundtrip():
    p = sm.init_params(3, 2, 1)
    vec = p.flatten()
    q = p.with_flat(vec)
    assert np.array_equal(q.flatten(), vec)
    assert p.n_params == vec.size
