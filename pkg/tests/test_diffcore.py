import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from vm3ac import diffcore as dc
from vm3ac.verify import finite_difference_grad, grad_rel_error

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def grad_of(fn, x):
    t = dc.Tensor(np.array(x, dtype=float), requires_grad=True)
    with dc.Tape():
        dc.backward(fn(t))
    return t.grad


def value_of(fn, x):
    with dc.no_grad():
        return float(fn(dc.constant(np.array(x, dtype=float))).data)


# -- forward ops ------------------------------------------------------------


def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(dc.matmul(dc.constant(np.eye(2)), dc.constant(a)).data, a)


def test_tanh_relu_mean_values():
    assert dc.tanh(dc.constant(np.array(0.0))).item() == 0.0
    assert dc.relu(dc.constant(np.array(-1.5))).item() == 0.0
    assert dc.mean(dc.constant(np.array([1.0, 2.0, 3.0, 4.0]))).item() == 2.5


def test_shape_mismatch_rejected():
    with pytest.raises(dc.ShapeError, match="matmul"):
        dc.matmul(dc.constant(np.ones((2, 3))), dc.constant(np.ones((2, 3))))
    with pytest.raises(dc.ShapeError, match="add"):
        dc.add(dc.constant(np.ones((2, 3))), dc.constant(np.ones((3, 2))))
    with pytest.raises(dc.ShapeError):
        dc.concat([dc.constant(np.ones((2, 3))), dc.constant(np.ones((3, 3)))])


def test_log_of_non_positive_rejected():
    with pytest.raises(ValueError, match="non-positive"):
        dc.log(dc.constant(np.array([1.0, 0.0])))


def test_non_finite_result_rejected():
    with pytest.raises(dc.NonFiniteError):
        dc.exp(dc.constant(np.array([1000.0])))


def test_broadcast_only_over_leading_axis():
    out = dc.add(dc.constant(np.zeros((4, 3))), dc.constant(np.arange(3.0)))
    np.testing.assert_array_equal(out.data[2], [0.0, 1.0, 2.0])
    with pytest.raises(dc.ShapeError):
        dc.add(dc.constant(np.zeros((4, 3))), dc.constant(np.zeros((4, 1))))


def test_stop_gradient_is_identity_forward_zero_backward():
    x = dc.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with dc.Tape():
        y = dc.stop_gradient(x)
        np.testing.assert_array_equal(y.data, x.data)
        dc.backward(dc.tensor_sum(dc.mul(y, x)), [x])
    np.testing.assert_array_equal(x.grad, [1.0, 2.0])  # only the live factor contributes


# -- gaussian log-density ---------------------------------------------------


def test_gaussian_log_prob_analytic_values():
    zero = dc.constant(np.zeros(1))
    assert dc.gaussian_log_prob(zero, zero, zero).item() == pytest.approx(-0.9189385332, abs=1e-9)
    one = dc.constant(np.ones(1))
    assert dc.gaussian_log_prob(one, zero, zero).item() == pytest.approx(-1.4189385332, abs=1e-9)


def test_gaussian_log_prob_grad_mu_matches_central_differences():
    rng = np.random.default_rng(3)
    x, mu, ls = rng.normal(size=4), rng.normal(size=4), rng.normal(scale=0.4, size=4)

    def f(m):
        return dc.gaussian_log_prob(dc.constant(x), m, dc.constant(ls))

    analytic = grad_of(f, mu)
    numeric = finite_difference_grad(lambda m: value_of(f, m), mu, 1e-5)
    assert grad_rel_error(analytic, numeric, rtol=1e-6, atol=1e-8) < 1e-6


@pytest.mark.parametrize("mu,log_std", [(0.0, 0.0), (0.7, -0.5), (-1.2, 0.4)])
def test_gaussian_density_integrates_to_one(mu, log_std):
    grid = np.linspace(mu - 12 * math.exp(log_std), mu + 12 * math.exp(log_std), 20001)
    with dc.no_grad():
        lp = dc.gaussian_log_prob(dc.constant(grid[:, None]), dc.constant(np.full((grid.size, 1), mu)),
                                  dc.constant(np.full((grid.size, 1), log_std))).data
    assert abs(np.trapezoid(np.exp(lp), grid) - 1.0) < 1e-3


# -- backward ---------------------------------------------------------------


def test_square_gradient():
    assert grad_of(lambda t: dc.square(t), 3.0) == pytest.approx(6.0)


def test_sum_tanh_matvec_matches_finite_differences():
    rng = np.random.default_rng(0)
    x = rng.normal(size=3)
    w0 = rng.normal(size=(3, 4))

    def f(w):
        return dc.tensor_sum(dc.tanh(dc.matmul(dc.constant(x), w)))

    analytic = grad_of(f, w0)
    numeric = finite_difference_grad(lambda w: value_of(f, w), w0, 1e-5)
    assert grad_rel_error(analytic, numeric) < 1e-4


def test_unused_parameter_gets_zero_grad():
    x = dc.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    p = dc.Tensor(np.array([5.0]), requires_grad=True)
    with dc.Tape():
        dc.backward(dc.tensor_sum(dc.square(x)), [x, p])
    np.testing.assert_array_equal(p.grad, [0.0])


def test_backward_rejects_non_scalar():
    x = dc.Tensor(np.ones(3), requires_grad=True)
    with dc.Tape():
        with pytest.raises(dc.ShapeError, match="scalar"):
            dc.backward(dc.square(x))


def test_backward_consumes_tape():
    x = dc.Tensor(np.array(2.0), requires_grad=True)
    with dc.Tape() as tape:
        dc.backward(dc.square(x))
        assert len(tape) == 0


def test_tape_records_in_topological_order():
    x = dc.Tensor(np.array([0.3, -0.2]), requires_grad=True)
    with dc.Tape() as tape:
        y = dc.tanh(dc.square(x))
        dc.tensor_sum(y)
        seen = {id(x)}
        for rec in tape.records:
            assert all(id(i) in seen or not i.requires_grad for i in rec.inputs)
            seen.add(id(rec.output))


def test_replay_is_bit_identical():
    rng = np.random.default_rng(5)
    w0, x = rng.normal(size=(3, 3)), rng.normal(size=(2, 3))

    def run():
        w = dc.Tensor(w0.copy(), requires_grad=True)
        with dc.Tape():
            loss = dc.mean(dc.square(dc.tanh(dc.matmul(dc.constant(x), w))))
            dc.backward(loss)
        return loss.data.copy(), w.grad

    (l1, g1), (l2, g2) = run(), run()
    assert l1.tobytes() == l2.tobytes() and g1.tobytes() == g2.tobytes()


def test_tapes_are_thread_local():
    errors = []

    def work(seed):
        try:
            rng = np.random.default_rng(seed)
            w = dc.Tensor(rng.normal(size=(4, 4)), requires_grad=True)
            for _ in range(50):
                with dc.Tape():
                    dc.backward(dc.mean(dc.square(dc.matmul(dc.constant(np.ones((2, 4))), w))))
        except Exception as exc:  # pragma: no cover - surfaced below
            errors.append(exc)

    threads = [threading.Thread(target=work, args=(k,)) for k in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 2), elements=finite), arrays(np.float64, (3, 2), elements=finite))
def test_elementwise_gradients_match_finite_differences(x, y):
    for fn in (lambda a: dc.tensor_sum(dc.mul(dc.tanh(a), dc.constant(y))),
               lambda a: dc.tensor_sum(dc.square(dc.add(a, dc.constant(y)))),
               lambda a: dc.mean(dc.exp(dc.scale(a, 0.5)))):
        analytic = grad_of(fn, x)
        numeric = finite_difference_grad(lambda v: value_of(fn, v), x, 1e-5)
        assert grad_rel_error(analytic, numeric) < 1e-4


# -- Adam -------------------------------------------------------------------


def test_adam_zero_grad_leaves_params_and_counts_step():
    p = dc.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    state = dc.AdamState.for_params([p])
    p.grad = np.zeros(2)
    dc.adam_step([p], state)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert state.t == 1 and p.grad is None


def test_adam_first_step_moves_by_lr():
    p = dc.Tensor(np.array(0.5), requires_grad=True)
    state = dc.AdamState.for_params([p], lr=3e-4)
    p.grad = np.array(1.0)
    dc.adam_step([p], state)
    assert p.data == pytest.approx(0.5 - 3e-4, abs=1e-10)


def test_adam_missing_grad_rejected():
    p = dc.Tensor(np.array(1.0), requires_grad=True)
    with pytest.raises(ValueError, match="no gradient"):
        dc.adam_step([p], dc.AdamState.for_params([p]))


def test_adam_descends_quadratic():
    # frozen oracle: 100 Adam steps at lr 0.1 on x^2 from x = 1
    x = dc.Tensor(np.array(1.0), requires_grad=True)
    state = dc.AdamState.for_params([x], lr=0.1)
    for _ in range(100):
        with dc.Tape():
            dc.backward(dc.square(x))
        dc.adam_step([x], state)
    assert abs(x.item()) < 0.1
    assert state.t == 100


# -- checkpoints ------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    params = {"a.w0": dc.Tensor(np.arange(6.0).reshape(2, 3)), "a.b0": np.array([0.1, -0.2])}
    dc.save_checkpoint(tmp_path / "c.json", params, {"note": "x"})
    arrays, meta = dc.load_checkpoint(tmp_path / "c.json")
    np.testing.assert_array_equal(arrays["a.w0"], params["a.w0"].data)
    assert meta == {"note": "x"}


def test_checkpoint_format_header_checked(tmp_path):
    (tmp_path / "c.json").write_text('{"format": "other/9", "params": {}}')
    with pytest.raises(ValueError, match="format"):
        dc.load_checkpoint(tmp_path / "c.json")
