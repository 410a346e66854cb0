import numpy as np
import pytest
from hypothesis import given, strategies as st

from refrec import autodiff as ad
from oracles import finite_diff, max_rel_err

RNG = np.random.default_rng(1234)


def run_fd(make_graph, shapes, n_trials=10, margin=None, sampler=None, tol=1e-4):
    """FD-check a graph builder on random inputs; `margin` rejects draws too
    close to a kink, `sampler` overrides the input distribution."""
    draw = sampler or (lambda s: RNG.standard_normal(s))
    for _ in range(n_trials):
        while True:
            arrays = [draw(s) for s in shapes]
            if margin is None or margin(arrays):
                break
        params = [ad.parameter(a) for a in arrays]

        def f():
            with ad.no_grad():
                return float(make_graph(*params).data[0, 0])

        numeric = finite_diff(f, [p.data for p in params])
        ad.zero_grads(params)
        ad.backward(make_graph(*params))
        for p, num in zip(params, numeric):
            assert max_rel_err(p.grad, num) < tol


def test_matmul_gradient():
    run_fd(lambda a, b: ad.sum_all(ad.matmul(a, b)), [(3, 4), (4, 2)])


def test_linear_map_gradient_is_x_transpose_ones():
    # root = sum(x @ W): analytic dW = x^T @ ones, checked against FD too
    x = RNG.standard_normal((5, 3))
    w = ad.parameter(RNG.standard_normal((3, 2)))
    out = ad.sum_all(ad.matmul(ad.constant(x), w))
    ad.backward(out)
    assert np.allclose(w.grad, x.T @ np.ones((5, 2)), atol=1e-12)

    def f():
        return float((x @ w.data).sum())

    (num,) = finite_diff(f, [w.data])
    assert max_rel_err(w.grad, num) < 1e-4


def test_add_and_bias_gradient():
    run_fd(lambda a, b: ad.sum_all(ad.square(ad.add(a, b))), [(3, 4), (3, 4)])
    run_fd(lambda a, b: ad.sum_all(ad.square(ad.add(a, b))), [(3, 4), (1, 4)])


def test_sub_square_gradient():
    run_fd(lambda a, b: ad.sum_all(ad.square(ad.sub(a, b))), [(4, 3), (4, 3)])


def test_scale_mean_gradient():
    run_fd(lambda a: ad.mean_all(ad.scale(a, 2.5)), [(3, 5)])


def test_relu_gradient_off_kink():
    run_fd(
        lambda a: ad.sum_all(ad.square(ad.relu(a))),
        [(4, 4)],
        margin=lambda arrs: bool(np.all(np.abs(arrs[0]) > 1e-3)),
    )


def test_relu_values_and_subgradient():
    x = ad.parameter(np.array([[-1.0, 2.0]]))
    out = ad.relu(x)
    assert np.array_equal(out.data, [[0.0, 2.0]])
    ad.backward(ad.sum_all(out))
    assert np.array_equal(x.grad, [[0.0, 1.0]])


def test_tanh_gradient():
    run_fd(lambda a: ad.sum_all(ad.tanh(a)), [(3, 3)])


def test_log_gradient():
    run_fd(
        lambda a: ad.sum_all(ad.log(a)),
        [(3, 3)],
        sampler=lambda s: np.abs(RNG.standard_normal(s)) + 0.5,
    )


def test_softmax_gradient_and_symmetry():
    run_fd(lambda a: ad.sum_all(ad.square(ad.softmax(a))), [(3, 4)])
    out = ad.softmax(ad.constant([[0.0, 0.0, 0.0]]))
    assert np.allclose(out.data, [[1 / 3, 1 / 3, 1 / 3]], atol=1e-15)


def _pool_margin(arrs):
    v = arrs[0].reshape(2, 4, 3)
    srt = np.sort(v, axis=1)
    return bool(np.min(srt[:, -1, :] - srt[:, -2, :]) > 1e-3)


def test_max_over_groups_gradient_and_singleton():
    run_fd(
        lambda a: ad.sum_all(ad.square(ad.max_over_groups(a, 4))),
        [(8, 3)],
        margin=_pool_margin,
    )
    # pool over a single point returns that row unchanged
    x = ad.parameter(RNG.standard_normal((1, 5)))
    out = ad.max_over_groups(x, 1)
    assert np.array_equal(out.data, x.data)


def test_max_ties_go_to_lowest_row():
    x = ad.parameter(np.array([[1.0, 2.0], [1.0, 2.0]]))
    ad.backward(ad.sum_all(ad.max_over_groups(x, 2)))
    assert np.array_equal(x.grad, [[1.0, 1.0], [0.0, 0.0]])


def test_sum_grad_is_ones():
    x = ad.parameter(RNG.standard_normal((2, 2)))
    ad.backward(ad.sum_all(x))
    assert np.array_equal(x.grad, np.ones((2, 2)))


def test_reshape_rows_gradient():
    run_fd(lambda a: ad.sum_all(ad.square(ad.reshape(a, 6, 2))), [(3, 4)])
    run_fd(lambda a: ad.sum_all(ad.square(ad.rows(a, 1, 3))), [(4, 3)])


def test_cross_entropy_gradient_and_values():
    y = np.array([0, 2, 1])
    w = np.array([1.0, 0.5, 2.0])
    run_fd(lambda a: ad.cross_entropy(a, y, w), [(3, 4)])
    # uniform predictions give ln(k) per sample
    out = ad.cross_entropy(ad.constant(np.zeros((2, 5))), np.array([0, 3]))
    assert abs(out.data[0, 0] - np.log(5)) < 1e-12
    # a zero-weight sample contributes no loss and no gradient
    p = ad.parameter(RNG.standard_normal((2, 3)))
    ad.backward(ad.cross_entropy(p, np.array([0, 1]), np.array([0.0, 1.0])))
    assert np.all(p.grad[0] == 0.0)


def test_cross_entropy_is_stable_for_huge_logits():
    logits = ad.constant(np.array([[1e4, 0.0], [-1e4, 0.0]]))
    out = ad.cross_entropy(logits, np.array([0, 1]))
    assert np.isfinite(out.data[0, 0])


def test_fan_in_accumulation_sum_rule():
    # one node feeding two consumers gets both contributions
    x = ad.parameter(np.array([[1.0, 2.0]]))
    out = ad.sum_all(ad.add(ad.scale(x, 3.0), ad.square(x)))
    ad.backward(out)
    assert np.allclose(x.grad, 3.0 + 2.0 * x.data)


def test_backward_requires_scalar_root():
    x = ad.parameter(np.ones((2, 2)))
    with pytest.raises(ValueError):
        ad.backward(ad.square(x))


def test_shape_mismatch_rejected():
    a = ad.constant(np.ones((2, 3)))
    b = ad.constant(np.ones((2, 2)))
    for op in (ad.matmul, ad.add, ad.sub):
        with pytest.raises(ValueError):
            op(a, b)


def test_no_grad_builds_no_graph():
    x = ad.parameter(np.ones((2, 2)))
    with ad.no_grad():
        out = ad.sum_all(ad.square(x))
    assert out.parents == () and not out.requires_grad


def test_adamw_zero_grad_keeps_params_when_wd_zero():
    p = ad.parameter(np.array([[1.0, -2.0]]))
    opt = ad.AdamWState(lr=0.1, weight_decay=0.0)
    before = p.data.copy()
    ad.adamw_step([p], opt)
    assert np.array_equal(p.data, before)
    assert opt.step == 1


def test_adamw_defaults_match_training_setup():
    opt = ad.AdamWState()
    assert opt.lr == 1e-4 and opt.weight_decay == 1e-4
    assert opt.beta1 == 0.9 and opt.beta2 == 0.999 and opt.eps == 1e-8


def test_adamw_step_opposes_gradient():
    # f(p) = p^2 at p=1: hand-evaluated first step of the recurrence
    p = ad.parameter(np.array([[1.0]]))
    opt = ad.AdamWState(lr=0.1, weight_decay=0.0)
    ad.backward(ad.sum_all(ad.square(p)))
    ad.adamw_step([p], opt)
    m_hat = (0.1 * 2.0) / (1 - 0.9)
    v_hat = (0.001 * 4.0) / (1 - 0.999)
    expected = 1.0 - 0.1 * m_hat / (np.sqrt(v_hat) + 1e-8)
    assert abs(p.data[0, 0] - expected) < 1e-12
    assert p.data[0, 0] < 1.0


def test_adamw_lr_zero_is_noop_on_data():
    p = ad.parameter(np.array([[3.0]]))
    p.grad[...] = 5.0
    opt = ad.AdamWState(lr=0.0, weight_decay=0.5)
    ad.adamw_step([p], opt)
    assert p.data[0, 0] == 3.0
    assert opt.m[0][0, 0] != 0.0  # bookkeeping still advances


def test_adamw_decoupled_decay_applied_before_update():
    # with zero gradient the only change is the multiplicative decay
    p = ad.parameter(np.array([[2.0]]))
    ad.adamw_step([p], ad.AdamWState(lr=0.5, weight_decay=0.1))
    assert abs(p.data[0, 0] - 2.0 * (1 - 0.5 * 0.1)) < 1e-15


def test_adamw_empty_param_list_is_noop():
    ad.adamw_step([], ad.AdamWState())


def test_cosine_lr_endpoints_and_midpoint():
    assert ad.cosine_lr(0, 100, 0.3) == pytest.approx(0.3, abs=1e-15)
    assert ad.cosine_lr(100, 100, 0.3) == pytest.approx(0.0, abs=1e-15)
    assert ad.cosine_lr(50, 100, 0.3) == pytest.approx(0.15, abs=1e-15)
    with pytest.raises(ValueError):
        ad.cosine_lr(0, 0, 0.3)


@given(st.integers(min_value=1, max_value=1000))
def test_cosine_lr_monotone_non_increasing(total):
    vals = [ad.cosine_lr(i, total, 1.0) for i in range(total + 1)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
