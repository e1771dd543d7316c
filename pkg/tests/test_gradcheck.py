import numpy as np

from snowformer import tensor as T
from snowformer.gradcheck import grad_check


def t64(arr, requires_grad=True):
    return T.Tensor(np.asarray(arr, dtype=np.float64), dtype="f64", requires_grad=requires_grad)


def test_linear_program_error_near_machine_eps():
    rng = np.random.default_rng(0)
    x = t64(rng.normal(size=(5,)))

    def f(params):
        return T.sum_(T.scale(params[0], 3.0))

    report = grad_check(f, [x], rel_tol=1e-4)
    assert report.passed
    assert report.max_rel_err < 1e-9


def test_two_layer_ffn_with_gelu():
    rng = np.random.default_rng(1)
    x = T.Tensor(rng.normal(size=(2, 4)), dtype="f64")
    w1 = t64(rng.normal(size=(4, 8)) * 0.5)
    b1 = t64(rng.normal(size=8) * 0.1)
    w2 = t64(rng.normal(size=(8, 3)) * 0.5)
    b2 = t64(rng.normal(size=3) * 0.1)

    def f(params):
        h = T.gelu(T.linear(x, params[0], params[1]))
        return T.sum_(T.square(T.linear(h, params[2], params[3])))

    report = grad_check(f, [w1, b1, w2, b2], rel_tol=1e-4,
                        names=["w1", "b1", "w2", "b2"])
    assert report.passed, list(report.lines())


def test_corrupted_backward_rule_is_detected():
    # negative control: a deliberately wrong gradient must be reported
    rng = np.random.default_rng(2)
    x = t64(rng.normal(size=(4,)))

    def bad_square(t):
        data = t.data * t.data
        return T._make(data, (t,), lambda g: (3.0 * g * t.data,), "bad_square")

    def f(params):
        return T.sum_(bad_square(params[0]))

    report = grad_check(f, [x], rel_tol=1e-4)
    assert not report.passed
    assert report.max_rel_err > 0.1


def test_report_lists_per_param_errors():
    rng = np.random.default_rng(3)
    a = t64(rng.normal(size=(3,)))
    b = t64(rng.normal(size=(3,)))

    def f(params):
        return T.sum_(T.mul(params[0], params[1]))

    report = grad_check(f, [a, b], rel_tol=1e-4, names=["a", "b"])
    lines = list(report.lines())
    assert len(lines) == 2
    assert all("max_rel_err" in ln for ln in lines)
