import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from mmformer import tensor as T
from mmformer.tensor import Tensor


def _loop_matricize(a, m):
    """Coefficient-by-coefficient unfolding: rows mode m, columns row-major over the rest."""
    rest = [k for k in range(a.ndim) if k != m - 1]
    cols = list(itertools.product(*[range(a.shape[k]) for k in rest]))
    out = np.empty((a.shape[m - 1], len(cols)))
    for i in range(a.shape[m - 1]):
        for c, idx in enumerate(cols):
            full = list(idx)
            full.insert(m - 1, i)
            out[i, c] = a[tuple(full)]
    return out


shapes = hnp.array_shapes(min_dims=1, max_dims=4, min_side=1, max_side=4)


def test_matricize_shape():
    assert T.matricize(np.zeros((2, 3, 4)), 2).shape == (3, 8)


def test_matricize_matrix_mode_one_is_identity():
    a = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(T.matricize(a, 1).data, a)


@pytest.mark.parametrize("m", [1, 2, 3])
def test_matricize_matches_loop_oracle(m):
    a = np.random.default_rng(m).normal(size=(3, 3, 3))
    mat = T.matricize(a, m).data
    assert np.array_equal(mat, _loop_matricize(a, m))
    assert np.array_equal(T.dematricize(mat, m, a.shape).data, a)


@given(shapes, st.data())
@settings(max_examples=60, deadline=None)
def test_dematricize_inverts_matricize(shape, data):
    a = np.random.default_rng(len(shape)).normal(size=shape)
    m = data.draw(st.integers(1, len(shape)))
    assert np.array_equal(T.dematricize(T.matricize(a, m), m, shape).data, a)


def test_matricize_bad_mode():
    with pytest.raises(ValueError):
        T.matricize(np.zeros((2, 2)), 3)


def test_permute_modes_examples():
    a = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(T.permute_modes(a, (2, 1)).data, a.T)
    b = np.random.default_rng(0).normal(size=(2, 3, 4))
    assert np.array_equal(T.permute_modes(b, (1, 2, 3)).data, b)
    twice = T.permute_modes(T.permute_modes(b, (3, 2, 1)), (3, 2, 1))
    assert np.array_equal(twice.data, b)


def test_permute_modes_coefficients():
    b = np.random.default_rng(1).normal(size=(2, 3, 4))
    out = T.permute_modes(b, (2, 3, 1)).data
    for i, j, k in itertools.product(range(2), range(3), range(4)):
        assert out[j, k, i] == b[i, j, k]
    with pytest.raises(ValueError):
        T.permute_modes(b, (1, 1, 2))


@pytest.mark.parametrize("row, want", [
    ((0.0, 0.0), (0.5, 0.5)),
    ((1000.0, 1000.0), (0.5, 0.5)),
    ((np.log(1.0), np.log(3.0)), (0.25, 0.75)),
])
def test_softmax_rows_examples(row, want):
    out = T.softmax_rows(np.array([row])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out[0], want, atol=1e-15)


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=6),
                  elements=st.floats(-50, 50)),
       st.floats(-100, 100))
def test_softmax_rows_normalised_and_shift_invariant(x, c):
    p = T.softmax_rows(x).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(T.softmax_rows(x + c).data, p, atol=1e-9)


def test_core_kernels():
    assert np.array_equal(T.relu(np.array([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
    a = np.random.default_rng(0).normal(size=(3, 4))
    assert np.array_equal(T.matmul(np.eye(3), a).data, a)
    assert T.reduce(np.full((2, 3), 1.25), kind="mean").item() == 1.25
    with pytest.raises(ValueError):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ValueError):
        T.reduce(np.ones(3), kind="median")


@given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.integers(0, 2))
def test_concat_then_slice_recovers_inputs(widths, axis):
    rng = np.random.default_rng(sum(widths))
    base = [2, 3, 2]
    parts = []
    for w in widths:
        shape = list(base)
        shape[axis] = w
        parts.append(rng.normal(size=shape))
    cat = T.concat(parts, axis=axis).data
    start = 0
    for p in parts:
        sl = [slice(None)] * 3
        sl[axis] = slice(start, start + p.shape[axis])
        assert np.array_equal(cat[tuple(sl)], p)
        start += p.shape[axis]


def test_concat_shape_mismatch():
    with pytest.raises(ValueError):
        T.concat([np.ones((2, 3)), np.ones((3, 3))], axis=1)


def test_dropout_is_mask_driven():
    x = np.arange(1.0, 7.0).reshape(2, 3)
    mask = np.array([[1, 0, 1], [0, 1, 1]], dtype=bool)
    out = T.dropout(x, mask, 0.5).data
    assert np.array_equal(out, np.where(mask, x / 0.5, 0.0))
    assert np.array_equal(T.dropout(x, None, 0.5).data, x)


def test_backward_sum_and_square():
    x = T.parameter(np.array([1.0, -2.0, 3.0]))
    T.backward(T.reduce(x))
    assert np.array_equal(x.grad, np.ones(3))
    T.backward(T.reduce(T.mul(x, x)))
    assert np.array_equal(x.grad, 2 * x.data)


def test_backward_accumulates_at_fanout():
    x = T.parameter(np.array([0.5, 1.5]))
    y = T.add(T.mul(x, x), T.scale(x, 3.0))  # x used three times
    T.backward(T.reduce(y))
    np.testing.assert_allclose(x.grad, 2 * x.data + 3.0)


def test_backward_errors():
    x = T.parameter(np.ones(3))
    with pytest.raises(ValueError):
        T.backward(T.scale(x, 2.0))
    with pytest.raises(ValueError):
        T.backward(T.reduce(Tensor(np.ones(3))))


def test_no_grad_records_nothing():
    x = T.parameter(np.ones(2))
    with T.no_grad():
        y = T.reduce(T.mul(x, x))
    assert not y.requires_grad


def test_grad_check_reports_error_for_wrong_rule():
    # a deliberately broken op: forward x^2, backward claims 3x
    def bad(x):
        return T._node(x.data ** 2, (x,), lambda g: (3 * x.data * g,), "bad")

    err = T.grad_check(lambda x: T.reduce(bad(x)), np.array([1.0, 2.0]))
    assert err > 0.4


OPS = {
    "mul_div": lambda x: T.reduce(T.div(T.mul(x, x), T.add(T.exp(x), 1.0))),
    "log_sqrt": lambda x: T.reduce(T.log(T.add(T.mul(x, x), 1.0))) + T.reduce(T.sqrt(T.add(T.mul(x, x), 2.0))),
    "softmax": lambda x: T.reduce(T.mul(T.softmax(T.reshape(x, (3, 4)), axis=0), Tensor(np.arange(12.0).reshape(3, 4)))),
    "log_softmax": lambda x: T.reduce(T.mul(T.log_softmax(T.reshape(x, (3, 4))), Tensor(np.linspace(-1, 1, 12).reshape(3, 4)))),
    "reduce_max": lambda x: T.reduce(T.reduce(T.reshape(x, (3, 4)), axis=1, kind="max")),
    "einsum": lambda x: T.reduce(T.einsum("ab,bc->ac", T.reshape(x, (3, 4)), T.reshape(x, (4, 3)))),
    "einsum3": lambda x: T.reduce(T.einsum("ab,bc,cd->ad", T.reshape(x, (3, 4)), T.reshape(x, (4, 3)), T.reshape(x, (3, 4)))),
    "contract_expand": lambda x: T.reduce(T.mul(T.expand(T.contract(T.reshape(x, (2, 2, 3)), "iij", "ij"), "ij", "iij", (2, 2, 3)), T.reshape(x, (2, 2, 3)))),
    "getitem_gather": lambda x: T.reduce(T.mul(T.getitem(T.reshape(x, (3, 4)), (slice(None), np.array([0, 2, 2, 3]))), 1.5)),
    "getitem_fancy": lambda x: T.reduce(T.getitem(T.reshape(x, (3, 4)), (np.array([0, 0, 2]), slice(1, 3)))),
    "concat_stack": lambda x: T.reduce(T.mul(T.concat([x, x], axis=0), T.stack([x, x]).reshape(-1))),
    "matricize": lambda x: T.reduce(T.mul(T.matricize(T.reshape(x, (2, 3, 2)), 2), T.matricize(T.reshape(x, (2, 3, 2)), 2))),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_kernel_gradients(name):
    x0 = np.random.default_rng(7).normal(size=12)
    assert T.grad_check(OPS[name], x0) < 1e-6


def test_scatter_sum_gradient():
    def f(x):
        x3 = T.reshape(x, (2, 2, 3))
        parts = [(x3, "ijc", "ijc", slice(1, 3)), (x3, "iic", "jic", slice(0, 2)), (x3, "ijc", "jjc", slice(1, 3))]
        out = T.scatter_sum(parts, (2, 2, 2))
        return T.reduce(T.mul(out, out))
    x0 = np.random.default_rng(3).normal(size=12)
    assert T.grad_check(f, x0) < 1e-6


_spec_letters = "abcde"


@st.composite
def two_operand_specs(draw):
    la = draw(st.lists(st.sampled_from(_spec_letters), min_size=1, max_size=4, unique=True))
    lb = draw(st.lists(st.sampled_from(_spec_letters), min_size=1, max_size=4, unique=True))
    pool = sorted(set(la) | set(lb))
    out = draw(st.lists(st.sampled_from(pool), max_size=len(pool), unique=True))
    return "".join(la), "".join(lb), "".join(out)


@given(two_operand_specs())
@settings(max_examples=80, deadline=None)
def test_einsum_matches_numpy(spec):
    sa, sb, so = spec
    size = {ch: 2 + k % 3 for k, ch in enumerate(_spec_letters)}
    rng = np.random.default_rng(len(sa) * 7 + len(sb))
    a = rng.normal(size=[size[c] for c in sa])
    b = rng.normal(size=[size[c] for c in sb])
    got = T.einsum(f"{sa},{sb}->{so}", a, b).data
    np.testing.assert_allclose(got, np.einsum(f"{sa},{sb}->{so}", a, b), atol=1e-12)


def test_einsum_rejects_repeated_subscripts():
    with pytest.raises(ValueError):
        T.einsum("ii->i", np.eye(2))


@given(hnp.arrays(np.float64, (3, 4), elements=st.floats(-10, 10)))
def test_operations_stay_finite(x):
    y = T.softmax(T.mul(T.relu(x), T.exp(T.scale(x, 0.1))), axis=1)
    assert np.all(np.isfinite(y.data))


def test_layer_norm_oracle_and_gradient():
    rng = np.random.default_rng(31)
    x = rng.normal(size=(3, 4, 5)) * 3 + 1
    want = (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + 1e-5)
    np.testing.assert_allclose(T.layer_norm(x).data, want, atol=1e-12)
    w = rng.normal(size=x.shape)
    assert T.grad_check(lambda t: T.reduce(T.mul(T.layer_norm(t), w)), x) < 1e-6
