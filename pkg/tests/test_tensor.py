import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import gradient_relative_error
from spreg import tensor as T
from spreg.errors import ContractError, ShapeError
from spreg.params import AdamState, ParameterStore, adam_step
from spreg.tensor import Tensor


def leaf(rng, *shape, positive=False):
    x = rng.normal(size=shape)
    if positive:
        x = np.abs(x) + 0.5
    return Tensor(x, requires_grad=True)


UNARY = {
    "exp": T.exp,
    "log": T.log,
    "sqrt": T.sqrt,
    "relu": T.relu,
    "square": T.square,
    "sin": T.sin,
    "softplus": T.softplus,
    "absolute": T.absolute,
    "reciprocal": T.reciprocal,
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name, rng):
    x = leaf(rng, 3, 4, positive=name in ("log", "sqrt", "reciprocal"))
    w = rng.normal(size=(3, 4))
    err = gradient_relative_error(lambda: T.sum(T.mul(UNARY[name](x), Tensor(w))), [x])
    assert err < 1e-6


@pytest.mark.parametrize("axis", [0, 1, -1])
def test_reduction_gradients(axis, rng):
    x = leaf(rng, 4, 5)
    w = rng.normal(size=(4, 5))
    for op in (T.softmax, T.log_softmax):
        assert gradient_relative_error(lambda: T.sum(T.mul(op(x, axis=axis), Tensor(w))), [x]) < 1e-6
    for op in (T.sum, T.mean, T.max, T.logsumexp):
        wv = rng.normal(size=op(x, axis=axis).shape)
        assert gradient_relative_error(lambda: T.sum(T.mul(op(x, axis=axis), Tensor(wv))), [x]) < 1e-6


def test_broadcast_binary_gradients(rng):
    a = leaf(rng, 3, 4)
    b = leaf(rng, 4)
    c = leaf(rng, 3, 1, positive=True)
    f = lambda: T.sum(T.square(T.sub(T.add(T.mul(a, b), T.scale(b, 2.0)), a / c)))  # noqa: E731
    assert gradient_relative_error(f, [a, b, c]) < 1e-6


def test_matmul_einsum_layer_norm_gradients(rng):
    a = leaf(rng, 2, 3, 4)
    W = leaf(rng, 4, 5)
    g = leaf(rng, 5)
    bta = leaf(rng, 5)
    wv = rng.normal(size=(2, 3, 5))
    f = lambda: T.sum(T.mul(T.layer_norm(T.matmul(a, W), g, bta), Tensor(wv)))  # noqa: E731
    assert gradient_relative_error(f, [a, W, g, bta]) < 1e-6
    q = leaf(rng, 3, 4)
    r = leaf(rng, 3, 3, 4)
    f2 = lambda: T.sum(T.square(T.einsum("ic,ijc->ij", q, r)))  # noqa: E731
    assert gradient_relative_error(f2, [q, r]) < 1e-6


def test_indexing_and_concat_gradients(rng):
    a = leaf(rng, 5, 3)
    b = leaf(rng, 2, 3)
    idx = np.array([0, 4, 4, 1])
    wv = rng.normal(size=(4, 3))
    f = lambda: T.sum(T.mul(T.gather_rows(T.concat_rows([a, b]), idx), Tensor(wv)))  # noqa: E731
    assert gradient_relative_error(f, [a, b]) < 1e-6
    f2 = lambda: T.sum(T.square(T.transpose(T.reshape(a, (3, 5)))))  # noqa: E731
    assert gradient_relative_error(f2, [a]) < 1e-6


def test_l2_normalize_and_softmax_variants(rng):
    x = leaf(rng, 4, 3)
    w = rng.normal(size=(4, 3))
    assert gradient_relative_error(lambda: T.sum(T.mul(T.l2_normalize(x), Tensor(w))), [x]) < 1e-6
    assert np.allclose(T.col_softmax(x).data.sum(0), 1.0)
    assert np.allclose(T.row_softmax(x).data.sum(1), 1.0)


def test_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
    with pytest.raises(ShapeError):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4,))))


def test_backward_non_scalar_is_contract_error(rng):
    x = leaf(rng, 3)
    with pytest.raises(ContractError):
        T.backward(T.scale(x, 2.0))


def test_detach_blocks_gradient(rng):
    x = leaf(rng, 3)
    y = T.add(T.sum(T.detach(x)), T.sum(T.scale(x, 3.0)))
    T.backward(y)
    assert np.allclose(x.grad, 3.0)
    assert np.array_equal(T.detach(x).data, x.data)


def test_gradients_accumulate_and_unreached_stay_none(rng):
    x, unused = leaf(rng, 2), leaf(rng, 2)
    T.backward(T.sum(x))
    T.backward(T.sum(T.scale(x, 2.0)))
    assert np.allclose(x.grad, 3.0)
    assert unused.grad is None


def test_shared_subexpression_counts_twice(rng):
    x = leaf(rng, 3)
    y = T.exp(x)
    T.backward(T.sum(T.add(y, y)))
    assert np.allclose(x.grad, 2 * np.exp(x.data))


@given(st.lists(st.floats(-30, 30), min_size=1, max_size=12))
@settings(max_examples=60, deadline=None)
def test_softmax_is_a_distribution(values):
    p = T.softmax(Tensor(np.array(values))).data
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) < 1e-12


# ---------------------------------------------------------------- params / Adam


def test_adam_matches_hand_formula():
    store = ParameterStore(0)
    p = store.add("w", np.array([1.0, -2.0]))
    state = AdamState(lr=0.1, weight_decay=0.01)
    m = v = np.zeros(2)
    ref = p.data.copy()
    for step in range(1, 4):
        g = np.array([0.5, -1.5]) * step
        p.grad = g.copy()
        adam_step(store, state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        upd = (m / (1 - 0.9**step)) / (np.sqrt(v / (1 - 0.999**step)) + 1e-8)
        ref = ref - 0.1 * (upd + 0.01 * ref)
        assert np.allclose(p.data, ref, atol=1e-14)
        assert np.all(p.grad == 0)
    assert state.step == 3


def test_adam_missing_grad_names_path():
    store = ParameterStore(0)
    store.add("enc/w", np.ones(2))
    with pytest.raises(ContractError, match="enc/w"):
        adam_step(store, AdamState())


def test_glorot_init_is_order_independent():
    a, b = ParameterStore(3), ParameterStore(3)
    a.get_or_create("x", (4, 5))
    a.get_or_create("y", (5, 2))
    b.get_or_create("y", (5, 2))
    b.get_or_create("x", (4, 5))
    assert np.array_equal(a["x"].data, b["x"].data)
    bound = np.sqrt(6 / 9)
    assert np.all(np.abs(a["x"].data) <= bound)


def test_spwt_roundtrip_is_float32_exact(rng):
    store = ParameterStore(0)
    store.add("b/w", rng.normal(size=(3, 4)))
    store.add("a/bias", rng.normal(size=(4,)))
    store.add("slack", np.array(1.25))
    blob = store.to_bytes()
    assert blob[:4] == b"SPWT"
    back = ParameterStore.read(io.BytesIO(blob))
    assert list(back) == ["a/bias", "b/w", "slack"]
    for k, t in store.items():
        assert np.array_equal(back[k].data, t.data.astype(np.float32).astype(np.float64))
    assert back.to_bytes() == blob


def test_spwt_rejects_bad_magic():
    with pytest.raises(ValueError):
        ParameterStore.from_bytes(b"NOPE" + b"\0" * 8)
