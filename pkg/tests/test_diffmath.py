import numpy as np
import pytest

from vepm import diffmath as dm
from vepm.diffmath import (
    DiffMathError,
    NondeterministicLoss,
    NonFiniteError,
    ParameterStore,
    backward,
    finite_difference_check,
    load_arrays,
    save_arrays,
)
from vepm.rng import substream
from vepm.verify import _primitive_cases


def test_softmax_temperature_values():
    x = dm.constant(np.array([1.0, 2.0]))
    np.testing.assert_allclose(dm.row_softmax_with_temperature(x, 1.0).value,
                               [0.26894142, 0.73105858], atol=1e-8)
    np.testing.assert_allclose(dm.row_softmax_with_temperature(x, 0.5).value,
                               [0.11920292, 0.88079708], atol=1e-8)


def test_relu_all_negative_zero_output_and_gradient():
    store = ParameterStore()
    x = store.add("x", -np.ones((2, 3)), "phi")
    out = dm.relu(x)
    np.testing.assert_array_equal(out.value, np.zeros((2, 3)))
    backward(dm.reduce_sum(out))
    np.testing.assert_array_equal(store.grad("x"), np.zeros((2, 3)))


def test_backward_sum_gives_ones():
    store = ParameterStore()
    w = store.add("w", np.arange(6.0).reshape(2, 3), "phi")
    backward(dm.reduce_sum(w))
    np.testing.assert_array_equal(store.grad("w"), np.ones((2, 3)))


def test_backward_quadratic_gives_2w():
    store = ParameterStore()
    value = np.array([[1.0, -2.0], [0.5, 3.0]])
    w = store.add("w", value, "phi")
    backward(dm.reduce_sum(dm.elementwise_mul(w, w)))
    np.testing.assert_allclose(store.grad("w"), 2 * value)


def test_repeated_backward_accumulates():
    store = ParameterStore()
    w = store.add("w", np.ones(3), "phi")
    backward(dm.reduce_sum(w))
    backward(dm.reduce_sum(w))
    np.testing.assert_array_equal(store.grad("w"), 2 * np.ones(3))


def test_backward_requires_scalar():
    store = ParameterStore()
    w = store.add("w", np.ones(3), "phi")
    with pytest.raises(DiffMathError):
        backward(dm.relu(w))


def test_every_primitive_passes_finite_differences():
    for name, (make_params, build) in _primitive_cases(seed=1).items():
        store = ParameterStore()
        make_params(store)
        err = finite_difference_check(lambda s=store: build(s), store,
                                      eps=1e-5, samples=30, seed=2)
        assert err < 1e-6, f"{name}: {err}"


def test_softmax_rows_sum_to_one_and_shift_invariant():
    rng = substream(0, "softmax-prop")
    for _ in range(20):
        x = rng.normal(0, 3, (5, 4))
        for tau in (0.1, 1.0, 10.0):
            s = dm.row_softmax_with_temperature(dm.constant(x), tau).value
            np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)
            shifted = dm.row_softmax_with_temperature(
                dm.constant(x + rng.normal() * np.ones((5, 1))), tau).value
            np.testing.assert_allclose(s, shifted, atol=1e-12)


def test_concat_then_slice_is_identity():
    rng = substream(1, "concat")
    a, b = rng.random((4, 3)), rng.random((4, 5))
    cat = dm.concat_columns([dm.constant(a), dm.constant(b)])
    np.testing.assert_array_equal(dm.slice_columns(cat, 0, 3).value, a)
    np.testing.assert_array_equal(dm.slice_columns(cat, 3, 8).value, b)


def test_backward_determinism_bit_identical():
    def run():
        store = ParameterStore()
        rng = substream(5, "det")
        w = store.add("w", rng.normal(0, 1, (6, 4)), "phi")
        v = store.add("v", rng.normal(0, 1, (4, 2)), "phi")
        h = dm.relu(dm.matmul(w, v))
        h = dm.dropout(h, 0.3, substream(5, "detdrop"), True)
        backward(dm.reduce_sum(dm.elementwise_mul(h, h)))
        return store.grad("w").copy(), store.grad("v").copy()

    g1, g2 = run(), run()
    assert np.array_equal(g1[0], g2[0]) and np.array_equal(g1[1], g2[1])


def test_dropout_identity_in_eval_and_scaling_in_train():
    x = dm.constant(np.ones((100, 50)))
    assert dm.dropout(x, 0.4, substream(0, "d"), False) is x
    out = dm.dropout(x, 0.4, substream(0, "d"), True).value
    kept = out[out > 0]
    np.testing.assert_allclose(kept, 1.0 / 0.6)
    assert abs((out > 0).mean() - 0.6) < 0.05


def test_gradients_skip_constant_operands():
    store = ParameterStore()
    w = store.add("w", np.ones((3, 3)), "phi")
    big = dm.constant(np.ones((3, 3)))
    out = dm.matmul(big, w)
    assert out.needs == (False, True)
    backward(dm.reduce_sum(out))
    assert big.grad is None
    assert store.grad("w") is not None


def test_non_finite_rejected_in_test_mode():
    with pytest.raises(NonFiniteError):
        dm.log(dm.constant(np.array([0.0, -1.0])))


def test_rank_three_rejected():
    with pytest.raises(DiffMathError):
        dm.constant(np.ones((2, 2, 2)))


def test_checkpoint_round_trip_bit_exact(tmp_path):
    store = ParameterStore()
    rng = substream(9, "ckpt")
    store.add("enc.W", rng.normal(0, 1, (7, 3)), "phi")
    store.add("gamma_raw", rng.normal(0, 1, 4), "shared")
    store.add("scalar", np.asarray(rng.normal()), "theta")
    path = str(tmp_path / "test.ckpt")
    store.save(path, meta={"epoch": "12"})
    entries, meta = load_arrays(path)
    assert meta == {"epoch": "12"}
    for name, group, arr in entries:
        node = store[name]
        assert group == store.group_of(name)
        assert arr.shape == node.value.shape
        assert np.array_equal(arr, node.value)

    other = ParameterStore()
    other.add("enc.W", np.zeros((7, 3)), "phi")
    other.add("gamma_raw", np.zeros(4), "shared")
    other.add("scalar", np.asarray(0.0), "theta")
    got = other.load(path)
    assert got["epoch"] == "12"
    assert np.array_equal(other["enc.W"].value, store["enc.W"].value)


def test_checkpoint_shape_mismatch_rejected(tmp_path):
    path = str(tmp_path / "bad.ckpt")
    save_arrays(path, [("w", "phi", np.ones((2, 2)))])
    store = ParameterStore()
    store.add("w", np.ones((3, 3)), "phi")
    with pytest.raises(DiffMathError, match="shape"):
        store.load(path)


def test_fd_check_detects_nondeterministic_builder():
    store = ParameterStore()
    store.add("w", np.ones(3), "phi")
    rng = substream(0, "nondet")

    def builder():
        return dm.reduce_sum(dm.elementwise_mul(store["w"],
                                                dm.constant(rng.random(3))))

    with pytest.raises(NondeterministicLoss):
        finite_difference_check(builder, store, samples=2)


def test_parameter_groups():
    store = ParameterStore()
    store.add("a", np.ones(2), "phi")
    store.add("b", np.ones(2), "theta")
    store.add("c", np.ones(2), "shared")
    assert store.names("phi") == ["a"]
    assert store.names(("phi", "shared")) == ["a", "c"]
    assert store.names() == ["a", "b", "c"]
    with pytest.raises(DiffMathError):
        store.add("a", np.ones(2), "phi")


def test_fast_mode_smoke():
    dm.set_precision("f32")
    try:
        x = dm.constant(np.ones(4))
        assert x.value.dtype == np.float32
        # non-finite passes through without a check in fast mode
        y = dm.Node(np.array([np.inf], dtype=np.float32))
        assert not np.isfinite(y.value[0])
    finally:
        dm.set_precision("f64")
