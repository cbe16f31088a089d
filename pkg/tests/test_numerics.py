import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from masklab import numerics as nm
from masklab.errors import (CheckpointError, ConfigError, ContractError,
                            InputError, ShapeError)


def gradcheck(f, x, h=1e-5, tol=1e-6):
    err = nm.finite_diff_check(f, x, h=h)
    assert err <= tol, f"max rel err {err:.3e} > {tol:.1e}"


def rand(shape, seed=0, lo=-1.0, hi=1.0):
    rng = np.random.default_rng(seed)
    return nm.Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


class TestTensor:
    def test_rejects_nonfinite_at_construction(self):
        with pytest.raises(InputError):
            nm.Tensor([1.0, np.nan])
        with pytest.raises(InputError):
            nm.Tensor([np.inf])

    def test_buffers_are_write_locked(self):
        t = nm.Tensor([[1.0, 2.0]])
        with pytest.raises(ValueError):
            t.data[0, 0] = 5.0

    def test_debug_mode_flags_nonfinite_op_results(self):
        nm.set_debug_checks(True)
        try:
            # the overflow is the point here; keep numpy quiet about it
            with np.errstate(over="ignore"):
                with pytest.raises(InputError):
                    nm.exp(nm.Tensor([1000.0]))
        finally:
            nm.set_debug_checks(False)

    def test_shape_size_consistency(self):
        t = nm.Tensor(np.zeros((2, 3, 4)))
        assert t.size == 24 and t.shape == (2, 3, 4)


class TestMatmul:
    def test_identity(self):
        out = nm.matmul(nm.Tensor(np.eye(2)), nm.Tensor([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_array_equal(out.data, [[1.0, 2.0], [3.0, 4.0]])

    def test_unit_selection(self):
        out = nm.matmul(nm.Tensor([[1.0, 0.0]]), nm.Tensor([[2.0], [5.0]]))
        np.testing.assert_array_equal(out.data, [[2.0]])

    def test_gradient_both_inputs(self):
        a = rand((3, 4), seed=1)
        b = rand((4, 2), seed=2)
        gradcheck(lambda t: nm.tsum(nm.matmul(t, nm.Tensor(b.data))), a)
        gradcheck(lambda t: nm.tsum(nm.matmul(nm.Tensor(a.data), t)), b)

    def test_stacked_times_2d_gradient(self):
        a = rand((2, 3, 4), seed=3)
        b = rand((4, 5), seed=4)
        gradcheck(lambda t: nm.tsum(nm.matmul(t, nm.Tensor(b.data))), a)
        gradcheck(lambda t: nm.tsum(nm.matmul(nm.Tensor(a.data), t)), b)

    def test_stacked_times_stacked_gradient(self):
        a = rand((2, 3, 4), seed=5)
        b = rand((2, 4, 3), seed=6)
        gradcheck(lambda t: nm.tsum(nm.matmul(t, nm.Tensor(b.data))), a)
        gradcheck(lambda t: nm.tsum(nm.matmul(nm.Tensor(a.data), t)), b)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            nm.matmul(nm.Tensor(np.zeros((2, 3))), nm.Tensor(np.zeros((2, 3))))
        with pytest.raises(ShapeError):
            nm.matmul(nm.Tensor(np.zeros((2, 2, 3))), nm.Tensor(np.zeros((3, 3, 4))))


class TestSoftmax:
    def test_symmetry(self):
        out = nm.softmax_lastdim(nm.Tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, [1 / 3, 1 / 3, 1 / 3], rtol=1e-15)

    def test_hand_computed(self):
        out = nm.softmax_lastdim(nm.Tensor([math.log(2.0), 0.0]))
        np.testing.assert_allclose(out.data, [2 / 3, 1 / 3], rtol=1e-15)

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=8),
           st.floats(-50, 50))
    @settings(max_examples=100, deadline=None)
    def test_rows_sum_to_one_and_shift_invariance(self, row, c):
        x = nm.Tensor(row)
        y = nm.softmax_lastdim(x)
        assert abs(float(y.data.sum()) - 1.0) <= 1e-12
        y2 = nm.softmax_lastdim(nm.add_scalar(x, c))
        np.testing.assert_allclose(y2.data, y.data, atol=1e-12)

    def test_gradient(self):
        x = rand((3, 5), seed=7)
        gradcheck(lambda t: nm.tsum(nm.mul(nm.softmax_lastdim(t),
                                           nm.Tensor(rand((3, 5), 8).data))), x)

    def test_log_softmax_matches_log_of_softmax(self):
        x = rand((4, 6), seed=9, lo=-3, hi=3)
        direct = nm.log_softmax_lastdim(x).data
        composed = np.log(nm.softmax_lastdim(x).data)
        np.testing.assert_allclose(direct, composed, atol=1e-12)
        gradcheck(lambda t: nm.tsum(nm.mul(nm.log_softmax_lastdim(t),
                                           nm.Tensor(rand((4, 6), 10).data))), x)


class TestLayerNorm:
    def test_constant_slice_maps_to_zero(self):
        x = nm.Tensor(np.full((2, 4), 3.7))
        out = nm.layer_norm(x, nm.Tensor(np.ones(4)), nm.Tensor(np.zeros(4)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_unit_variance_pair(self):
        x = nm.Tensor([[1.0, -1.0]])
        out = nm.layer_norm(x, nm.Tensor(np.ones(2)), nm.Tensor(np.zeros(2)),
                            eps=1e-12)
        np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-6)

    def test_normalizes_before_affine(self):
        x = rand((5, 8), seed=11, lo=-4, hi=4)
        out = nm.layer_norm(x, nm.Tensor(np.ones(8)), nm.Tensor(np.zeros(8)))
        np.testing.assert_allclose(out.data.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.data.var(axis=-1), 1.0, atol=1e-4)

    def test_gradients(self):
        x = rand((3, 6), seed=12)
        g = rand((6,), seed=13)
        b = rand((6,), seed=14)
        w = nm.Tensor(rand((3, 6), 15).data)
        gradcheck(lambda t: nm.tsum(nm.mul(nm.layer_norm(
            t, nm.Tensor(g.data), nm.Tensor(b.data)), w)), x, tol=1e-5)
        gradcheck(lambda t: nm.tsum(nm.mul(nm.layer_norm(
            nm.Tensor(x.data), t, nm.Tensor(b.data)), w)), g, tol=1e-5)
        gradcheck(lambda t: nm.tsum(nm.mul(nm.layer_norm(
            nm.Tensor(x.data), nm.Tensor(g.data), t), w)), b, tol=1e-5)

    def test_affine_shape_mismatch(self):
        with pytest.raises(ShapeError):
            nm.layer_norm(nm.Tensor(np.zeros((2, 4))), nm.Tensor(np.ones(3)),
                          nm.Tensor(np.zeros(4)))


class TestGrl:
    def test_identity_forward(self):
        x = nm.Tensor([1.0, 2.0, 3.0])
        np.testing.assert_array_equal(nm.grl(x, 1.0).data, [1.0, 2.0, 3.0])

    def test_sign_flip_backward(self):
        x = nm.Tensor([5.0, -2.0], requires_grad=True)
        with nm.Tape() as tape:
            loss = nm.tsum(nm.grl(x, 1.0))
        np.testing.assert_array_equal(tape.backward(loss).wrt(x), [-1.0, -1.0])

    def test_composed_gradient_is_minus_lambda_times_plain(self):
        lam = 1.7
        rng = np.random.default_rng(16)
        base = rng.normal(size=5)

        def f(t):
            return nm.tsum(nm.mul(t, t))

        x = nm.Tensor(base, requires_grad=True)
        with nm.Tape() as tape:
            loss = f(nm.grl(x, lam))
        through_grl = tape.backward(loss).wrt(x)
        # forward of grl is identity, so finite differences see plain f
        numeric = np.array([
            (f(nm.Tensor(base + h_vec)).item() - f(nm.Tensor(base - h_vec)).item())
            / (2 * 1e-6)
            for h_vec in np.eye(5) * 1e-6
        ])
        np.testing.assert_allclose(through_grl, -lam * numeric, rtol=1e-6)

    def test_rejects_nonpositive_lambda(self):
        with pytest.raises(ConfigError):
            nm.grl(nm.Tensor([1.0]), 0.0)
        with pytest.raises(ConfigError):
            nm.grl(nm.Tensor([1.0]), -0.5)


class TestBackward:
    def test_linear_case(self):
        x = nm.Tensor(np.zeros(3), requires_grad=True)
        with nm.Tape() as tape:
            loss = nm.tsum(x)
        np.testing.assert_array_equal(tape.backward(loss).wrt(x), [1.0, 1.0, 1.0])

    def test_quadratic_case(self):
        x = nm.Tensor([1.0, 2.0], requires_grad=True)
        with nm.Tape() as tape:
            loss = nm.tsum(nm.mul(x, x))
        np.testing.assert_array_equal(tape.backward(loss).wrt(x), [2.0, 4.0])

    def test_unused_leaf_gets_zero(self):
        x = nm.Tensor([1.0], requires_grad=True)
        y = nm.Tensor([3.0], requires_grad=True)
        with nm.Tape() as tape:
            loss = nm.tsum(nm.mul(x, x))
        np.testing.assert_array_equal(tape.backward(loss).wrt(y), [0.0])

    def test_non_scalar_loss_rejected(self):
        x = nm.Tensor([1.0, 2.0], requires_grad=True)
        with nm.Tape() as tape:
            y = nm.mul(x, x)
        with pytest.raises((ShapeError, ContractError)):
            tape.backward(y)

    def test_off_tape_loss_rejected(self):
        x = nm.Tensor([1.0], requires_grad=True)
        tape = nm.Tape()
        with tape:
            pass
        loss = nm.tsum(x)  # built outside the tape
        with pytest.raises(ContractError):
            tape.backward(loss)

    def test_fan_out_accumulates(self):
        x = nm.Tensor([3.0], requires_grad=True)
        with nm.Tape() as tape:
            loss = nm.tsum(nm.add(nm.mul(x, x), x))  # d/dx = 2x + 1
        np.testing.assert_allclose(tape.backward(loss).wrt(x), [7.0])

    def test_insertion_order_is_topological(self):
        x = nm.Tensor([1.0, 2.0], requires_grad=True)
        with nm.Tape() as tape:
            y = nm.mul(x, x)
            z = nm.add(y, x)
            nm.tsum(z)
        for node in tape.nodes:
            assert all(p < node.idx for p in node.parents if p >= 0)

    def test_bit_identical_replay(self):
        rng = np.random.default_rng(17)
        data = rng.normal(size=(4, 4))

        def run():
            x = nm.Tensor(data, requires_grad=True)
            with nm.Tape() as tape:
                loss = nm.tsum(nm.softmax_lastdim(nm.matmul(x, x)))
            return loss.item(), tape.backward(loss).wrt(x)

        l1, g1 = run()
        l2, g2 = run()
        assert l1 == l2
        assert g1.tobytes() == g2.tobytes()


class TestFiniteDiffCheck:
    def test_exact_for_linear(self):
        assert nm.finite_diff_check(nm.tsum, rand((4,), 18)) <= 1e-10

    def test_softmax_pick_first(self):
        x = nm.Tensor([0.1, 0.2], requires_grad=True)

        def f(t):
            return nm.slice_axis(nm.softmax_lastdim(t), 0, 0, 1)

        assert nm.finite_diff_check(f, x) <= 1e-6

    def test_step_size_bounds(self):
        with pytest.raises(ConfigError):
            nm.finite_diff_check(nm.tsum, rand((2,), 19), h=1e-8)
        with pytest.raises(ConfigError):
            nm.finite_diff_check(nm.tsum, rand((2,), 19), h=1e-2)

    def test_coordinate_subset(self):
        x = rand((3, 3), seed=20)
        err = nm.finite_diff_check(lambda t: nm.tsum(nm.mul(t, t)), x,
                                   coords=[(0, 0), (2, 2)])
        assert err <= 1e-8


class TestElementwiseGradients:
    def test_add_sub_mul_div(self):
        a = rand((3, 4), seed=21)
        b = rand((3, 4), seed=22, lo=0.5, hi=2.0)
        for op in (nm.add, nm.sub, nm.mul, nm.div):
            gradcheck(lambda t, op=op: nm.tsum(op(t, nm.Tensor(b.data))), a)
            gradcheck(lambda t, op=op: nm.tsum(op(nm.Tensor(a.data), t)), b)

    def test_shape_strictness(self):
        with pytest.raises(ShapeError):
            nm.add(nm.Tensor(np.zeros((2, 3))), nm.Tensor(np.zeros(3)))

    def test_scalar_family(self):
        x = rand((5,), seed=23, lo=0.5, hi=3.0)
        gradcheck(lambda t: nm.tsum(nm.scale(t, -2.5)), x)
        gradcheck(lambda t: nm.tsum(nm.add_scalar(t, 4.0)), x)
        gradcheck(lambda t: nm.tsum(nm.exp(t)), x)
        gradcheck(lambda t: nm.tsum(nm.log(t)), x)
        gradcheck(lambda t: nm.tsum(nm.sqrt(t)), x)
        gradcheck(lambda t: nm.tsum(nm.gelu(t)), x, tol=1e-5)

    def test_clip_min(self):
        x = nm.Tensor([0.5, 2.0], requires_grad=True)
        out = nm.clip_min(x, 1.0)
        np.testing.assert_array_equal(out.data, [1.0, 2.0])
        with nm.Tape() as tape:
            loss = nm.tsum(nm.clip_min(x, 1.0))
        np.testing.assert_array_equal(tape.backward(loss).wrt(x), [0.0, 1.0])

    def test_log_rejects_nonpositive(self):
        with pytest.raises(InputError):
            nm.log(nm.Tensor([0.0]))


class TestShapeOpsGradients:
    def test_broadcast_to(self):
        x = rand((1, 4), seed=24)
        gradcheck(lambda t: nm.tsum(nm.mul(nm.broadcast_to(t, (3, 4)),
                                           nm.Tensor(rand((3, 4), 25).data))), x)
        y = rand((4,), seed=26)
        gradcheck(lambda t: nm.tsum(nm.mul(nm.broadcast_to(t, (2, 3, 4)),
                                           nm.Tensor(rand((2, 3, 4), 27).data))), y)

    def test_reshape_transpose(self):
        x = rand((2, 6), seed=28)
        w = nm.Tensor(rand((3, 4), 29).data)
        gradcheck(lambda t: nm.tsum(nm.mul(nm.reshape(t, (3, 4)), w)), x)
        x2 = rand((2, 3, 4), seed=30)
        w2 = nm.Tensor(rand((4, 2, 3), 31).data)
        gradcheck(lambda t: nm.tsum(nm.mul(nm.transpose(t, (2, 0, 1)), w2)), x2)

    def test_concat_slice(self):
        a = rand((2, 3), seed=32)
        b = rand((2, 2), seed=33)
        w = nm.Tensor(rand((2, 5), 34).data)
        gradcheck(lambda t: nm.tsum(nm.mul(
            nm.concat([t, nm.Tensor(b.data)], axis=1), w)), a)
        gradcheck(lambda t: nm.tsum(nm.mul(
            nm.concat([nm.Tensor(a.data), t], axis=1), w)), b)
        x = rand((4, 5), seed=35)
        gradcheck(lambda t: nm.tsum(nm.slice_axis(t, 1, 1, 4)), x)

    def test_reductions(self):
        x = rand((3, 4), seed=36)
        gradcheck(lambda t: nm.tsum(t), x)
        gradcheck(lambda t: nm.tmean(t), x)
        gradcheck(lambda t: nm.tsum(nm.tsum(t, axis=1)), x)
        gradcheck(lambda t: nm.tsum(nm.tmean(t, axis=0, keepdims=True)), x)
        gradcheck(lambda t: nm.tsum(nm.tmax(t, axis=1)), x)

    def test_max_ties_take_lowest_index(self):
        x = nm.Tensor([1.0, 3.0, 3.0], requires_grad=True)
        with nm.Tape() as tape:
            loss = nm.tsum(nm.tmax(x, axis=0))
        np.testing.assert_array_equal(tape.backward(loss).wrt(x), [0.0, 1.0, 0.0])


class TestEmbedding:
    def test_lookup_and_scatter(self):
        w = nm.Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
        ids = np.array([[0, 2], [2, 3]])
        out = nm.embedding(w, ids)
        np.testing.assert_array_equal(out.data[0, 1], [6.0, 7.0, 8.0])
        with nm.Tape() as tape:
            loss = nm.tsum(nm.embedding(w, ids))
        grad = tape.backward(loss).wrt(w)
        np.testing.assert_array_equal(grad[:, 0], [1.0, 0.0, 2.0, 1.0])

    def test_rejects_bad_ids(self):
        w = nm.Tensor(np.zeros((4, 3)))
        with pytest.raises(InputError):
            nm.embedding(w, np.array([4]))
        with pytest.raises(InputError):
            nm.embedding(w, np.array([0.5]))


class TestStopGradient:
    def test_blocks_flow(self):
        x = nm.Tensor([2.0], requires_grad=True)
        with nm.Tape() as tape:
            loss = nm.tsum(nm.mul(x, nm.stop_gradient(nm.mul(x, x))))
        # d/dx of x * const(x^2) = x^2 only
        np.testing.assert_allclose(tape.backward(loss).wrt(x), [4.0])


class TestSerialization:
    def test_bit_exact_roundtrip_mixed_magnitudes(self, tmp_path):
        rng = np.random.default_rng(37)
        vals = rng.normal(size=10 ** 6) * 10.0 ** rng.integers(-200, 200, 10 ** 6)
        path = tmp_path / "big.tns"
        nm.save_tensor(path, vals, name="big")
        name, back = nm.load_tensor(path)
        assert name == "big"
        assert back.tobytes() == vals.tobytes()

    def test_shape_preserved(self, tmp_path):
        arr = np.arange(24.0).reshape(2, 3, 4)
        path = tmp_path / "t.tns"
        nm.save_tensor(path, arr, name="t")
        _, back = nm.load_tensor(path)
        assert back.shape == (2, 3, 4)
        np.testing.assert_array_equal(back, arr)

    def test_zero_dim_roundtrip(self, tmp_path):
        path = tmp_path / "s.tns"
        nm.save_tensor(path, np.asarray(-2.9957), name="s")
        _, back = nm.load_tensor(path)
        assert back.shape == ()
        assert back == np.asarray(-2.9957)

    def test_truncated_payload_rejected(self, tmp_path):
        path = tmp_path / "bad.tns"
        nm.save_tensor(path, np.ones(8), name="x")
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with pytest.raises(CheckpointError):
            nm.load_tensor(path)

    def test_malformed_header_rejected(self, tmp_path):
        path = tmp_path / "junk.tns"
        path.write_bytes(b"not json\n" + b"\x00" * 16)
        with pytest.raises(CheckpointError):
            nm.load_tensor(path)


class TestCompositeGradients:
    def test_attention_shaped_composite(self):
        # miniature QK^T -> softmax -> weighted V pipeline, one head
        rng = np.random.default_rng(38)
        q = nm.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        k = nm.Tensor(rng.normal(size=(3, 4)))
        v = nm.Tensor(rng.normal(size=(3, 4)))
        w = nm.Tensor(rng.normal(size=(3, 4)))

        def f(t):
            scores = nm.scale(nm.matmul(t, nm.swap_last2(nm.Tensor(k.data))), 0.5)
            att = nm.softmax_lastdim(scores)
            return nm.tsum(nm.mul(nm.matmul(att, nm.Tensor(v.data)),
                                  nm.Tensor(w.data)))

        gradcheck(f, q, tol=1e-4)
