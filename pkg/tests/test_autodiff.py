import numpy as np
import pytest

from cascadehmm import autodiff as ad
from helpers import finite_diff_grad, rel_err


def scalar_loss(expr):
    """Reduce any tensor to a scalar via a fixed, irregular weighted sum."""
    w = np.cos(np.arange(1.0, expr.data.size + 1.0)).reshape(expr.data.shape)
    s = ad.mul(expr, ad.Tensor(w))
    while s.data.ndim > 0:
        s = ad.scalar_mul(ad.mean(s, axis=0), s.data.shape[0])
    return s


def check_grads(build, arrays, eps=1e-5, tol=1e-4):
    """Analytic grads of scalar build(*tensors) vs central finite differences."""
    tensors = [ad.Tensor(a, requires_grad=True) for a in arrays]
    with ad.Tape():
        loss = build(*tensors)
        ad.backward(loss)

    for i, t in enumerate(tensors):
        def f(i=i):
            ts = [ad.Tensor(a) for a in arrays]
            return float(build(*ts).data)

        fd = finite_diff_grad(lambda: f(), arrays[i], eps=eps)
        assert t.grad is not None
        assert rel_err(t.grad, fd) < tol, f"input {i}: analytic {t.grad} vs fd {fd}"


class TestForward:
    def test_matmul_shape(self):
        out = ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((3, 4))))
        assert out.shape == (2, 4)

    def test_matmul_shape_mismatch(self):
        with pytest.raises(ad.OpError, match="matmul"):
            ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((4, 2))))

    def test_add_broadcast_mismatch(self):
        with pytest.raises(ad.OpError, match="add"):
            ad.add(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones(2)))

    def test_logsumexp_two_zeros(self):
        out = ad.logsumexp(ad.Tensor([0.0, 0.0]))
        assert out.shape == ()
        assert abs(float(out.data) - np.log(2.0)) < 1e-12

    def test_softmax_symmetry(self):
        out = ad.softmax(ad.Tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, np.ones(3) / 3.0, rtol=0, atol=1e-15)

    def test_trailing_broadcast_add(self):
        a = np.arange(6.0).reshape(2, 3)
        b = np.array([10.0, 20.0, 30.0])
        out = ad.add(ad.Tensor(a), ad.Tensor(b))
        np.testing.assert_array_equal(out.data, a + b)

    def test_logsumexp_all_neginf(self):
        out = ad.logsumexp(ad.Tensor([-np.inf, -np.inf]))
        assert np.isneginf(out.data)

    def test_log_normalize_uniform_fill(self):
        with np.errstate(divide="ignore"):
            j = np.log(np.array([[0.5, 0.5], [0.0, 0.0]]))
        out = ad.log_normalize(ad.Tensor(j), axis=1)
        np.testing.assert_allclose(out.data[0], np.log([0.5, 0.5]))
        np.testing.assert_allclose(out.data[1], np.full(2, -np.log(2.0)))

    def test_l2_normalize_unit_rows(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(5, 7))
        out = ad.l2_normalize_rows(ad.Tensor(x))
        norms = np.linalg.norm(out.data, axis=-1)
        assert np.all(np.abs(norms - 1.0) < 1e-12)

    def test_l2_normalize_zero_row(self):
        out = ad.l2_normalize_rows(ad.Tensor(np.zeros((1, 4))))
        np.testing.assert_array_equal(out.data, np.zeros((1, 4)))

    def test_gather_rows_out_of_range(self):
        with pytest.raises(ad.OpError, match="gather_rows"):
            ad.gather_rows(ad.Tensor(np.ones((3, 2))), [3])


class TestBackward:
    def test_sum_of_squares(self):
        x = ad.Tensor([1.0, 2.0, 3.0], requires_grad=True)
        with ad.Tape():
            sq = ad.mul(x, x)
            loss = ad.scalar_mul(ad.mean(sq, axis=0), 3.0)
            ad.backward(loss)
        np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0], rtol=0, atol=0)

    def test_logsumexp_grad_is_softmax(self):
        x = ad.Tensor([0.0, 0.0], requires_grad=True)
        with ad.Tape():
            ad.backward(ad.logsumexp(x))
        np.testing.assert_allclose(x.grad, [0.5, 0.5], rtol=0, atol=1e-15)

    def test_backward_requires_scalar(self):
        x = ad.Tensor([1.0, 2.0], requires_grad=True)
        with ad.Tape():
            y = ad.relu(x)
            with pytest.raises(ad.OpError, match="scalar"):
                ad.backward(y)

    def test_backward_requires_tape(self):
        x = ad.Tensor(3.0, requires_grad=True)
        with pytest.raises(ad.OpError, match="tape"):
            ad.backward(x)

    def test_double_backward_doubles_exactly(self):
        rng = np.random.default_rng(1)
        x = ad.Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        with ad.Tape():
            loss = scalar_loss(ad.log_softmax(ad.relu(x)))
            ad.backward(loss)
            first = x.grad.copy()
            ad.backward(loss)
        np.testing.assert_array_equal(x.grad, 2.0 * first)

    def test_fanout_accumulates(self):
        x = ad.Tensor(2.0, requires_grad=True)
        with ad.Tape():
            y = ad.add(ad.mul(x, x), ad.mul(x, x))
            ad.backward(y)
        assert float(x.grad) == pytest.approx(8.0)

    def test_no_tape_means_no_grad(self):
        x = ad.Tensor([1.0, -1.0], requires_grad=True)
        y = ad.relu(x)
        assert not y.requires_grad
        assert y._tape is None


class TestGradientOracle:
    """Every supported op against the finite-difference oracle."""

    rng = np.random.default_rng(42)

    def test_add(self):
        check_grads(lambda a, b: scalar_loss(ad.add(a, b)),
                    [self.rng.normal(size=(3, 4)), self.rng.normal(size=(3, 4))])

    def test_add_broadcast(self):
        check_grads(lambda a, b: scalar_loss(ad.add(a, b)),
                    [self.rng.normal(size=(2, 3, 4)), self.rng.normal(size=(4,))])

    def test_sub_broadcast(self):
        check_grads(lambda a, b: scalar_loss(ad.sub(a, b)),
                    [self.rng.normal(size=(3, 4)), self.rng.normal(size=(4,))])

    def test_mul_broadcast(self):
        check_grads(lambda a, b: scalar_loss(ad.mul(a, b)),
                    [self.rng.normal(size=(3, 4)), self.rng.normal(size=(4,))])

    def test_mul_by_scalar_tensor(self):
        check_grads(lambda a, s: scalar_loss(ad.mul(a, s)),
                    [self.rng.normal(size=(3,)), np.array(1.7)])

    def test_matmul_2d_2d(self):
        check_grads(lambda a, b: scalar_loss(ad.matmul(a, b)),
                    [self.rng.normal(size=(3, 4)), self.rng.normal(size=(4, 2))])

    def test_matmul_2d_1d(self):
        check_grads(lambda a, b: scalar_loss(ad.matmul(a, b)),
                    [self.rng.normal(size=(3, 4)), self.rng.normal(size=(4,))])

    def test_matmul_1d_2d(self):
        check_grads(lambda a, b: scalar_loss(ad.matmul(a, b)),
                    [self.rng.normal(size=(4,)), self.rng.normal(size=(4, 3))])

    def test_transpose(self):
        check_grads(lambda a: scalar_loss(ad.mul(ad.transpose(a), ad.transpose(a))),
                    [self.rng.normal(size=(3, 5))])

    def test_transpose_permutation(self):
        check_grads(
            lambda a: scalar_loss(ad.transpose(a, (2, 0, 1))),
            [self.rng.normal(size=(2, 3, 4))],
        )

    def test_relu(self):
        check_grads(lambda a: scalar_loss(ad.relu(a)),
                    [self.rng.normal(size=(4, 4)) + 0.05])

    def test_softmax(self):
        check_grads(lambda a: scalar_loss(ad.softmax(a)),
                    [self.rng.normal(size=(3, 5))])

    def test_log_softmax(self):
        check_grads(lambda a: scalar_loss(ad.log_softmax(a)),
                    [self.rng.normal(size=(3, 5))])

    def test_logsumexp(self):
        check_grads(lambda a: scalar_loss(ad.logsumexp(a)),
                    [self.rng.normal(size=(3, 5))])

    def test_log_normalize_axis0(self):
        check_grads(lambda a: scalar_loss(ad.log_normalize(a, axis=0)),
                    [self.rng.normal(size=(4, 3))])

    def test_log_normalize_axis2(self):
        check_grads(lambda a: scalar_loss(ad.log_normalize(a, axis=2)),
                    [self.rng.normal(size=(2, 3, 3))])

    def test_layer_norm(self):
        check_grads(lambda a: scalar_loss(ad.layer_norm(a)),
                    [self.rng.normal(size=(4, 6))])

    def test_l2_normalize_rows(self):
        check_grads(lambda a: scalar_loss(ad.l2_normalize_rows(a)),
                    [self.rng.normal(size=(3, 5))])

    def test_gather_rows_with_duplicates(self):
        check_grads(lambda a: scalar_loss(ad.gather_rows(a, [0, 2, 2, 1])),
                    [self.rng.normal(size=(3, 4))])

    def test_mean(self):
        check_grads(lambda a: scalar_loss(ad.mean(a, axis=1)),
                    [self.rng.normal(size=(3, 5))])

    def test_max(self):
        check_grads(lambda a: scalar_loss(ad.max_along(a, axis=0)),
                    [self.rng.normal(size=(6, 4))])

    def test_scalar_mul(self):
        check_grads(lambda a: scalar_loss(ad.scalar_mul(a, -2.5)),
                    [self.rng.normal(size=(3,))])

    def test_composite_graph(self):
        # A deeper mixed graph, the shape of real encoder math.
        def build(w1, w2, b):
            h = ad.layer_norm(ad.add(ad.matmul(w1, w2), b))
            h = ad.relu(ad.add(h, ad.Tensor(0.1 * np.ones(5))))
            return scalar_loss(ad.log_softmax(h))

        check_grads(build, [self.rng.normal(size=(3, 4)),
                            self.rng.normal(size=(4, 5)),
                            self.rng.normal(size=(5,))])


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(7)
        arrays = {
            "weights": rng.normal(size=(4, 3)),
            "bias": rng.normal(size=(3,)),
            "scalar": np.array(10.0),
        }
        ad.save_arrays(tmp_path / "ckpt", arrays, meta={"kind": "test"})
        loaded, meta = ad.load_arrays(tmp_path / "ckpt")
        assert meta == {"kind": "test"}
        assert list(loaded) == list(arrays)
        for name in arrays:
            assert loaded[name].dtype == np.float64
            assert loaded[name].shape == arrays[name].shape
            assert loaded[name].tobytes() == np.ascontiguousarray(arrays[name]).tobytes()

    def test_save_twice_byte_identical(self, tmp_path):
        arrays = {"a": np.arange(6.0).reshape(2, 3)}
        ad.save_arrays(tmp_path / "one", arrays, meta={"kind": "t"})
        ad.save_arrays(tmp_path / "two", arrays, meta={"kind": "t"})
        assert (tmp_path / "one" / "arrays.bin").read_bytes() == (tmp_path / "two" / "arrays.bin").read_bytes()
        assert (tmp_path / "one" / "manifest.json").read_bytes() == (tmp_path / "two" / "manifest.json").read_bytes()

    def test_bad_manifest(self, tmp_path):
        d = tmp_path / "ckpt"
        d.mkdir()
        (d / "manifest.json").write_text("{not json")
        with pytest.raises(ValueError, match="manifest"):
            ad.load_arrays(d)
