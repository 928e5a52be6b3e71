"""Engine-level checks: every op against finite differences, broadcasting,
backward semantics, second-order availability, and determinism."""
import numpy as np
import pytest

from egdiff import autodiff as ad
from egdiff.autodiff import Tensor


def conv2d_oracle(x, k, stride=1, padding=0):
    """Direct nested-loop convolution for small cases."""
    n, c, h, w = x.shape
    kk, ck, kh, kw = k.shape
    assert ck == c
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, kk, oh, ow), dtype=np.float64)
    for ni in range(n):
        for ki in range(kk):
            for oi in range(oh):
                for oj in range(ow):
                    acc = 0.0
                    for ci in range(c):
                        for ii in range(kh):
                            for jj in range(kw):
                                acc += (
                                    xp[ni, ci, oi * stride + ii, oj * stride + jj]
                                    * k[ki, ci, ii, jj]
                                )
                    out[ni, ki, oi, oj] = acc
    return out


class TestElementwise:
    def test_add(self):
        out = ad.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
        np.testing.assert_array_equal(out.data, [4.0, 6.0])

    def test_mul_identity(self):
        x = Tensor(np.random.default_rng(0).normal(size=(3, 4)).astype(np.float32))
        np.testing.assert_array_equal(ad.mul(x, ad.ones_like(x)).data, x.data)

    def test_relu(self):
        np.testing.assert_array_equal(
            ad.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0]
        )

    def test_dispatcher_matches_functions(self):
        a = Tensor([1.0, 4.0])
        b = Tensor([2.0, 0.5])
        np.testing.assert_array_equal(ad.elementwise("div", a, b).data, ad.div(a, b).data)
        np.testing.assert_array_equal(ad.elementwise("sqrt", a).data, ad.sqrt(a).data)
        with pytest.raises(ad.AutodiffError):
            ad.elementwise("nope", a)
        with pytest.raises(ad.AutodiffError):
            ad.elementwise("add", a)

    def test_broadcast_error_names_shapes(self):
        with pytest.raises(ad.BroadcastError, match=r"\(2, 3\).*\(4,\)"):
            ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(4)))

    def test_domain_errors(self):
        with pytest.raises(ad.DomainError):
            ad.log(Tensor([-1.0]))
        with pytest.raises(ad.DomainError):
            ad.sqrt(Tensor([-0.5]))

    def test_no_implicit_promotion(self):
        with pytest.raises(ad.AutodiffError, match="dtype"):
            ad.add(Tensor(np.zeros(2, dtype=np.float32)),
                   Tensor(np.zeros(2, dtype=np.float64)))

    def test_right_aligned_broadcasting(self):
        out = ad.add(Tensor(np.ones((2, 1, 3))), Tensor(np.ones((4, 1))))
        assert out.shape == (2, 4, 3)


class TestReduce:
    def test_sum(self):
        assert ad.reduce("sum", Tensor([1.0, 2.0, 3.0])).item() == 6.0

    def test_mean_constant(self):
        c = Tensor(np.full((4, 5), 2.5, dtype=np.float32))
        assert ad.reduce("mean", c).item() == pytest.approx(2.5)

    def test_axis_sum(self):
        out = ad.reduce("sum", Tensor([[1.0, 2.0], [3.0, 4.0]]), axes=[0])
        np.testing.assert_array_equal(out.data, [4.0, 6.0])

    def test_empty_axis_list_reduces_all(self):
        out = ad.sum_(Tensor([[1.0, 2.0], [3.0, 4.0]]), axes=[])
        assert out.item() == 10.0

    def test_out_of_range_axis(self):
        with pytest.raises(ad.AutodiffError, match="axis"):
            ad.sum_(Tensor([1.0, 2.0]), axes=[2])


class TestConv2d:
    def test_ones_window(self):
        out = ad.conv2d(ad.ones((1, 1, 3, 3)), ad.ones((1, 1, 3, 3)))
        np.testing.assert_allclose(out.data, [[[[9.0]]]])

    def test_identity_kernel(self):
        x = Tensor(np.random.default_rng(1).normal(size=(2, 1, 4, 4)).astype(np.float32))
        k = Tensor(np.ones((1, 1, 1, 1), dtype=np.float32))
        np.testing.assert_array_equal(ad.conv2d(x, k).data, x.data)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(1, 2, 5, 5))
        k = rng.normal(size=(3, 2, 3, 3))
        got = ad.conv2d(Tensor(x), Tensor(k)).data
        np.testing.assert_allclose(got, conv2d_oracle(x, k), atol=1e-6)

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
    def test_stride_padding_against_oracle(self, stride, padding):
        rng = np.random.default_rng(stride * 10 + padding)
        x = rng.normal(size=(2, 3, 6, 6))
        k = rng.normal(size=(2, 3, 3, 3))
        got = ad.conv2d(Tensor(x), Tensor(k), stride=stride, padding=padding).data
        np.testing.assert_allclose(got, conv2d_oracle(x, k, stride, padding), atol=1e-6)

    def test_nhwc_agrees_with_nchw(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 3, 6, 6))
        k = rng.normal(size=(4, 3, 3, 3))
        ref = ad.conv2d(Tensor(x), Tensor(k), stride=2, padding=1).data
        got = ad.conv2d_nhwc(
            Tensor(x.transpose(0, 2, 3, 1).copy()),
            Tensor(k.transpose(2, 3, 1, 0).copy()),
            stride=2,
            padding=1,
        ).data
        np.testing.assert_allclose(got.transpose(0, 3, 1, 2), ref, atol=1e-6)

    def test_channel_mismatch(self):
        with pytest.raises(ad.AutodiffError, match="channel"):
            ad.conv2d(ad.ones((1, 2, 4, 4)), ad.ones((1, 3, 3, 3)))


class TestBackward:
    def test_sum_of_squares(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        ad.backward(ad.sum_(x ** 2))
        np.testing.assert_allclose(x.grad.data, [2.0, 4.0])

    def test_bilinear(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        y = Tensor(np.array([3.0, 5.0]), requires_grad=True)
        ad.backward(ad.sum_(x * y))
        np.testing.assert_array_equal(x.grad.data, y.data)
        np.testing.assert_array_equal(y.grad.data, x.data)

    def test_three_layer_composition_vs_fd(self):
        rng = np.random.default_rng(11)
        w1 = Tensor(rng.normal(size=(4, 5)))
        w2 = Tensor(rng.normal(size=(5, 3)))

        def f(x):
            h = ad.relu(ad.matmul(x, w1) + 0.3)
            h = ad.silu(ad.matmul(h, w2))
            return ad.sum_(h * h)

        x = Tensor(rng.normal(size=(2, 4)))
        assert ad.grad_check(f, x, h=1e-4) < 1e-4

    def test_accumulation_across_calls(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        ad.backward(ad.sum_(x * 3.0))
        ad.backward(ad.sum_(x * 3.0))
        np.testing.assert_allclose(x.grad.data, [6.0, 6.0])

    def test_non_scalar_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = x * 2.0
        with pytest.raises(ad.AutodiffError, match="scalar"):
            ad.backward(y)
        ad.clear_tape()

    def test_graph_free_rejected(self):
        with pytest.raises(ad.AutodiffError, match="graph"):
            ad.backward(Tensor(1.0, requires_grad=True))

    def test_graph_freed_after_backward(self):
        x = Tensor(np.ones(3), requires_grad=True)
        ad.backward(ad.sum_(x * x))
        assert ad.tape_size() == 0

    def test_linearity(self):
        rng = np.random.default_rng(5)
        xv = rng.normal(size=4)

        def grad_of(fn):
            x = Tensor(xv.copy(), requires_grad=True)
            ad.backward(fn(x))
            return x.grad.data

        f = lambda x: ad.sum_(x * x)
        g = lambda x: ad.sum_(ad.exp(x))
        combo = lambda x: 2.5 * f(x) + (-1.25) * g(x)
        expect = 2.5 * grad_of(f) + (-1.25) * grad_of(g)
        np.testing.assert_allclose(grad_of(combo), expect, atol=1e-10)

    def test_determinism_bitwise(self):
        def run():
            rng = np.random.default_rng(42)
            x = Tensor(rng.normal(size=(3, 3)).astype(np.float32), requires_grad=True)
            k = Tensor(rng.normal(size=(2, 1, 2, 2)).astype(np.float32), requires_grad=True)
            y = ad.conv2d(ad.silu(x).reshape((1, 1, 3, 3)), k, padding=1)
            ad.backward(ad.sum_(y * y))
            return x.grad.data.tobytes(), k.grad.data.tobytes(), y.data.tobytes()

        assert run() == run()


class TestGradCheckUtility:
    def test_identity_exact(self):
        assert ad.grad_check(lambda x: ad.sum_(x), Tensor(np.ones(4))) == 0.0

    def test_exp(self):
        x = Tensor(np.random.default_rng(0).normal(size=(3, 2)) * 0.1)
        assert ad.grad_check(lambda t: ad.sum_(ad.exp(t)), x) < 1e-4

    def test_conv_squared(self):
        rng = np.random.default_rng(2)
        k = Tensor(rng.normal(size=(2, 1, 3, 3)))
        f = lambda x: ad.sum_(ad.conv2d(x, k, padding=1) ** 2)
        assert ad.grad_check(f, Tensor(rng.normal(size=(1, 1, 4, 4)))) < 1e-4

    def test_nonfinite_reports_inf(self):
        f = lambda x: ad.sum_(ad.log(x))
        assert ad.grad_check(f, Tensor(np.zeros(2))) == float("inf")


def _unary_case(name, rng):
    x = rng.normal(size=(3, 4))
    if name in ("log", "sqrt"):
        x = np.abs(x) + 0.5
    if name == "relu":
        x = np.where(np.abs(x) < 0.1, x + 0.3, x)  # keep clear of the kink
    return Tensor(x)


OPS_UNDER_TEST = sorted(ad.ELEMENTWISE_OPS)


@pytest.mark.parametrize("name", OPS_UNDER_TEST)
def test_every_registered_op_grad_property(name):
    """Gradient correctness over >= 100 randomized seeds per op."""
    binary = name in ("add", "sub", "mul", "div")
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        x = _unary_case(name, rng)
        if binary:
            b = Tensor(rng.normal(size=(3, 4)) + (2.0 if name == "div" else 0.0))
            f = lambda t: ad.sum_(ad.elementwise(name, t, b) ** 2)
        else:
            f = lambda t: ad.sum_(ad.elementwise(name, t) ** 2)
        worst = max(worst, ad.grad_check(f, x, h=1e-5))
    assert worst < 1e-4, f"{name}: max rel err {worst}"


@pytest.mark.parametrize("opname,fn", [
    ("sum", lambda x: ad.sum_(x * x)),
    ("mean", lambda x: ad.sum_(ad.mean_(x ** 3, axes=(1,)))),
    ("reshape", lambda x: ad.sum_(ad.reshape(x, (12,)) ** 2)),
    ("transpose", lambda x: ad.sum_(ad.transpose(x) ** 2)),
    ("matmul", lambda x: ad.sum_(ad.matmul(x, ad.transpose(x)))),
    ("concat", lambda x: ad.sum_(ad.concat([x, x * 2.0], axis=1) ** 2)),
    ("narrow", lambda x: ad.sum_(ad.narrow(x, 1, 1, 2) ** 2)),
    ("upsample", lambda x: ad.sum_(ad.upsample_nearest(ad.reshape(x, (1, 1, 3, 4)), 2) ** 2)),
    ("avgpool", lambda x: ad.sum_(ad.avgpool(ad.reshape(x, (1, 1, 3, 4)), 1) ** 2)),
    ("broadcast", lambda x: ad.sum_(ad.broadcast_to(x, (5, 3, 4)) ** 2)),
])
def test_structural_ops_grad(opname, fn):
    worst = 0.0
    for seed in range(20):
        x = Tensor(np.random.default_rng(seed).normal(size=(3, 4)))
        worst = max(worst, ad.grad_check(fn, x, h=1e-5))
    assert worst < 1e-4, f"{opname}: {worst}"


class TestSecondOrder:
    def test_double_backprop_elementwise(self):
        x = Tensor(np.array([0.3, -0.2]), requires_grad=True)
        (g,) = ad.grad(ad.sum_(ad.exp(x)), [x], create_graph=True)
        ad.backward(ad.sum_(g ** 2))
        np.testing.assert_allclose(
            x.grad.data, 2.0 * np.exp(2.0 * x.data), rtol=1e-6
        )

    def test_penalty_on_small_net_vs_fd(self):
        """d/dW of ||d(sum f)/dx||^2 against finite differences of the
        first-order gradient."""
        rng = np.random.default_rng(9)
        w0 = rng.normal(size=(3, 3))
        xv = rng.normal(size=(2, 3))

        def penalty(wmat):
            w = Tensor(wmat.copy(), requires_grad=True)
            x = Tensor(xv.copy(), requires_grad=True)
            y = ad.sum_(ad.silu(ad.matmul(x, w)))
            (gx,) = ad.grad(y, [x], create_graph=True)
            return w, ad.sum_(gx ** 2)

        w, pen = penalty(w0)
        ad.backward(pen)
        analytic = w.grad.data.copy()

        h = 1e-5
        fd = np.zeros_like(w0)
        for i in range(w0.shape[0]):
            for j in range(w0.shape[1]):
                for sgn in (1, -1):
                    wp = w0.copy()
                    wp[i, j] += sgn * h
                    _, p = penalty(wp)
                    fd[i, j] += sgn * float(p.item())
                    ad.clear_tape()
                fd[i, j] /= 2 * h
        rel = np.abs(analytic - fd) / (np.abs(fd) + 1e-8)
        assert rel.max() < 1e-3

    def test_conv_double_backprop_vs_fd(self):
        rng = np.random.default_rng(4)
        k0 = rng.normal(size=(1, 1, 2, 2))
        xv = rng.normal(size=(1, 1, 3, 3))

        def penalty(kmat):
            k = Tensor(kmat.copy(), requires_grad=True)
            x = Tensor(xv.copy(), requires_grad=True)
            y = ad.sum_(ad.conv2d(x, k, padding=1) ** 2)
            (gx,) = ad.grad(y, [x], create_graph=True)
            return k, ad.sum_(gx ** 2)

        k, pen = penalty(k0)
        ad.backward(pen)
        analytic = k.grad.data.copy()
        h = 1e-5
        fd = np.zeros_like(k0)
        for idx in np.ndindex(*k0.shape):
            for sgn in (1, -1):
                kp = k0.copy()
                kp[idx] += sgn * h
                _, p = penalty(kp)
                fd[idx] += sgn * float(p.item())
                ad.clear_tape()
            fd[idx] /= 2 * h
        rel = np.abs(analytic - fd) / (np.abs(fd) + 1e-8)
        assert rel.max() < 1e-3
