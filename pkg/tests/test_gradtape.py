import numpy as np
import pytest

from advfocus.errors import ConfigError, DimensionError, TapeUsageError
from advfocus import gradtape as gt
from advfocus.gradtape import Tape, Tensor


def grad_of(f, x):
    with Tape() as tape:
        y = f(x)
        tape.backward(y)
        return tape.grad(x).data


class TestTensor:
    def test_row_major_and_immutable(self):
        t = gt.tensor([[1.0, 2.0], [3.0, 4.0]])
        assert t.shape == (2, 2)
        assert t.data.flags["C_CONTIGUOUS"]
        with pytest.raises(ValueError):
            t.data[0, 0] = 9.0

    def test_scalar_item(self):
        assert gt.tensor(3.5).item() == 3.5
        with pytest.raises(DimensionError):
            gt.tensor([1.0, 2.0]).item()


class TestTapeLifecycle:
    def test_sum_gradient_all_ones(self):
        x = gt.tensor(np.arange(6.0).reshape(2, 3))
        g = grad_of(gt.sum_all, x)
        assert np.array_equal(g, np.ones((2, 3)))

    def test_double_backward_rejected(self):
        x = gt.tensor([1.0, 2.0])
        with Tape() as tape:
            y = gt.sum_all(x)
            tape.backward(y)
            with pytest.raises(TapeUsageError):
                tape.backward(y)

    def test_record_after_backward_rejected(self):
        x = gt.tensor([1.0])
        with Tape() as tape:
            y = gt.sum_all(x)
            tape.backward(y)
            with pytest.raises(TapeUsageError):
                gt.sum_all(x)

    def test_root_must_come_from_tape(self):
        x = gt.tensor([1.0])
        loose = gt.sum_all(x)  # recorded nowhere
        with Tape() as tape:
            gt.sum_all(x)
            with pytest.raises(TapeUsageError):
                tape.backward(loose)

    def test_root_must_be_scalar(self):
        x = gt.tensor([1.0, 2.0])
        with Tape() as tape:
            y = gt.relu(x)
            with pytest.raises(TapeUsageError):
                tape.backward(y)

    def test_grad_before_backward_rejected(self):
        x = gt.tensor([1.0])
        with Tape() as tape:
            gt.sum_all(x)
            with pytest.raises(TapeUsageError):
                tape.grad(x)

    def test_untouched_tensor_gets_zero_grad(self):
        x = gt.tensor([1.0, 2.0])
        other = gt.tensor([5.0])
        with Tape() as tape:
            y = gt.sum_all(x)
            tape.backward(y)
            assert np.array_equal(tape.grad(other).data, [0.0])

    def test_ops_outside_tape_do_not_record(self):
        x = gt.tensor([1.0, -1.0])
        gt.relu(x)
        with Tape() as tape:
            y = gt.sum_all(x)
            tape.backward(y)
        assert len(tape._nodes) == 1


class TestActivations:
    def test_relu_values(self):
        out = gt.relu(gt.tensor([-1.0, 2.0]))
        assert out.tolist() == [0.0, 2.0]

    def test_sigmoid_gradient_at_zero(self):
        g = grad_of(lambda x: gt.sum_all(gt.sigmoid(x)), gt.tensor([0.0]))
        assert g[0] == pytest.approx(0.25, abs=1e-15)

    def test_softmax_rows_symmetry(self):
        out = gt.softmax_rows(gt.tensor([[0.0, 0.0, 0.0]]))
        assert np.allclose(out.data, 1.0 / 3.0, atol=1e-15)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        z = gt.tensor(rng.normal(size=(40, 7)) * 5.0)
        out = gt.softmax_rows(z)
        assert np.all(np.abs(out.data.sum(axis=1) - 1.0) <= 1e-12)
        assert np.all(out.data > 0.0) and np.all(out.data < 1.0)

    def test_softmax_rows_needs_2d(self):
        with pytest.raises(DimensionError):
            gt.softmax_rows(gt.tensor([1.0, 2.0]))


class TestConv2d:
    def test_all_ones_sum(self):
        x = gt.tensor(np.ones((1, 3, 3)))
        k = gt.tensor(np.ones((1, 1, 3, 3)))
        out = gt.conv2d(x, k, stride=1, padding=0)
        assert out.shape == (1, 1, 1)
        assert out.data[0, 0, 0] == 9.0

    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = gt.tensor(rng.random((1, 5, 5)))
        k = gt.tensor(np.ones((1, 1, 1, 1)))
        out = gt.conv2d(x, k, stride=1, padding=0)
        assert np.array_equal(out.data, x.data)

    def test_strided_shape(self):
        rng = np.random.default_rng(1)
        x = gt.tensor(rng.random((3, 8, 8)))
        k = gt.tensor(rng.normal(size=(4, 3, 3, 3)))
        out = gt.conv2d(x, k, stride=2, padding=1)
        assert out.shape == (4, 4, 4)

    def test_input_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        x = gt.tensor(rng.random((3, 8, 8)))
        k = gt.tensor(rng.normal(size=(4, 3, 3, 3)) * 0.5)
        err = gt.finite_diff_check(
            lambda t: gt.sum_all(gt.conv2d(t, k, stride=2, padding=1)), x)
        assert err < 1e-6

    def test_kernel_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        x = gt.tensor(rng.random((3, 8, 8)))
        k = gt.tensor(rng.normal(size=(4, 3, 3, 3)) * 0.5)
        err = gt.finite_diff_check(
            lambda t: gt.sum_all(gt.conv2d(x, t, stride=2, padding=1)), k)
        assert err < 1e-6

    def test_weighted_output_gradient(self):
        # non-uniform downstream weights exercise the scatter in the backward
        rng = np.random.default_rng(5)
        x = gt.tensor(rng.random((2, 6, 6)))
        k = gt.tensor(rng.normal(size=(3, 2, 3, 3)))
        w = rng.normal(size=(3, 3, 3))

        def f(t):
            out = gt.conv2d(t, k, stride=2, padding=1)
            return gt.sum_all(gt.mul(out, gt.tensor(w)))

        assert gt.finite_diff_check(f, x) < 1e-6

    def test_shape_errors_name_shapes(self):
        x = gt.tensor(np.ones((3, 8, 8)))
        bad_cin = gt.tensor(np.ones((4, 2, 3, 3)))
        with pytest.raises(DimensionError, match=r"3.*!=.*2"):
            gt.conv2d(x, bad_cin)
        with pytest.raises(DimensionError):
            gt.conv2d(x, gt.tensor(np.ones((4, 3, 2, 2))))  # even kernel
        with pytest.raises(DimensionError):
            gt.conv2d(gt.tensor(np.ones((1, 2, 2))), gt.tensor(np.ones((1, 1, 5, 5))))


def random_prob_map(rng, a, c):
    """Row-stochastic map with a spread of peak values."""
    logits = rng.normal(size=(a, c)) * rng.uniform(0.5, 6.0)
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


class TestFocusedReductions:
    YHAT = [[0.9, 0.05, 0.05], [0.2, 0.7, 0.1]]

    def test_hinge_value(self):
        v = gt.fa_hinge(gt.tensor(self.YHAT), 0.5)
        assert v.item() == pytest.approx(0.6, abs=1e-12)

    def test_hinge_zero_above_max(self):
        y = gt.tensor(self.YHAT)
        g = grad_of(lambda t: gt.fa_hinge(t, 0.95), y)
        v = gt.fa_hinge(y, 0.95)
        assert v.item() == 0.0
        assert np.array_equal(g, np.zeros((2, 3)))

    def test_parallel_value(self):
        v = gt.fa_parallel(gt.tensor(self.YHAT), 0.5)
        assert v.item() == pytest.approx(1.6, abs=1e-12)

    def test_parallel_threshold_zero_counts_all_rows(self):
        y = gt.tensor(random_prob_map(np.random.default_rng(0), 2, 4))
        assert gt.fa_parallel(y, 0.0).item() == pytest.approx(2.0, abs=1e-12)

    def test_parallel_equals_hinge_plus_threshold_mass(self):
        # direct-summation oracle over random maps
        rng = np.random.default_rng(8)
        for _ in range(200):
            y = rng.random((rng.integers(1, 30), rng.integers(1, 10)))
            t = float(rng.uniform(0.0, 0.999))
            m = int((y > t).sum())
            lhs = gt.fa_parallel(gt.tensor(y), t).item()
            rhs = gt.fa_hinge(gt.tensor(y), t).item() + t * m
            assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)

    def test_indexed_value_and_mask(self):
        v, mask = gt.fa_indexed(gt.tensor(self.YHAT), 0.5)
        assert v.item() == pytest.approx(1.6, abs=1e-12)
        assert mask.pairs() == [(0, 0), (1, 1)]
        assert mask.threshold == 0.5

    def test_indexed_empty_mask_is_noop(self):
        x = gt.tensor(self.YHAT)
        with Tape() as tape:
            v, mask = gt.fa_indexed(x, 0.95)
            tape.backward(v)
            g = tape.grad(x)
        assert v.item() == 0.0
        assert len(mask) == 0
        assert np.array_equal(g.data, np.zeros((2, 3)))

    def test_indexed_matches_parallel_on_random_maps(self):
        rng = np.random.default_rng(11)
        for _ in range(1000):
            a = int(rng.integers(1, 40))
            c = int(rng.integers(1, 12))
            y = random_prob_map(rng, a, c)
            t = float(rng.uniform(0.0, 0.99))
            yp = gt.tensor(y)
            yi = gt.tensor(y)
            with Tape() as tp:
                vp = gt.fa_parallel(yp, t)
                tp.backward(vp)
                gp = tp.grad(yp).data
            with Tape() as ti:
                vi, _ = gt.fa_indexed(yi, t)
                ti.backward(vi)
                gi = ti.grad(yi).data
            assert vp.item() == vi.item()  # bitwise
            assert np.array_equal(gp, gi)

    def test_mask_sorted_unique(self):
        rng = np.random.default_rng(12)
        y = random_prob_map(rng, 50, 8)
        _, mask = gt.fa_indexed(gt.tensor(y), 0.1)
        flat = mask.indices[:, 0] * 8 + mask.indices[:, 1]
        assert np.all(np.diff(flat) > 0)
        expected = np.flatnonzero(y.reshape(-1) > 0.1)
        assert np.array_equal(flat, expected)

    def test_hinge_gradient_matches_finite_differences_away_from_kink(self):
        rng = np.random.default_rng(13)
        y = rng.random((20, 5))
        t = 0.3
        exclude = np.abs(y - t) < 1e-8 * 10
        err = gt.finite_diff_check(lambda m: gt.fa_hinge(m, t), gt.tensor(y),
                                   exclude=exclude)
        assert err < 1e-4

    def test_hinge_nonincreasing_in_threshold(self):
        rng = np.random.default_rng(14)
        y = gt.tensor(rng.random((30, 6)))
        values = [gt.fa_hinge(y, t).item() for t in np.linspace(0.0, 0.99, 25)]
        assert all(a >= b for a, b in zip(values, values[1:]))
        assert values[0] == pytest.approx(float(y.data.sum()), rel=1e-12)

    def test_threshold_range_enforced(self):
        y = gt.tensor(self.YHAT)
        for bad in (-0.1, 1.0, 1.5):
            with pytest.raises(ConfigError):
                gt.fa_hinge(y, bad)
            with pytest.raises(ConfigError):
                gt.fa_parallel(y, bad)
            with pytest.raises(ConfigError):
                gt.fa_indexed(y, bad)

    def test_indexed_backward_touches_only_mask_positions(self):
        rng = np.random.default_rng(15)
        y = gt.tensor(random_prob_map(rng, 30, 6))
        with Tape() as tape:
            v, mask = gt.fa_indexed(y, 0.2)
            node = tape._nodes[-1]
            tape.backward(v)
        (update,) = node.backward(np.asarray(1.0))
        flat_mask = mask.indices[:, 0] * 6 + mask.indices[:, 1]
        assert np.array_equal(np.sort(update.flat_idx), flat_mask)
        assert np.all(update.values == 1.0)

    def test_gradient_through_softmax_matches_finite_differences(self):
        rng = np.random.default_rng(16)
        z = gt.tensor(rng.normal(size=(6, 5)))
        err = gt.finite_diff_check(
            lambda t: gt.fa_parallel(gt.softmax_rows(t), 0.0), z)
        assert err < 1e-6

    def test_indexed_grad_bitwise_equals_parallel_through_network(self):
        # dense-path oracle: identical graphs below the reduction node
        rng = np.random.default_rng(17)
        x = rng.random((2, 6, 6))
        k = rng.normal(size=(10, 2, 3, 3)) * 0.4

        def head(t):
            out = gt.conv2d(t, gt.tensor(k), stride=2, padding=1)
            return gt.softmax_rows(gt.reshape(out, (10, 9)))

        xi, xp = gt.tensor(x), gt.tensor(x)
        with Tape() as ti:
            vi, _ = gt.fa_indexed(head(xi), 0.09)
            ti.backward(vi)
            gi = ti.grad(xi).data
        with Tape() as tp:
            vp = gt.fa_parallel(head(xp), 0.09)
            tp.backward(vp)
            gp = tp.grad(xp).data
        assert vi.item() == vp.item()
        assert np.array_equal(gi, gp)


class TestFiniteDiffCheck:
    def test_sum_of_squares(self):
        x = gt.tensor([1.0, 2.0])
        err = gt.finite_diff_check(lambda t: gt.sum_all(gt.mul(t, t)), x)
        assert err < 1e-8

    def test_constant_function(self):
        x = gt.tensor([1.0, 2.0, 3.0])
        c = gt.tensor(7.0)

        def f(t):
            with_tape = gt.sum_all(t)
            return gt.sub(gt.add(with_tape, c), with_tape)

        # f == c identically; analytic and numeric gradients are both zero
        err = gt.finite_diff_check(f, x)
        assert err == 0.0

    def test_fa_hinge_away_from_threshold(self):
        rng = np.random.default_rng(18)
        h = 1e-5
        y = rng.random((15, 4))
        t = 0.4
        y = y[np.all(np.abs(y - t) > 10 * h, axis=1)]  # keep rows clear of the kink
        err = gt.finite_diff_check(lambda m: gt.fa_hinge(m, t), gt.tensor(y), h=h)
        assert err < 1e-4

    def test_h_must_be_positive(self):
        with pytest.raises(ConfigError):
            gt.finite_diff_check(gt.sum_all, gt.tensor([1.0]), h=0.0)


class TestForwardFiniteness:
    def test_random_pipeline_outputs_finite(self):
        rng = np.random.default_rng(19)
        for _ in range(20):
            x = gt.tensor(rng.random((3, 8, 8)))
            k = gt.tensor(rng.normal(size=(6, 3, 3, 3)))
            out = gt.relu(gt.conv2d(x, k, stride=2, padding=1))
            sm = gt.softmax_rows(gt.reshape(out, (24, 4)))
            assert np.all(np.isfinite(sm.data))


class TestConcurrentTapes:
    def test_distinct_tapes_in_threads(self):
        import threading

        results = {}

        def worker(seed):
            rng = np.random.default_rng(seed)
            x = gt.tensor(rng.random((4, 4)))
            with Tape() as tape:
                y = gt.sum_all(gt.mul(x, x))
                tape.backward(y)
                results[seed] = (tape.grad(x).data, 2.0 * x.data)

        threads = [threading.Thread(target=worker, args=(s,)) for s in range(4)]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
        for g, expected in results.values():
            assert np.allclose(g, expected, atol=1e-15)
