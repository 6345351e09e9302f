import numpy as np
import pytest

import panosynth.autodiff as ad
from panosynth.autodiff import nn
from tests.conftest import finite_diff_check


def t64(rng, *shape):
    return ad.Tensor(rng.standard_normal(shape), requires_grad=True)


class TestForwardOps:
    def test_softmax_uniform(self):
        out = ad.softmax(ad.Tensor(np.zeros(2)))
        assert np.allclose(out.data, [0.5, 0.5])

    def test_cross_entropy_symmetric_logits(self):
        ce = ad.cross_entropy_with_logits(ad.Tensor(np.zeros((1, 2))), np.array([0]))
        assert ce.item() == pytest.approx(np.log(2.0), abs=1e-12)

    def test_identity_conv(self, rng):
        x = ad.Tensor(rng.standard_normal((1, 1, 4, 4)))
        w = ad.Tensor(np.ones((1, 1, 1, 1)))
        out = ad.conv2d(x, w)
        assert np.allclose(out.data, x.data)

    def test_shape_mismatch_names_both_shapes(self, rng):
        with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            ad.matmul(t64(rng, 2, 3), t64(rng, 4, 5))

    def test_layer_norm_normalizes(self, rng):
        x = t64(rng, 4, 8)
        ln = nn.LayerNorm(8, dtype=np.float64)
        out = ln(x)
        assert np.allclose(out.data.mean(axis=-1), 0.0, atol=1e-7)
        assert np.allclose(out.data.var(axis=-1), 1.0, atol=1e-3)

    def test_embedding_lookup_and_bounds(self, rng):
        table = t64(rng, 5, 3)
        out = ad.embedding_lookup(table, np.array([[0, 4], [2, 2]]))
        assert out.shape == (2, 2, 3)
        assert np.allclose(out.data[0, 1], table.data[4])
        with pytest.raises(ad.ShapeError):
            ad.embedding_lookup(table, np.array([5]))

    def test_concat_and_slice(self, rng):
        a, b = t64(rng, 2, 3), t64(rng, 2, 2)
        cat = ad.concat([a, b], axis=1)
        assert cat.shape == (2, 5)
        assert np.allclose(cat.data[:, 3:], b.data)
        assert np.allclose(cat[:, :3].data, a.data)

    def test_var_matches_numpy(self, rng):
        x = t64(rng, 6, 4)
        assert ad.tensor_var(x).item() == pytest.approx(x.data.var(), rel=1e-12)


class TestBackward:
    def test_sum_gradient_is_ones(self, rng):
        x = t64(rng, 3)
        (g,) = ad.gradients(ad.tensor_sum(x), [x])
        assert np.array_equal(g, np.ones(3))

    def test_square_gradient(self):
        x = ad.Tensor(np.array([1.0, 2.0]), requires_grad=True)
        (g,) = ad.gradients(ad.tensor_sum(ad.mul(x, x)), [x])
        assert np.allclose(g, [2.0, 4.0])

    def test_accumulation_doubles_on_reuse(self, rng):
        x = t64(rng, 4)
        (g1,) = ad.gradients(ad.tensor_sum(x), [x])
        (g2,) = ad.gradients(ad.tensor_sum(ad.add(x, x)), [x])
        assert np.allclose(g2, 2 * g1)

    def test_unreachable_param_gets_zero(self, rng):
        x, y = t64(rng, 3), t64(rng, 3)
        grads = ad.gradients(ad.tensor_sum(x), [x, y])
        assert np.array_equal(grads[1], np.zeros(3))

    def test_non_scalar_loss_rejected(self, rng):
        with pytest.raises(ad.ShapeError):
            ad.backward(t64(rng, 2))

    def test_random_composites_pass_fd(self, rng):
        # composites of <= 4 ops over random 2x3 operands
        x, y = t64(rng, 2, 3), t64(rng, 2, 3)

        cases = [
            lambda: ad.tensor_sum(ad.mul(ad.exp(x), ad.sin(y))),
            lambda: ad.tensor_mean(ad.relu(ad.sub(ad.mul(x, y), x))),
            lambda: ad.tensor_sum(ad.div(x, ad.add(ad.mul(y, y), 1.0))),
            lambda: ad.tensor_var(ad.add(ad.cos(x), y)),
            lambda: ad.tensor_sum(ad.log(ad.add(ad.mul(x, x), 0.5))),
            lambda: ad.tensor_mean(ad.sqrt(ad.add(ad.mul(y, y), 0.1))),
            lambda: ad.tensor_sum(ad.sigmoid(ad.matmul(x, ad.transpose(y, (1, 0))))),
            lambda: ad.tensor_sum(ad.absolute(ad.add(x, 0.3))),
        ]
        for build in cases:
            finite_diff_check(build, [x, y])

    def test_softmax_and_ce_pass_fd(self, rng):
        logits = t64(rng, 3, 5)
        targets = rng.integers(0, 5, size=3)
        finite_diff_check(
            lambda: ad.cross_entropy_with_logits(logits, targets), [logits]
        )
        weights = rng.standard_normal((3, 5))
        finite_diff_check(
            lambda: ad.tensor_sum(ad.mul(ad.softmax(logits), weights)), [logits]
        )

    def test_conv2d_passes_fd(self, rng):
        x = t64(rng, 2, 3, 5, 6)
        w = t64(rng, 4, 3, 3, 3)
        b = t64(rng, 4)
        probe = rng.standard_normal((2, 4, 3, 3))
        for circ in (False, True):
            finite_diff_check(
                lambda: ad.tensor_sum(
                    ad.mul(ad.conv2d(x, w, b, stride=2, padding=1, circular_w=circ), probe)
                ),
                [x, w, b],
            )

    def test_upsample_and_layernorm_pass_fd(self, rng):
        x = t64(rng, 1, 2, 3, 4)
        probe = rng.standard_normal((1, 2, 6, 8))
        finite_diff_check(
            lambda: ad.tensor_sum(ad.mul(ad.upsample2x(x), probe)), [x]
        )
        y = t64(rng, 4, 6)
        ln = nn.LayerNorm(6, dtype=np.float64)
        finite_diff_check(
            lambda: ad.tensor_sum(ad.mul(ln(y), 0.7)), [y, ln.gamma, ln.beta]
        )

    def test_embedding_lookup_passes_fd(self, rng):
        table = t64(rng, 6, 4)
        idx = np.array([0, 3, 3, 5])
        probe = rng.standard_normal((4, 4))
        finite_diff_check(
            lambda: ad.tensor_sum(ad.mul(ad.embedding_lookup(table, idx), probe)),
            [table],
        )


class TestStraightThrough:
    def test_routes_gradient_to_carrier_only(self, rng):
        z_q = t64(rng, 4)
        z_hat = t64(rng, 4)
        out = ad.straight_through(ad.stop_gradient(z_q), z_hat)
        grads = ad.gradients(ad.tensor_sum(out), [z_hat, z_q])
        assert np.array_equal(grads[0], np.ones(4))
        assert np.array_equal(grads[1], np.zeros(4))

    def test_forward_takes_value_operand(self, rng):
        z_q, z_hat = t64(rng, 3), t64(rng, 3)
        out = ad.straight_through(z_q, z_hat)
        assert np.array_equal(out.data, z_q.data)

    def test_downstream_grads_match_bypass(self, rng):
        # decoder gradient identical whether quantization is bypassed or
        # straight-through runs with z_q == z_hat
        w = t64(rng, 3, 3)
        z = t64(rng, 2, 3)
        probe = rng.standard_normal((2, 3))

        def with_st():
            return ad.tensor_sum(
                ad.mul(ad.matmul(ad.straight_through(ad.stop_gradient(z), z), w), probe)
            )

        def bypass():
            return ad.tensor_sum(ad.mul(ad.matmul(z, w), probe))

        g_st = ad.gradients(with_st(), [w])[0]
        g_by = ad.gradients(bypass(), [w])[0]
        assert np.allclose(g_st, g_by, atol=1e-12)

    def test_shape_mismatch_rejected(self, rng):
        with pytest.raises(ad.ShapeError):
            ad.straight_through(t64(rng, 3), t64(rng, 4))

    def test_carrier_path_passes_fd(self, rng):
        # analytic grad through straight_through == FD grad of the identity
        # path (carrier substituted for the quantized value)
        z_hat = t64(rng, 5)
        probe = rng.standard_normal(5)
        fixed = ad.Tensor(rng.standard_normal(5))

        loss = ad.tensor_sum(
            ad.mul(ad.straight_through(fixed, ad.mul(z_hat, z_hat)), probe)
        )
        (analytic,) = ad.gradients(loss, [z_hat])

        def bypass():
            return ad.tensor_sum(ad.mul(ad.mul(z_hat, z_hat), probe))

        h = 1e-6
        numeric = np.zeros(5)
        for c in range(5):
            orig = z_hat.data[c]
            z_hat.data[c] = orig + h
            lp = bypass().item()
            z_hat.data[c] = orig - h
            lm = bypass().item()
            z_hat.data[c] = orig
            numeric[c] = (lp - lm) / (2 * h)
        assert np.allclose(analytic, numeric, rtol=1e-5, atol=1e-8)


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = np.array([1.0, 2.0, 3.0])
        state = ad.AdamState(lr=0.1)
        ad.adam_step([p], [np.zeros(3)], state)
        assert np.array_equal(p, [1.0, 2.0, 3.0])

    def test_first_step_magnitude_is_lr(self):
        p = np.zeros(4)
        g = np.full(4, 0.3)
        state = ad.AdamState(lr=0.05)
        ad.adam_step([p], [g], state)
        # bias-corrected first step: lr * g / (|g| + eps) ~= lr * sign(g)
        assert np.allclose(np.abs(p), 0.05, rtol=1e-6)
        assert np.all(p < 0)

    def test_deterministic_given_seed(self, rng):
        def run():
            r = np.random.default_rng(7)
            p = ad.Tensor(r.standard_normal(8).astype(np.float32), requires_grad=True)
            opt = ad.Adam([p], lr=0.01)
            for _ in range(25):
                loss = ad.tensor_sum(ad.mul(p, p))
                opt.zero_grad()
                ad.backward(loss)
                opt.step()
            return p.data.copy()

        assert np.array_equal(run(), run())

    def test_none_grad_treated_as_zero(self):
        p = np.array([5.0])
        state = ad.AdamState(lr=0.5)
        ad.adam_step([p], [None], state)
        assert np.array_equal(p, [5.0])


class TestCheckpoint:
    def test_bit_exact_roundtrip(self, rng, tmp_path):
        params = {
            "enc.w": rng.standard_normal((3, 4, 2, 2)).astype(np.float32),
            "enc.b": rng.standard_normal(4).astype(np.float32),
            "codebook": rng.standard_normal((16, 8)).astype(np.float32),
        }
        path = tmp_path / "model.ckpt"
        ad.save_checkpoint(params, path)
        back = ad.load_checkpoint(path)
        assert list(back) == list(params)
        for k in params:
            assert np.array_equal(back[k], params[k])
            assert back[k].dtype == np.float32

    def test_magic_guard(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOTMAGIC" + b"\0" * 16)
        with pytest.raises(ad.CheckpointError, match="magic"):
            ad.load_checkpoint(path)

    def test_truncation_detected(self, rng, tmp_path):
        path = tmp_path / "model.ckpt"
        ad.save_checkpoint({"w": rng.standard_normal(10).astype(np.float32)}, path)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ad.CheckpointError, match="truncated"):
            ad.load_checkpoint(path)

    def test_module_state_dict_roundtrip(self, rng, tmp_path):
        lin = nn.Linear(rng, 4, 3)
        path = tmp_path / "lin.ckpt"
        ad.save_checkpoint(lin.state_dict(), path)
        lin2 = nn.Linear(np.random.default_rng(99), 4, 3)
        lin2.load_state_dict(ad.load_checkpoint(path))
        assert np.array_equal(lin.weight.data, lin2.weight.data)
