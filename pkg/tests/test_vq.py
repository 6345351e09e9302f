import numpy as np
import pytest

import panosynth.autodiff as ad
from panosynth.raster import LdrImage, rotate_horizontal
from panosynth.vq import (
    Codebook,
    TokenGrid,
    Tokenizer,
    TokenizerConfig,
    VqError,
    global_tokenizer_config,
    local_tokenizer_config,
    quantize,
    reconstruction_mse,
    train_tokenizer,
    vq_loss,
)
from tests.conftest import finite_diff_check

FLAT_COLORS = [(0.2, 0.3, 0.7), (0.8, 0.6, 0.2), (0.1, 0.8, 0.4), (0.5, 0.5, 0.5)]


def flat_images(hw=(32, 64)):
    return [LdrImage(np.full((*hw, 3), c, dtype=np.float32)) for c in FLAT_COLORS]


class TestQuantize:
    def test_nearest_entry(self):
        cb = Codebook(np.array([[0.0, 0.0], [1.0, 1.0]]))
        z_q, idx = quantize(np.array([[[0.2, 0.1]]]), cb)
        assert idx[0, 0] == 0
        assert np.allclose(z_q[0, 0], [0.0, 0.0])

    def test_exact_entry_distance_zero(self):
        cb = Codebook(np.array([[0.0, 0.0], [1.0, 1.0]]))
        z_q, idx = quantize(np.array([[[1.0, 1.0]]]), cb)
        assert idx[0, 0] == 1
        assert np.allclose(z_q[0, 0], [1.0, 1.0])

    def test_tie_breaks_to_lowest_index(self):
        cb = Codebook(np.array([[0.0, 0.0], [1.0, 1.0]]))
        _, idx = quantize(np.array([[[0.5, 0.5]]]), cb)
        assert idx[0, 0] == 0

    def test_matches_brute_force_scan(self, rng):
        for _ in range(20):
            cb = Codebook(rng.standard_normal((17, 6)))
            z = rng.standard_normal((5, 4, 6))
            _, idx = quantize(z, cb)
            d = ((z[..., None, :].astype(np.float64) - cb.table) ** 2).sum(-1)
            assert np.array_equal(idx, d.argmin(-1))

    def test_dim_mismatch_rejected(self, rng):
        with pytest.raises(VqError):
            quantize(rng.standard_normal((2, 2, 3)), Codebook(rng.standard_normal((4, 5))))


class TestVqLoss:
    def test_codebook_term_is_squared_distance(self, rng):
        # frozen encoder, one grid position, c_z = 2: the part equals the
        # exact squared distance between the encoder output and its entry
        cfg = TokenizerConfig(
            codebook_size=2, code_dim=2, input_hw=(16, 16), compression=16,
            base_channels=4, max_channels=8, seed=0,
        )
        tok = Tokenizer(cfg)
        img = rng.random((1, 3, 16, 16)).astype(np.float32)
        _, parts, aux = vq_loss(img, tok, return_aux=True)
        z = aux["z_hat"][0, 0, 0]
        entry = tok.codes.data[aux["indices"][0, 0, 0]]
        assert parts["codebook"] == pytest.approx(
            float(((z - entry) ** 2).sum()), rel=1e-5
        )
        assert parts["commit"] == pytest.approx(parts["codebook"], rel=1e-6)

    def test_perfect_autoencoder_zero_terms(self, rng):
        # force encoder output onto a codebook entry: commitment terms vanish
        cfg = TokenizerConfig(
            codebook_size=4, code_dim=2, input_hw=(16, 16), compression=16,
            base_channels=4, max_channels=8, seed=0,
        )
        tok = Tokenizer(cfg)
        img = rng.random((1, 3, 16, 16)).astype(np.float32)
        _, _, aux = vq_loss(img, tok, return_aux=True)
        tok.codes.data[aux["indices"][0, 0, 0]] = aux["z_hat"][0, 0, 0]
        _, parts2 = vq_loss(img, tok)
        assert parts2["commit"] == pytest.approx(0.0, abs=1e-12)
        assert parts2["codebook"] == pytest.approx(0.0, abs=1e-12)

    def test_total_applies_beta(self, rng):
        cfg = TokenizerConfig(
            codebook_size=4, code_dim=4, input_hw=(16, 16), compression=16,
            base_channels=4, max_channels=8, beta_commit=0.25, seed=1,
        )
        tok = Tokenizer(cfg)
        img = rng.random((2, 3, 16, 16)).astype(np.float32)
        total, parts = vq_loss(img, tok)
        expected = parts["rec"] + parts["commit"] + 0.25 * parts["codebook"]
        assert total.item() == pytest.approx(expected, rel=1e-5)

    def test_isolated_term_gradients_pass_fd(self, rng):
        # the stop-gradient structure makes the full loss non-FD-able by
        # design, so each gradient path is checked in isolation: the
        # reconstruction wrt the decoder (quantized input held fixed), the
        # codebook term wrt the table (indices held fixed) and the
        # commitment wrt the encoder (quantized values held fixed)
        cfg = TokenizerConfig(
            codebook_size=4, code_dim=3, input_hw=(8, 8), compression=4,
            base_channels=3, max_channels=6, seed=2, dtype=np.float64,
        )
        tok = Tokenizer(cfg)
        img = rng.random((1, 3, 8, 8))
        x64 = ad.Tensor(img)
        z_hat0 = tok.encoder(x64).data
        _, idx = quantize(z_hat0.transpose(0, 2, 3, 1), tok.codebook)
        z_q0 = tok.codes.data[idx]
        npos = float(idx.size)

        def rec_only():
            decoded = tok.decoder(ad.Tensor(z_q0.transpose(0, 3, 1, 2)))
            return ad.tensor_mean(ad.absolute(ad.sub(decoded, x64)))

        finite_diff_check(rec_only, tok.decoder.parameters(), max_coords=6)

        def codebook_only():
            z_q = ad.embedding_lookup(tok.codes, idx)
            diff = ad.sub(ad.Tensor(z_hat0.transpose(0, 2, 3, 1)), z_q)
            return ad.mul(ad.tensor_sum(ad.mul(diff, diff)), 1.0 / npos)

        finite_diff_check(codebook_only, [tok.codes], max_coords=6)

        def commit_only():
            z_hat = ad.transpose(tok.encoder(x64), (0, 2, 3, 1))
            diff = ad.sub(ad.Tensor(z_q0), z_hat)
            return ad.mul(ad.tensor_sum(ad.mul(diff, diff)), 1.0 / npos)

        finite_diff_check(commit_only, tok.encoder.parameters(), max_coords=6)

        # graph consistency: the full loss distributes exactly these
        # gradients (commitment to encoder, codebook term to the table)
        full = vq_loss(img, tok)[0]
        g_full = ad.gradients(full, [tok.codes])[0]
        g_code = ad.gradients(
            ad.mul(codebook_only(), cfg.beta_commit), [tok.codes]
        )[0]
        assert np.allclose(g_full, g_code, atol=1e-12)

    def test_encoder_gradient_equals_identity_path(self, rng):
        # straight-through contract: with the codebook matching the encoder
        # outputs exactly (z_q == z_hat), the analytic encoder gradient must
        # equal finite differences of the bypass forward in which the decoder
        # consumes z_hat directly
        cfg = TokenizerConfig(
            codebook_size=4, code_dim=3, input_hw=(8, 8), compression=8,
            base_channels=3, max_channels=6, seed=2, dtype=np.float64,
        )
        tok = Tokenizer(cfg)
        img = rng.random((1, 3, 8, 8))
        _, _, aux = vq_loss(img, tok, return_aux=True)
        z = aux["z_hat"].reshape(-1, 3)
        assert z.shape[0] == 1
        tok.codes.data[0] = z[0]
        tok.codes.data[1:] += 10.0  # keep other entries far away

        params = tok.encoder.parameters()
        loss = vq_loss(img, tok)[0]
        analytic = ad.gradients(loss, params)

        def bypass():
            x = ad.Tensor(img.astype(np.float64))
            z_hat = tok.encoder(x)
            decoded = tok.decoder(z_hat)
            rec = ad.tensor_mean(ad.absolute(ad.sub(decoded, x)))
            diff = ad.sub(ad.Tensor(tok.codes.data[:1].reshape(1, 1, 1, 3)),
                          ad.transpose(z_hat, (0, 2, 3, 1)))
            commit = ad.tensor_sum(ad.mul(diff, diff))
            return ad.add(rec, commit)

        h = 1e-6
        for p, g in zip(params, analytic):
            flat = p.data.reshape(-1)
            gflat = g.reshape(-1)
            n_probe = min(4, flat.size)
            for c in np.random.default_rng(0).choice(flat.size, n_probe, replace=False):
                orig = flat[c]
                flat[c] = orig + h
                lp = bypass().item()
                flat[c] = orig - h
                lm = bypass().item()
                flat[c] = orig
                num = (lp - lm) / (2 * h)
                assert abs(num - gflat[c]) / max(abs(num), abs(gflat[c]), 1e-6) < 1e-4


class TestTokenizerShapes:
    def test_paper_scale_global_dims(self):
        cfg = global_tokenizer_config(desk=False, base_channels=4, max_channels=8)
        tok = Tokenizer(cfg)
        img = LdrImage(np.zeros((128, 256, 3), dtype=np.float32))
        grid = tok.encode(img)
        assert grid.shape == (8, 16)

    def test_paper_scale_local_dims(self):
        cfg = local_tokenizer_config(desk=False, base_channels=4, max_channels=8)
        tok = Tokenizer(cfg)
        grid = tok.encode(LdrImage(np.zeros((256, 256, 3), dtype=np.float32)))
        assert grid.shape == (16, 16)

    def test_desk_scale_dims(self):
        gtok = Tokenizer(global_tokenizer_config(base_channels=4, max_channels=8))
        assert gtok.grid_hw == (4, 8)
        ltok = Tokenizer(local_tokenizer_config(base_channels=4, max_channels=8))
        assert ltok.grid_hw == (4, 4)

    def test_decode_inverts_dims(self, rng):
        tok = Tokenizer(global_tokenizer_config(base_channels=4, max_channels=8))
        img = LdrImage(rng.random((32, 64, 3)).astype(np.float32))
        out = tok.decode(tok.encode(img))
        assert out.pixels.shape == img.pixels.shape

    def test_decode_accepts_arbitrary_grid(self, rng):
        tok = Tokenizer(local_tokenizer_config(base_channels=4, max_channels=8))
        grid = TokenGrid(rng.integers(0, 256, size=(8, 16)), 256)
        out = tok.decode(grid)
        assert out.pixels.shape == (128, 256, 3)

    def test_wrong_resolution_rejected(self, rng):
        tok = Tokenizer(global_tokenizer_config(base_channels=4, max_channels=8))
        with pytest.raises(VqError, match="expected 32x64"):
            tok.encode(LdrImage(np.zeros((16, 64, 3), dtype=np.float32)))

    def test_token_grid_validates_range(self):
        with pytest.raises(VqError):
            TokenGrid(np.array([[0, 7]]), vocab=4)


class TestCircularEquivariance:
    def test_encode_commutes_with_token_stride_rotation(self, rng):
        tok = Tokenizer(global_tokenizer_config(base_channels=4, max_channels=8))
        img = LdrImage(rng.random((32, 64, 3)).astype(np.float32))
        base = tok.encode(img).indices
        for k in (1, 3, 5):
            rotated = tok.encode(rotate_horizontal(img, 8 * k)).indices
            assert np.array_equal(np.roll(base, k, axis=1), rotated)

    def test_decode_commutes_with_grid_roll(self, rng):
        tok = Tokenizer(global_tokenizer_config(base_channels=4, max_channels=8))
        grid = tok.encode(LdrImage(rng.random((32, 64, 3)).astype(np.float32)))
        a = rotate_horizontal(tok.decode(grid), 8 * 2).pixels
        b = tok.decode(TokenGrid(np.roll(grid.indices, 2, axis=1), grid.vocab)).pixels
        assert np.array_equal(a, b)


class TestTraining:
    @pytest.mark.slow
    def test_flat_color_overfit(self):
        cfg = global_tokenizer_config(codebook_size=8, steps=700, lr=4e-3, seed=3)
        tok = train_tokenizer(flat_images(), cfg)
        assert reconstruction_mse(tok, flat_images()) < 1e-3

    def test_deterministic_given_seed(self):
        cfg = global_tokenizer_config(
            codebook_size=8, steps=40, seed=5, base_channels=4, max_channels=8
        )
        a = train_tokenizer(flat_images(), cfg)
        b = train_tokenizer(flat_images(), cfg)
        assert a.train_log[-1][1] == b.train_log[-1][1]
        for k, v in a.state_dict().items():
            assert np.array_equal(v, b.state_dict()[k]), k

    def test_single_entry_codebook_degenerates(self, rng):
        cfg = TokenizerConfig(
            codebook_size=1, code_dim=4, input_hw=(16, 16), compression=4,
            base_channels=4, max_channels=8, steps=20, seed=0,
        )
        imgs = [LdrImage(rng.random((16, 16, 3)).astype(np.float32)) for _ in range(2)]
        tok = train_tokenizer(imgs, cfg)
        grid = tok.encode(imgs[0])
        assert np.all(grid.indices == 0)

    def test_empty_dataset_rejected(self):
        with pytest.raises(VqError):
            train_tokenizer([], global_tokenizer_config())

    def test_checkpoint_roundtrip(self, tmp_path, rng):
        cfg = global_tokenizer_config(base_channels=4, max_channels=8, seed=9)
        tok = Tokenizer(cfg)
        path = tmp_path / "tok.ckpt"
        ad.save_checkpoint(tok.state_dict(), path)
        tok2 = Tokenizer(cfg)
        tok2.load_state_dict(ad.load_checkpoint(path))
        img = LdrImage(rng.random((32, 64, 3)).astype(np.float32))
        assert np.array_equal(tok.encode(img).indices, tok2.encode(img).indices)
