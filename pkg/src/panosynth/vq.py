"""Dual-codebook discrete image representation.

Two tokenizers with the same encoder/quantizer/decoder structure: a global
one that compresses the downsampled whole panorama with circular (seam-aware)
convolutions, and a local one for square patches with plain zero padding.
Training follows the usual vector-quantization recipe with a straight-through
estimator; the reconstruction term is pixelwise L1 (no perceptual network or
discriminator at this scale).
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import nn
from .raster import LdrImage


class VqError(ValueError):
    pass


@dataclass(frozen=True)
class Codebook:
    """Embedding table of shape (entries, code_dim)."""

    table: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.table)
        if arr.ndim != 2 or arr.shape[0] < 1:
            raise VqError(f"codebook table must be 2-D, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise VqError("codebook entries must be finite")
        object.__setattr__(self, "table", arr)

    @property
    def size(self):
        return self.table.shape[0]

    @property
    def code_dim(self):
        return self.table.shape[1]


@dataclass(frozen=True)
class TokenGrid:
    """2-D grid of discrete codebook indices."""

    indices: np.ndarray
    vocab: int

    def __post_init__(self):
        arr = np.asarray(self.indices, dtype=np.int64)
        if arr.ndim != 2:
            raise VqError(f"token grid must be 2-D, got shape {arr.shape}")
        if arr.size and (arr.min() < 0 or arr.max() >= self.vocab):
            raise VqError(f"token index out of range for vocab {self.vocab}")
        object.__setattr__(self, "indices", arr)

    @property
    def shape(self):
        return self.indices.shape


def quantize(z_hat, codebook):
    """Nearest-entry quantization of a (..., code_dim) array of vectors.

    Returns (z_q, indices) where z_q carries the looked-up table rows and
    ties break to the lowest index.
    """
    z = np.asarray(z_hat)
    if z.shape[-1] != codebook.code_dim:
        raise VqError(
            f"vector dim {z.shape[-1]} does not match codebook dim {codebook.code_dim}"
        )
    flat = np.ascontiguousarray(z.reshape(-1, codebook.code_dim), dtype=np.float64)
    idx = kernels.nearest_codebook(flat, codebook.table)
    z_q = codebook.table[idx].reshape(z.shape)
    return z_q, idx.reshape(z.shape[:-1])


@dataclass
class TokenizerConfig:
    codebook_size: int = 256
    code_dim: int = 64
    input_hw: tuple = (32, 64)
    compression: int = 8
    circular: bool = False
    base_channels: int = 16
    max_channels: int = 64
    beta_commit: float = 0.25
    dead_entry_steps: int = 200
    steps: int = 1500
    batch_size: int = 4
    lr: float = 2e-3
    seed: int = 0
    dtype: object = np.float32


class _Encoder(nn.Module):
    def __init__(self, rng, cfg):
        stages = int(np.log2(cfg.compression))
        if 2**stages != cfg.compression:
            raise VqError(f"compression must be a power of two, got {cfg.compression}")
        chans = [min(cfg.base_channels * 2**i, cfg.max_channels) for i in range(stages + 1)]
        self.stem = nn.Conv2d(rng, 3, chans[0], 3, stride=1, padding=1,
                              circular_w=cfg.circular, dtype=cfg.dtype)
        self.downs = [
            nn.Conv2d(rng, chans[i], chans[i + 1], 3, stride=2, padding=1,
                      circular_w=cfg.circular, dtype=cfg.dtype)
            for i in range(stages)
        ]
        # small head init keeps initial codes and features at a matched scale,
        # which avoids an early commitment slam that collapses the codebook
        self.head = nn.Conv2d(rng, chans[-1], cfg.code_dim, 1, dtype=cfg.dtype,
                              init_scale=0.02)

    def __call__(self, x):
        h = ad.leaky_relu(self.stem(x))
        for conv in self.downs:
            h = ad.leaky_relu(conv(h))
        return self.head(h)


class _Decoder(nn.Module):
    def __init__(self, rng, cfg):
        stages = int(np.log2(cfg.compression))
        chans = [min(cfg.base_channels * 2**i, cfg.max_channels) for i in range(stages + 1)]
        self.head = nn.Conv2d(rng, cfg.code_dim, chans[-1], 1, dtype=cfg.dtype)
        self.ups = [
            nn.Conv2d(rng, chans[i + 1], chans[i], 3, stride=1, padding=1,
                      circular_w=cfg.circular, dtype=cfg.dtype)
            for i in reversed(range(stages))
        ]
        self.out = nn.Conv2d(rng, chans[0], 3, 3, stride=1, padding=1,
                             circular_w=cfg.circular, dtype=cfg.dtype)

    def __call__(self, z):
        h = ad.leaky_relu(self.head(z))
        for conv in self.ups:
            h = ad.leaky_relu(conv(ad.upsample2x(h)))
        return ad.sigmoid(self.out(h))


class Tokenizer(nn.Module):
    """Encoder + codebook + decoder for one image family."""

    def __init__(self, cfg, rng=None):
        if cfg.codebook_size < 1:
            raise VqError("codebook needs at least one entry")
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.encoder = _Encoder(rng, cfg)
        self.decoder = _Decoder(rng, cfg)
        self.codes = ad.Tensor(
            (rng.standard_normal((cfg.codebook_size, cfg.code_dim)) * 0.05).astype(cfg.dtype),
            requires_grad=True,
        )
        self.train_log = []

    @property
    def codebook(self):
        return Codebook(self.codes.data)

    @property
    def grid_hw(self):
        return (
            self.cfg.input_hw[0] // self.cfg.compression,
            self.cfg.input_hw[1] // self.cfg.compression,
        )

    def _check_input(self, img):
        if (img.height, img.width) != tuple(self.cfg.input_hw):
            raise VqError(
                f"expected {self.cfg.input_hw[0]}x{self.cfg.input_hw[1]} input, "
                f"got {img.height}x{img.width}"
            )

    def encode(self, img):
        """LdrImage at the configured resolution -> TokenGrid."""
        self._check_input(img)
        x = ad.Tensor(img.pixels.transpose(2, 0, 1)[None].astype(self.cfg.dtype))
        z_hat = self.encoder(x).data[0].transpose(1, 2, 0)
        _, idx = quantize(z_hat, self.codebook)
        return TokenGrid(idx, self.cfg.codebook_size)

    def decode(self, grid):
        """TokenGrid (any dims) -> LdrImage of dims * compression."""
        emb = self.codes.data[grid.indices]  # (h, w, c)
        z = ad.Tensor(emb.transpose(2, 0, 1)[None].astype(self.cfg.dtype))
        out = self.decoder(z).data[0].transpose(1, 2, 0)
        return LdrImage(np.clip(out, 0.0, 1.0))

    def reconstruct(self, img):
        return self.decode(self.encode(img))


def vq_loss(batch, tokenizer, return_aux=False, quant_scale=1.0):
    """Total training loss for a (B, 3, H, W) float array of images.

    Terms: pixelwise-L1 reconstruction, encoder commitment pulled toward the
    frozen quantized codes, and the codebook term pulled toward the frozen
    encoder output (weighted by beta_commit).  The decoder consumes the
    quantized codes through a straight-through estimator, so its gradient
    reaches the encoder unchanged.  Squared norms are summed over the code
    dim and averaged over grid positions; `quant_scale` rescales both norm
    terms in the total (optimizer preconditioning, same minimizers) while the
    reported parts stay unscaled.
    """
    cfg = tokenizer.cfg
    x = ad.Tensor(np.ascontiguousarray(batch, dtype=cfg.dtype))
    z_hat = tokenizer.encoder(x)  # (B, c, h, w)
    b, c, h, w = z_hat.shape
    z_hwc = ad.transpose(z_hat, (0, 2, 3, 1))
    _, idx = quantize(z_hwc.data, tokenizer.codebook)
    z_q = ad.embedding_lookup(tokenizer.codes, idx)  # grads reach the table

    st = ad.straight_through(ad.stop_gradient(z_q), z_hwc)
    decoded = tokenizer.decoder(ad.transpose(st, (0, 3, 1, 2)))

    npos = float(b * h * w)
    rec = ad.tensor_mean(ad.absolute(ad.sub(decoded, x)))
    commit_diff = ad.sub(ad.stop_gradient(z_q), z_hwc)
    commit = ad.mul(ad.tensor_sum(ad.mul(commit_diff, commit_diff)), 1.0 / npos)
    code_diff = ad.sub(ad.Tensor(z_hwc.data.copy()), z_q)
    codebook_term = ad.mul(ad.tensor_sum(ad.mul(code_diff, code_diff)), 1.0 / npos)

    total = ad.add(
        rec,
        ad.mul(ad.add(commit, ad.mul(codebook_term, cfg.beta_commit)), quant_scale),
    )
    parts = {
        "rec": rec.item(),
        "commit": commit.item(),
        "codebook": codebook_term.item(),
    }
    if return_aux:
        return total, parts, {"indices": idx, "z_hat": z_hwc.data, "decoded": decoded.data}
    return total, parts


def train_tokenizer(dataset, cfg):
    """Fit a Tokenizer on a list of LdrImage; deterministic per cfg.seed."""
    if not dataset:
        raise VqError("empty training dataset")
    rng = np.random.default_rng(cfg.seed)
    tok = Tokenizer(cfg, rng)
    for img in dataset:
        tok._check_input(img)
    stack = np.stack([img.pixels.transpose(2, 0, 1) for img in dataset])
    params = tok.parameters()
    opt = ad.Adam(params, lr=cfg.lr)
    unused = np.zeros(cfg.codebook_size, dtype=np.int64)
    for step in range(cfg.steps):
        if len(dataset) <= cfg.batch_size:
            pick = np.arange(len(dataset))
        else:
            pick = rng.choice(len(dataset), size=cfg.batch_size, replace=False)
        # per-element scaling of the quantization terms keeps their gradients
        # commensurate with the pixel-mean reconstruction term
        loss, parts, aux = vq_loss(
            stack[pick], tok, return_aux=True, quant_scale=1.0 / cfg.code_dim
        )
        opt.zero_grad()
        ad.backward(loss)
        opt.step()

        unused += 1
        unused[np.unique(aux["indices"])] = 0
        dead = np.flatnonzero(unused >= cfg.dead_entry_steps)
        if dead.size:
            pool = aux["z_hat"].reshape(-1, cfg.code_dim)
            rows = rng.integers(0, pool.shape[0], size=dead.size)
            jitter = rng.standard_normal((dead.size, cfg.code_dim)) * 0.01
            tok.codes.data[dead] = (pool[rows] + jitter).astype(cfg.dtype)
            unused[dead] = 0
        if step % 50 == 0 or step == cfg.steps - 1:
            tok.train_log.append((step, float(loss.item()), dict(parts)))
    return tok


def reconstruction_mse(tok, dataset):
    errs = [
        float(np.mean((tok.reconstruct(img).pixels - img.pixels) ** 2))
        for img in dataset
    ]
    return float(np.mean(errs))


# Named constructors for the two codebook roles.


def global_tokenizer_config(desk=True, **overrides):
    """Whole-panorama tokenizer: circular convs, 32x64 -> 4x8 tokens at desk
    scale (128x256 -> 8x16 at paper scale)."""
    base = dict(
        input_hw=(32, 64) if desk else (128, 256),
        compression=8 if desk else 16,
        circular=True,
        code_dim=64 if desk else 256,
        codebook_size=256,
    )
    base.update(overrides)
    return TokenizerConfig(**base)


def local_tokenizer_config(desk=True, **overrides):
    """Patch tokenizer: zero padding, 64x64 -> 4x4 tokens at desk scale
    (256x256 -> 16x16 at paper scale)."""
    base = dict(
        input_hw=(64, 64) if desk else (256, 256),
        compression=16,
        circular=False,
        code_dim=64 if desk else 256,
        codebook_size=256,
    )
    base.update(overrides)
    return TokenizerConfig(**base)
