"""Autoregressive token samplers over the dual codebooks.

The text-conditioned global sampler predicts the whole-panorama token grid
from a bundle of embedding vectors (KNN neighbors + text slot); the
structure-aware local sampler predicts patch token grids conditioned on the
global grid and per-token spherical encodings.  Both share a small causal
transformer; condition tokens are pure context prepended to the generated
sequence.  Full panoramas are assembled by sliding the local sampler's
window over the token lattice, freezing already-generated tokens.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import nn
from .embedding import contrastive_loss, DEFAULT_TAU
from .sphere import patch_spe
from .vq import TokenGrid


class SamplerError(ValueError):
    pass


NEG_INF = -1e9


@dataclass
class TransformerConfig:
    vocab: int
    n_layers: int = 2
    n_heads: int = 4
    width: int = 128
    context: int = 256
    seed: int = 0
    dtype: object = np.float32


def l2_normalize(x, eps=1e-12):
    sq = ad.tensor_sum(ad.mul(x, x), axis=-1, keepdims=True)
    return ad.div(x, ad.sqrt(ad.add(sq, eps)))


class _Block(nn.Module):
    def __init__(self, rng, width, heads, dtype):
        if width % heads:
            raise SamplerError(f"width {width} not divisible by heads {heads}")
        self.heads = heads
        self.ln1 = nn.LayerNorm(width, dtype)
        self.qkv = nn.Linear(rng, width, 3 * width, dtype)
        self.proj = nn.Linear(rng, width, width, dtype)
        self.ln2 = nn.LayerNorm(width, dtype)
        self.fc1 = nn.Linear(rng, width, 2 * width, dtype)
        self.fc2 = nn.Linear(rng, 2 * width, width, dtype)

    def __call__(self, x, mask):
        b, t, w = x.shape
        hd = w // self.heads
        qkv = self.qkv(self.ln1(x))
        qkv = ad.transpose(
            ad.reshape(qkv, (b, t, 3, self.heads, hd)), (2, 0, 3, 1, 4)
        )  # (3, b, heads, t, hd)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
        scores = ad.add(scores, mask[:t, :t])
        att = ad.softmax(scores, axis=-1)
        out = ad.matmul(att, v)  # (b, heads, t, hd)
        out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (b, t, w))
        x = ad.add(x, self.proj(out))
        h = self.fc2(ad.relu(self.fc1(self.ln2(x))))
        return ad.add(x, h)


class CausalTransformer(nn.Module):
    """Decoder-only transformer over token embeddings with a context prefix."""

    def __init__(self, cfg):
        rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.tok_emb = nn.Embedding(rng, cfg.vocab, cfg.width, cfg.dtype)
        self.pos_emb = nn.Embedding(rng, cfg.context, cfg.width, cfg.dtype)
        self.blocks = [
            _Block(rng, cfg.width, cfg.n_heads, cfg.dtype) for _ in range(cfg.n_layers)
        ]
        self.ln_f = nn.LayerNorm(cfg.width, cfg.dtype)
        self.head = nn.Linear(rng, cfg.width, cfg.vocab, cfg.dtype)
        self._mask = np.triu(
            np.full((cfg.context, cfg.context), NEG_INF, dtype=cfg.dtype), k=1
        )
        self._rng = rng

    def logits(self, cond, tokens):
        """Next-token logits at every generated position.

        `cond` is a (B, C, width) Tensor of condition embeddings (C >= 1);
        `tokens` an int array (B, N).  Position C-1+k predicts token k, so the
        returned logits have shape (B, N, vocab) when N tokens are supplied
        (teacher forcing) and (B, 1, vocab) incrementally when N'=N-1 tokens
        are known and the next is wanted -- callers slice accordingly.
        """
        b, c, _ = cond.shape
        n = tokens.shape[1] if tokens.size else 0
        if c + n > self.cfg.context:
            raise SamplerError(
                f"sequence {c}+{n} exceeds context {self.cfg.context}"
            )
        if n:
            emb = self.tok_emb(tokens)
            seq = ad.concat([cond, emb], axis=1)
        else:
            seq = cond
        t = c + n
        pos = self.pos_emb(np.arange(t))
        x = ad.add(seq, pos)
        for block in self.blocks:
            x = block(x, self._mask)
        return self.head(self.ln_f(x))

    def nll(self, cond, targets, reduction="mean"):
        """Teacher-forced negative log-likelihood of `targets` (B, N) in nats."""
        b, n = targets.shape
        c = cond.shape[1]
        logits = self.logits(cond, targets[:, : n - 1])
        pred = logits[:, c - 1 :, :]
        return ad.cross_entropy_with_logits(pred, targets, reduction=reduction)

    def accuracy(self, cond, targets):
        """Teacher-forced greedy next-token accuracy."""
        n = targets.shape[1]
        c = cond.shape[1]
        logits = self.logits(cond, targets[:, : n - 1])
        pred = logits.data[:, c - 1 :, :].argmax(axis=-1)
        return float((pred == targets).mean())

    def sample_tokens(self, cond, count, temperature=1.0, top_k=100, seed=None):
        """Autoregressively draw `count` tokens; deterministic given seed.

        temperature <= 0 or top_k == 1 selects greedy argmax decoding.
        Returns (tokens (B, count), logprobs (B, count)).
        """
        rng = np.random.default_rng(seed)
        b = cond.shape[0]
        tokens = np.zeros((b, 0), dtype=np.int64)
        logprobs = np.zeros((b, count))
        greedy = temperature <= 0.0 or top_k == 1
        k = max(1, min(top_k, self.cfg.vocab))
        for i in range(count):
            logits = self.logits(cond, tokens).data[:, -1, :].astype(np.float64)
            if greedy:
                pick = logits.argmax(axis=-1)
                row_lp = _log_softmax_rows(logits)
            else:
                scaled = logits / temperature
                if k < self.cfg.vocab:
                    thresh = np.partition(scaled, -k, axis=-1)[:, -k][:, None]
                    scaled = np.where(scaled >= thresh, scaled, -np.inf)
                row_lp = _log_softmax_rows(scaled)
                pick = np.array(
                    [rng.choice(self.cfg.vocab, p=np.exp(row_lp[j])) for j in range(b)]
                )
            logprobs[:, i] = row_lp[np.arange(b), pick]
            tokens = np.concatenate([tokens, pick[:, None]], axis=1)
        return tokens, logprobs


def _log_softmax_rows(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    with np.errstate(divide="ignore"):  # -inf entries from top-k filtering
        return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


@dataclass(frozen=True)
class SamplerOutput:
    grid: TokenGrid
    logprobs: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.logprobs)):
            raise SamplerError("non-finite log-probabilities")


# ---------------------------------------------------------------------------
# global sampler


@dataclass
class GlobalSamplerConfig:
    vocab: int = 256
    grid_hw: tuple = (4, 8)
    cond_dim: int = 64
    knn_k: int = 5
    alpha: float = 0.25
    tau: float = DEFAULT_TAU
    con_weight: float = 1.0
    no_knn: bool = False
    no_lcon: bool = False
    transformer: TransformerConfig = None
    steps: int = 1200
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.transformer is None:
            self.transformer = TransformerConfig(vocab=self.vocab, seed=self.seed)


class GlobalSampler(nn.Module):
    """Text-conditioned sampler over the global token grid."""

    def __init__(self, cfg):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.model = CausalTransformer(cfg.transformer)
        self.cond_proj = nn.Linear(
            rng, cfg.cond_dim, cfg.transformer.width, cfg.transformer.dtype
        )
        self.trained = False

    def _project(self, vectors):
        """(B, C, d) raw embedding vectors -> (B, C, width) condition tokens."""
        arr = np.asarray(vectors, dtype=self.cfg.transformer.dtype)
        return self.cond_proj(ad.Tensor(arr))

    def train_losses(self, token_batch, bundles, img_embs, pseudo_feats):
        """NLL over grids plus contrastive regularization on the projection.

        `bundles` is (B, K+1, d) conditioning (text slot last), `img_embs`
        and `pseudo_feats` are the (B, d) raw embeddings driving the
        contrastive term; gradients reach only the condition projection
        head, the embedding provider itself being frozen.
        """
        targets = np.stack([g.indices.reshape(-1) for g in token_batch])
        cond = self._project(bundles)
        nll = self.model.nll(cond, targets)
        if self.cfg.no_lcon or targets.shape[0] < 2:
            return nll, ad.Tensor(np.zeros(()))
        proj_img = l2_normalize(self._project(img_embs[:, None, :])[:, 0, :])
        proj_pseudo = l2_normalize(self._project(pseudo_feats[:, None, :])[:, 0, :])
        l_con = contrastive_loss(proj_img, proj_pseudo, self.cfg.tau)
        return nll, l_con

    def sample(self, bundle, temperature=1.0, top_k=100, seed=None):
        """Generate a full global TokenGrid from a ConditionBundle."""
        if not self.trained:
            raise SamplerError("global sampler has not been trained")
        h, w = self.cfg.grid_hw
        cond = self._project(bundle.vectors[None])
        tokens, lp = self.model.sample_tokens(
            cond, h * w, temperature=temperature, top_k=top_k, seed=seed
        )
        grid = TokenGrid(tokens[0].reshape(h, w), self.cfg.vocab)
        return SamplerOutput(grid=grid, logprobs=lp[0].reshape(h, w))

    def resample_region(self, base_grid, bundle, col_range, temperature=1.0,
                        top_k=100, seed=None):
        """Regenerate only the token columns in [c0, c1); others stay frozen."""
        if not self.trained:
            raise SamplerError("global sampler has not been trained")
        h, w = self.cfg.grid_hw
        c0, c1 = col_range
        if not 0 <= c0 < c1 <= w:
            raise SamplerError(f"bad column range {col_range} for grid width {w}")
        rng = np.random.default_rng(seed)
        cond = self._project(bundle.vectors[None])
        out = base_grid.indices.copy().reshape(-1)
        free = np.zeros((h, w), dtype=bool)
        free[:, c0:c1] = True
        free = free.reshape(-1)
        known = 0
        while known < out.size:
            if not free[known]:
                known += 1
                continue
            logits = self.model.logits(cond, out[None, :known]).data[0, -1].astype(np.float64)
            out[known] = _draw(logits, temperature, top_k, rng)
            known += 1
        return TokenGrid(out.reshape(h, w), self.cfg.vocab)


def _draw(logits, temperature, top_k, rng):
    if temperature <= 0.0 or top_k == 1:
        return int(logits.argmax())
    scaled = logits / temperature
    k = max(1, min(top_k, logits.shape[0]))
    if k < logits.shape[0]:
        thresh = np.partition(scaled, -k)[-k]
        scaled = np.where(scaled >= thresh, scaled, -np.inf)
    p = np.exp(_log_softmax_rows(scaled[None]))[0]
    return int(rng.choice(logits.shape[0], p=p))


# ---------------------------------------------------------------------------
# local sampler


@dataclass
class LocalSamplerConfig:
    vocab: int = 256
    global_vocab: int = 256
    window: int = 4
    stride: int = 2
    spe_channels: int = 18
    no_global: bool = False
    no_spe: bool = False   # keep raw angles, zero the Fourier channels
    no_sp: bool = False    # drop spherical tokens entirely
    transformer: TransformerConfig = None
    steps: int = 1500
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.transformer is None:
            self.transformer = TransformerConfig(vocab=self.vocab, seed=self.seed)


class LocalSampler(nn.Module):
    """Structure-aware sampler over local patch token grids."""

    def __init__(self, cfg):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.model = CausalTransformer(cfg.transformer)
        width = cfg.transformer.width
        self.zg_emb = nn.Embedding(rng, cfg.global_vocab, width, cfg.transformer.dtype)
        self.spe_proj = nn.Linear(rng, cfg.spe_channels, width, cfg.transformer.dtype)
        self.trained = False

    def condition(self, zg_grids, spe_batch):
        """Build (B, C, width) condition tokens from global grids and SPE.

        Either part can be disabled by ablation flags; at least one token is
        required (a zero-length condition is rejected).
        """
        parts = []
        if not self.cfg.no_global:
            if zg_grids is None:
                raise SamplerError("global condition required unless no_global")
            zg = np.stack([g.indices.reshape(-1) for g in zg_grids])
            parts.append(self.zg_emb(zg))
        if not self.cfg.no_sp:
            if spe_batch is None:
                raise SamplerError("spherical encodings required unless no_sp")
            spe = np.stack(
                [s.values.reshape(-1, s.values.shape[-1]) for s in spe_batch]
            ).astype(np.float32)
            if spe.shape[-1] != self.cfg.spe_channels:
                raise SamplerError(
                    f"SPE channels {spe.shape[-1]} != configured {self.cfg.spe_channels}"
                )
            if self.cfg.no_spe:
                spe = spe.copy()
                spe[..., 2:] = 0.0
            parts.append(self.spe_proj(ad.Tensor(spe)))
        if not parts:
            raise SamplerError("condition is empty: no_global and no_sp both set")
        return parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)

    def train_loss(self, patch_grids, spe_batch, zg_grids):
        """Teacher-forced NLL (nats/token) of patch token grids."""
        targets = np.stack([g.indices.reshape(-1) for g in patch_grids])
        cond = self.condition(zg_grids, spe_batch)
        return self.model.nll(cond, targets)

    def sample_window(self, zg_grid, spe, known_flat, temperature, top_k, rng):
        """Fill the unknown suffix cells of one window, row-major.

        `known_flat` is an int array with -1 at cells to generate; earlier
        cells must all be known once generation starts (prefix property).
        """
        cond = self.condition(
            None if self.cfg.no_global else [zg_grid],
            None if self.cfg.no_sp else [spe],
        )
        out = known_flat.copy()
        for i in range(out.size):
            if out[i] >= 0:
                continue
            if np.any(out[:i] < 0):
                raise SamplerError("window prefix contains unknown cells")
            logits = self.model.logits(cond, out[None, :i]).data[0, -1].astype(np.float64)
            out[i] = _draw(logits, temperature, top_k, rng)
        return out


def window_plan(lat_h, lat_w, window, stride):
    """Window origins (row-major) covering an (lat_h, lat_w) token lattice.

    Rows clamp to the bottom edge; columns wrap past the right edge so the
    seam windows take their context from column 0.  Planning stops once every
    column has been covered.
    """
    if window > lat_h or window > lat_w:
        raise SamplerError(f"window {window} exceeds lattice {lat_h}x{lat_w}")
    rows = sorted({min(r, lat_h - window) for r in range(0, lat_h, stride)})
    cols = []
    covered = np.zeros(lat_w, dtype=bool)
    for c in range(0, lat_w, stride):
        if covered.all():
            break
        cols.append(c)
        covered[(c + np.arange(window)) % lat_w] = True
    return [(r, c) for r in rows for c in cols]


def generate_panorama(zg_grid, sampler, tokenizer, pano_hw, window=None,
                      stride=None, temperature=1.0, top_k=100, seed=None,
                      verbatim_axes=False):
    """Slide the local sampler over the full token lattice and decode.

    Returns (LdrImage, assembled TokenGrid).  Tokens generated by earlier
    windows are frozen context for later ones; the decoded image is exactly
    the local decoder applied to the assembled grid.
    """
    if not sampler.trained:
        raise SamplerError("local sampler has not been trained")
    cfg = sampler.cfg
    window = window if window is not None else cfg.window
    stride = stride if stride is not None else cfg.stride
    comp = tokenizer.cfg.compression
    pano_h, pano_w = pano_hw
    if pano_h % comp or pano_w % comp:
        raise SamplerError(f"pano {pano_hw} not divisible by compression {comp}")
    lat_h, lat_w = pano_h // comp, pano_w // comp
    rng = np.random.default_rng(seed)
    lattice = np.full((lat_h, lat_w), -1, dtype=np.int64)
    for r0, c0 in window_plan(lat_h, lat_w, window, stride):
        cols = (c0 + np.arange(window)) % lat_w
        block = lattice[r0 : r0 + window][:, cols]
        if np.all(block >= 0):
            continue
        spe = patch_spe(
            (r0 * comp, c0 * comp),
            window * comp,
            window * comp,
            pano_h,
            pano_w,
            window,
            window,
            verbatim_axes=verbatim_axes,
        )
        filled = sampler.sample_window(
            zg_grid, spe, block.reshape(-1), temperature, top_k, rng
        )
        lattice[np.repeat(np.arange(r0, r0 + window), window),
                np.tile(cols, window)] = filled
    if np.any(lattice < 0):
        raise SamplerError("window plan left unfilled lattice cells")
    grid = TokenGrid(lattice, cfg.vocab)
    return tokenizer.decode(grid), grid


# ---------------------------------------------------------------------------
# training loops


def train_global_sampler(token_grids, img_embs, store, cfg, log=None):
    """Fit the global sampler on (TokenGrid, image embedding) pairs.

    Per step each image gets a fresh pseudo text feature and its exact KNN
    bundle from `store`; the contrastive term regularizes the condition
    projection.  K clamps to the store size.  Deterministic per cfg.seed.
    """
    from .embedding import pseudo_text_feature, knn_condition

    if len(token_grids) != len(img_embs) or not token_grids:
        raise SamplerError("need matched non-empty grids and embeddings")
    if len(store) == 0:
        raise SamplerError("embedding store is not initialized")
    sampler = GlobalSampler(cfg)
    opt = ad.Adam(sampler.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    embs = np.asarray(img_embs, dtype=np.float64)
    k = min(cfg.knn_k, len(store))
    n = len(token_grids)
    for step in range(cfg.steps):
        pseudo = np.stack([pseudo_text_feature(embs[i], cfg.alpha, rng) for i in range(n)])
        if cfg.no_knn:
            bundles = pseudo[:, None, :]
        else:
            bundles = np.stack(
                [knn_condition(pseudo[i], store, k).vectors for i in range(n)]
            )
        nll, l_con = sampler.train_losses(token_grids, bundles, embs, pseudo)
        loss = ad.add(nll, ad.mul(l_con, cfg.con_weight))
        opt.zero_grad()
        ad.backward(loss)
        opt.step()
        if log is not None and (step % 50 == 0 or step == cfg.steps - 1):
            log.append((step, float(nll.item()), float(l_con.item())))
    sampler.trained = True
    return sampler


def train_local_sampler(examples, cfg, log=None):
    """Fit the local sampler on (patch TokenGrid, SpeGrid, global TokenGrid)
    triples; deterministic per cfg.seed."""
    if not examples:
        raise SamplerError("no local training examples")
    sampler = LocalSampler(cfg)
    opt = ad.Adam(sampler.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    batch = min(8, len(examples))
    for step in range(cfg.steps):
        if len(examples) <= batch:
            pick = np.arange(len(examples))
        else:
            pick = rng.choice(len(examples), size=batch, replace=False)
        grids = [examples[i][0] for i in pick]
        spes = [examples[i][1] for i in pick]
        zgs = [examples[i][2] for i in pick]
        loss = sampler.train_loss(grids, spes, zgs)
        opt.zero_grad()
        ad.backward(loss)
        opt.step()
        if log is not None and (step % 50 == 0 or step == cfg.steps - 1):
            log.append((step, float(loss.item())))
    sampler.trained = True
    return sampler


def local_nll(sampler, examples):
    """Mean teacher-forced NLL (nats/token) over example triples."""
    grids = [e[0] for e in examples]
    spes = [e[1] for e in examples]
    zgs = [e[2] for e in examples]
    return float(sampler.train_loss(grids, spes, zgs).item())
