"""Pluggable joint text-image embedding provider and KNN conditioning.

The deterministic toy embedders stand in for a frozen language-image model:
they are not semantic, but same-class procedural scenes land closer together
than cross-class ones, which is all the conditioning pipeline needs at this
scale.  Real embeddings can be supplied through the binary store format
(`T2LEMB1`), produced either by the toy builder here or by the external
exporter tool.
"""

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .raster import resample_area

TOY_DIM = 64
DEFAULT_ALPHA = 0.25
DEFAULT_KNN = 5
DEFAULT_TAU = 0.07

STORE_MAGIC = b"T2LEMB1"

_PROJECTION_SEED = 0x7E0_1EAF


class EmbeddingError(ValueError):
    pass


class StoreFormatError(EmbeddingError):
    """Malformed store file; message carries offset and record index."""


def _unit(v):
    n = float(np.linalg.norm(v))
    if n == 0.0:
        raise EmbeddingError("cannot normalize a zero vector")
    return (v / n).astype(np.float64)


def _hash_u64(data):
    return struct.unpack("<Q", hashlib.blake2b(data, digest_size=8).digest())[0]


def content_key(data):
    """Stable store key for raw bytes: hex SHA-256."""
    return hashlib.sha256(data).hexdigest()


def toy_text_embed(text, dim=TOY_DIM):
    """Deterministic text embedding: unit-normalized sum of per-token vectors.

    Each whitespace token seeds a fixed pseudo-random unit vector via a stable
    64-bit content hash, so the same text always maps to the same embedding.
    """
    tokens = text.lower().split()
    if not tokens:
        raise EmbeddingError("empty text")
    acc = np.zeros(dim, dtype=np.float64)
    for tok in tokens:
        gen = np.random.default_rng(_hash_u64(tok.encode("utf-8")))
        acc += _unit(gen.standard_normal(dim))
    return _unit(acc)


def _toy_projection(dim):
    gen = np.random.default_rng(_PROJECTION_SEED)
    return gen.standard_normal((4 * 8 * 3 + 8, dim)) / np.sqrt(dim)


def toy_image_embed(img, dim=TOY_DIM):
    """Deterministic image embedding from color layout and luminance.

    Features are 4x8 mean-color cells plus an 8-bin luminance histogram,
    pushed through a fixed seeded projection and unit-normalized.
    """
    cells = resample_area(img, 4, 8).pixels.reshape(-1).astype(np.float64)
    luma = img.pixels.astype(np.float64) @ np.array([0.2126, 0.7152, 0.0722])
    hist, _ = np.histogram(luma, bins=8, range=(0.0, 1.0))
    hist = hist / max(1, luma.size)
    feats = np.concatenate([cells, hist])
    return _unit(feats @ _toy_projection(dim))


def pseudo_text_feature(img_emb, alpha=DEFAULT_ALPHA, rng=None):
    """Noise-perturbed image embedding standing in for a text embedding.

    Blend (1-alpha) * v + alpha * eps * |v| / |eps| with standard Gaussian
    eps, then renormalize to unit length.  At alpha=0 this is exactly v.
    """
    if not 0.0 <= alpha < 1.0:
        raise EmbeddingError(f"alpha must be in [0, 1), got {alpha}")
    v = np.asarray(img_emb, dtype=np.float64)
    if alpha == 0.0:
        return _unit(v)
    rng = rng if rng is not None else np.random.default_rng()
    norm_v = float(np.linalg.norm(v))
    while True:
        eps = rng.standard_normal(v.shape[0])
        norm_e = float(np.linalg.norm(eps))
        if norm_e > 0.0:
            break
    blended = (1.0 - alpha) * v + alpha * eps * (norm_v / norm_e)
    return _unit(blended)


@dataclass
class EmbeddingStore:
    """Ordered (key, unit vector) collection with exact cosine KNN."""

    dim: int
    keys: list = field(default_factory=list)
    _matrix: np.ndarray = None
    _index: dict = field(default_factory=dict)

    def __post_init__(self):
        if self._matrix is None:
            self._matrix = np.zeros((0, self.dim), dtype=np.float32)

    def __len__(self):
        return len(self.keys)

    def add(self, key, vector):
        if key in self._index:
            raise EmbeddingError(f"duplicate store key {key!r}")
        vec = np.asarray(vector, dtype=np.float64)
        if vec.shape != (self.dim,):
            raise EmbeddingError(f"vector dim {vec.shape} != store dim {self.dim}")
        if abs(np.linalg.norm(vec) - 1.0) > 1e-5:
            raise EmbeddingError(f"store vectors must be unit norm ({key!r})")
        self._index[key] = len(self.keys)
        self.keys.append(key)
        self._matrix = np.vstack([self._matrix, vec.astype(np.float32)[None]])

    def get(self, key):
        try:
            return self._matrix[self._index[key]].astype(np.float64)
        except KeyError:
            raise KeyError(f"store has no key {key!r}") from None

    def __contains__(self, key):
        return key in self._index

    @property
    def vectors(self):
        return self._matrix

    def nearest(self, query, k):
        """Top-k keys/vectors by cosine similarity; ties keep insertion order."""
        if k > len(self.keys):
            raise EmbeddingError(f"store holds {len(self.keys)} < k={k} entries")
        q = np.asarray(query, dtype=np.float64)
        sims = self._matrix.astype(np.float64) @ q
        order = np.argsort(-sims, kind="stable")[:k]
        return [(self.keys[i], self._matrix[i].astype(np.float64)) for i in order]


@dataclass(frozen=True)
class ConditionBundle:
    """Fixed-order condition: K neighbor vectors first, text slot last."""

    knn: tuple
    text: np.ndarray

    @property
    def vectors(self):
        """(K+1, dim) array in the fixed order."""
        return np.stack(list(self.knn) + [self.text])

    def __len__(self):
        return len(self.knn) + 1


def knn_condition(query, store, k=DEFAULT_KNN):
    """Condition bundle of the exact top-k image neighbors plus the query."""
    q = _unit(np.asarray(query, dtype=np.float64))
    neighbors = tuple(vec for _, vec in store.nearest(q, k))
    return ConditionBundle(knn=neighbors, text=q)


def contrastive_loss(img_embs, pseudo_feats, tau=DEFAULT_TAU):
    """Alignment regularizer between image features and pseudo text features.

    For each pseudo feature the positive is its own image feature against all
    others in the batch:

        L = -tau * sum_i log softmax_j(v_j . c_i / tau)[i]

    Both arguments are (n, d) Tensors so gradients can reach an upstream
    projection; returns a scalar Tensor.
    """
    if not 0.0 < tau <= 1.0:
        raise EmbeddingError(f"tau must be in (0, 1], got {tau}")
    n = img_embs.shape[0]
    if n < 2 or pseudo_feats.shape[0] != n:
        raise EmbeddingError("contrastive loss needs matched batches of >= 2")
    logits = ad.mul(
        ad.matmul(pseudo_feats, ad.transpose(img_embs, (1, 0))), 1.0 / tau
    )  # logits[i, j] = v_j . c_i / tau
    nll = ad.cross_entropy_with_logits(logits, np.arange(n), reduction="sum")
    return ad.mul(nll, tau)


# ---------------------------------------------------------------------------
# store file format


def save_store(store, path):
    """Write the store: magic, u32 count, u32 dim, then key/vector records."""
    with open(path, "wb") as fh:
        fh.write(STORE_MAGIC)
        fh.write(struct.pack("<II", len(store), store.dim))
        for i, key in enumerate(store.keys):
            encoded = key.encode("utf-8")
            if len(encoded) > 0xFFFF:
                raise EmbeddingError(f"record {i}: key too long")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(store.vectors[i].astype("<f4").tobytes())


def load_store(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[: len(STORE_MAGIC)] != STORE_MAGIC:
        raise StoreFormatError(f"{path}: bad store magic (offset 0)")
    pos = len(STORE_MAGIC)
    try:
        count, dim = struct.unpack_from("<II", raw, pos)
    except struct.error:
        raise StoreFormatError(f"{path}: truncated header (offset {pos})") from None
    pos += 8
    if dim < 1:
        raise StoreFormatError(f"{path}: dimension must be positive (offset {pos - 4})")
    store = EmbeddingStore(dim=dim)
    for i in range(count):
        try:
            (key_len,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            if len(raw) - pos < key_len:
                raise ValueError("key out of bounds")
            key = raw[pos : pos + key_len].decode("utf-8")
            pos += key_len
            vec = np.frombuffer(raw, dtype="<f4", count=dim, offset=pos)
            if len(vec) != dim:
                raise ValueError("vector out of bounds")
            pos += 4 * dim
        except (struct.error, ValueError) as exc:
            raise StoreFormatError(
                f"{path}: truncated record {i} (offset {pos}): {exc}"
            ) from None
        store.add(key, vec.astype(np.float64))
    if pos != len(raw):
        raise StoreFormatError(f"{path}: {len(raw) - pos} trailing bytes (offset {pos})")
    return store


def build_toy_store(images, keys=None, dim=TOY_DIM):
    """Embed a list of LdrImages with the toy image embedder.

    Keys default to content hashes of the raw pixel bytes.
    """
    store = EmbeddingStore(dim=dim)
    for i, img in enumerate(images):
        key = keys[i] if keys is not None else content_key(img.pixels.tobytes())
        store.add(key, toy_image_embed(img, dim))
    return store
