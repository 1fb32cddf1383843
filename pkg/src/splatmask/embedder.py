"""Face-verifier stand-in: differentiable crop/resize alignment and a seeded
random-feature embedding network with a hand-written backward pass."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .rng import substream

ALIGNED_SIZE = 112
EMBED_DIM = 512

# architecture id -> (pool size, hidden width)
ARCHITECTURES = {"A": (8, 1024), "B": (16, 768)}


class EmbeddingError(ArithmeticError):
    pass


# --------------------------------------------------------------------------- alignment


@lru_cache(maxsize=32)
def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Bilinear (half-pixel centers) interpolation matrix of shape (n_out, n_in)."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    m.setflags(write=False)
    return m


def _crop_box(h: int, w: int) -> tuple[int, int, int]:
    side = min(h, w)
    return (h - side) // 2, (w - side) // 2, side


def _resize2d(r: np.ndarray, img: np.ndarray) -> np.ndarray:
    """``r @ img[..., c] @ r.T`` for every channel."""
    rows = np.tensordot(r, img, axes=(1, 0))  # (out, in, 3)
    return np.tensordot(rows, r, axes=(1, 1)).transpose(0, 2, 1)


def align(pixels: np.ndarray) -> np.ndarray:
    """Center-crop the largest square and resize bilinearly to 112x112x3."""
    pixels = np.asarray(pixels, dtype=np.float64)
    h, w = pixels.shape[:2]
    if h < 16 or w < 16:
        raise ValueError(f"image must be at least 16x16, got {w}x{h}")
    top, left, side = _crop_box(h, w)
    crop = pixels[top:top + side, left:left + side]
    if side == ALIGNED_SIZE:
        return crop.copy()
    r = _resize_matrix(side, ALIGNED_SIZE)
    return _resize2d(r, crop)


def align_backward(dl_daligned: np.ndarray, image_shape) -> np.ndarray:
    h, w = image_shape[:2]
    top, left, side = _crop_box(h, w)
    out = np.zeros((h, w, 3))
    if side == ALIGNED_SIZE:
        out[top:top + side, left:left + side] = dl_daligned
        return out
    r = _resize_matrix(side, ALIGNED_SIZE)
    out[top:top + side, left:left + side] = _resize2d(r.T, dl_daligned)
    return out


# --------------------------------------------------------------------------- network


@dataclass(frozen=True, eq=False)
class SurrogateEmbedder:
    """pool -> affine -> tanh -> affine -> L2 normalize, weights fixed by (seed, arch).

    Pixels are standardized as ``(x - 0.5) / input_std`` before the first layer.
    """

    seed: int = 0
    arch: str = "A"
    input_std: float = 0.5
    pool: int = field(init=False)
    hidden: int = field(init=False)
    w1: np.ndarray = field(init=False, repr=False)
    w2: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}")
        pool, hidden = ARCHITECTURES[self.arch]
        cells = ALIGNED_SIZE // pool
        fan_in = cells * cells * 3
        rng = substream(self.seed, "embedder", self.arch)
        w1 = rng.standard_normal((hidden, fan_in)) / np.sqrt(fan_in)
        w2 = rng.standard_normal((EMBED_DIM, hidden)) / np.sqrt(hidden)
        w1.setflags(write=False)
        w2.setflags(write=False)
        object.__setattr__(self, "pool", pool)
        object.__setattr__(self, "hidden", hidden)
        object.__setattr__(self, "w1", w1)
        object.__setattr__(self, "w2", w2)

    @property
    def input_dim(self) -> int:
        return self.w1.shape[1]


@dataclass(eq=False)
class EmbedCache:
    x: np.ndarray
    hidden: np.ndarray
    z: np.ndarray
    z_norm: float
    embedding: np.ndarray


def _pool(aligned: np.ndarray, p: int) -> np.ndarray:
    c = ALIGNED_SIZE // p
    return aligned.reshape(c, p, c, p, 3).mean(axis=(1, 3))


def embed_forward(emb: SurrogateEmbedder, aligned: np.ndarray) -> EmbedCache:
    aligned = np.asarray(aligned, dtype=np.float64)
    if aligned.shape != (ALIGNED_SIZE, ALIGNED_SIZE, 3):
        raise ValueError(f"aligned image must be 112x112x3, got {aligned.shape}")
    x = (_pool(aligned, emb.pool).reshape(-1) - 0.5) / emb.input_std
    hid = np.tanh(emb.w1 @ x)
    z = emb.w2 @ hid
    norm = float(np.sqrt(z @ z))
    if not np.isfinite(norm) or norm == 0.0:
        raise EmbeddingError("embedding network produced a non-finite or zero output")
    return EmbedCache(x, hid, z, norm, z / norm)


def embed(emb: SurrogateEmbedder, aligned: np.ndarray) -> np.ndarray:
    """Unit-norm 512-d embedding of an aligned 112x112 crop."""
    return embed_forward(emb, aligned).embedding


def embed_backward(emb: SurrogateEmbedder, cache: EmbedCache, dl_de: np.ndarray) -> np.ndarray:
    """dL/d(aligned image) given dL/d(embedding)."""
    e = cache.embedding
    g = np.asarray(dl_de, dtype=np.float64)
    g_z = (g - e * (e @ g)) / cache.z_norm
    g_hid = emb.w2.T @ g_z
    g_pre = g_hid * (1.0 - cache.hidden * cache.hidden)
    g_x = emb.w1.T @ g_pre / emb.input_std
    p = emb.pool
    c = ALIGNED_SIZE // p
    g_pool = g_x.reshape(c, 1, c, 1, 3) / (p * p)
    return np.broadcast_to(g_pool, (c, p, c, p, 3)).reshape(ALIGNED_SIZE, ALIGNED_SIZE, 3).copy()


def embed_image(emb: SurrogateEmbedder, pixels: np.ndarray) -> np.ndarray:
    return embed(emb, align(pixels))


def cosine_similarity(e1, e2) -> float:
    e1 = np.asarray(e1, dtype=np.float64)
    e2 = np.asarray(e2, dtype=np.float64)
    if not (np.isfinite(e1).all() and np.isfinite(e2).all()):
        raise ValueError("embeddings must be finite")
    n1, n2 = np.linalg.norm(e1), np.linalg.norm(e2)
    if n1 == 0.0 or n2 == 0.0:
        raise ValueError("cosine similarity of a zero vector is undefined")
    return float(np.clip((e1 @ e2) / (n1 * n2), -1.0, 1.0))


def reference_embedding(emb: SurrogateEmbedder, scene, view, pose=None, settings=None) -> np.ndarray:
    """Embedding of the unmasked scene from the reference view; read-only array."""
    from .renderer import DEFAULT_SETTINGS, render

    img, _ = render(scene, view, pose, settings or DEFAULT_SETTINGS)
    e = embed_image(emb, img.pixels)
    e.setflags(write=False)
    return e
