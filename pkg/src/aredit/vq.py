"""Patch-grid vector quantization: encode, nearest-neighbor lookup, decode.

The "encoder" extracts non-overlapping PxPx3 patches as flat feature vectors,
the quantizer maps each to its nearest codebook entry (L2, ties to the lowest
index), and the decoder reassembles patches in raster order. fit_codebook
learns the dictionary with Lloyd's k-means (k-means++ init); corpora whose
distinct-patch count is at most K quantize losslessly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .seeding import make_rng


class DimensionError(Exception):
    pass


class InsufficientDataError(Exception):
    pass


@dataclass
class Codebook:
    """K x D dictionary of flattened patch vectors; D == P*P*3."""

    entries: np.ndarray
    patch_size: int
    version: str = "v1"

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.float64)
        k, d = self.entries.shape
        if k < 2:
            raise ValueError("codebook needs at least 2 entries")
        if d != self.patch_size * self.patch_size * 3:
            raise DimensionError("entry dim must equal P*P*3")

    @property
    def k(self):
        return self.entries.shape[0]

    @property
    def dim(self):
        return self.entries.shape[1]


@dataclass
class TokenSeq:
    """Raster-order codebook indices for an h x w patch grid."""

    indices: np.ndarray
    h: int
    w: int

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indices.shape != (self.h * self.w,):
            raise DimensionError("token count must equal h*w")


def encode_patches(img, patch_size):
    """Image (H,W,3) -> (h,w,D) row-major flattened patch features."""
    img = np.asarray(img, dtype=np.float64)
    hgt, wid, ch = img.shape
    p = patch_size
    if ch != 3 or hgt % p or wid % p:
        raise DimensionError(f"image {img.shape} not divisible into {p}x{p} patches")
    h, w = hgt // p, wid // p
    feats = img.reshape(h, p, w, p, 3).transpose(0, 2, 1, 3, 4).reshape(h, w, p * p * 3)
    return feats


def quantize(features, cb):
    """Nearest-entry lookup per feature; ties broken by the lowest index."""
    feats = np.asarray(features, dtype=np.float64)
    h, w, d = feats.shape
    if d != cb.dim:
        raise DimensionError(f"feature dim {d} != codebook dim {cb.dim}")
    flat = feats.reshape(-1, d)
    idx = np.empty(flat.shape[0], dtype=np.int64)
    e2 = (cb.entries ** 2).sum(axis=1)
    block = 8192
    for lo in range(0, flat.shape[0], block):
        chunk = flat[lo:lo + block]
        # fast GEMM-based distances, then exact recheck of near-ties so the
        # lowest-index tie-break is bit-deterministic
        d2 = e2[None, :] - 2.0 * (chunk @ cb.entries.T)
        best = d2.argmin(axis=1)
        part = np.partition(d2, 1, axis=1)
        close = part[:, 1] - part[:, 0] < 1e-9
        for i in np.nonzero(close)[0]:
            exact = ((cb.entries - chunk[i]) ** 2).sum(axis=1)
            best[i] = int(exact.argmin())
        idx[lo:lo + block] = best
    return TokenSeq(idx, h, w)


def decode(tokens, cb):
    """Tokens -> image, patches placed in raster order, clamped to [0,1]."""
    if tokens.indices.min(initial=0) < 0 or tokens.indices.max(initial=0) >= cb.k:
        raise IndexError("token index out of codebook range")
    p = cb.patch_size
    h, w = tokens.h, tokens.w
    patches = cb.entries[tokens.indices].reshape(h, w, p, p, 3)
    img = patches.transpose(0, 2, 1, 3, 4).reshape(h * p, w * p, 3)
    return np.clip(img, 0.0, 1.0)


def _kmeans_pp_init(x, k, rng):
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]), dtype=np.float64)
    centers[0] = x[rng.integers(n)]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            # all remaining mass at existing centers; take any unused point
            centers[j] = x[rng.integers(n)]
            continue
        probs = d2 / total
        centers[j] = x[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, ((x - centers[j]) ** 2).sum(axis=1))
    return centers


def fit_codebook(samples, k, iters=50, seed=0):
    """Lloyd's k-means over patch samples.

    Exact shortcut: when the samples contain at most k distinct vectors the
    distinct vectors become entries directly (zero distortion) and any unused
    slots are filled with deterministic pseudo-random vectors far from [0,1]
    patch space, keeping K fixed and all entries pairwise distinct.

    Returns (codebook_entries, distortion_per_iteration).
    """
    x = np.asarray(samples, dtype=np.float64)
    n, d = x.shape
    if n < k:
        raise InsufficientDataError(f"need at least {k} samples, got {n}")
    rng = make_rng(seed, 0xC0DE)

    uniq = np.unique(x, axis=0)
    if uniq.shape[0] <= k:
        entries = np.empty((k, d), dtype=np.float64)
        entries[: uniq.shape[0]] = uniq
        n_fill = k - uniq.shape[0]
        if n_fill:
            # fillers live in [2, 3]^D, strictly farther from any in-[0,1] patch
            entries[uniq.shape[0]:] = 2.0 + rng.random((n_fill, d))
        return entries, [0.0]

    centers = _kmeans_pp_init(x, k, rng)
    distortions = []
    prev_assign = None
    for _ in range(iters):
        assign, mind2 = _assign(x, centers)
        distortions.append(float(mind2.mean()))
        for j in range(k):
            sel = assign == j
            if sel.any():
                centers[j] = x[sel].mean(axis=0)
            else:
                far = int(mind2.argmax())
                centers[j] = x[far]
                assign[far] = j
                mind2[far] = 0.0
        if prev_assign is not None and np.array_equal(assign, prev_assign):
            break
        prev_assign = assign
    return centers, distortions


def _assign(x, centers, block=8192):
    """Exact nearest-center assignment, blockwise to bound memory."""
    n = x.shape[0]
    assign = np.empty(n, dtype=np.int64)
    mind2 = np.empty(n, dtype=np.float64)
    for lo in range(0, n, block):
        chunk = x[lo:lo + block]
        d2 = ((chunk[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        a = d2.argmin(axis=1)
        assign[lo:lo + block] = a
        mind2[lo:lo + block] = d2[np.arange(chunk.shape[0]), a]
    return assign, mind2


def build_codebook(samples, k, patch_size, iters=50, seed=0):
    entries, distortions = fit_codebook(samples, k, iters=iters, seed=seed)
    return Codebook(entries, patch_size), distortions
