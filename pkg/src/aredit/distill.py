"""Feature distillation: frozen teacher encoder, alignment map, MSE objective.

The teacher is a frozen randomly-initialized encoder over the image patch
grid: a patch projection followed by two residual mixing blocks that couple
neighboring grid positions, so its features are position-wise but context
dependent. The trainable alignment map (a position-wise linear layer, the
1x1-convolution equivalent) projects the transformer's last hidden states
into the teacher's feature space.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from . import vq
from .seeding import make_rng


class TeacherEncoder:
    """Frozen deterministic feature encoder over the h x w patch grid."""

    def __init__(self, seed, patch_size=4, grid=8, d_teacher=64):
        self.seed = int(seed)
        self.patch_size = patch_size
        self.grid = grid
        self.d_teacher = d_teacher
        d_in = patch_size * patch_size * 3
        rng = make_rng(seed, 0x7EAC)
        self.w_in = rng.normal(0.0, 1.0 / np.sqrt(d_in), (d_in, d_teacher))
        self.b_in = rng.normal(0.0, 0.1, d_teacher)
        self.w_mix = [rng.normal(0.0, 1.0 / np.sqrt(d_teacher),
                                 (d_teacher, d_teacher)) for _ in range(2)]
        self.mixer = self._grid_mixer(grid)

    @staticmethod
    def _grid_mixer(g):
        """Row-normalized (self + 4-neighbor) averaging matrix over the grid."""
        n = g * g
        m = np.eye(n)
        for r in range(g):
            for c in range(g):
                i = r * g + c
                for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < g and 0 <= cc < g:
                        m[i, rr * g + cc] = 1.0
        return m / m.sum(axis=1, keepdims=True)

    def features(self, img):
        """Image (H,W,3) -> (N, d_teacher); deterministic, no gradient path."""
        img = np.asarray(img, dtype=np.float64)
        side = self.grid * self.patch_size
        if img.shape != (side, side, 3):
            raise vq.DimensionError(
                f"teacher expects {side}x{side}x3, got {img.shape}")
        feats = vq.encode_patches(img, self.patch_size).reshape(
            self.grid * self.grid, -1)
        x = feats @ self.w_in + self.b_in
        for w in self.w_mix:
            x = x + np.tanh(self.mixer @ x @ w)
        return x


def teacher_features_batch(teacher, images):
    return np.stack([teacher.features(im) for im in images])


def align_hidden(hidden_out_span, params):
    """Position-wise linear map into teacher feature space (tape op)."""
    lead = hidden_out_span.shape[:-1]
    flat = T.reshape(hidden_out_span, (-1, hidden_out_span.shape[-1]))
    y = T.add(T.matmul(flat, params["align.w"]), params["align.b"])
    return T.reshape(y, lead + (params["align.w"].shape[-1],))


def distill_loss(hidden_out_span, teacher_feats, params):
    """MSE between aligned hidden states and frozen teacher features.

    hidden_out_span: Tensor (..., N, d_model) from the last hidden layer at
    the output span (teacher forcing); teacher_feats: ndarray of matching
    leading shape with trailing dim d_teacher, computed from the ground-truth
    target image. Gradients reach the alignment map and the transformer only.
    """
    aligned = align_hidden(hidden_out_span, params)
    target = T.Tensor(np.asarray(teacher_feats, dtype=aligned.dtype),
                      _check=False)
    diff = T.add(aligned, T.scale(target, -1.0))
    return T.tmean(T.mul(diff, diff))
