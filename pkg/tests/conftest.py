import numpy as np
import pytest

import aredit.data as data
import aredit.model as model
import aredit.text as text
import aredit.vq as vq
from aredit.tensor import tune_allocator

tune_allocator()


@pytest.fixture(scope="session")
def tiny_cfg():
    """Small config whose layout math mirrors the default one."""
    return model.ModelConfig(d_model=16, n_layers=2, n_heads=2, k_img=11,
                             v_text=35, l_text=4, n_img=6, d_teacher=8)


@pytest.fixture(scope="session")
def desk_tiny_cfg():
    """Real 32x32 image layout (n_img=64) with a small transformer."""
    return model.ModelConfig(d_model=32, n_layers=2, n_heads=2, k_img=256,
                             v_text=35, l_text=16, n_img=64, d_teacher=16)


@pytest.fixture(scope="session")
def vocab():
    return text.build_vocabulary()


@pytest.fixture(scope="session")
def small_corpus():
    return data.sample_corpus(48, None, seed=7)


@pytest.fixture(scope="session")
def small_codebook(small_corpus):
    patches = np.concatenate([
        vq.encode_patches(im, data.PATCH).reshape(-1, data.PATCH ** 2 * 3)
        for ex in small_corpus for im in (ex.condition, ex.target)])
    cb, _ = vq.build_codebook(patches, 256, data.PATCH, seed=0)
    return cb


def randomize_zero_blocks(params, seed=99):
    """Give the zero-initialized residual projections small random values.

    Several structural tests need gradients to flow through every layer,
    which an all-zero projection would block.
    """
    rng = np.random.default_rng(seed)
    for t in params.values():
        if t.data.ndim == 2 and not t.data.any():
            t.data[:] = rng.normal(0.0, 0.02, t.data.shape)
    return params
