"""Sequential decoding with dual-condition classifier-free guidance.

Two incremental decoding streams share one sampled token history: the
conditional stream sees (text, condition image), the unconditional stream
sees (null text, condition image). Their logits are combined per step as
uncond + eta * (cond - uncond); eta=1 degenerates to the conditional stream
and eta=0 to the unconditional one, both exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as modelmod
from . import text as textmod
from . import vq
from .seeding import make_rng
from .tensor import DimensionError


@dataclass
class SampleConfig:
    eta: float = 3.0
    temperature: float = 1.0
    top_k: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.eta < 0:
            raise ValueError("eta must be non-negative")
        if self.top_k < 0:
            raise ValueError("top_k must be 0 (disabled) or positive")


def cfg_combine(cond_logits, uncond_logits, eta):
    """Guided logits: uncond + eta * (cond - uncond).

    Raw logits and log-probabilities give the same distribution after
    normalization, so combination happens on raw logits. eta=0 and eta=1
    return the respective input exactly.
    """
    cond_logits = np.asarray(cond_logits, dtype=np.float64)
    uncond_logits = np.asarray(uncond_logits, dtype=np.float64)
    if cond_logits.shape != uncond_logits.shape:
        raise DimensionError("guidance logit shapes differ")
    if eta == 1.0:
        return cond_logits.copy()
    if eta == 0.0:
        return uncond_logits.copy()
    return uncond_logits + eta * (cond_logits - uncond_logits)


def sample_next(guided_logits, cfg, rng):
    """Temperature / top-k filtered categorical draw; tiny temperature = argmax."""
    logits = np.asarray(guided_logits, dtype=np.float64)
    if cfg.temperature < 1e-6:
        return int(logits.argmax())
    z = logits / cfg.temperature
    if cfg.top_k > 0 and cfg.top_k < z.size:
        cutoff = np.partition(z, -cfg.top_k)[-cfg.top_k]
        z = np.where(z >= cutoff, z, -np.inf)
    z = z - z.max()
    p = np.exp(z)
    p /= p.sum()
    u = rng.random()
    return int(np.searchsorted(np.cumsum(p), u, side="right"))


def generate_tokens(params, cfg, text_tokens, cond_tokens, scfg, rng=None):
    """Sample all output tokens with dual-stream guided decoding."""
    if rng is None:
        rng = make_rng(scfg.seed, 0x5A3)
    np_params = modelmod._NumpyParams(params)
    cond_stream = modelmod.DecodeState(np_params, cfg)
    uncond_stream = modelmod.DecodeState(np_params, cfg)
    lc, _ = cond_stream.append(
        modelmod.embed_rows(np_params, cfg, text_tokens, cond_tokens, []))
    lu, _ = uncond_stream.append(
        modelmod.embed_rows(np_params, cfg, None, cond_tokens, []))
    tokens = np.empty(cfg.n_img, dtype=np.int64)
    cond_logits, uncond_logits = lc[-1], lu[-1]
    for i in range(cfg.n_img):
        guided = cfg_combine(cond_logits, uncond_logits, scfg.eta)
        tok = sample_next(guided, scfg, rng)
        tokens[i] = tok
        if i + 1 < cfg.n_img:
            row = modelmod.output_token_row(np_params, cfg, tok, i)
            cond_logits = cond_stream.append(row)[0][-1]
            uncond_logits = uncond_stream.append(row)[0][-1]
    return tokens


def generate(params, cfg, codebook, vocab, condition, instruction, scfg):
    """Condition image + instruction -> (decoded image, TokenSeq)."""
    feats = vq.encode_patches(condition, codebook.patch_size)
    cond_tokens = vq.quantize(feats, codebook)
    if cond_tokens.indices.shape[0] != cfg.n_img:
        raise DimensionError("condition token count does not match the model")
    text_tokens = textmod.tokenize(instruction, vocab, cfg.l_text)
    tokens = generate_tokens(params, cfg, text_tokens, cond_tokens.indices,
                             scfg)
    seq = vq.TokenSeq(tokens, cond_tokens.h, cond_tokens.w)
    return vq.decode(seq, codebook), seq
