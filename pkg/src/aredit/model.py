"""Decoder-only causal transformer over [text prefix; condition tokens; output tokens].

The sequence layout is fixed: L_text learned text-embedding slots, then N
condition-image token slots (positional table A), then N output token slots
(positional table B). There is no BOS token: the logit at the last condition
slot predicts the first output token.

Two forward paths share the same parameters:
  * a tape-recorded batched path used for training, and
  * a pure-numpy incremental path with per-layer KV caches used for sampling
    (float64, bit-stable against the full forward).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

LN_EPS = 1e-5


class LayoutError(Exception):
    pass


@dataclass
class ModelConfig:
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    k_img: int = 256
    v_text: int = 35
    l_text: int = 16
    n_img: int = 64
    d_teacher: int = 64

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")

    @property
    def max_seq(self):
        return self.l_text + 2 * self.n_img

    @property
    def head_dim(self):
        return self.d_model // self.n_heads

    def to_dict(self):
        return {"d_model": self.d_model, "n_layers": self.n_layers,
                "n_heads": self.n_heads, "k_img": self.k_img,
                "v_text": self.v_text, "l_text": self.l_text,
                "n_img": self.n_img, "d_teacher": self.d_teacher}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class SequenceLayout:
    """Index spans of the three segments plus the CE loss positions."""

    l_text: int
    n_img: int

    @property
    def text_span(self):
        return (0, self.l_text)

    @property
    def cond_span(self):
        return (self.l_text, self.l_text + self.n_img)

    @property
    def out_span(self):
        return (self.l_text + self.n_img, self.l_text + 2 * self.n_img)

    @property
    def max_seq(self):
        return self.l_text + 2 * self.n_img

    def loss_mask(self):
        """True where the position's next-token target lies in the output span."""
        m = np.zeros(self.max_seq, dtype=bool)
        m[self.l_text + self.n_img - 1:self.max_seq - 1] = True
        return m


def layout_of(cfg):
    return SequenceLayout(cfg.l_text, cfg.n_img)


def init_params(cfg, seed=0, dtype=np.float64):
    """Fresh parameter dict: normal(0, 0.02) weights, zero biases.

    The residual output projections of the final block start at zero so the
    deepest residual branch fades in during training.
    """
    rng = np.random.Generator(np.random.PCG64(seed))

    def normal(*shape):
        return Tensor(rng.normal(0.0, 0.02, shape).astype(dtype),
                      requires_grad=True, _check=False)

    def zeros(*shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True,
                      _check=False)

    def ones(*shape):
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=True,
                      _check=False)

    d, dt = cfg.d_model, cfg.d_teacher
    p = {
        "tok_emb": normal(cfg.k_img, d),
        "pos_cond": normal(cfg.n_img, d),
        "pos_out": normal(cfg.n_img, d),
        "text_emb": normal(cfg.v_text, d),
        "pos_text": normal(cfg.l_text, d),
        "null_text": normal(1, d),
        "null_image": normal(1, d),
        "ln_f.g": ones(d),
        "ln_f.b": zeros(d),
        "head": normal(d, cfg.k_img),
        "align.w": normal(d, dt),
        "align.b": zeros(dt),
    }
    for i in range(cfg.n_layers):
        last = i == cfg.n_layers - 1
        p[f"l{i}.ln1.g"] = ones(d)
        p[f"l{i}.ln1.b"] = zeros(d)
        p[f"l{i}.wq"] = normal(d, d)
        p[f"l{i}.wk"] = normal(d, d)
        p[f"l{i}.wv"] = normal(d, d)
        p[f"l{i}.wo"] = zeros(d, d) if last else normal(d, d)
        p[f"l{i}.bq"] = zeros(d)
        p[f"l{i}.bk"] = zeros(d)
        p[f"l{i}.bv"] = zeros(d)
        p[f"l{i}.bo"] = zeros(d)
        p[f"l{i}.ln2.g"] = ones(d)
        p[f"l{i}.ln2.b"] = zeros(d)
        p[f"l{i}.w1"] = normal(d, 4 * d)
        p[f"l{i}.b1"] = zeros(4 * d)
        p[f"l{i}.w2"] = zeros(4 * d, d) if last else normal(4 * d, d)
        p[f"l{i}.b2"] = zeros(d)
    return p


def param_count(cfg):
    """Closed-form parameter count for a config."""
    d, dt = cfg.d_model, cfg.d_teacher
    emb = cfg.k_img * d + 2 * cfg.n_img * d + cfg.v_text * d + cfg.l_text * d \
        + 2 * d
    per_layer = 4 * d + 4 * d * d + 4 * d + d * 4 * d + 4 * d \
        + 4 * d * d + d
    head = 2 * d + d * cfg.k_img
    align = d * dt + dt
    return emb + cfg.n_layers * per_layer + head + align


# -- batched tape forward (training) ------------------------------------------


def _linear(x, w, b=None):
    """(..., din) @ (din, dout) via a 2-d reshape so BLAS sees one big GEMM."""
    lead = x.shape[:-1]
    y = T.matmul(T.reshape(x, (-1, x.shape[-1])), w)
    if b is not None:
        y = T.add(y, b)
    return T.reshape(y, lead + (w.shape[-1],))


def _layernorm_affine(x, g, b):
    return T.add(T.mul(T.layer_norm(x, eps=LN_EPS), g), b)


def causal_mask(t, dtype=np.float64):
    m = np.zeros((t, t), dtype=dtype)
    m[np.triu_indices(t, k=1)] = -np.inf
    return m


def forward(params, cfg, x, want_hidden=True, logit_span=None):
    """Tape forward. x: Tensor (B, T, d). Returns (logits, last_hidden).

    logit_span=(lo, hi) restricts the head projection (and thus the returned
    logits) to that position range; the hidden states are always full length.
    The training loop uses this since only the output-predicting positions
    contribute to the loss.
    """
    b, t, d = x.shape
    if t > cfg.max_seq:
        raise LayoutError(f"sequence length {t} exceeds {cfg.max_seq}")
    nh, dh = cfg.n_heads, cfg.head_dim
    mask = Tensor(causal_mask(t, dtype=x.dtype), _check=False)
    inv_sqrt = 1.0 / np.sqrt(dh)
    for i in range(cfg.n_layers):
        h = _layernorm_affine(x, params[f"l{i}.ln1.g"], params[f"l{i}.ln1.b"])
        q = _linear(h, params[f"l{i}.wq"], params[f"l{i}.bq"])
        k = _linear(h, params[f"l{i}.wk"], params[f"l{i}.bk"])
        v = _linear(h, params[f"l{i}.wv"], params[f"l{i}.bv"])
        # fold the 1/sqrt(dh) score scaling into q while it is still small,
        # and merge (batch, heads) so attention runs as one 3-d batched GEMM
        q = T.scale(q, inv_sqrt)
        q = T.reshape(T.transpose(T.reshape(q, (b, t, nh, dh)), (0, 2, 1, 3)),
                      (b * nh, t, dh))
        k = T.reshape(T.transpose(T.reshape(k, (b, t, nh, dh)), (0, 2, 1, 3)),
                      (b * nh, t, dh))
        v = T.reshape(T.transpose(T.reshape(v, (b, t, nh, dh)), (0, 2, 1, 3)),
                      (b * nh, t, dh))
        scores = T.matmul(q, T.transpose(k, (0, 2, 1)))
        probs = T.softmax_rows(T.add(scores, mask))
        att = T.matmul(probs, v)
        att = T.reshape(T.transpose(T.reshape(att, (b, nh, t, dh)),
                                    (0, 2, 1, 3)), (b, t, d))
        x = T.add(x, _linear(att, params[f"l{i}.wo"], params[f"l{i}.bo"]))
        h2 = _layernorm_affine(x, params[f"l{i}.ln2.g"], params[f"l{i}.ln2.b"])
        u = T.gelu(_linear(h2, params[f"l{i}.w1"], params[f"l{i}.b1"]))
        x = T.add(x, _linear(u, params[f"l{i}.w2"], params[f"l{i}.b2"]))
    hidden = _layernorm_affine(x, params["ln_f.g"], params["ln_f.b"])
    head_in = hidden if logit_span is None else \
        T.slice_axis(hidden, 1, logit_span[0], logit_span[1])
    logits = _linear(head_in, params["head"])
    return logits, (hidden if want_hidden else None)


def assemble_batch(params, cfg, text_ids, text_null, cond_ids, cond_null,
                   out_ids):
    """Embed and concatenate the three segments for a batch.

    text_ids (B, L_text) int, text_null (B,) bool, cond_ids (B, N) int,
    cond_null (B,) bool, out_ids (B, N) int. Nulled examples get the learned
    null vector broadcast over the segment; positional tables always apply.
    """
    bsz = text_ids.shape[0]
    dtype = params["tok_emb"].dtype

    def mix_null(embedded, null_vec, null_flags):
        keep = (~null_flags).astype(dtype)[:, None, None]
        drop = null_flags.astype(dtype)[:, None, None]
        kept = T.mul(embedded, Tensor(keep, _check=False))
        null_rows = T.mul(T.reshape(null_vec, (1, 1, -1)),
                          Tensor(drop, _check=False))
        return T.add(kept, null_rows)

    text = T.embedding(params["text_emb"], text_ids)
    text = mix_null(text, params["null_text"], np.asarray(text_null, bool))
    text = T.add(text, params["pos_text"])

    cond = T.embedding(params["tok_emb"], cond_ids)
    cond = mix_null(cond, params["null_image"], np.asarray(cond_null, bool))
    cond = T.add(cond, params["pos_cond"])

    out = T.add(T.embedding(params["tok_emb"], out_ids), params["pos_out"])
    assert text.shape == (bsz, cfg.l_text, cfg.d_model)
    return T.concat([text, cond, out], axis=1)


def assemble_input(params, cfg, text_tokens, cond_tokens, out_prefix):
    """Single-example assembly (full layout when out_prefix is full length).

    text_tokens: InstructionTokens or None (null text); cond_tokens: index
    array of length N or None (null image); out_prefix: index array, length
    <= N. Returns Tensor (l_text + n_img + len(out_prefix), d_model).
    """
    out_prefix = np.asarray(out_prefix, dtype=np.int64)
    if out_prefix.shape[0] > cfg.n_img:
        raise LayoutError("output prefix longer than the output span")
    text_null = text_tokens is None
    cond_null = cond_tokens is None
    text_ids = np.zeros((1, cfg.l_text), dtype=np.int64) if text_null \
        else np.asarray(text_tokens.ids, dtype=np.int64)[None, :]
    cond_ids = np.zeros((1, cfg.n_img), dtype=np.int64) if cond_null \
        else np.asarray(cond_tokens, dtype=np.int64)[None, :]

    full = assemble_batch(params, cfg, text_ids, np.array([text_null]),
                          cond_ids, np.array([cond_null]),
                          np.zeros((1, cfg.n_img), dtype=np.int64))
    prefix_len = cfg.l_text + cfg.n_img
    pieces = [T.slice_axis(full, 1, 0, prefix_len)]
    if out_prefix.shape[0]:
        out = T.add(T.embedding(params["tok_emb"], out_prefix[None, :]),
                    T.slice_axis(params["pos_out"], 0, 0, out_prefix.shape[0]))
        pieces.append(out)
    joined = T.concat(pieces, axis=1) if len(pieces) > 1 else pieces[0]
    return T.reshape(joined, (joined.shape[1], cfg.d_model))


# -- incremental numpy inference path ------------------------------------------


class _NumpyParams:
    """Float64 views of the parameter dict for the inference path."""

    def __init__(self, params):
        self.p = {k: np.asarray(v.data, dtype=np.float64)
                  for k, v in params.items()}

    def __getitem__(self, k):
        return self.p[k]


class DecodeState:
    """Per-layer KV caches for one decoding stream."""

    def __init__(self, params, cfg):
        self.cfg = cfg
        self.np_params = params if isinstance(params, _NumpyParams) \
            else _NumpyParams(params)
        nh, dh = cfg.n_heads, cfg.head_dim
        self.kc = [np.empty((nh, cfg.max_seq, dh)) for _ in range(cfg.n_layers)]
        self.vc = [np.empty((nh, cfg.max_seq, dh)) for _ in range(cfg.n_layers)]
        self.pos = 0

    def reset(self):
        self.pos = 0

    def append(self, rows):
        """Run `rows` (t, d_model) through the stack, extending the caches.

        Returns (logits (t, k_img), hidden (t, d_model)) for the new rows.
        """
        cfg, p = self.cfg, self.np_params
        t = rows.shape[0]
        if self.pos + t > cfg.max_seq:
            raise LayoutError("decode cache overflow")
        nh, dh = cfg.n_heads, cfg.head_dim
        x = np.asarray(rows, dtype=np.float64)
        start = self.pos
        total = start + t
        inv_sqrt = 1.0 / np.sqrt(dh)
        for i in range(cfg.n_layers):
            h = _np_layernorm(x, p[f"l{i}.ln1.g"], p[f"l{i}.ln1.b"])
            q = (h @ p[f"l{i}.wq"] + p[f"l{i}.bq"]).reshape(t, nh, dh)
            k = (h @ p[f"l{i}.wk"] + p[f"l{i}.bk"]).reshape(t, nh, dh)
            v = (h @ p[f"l{i}.wv"] + p[f"l{i}.bv"]).reshape(t, nh, dh)
            self.kc[i][:, start:total] = k.transpose(1, 0, 2)
            self.vc[i][:, start:total] = v.transpose(1, 0, 2)
            kall = self.kc[i][:, :total]
            vall = self.vc[i][:, :total]
            scores = np.einsum("tnd,njd->ntj", q, kall) * inv_sqrt
            # causal: new row start+r may attend positions <= start+r
            col = np.arange(total)[None, :]
            row = (start + np.arange(t))[:, None]
            scores = np.where(col[None] <= row[None], scores, -np.inf)
            m = scores.max(axis=-1, keepdims=True)
            e = np.exp(scores - m)
            probs = e / e.sum(axis=-1, keepdims=True)
            att = np.einsum("ntj,njd->tnd", probs, vall).reshape(t, -1)
            x = x + att @ p[f"l{i}.wo"] + p[f"l{i}.bo"]
            h2 = _np_layernorm(x, p[f"l{i}.ln2.g"], p[f"l{i}.ln2.b"])
            u = _np_gelu(h2 @ p[f"l{i}.w1"] + p[f"l{i}.b1"])
            x = x + u @ p[f"l{i}.w2"] + p[f"l{i}.b2"]
        self.pos = total
        hidden = _np_layernorm(x, p["ln_f.g"], p["ln_f.b"])
        logits = hidden @ p["head"]
        return logits, hidden


def _np_layernorm(x, g, b, eps=LN_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return (xc / np.sqrt(var + eps)) * g + b


def _np_gelu(x):
    c = np.sqrt(2.0 / np.pi)
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x ** 3)))


def embed_rows(params, cfg, text_tokens, cond_tokens, out_prefix):
    """Numpy embedding assembly mirroring assemble_input (inference path)."""
    p = params.p if isinstance(params, _NumpyParams) else \
        {k: np.asarray(v.data, dtype=np.float64) for k, v in params.items()}
    if text_tokens is None:
        text = np.broadcast_to(p["null_text"][0], (cfg.l_text, cfg.d_model)).copy()
    else:
        text = p["text_emb"][np.asarray(text_tokens.ids, dtype=np.int64)]
    text = text + p["pos_text"]
    if cond_tokens is None:
        cond = np.broadcast_to(p["null_image"][0], (cfg.n_img, cfg.d_model)).copy()
    else:
        cond = p["tok_emb"][np.asarray(cond_tokens, dtype=np.int64)]
    cond = cond + p["pos_cond"]
    rows = [text, cond]
    out_prefix = np.asarray(out_prefix, dtype=np.int64)
    if out_prefix.size:
        rows.append(p["tok_emb"][out_prefix] + p["pos_out"][:out_prefix.size])
    return np.concatenate(rows, axis=0)


def output_token_row(params, cfg, token, position):
    """Embedding row for one sampled output token at the given output slot."""
    p = params.p if isinstance(params, _NumpyParams) else params
    tok_emb = p["tok_emb"] if isinstance(params, _NumpyParams) \
        else np.asarray(params["tok_emb"].data, dtype=np.float64)
    pos_out = p["pos_out"] if isinstance(params, _NumpyParams) \
        else np.asarray(params["pos_out"].data, dtype=np.float64)
    return (tok_emb[int(token)] + pos_out[int(position)])[None, :]
