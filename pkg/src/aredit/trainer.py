"""Training loop: joint cross-entropy + weighted distillation objective.

Teacher-forced next-token training over the [text; condition; output] layout
with per-example condition dropout (text-only / image-only / both nulled).
All randomness is derived statelessly from (seed, step) so interrupted runs
resume bit-exactly from a checkpoint.

Training arrays default to float32: it halves the wall-clock of the desk
training budget and makes float32 checkpoint serialization lossless, which
the bit-exact resume contract depends on.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import checkpoint as ckpt
from . import distill as distillmod
from . import model as modelmod
from . import tensor as T
from . import text as textmod
from . import vq
from .optim import AdamW
from .seeding import make_rng

BUCKETS = ("none", "text_null", "image_null", "both_null")


class TrainingAborted(Exception):
    pass


@dataclass
class TrainConfig:
    steps: int = 6000
    batch_size: int = 32
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.05
    lambda_distill: float = 0.5
    p_text_only: float = 0.05
    p_img_only: float = 0.05
    p_both: float = 0.05
    seed: int = 0
    checkpoint_interval: int = 1000
    grad_clip: float = 1.0
    teacher_seed: int = 1234
    dtype: str = "f32"

    def __post_init__(self):
        if self.p_text_only + self.p_img_only + self.p_both > 1.0 + 1e-12:
            raise ValueError("dropout rates sum above 1")

    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class StepRecord:
    step: int
    loss_ce: float
    loss_distill: float
    loss_total: float
    buckets: dict
    grad_norm: float
    wall_time: float

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


def draw_dropout_bucket(rng, rates=(0.05, 0.05, 0.05)):
    """One of the four mutually exclusive dropout buckets."""
    p_text, p_img, p_both = rates
    u = rng.random()
    if u < p_text:
        return "text_null"
    if u < p_text + p_img:
        return "image_null"
    if u < p_text + p_img + p_both:
        return "both_null"
    return "none"


@dataclass
class PreparedCorpus:
    """Tokenized and teacher-encoded training set (all model-side arrays)."""

    text_ids: np.ndarray      # (n, l_text) int64
    cond_ids: np.ndarray      # (n, n_img) int64
    target_ids: np.ndarray    # (n, n_img) int64
    teacher_feats: np.ndarray  # (n, n_img, d_teacher)
    kinds: list
    edit_ops: list

    def __len__(self):
        return self.text_ids.shape[0]


def prepare_corpus(examples, codebook, vocab, teacher, cfg):
    """Quantize, tokenize and teacher-encode every example once."""
    n = len(examples)
    text_ids = np.zeros((n, cfg.l_text), dtype=np.int64)
    cond_ids = np.zeros((n, cfg.n_img), dtype=np.int64)
    target_ids = np.zeros((n, cfg.n_img), dtype=np.int64)
    feats = np.zeros((n, cfg.n_img, cfg.d_teacher), dtype=np.float64)
    kinds, ops = [], []
    for i, ex in enumerate(examples):
        toks = textmod.tokenize(ex.instruction, vocab, cfg.l_text)
        text_ids[i] = toks.ids
        cond_ids[i] = vq.quantize(
            vq.encode_patches(ex.condition, codebook.patch_size), codebook).indices
        target_ids[i] = vq.quantize(
            vq.encode_patches(ex.target, codebook.patch_size), codebook).indices
        feats[i] = teacher.features(ex.target)
        kinds.append(ex.kind)
        ops.append(ex.meta.get("edit_op"))
    return PreparedCorpus(text_ids, cond_ids, target_ids, feats, kinds, ops)


def batch_indices(n_examples, batch_size, step, seed):
    """Deterministic epoch-shuffled indices for one step (stateless in step)."""
    start = step * batch_size
    idx = np.empty(batch_size, dtype=np.int64)
    for j in range(batch_size):
        pos = start + j
        epoch, within = divmod(pos, n_examples)
        perm = _epoch_perm(n_examples, epoch, seed)
        idx[j] = perm[within]
    return idx


_PERM_CACHE = {}


def _epoch_perm(n, epoch, seed):
    key = (n, epoch, seed)
    if key not in _PERM_CACHE:
        _PERM_CACHE.clear() if len(_PERM_CACHE) > 8 else None
        _PERM_CACHE[key] = make_rng(seed, 0x5F0F, epoch).permutation(n)
    return _PERM_CACHE[key]


def training_step(prepared, idx, params, cfg, tcfg, optimizer, step):
    """One optimizer update; returns the StepRecord."""
    t0 = time.time()
    rng = make_rng(tcfg.seed, 0xD80, step)
    rates = (tcfg.p_text_only, tcfg.p_img_only, tcfg.p_both)
    buckets = [draw_dropout_bucket(rng, rates) for _ in idx]
    text_null = np.array([b in ("text_null", "both_null") for b in buckets])
    cond_null = np.array([b in ("image_null", "both_null") for b in buckets])

    layout = modelmod.layout_of(cfg)
    dtype = tcfg.np_dtype()
    x = modelmod.assemble_batch(
        params, cfg, prepared.text_ids[idx], text_null,
        prepared.cond_ids[idx], cond_null, prepared.target_ids[idx])
    lo, hi = layout.out_span
    # logits are only needed at the positions whose next token is an output
    # token, so the head projection is restricted to that span
    logits, hidden = modelmod.forward(params, cfg, x,
                                      want_hidden=tcfg.lambda_distill > 0,
                                      logit_span=(lo - 1, hi - 1))

    bsz = len(idx)
    targets = prepared.target_ids[idx]
    mask = np.ones((bsz, hi - lo), dtype=bool)
    loss_ce = T.cross_entropy_masked(logits, targets, mask)

    if tcfg.lambda_distill > 0:
        out_hidden = T.slice_axis(hidden, 1, lo, hi)
        feats = prepared.teacher_feats[idx].astype(dtype)
        loss_distill = distillmod.distill_loss(out_hidden, feats, params)
        loss = T.add(loss_ce, T.scale(loss_distill, tcfg.lambda_distill))
        l_distill = loss_distill.item()
    else:
        loss = loss_ce
        l_distill = 0.0
    # the logged total is recombined in float64 so the additivity contract
    # holds exactly even for float32 training graphs
    l_total = float(loss_ce.item()) + tcfg.lambda_distill * float(l_distill)
    if not np.isfinite(l_total):
        raise TrainingAborted(
            f"non-finite loss at step {step}: ce={loss_ce.item()}, "
            f"distill={l_distill}")
    loss.backward()
    gnorm = optimizer.clip_grad_norm(tcfg.grad_clip)
    optimizer.step()
    optimizer.zero_grad()

    counts = {b: buckets.count(b) for b in BUCKETS if b in buckets}
    return StepRecord(step=step, loss_ce=float(loss_ce.item()),
                      loss_distill=float(l_distill), loss_total=float(l_total),
                      buckets=counts, grad_norm=float(gnorm),
                      wall_time=time.time() - t0)


def train(examples, codebook, model_cfg, tcfg, out_dir=None, log_file=None,
          resume_from=None):
    """Full training run; returns (params, optimizer, records).

    Checkpoints land in out_dir at the checkpoint interval and at the end.
    resume_from continues a previous run bit-exactly (parameters, optimizer
    moments and data/dropout streams all restore to the step boundary).
    """
    T.tune_allocator()
    vocab = textmod.build_vocabulary()
    teacher = distillmod.TeacherEncoder(
        tcfg.teacher_seed, patch_size=codebook.patch_size,
        grid=int(np.sqrt(model_cfg.n_img)), d_teacher=model_cfg.d_teacher)
    prepared = prepare_corpus(examples, codebook, vocab, teacher, model_cfg)

    dtype = tcfg.np_dtype()
    start_step = 0
    if resume_from is not None:
        loaded = ckpt.load_checkpoint(resume_from)
        ckpt.check_compatible(loaded, k_img=model_cfg.k_img,
                              n_img=model_cfg.n_img, vocabulary=vocab.words,
                              teacher_seed=tcfg.teacher_seed)
        params = {k: T.Tensor(v.data.astype(dtype), requires_grad=True,
                              _check=False)
                  for k, v in loaded["params"].items()}
        optimizer = AdamW(params, lr=tcfg.lr, beta1=tcfg.beta1,
                          beta2=tcfg.beta2, weight_decay=tcfg.weight_decay)
        if "opt_m" in loaded:
            for name, st in optimizer.state.items():
                st.m = loaded["opt_m"][name].astype(dtype)
                st.v = loaded["opt_v"][name].astype(dtype)
            optimizer.t = loaded["opt_t"]
        start_step = loaded["step"]
    else:
        params = modelmod.init_params(model_cfg, seed=tcfg.seed, dtype=dtype)
        optimizer = AdamW(params, lr=tcfg.lr, beta1=tcfg.beta1,
                          beta2=tcfg.beta2, weight_decay=tcfg.weight_decay)

    def save(step, name):
        if out_dir is None:
            return
        path = os.path.join(out_dir, name)
        ckpt.save_checkpoint(
            path, model_config=model_cfg, train_config=tcfg.to_dict(),
            params=params, optimizer=optimizer, codebook=codebook,
            vocabulary=vocab.words, teacher_seed=tcfg.teacher_seed, step=step)

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    if start_step == 0:
        save(0, "ckpt-init.bin")

    records = []
    log_fh = open(log_file, "a") if log_file else None
    try:
        for step in range(start_step, tcfg.steps):
            idx = batch_indices(len(prepared), tcfg.batch_size, step, tcfg.seed)
            rec = training_step(prepared, idx, params, model_cfg, tcfg,
                                optimizer, step)
            records.append(rec)
            if log_fh:
                log_fh.write(rec.to_json() + "\n")
            done = step + 1
            if tcfg.checkpoint_interval and done % tcfg.checkpoint_interval == 0 \
                    and done < tcfg.steps:
                save(done, f"ckpt-{done:06d}.bin")
        save(tcfg.steps, "ckpt-final.bin")
    finally:
        if log_fh:
            log_fh.close()
    return params, optimizer, records
