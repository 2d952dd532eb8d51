"""Estimator-style facade over the full pipeline.

ConditionalEditor bundles codebook fitting, training and sampling behind a
fit/predict interface with flat keyword hyperparameters, so the whole system
can be driven like any other estimator: construct, fit on a list of
TrainingExample pairs, predict edited images from (condition, instruction)
pairs. Fitted state lives in trailing-underscore attributes and round trips
through the checkpoint container.
"""

from __future__ import annotations

import numpy as np

from . import checkpoint as ckptmod
from . import data as datamod
from . import metrics as metricsmod
from . import sampler as samplermod
from . import text as textmod
from . import trainer as trainermod
from . import vq
from .model import ModelConfig
from .sampler import SampleConfig


class NotFittedError(Exception):
    pass


class ConditionalEditor:
    """Conditional autoregressive image editor with a fit/predict interface."""

    def __init__(self, d_model=128, n_layers=4, n_heads=4, k_img=256,
                 steps=6000, batch_size=32, lr=1e-4, weight_decay=0.05,
                 lambda_distill=0.5, p_text_only=0.05, p_img_only=0.05,
                 p_both=0.05, eta=3.0, temperature=1.0, top_k=0,
                 codebook_iters=50, teacher_seed=1234, seed=0):
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.k_img = k_img
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.lambda_distill = lambda_distill
        self.p_text_only = p_text_only
        self.p_img_only = p_img_only
        self.p_both = p_both
        self.eta = eta
        self.temperature = temperature
        self.top_k = top_k
        self.codebook_iters = codebook_iters
        self.teacher_seed = teacher_seed
        self.seed = seed

    _PARAM_NAMES = ("d_model", "n_layers", "n_heads", "k_img", "steps",
                    "batch_size", "lr", "weight_decay", "lambda_distill",
                    "p_text_only", "p_img_only", "p_both", "eta",
                    "temperature", "top_k", "codebook_iters", "teacher_seed",
                    "seed")

    def get_params(self, deep=True):
        return {name: getattr(self, name) for name in self._PARAM_NAMES}

    def set_params(self, **kwargs):
        for name, value in kwargs.items():
            if name not in self._PARAM_NAMES:
                raise ValueError(f"unknown parameter {name!r}")
            setattr(self, name, value)
        return self

    def _model_config(self):
        return ModelConfig(d_model=self.d_model, n_layers=self.n_layers,
                           n_heads=self.n_heads, k_img=self.k_img)

    def _train_config(self):
        return trainermod.TrainConfig(
            steps=self.steps, batch_size=self.batch_size, lr=self.lr,
            weight_decay=self.weight_decay,
            lambda_distill=self.lambda_distill,
            p_text_only=self.p_text_only, p_img_only=self.p_img_only,
            p_both=self.p_both, seed=self.seed,
            teacher_seed=self.teacher_seed)

    def _sample_config(self, seed=None):
        return SampleConfig(eta=self.eta, temperature=self.temperature,
                            top_k=self.top_k,
                            seed=self.seed if seed is None else seed)

    def fit(self, examples, out_dir=None):
        """Fit the patch codebook, then train the generator on examples."""
        patches = []
        for ex in examples:
            for img in (ex.condition, ex.target):
                patches.append(vq.encode_patches(img, datamod.PATCH).reshape(
                    -1, datamod.PATCH * datamod.PATCH * 3))
        samples = np.concatenate(patches)
        self.codebook_, self.codebook_distortions_ = vq.build_codebook(
            samples, self.k_img, datamod.PATCH, iters=self.codebook_iters,
            seed=self.seed)
        cfg = self._model_config()
        self.params_, _, self.train_records_ = trainermod.train(
            examples, self.codebook_, cfg, self._train_config(),
            out_dir=out_dir)
        self.model_config_ = cfg
        self.vocabulary_ = textmod.build_vocabulary()
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("call fit() or load() first")

    def predict(self, conditions, instructions, seed=None):
        """Generate one image per (condition, instruction) pair."""
        self._check_fitted()
        conditions = list(conditions)
        if isinstance(instructions, str):
            instructions = [instructions] * len(conditions)
        if len(instructions) != len(conditions):
            raise ValueError("conditions and instructions differ in length")
        out = []
        for i, (cond, instr) in enumerate(zip(conditions, instructions)):
            scfg = self._sample_config(
                seed=self.seed + i if seed is None else seed + i)
            img, _ = samplermod.generate(
                self.params_, self.model_config_, self.codebook_,
                self.vocabulary_, cond, instr, scfg)
            out.append(img)
        return out

    def score(self, examples):
        """Mean full-image PSNR of guided generations against the targets."""
        self._check_fitted()
        report = metricsmod.evaluate(
            self.params_, self.model_config_, self.codebook_,
            self.vocabulary_, examples, self._sample_config())
        vals = []
        for cell in report["per_task"].values():
            if isinstance(cell, dict) and "PSNR_full" in cell:
                if "mean" in cell["PSNR_full"]:
                    vals.append(cell["PSNR_full"]["mean"])
        if not vals:
            raise ValueError("no finite PSNR cells in the report")
        return float(np.mean(vals))

    def save(self, path):
        self._check_fitted()
        # the config echo carries every hyperparameter, not just the training
        # subset, so load() restores sampling behavior too
        ckptmod.save_checkpoint(
            path, model_config=self.model_config_,
            train_config=self.get_params(), params=self.params_,
            codebook=self.codebook_, vocabulary=self.vocabulary_.words,
            teacher_seed=self.teacher_seed, step=self.steps)
        return self

    @classmethod
    def load(cls, path):
        loaded = ckptmod.load_checkpoint(path)
        tc = loaded.get("train_config", {})
        est = cls(**{k: v for k, v in tc.items()
                     if k in cls._PARAM_NAMES})
        cfg = loaded["model_config"]
        est.set_params(d_model=cfg.d_model, n_layers=cfg.n_layers,
                       n_heads=cfg.n_heads, k_img=cfg.k_img)
        est.params_ = loaded["params"]
        est.codebook_ = loaded["codebook"]
        est.vocabulary_ = textmod.Vocabulary(loaded["vocabulary"])
        est.model_config_ = cfg
        return est
