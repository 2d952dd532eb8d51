"""AdamW with decoupled weight decay and bias correction."""

from __future__ import annotations

import numpy as np

from .tensor import DimensionError, NonFiniteError


class OptimState:
    """First/second moment buffers plus the shared step counter for one parameter."""

    __slots__ = ("m", "v", "t")

    def __init__(self, shape, dtype=np.float64):
        self.m = np.zeros(shape, dtype=dtype)
        self.v = np.zeros(shape, dtype=dtype)
        self.t = 0


def adamw_step(param, grad, state, lr=1e-4, beta1=0.9, beta2=0.95,
               weight_decay=0.05, eps=1e-8):
    """In-place decoupled-weight-decay Adam update on a raw array.

    Decay is applied directly to the parameter (not through the gradient),
    then the bias-corrected moment update is subtracted.
    """
    if param.shape != grad.shape or param.shape != state.m.shape:
        raise DimensionError("adamw_step shape mismatch")
    if lr <= 0:
        raise ValueError("lr must be positive")
    state.t += 1
    t = state.t
    state.m *= beta1
    state.m += (1.0 - beta1) * grad
    state.v *= beta2
    state.v += (1.0 - beta2) * grad * grad
    mhat = state.m / (1.0 - beta1 ** t)
    vhat = state.v / (1.0 - beta2 ** t)
    param -= lr * weight_decay * param
    param -= lr * mhat / (np.sqrt(vhat) + eps)
    if not np.isfinite(param).all():
        raise NonFiniteError("non-finite parameter after optimizer step")


class AdamW:
    """Optimizer over a dict of named parameter Tensors."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.95,
                 weight_decay=0.05, eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.weight_decay = weight_decay
        self.eps = eps
        self.state = {name: OptimState(p.data.shape, p.data.dtype)
                      for name, p in self.params.items()}
        self.t = 0

    def clip_grad_norm(self, max_norm):
        """Scale all gradients so their global L2 norm is at most max_norm.

        Returns the pre-clip norm.
        """
        sq = 0.0
        for p in self.params.values():
            if p.grad is not None:
                sq += float((p.grad.astype(np.float64) ** 2).sum())
        norm = float(np.sqrt(sq))
        if norm > max_norm > 0:
            s = max_norm / norm
            for p in self.params.values():
                if p.grad is not None:
                    # grads may be shared copy-on-write arrays; never scale
                    # them in place
                    p.grad = p.grad * np.asarray(s, dtype=p.grad.dtype)
        return norm

    def step(self):
        self.t += 1
        for name, p in self.params.items():
            if p.grad is None:
                continue
            st = self.state[name]
            st.t = self.t - 1  # adamw_step increments to the shared counter
            adamw_step(p.data, p.grad, st, lr=self.lr, beta1=self.beta1,
                       beta2=self.beta2, weight_decay=self.weight_decay,
                       eps=self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None
