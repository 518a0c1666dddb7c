"""Adam with decoupled weight decay, operating on raw numpy parameter arrays."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np


class Adam:
    """Adam over a list of arrays updated in place.

    ``weight_decay`` is applied directly to the parameters (decoupled, as in
    AdamW). ``masks`` optionally freezes entries: where a mask is False the
    parameter never moves, neither from the gradient step nor from decay.
    Each array may carry a leading batch axis of independent problems;
    ``step(..., active=idx)`` then updates only those rows, with per-row step
    counters so every row follows its own Adam trajectory.
    """

    def __init__(
        self,
        params: Sequence[np.ndarray],
        lr: float = 1e-3,
        betas=(0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        masks: Optional[Sequence[Optional[np.ndarray]]] = None,
        rows: Optional[int] = None,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.masks = list(masks) if masks is not None else [None] * len(self.params)
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.rows = rows
        self.t = np.zeros(rows if rows is not None else 1, dtype=np.int64)

    def step(self, grads: Sequence[Optional[np.ndarray]], active: Optional[np.ndarray] = None) -> None:
        if active is None:
            sel = slice(None)
            self.t += 1
            t = self.t if self.rows is not None else self.t[0]
        else:
            sel = active
            self.t[active] += 1
            t = self.t[active]
        if self.rows is not None:
            t = np.asarray(t, dtype=np.float64)
        for p, m, v, g, mask in zip(self.params, self.m, self.v, grads, self.masks):
            if g is None:
                continue
            ps, ms, vs = p[sel], m[sel], v[sel]
            ms = self.beta1 * ms + (1.0 - self.beta1) * g
            vs = self.beta2 * vs + (1.0 - self.beta2) * g * g
            if self.rows is not None:
                shape = (-1,) + (1,) * (p.ndim - 1)
                c1 = (1.0 - self.beta1 ** t).reshape(shape)
                c2 = (1.0 - self.beta2 ** t).reshape(shape)
            else:
                c1 = 1.0 - self.beta1**t
                c2 = 1.0 - self.beta2**t
            update = self.lr * (ms / c1) / (np.sqrt(vs / c2) + self.eps)
            if self.weight_decay:
                update = update + self.lr * self.weight_decay * ps
            if mask is not None:
                msk = mask if active is None or mask.ndim < p.ndim else mask[sel]
                update = update * msk
                ms = ms * msk
                vs = vs * msk
            m[sel] = ms
            v[sel] = vs
            p[sel] = ps - update
