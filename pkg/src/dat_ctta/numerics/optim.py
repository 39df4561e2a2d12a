"""Adam restricted to an index set of a flat parameter vector."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step_count: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, dtype=np.float32, **hyper) -> "AdamState":
        return cls(m=np.zeros(n, dtype=dtype), v=np.zeros(n, dtype=dtype), **hyper)

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.step_count, self.lr, self.beta1, self.beta2, self.eps)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, mask: np.ndarray | None):
    """One Adam update applied in place to ``params[mask]``.

    ``mask`` is an integer index array (``None`` means every index). Entries
    outside the mask keep their parameter bytes and their moments; moments are
    frozen rather than decayed. The step counter advances on every call, so
    bias correction follows the optimizer's global clock.
    """
    n = params.shape[0]
    if grads.shape != (n,) or state.m.shape != (n,) or state.v.shape != (n,):
        raise ContractError(
            f"adam_step: length mismatch (params {params.shape}, grads {grads.shape}, "
            f"m {state.m.shape}, v {state.v.shape})")
    state.step_count += 1
    idx = slice(None) if mask is None else np.asarray(mask, dtype=np.int64)
    if mask is not None and idx.size == 0:
        return params, state

    dt = params.dtype.type
    b1, b2 = dt(state.beta1), dt(state.beta2)
    g = grads[idx].astype(params.dtype, copy=False)
    m = b1 * state.m[idx] + (dt(1) - b1) * g
    v = b2 * state.v[idx] + (dt(1) - b2) * (g * g)
    state.m[idx] = m
    state.v[idx] = v
    bc1 = 1.0 - state.beta1 ** state.step_count
    bc2 = 1.0 - state.beta2 ** state.step_count
    update = dt(state.lr / bc1) * m / (np.sqrt(v * dt(1.0 / bc2)) + dt(state.eps))
    params[idx] -= update
    return params, state
