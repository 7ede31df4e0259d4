"""Gated linear attention: projections, gated-state recurrence, and an oracle.

The sequence mixer keeps a ``d_k x d_v`` state that decays feature-wise and
accumulates key/value outer products:

    G_t = alpha_t^T beta_t            (outer product of two gate rows)
    S_t = G_t (*) S_{t-1} + K_t^T V_t
    O_t = Q_t S_t

with gates ``alpha = sigmoid(X W_a + b_a)^(1/tau)`` (likewise ``beta``), so
every entry lies in (0, 1) and ``tau`` tempers how fast memory fades. The
block output re-gates the normalized read with a swish gate and projects
back to model width: ``L_hat_t = (R_t (*) layernorm(O_t)) W_o``.

``gla_oracle`` recomputes O from the fully unrolled sum with explicit gate
products. It shares no code with the recurrence; the two routes anchor each
other and the equivalence is enforced by tests.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .tensor import (
    ShapeError,
    Tape,
    Tensor,
    add,
    as_tensor,
    concat,
    layernorm,
    matmul,
    mul,
    narrow,
    power,
    reshape,
    sigmoid,
    swap_last,
    swish,
)

__all__ = [
    "GlaParams",
    "GlaState",
    "init_gla_params",
    "gla_project",
    "gla_attend",
    "gla_scan",
    "gla_apply",
    "gla_oracle",
]


@dataclass
class GlaParams:
    """Projection and gate weights for one gated-linear-attention mixer."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_alpha: Tensor
    b_alpha: Tensor
    w_beta: Tensor
    b_beta: Tensor
    w_r: Tensor
    b_r: Tensor
    w_o: Tensor
    tau: float = 16.0
    heads: int = 1

    @property
    def d(self) -> int:
        return self.w_q.shape[0]

    @property
    def dk(self) -> int:
        return self.w_q.shape[1]

    @property
    def dv(self) -> int:
        return self.w_v.shape[1]

    def named_params(self) -> dict[str, Tensor]:
        return {
            "w_q": self.w_q,
            "w_k": self.w_k,
            "w_v": self.w_v,
            "w_alpha": self.w_alpha,
            "b_alpha": self.b_alpha,
            "w_beta": self.w_beta,
            "b_beta": self.b_beta,
            "w_r": self.w_r,
            "b_r": self.b_r,
            "w_o": self.w_o,
        }


@dataclass
class GlaState:
    """Recurrent state carried across scan calls.

    Single-head layout is ``(dk, dv)`` (with optional leading batch axes);
    multi-head layout inserts a head axis: ``(heads, dk/heads, dv/heads)``.
    """

    s: Tensor

    @staticmethod
    def zeros(dk: int, dv: int, heads: int = 1, lead: tuple[int, ...] = ()) -> "GlaState":
        if heads == 1:
            shape = lead + (dk, dv)
        else:
            shape = lead + (heads, dk // heads, dv // heads)
        return GlaState(Tensor(np.zeros(shape)))


def init_gla_params(
    d: int,
    dk: int,
    dv: int,
    rng: np.random.Generator,
    tau: float = 16.0,
    heads: int = 1,
    zero_residual: bool = True,
) -> GlaParams:
    """Fresh mixer weights: fan-in scaled Gaussians, zero biases.

    ``zero_residual`` starts the output projection at zero so a residual
    wrapper is the identity at initialization.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if heads < 1 or dk % heads or dv % heads:
        raise ShapeError(f"heads={heads} must divide dk={dk} and dv={dv}")

    def dense(fan_in: int, shape: tuple[int, ...]) -> Tensor:
        return Tensor(rng.standard_normal(shape) / np.sqrt(fan_in), requires_grad=True)

    w_o = Tensor(np.zeros((dv, d)), requires_grad=True) if zero_residual else dense(dv, (dv, d))
    return GlaParams(
        w_q=dense(d, (d, dk)),
        w_k=dense(d, (d, dk)),
        w_v=dense(d, (d, dv)),
        w_alpha=dense(d, (d, dk)),
        b_alpha=Tensor(np.zeros(dk), requires_grad=True),
        w_beta=dense(d, (d, dv)),
        b_beta=Tensor(np.zeros(dv), requires_grad=True),
        w_r=dense(d, (d, dv)),
        b_r=Tensor(np.zeros(dv), requires_grad=True),
        w_o=w_o,
        tau=float(tau),
        heads=int(heads),
    )


def gla_project(l_in, params: GlaParams):
    """Token projections: queries, keys, values, both gates, the output gate.

    Gates are sigmoids tempered by ``1/tau``; the output gate R is a swish.
    """
    x = as_tensor(l_in)
    if x.shape[-1] != params.d:
        raise ShapeError(f"gla_project: input width {x.shape[-1]} != parameter width {params.d}")
    q = matmul(x, params.w_q)
    k = matmul(x, params.w_k)
    v = matmul(x, params.w_v)
    alpha = power(sigmoid(add(matmul(x, params.w_alpha), params.b_alpha)), 1.0 / params.tau)
    beta = power(sigmoid(add(matmul(x, params.w_beta), params.b_beta)), 1.0 / params.tau)
    r_gate = swish(add(matmul(x, params.w_r), params.b_r))
    return q, k, v, alpha, beta, r_gate


def _validate_attend(q: Tensor, k: Tensor, v: Tensor, alpha: Tensor, beta: Tensor) -> None:
    if not (q.shape[-2] == k.shape[-2] == v.shape[-2] == alpha.shape[-2] == beta.shape[-2]):
        raise ShapeError(
            "gla_attend: sequence lengths disagree: "
            f"Q{q.shape} K{k.shape} V{v.shape} alpha{alpha.shape} beta{beta.shape}"
        )
    if not (q.shape[-1] == k.shape[-1] == alpha.shape[-1]):
        raise ShapeError(f"gla_attend: key widths disagree: Q{q.shape} K{k.shape} alpha{alpha.shape}")
    if not (v.shape[-1] == beta.shape[-1]):
        raise ShapeError(f"gla_attend: value widths disagree: V{v.shape} beta{beta.shape}")


def gla_attend(q, k, v, alpha, beta, s0: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Run the gated recurrence; returns the per-token reads O and the final state.

    The state starts at zero unless ``s0`` resumes an earlier scan. Leading
    batch axes are carried through untouched.
    """
    q, k, v, alpha, beta = (as_tensor(t) for t in (q, k, v, alpha, beta))
    _validate_attend(q, k, v, alpha, beta)
    length = q.shape[-2]
    lead = q.shape[:-2]
    dk, dv = q.shape[-1], v.shape[-1]
    state = as_tensor(s0) if s0 is not None else Tensor(np.zeros(lead + (dk, dv)))
    if state.shape[-2:] != (dk, dv):
        raise ShapeError(f"gla_attend: state shape {state.shape} does not end in ({dk}, {dv})")
    k_cols = swap_last(k)
    a_cols = swap_last(alpha)
    reads = []
    for t in range(length):
        gate = matmul(narrow(a_cols, -1, t, 1), narrow(beta, -2, t, 1))
        update = matmul(narrow(k_cols, -1, t, 1), narrow(v, -2, t, 1))
        state = add(mul(gate, state), update)
        reads.append(matmul(narrow(q, -2, t, 1), state))
    return concat(reads, axis=-2), state


def gla_scan(q, k, v, alpha, beta, r_gate, s0: GlaState | None, params: GlaParams) -> Tensor:
    """Full post-projection pipeline: recurrence, norm, output gate, W_o.

    The pre-output-gate reads (what ``gla_oracle`` reproduces) are the
    ``gla_attend`` output; this wrapper adds ``(R (*) layernorm(O)) W_o``.
    """
    q, k, v, alpha, beta, r_gate = (as_tensor(t) for t in (q, k, v, alpha, beta, r_gate))
    if r_gate.shape[-1] != params.dv:
        raise ShapeError(f"gla_scan: output gate width {r_gate.shape[-1]} != dv {params.dv}")
    heads = params.heads
    if heads == 1:
        o, _ = gla_attend(q, k, v, alpha, beta, s0.s if s0 is not None else None)
    else:
        dkh = q.shape[-1] // heads
        dvh = v.shape[-1] // heads
        reads = []
        for h in range(heads):
            if s0 is not None:
                lead = s0.s.shape[:-3]
                s_h = reshape(narrow(s0.s, -3, h, 1), lead + (dkh, dvh))
            else:
                s_h = None
            o_h, _ = gla_attend(
                narrow(q, -1, h * dkh, dkh),
                narrow(k, -1, h * dkh, dkh),
                narrow(v, -1, h * dvh, dvh),
                narrow(alpha, -1, h * dkh, dkh),
                narrow(beta, -1, h * dvh, dvh),
                s_h,
            )
            reads.append(o_h)
        o = concat(reads, axis=-1)
    return matmul(mul(r_gate, layernorm(o)), params.w_o)


def gla_apply(l_in, params: GlaParams, s0: GlaState | None = None) -> Tensor:
    """Project ``l_in`` and scan it: the standalone mixer pipeline."""
    q, k, v, alpha, beta, r_gate = gla_project(l_in, params)
    return gla_scan(q, k, v, alpha, beta, r_gate, s0, params)


def gla_oracle(q, k, v, alpha, beta) -> Tensor:
    """Brute-force reads from the unrolled recurrence (2-d inputs only).

    For every t the state is rebuilt as an explicit sum over j <= t with the
    elementwise gate product accumulated term by term:

        O_t = Q_t sum_j (prod_{m=j+1..t} G_m) (*) K_j^T V_j

    Quadratic in sequence length by design; intended for small instances.
    """
    arrays = []
    for name, t in zip("QKVab", (q, k, v, alpha, beta)):
        arr = np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError(f"gla_oracle: {name} must be 2-d, got shape {arr.shape}")
        arrays.append(arr)
    q_a, k_a, v_a, alpha_a, beta_a = arrays
    _validate_attend(*(Tensor(a) for a in arrays))
    length, dk = q_a.shape
    dv = v_a.shape[1]
    out = np.zeros((length, dv))
    for t in range(length):
        acc = np.zeros((dk, dv))
        weight = np.ones((dk, dv))
        for j in range(t, -1, -1):
            if j < t:
                weight = weight * np.outer(alpha_a[j + 1], beta_a[j + 1])
            acc = acc + weight * np.outer(k_a[j], v_a[j])
        out[t] = q_a[t] @ acc
    return Tensor(out)
