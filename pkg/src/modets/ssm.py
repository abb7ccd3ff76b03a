"""State-transition kernels: low-rank ODE integration, ZOH, scans, causal conv."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .counters import OpCounter
from .numerics import (
    Tensor,
    _result,
    as_tensor,
    exp,
    expm1_over,
    merge_rows,
    spectral_norm_estimate,
    stack,
    take_rows,
)

METHODS = ("euler", "heun", "discrete")
STAGES = {"euler": 1, "heun": 2, "discrete": 1}


@dataclass
class LowRankFactors:
    """U, V (d x r), B (d x v_in), C (v_out x d), optional elementwise D (v,), step size.

    Factors are either static (exactly two dims) or carry leading batch/time
    axes, e.g. ``U`` of shape ``(B, L, d, r)`` for per-step generation.
    ``delta`` is a scalar or an array over the same leading axes.
    """

    U: Tensor
    V: Tensor
    B: Tensor
    C: Tensor
    D: Tensor | None = None
    delta: Tensor | float = 1.0

    def __post_init__(self):
        self.U, self.V = as_tensor(self.U), as_tensor(self.V)
        self.B, self.C = as_tensor(self.B), as_tensor(self.C)
        if self.D is not None:
            self.D = as_tensor(self.D)
        if not isinstance(self.delta, (int, float)):
            self.delta = as_tensor(self.delta)
        d, r = self.U.shape[-2:]
        if self.V.shape[-2:] != (d, r):
            raise ValueError(f"U {self.U.shape} and V {self.V.shape} disagree")
        if r > d:
            raise ValueError(f"rank {r} exceeds state size {d}")
        if self.B.shape[-2] != d or self.C.shape[-1] != d:
            raise ValueError(f"B {self.B.shape} / C {self.C.shape} do not match d={d}")
        dmin = np.min(self.delta.data) if isinstance(self.delta, Tensor) else self.delta
        if not dmin > 0:
            raise ValueError("delta must be strictly positive")

    @property
    def d(self) -> int:
        return self.U.shape[-2]

    @property
    def r(self) -> int:
        return self.U.shape[-1]

    @property
    def v_in(self) -> int:
        return self.B.shape[-1]

    @property
    def v_out(self) -> int:
        return self.C.shape[-2]

    def take(self, rows: np.ndarray) -> "LowRankFactors":
        """Restrict per-row factors (leading batch axis) to ``rows``."""

        def pick(t, static_ndim):
            if t is None or isinstance(t, float) or t.ndim <= static_ndim:
                return t
            return take_rows(t, rows)

        return LowRankFactors(pick(self.U, 2), pick(self.V, 2), pick(self.B, 2), pick(self.C, 2),
                              pick(self.D, 1), pick(self.delta, 0))


@dataclass
class HiddenState:
    h: Tensor
    step_index: int = 0


@dataclass
class SegmentPlan:
    """Top-k step selection inside fixed-length segments.

    ``scores`` and ``mask`` share a shape ``(..., L)``; ``mask`` marks steps
    that receive the full update.
    """

    segment_length: int
    k_per_segment: int
    scores: np.ndarray
    mask: np.ndarray = field(repr=False)
    selection_ops: int = 0

    @classmethod
    def build(cls, scores, segment_length: int, k_per_segment: int) -> "SegmentPlan":
        scores = np.asarray(scores, dtype=np.float64)
        S, k = int(segment_length), int(k_per_segment)
        if S < 1 or not 0 <= k <= S:
            raise ValueError(f"need S >= 1 and 0 <= k <= S, got S={S}, k={k}")
        L = scores.shape[-1]
        mask = np.zeros(scores.shape, dtype=bool)
        rows = int(np.prod(scores.shape[:-1], dtype=np.int64))
        ops = 0
        for start in range(0, L, S):
            seg = scores[..., start:start + S]
            n = seg.shape[-1]
            keep = min(k, n)
            if keep == n:
                mask[..., start:start + n] = True
                continue
            if keep == 0:
                continue
            # stable sort on negated scores: ties resolve to the earlier index
            order = np.argsort(-seg, axis=-1, kind="stable")[..., :keep]
            sub = np.zeros(seg.shape, dtype=bool)
            np.put_along_axis(sub, order, True, axis=-1)
            mask[..., start:start + n] = sub
            ops += rows * n * max(1, math.ceil(math.log2(keep + 1)))
        return cls(S, k, scores, mask, ops)

    @classmethod
    def full(cls, shape, segment_length: int = 1) -> "SegmentPlan":
        scores = np.ones(shape)
        return cls(segment_length, segment_length, scores, np.ones(shape, dtype=bool), 0)

    @property
    def selected(self) -> list[np.ndarray]:
        """Selected indices per segment for a single (1-D) plan."""
        if self.mask.ndim != 1:
            raise ValueError("selected is defined for single-sequence plans")
        L = self.mask.shape[0]
        return [np.flatnonzero(self.mask[s:s + self.segment_length]) + s
                for s in range(0, L, self.segment_length)]

    @property
    def full_update_count(self) -> int:
        return int(self.mask.sum())


# -- basic kernels ----------------------------------------------------------

def _rows(h: Tensor) -> int:
    return h.size // h.shape[-1]


def lowrank_apply(f: LowRankFactors, h, counter: OpCounter | None = None) -> Tensor:
    """U (V^T h) evaluated factor-first; the d x d product is never formed."""
    h = as_tensor(h)
    if h.shape[-1] != f.d:
        raise ValueError(f"state width {h.shape[-1]} != d={f.d}")
    if counter is not None:
        counter.state_transition += 2 * f.d * f.r * _rows(h)
    if f.U.ndim == 2:
        return (h @ f.V) @ f.U.mT
    h3 = h.reshape(h.shape[:-1] + (1, f.d))
    return ((h3 @ f.V) @ f.U.mT).reshape(h.shape)


def dense_apply(a, h, counter: OpCounter | None = None) -> Tensor:
    """Contrast path: multiply by a materialised d x d transition."""
    a, h = as_tensor(a), as_tensor(h)
    if counter is not None:
        counter.dense_transition += a.shape[-1] * a.shape[-2] * _rows(h)
    if a.ndim == 2:
        return h @ a.mT
    h3 = h.reshape(h.shape[:-1] + (1, h.shape[-1]))
    return (h3 @ a.mT).reshape(h.shape)


def _delta_column(delta, lead: tuple) -> Tensor | float:
    """Broadcast a scalar/per-row step size against ``lead + (1, d)`` states."""
    if isinstance(delta, (int, float)):
        return float(delta)
    return delta.reshape(tuple(delta.shape) + (1,) * (len(lead) + 2 - delta.ndim))


def _full_update(h: Tensor, x: Tensor, f: LowRankFactors, ode_steps: int, method: str,
                 counter: OpCounter | None, dense: Tensor | None = None) -> Tensor:
    if method not in METHODS:
        raise ValueError(f"unknown integrator {method!r}; choose from {METHODS}")
    if ode_steps < 1:
        raise ValueError("ode_steps must be >= 1")
    d, lead = f.d, h.shape[:-1]
    h3 = h.reshape(lead + (1, d))
    x3 = x.reshape(x.shape[:-1] + (1, x.shape[-1]))
    inj = x3 @ f.B.mT
    rows = _rows(h)
    if counter is not None:
        counter.input_injection += d * f.v_in * rows
    dt = _delta_column(f.delta, lead)
    dt = dt / ode_steps if isinstance(dt, float) else dt * (1.0 / ode_steps)

    if dense is None:
        VT, UT = f.V, f.U.mT
        cost = 2 * d * f.r * rows

        def trans(z):
            return (z @ VT) @ UT
    else:
        AT = dense.mT
        cost = d * d * rows

        def trans(z):
            return z @ AT

    def tally(n_apply):
        if counter is None:
            return
        if dense is None:
            counter.state_transition += n_apply * cost
        else:
            counter.dense_transition += n_apply * cost

    if method == "discrete":
        dinj = inj * dt
        for _ in range(ode_steps):
            h3 = trans(h3) + dinj
        tally(ode_steps)
    elif method == "euler":
        for _ in range(ode_steps):
            h3 = h3 + dt * (trans(h3) + inj)
        tally(ode_steps)
    else:
        half = dt * 0.5
        for _ in range(ode_steps):
            k1 = trans(h3) + inj
            k2 = trans(h3 + dt * k1) + inj
            h3 = h3 + half * (k1 + k2)
        tally(2 * ode_steps)
    return h3.reshape(h.shape)


def ode_integrate_step(f: LowRankFactors, state: HiddenState, x_t, ode_steps: int = 4,
                       method: str = "heun", counter: OpCounter | None = None) -> HiddenState:
    """Advance the state across one token interval of length ``delta``.

    Integrates h' = U V^T h + B x_t with x held fixed over the interval using
    ``ode_steps`` explicit sub-steps.  ``method="discrete"`` instead applies
    the one-step map h <- U V^T h + (delta/T) B x, the contractive iterate
    whose boundedness the stability clamp guarantees.
    """
    x_t = as_tensor(x_t)
    h = _full_update(as_tensor(state.h), x_t, f, ode_steps, method, counter)
    return HiddenState(h, state.step_index + 1)


def readout(f: LowRankFactors, h: Tensor, x_t: Tensor, counter: OpCounter | None = None) -> Tensor:
    """y = C h (+ D * x)."""
    rows = _rows(h)
    if f.C.ndim == 2:
        y = h @ f.C.mT
    else:
        h3 = h.reshape(h.shape[:-1] + (1, h.shape[-1]))
        y = (h3 @ f.C.mT).reshape(h.shape[:-1] + (f.v_out,))
    if counter is not None:
        counter.output_map += f.d * f.v_out * rows
    if f.D is not None:
        y = y + f.D * x_t
        if counter is not None:
            counter.skip += f.D.shape[-1] * rows
    return y


def zoh_discretize(a_diag, b, delta):
    """Zero-order-hold discretisation of a diagonal continuous system.

    Returns (a_bar, b_bar) with a_bar = exp(delta a) and
    b_bar = (exp(delta a) - 1) / a * b per channel; at a = 0 the limit
    delta * b is used.
    """
    a = as_tensor(a_diag)
    b = as_tensor(b)
    if isinstance(delta, (int, float)):
        if delta <= 0:
            raise ValueError("delta must be positive")
        z = a * float(delta)
        coef = expm1_over(z) * float(delta)
    else:
        delta = as_tensor(delta)
        if np.any(delta.data <= 0):
            raise ValueError("delta must be positive")
        z = a * delta
        coef = expm1_over(z) * delta
    a_bar = exp(z)
    b_bar = coef.reshape(coef.shape + (1,)) * b
    return a_bar, b_bar


# -- scans --------------------------------------------------------------------

def _batched(xs: Tensor) -> tuple[Tensor, bool]:
    if xs.ndim == 2:
        return xs.reshape((1,) + xs.shape), False
    if xs.ndim != 3:
        raise ValueError(f"expected (L, v) or (B, L, v) input, got {xs.shape}")
    return xs, True


def _lift(t, static_ndim: int, squeeze: bool):
    """Give a per-step tensor a leading batch axis when the input had none."""
    if t is None or isinstance(t, float) or t.ndim <= static_ndim:
        return t
    return t.reshape((1,) + t.shape) if squeeze else t


def _at(t, static_ndim: int, step: int):
    if t is None or isinstance(t, float) or t.ndim <= static_ndim:
        return t
    if t.ndim == static_ndim + 1:
        # shared across rows: (L, ...) only
        return t[step]
    return t[:, step]


def recurrent_scan_dense(a_bar, b_bar, c, d_skip, xs, *, counter: OpCounter | None = None,
                         return_states: bool = False):
    """Sequential scan h_t = a_bar * h_{t-1} + b_bar x_t, y_t = C h_t + D x_t with h_0 = 0.

    ``a_bar`` is a diagonal (vector) transition, static ``(d,)`` or per step
    ``(B, L, d)``; ``b_bar``/``c`` are static matrices or per-step stacks.
    """
    xs, batched = _batched(as_tensor(xs))
    sq = not batched
    a_bar, b_bar, c = as_tensor(a_bar), as_tensor(b_bar), as_tensor(c)
    a_bar = _lift(a_bar, 1, sq)
    b_bar = _lift(b_bar, 2, sq)
    c = _lift(c, 2, sq)
    d_skip = None if d_skip is None else as_tensor(d_skip)
    Bsz, L, v_in = xs.shape
    d = a_bar.shape[-1]
    h = Tensor(np.zeros((Bsz, d), dtype=xs.data.dtype))
    ys, hs = [], []
    for t in range(L):
        x_t = xs[:, t]
        a_t = _at(a_bar, 1, t)
        b_t = _at(b_bar, 2, t)
        c_t = _at(c, 2, t)
        if b_t.ndim == 2:
            inj = x_t @ b_t.mT
        else:
            inj = (x_t.reshape((Bsz, 1, v_in)) @ b_t.mT).reshape((Bsz, d))
        h = a_t * h + inj
        if c_t.ndim == 2:
            y = h @ c_t.mT
        else:
            y = (h.reshape((Bsz, 1, d)) @ c_t.mT).reshape((Bsz, c_t.shape[-2]))
        if d_skip is not None:
            # a 2-D skip is a full v_out x v_in matrix, 1-D is elementwise
            y = y + (x_t @ d_skip.mT if d_skip.ndim == 2 else d_skip * x_t)
        if counter is not None:
            counter.dense_transition += d * Bsz
            counter.input_injection += d * v_in * Bsz
            counter.output_map += d * c_t.shape[-2] * Bsz
            counter.steps += Bsz
        ys.append(y)
        hs.append(h)
    out = stack(ys, axis=1)
    states = stack(hs, axis=1)
    if not batched:
        out, states = out[0], states[0]
    return (out, states) if return_states else out


def selective_scan_segmented(factors: LowRankFactors, xs, plan: SegmentPlan, *, a_decay=None,
                             ode_steps: int = 4, method: str = "heun",
                             alpha_max: float | None = None,
                             counter: OpCounter | None = None, return_states: bool = False,
                             dense_contrast: bool = False):
    """Segmented selective scan with the low-rank ODE as the full update.

    Steps marked in ``plan`` get :func:`ode_integrate_step`; the rest only
    decay, h <- exp(delta * a_decay) * h, with no input injection.  Every
    step emits y_t = C h_t (+ D x_t).  Returns ``(ys, stats)`` (and the hidden
    trajectory when ``return_states``).  ``dense_contrast`` materialises
    U V^T once per step and applies it as a d x d matrix instead, which is
    only useful for cost comparisons.
    """
    xs, batched = _batched(as_tensor(xs))
    sq = not batched
    Bsz, L, _ = xs.shape
    mask = np.asarray(plan.mask, dtype=bool)
    if mask.shape[-1] != L:
        raise ValueError(f"plan covers {mask.shape[-1]} steps, input has {L}")
    mask = np.broadcast_to(mask.reshape((-1, L)) if mask.ndim > 1 else mask, (Bsz, L))
    f = LowRankFactors(_lift(factors.U, 2, sq), _lift(factors.V, 2, sq), _lift(factors.B, 2, sq),
                       _lift(factors.C, 2, sq), _lift(factors.D, 1, sq), _lift(factors.delta, 0, sq))
    a_decay = None if a_decay is None else as_tensor(a_decay)
    stats = OpCounter(selection=plan.selection_ops)
    d = f.d
    h = Tensor(np.zeros((Bsz, d), dtype=xs.data.dtype))
    ys, hs = [], []
    for t in range(L):
        x_t = xs[:, t]
        f_t = LowRankFactors(_at(f.U, 2, t), _at(f.V, 2, t), _at(f.B, 2, t), _at(f.C, 2, t),
                             _at(f.D, 1, t), _at(f.delta, 0, t))
        if alpha_max is not None:
            f_t = stability_clamp(f_t, alpha_max)
        sel = mask[:, t]
        n_sel = int(sel.sum())
        dense = f_t.U @ f_t.V.mT if dense_contrast else None
        if n_sel == Bsz:
            h = _full_update(h, x_t, f_t, ode_steps, method, stats, dense)
        elif n_sel == 0:
            h = _decay(h, f_t.delta, a_decay, stats)
        else:
            on = np.flatnonzero(sel)
            off = np.flatnonzero(~sel)
            full = _full_update(take_rows(h, on), take_rows(x_t, on), f_t.take(on),
                                ode_steps, method, stats,
                                dense if dense is None or dense.ndim == 2 else take_rows(dense, on))
            off_delta = f_t.delta if isinstance(f_t.delta, float) or f_t.delta.ndim == 0 \
                else take_rows(f_t.delta, off)
            dec = _decay(take_rows(h, off), off_delta, a_decay, stats)
            h = merge_rows(merge_rows(h, on, full), off, dec)
        stats.full_updates += n_sel
        stats.decay_updates += Bsz - n_sel
        stats.steps += Bsz
        ys.append(readout(f_t, h, x_t, stats))
        hs.append(h)
    out = stack(ys, axis=1)
    states = stack(hs, axis=1)
    if counter is not None:
        counter.merge(stats)
    if not batched:
        out, states = out[0], states[0]
    if return_states:
        return out, stats, states
    return out, stats


def _decay(h: Tensor, delta, a_decay: Tensor | None, counter: OpCounter | None) -> Tensor:
    if a_decay is None:
        return h
    if counter is not None:
        counter.decay += h.size
    if isinstance(delta, float):
        return h * exp(a_decay * delta)
    return h * exp(delta.reshape(delta.shape + (1,)) * a_decay)


# -- convolution and stability ----------------------------------------------

def causal_conv1d(xs, kernel, bias=None) -> Tensor:
    """Depthwise causal convolution over the time axis (second to last).

    out[t, c] = bias[c] + sum_j kernel[j, c] * x[t - (w-1) + j, c], with zero
    left padding, so output at t only sees inputs at steps <= t.
    """
    xs, kernel = as_tensor(xs), as_tensor(kernel)
    if kernel.ndim != 2 or kernel.shape[0] < 1:
        raise ValueError("kernel must be (w, channels) with w >= 1")
    w, c = kernel.shape
    if xs.shape[-1] != c:
        raise ValueError(f"channel mismatch {xs.shape[-1]} vs kernel {c}")
    L = xs.shape[-2]
    pad_shape = xs.shape[:-2] + (w - 1, c)
    xpad = np.concatenate([np.zeros(pad_shape, dtype=xs.data.dtype), xs.data], axis=-2)
    k = kernel.data
    out = np.zeros(xs.shape, dtype=xs.data.dtype)
    for j in range(w):
        out += xpad[..., j:j + L, :] * k[j]
    parents = (xs, kernel)
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data
        parents = parents + (bias,)

    def bw(g, acc):
        if xs.requires_grad:
            gpad = np.zeros(xpad.shape, dtype=g.dtype)
            for j in range(w):
                gpad[..., j:j + L, :] += g * k[j]
            acc(xs, gpad[..., w - 1:, :])
        if kernel.requires_grad:
            gk = np.empty_like(k)
            lead = tuple(range(g.ndim - 1))
            for j in range(w):
                gk[j] = np.sum(g * xpad[..., j:j + L, :], axis=lead)
            acc(kernel, gk)
        if bias is not None and bias.requires_grad:
            acc(bias, g.reshape(-1, c).sum(axis=0))

    return _result(out, parents, bw, "causal_conv1d")


def lowrank_spectral_norm(U, V) -> float | np.ndarray:
    """Exact ||U V^T||_2 from thin QR factors: the top singular value of R_U R_V^T.

    Costs O(d r^2) per matrix and never forms the d x d product.  Stacks of
    factors (leading axes) are handled in one call.
    """
    U = U.data if isinstance(U, Tensor) else np.asarray(U, dtype=np.float64)
    V = V.data if isinstance(V, Tensor) else np.asarray(V, dtype=np.float64)
    ru = np.linalg.qr(U, mode="r")
    rv = np.linalg.qr(V, mode="r")
    s = np.linalg.svd(ru @ np.swapaxes(rv, -1, -2), compute_uv=False)[..., 0]
    return float(s) if s.ndim == 0 else s


def stability_clamp(f: LowRankFactors, alpha_max: float) -> LowRankFactors:
    """Rescale U so that ||U V^T||_2 <= alpha_max (per row for stacked factors).

    The norm is computed exactly (see :func:`lowrank_spectral_norm`); a
    power-iteration estimate approaches it from below and could leave the
    product slightly above the bound.  The rescaling factor is treated as a
    constant by the gradient tape.  Factors already within the bound are
    returned unchanged.
    """
    if not 0 < alpha_max < 1:
        raise ValueError("alpha_max must lie in (0, 1)")
    s = np.asarray(lowrank_spectral_norm(f.U, f.V))
    if not np.any(s > alpha_max):
        return f
    scale = np.where(s > alpha_max, alpha_max / np.where(s > 0, s, 1.0), 1.0)
    U = f.U * Tensor(scale.reshape(scale.shape + (1, 1)).astype(f.U.data.dtype))
    return replace(f, U=U)


def lowrank_norm(f: LowRankFactors, iters: int = 50):
    """Power-iteration estimate of ||U V^T||_2 (materialised; diagnostic use only)."""
    return spectral_norm_estimate(f.U.data @ np.swapaxes(f.V.data, -1, -2), iters)
