"""Single-step recurrence kernels.

Each layer kind comes in two forms:

* a vectorized form (``lstm_step``, ``hmlstm_*_step``, ``hmrnn_step``) built
  from tape operations, using multiplicative masks so a whole batch with mixed
  boundary values runs in one pass;
* a per-row branch form (``*_branch``) in plain numpy that picks FLUSH, COPY
  or UPDATE with an ``if`` for every batch row.  It is not differentiable and
  exists to cross-check the masked form.

Weight matrices multiply from the right (``x @ W``), so the gate columns are
laid out ``[i | f | u | o | z]`` and the boundary logit is the last column.

The masked updates are arranged so that COPY reproduces the previous state
bit for bit: ``c_m * c_prev + (1 - c_m) * new`` evaluates to exactly ``c_prev``
when ``c_m == 1``, whereas the algebraically equal ``u_g + c_m * (c_prev - u_g)``
does not.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .numerics import (Parameter, ShapeError, Tensor, add, hard_sigmoid, layer_norm,
                       matmul, mul, sigmoid, straight_through_round, sub, take, tanh)

STREAMS = ("W", "U", "V")


@dataclass(frozen=True)
class CellFlags:
    use_layer_norm: bool = True
    copy_last: bool = False
    no_top_down: bool = False
    slope_alpha: float = 0.5
    ln_eps: float = 1e-5

    def __post_init__(self):
        if not self.slope_alpha > 0:
            raise ValueError(f"slope_alpha must be > 0, got {self.slope_alpha}")
        if not self.ln_eps > 0:
            raise ValueError(f"ln_eps must be > 0, got {self.ln_eps}")


@dataclass
class LayerState:
    """``h`` always; ``c`` for LSTM-type layers; ``z`` for boundary layers."""

    h: Tensor
    c: Tensor | None = None
    z: Tensor | None = None

    def detach(self):
        return LayerState(*(None if t is None else Tensor(t.data) for t in (self.h, self.c, self.z)))

    def arrays(self):
        return tuple(None if t is None else t.data for t in (self.h, self.c, self.z))


@dataclass
class LayerWeights:
    """Parameters of one layer.

    ``ln`` maps a stream name (``"W"``, ``"U"``, ``"V"``) to its layer-norm
    (gain, bias) pair; it is empty when layer normalization is off.
    """

    units: int
    W: Parameter
    U: Parameter
    V: Parameter | None = None
    b: Parameter | None = None
    ln: dict = field(default_factory=dict)
    eps: float = 1e-5

    @property
    def width(self):
        return self.W.shape[1]

    def parameters(self):
        out = [self.W, self.U]
        if self.V is not None:
            out.append(self.V)
        if self.b is not None:
            out.append(self.b)
        for stream in STREAMS:
            if stream in self.ln:
                out.extend(self.ln[stream])
        return out

    def stream(self, name, x):
        """``x @ M`` for stream ``name``, layer-normalized when configured."""
        M = getattr(self, name)
        if x.shape[-1] != M.shape[0]:
            raise ShapeError(f"{M.name}: input width {x.shape[-1]} does not match {M.shape}")
        y = matmul(x, M.value)
        if name in self.ln:
            gain, bias = self.ln[name]
            y = layer_norm(y, gain.value, bias.value, self.eps)
        return y


def _gates(pre, units):
    i = take(pre, (slice(None), slice(0, units)))
    f = take(pre, (slice(None), slice(units, 2 * units)))
    u = take(pre, (slice(None), slice(2 * units, 3 * units)))
    o = take(pre, (slice(None), slice(3 * units, 4 * units)))
    return i, f, u, o


def _boundary(pre, col, flags):
    logit = take(pre, (slice(None), slice(col, col + 1)))
    return straight_through_round(hard_sigmoid(logit, flags.slope_alpha))


def _with_bias(pre, weights):
    return pre if weights.b is None else add(pre, weights.b.value)


def _check_binary(z, what):
    d = z.data
    if not np.all((d == 0) | (d == 1)):
        raise ValueError(f"{what} must be binary (0 or 1)")


def _top_down(weights, flags):
    return weights.V is not None and not flags.no_top_down


# --- vectorized (tape) forms ---------------------------------------------

def lstm_step(x, state, weights, flags=CellFlags()):
    U = weights.units
    pre = _with_bias(add(weights.stream("W", x), weights.stream("U", state.h)), weights)
    i, f, u, o = _gates(pre, U)
    c = add(mul(state.c, sigmoid(f)), mul(tanh(u), sigmoid(i)))
    h = mul(sigmoid(o), tanh(c))
    return LayerState(h, c)


def hmlstm_bottom_step(x, state, h_above, weights, flags=CellFlags()):
    U = weights.units
    pre = add(weights.stream("W", x), weights.stream("U", state.h))
    if _top_down(weights, flags):
        pre = add(pre, mul(state.z, weights.stream("V", h_above)))
    pre = _with_bias(pre, weights)
    i, f, u, o = _gates(pre, U)
    z = _boundary(pre, 4 * U, flags)
    keep = sub(1.0, state.z)
    c = add(mul(mul(keep, state.c), sigmoid(f)), mul(tanh(u), sigmoid(i)))
    h = mul(sigmoid(o), tanh(c))
    return LayerState(h, c, z)


def hmlstm_middle_step(h_below, z_below, state, h_above, weights, flags=CellFlags()):
    _check_binary(z_below, "z_below")
    U = weights.units
    pre = add(mul(z_below, weights.stream("W", h_below)), weights.stream("U", state.h))
    if _top_down(weights, flags):
        pre = add(pre, mul(state.z, weights.stream("V", h_above)))
    pre = _with_bias(pre, weights)
    i, f, u, o = _gates(pre, U)
    z = _boundary(pre, 4 * U, flags)

    not_flushed = sub(1.0, state.z)
    copy_mask = mul(not_flushed, sub(1.0, z_below))
    update_mask = mul(not_flushed, z_below)
    gated = mul(sigmoid(i), tanh(u))
    c = add(add(mul(copy_mask, state.c),
                mul(update_mask, add(mul(sigmoid(f), state.c), gated))),
            mul(state.z, gated))
    run = sub(1.0, copy_mask)
    h = add(mul(run, mul(sigmoid(o), tanh(c))), mul(copy_mask, state.h))
    return LayerState(h, c, z)


def hmlstm_top_step(h_below, z_below, state, weights, flags=CellFlags()):
    _check_binary(z_below, "z_below")
    U = weights.units
    pre = _with_bias(add(mul(z_below, weights.stream("W", h_below)), weights.stream("U", state.h)), weights)
    i, f, u, o = _gates(pre, U)
    skip = sub(1.0, z_below)
    c_hat = add(mul(sigmoid(f), state.c), mul(sigmoid(i), tanh(u)))
    c = add(mul(z_below, c_hat), mul(skip, state.c))
    if flags.copy_last:
        h_hat = mul(sigmoid(o), tanh(c_hat))
        h = add(mul(z_below, h_hat), mul(skip, state.h))
    else:
        h = mul(sigmoid(o), tanh(c))
    return LayerState(h, c)


def hmrnn_step(position, weights, flags=CellFlags(), *, x=None, h_below=None, z_below=None,
               state=None, h_above=None):
    """Elman-style multiscale step; ``position`` is bottom, middle or top.

    The bottom layer reads ``x``; the others read ``h_below``/``z_below``.
    """
    U = weights.units
    if position == "bottom":
        keep = sub(1.0, state.z)
        pre = add(weights.stream("W", x), mul(keep, weights.stream("U", state.h)))
        if _top_down(weights, flags):
            pre = add(pre, mul(state.z, weights.stream("V", h_above)))
        pre = _with_bias(pre, weights)
        h = tanh(take(pre, (slice(None), slice(0, U))))
        return LayerState(h, None, _boundary(pre, U, flags))

    _check_binary(z_below, "z_below")
    below = weights.stream("W", h_below)
    if position == "top":
        cand = tanh(_with_bias(add(below, weights.stream("U", state.h)), weights))
        h = add(mul(sub(1.0, z_below), state.h), mul(z_below, cand))
        return LayerState(h)
    if position != "middle":
        raise ValueError(f"unknown layer position {position!r}")

    not_flushed = sub(1.0, state.z)
    copy_mask = mul(not_flushed, sub(1.0, z_below))
    update_mask = mul(not_flushed, z_below)
    flush_pre = below
    if _top_down(weights, flags):
        flush_pre = add(flush_pre, weights.stream("V", h_above))
    update_pre = add(below, weights.stream("U", state.h))
    pre = _with_bias(add(mul(sub(1.0, update_mask), flush_pre), mul(update_mask, update_pre)), weights)
    cand = tanh(take(pre, (slice(None), slice(0, U))))
    h = add(mul(copy_mask, state.h), mul(sub(1.0, copy_mask), cand))
    return LayerState(h, None, _boundary(pre, U, flags))


# --- per-row branch forms ---------------------------------------------------

def _ln_row(v, weights, name):
    if name not in weights.ln:
        return v
    gain, bias = weights.ln[name]
    mu = v.mean()
    var = ((v - mu) ** 2).mean()
    return (v - mu) / np.sqrt(var + weights.eps) * gain.data + bias.data


def _row_stream(weights, name, v):
    return _ln_row(v @ getattr(weights, name).data, weights, name)


def _row_bias(weights):
    return 0.0 if weights.b is None else weights.b.data


def _row_z(logit, flags):
    p = min(1.0, max(0.0, flags.slope_alpha * logit + 0.5))
    return 1.0 if p >= 0.5 else 0.0


def _rows(state):
    h, c, z = state.arrays()
    return h, c, z


def _pack(hs, cs=None, zs=None):
    wrap = lambda rows: None if rows is None else Tensor(np.array(rows))
    return LayerState(wrap(hs), wrap(cs), wrap(zs))


def lstm_step_branch(x, state, weights, flags=CellFlags()):
    U = weights.units
    h0, c0, _ = _rows(state)
    hs, cs = [], []
    for r in range(h0.shape[0]):
        pre = _row_stream(weights, "W", x.data[r]) + _row_stream(weights, "U", h0[r]) + _row_bias(weights)
        i, f, u, o = pre[:U], pre[U:2 * U], pre[2 * U:3 * U], pre[3 * U:4 * U]
        c = c0[r] * expit(f) + np.tanh(u) * expit(i)
        hs.append(expit(o) * np.tanh(c))
        cs.append(c)
    return _pack(hs, cs)


def hmlstm_bottom_branch(x, state, h_above, weights, flags=CellFlags()):
    U = weights.units
    h0, c0, z0 = _rows(state)
    hs, cs, zs = [], [], []
    for r in range(h0.shape[0]):
        pre = _row_stream(weights, "W", x.data[r]) + _row_stream(weights, "U", h0[r])
        if z0[r, 0] == 1 and _top_down(weights, flags):
            pre = pre + _row_stream(weights, "V", h_above.data[r])
        pre = pre + _row_bias(weights)
        i, f, u, o = pre[:U], pre[U:2 * U], pre[2 * U:3 * U], pre[3 * U:4 * U]
        if z0[r, 0] == 0:
            c = c0[r] * expit(f) + np.tanh(u) * expit(i)
        else:
            c = np.tanh(u) * expit(i)
        hs.append(expit(o) * np.tanh(c))
        cs.append(c)
        zs.append([_row_z(pre[4 * U], flags)])
    return _pack(hs, cs, zs)


def hmlstm_middle_branch(h_below, z_below, state, h_above, weights, flags=CellFlags()):
    U = weights.units
    h0, c0, z0 = _rows(state)
    hs, cs, zs = [], [], []
    for r in range(h0.shape[0]):
        zb, zp = z_below.data[r, 0], z0[r, 0]
        pre = _row_stream(weights, "U", h0[r]) + _row_bias(weights)
        if zb == 1:
            pre = pre + _row_stream(weights, "W", h_below.data[r])
        if zp == 1 and _top_down(weights, flags):
            pre = pre + _row_stream(weights, "V", h_above.data[r])
        i, f, u, o = pre[:U], pre[U:2 * U], pre[2 * U:3 * U], pre[3 * U:4 * U]
        if zp == 1:
            c = np.tanh(u) * expit(i)
            h = expit(o) * np.tanh(c)
        elif zb == 0:
            c, h = c0[r], h0[r]
        else:
            c = c0[r] * expit(f) + np.tanh(u) * expit(i)
            h = expit(o) * np.tanh(c)
        hs.append(h)
        cs.append(c)
        zs.append([_row_z(pre[4 * U], flags)])
    return _pack(hs, cs, zs)


def hmlstm_top_branch(h_below, z_below, state, weights, flags=CellFlags()):
    U = weights.units
    h0, c0, _ = _rows(state)
    hs, cs = [], []
    for r in range(h0.shape[0]):
        zb = z_below.data[r, 0]
        pre = _row_stream(weights, "U", h0[r]) + _row_bias(weights)
        if zb == 1:
            pre = pre + _row_stream(weights, "W", h_below.data[r])
        i, f, u, o = pre[:U], pre[U:2 * U], pre[2 * U:3 * U], pre[3 * U:4 * U]
        if zb == 1:
            c = c0[r] * expit(f) + np.tanh(u) * expit(i)
            h = expit(o) * np.tanh(c)
        else:
            c = c0[r]
            h = h0[r] if flags.copy_last else expit(o) * np.tanh(c0[r])
        hs.append(h)
        cs.append(c)
    return _pack(hs, cs)


def hmrnn_branch(position, weights, flags=CellFlags(), *, x=None, h_below=None, z_below=None,
                 state=None, h_above=None):
    U = weights.units
    h0, _, z0 = _rows(state)
    hs, zs = [], []
    for r in range(h0.shape[0]):
        if position == "bottom":
            pre = _row_stream(weights, "W", x.data[r])
            if z0[r, 0] == 1:
                if _top_down(weights, flags):
                    pre = pre + _row_stream(weights, "V", h_above.data[r])
            else:
                pre = pre + _row_stream(weights, "U", h0[r])
            pre = pre + _row_bias(weights)
            hs.append(np.tanh(pre[:U]))
            zs.append([_row_z(pre[U], flags)])
        elif position == "top":
            if z_below.data[r, 0] == 1:
                pre = (_row_stream(weights, "W", h_below.data[r]) + _row_stream(weights, "U", h0[r])
                       + _row_bias(weights))
                hs.append(np.tanh(pre))
            else:
                hs.append(h0[r])
        else:
            zb, zp = z_below.data[r, 0], z0[r, 0]
            if zp == 1:
                pre = _row_stream(weights, "W", h_below.data[r])
                if _top_down(weights, flags):
                    pre = pre + _row_stream(weights, "V", h_above.data[r])
            elif zb == 1:
                pre = _row_stream(weights, "W", h_below.data[r]) + _row_stream(weights, "U", h0[r])
            else:
                pre = _row_stream(weights, "W", h_below.data[r])
                if _top_down(weights, flags):
                    pre = pre + _row_stream(weights, "V", h_above.data[r])
            pre = pre + _row_bias(weights)
            hs.append(h0[r] if (zp == 0 and zb == 0) else np.tanh(pre[:U]))
            zs.append([_row_z(pre[U], flags)])
    return _pack(hs, None, zs if zs else None)
