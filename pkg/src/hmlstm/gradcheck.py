"""Tape gradients against central finite differences, in float64."""
from __future__ import annotations

import numpy as np

from . import cells, model as model_mod
from .cells import CellFlags, LayerState
from .numerics import (Parameter, Tape, Tensor, add, concat, embedding, hard_sigmoid, layer_norm,
                       matmul, mul, no_grad, relu, reshape, sigmoid, softmax_cross_entropy, stack,
                       sum_all, sum_squares, take, tanh)

FD_EPS = 1e-5
REL_FLOOR = 1e-6


def relative_error(analytic, numeric, floor=REL_FLOOR):
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a, n = np.asarray(analytic, np.float64), np.asarray(numeric, np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def numerical_gradient(f, array, eps=FD_EPS):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``array`` (perturbed in place)."""
    g = np.zeros_like(array)
    it = np.nditer(array, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = array[i]
        array[i] = old + eps
        hi = f()
        array[i] = old - eps
        lo = f()
        array[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def check(build, arrays, eps=FD_EPS):
    """Compare tape and finite-difference gradients of ``build(tensors) -> scalar``.

    ``arrays`` maps names to float64 arrays; each becomes a trainable leaf.
    Returns ``{name: max relative error}``.
    """
    params = {k: Parameter(k, np.array(v, dtype=np.float64)) for k, v in arrays.items()}
    with Tape() as tape:
        loss = build({k: p.value for k, p in params.items()})
    tape.backward(loss)

    def value():
        with no_grad():
            return float(build({k: p.value for k, p in params.items()}).data)

    return {k: relative_error(p.grad, numerical_gradient(value, p.value.data, eps)) for k, p in params.items()}


def _away_from(x, points, margin):
    for p in points:
        x = np.where(np.abs(x - p) < margin, x + 2 * margin * np.sign(x - p + 1e-12), x)
    return x


def primitive_cases(rng):
    r = lambda *s: rng.standard_normal(s)
    w, r_cat, r_st = r(3, 4), r(3, 4), r(3, 8)
    cases = {
        "matmul": (lambda t: sum_all(mul(matmul(t["a"], t["b"]), w)), {"a": r(3, 5), "b": r(5, 4)}),
        "add_broadcast": (lambda t: sum_all(mul(add(t["a"], t["b"]), w)), {"a": r(3, 4), "b": r(1, 4)}),
        "mul": (lambda t: sum_all(mul(mul(t["a"], t["b"]), w)), {"a": r(3, 4), "b": r(3, 4)}),
        "mul_mask": (lambda t: sum_all(mul(mul(t["a"], t["m"]), w)), {"a": r(3, 4), "m": r(3, 1)}),
        "concat": (lambda t: sum_all(mul(concat([t["a"], t["b"]], axis=1), r_cat)), {"a": r(3, 2), "b": r(3, 2)}),
        "slice": (lambda t: sum_all(mul(take(t["a"], (slice(None), slice(1, 3))), w[:, :2])), {"a": r(3, 5)}),
        "stack_reshape": (lambda t: sum_all(mul(reshape(stack([t["a"], t["b"]], axis=1), (3, 8)), r_st)),
                          {"a": r(3, 4), "b": r(3, 4)}),
        "sigmoid": (lambda t: sum_all(mul(sigmoid(t["a"]), w)), {"a": r(3, 4)}),
        "tanh": (lambda t: sum_all(mul(tanh(t["a"]), w)), {"a": r(3, 4)}),
        "relu": (lambda t: sum_all(mul(relu(t["a"]), w)), {"a": _away_from(r(3, 4), [0.0], 1e-2)}),
        "embedding": (lambda t: sum_all(mul(embedding(t["E"], np.array([2, 0, 2])), w)), {"E": r(5, 4)}),
        "hard_sigmoid": (lambda t: sum_all(mul(hard_sigmoid(t["a"], 0.5), w)),
                         {"a": _away_from(r(3, 4) * 1.5, [-1.0, 1.0], 1e-2)}),
        "layer_norm": (lambda t: sum_all(mul(layer_norm(t["x"], t["g"], t["b"], 1e-5), w)),
                       {"x": r(3, 4), "g": r(4), "b": r(4)}),
        "softmax_cross_entropy": (lambda t: softmax_cross_entropy(t["z"], np.array([0, 3, 1])), {"z": r(3, 4)}),
        "sum_squares": (lambda t: sum_squares(t["a"]), {"a": r(3, 4)}),
    }
    return cases


def _layer_arrays(rng, arch, pos, n_in, units, n_above, flags):
    boundary = arch != "lstm" and pos != "top"
    gates = units if arch == "hmrnn" else 4 * units
    width = gates + int(boundary)
    a = {"W": rng.standard_normal((n_in, width)) * 0.5, "U": rng.standard_normal((units, width)) * 0.5}
    if boundary and not flags.no_top_down:
        a["V"] = rng.standard_normal((n_above, width)) * 0.5
    if arch != "hmrnn":
        a["b"] = rng.standard_normal(width) * 0.1
    if flags.use_layer_norm:
        for s in ("W", "U", "V"):
            if s in a:
                a[f"ln_{s}.gain"] = 1 + 0.1 * rng.standard_normal(width)
                a[f"ln_{s}.bias"] = 0.1 * rng.standard_normal(width)
    return a


def _weights_from(t, units, flags):
    ln = {s: (t[f"ln_{s}.gain"], t[f"ln_{s}.bias"]) for s in ("W", "U", "V") if f"ln_{s}.gain" in t}
    wrap = lambda x: None if x is None else _Leaf(x)
    return cells.LayerWeights(units, _Leaf(t["W"]), _Leaf(t["U"]), wrap(t.get("V")), wrap(t.get("b")),
                              {k: (_Leaf(g), _Leaf(b)) for k, (g, b) in ln.items()}, flags.ln_eps)


class _Leaf:
    """Parameter-shaped view of a tensor so cells can read ``.value``/``.data``."""

    def __init__(self, tensor):
        self.value = tensor
        self.name = "leaf"

    @property
    def data(self):
        return self.value.data

    @property
    def shape(self):
        return self.value.shape


def cell_cases(rng, batch=4, units=3, n_in=4):
    """Single-step cell checks with binary z inputs held constant.

    The loss weights ``h`` and ``c`` only: the new boundary passes through
    rounding, whose straight-through gradient is checked separately.
    """
    cases = {}
    z_prev = np.array([[0.0], [1.0], [0.0], [1.0]])[:batch]
    z_below = np.array([[0.0], [0.0], [1.0], [1.0]])[:batch]
    for arch in ("lstm", "hmlstm", "hmrnn"):
        positions = ("bottom",) if arch == "lstm" else ("bottom", "middle", "top")
        for pos in positions:
            for ln in (False, True):
                for copy_last in ((False, True) if arch == "hmlstm" and pos == "top" else (False,)):
                    flags = CellFlags(use_layer_norm=ln, copy_last=copy_last)
                    n = n_in if pos == "bottom" else units
                    arrays = {f"w.{k}": v for k, v in _layer_arrays(rng, arch, pos, n, units, units, flags).items()}
                    arrays.update(x=rng.standard_normal((batch, n)), h=rng.standard_normal((batch, units)),
                                  above=rng.standard_normal((batch, units)))
                    if arch != "hmrnn":
                        arrays["c"] = rng.standard_normal((batch, units))
                    rh, rc = rng.standard_normal((batch, units)), rng.standard_normal((batch, units))
                    name = f"{arch}.{pos}" + (".ln" if ln else "") + (".copylast" if copy_last else "")
                    cases[name] = (_cell_loss(arch, pos, flags, units, z_prev, z_below, rh, rc), arrays)
    return cases


def _cell_loss(arch, pos, flags, units, z_prev, z_below, rh, rc):
    def build(t):
        w = _weights_from({k[2:]: v for k, v in t.items() if k.startswith("w.")}, units, flags)
        zp, zb = Tensor(z_prev), Tensor(z_below)
        if arch == "lstm":
            out = cells.lstm_step(t["x"], LayerState(t["h"], t["c"]), w, flags)
        elif arch == "hmrnn":
            st = LayerState(t["h"], None, zp if pos != "top" else None)
            if pos == "bottom":
                out = cells.hmrnn_step(pos, w, flags, x=t["x"], state=st, h_above=t["above"])
            else:
                out = cells.hmrnn_step(pos, w, flags, h_below=t["x"], z_below=zb, state=st, h_above=t["above"])
        elif pos == "bottom":
            out = cells.hmlstm_bottom_step(t["x"], LayerState(t["h"], t["c"], zp), t["above"], w, flags)
        elif pos == "middle":
            out = cells.hmlstm_middle_step(t["x"], zb, LayerState(t["h"], t["c"], zp), t["above"], w, flags)
        else:
            out = cells.hmlstm_top_step(t["x"], zb, LayerState(t["h"], t["c"]), w, flags)
        loss = sum_all(mul(out.h, rh))
        if out.c is not None:
            loss = add(loss, sum_all(mul(out.c, rc)))
        return loss

    return build


def head_cases(rng, batch=3, units=3, out_dim=4, layers=3):
    cases = {}
    for head in ("gated", "simple"):
        for ln in (False, True):
            cfg = model_mod.ModelConfig(arch="lstm", units=units, embed_dim=2, output_dim=out_dim, vocab_size=3,
                                        output_head=head, ln_on_embeddings=ln, dtype="float64")
            params = model_mod.init_parameters(cfg, np.random.default_rng(1))
            arrays = {k: v.data + 0.1 * rng.standard_normal(v.shape) for k, v in params.items() if k.startswith("head.")}
            for i in range(layers):
                arrays[f"h{i}"] = rng.standard_normal((batch, units))
            r = rng.standard_normal((batch, out_dim))
            fn = model_mod.gated_output if head == "gated" else model_mod.simple_output
            def build(t, fn=fn, r=r):
                p = {k: _Leaf(v) for k, v in t.items() if k.startswith("head.")}
                return sum_all(mul(fn([t[f"h{i}"] for i in range(layers)], p), r))

            cases[f"head.{head}" + (".ln" if ln else "")] = (build, arrays)
    return cases


def model_cases(rng):
    """Whole-model loss for the plain LSTM stack (no rounding on the path)."""
    cases = {}
    for head in ("gated", "simple"):
        cfg = model_mod.ModelConfig(arch="lstm", units=3, embed_dim=2, output_dim=4, vocab_size=5,
                                    output_head=head, ln_on_embeddings=True, dtype="float64")
        base = model_mod.init_parameters(cfg, np.random.default_rng(2))
        arrays = {k: v.data + 0.05 * rng.standard_normal(v.shape) for k, v in base.items()}
        ids = rng.integers(0, 5, (2, 4))
        tgt = rng.integers(0, 5, (2, 4))

        def build(t, cfg=cfg, ids=ids, tgt=tgt):
            params = {k: _Leaf(v) for k, v in t.items()}
            m = model_mod.Model(cfg, params=params)
            logits, _, _ = m.forward_sequence(ids)
            return softmax_cross_entropy(reshape(logits, (-1, 5)), tgt.reshape(-1))

        cases[f"model.lstm.{head}"] = (build, arrays)
    return cases


def gradient_suite(seed=0, include_model=True):
    """Run every case; returns ``{case: max relative error over its inputs}``."""
    rng = np.random.default_rng(seed)
    results = {}
    groups = [primitive_cases(rng), cell_cases(rng), head_cases(rng)]
    if include_model:
        groups.append(model_cases(rng))
    for group in groups:
        for name, (build, arrays) in group.items():
            errs = check(build, arrays)
            results[name] = max(errs.values())
    return results


def straight_through_is_identity(seed=0):
    """Backward of the rounding op hands the upstream gradient through bit for bit."""
    from .numerics import straight_through_round
    rng = np.random.default_rng(seed)
    x = Parameter("x", rng.uniform(0, 1, (5, 7)))
    g = rng.standard_normal((5, 7))
    with Tape() as tape:
        y = straight_through_round(x.value)
        loss = sum_all(mul(y, Tensor(g)))
    tape.backward(loss)
    return bool(np.array_equal(x.grad, g))
