"""Three-layer multiscale stacks with embedding, output head and softmax."""
from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import cells
from .cells import CellFlags, LayerState, LayerWeights
from .numerics import (Parameter, ShapeError, Tensor, add, concat, embedding, layer_norm,
                       matmul, mul, relu, reshape, sigmoid, stack, take)

ARCHS = ("hmlstm", "hmrnn", "lstm")
HEADS = ("gated", "simple")


def derive_rng(seed, label):
    """Independent generator for one concern (``"init"``, ``"crop"``, ...)."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(zlib.crc32(label.encode()),)))


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "hmlstm"
    layers: int = 3
    units: int = 512
    embed_dim: int = 128
    output_dim: int = 512
    vocab_size: int = 50
    flags: CellFlags = field(default_factory=CellFlags)
    output_head: str = "gated"
    ln_on_embeddings: bool = True
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if self.output_head not in HEADS:
            raise ValueError(f"output_head must be one of {HEADS}, got {self.output_head!r}")
        if self.layers < 2:
            raise ValueError("need at least 2 layers")
        for name in ("units", "embed_dim", "output_dim", "vocab_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def boundary_layers(self):
        return 0 if self.arch == "lstm" else self.layers - 1

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["flags"] = CellFlags(**d.get("flags", {}))
        return cls(**d)

    def with_(self, **changes):
        return replace(self, **changes)


# --- initialization -----------------------------------------------------

def orthogonal(shape, rng):
    """Semi-orthogonal matrix from the QR of a standard-normal draw."""
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
    return q if rows >= cols else q.T


def glorot_uniform(shape, rng):
    limit = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, size=shape)


def _gate_matrix(n_in, n_gates, boundary, rng):
    w = orthogonal((n_in, n_gates), rng)
    if boundary:
        w = np.concatenate([w, glorot_uniform((n_in, 1), rng)], axis=1)
    return w


def layer_position(index, layers):
    if index == 0:
        return "bottom"
    return "top" if index == layers - 1 else "middle"


def init_parameters(config, rng=None):
    """Fresh parameters keyed by name, in a fixed creation order."""
    if rng is None:
        rng = derive_rng(config.seed, "init")
    dt = np.dtype(config.dtype)
    params = {}

    def new(name, value, **kw):
        params[name] = Parameter(name, np.asarray(value, dtype=dt), **kw)

    new("embed.table", orthogonal((config.vocab_size, config.embed_dim), rng))
    if config.ln_on_embeddings:
        new("embed.ln.gain", np.ones(config.embed_dim))
        new("embed.ln.bias", np.zeros(config.embed_dim))

    U = config.units
    for idx in range(config.layers):
        pos = layer_position(idx, config.layers)
        p = f"layer{idx + 1}"
        boundary = config.arch != "lstm" and pos != "top"
        gates = U if config.arch == "hmrnn" else 4 * U
        width = gates + int(boundary)
        n_in = config.embed_dim if idx == 0 else U
        new(f"{p}.W", _gate_matrix(n_in, gates, boundary, rng))
        new(f"{p}.U", _gate_matrix(U, gates, boundary, rng))
        streams = ["W", "U"]
        if config.arch != "lstm" and pos != "top" and not config.flags.no_top_down:
            new(f"{p}.V", _gate_matrix(U, gates, boundary, rng))
            streams.append("V")
        if config.arch != "hmrnn":
            new(f"{p}.b", np.zeros(width))
        if config.flags.use_layer_norm:
            for s in streams:
                new(f"{p}.ln_{s}.gain", np.ones(width))
                new(f"{p}.ln_{s}.bias", np.zeros(width))

    total = U * config.layers
    if config.output_head == "gated":
        new("head.gates", orthogonal((total, config.layers), rng))
        for idx in range(config.layers):
            new(f"head.We{idx + 1}", orthogonal((U, config.output_dim), rng))
    else:
        new("head.We", orthogonal((total, config.output_dim), rng))
    if config.ln_on_embeddings:
        new("head.ln.gain", np.ones(config.output_dim))
        new("head.ln.bias", np.zeros(config.output_dim))

    new("softmax.W", orthogonal((config.output_dim, config.vocab_size), rng))
    new("softmax.b", np.zeros(config.vocab_size))
    return params


def is_weight(name):
    """True for weight matrices; False for biases and layer-norm gains/biases."""
    leaf = name.rsplit(".", 1)[-1]
    return leaf not in ("b", "bias", "gain")


# --- output heads -----------------------------------------------------------

def _ln(x, params, prefix, eps):
    g = params.get(f"{prefix}.gain")
    if g is None:
        return x
    return layer_norm(x, g.value, params[f"{prefix}.bias"].value, eps)


def gated_output(hs, params, eps=1e-5):
    """ReLU of the per-layer embeddings weighted by scalar sigmoid gates."""
    joint = concat(hs, axis=-1)
    gates = sigmoid(matmul(joint, params["head.gates"].value))
    total = None
    for idx, h in enumerate(hs):
        g = take(gates, (slice(None), slice(idx, idx + 1)))
        term = mul(g, matmul(h, params[f"head.We{idx + 1}"].value))
        total = term if total is None else add(total, term)
    return relu(_ln(total, params, "head.ln", eps))


def simple_output(hs, params, eps=1e-5):
    """ReLU of one affine map of the concatenated hidden states."""
    return relu(_ln(matmul(concat(hs, axis=-1), params["head.We"].value), params, "head.ln", eps))


# --- the stack -----------------------------------------------------------------

class Model:
    """A stack of recurrent layers plus embedding, output head and softmax.

    ``forward_sequence`` runs layers bottom to top within each step, so layer
    ``l`` sees the current-step output of layer ``l-1`` and the previous-step
    hidden state of layer ``l+1``.
    """

    def __init__(self, config, params=None, rng=None):
        self.config = config
        self.params = params if params is not None else init_parameters(config, rng)
        eps = config.flags.ln_eps
        self.layers = []
        for idx in range(config.layers):
            p = f"layer{idx + 1}"
            ln = {}
            for s in cells.STREAMS:
                if f"{p}.ln_{s}.gain" in self.params:
                    ln[s] = (self.params[f"{p}.ln_{s}.gain"], self.params[f"{p}.ln_{s}.bias"])
            self.layers.append(LayerWeights(
                units=config.units, W=self.params[f"{p}.W"], U=self.params[f"{p}.U"],
                V=self.params.get(f"{p}.V"), b=self.params.get(f"{p}.b"), ln=ln, eps=eps))

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def initial_state(self, batch):
        cfg = self.config
        out = []
        for idx in range(cfg.layers):
            pos = layer_position(idx, cfg.layers)
            h = Tensor(np.zeros((batch, cfg.units), self.dtype))
            c = None if cfg.arch == "hmrnn" else Tensor(np.zeros((batch, cfg.units), self.dtype))
            z = None if cfg.arch == "lstm" or pos == "top" else Tensor(np.zeros((batch, 1), self.dtype))
            out.append(LayerState(h, c, z))
        return out

    def step(self, x, state):
        """Advance every layer by one step given embedded input ``x``."""
        cfg, flags = self.config, self.config.flags
        L = cfg.layers
        new = []
        for idx, (w, s) in enumerate(zip(self.layers, state)):
            pos = layer_position(idx, L)
            above = state[idx + 1].h if idx + 1 < L else None
            below = new[idx - 1] if idx else None
            if cfg.arch == "lstm":
                new.append(cells.lstm_step(x if idx == 0 else below.h, s, w, flags))
            elif cfg.arch == "hmrnn":
                if idx == 0:
                    new.append(cells.hmrnn_step(pos, w, flags, x=x, state=s, h_above=above))
                else:
                    new.append(cells.hmrnn_step(pos, w, flags, h_below=below.h, z_below=below.z,
                                                state=s, h_above=above))
            elif pos == "bottom":
                new.append(cells.hmlstm_bottom_step(x, s, above, w, flags))
            elif pos == "middle":
                new.append(cells.hmlstm_middle_step(below.h, below.z, s, above, w, flags))
            else:
                new.append(cells.hmlstm_top_step(below.h, below.z, s, w, flags))
        return new

    def embed(self, char_ids):
        ids = np.asarray(char_ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise ValueError(f"character id outside [0, {self.config.vocab_size})")
        return _ln(embedding(self.params["embed.table"].value, ids), self.params, "embed.ln",
                   self.config.flags.ln_eps)

    def head(self, hs):
        fn = gated_output if self.config.output_head == "gated" else simple_output
        return fn(hs, self.params, self.config.flags.ln_eps)

    def forward_sequence(self, char_ids, state=None):
        """Run ``char_ids`` of shape (batch, T).

        Returns ``(logits, boundaries, state)`` where ``logits`` is a tensor of
        shape (batch, T, vocab) and ``boundaries`` a float array of shape
        (batch, T, boundary_layers) holding z for every non-top layer.
        """
        ids = np.asarray(char_ids)
        if ids.ndim != 2 or ids.shape[1] < 1:
            raise ShapeError(f"char_ids must have shape (batch, T>=1), got {ids.shape}")
        B, T = ids.shape
        if state is None:
            state = self.initial_state(B)
        if len(state) != self.config.layers:
            raise ShapeError(f"state has {len(state)} layers, model has {self.config.layers}")
        emb = self.embed(ids)
        nz = self.config.boundary_layers
        boundaries = np.zeros((B, T, nz), dtype=self.dtype)
        outs = []
        for t in range(T):
            state = self.step(take(emb, (slice(None), t)), state)
            for k in range(nz):
                boundaries[:, t, k] = state[k].z.data[:, 0]
            outs.append(self.head([s.h for s in state]))
        he = reshape(stack(outs, axis=1), (B * T, -1))
        logits = add(matmul(he, self.params["softmax.W"].value), self.params["softmax.b"].value)
        return reshape(logits, (B, T, self.config.vocab_size)), boundaries, state


def detach_state(state):
    return [s.detach() for s in state]


def table2_rows(base=None):
    """The twelve ablation rows as ``(label, ModelConfig, schedule)`` triples."""
    base = base or ModelConfig()
    ln = CellFlags(use_layer_norm=True, slope_alpha=0.5)
    noln = CellFlags(use_layer_norm=False, slope_alpha=0.5)

    def cfg(arch="hmlstm", flags=ln, head="gated"):
        return base.with_(arch=arch, flags=replace(flags, ln_eps=base.flags.ln_eps), output_head=head,
                          ln_on_embeddings=flags.use_layer_norm)

    return [
        ("HMLSTM + Schedule + LN + copylast", cfg(flags=replace(ln, copy_last=True)), True),
        ("HMLSTM", cfg(flags=noln), False),
        ("HMLSTM + Schedule", cfg(flags=noln), True),
        ("HMLSTM + Schedule + LN", cfg(), True),
        ("HMLSTM + Schedule + LN + alpha=0.125", cfg(flags=replace(ln, slope_alpha=0.125)), True),
        ("HMLSTM + Schedule + LN + alpha=0.25", cfg(flags=replace(ln, slope_alpha=0.25)), True),
        ("HMLSTM + Schedule + LN + alpha=1.0", cfg(flags=replace(ln, slope_alpha=1.0)), True),
        ("NoTopDown + Schedule + LN", cfg(flags=replace(ln, no_top_down=True)), True),
        ("SimplerOutput + Schedule + LN", cfg(head="simple"), True),
        ("3-layer LSTM + Schedule + LN", cfg(arch="lstm"), True),
        ("3-layer LSTM + Schedule + LN + SimplerOut", cfg(arch="lstm", head="simple"), True),
        ("HMRNN + Schedule + LN", cfg(arch="hmrnn"), True),
    ]
