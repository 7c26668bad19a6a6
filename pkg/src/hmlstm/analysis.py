"""Bits-per-character evaluation and boundary (segmentation) analysis."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import log_softmax, no_grad

LN2 = math.log(2.0)


def evaluate_bpc(model, ids, chunk=100):
    """Average -log2 p(next char) over ``ids`` with batch 1 and carried state.

    Consecutive chunks of ``chunk`` characters are fed in order; the recurrent
    state at the end of one chunk starts the next.  Every character after the
    first is predicted exactly once.
    """
    ids = np.asarray(ids).reshape(-1)
    if ids.size < 2:
        raise ValueError("evaluation needs at least two characters")
    if chunk < 1:
        raise ValueError("chunk must be >= 1")
    n = ids.size - 1
    state = model.initial_state(1)
    nats = 0.0
    with no_grad():
        for start in range(0, n, chunk):
            stop = min(start + chunk, n)
            logits, _, state = model.forward_sequence(ids[None, start:stop], state)
            logp = log_softmax(logits.data[0].astype(np.float64))
            nats -= logp[np.arange(stop - start), ids[start + 1:stop + 1]].sum()
    return float(nats / LN2 / n)


def z_ratio(freq1, freq2):
    """``freq1 / freq2``; ``None`` (undefined) when ``freq2`` is zero."""
    if freq2 == 0:
        return None
    return freq1 / freq2


def format_ratio(r, digits=2):
    return "undefined" if r is None else f"{r:.{digits}f}"


@dataclass
class SegmentationRecord:
    """Boundary decisions of the two lowest boundary layers, one per character."""

    text: str
    z1: np.ndarray
    z2: np.ndarray

    def __post_init__(self):
        self.z1 = np.asarray(self.z1, dtype=np.int8)
        self.z2 = np.asarray(self.z2, dtype=np.int8)
        if not (len(self.text) == len(self.z1) == len(self.z2)):
            raise ValueError(f"length mismatch: text {len(self.text)}, z1 {len(self.z1)}, z2 {len(self.z2)}")
        for z in (self.z1, self.z2):
            if not np.all((z == 0) | (z == 1)):
                raise ValueError("boundary values must be 0 or 1")

    @property
    def freq1(self):
        return float(self.z1.mean()) if len(self.z1) else 0.0

    @property
    def freq2(self):
        return float(self.z2.mean()) if len(self.z2) else 0.0

    @property
    def z_ratio(self):
        return z_ratio(self.freq1, self.freq2)

    def level(self, name):
        if name not in ("z1", "z2"):
            raise ValueError(f"level must be z1 or z2, got {name!r}")
        return getattr(self, name)

    def __eq__(self, other):
        return (isinstance(other, SegmentationRecord) and self.text == other.text
                and np.array_equal(self.z1, other.z1) and np.array_equal(self.z2, other.z2))


def extract_segmentation(model, vocab, text, chunk=100):
    """Run ``text`` through ``model`` (batch 1, carried state) and record z per character."""
    if model.config.boundary_layers < 1:
        raise ValueError(f"{model.config.arch} has no boundary variables to extract")
    ids = vocab.encode(text)
    state = model.initial_state(1)
    zs = []
    with no_grad():
        for start in range(0, len(ids), chunk):
            _, z, state = model.forward_sequence(ids[None, start:start + chunk], state)
            zs.append(z[0])
    z = np.concatenate(zs, axis=0) if zs else np.zeros((0, model.config.boundary_layers))
    z2 = z[:, 1] if z.shape[1] > 1 else np.zeros(len(text))
    return SegmentationRecord(text, z[:, 0].astype(np.int8), z2.astype(np.int8))


@dataclass
class Agreement:
    precision: float | None
    recall: float | None
    f1: float | None
    predicted: int
    gold: int


def boundary_agreement(record, level="z1", tolerance=0):
    """Precision/recall/F1 of boundary positions against space positions.

    A boundary at step ``t`` is matched with a space at position ``t``; with
    ``tolerance=1`` a match within one character either way also counts.
    Undefined quantities (no predictions, no spaces) are ``None``.
    """
    z = record.level(level)
    pred = np.flatnonzero(z == 1)
    gold = np.array([i for i, ch in enumerate(record.text) if ch == " "], dtype=np.int64)

    def near(src, dst):
        if len(src) == 0 or len(dst) == 0:
            return 0
        return int(sum(np.any(np.abs(dst - s) <= tolerance) for s in src))

    precision = near(pred, gold) / len(pred) if len(pred) else None
    recall = near(gold, pred) / len(gold) if len(gold) else None
    if precision is None or recall is None:
        f1 = None
    elif precision + recall == 0:
        f1 = 0.0
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return Agreement(precision, recall, f1, len(pred), len(gold))


# --- rendering ---------------------------------------------------------------------

_ESC = {"\\": "\\\\", "\t": "\\t", "\n": "\\n", "\r": "\\r"}
_UNESC = {v: k for k, v in _ESC.items()}


def _escape(ch):
    return _ESC.get(ch, ch)


def _unescape(s):
    return _UNESC.get(s, s)


def to_tsv(record):
    """One ``char<TAB>z1<TAB>z2`` line per character; tab, newline, CR and backslash escaped."""
    return "".join(f"{_escape(ch)}\t{a}\t{b}\n" for ch, a, b in zip(record.text, record.z1, record.z2))


def parse_tsv(text):
    chars, z1, z2 = [], [], []
    for lineno, line in enumerate(text.split("\n"), 1):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"line {lineno}: expected 3 tab-separated fields")
        chars.append(_unescape(parts[0]))
        z1.append(int(parts[1]))
        z2.append(int(parts[2]))
    return SegmentationRecord("".join(chars), z1, z2)


def to_pgm(record):
    """Binary PGM (P5): width = characters, height 2 (z1 row over z2 row), black where z = 1."""
    rows = np.stack([record.z1, record.z2]).astype(np.uint8)
    pixels = np.where(rows == 1, 0, 255).astype(np.uint8)
    header = f"P5\n{len(record.text)} 2\n255\n".encode("ascii")
    return header + pixels.tobytes()


def read_pgm(data):
    """Pixel array of a P5 file produced by :func:`to_pgm`."""
    magic, dims, maxval, rest = data.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise ValueError("not an 8-bit binary PGM")
    w, h = map(int, dims.split())
    return np.frombuffer(rest, dtype=np.uint8, count=w * h).reshape(h, w)


def render_segmentation(record, path, format=None):
    """Write ``record`` as ``tsv`` or ``pgm`` (inferred from the suffix when not given)."""
    path = Path(path)
    format = format or path.suffix.lstrip(".").lower()
    if format == "tsv":
        path.write_text(to_tsv(record), encoding="utf-8")
    elif format == "pgm":
        path.write_bytes(to_pgm(record))
    else:
        raise ValueError(f"unknown segmentation format {format!r}")
    return path


# --- ablation summary -------------------------------------------------------------

TABLE_COLUMNS = ("", "BPC", "Iter.", "z1", "z2", "z-ratio")


def _cell(v, digits=2):
    if v is None:
        return "N/A"
    if isinstance(v, float):
        return f"{v:.{digits}f}"
    return str(v)


def format_table(rows):
    """Markdown table with the ablation columns.

    ``rows`` are dicts with keys ``label, bpc, iterations, z1, z2`` (``z1``/``z2``
    ``None`` for architectures without boundaries).
    """
    lines = ["| " + " | ".join(TABLE_COLUMNS) + " |", "|" + "---|" * len(TABLE_COLUMNS)]
    for r in rows:
        if r.get("z1") is None:
            ratio = "N/A"
        else:
            ratio = format_ratio(z_ratio(r["z1"], r["z2"]))
        bpc = "diverged" if r.get("bpc") is None else f"{r['bpc']:.4f}"
        lines.append("| " + " | ".join([r["label"], bpc, str(r["iterations"]), _cell(r.get("z1")),
                                         _cell(r.get("z2")), ratio]) + " |")
    return "\n".join(lines)
