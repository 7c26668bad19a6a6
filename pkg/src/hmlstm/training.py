"""Objective, optimizer, learning-rate schedule and the training loop."""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import analysis
from .checkpoint import read_checkpoint, write_checkpoint
from .data import CorpusSplits, Vocabulary, chunks_per_epoch, epoch_batches, epoch_offset
from .model import Model, ModelConfig, derive_rng, detach_state, is_weight
from .cells import LayerState
from .numerics import Tape, Tensor, add, mul, reshape, softmax_cross_entropy, sum_squares

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.002
    batch: int = 64
    seq_len: int = 100
    clip: float = 1.0
    l2: float = 0.0005
    schedule: bool = True
    patience: int = 4
    lr_divisor: float = 50.0
    max_epochs: int = 500
    max_iterations: int | None = None
    carry_state: bool = True
    eval_chunk: int = 100
    valid_chars: int | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not self.clip > 0:
            raise ValueError("clip must be > 0")
        if self.l2 < 0:
            raise ValueError("l2 must be >= 0")
        for name in ("batch", "seq_len", "eval_chunk", "patience", "max_epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


# --- objective -------------------------------------------------------------------

def l2_penalty(parameters, lam):
    total = None
    for p in parameters:
        if p.trainable and is_weight(p.name):
            term = sum_squares(p.value)
            total = term if total is None else add(total, term)
    if total is None:
        return Tensor(0.0)
    return mul(lam, total)


def loss_with_penalty(logits, targets, parameters, lam):
    """Mean cross-entropy (nats) over batch and time plus ``lam`` times the squared weight norm.

    Returns ``(total, cross_entropy)``.
    """
    V = logits.shape[-1]
    ce = softmax_cross_entropy(reshape(logits, (-1, V)), np.asarray(targets).reshape(-1))
    if lam == 0:
        return ce, ce
    return add(ce, l2_penalty(parameters, lam)), ce


def global_norm(grads):
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))


def clip_global_norm(grads, limit):
    """Scale ``grads`` so their joint L2 norm is at most ``limit``; returns ``(grads, norm)``."""
    if not limit > 0:
        raise ValueError("clip limit must be > 0")
    norm = global_norm(grads)
    if norm > limit:
        scale = limit / norm
        grads = [(g * scale).astype(g.dtype) for g in grads]
    return grads, norm


# --- Adam -----------------------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def scalars(self):
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "step": self.step}


def adam_step(params, grads, opt):
    """One bias-corrected Adam update of ``params`` (list of Parameter) in place."""
    opt.step += 1
    t = opt.step
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    for p, g in zip(params, grads):
        m = opt.m.get(p.name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = opt.v[p.name]
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * (g * g)
        opt.m[p.name], opt.v[p.name] = m, v
        update = opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
        p.assign(p.data - update)
    return params, opt


# --- schedule -------------------------------------------------------------------------

class EpochAction(enum.Enum):
    CONTINUE = "continue"
    DIVIDED_LR = "divided_lr"
    STOP = "stop"


@dataclass
class ScheduleState:
    """Validation bookkeeping.

    With ``enabled`` the learning rate is divided after every epoch that does
    not strictly improve on the best validation loss; the next such epoch
    after ``patience`` divisions stops the run.  Without it the rate stays
    fixed and ``patience`` consecutive non-improving epochs stop the run.
    """

    best: float = math.inf
    since_improvement: int = 0
    divisions: int = 0
    patience: int = 4
    divisor: float = 50.0
    enabled: bool = True
    stop_reason: str | None = None

    def to_dict(self):
        d = asdict(self)
        d["best"] = None if math.isinf(self.best) else self.best
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["best"] = math.inf if d["best"] is None else d["best"]
        return cls(**d)


def end_of_epoch(valid_loss, schedule, opt):
    if not math.isfinite(valid_loss):
        schedule.stop_reason = f"non-finite validation loss {valid_loss}"
        logger.error("stopping: %s", schedule.stop_reason)
        return EpochAction.STOP
    if valid_loss < schedule.best:
        schedule.best = valid_loss
        schedule.since_improvement = 0
        return EpochAction.CONTINUE
    schedule.since_improvement += 1
    if schedule.enabled:
        if schedule.divisions >= schedule.patience:
            schedule.stop_reason = f"no improvement after {schedule.divisions} learning-rate divisions"
            return EpochAction.STOP
        opt.lr = opt.lr / schedule.divisor
        schedule.divisions += 1
        return EpochAction.DIVIDED_LR
    if schedule.since_improvement >= schedule.patience:
        schedule.stop_reason = f"no improvement for {schedule.since_improvement} epochs"
        return EpochAction.STOP
    return EpochAction.CONTINUE


# --- training loop ---------------------------------------------------------------

class Diverged(RuntimeError):
    pass


class Trainer:
    """Owns the model, optimizer, schedule and position within the data.

    Everything needed to continue a run exactly (carried recurrent state,
    crop offset, chunk index, RNG state) is part of the checkpoint.
    """

    def __init__(self, model_config, train_config, corpus, model=None):
        if model_config.vocab_size != len(corpus.vocab):
            raise ValueError(f"model vocab_size {model_config.vocab_size} != corpus vocabulary {len(corpus.vocab)}")
        self.model_config = model_config
        self.config = train_config
        self.corpus = corpus
        self.model = model or Model(model_config)
        self.opt = OptimizerState(train_config.lr, train_config.beta1, train_config.beta2, train_config.adam_eps)
        self.schedule = ScheduleState(patience=train_config.patience, divisor=train_config.lr_divisor,
                                      enabled=train_config.schedule)
        self.crop_rng = derive_rng(train_config.seed, "crop")
        self.epoch = 0
        self.iteration = 0
        self.chunk = 0
        self.offset = None
        self.state = None
        self.status = "running"
        self.history = []
        self.iteration_losses = []
        self.divergence = None
        self._epoch_stats = _EpochStats()

    @property
    def params(self):
        return [p for p in self.model.parameters() if p.trainable]

    def valid_ids(self):
        ids = self.corpus.valid
        if self.config.valid_chars is not None:
            ids = ids[:self.config.valid_chars]
        return ids

    # one optimization step
    def train_step(self, x, y):
        cfg = self.config
        if self.state is None or not cfg.carry_state:
            self.state = self.model.initial_state(x.shape[0])
        self.model.zero_grad()
        with Tape() as tape:
            logits, z, new_state = self.model.forward_sequence(x, self.state)
            total, ce = loss_with_penalty(logits, y, self.model.parameters(), cfg.l2)
        loss, penalized = float(ce.data), float(total.data)
        if not math.isfinite(loss):
            raise Diverged(f"non-finite training loss {loss} at iteration {self.iteration}")
        if not math.isfinite(penalized):
            raise Diverged(f"non-finite penalized loss {penalized} at iteration {self.iteration}")
        tape.backward(total)
        params = self.params
        grads, norm = clip_global_norm([p.grad for p in params], cfg.clip)
        if not math.isfinite(norm):
            raise Diverged(f"non-finite gradient norm at iteration {self.iteration}")
        adam_step(params, grads, self.opt)
        self.state = detach_state(new_state)
        self.iteration += 1
        self.iteration_losses.append(loss)
        self._epoch_stats.add(loss, z)
        return loss

    def run(self, max_iterations=None, callbacks=(), out_dir=None):
        """Train until the schedule stops, ``max_epochs``, or an iteration budget.

        ``max_iterations`` counts iterations of this call; the config's
        ``max_iterations`` caps the whole run.
        """
        cfg = self.config
        budget = None if max_iterations is None else self.iteration + max_iterations
        if cfg.max_iterations is not None:
            budget = cfg.max_iterations if budget is None else min(budget, cfg.max_iterations)
        try:
            while self.status == "running":
                if self.offset is None:
                    self.offset = epoch_offset(len(self.corpus.train), cfg.batch, cfg.seq_len, self.crop_rng)
                    self.chunk = 0
                    self.state = None
                    self._epoch_stats = _EpochStats()
                n_chunks = chunks_per_epoch(len(self.corpus.train), cfg.batch, cfg.seq_len)
                batches = epoch_batches(self.corpus.train, cfg.batch, cfg.seq_len, self.offset)
                for k, (x, y) in enumerate(batches):
                    if k < self.chunk:
                        continue
                    if budget is not None and self.iteration >= budget:
                        return self.result()
                    self.train_step(x, y)
                    self.chunk = k + 1
                if self.chunk >= n_chunks:
                    self._finish_epoch(callbacks, out_dir)
        except Diverged as err:
            self.status = "diverged"
            self.divergence = {"iteration": self.iteration, "epoch": self.epoch, "reason": str(err)}
            logger.error("run diverged: %s", err)
            if out_dir is not None:
                self.save(Path(out_dir) / "diverged.hmlb")
        return self.result()

    def _finish_epoch(self, callbacks, out_dir):
        valid_bpc = analysis.evaluate_bpc(self.model, self.valid_ids(), self.config.eval_chunk)
        lr_used = self.opt.lr
        action = end_of_epoch(valid_bpc * math.log(2), self.schedule, self.opt)
        freqs = self._epoch_stats.frequencies()
        record = {"epoch": self.epoch, "iterations": self.iteration, "train_loss": self._epoch_stats.mean_loss(),
                  "valid_bpc": valid_bpc if math.isfinite(valid_bpc) else None, "lr": lr_used,
                  "action": action.value}
        for k, f in enumerate(freqs):
            record[f"z{k + 1}"] = f
        self.history.append(record)
        logger.info(" ".join(f"{k}={v}" for k, v in record.items()))
        self.epoch += 1
        self.offset = None
        if action is EpochAction.STOP:
            self.status = "stopped"
        elif self.epoch >= self.config.max_epochs:
            self.status = "finished"
        if out_dir is not None:
            self.save(Path(out_dir) / "last.hmlb")
            if self.schedule.since_improvement == 0:
                self.save(Path(out_dir) / "best.hmlb")
        for cb in callbacks:
            cb(self, record)

    def result(self):
        return TrainResult(self.model, self.history, self.status, self.iteration, self.divergence,
                           list(self.iteration_losses))

    # --- persistence --------------------------------------------------------------

    def save(self, path):
        tensors = {}
        for p in self.model.parameters():
            tensors[f"param/{p.name}"] = p.data
        for p in self.model.parameters():
            if p.name in self.opt.m:
                tensors[f"adam.m/{p.name}"] = self.opt.m[p.name]
                tensors[f"adam.v/{p.name}"] = self.opt.v[p.name]
        if self.state is not None:
            for idx, s in enumerate(self.state):
                for part, t in zip("hcz", (s.h, s.c, s.z)):
                    if t is not None:
                        tensors[f"state/{idx}/{part}"] = t.data
        meta = {
            "model_config": self.model_config.to_dict(),
            "train_config": asdict(self.config),
            "vocab": self.corpus.vocab.to_list(),
            "optimizer": self.opt.scalars(),
            "schedule": self.schedule.to_dict(),
            "trainer": {"epoch": self.epoch, "iteration": self.iteration, "chunk": self.chunk,
                        "offset": self.offset, "status": self.status,
                        "rng": self.crop_rng.bit_generator.state, "history": self.history,
                        "iteration_losses": self.iteration_losses, "divergence": self.divergence,
                        "epoch_stats": self._epoch_stats.to_dict()},
        }
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        write_checkpoint(path, meta, tensors)

    @classmethod
    def from_checkpoint(cls, path, corpus):
        meta, tensors = read_checkpoint(path)
        model = model_from_checkpoint(meta, tensors)
        if corpus.vocab.to_list() != meta["vocab"]:
            raise ValueError("corpus vocabulary differs from the checkpoint's")
        tr = cls(model.config, TrainConfig(**meta["train_config"]), corpus, model=model)
        o = meta["optimizer"]
        tr.opt = OptimizerState(o["lr"], o["beta1"], o["beta2"], o["eps"], o["step"])
        for name, arr in tensors.items():
            kind, _, rest = name.partition("/")
            if kind == "adam.m":
                tr.opt.m[rest] = arr
            elif kind == "adam.v":
                tr.opt.v[rest] = arr
        tr.schedule = ScheduleState.from_dict(meta["schedule"])
        t = meta["trainer"]
        tr.epoch, tr.iteration, tr.chunk, tr.offset = t["epoch"], t["iteration"], t["chunk"], t["offset"]
        tr.status = t["status"]
        tr.crop_rng.bit_generator.state = t["rng"]
        tr.history = t["history"]
        tr.iteration_losses = t["iteration_losses"]
        tr.divergence = t["divergence"]
        tr._epoch_stats = _EpochStats.from_dict(t["epoch_stats"])
        if any(n.startswith("state/") for n in tensors):
            tr.state = []
            for idx in range(model.config.layers):
                parts = [tensors.get(f"state/{idx}/{p}") for p in "hcz"]
                tr.state.append(LayerState(*(None if a is None else Tensor(a) for a in parts)))
        return tr


def model_from_checkpoint(meta, tensors):
    config = ModelConfig.from_dict(meta["model_config"])
    model = Model(config)
    for p in model.parameters():
        key = f"param/{p.name}"
        if key not in tensors:
            raise ValueError(f"checkpoint lacks parameter {p.name!r}")
        p.assign(tensors[key])
    return model


def load_model(path):
    """Model and vocabulary stored in a checkpoint."""
    meta, tensors = read_checkpoint(path)
    return model_from_checkpoint(meta, tensors), Vocabulary(meta["vocab"])


class _EpochStats:
    def __init__(self, loss_sum=0.0, count=0, z_sum=None, z_count=0):
        self.loss_sum, self.count = loss_sum, count
        self.z_sum, self.z_count = z_sum, z_count

    def add(self, loss, z):
        self.loss_sum += loss
        self.count += 1
        if z.shape[-1]:
            s = z.reshape(-1, z.shape[-1]).sum(axis=0).astype(np.float64)
            self.z_sum = s if self.z_sum is None else self.z_sum + s
            self.z_count += z.shape[0] * z.shape[1]

    def mean_loss(self):
        return self.loss_sum / self.count if self.count else None

    def frequencies(self):
        if self.z_sum is None:
            return []
        return [float(v) for v in self.z_sum / self.z_count]

    def to_dict(self):
        return {"loss_sum": self.loss_sum, "count": self.count,
                "z_sum": None if self.z_sum is None else [float(v) for v in self.z_sum],
                "z_count": self.z_count}

    @classmethod
    def from_dict(cls, d):
        z = d["z_sum"]
        return cls(d["loss_sum"], d["count"], None if z is None else np.array(z), d["z_count"])


@dataclass
class TrainResult:
    model: Model
    history: list
    status: str
    iterations: int
    divergence: dict | None = None
    iteration_losses: list = field(default_factory=list)


def train(model_config, train_config, corpus, callbacks=(), out_dir=None, max_iterations=None):
    """Build a fresh model and train it on ``corpus``."""
    trainer = Trainer(model_config, train_config, corpus)
    return trainer.run(max_iterations=max_iterations, callbacks=callbacks, out_dir=out_dir)
