"""Command-line driver: ``hmlstm {train,eval,segment,gradcheck,ablate}``.

Run configurations are plain text, one ``key = value`` per line, ``#`` starts
a comment.  Every effective value, explicit or default, is echoed to the run
log as a ``key=value`` record.  Log verbosity comes from ``HMLSTM_LOG``.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import analysis, data, gradcheck
from .cells import CellFlags
from .checkpoint import CheckpointError
from .model import ModelConfig, table2_rows
from .training import TrainConfig, Trainer, load_model

log = logging.getLogger("hmlstm")


class ConfigError(ValueError):
    pass


def _bool(s):
    v = s.strip().lower()
    if v in ("true", "yes", "on", "1"):
        return True
    if v in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt_int(s):
    return None if s.strip().lower() in ("none", "") else int(s)


# key -> (section, field, parser, default)
_MODEL = {f.name: f.default for f in dataclasses.fields(ModelConfig) if f.name not in ("flags", "vocab_size")}
_FLAGS = {f.name: f.default for f in dataclasses.fields(CellFlags)}
_TRAIN = {f.name: f.default for f in dataclasses.fields(TrainConfig)}
_PARSERS = {bool: _bool, int: int, float: float, str: str}
_RUN = {"name": "", "data_path": "", "train_path": "", "valid_path": "", "test_path": "",
        "data_mode": "raw", "synthetic_chars": 500_000, "output_dir": "runs/default"}
_OPTIONAL_INT = {"max_iterations", "valid_chars"}


def _parser_for(key, default):
    if key in _OPTIONAL_INT:
        return _opt_int
    return _PARSERS[type(default)]


KEYS = {}
for _k, _d in _MODEL.items():
    KEYS[_k] = ("model", _d)
for _k, _d in _FLAGS.items():
    KEYS[_k] = ("flags", _d)
for _k, _d in _TRAIN.items():
    KEYS[_k] = ("train", _d)
for _k, _d in _RUN.items():
    KEYS[_k] = ("run", _d)


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    name: str = ""
    data_path: str = ""
    train_path: str = ""
    valid_path: str = ""
    test_path: str = ""
    data_mode: str = "raw"
    synthetic_chars: int = 500_000
    output_dir: str = "runs/default"
    sources: dict = field(default_factory=dict)

    @property
    def seed(self):
        return self.train.seed

    def effective(self):
        """``(key, value, source)`` for every configuration key, in a fixed order."""
        out = []
        for key, (section, _) in KEYS.items():
            if section == "model":
                v = getattr(self.model, key)
            elif section == "flags":
                v = getattr(self.model.flags, key)
            elif section == "train":
                v = getattr(self.train, key)
            else:
                v = getattr(self, key)
            out.append((key, v, self.sources.get(key, "default")))
        return out

    def load_corpus(self):
        if self.data_mode == "synthetic":
            return data.corpus_from_text(data.synthetic_text(self.synthetic_chars, seed=self.seed))
        if self.train_path:
            paths = [self.train_path, self.valid_path, self.test_path]
            if not all(paths):
                raise ConfigError("train_path, valid_path and test_path must be given together")
        elif self.data_path:
            paths = self.data_path
        else:
            raise ConfigError("no data: set data_path, train/valid/test_path, or data_mode = synthetic")
        return data.load_corpus(paths, self.data_mode)


def parse_config_text(text, origin="<config>"):
    values, lines = {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{origin}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{origin}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = _parser_for(key, KEYS[key][1])(value)
        except ValueError as err:
            raise ConfigError(f"{origin}:{lineno}: bad value for {key!r}: {err}") from None
        lines[key] = lineno
    return build_run_config(values, lines, origin)


def build_run_config(values, lines=None, origin="<config>"):
    lines = lines or {}
    sections = {"model": {}, "flags": {}, "train": {}, "run": {}}
    for key, v in values.items():
        sections[KEYS[key][0]][key] = v
    if "seed" in values:
        sections["model"]["seed"] = values["seed"]
    if sections["run"].get("data_mode", "raw") not in ("raw", "ptb_char", "text8", "synthetic"):
        raise ConfigError(f"{origin}:{lines.get('data_mode', 0)}: data_mode must be raw, ptb_char, text8 or synthetic")

    def build(cls, kw, section):
        try:
            return cls(**kw)
        except ValueError as err:
            bad = [k for k in kw if k in str(err)]
            where = lines.get(bad[0]) if bad else None
            loc = f"{origin}:{where}" if where else origin
            raise ConfigError(f"{loc}: {err}") from None

    flags = build(CellFlags, sections["flags"], "flags")
    # vocab_size is filled in once the corpus is loaded
    model = build(ModelConfig, dict(sections["model"], flags=flags, vocab_size=1), "model")
    train = build(TrainConfig, sections["train"], "train")
    sources = {k: "explicit" for k in values}
    return RunConfig(model=model, train=train, sources=sources, **sections["run"])


def parse_config(path):
    """Read a run configuration file; errors name the offending line."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as err:
        raise ConfigError(f"{path}: {err.strerror}") from None
    return parse_config_text(text, str(path))


def format_config(run, keys=None):
    """Serialize back to ``key = value`` lines (all keys unless ``keys`` is given)."""
    out = []
    for key, v, _ in run.effective():
        if keys is not None and key not in keys:
            continue
        out.append(f"{key} = {'none' if v is None else v}")
    return "\n".join(out) + "\n"


# --- run log --------------------------------------------------------------------------

class RunLog:
    """Line-oriented ``key=value`` records to stdout and optionally a file."""

    def __init__(self, path=None, stream=None):
        self.stream = stream or sys.stdout
        self.file = open(path, "w", encoding="utf-8") if path else None

    def record(self, kind, **fields):
        line = " ".join([f"event={kind}"] + [f"{k}={_fmt(v)}" for k, v in fields.items()])
        print(line, file=self.stream)
        if self.file:
            self.file.write(line + "\n")
            self.file.flush()

    def close(self):
        if self.file:
            self.file.close()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return "none"
    s = str(v)
    return json.dumps(s) if (" " in s or not s) else s


def _log_config(runlog, run):
    for key, v, source in run.effective():
        runlog.record("config", key=key, value=v, source=source)


# --- subcommands ----------------------------------------------------------------------

def cmd_train(args):
    run = parse_config(args.config)
    out = Path(args.out or run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    runlog = RunLog(out / "run.log")
    try:
        _log_config(runlog, run)
        corpus = run.load_corpus()
        if args.resume:
            trainer = Trainer.from_checkpoint(args.resume, corpus)
        else:
            trainer = Trainer(run.model.with_(vocab_size=len(corpus.vocab)), run.train, corpus)
        runlog.record("data", vocab=len(corpus.vocab), train=len(corpus.train), valid=len(corpus.valid),
                      test=len(corpus.test))
        result = trainer.run(max_iterations=args.max_iterations,
                             callbacks=[lambda tr, rec: runlog.record("epoch", **rec)], out_dir=out)
        trainer.save(out / "last.hmlb")
        (out / "history.json").write_text(json.dumps(result.history, indent=1))
        runlog.record("done", status=result.status, iterations=result.iterations)
        if result.divergence:
            runlog.record("divergence", **result.divergence)
    finally:
        runlog.close()
    return 0


def cmd_eval(args):
    model, vocab = load_model(args.checkpoint)
    text = Path(args.data).read_text(encoding="utf-8")
    bpc = analysis.evaluate_bpc(model, vocab.encode(text), args.chunk)
    print(f"bpc={bpc:.4f}")
    return 0


def cmd_segment(args):
    model, vocab = load_model(args.checkpoint)
    if args.text is not None:
        text = args.text
    else:
        text = Path(args.text_file).read_text(encoding="utf-8")
    record = analysis.extract_segmentation(model, vocab, text)
    formats = ("tsv", "pgm") if args.format == "both" else (args.format,)
    for fmt in formats:
        path = analysis.render_segmentation(record, f"{args.out}.{fmt}", fmt)
        print(f"wrote={path}")
    print(f"z1={record.freq1:.4f} z2={record.freq2:.4f} z_ratio={analysis.format_ratio(record.z_ratio)}")
    return 0


def cmd_gradcheck(args):
    results = gradcheck.gradient_suite(seed=args.seed)
    ok = True
    for name, err in results.items():
        passed = err < args.tol
        ok &= passed
        print(f"{name:32s} max_rel_err={err:.3e} {'ok' if passed else 'FAIL'}")
    ste = gradcheck.straight_through_is_identity(args.seed)
    print(f"{'straight_through_identity':32s} {'ok' if ste else 'FAIL'}")
    return 0 if ok and ste else 1


def run_ablation_config(path, out_root=None, max_iterations=None):
    """Train one configuration and summarize it as a table row."""
    run = parse_config(path)
    label = run.name or Path(path).stem
    corpus = run.load_corpus()
    trainer = Trainer(run.model.with_(vocab_size=len(corpus.vocab)), run.train, corpus)
    out = Path(out_root) / Path(path).stem if out_root else None
    result = trainer.run(max_iterations=max_iterations, out_dir=out)
    row = {"label": label, "iterations": result.iterations, "status": result.status, "z1": None, "z2": None}
    if result.status == "diverged":
        row["bpc"] = None
    else:
        row["bpc"] = analysis.evaluate_bpc(result.model, corpus.test, run.train.eval_chunk)
    if result.model.config.boundary_layers:
        rec = analysis.extract_segmentation(result.model, corpus.vocab, corpus.vocab.decode(corpus.test))
        row["z1"], row["z2"] = rec.freq1, rec.freq2
    return row


def cmd_ablate(args):
    paths = sorted(Path(args.configs).glob("*.cfg"))
    if not paths:
        print(f"error: no *.cfg files in {args.configs}", file=sys.stderr)
        return 1
    if args.jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(args.jobs) as pool:
            rows = list(pool.map(run_ablation_config, paths, [args.out] * len(paths),
                                 [args.max_iterations] * len(paths)))
    else:
        rows = [run_ablation_config(p, args.out, args.max_iterations) for p in paths]
    table = analysis.format_table(rows)
    print(table)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "summary.md").write_text(table + "\n")
    return 0


def write_table2_configs(directory, base_values):
    """Write one ``.cfg`` per ablation row, overlaying the row's factors on ``base_values``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    base_run = build_run_config(base_values)
    written = []
    for idx, (label, cfg, schedule) in enumerate(table2_rows(base_run.model), 1):
        values = dict(base_values)
        values.update(name=label, arch=cfg.arch, output_head=cfg.output_head, ln_on_embeddings=cfg.ln_on_embeddings,
                      schedule=schedule, **dataclasses.asdict(cfg.flags))
        values["output_dir"] = str(Path(base_values.get("output_dir", "runs")) / f"row{idx:02d}")
        run = build_run_config(values)
        path = directory / f"row{idx:02d}.cfg"
        path.write_text(f"# {label}\n" + format_config(run, keys=set(values)))
        written.append(path)
    return written


def build_parser():
    p = argparse.ArgumentParser(prog="hmlstm", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a run configuration")
    t.add_argument("--config", required=True)
    t.add_argument("--out", help="output directory (default: output_dir from the config)")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--max-iterations", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="bits per character of a text file")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--chunk", type=int, default=100)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("segment", help="write boundary decisions for a text")
    s.add_argument("--checkpoint", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--text")
    g.add_argument("--text-file")
    s.add_argument("--out", required=True, help="output path prefix")
    s.add_argument("--format", choices=("tsv", "pgm", "both"), default="both")
    s.set_defaults(func=cmd_segment)

    c = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--tol", type=float, default=1e-4)
    c.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablate", help="train every *.cfg in a directory and tabulate")
    a.add_argument("configs")
    a.add_argument("--out")
    a.add_argument("--max-iterations", type=int)
    a.add_argument("--jobs", type=int, default=1)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    logging.basicConfig(level=os.environ.get("HMLSTM_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (OSError, CheckpointError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
