import re
from pathlib import Path

import pytest

from hmlstm.cli import ConfigError, main, parse_config, parse_config_text, write_table2_configs

TINY = """\
arch = hmlstm
units = 8
embed_dim = 5
output_dim = 6
data_mode = synthetic
synthetic_chars = 3000
batch = 4
seq_len = 10
valid_chars = 100
max_iterations = 6
seed = 3
"""


def tiny_cfg(tmp_path, text=TINY, name="run.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_parse_minimal_config():
    run = parse_config_text("arch = hmlstm\nunits = 512")
    assert run.model.arch == "hmlstm" and run.model.units == 512


def test_comments_and_blank_lines_are_ignored():
    run = parse_config_text("# header\n\nunits = 16  # trailing\n")
    assert run.model.units == 16


@pytest.mark.parametrize("text, line, pattern", [
    ("units = 8\nslope_alpha = 0", 2, "slope_alpha"),
    ("units = 8\n\nwibble = 3", 3, "unknown key"),
    ("units = eight", 1, "bad value"),
    ("units = 8\nunits = 9", 2, "duplicate"),
    ("just words", 1, "key = value"),
])
def test_config_errors_name_the_line(text, line, pattern):
    with pytest.raises(ConfigError, match=rf":{line}:.*{pattern}"):
        parse_config_text(text)


def test_omitted_seq_len_defaults_and_is_logged(tmp_path, capsys):
    cfg = tiny_cfg(tmp_path, TINY.replace("seq_len = 10\n", ""))
    assert parse_config_text(cfg.read_text()).train.seq_len == 100
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o"), "--max-iterations", "1"]) == 0
    log = (tmp_path / "o" / "run.log").read_text()
    assert "event=config key=seq_len value=100 source=default" in log
    assert "event=config key=units value=8 source=explicit" in log


def train_tiny(tmp_path, name="o"):
    out = tmp_path / name
    assert main(["train", "--config", str(tiny_cfg(tmp_path)), "--out", str(out)]) == 0
    return out


def test_train_writes_checkpoints_and_history(tmp_path):
    out = train_tiny(tmp_path)
    for f in ("last.hmlb", "history.json", "run.log"):
        assert (out / f).exists()
    assert "event=done status=" in (out / "run.log").read_text()


def test_same_config_same_run_log(tmp_path):
    a = (train_tiny(tmp_path, "a") / "run.log").read_text()
    b = (train_tiny(tmp_path, "b") / "run.log").read_text()
    assert a == b


def test_eval_prints_one_bpc_line(tmp_path, capsys):
    out = train_tiny(tmp_path)
    (tmp_path / "test.txt").write_text("Kato ri sen malu. Deon pi sa!")
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(out / "last.hmlb"), "--data", str(tmp_path / "test.txt")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 1 and re.fullmatch(r"bpc=\d+\.\d{4}", lines[0])


def test_segment_writes_tsv_and_pgm(tmp_path, capsys):
    out = train_tiny(tmp_path)
    assert main(["segment", "--checkpoint", str(out / "last.hmlb"), "--text", "ka to ri", "--out",
                 str(tmp_path / "seg")]) == 0
    assert (tmp_path / "seg.tsv").read_text().count("\n") >= 8
    assert (tmp_path / "seg.pgm").read_bytes().startswith(b"P5\n8 2\n255\n")
    assert "z_ratio=" in capsys.readouterr().out


def test_gradcheck_passes(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out
    errs = [float(m) for m in re.findall(r"max_rel_err=(\S+)", out)]
    assert errs and max(errs) < 1e-4


def test_ablate_produces_twelve_row_table(tmp_path, capsys):
    typed = parse_config_text(TINY)
    values = {k: v for k, v, src in typed.effective() if src == "explicit"}
    values["max_iterations"] = 2
    paths = write_table2_configs(tmp_path / "cfgs", values)
    assert len(paths) == 12
    capsys.readouterr()
    assert main(["ablate", str(tmp_path / "cfgs"), "--out", str(tmp_path / "abl")]) == 0
    table = capsys.readouterr().out.strip().splitlines()
    assert table[0] == "|  | BPC | Iter. | z1 | z2 | z-ratio |"
    assert len(table) == 2 + 12
    assert (tmp_path / "abl" / "summary.md").exists()


def test_usage_errors_exit_2(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["bogus"])
    assert exc.value.code == 2
    assert main(["train", "--config", str(tiny_cfg(tmp_path, "units = 0\n"))]) == 2
    assert main(["train", "--config", str(tmp_path / "missing.cfg")]) == 2


def test_runtime_failures_exit_1(tmp_path, capsys):
    (tmp_path / "t.txt").write_text("abc")
    assert main(["eval", "--checkpoint", str(tmp_path / "none.hmlb"), "--data", str(tmp_path / "t.txt")]) == 1
    (tmp_path / "junk.hmlb").write_bytes(b"not a checkpoint")
    assert main(["eval", "--checkpoint", str(tmp_path / "junk.hmlb"), "--data", str(tmp_path / "t.txt")]) == 1
    assert "error:" in capsys.readouterr().err


@pytest.mark.parametrize("subdir", ["table2", "desk"])
def test_shipped_configs_parse(subdir):
    paths = sorted((Path(__file__).parent.parent / "configs" / subdir).glob("*.cfg"))
    runs = [parse_config(p) for p in paths]
    assert len(runs) == 12 and len({r.name for r in runs}) == 12
