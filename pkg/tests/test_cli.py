import os
from importlib import resources

import pytest
from hypothesis import given, settings, strategies as st

from noisescatter.cli import main
from noisescatter.config import ConfigError, dump_config, load_config, parse_config
from noisescatter.recovery import ExperimentConfig

PRESETS = resources.files("noisescatter") / "presets"


@pytest.mark.parametrize("name", ["bump.cfg", "euclidean.cfg"])
def test_presets_parse(name):
    cfg = load_config(PRESETS / name)
    assert cfg.exit_exclusion is None and len(cfg.seeds) == 64


def test_dump_roundtrip():
    cfg = ExperimentConfig(amplitude=0.1, seeds=(1, 5, 9), exit_exclusion=0.7)
    assert parse_config(dump_config(cfg)) == cfg


@settings(max_examples=25, deadline=None)
@given(st.floats(-0.5, 1.0), st.integers(1, 40), st.lists(st.integers(0, 10 ** 6), min_size=1, max_size=5))
def test_dump_roundtrip_property(amp, n_s, seeds):
    cfg = ExperimentConfig(amplitude=amp, n_s=n_s, seeds=tuple(seeds))
    assert parse_config(dump_config(cfg)) == cfg


def test_comments_range_and_auto():
    cfg = parse_config("# header\namplitude = 0.3  # trailing\n\nseeds = range 2 6\nexit_exclusion = auto\n")
    assert cfg.amplitude == 0.3 and cfg.seeds == (2, 3, 4, 5) and cfg.exit_exclusion is None


@pytest.mark.parametrize("text, line, fragment", [
    ("amplitude = 0.2\nbogus = 1\n", 2, "unknown key"),
    ("amplitude 0.2\n", 1, "expected 'key = value'"),
    ("n_s = 4\n\nn_s = 5\n", 3, "duplicate key"),
    ("h =\n", 1, "missing value"),
    ("# c\nn_s = four\n", 2, "bad value"),
    ("amplitude = 0.2\neps_ladder = 0.08\n", 2, "eps_ladder"),
    ("n_pgb = 0\n", 1, "n_pgb"),
])
def test_config_errors_carry_line(text, line, fragment):
    with pytest.raises(ConfigError) as info:
        parse_config(text, "x.cfg")
    assert info.value.lineno == line and fragment in str(info.value)
    assert str(info.value).startswith(f"x.cfg:{line}:")


def _cfg(tmp_path, extra=""):
    text = (PRESETS / "bump.cfg").read_text() if not extra else extra
    p = tmp_path / "run.cfg"
    p.write_text(text)
    return str(p)


def test_exit_config_error(tmp_path, capsys):
    code = main(["lemmas", _cfg(tmp_path, "amplitude = 0.2\nwhat\n"), "--out", str(tmp_path / "o")])
    assert code == 4 and "run.cfg:2:" in capsys.readouterr().err
    assert main(["lemmas", str(tmp_path / "missing.cfg"), "--out", str(tmp_path / "o")]) == 4


def test_exit_bad_override(tmp_path):
    assert main(["lemmas", _cfg(tmp_path), "--set", "nope=1", "--out", str(tmp_path / "o")]) == 4
    assert main(["correlate", _cfg(tmp_path), "--pgb", "99", "--out", str(tmp_path / "o")]) == 4


def test_exit_usage_error(tmp_path):
    with pytest.raises(SystemExit) as info:
        main(["frobnicate", _cfg(tmp_path)])
    assert info.value.code == 4


def test_lemmas_ok_and_deterministic(tmp_path):
    args = ["lemmas", _cfg(tmp_path), "--quiet", "--no-figures", "--set", "lemma_seeds=1500"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "covariance.csv").read_text()
    assert a == (tmp_path / "b" / "covariance.csv").read_text()
    assert "lemma_seeds = 1500" in (tmp_path / "a" / "config_used.cfg").read_text()
    assert os.path.exists(tmp_path / "a" / "summary.txt")


def test_lemmas_negative_control(tmp_path):
    code = main(["lemmas", _cfg(tmp_path), "--quiet", "--set", "lemma_seeds=1500", "--set", "rng_bias=0.1",
                 "--out", str(tmp_path / "o")])
    assert code == 3


def test_check_assumptions_ok(tmp_path):
    assert main(["check-assumptions", _cfg(tmp_path), "--quiet", "--out", str(tmp_path / "o")]) == 0
    assert "A1,1" in (tmp_path / "o" / "assumptions.csv").read_text()


@pytest.mark.slow
def test_check_assumptions_trapping_lens(tmp_path):
    code = main(["check-assumptions", _cfg(tmp_path), "--quiet", "--set", "amplitude=10",
                 "--set", "bump_center=0,0", "--set", "width=0.2", "--out", str(tmp_path / "o")])
    assert code == 2
    assert "A1,0" in (tmp_path / "o" / "assumptions.csv").read_text()
