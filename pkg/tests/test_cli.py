import os
import xml.etree.ElementTree as ET

import pytest
from hypothesis import given, settings, strategies as st

from landfill.cli import BUILTIN_CASES, CaseConfig, ConfigError, main, parse_config, render_svg, run_case
from landfill.geometry import Regime
from landfill.model import TargetBox

SVG = "{http://www.w3.org/2000/svg}"

CASE_I_TEXT = """\
# same values as the built-in case_I
name = case_I
mu_bar = 1
Ks = 2
Ki = 0.23
a = 0.1
M = 1.3
S1_bar = 0.15
S2_bar = 0.05
"""


def test_builtin_case_I_values():
    c = BUILTIN_CASES["case_I"]
    assert (c.mu_bar, c.Ks, c.Ki, c.a, c.M, c.S1_bar, c.S2_bar) == (1, 2, 0.23, 0.1, 1.3, 0.15, 0.05)
    assert parse_config(CASE_I_TEXT) == c
    assert list(BUILTIN_CASES) == ["case_I", "case_IIa", "case_IIb", "case_IIc", "case_IIIa", "case_IIIb",
                                   "case_IIIc", "case_IVa", "case_IVb"]


def test_missing_ki_is_monod(tmp_path):
    text = "\n".join(ln for ln in CASE_I_TEXT.splitlines() if not ln.startswith("Ki"))
    cfg = parse_config(text)
    assert cfg.Ki is None and cfg.params.growth.is_monod
    rep = run_case(cfg, "classify", out_dir=str(tmp_path))
    assert rep.regime == Regime.NO_SINGULAR.value and rep.landmarks["S2*"] is None


@pytest.mark.parametrize("edit, msg", [
    ("M = -1", "M must be positive"),
    ("colour = red", "unknown key"),
    ("Ks = two", "not a number"),
    ("a = -0.1", "H0"),
    ("S1_bar = 1.3", "not inside D"),
    ("grid.n = 4", "grid.n"),
])
def test_validation_errors(edit, msg):
    key = edit.split("=")[0].strip()
    lines = [ln for ln in CASE_I_TEXT.splitlines() if not ln.startswith(key + " ")] + [edit]
    with pytest.raises(ConfigError, match=msg):
        parse_config("\n".join(lines))


def test_duplicate_and_missing_keys():
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config(CASE_I_TEXT + "a = 0.2\n")
    with pytest.raises(ConfigError, match="missing"):
        parse_config("name = x\n")


pos = st.floats(0.01, 10.0, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(mu_bar=pos, Ks=pos, Ki=st.none() | pos, a=pos, frac=st.floats(0.05, 0.45),
       n=st.none() | st.integers(8, 512), tol=st.none() | st.floats(1e-12, 1e-4))
def test_config_round_trip(mu_bar, Ks, Ki, a, frac, n, tol):
    M = 1.7
    cfg = CaseConfig("rt", mu_bar, Ks, a, M, frac * M, frac * M, Ki, n, tol)
    assert parse_config(cfg.to_text()) == cfg


def test_curves_case_I(tmp_path):
    rep = run_case(BUILTIN_CASES["case_I"], "curves", out_dir=str(tmp_path))
    names = set(os.listdir(tmp_path))
    assert "c0.csv" not in names and "c1.csv" in names
    assert {"sigma2.csv", "xi_star.csv", "singular_arc.csv", "curves.svg"} <= names
    root = ET.parse(tmp_path / "curves.svg").getroot()
    paths = root.findall(f".//{SVG}path")
    csvs = sorted(n[:-4] for n in names if n.endswith(".csv"))
    assert sorted(p.get("data-curve") for p in paths) == csvs
    assert rep.landmarks["S1_bar"] == pytest.approx(0.4947066, abs=1e-6)


def test_curves_are_deterministic(tmp_path):
    d1, d2 = tmp_path / "a", tmp_path / "b"
    for d in (d1, d2):
        run_case(BUILTIN_CASES["case_IIIa"], "curves", out_dir=str(d))
    for name in os.listdir(d1):
        assert (d1 / name).read_bytes() == (d2 / name).read_bytes(), name


def test_svg_with_trajectories_parses():
    curves = {"one": ([0.1, 0.5], [0.2, 0.1]), "two & <three>": ([0.0, 1.0], [1.0, 0.0])}
    text = render_svg(curves, 1.3, TargetBox(0.1, 0.1), title="t", trajectories={"tr": ([0.5, 0.2], [0.3, 0.1])})
    root = ET.fromstring(text.encode())
    assert len(root.findall(f".//{SVG}path")) == 2
    assert len(root.findall(f".//{SVG}polyline")) == 1


def test_simulate_from_z1(tmp_path, capsys):
    rc = main(["simulate", "--case", "case_I", "--start", "0.6,0.05", "--out", str(tmp_path)])
    out = capsys.readouterr().out
    assert rc == 0 and " word B1 " in out
    assert (tmp_path / "trajectory_0.6_0.05.csv").read_text().startswith("t,s1,s2,u\n")


def test_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text(CASE_I_TEXT.replace("M = 1.3", "M = -1"))
    assert main(["classify", "--config", str(bad)]) == 2
    assert main(["classify", "--case", "nope"]) == 2
    assert main(["simulate", "--case", "case_I", "--start", "0.1,0.01", "--out", str(tmp_path)]) == 2
    assert main(["simulate", "--case", "case_I", "--start", "1.0,1.0", "--out", str(tmp_path)]) == 2
    assert main(["simulate", "--case", "case_I", "--out", str(tmp_path)]) == 2
    assert main(["classify"]) == 2
    ok = tmp_path / "ok.cfg"
    ok.write_text(CASE_I_TEXT)
    assert main(["classify", "--config", str(ok), "--out", str(tmp_path / "o")]) == 0
    assert "regime saturated-interior" in capsys.readouterr().out


def test_numerical_failure_exit_code(tmp_path, monkeypatch):
    import landfill.cli as cli
    from landfill.oracle import ConvergenceError

    def boom(*a, **k):
        raise ConvergenceError("no fixed point")

    monkeypatch.setattr(cli, "solve_hjb", boom)
    assert main(["oracle", "--case", "case_I", "--out", str(tmp_path)]) == 3


def test_oracle_subcommand(tmp_path):
    cfg = CaseConfig("small", 1.0, 2.0, 0.1, 1.3, 0.15, 0.05, 0.23, grid_n=32)
    rep = run_case(cfg, "oracle", out_dir=str(tmp_path))
    text = (tmp_path / "value_grid.csv").read_text()
    assert text.startswith("# n1=32 n2=32") and len(text.splitlines()) == 4 + 32 * 32
    assert any("value_grid.csv" in f for f in rep.files)
