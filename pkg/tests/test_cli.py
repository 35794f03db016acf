import subprocess
import sys

import pytest
from hypothesis import given, settings, strategies as st

from moranwf.cli import (
    SEED_ENV,
    ConfigError,
    build_config,
    csv_text,
    emit_csv,
    main,
    parse_csv,
    read_config_file,
)

SMALL_RATE = ["--s_prime", "1", "--m_prime", "0.2", "--x0", "0.7", "--t", "0.2",
              "--J_list", "20,30,40,50", "--replicates", "2000"]


def run(tmp_path, *argv, name="out.csv"):
    out = tmp_path / name
    code = main([*argv, "--output", str(out)])
    return code, out


# --- CSV ---------------------------------------------------------------------

def test_empty_rows_give_header_only(tmp_path):
    path = tmp_path / "e.csv"
    emit_csv([], ("a", "b"), str(path))
    assert path.read_bytes() == b"a,b\n"


def test_integers_have_no_decimal_point():
    assert csv_text([(1, 20, -3)], ("a", "b", "c")) == "a,b,c\n1,20,-3\n"


def test_float_precision_and_line_endings():
    text = csv_text([(0.1, 1.0, 1e-300)], ("a", "b", "c"))
    assert text == "a,b,c\n0.10000000000000001,1,1e-300\n"
    assert "\r" not in text


def test_arity_mismatch_rejected():
    with pytest.raises(ValueError):
        csv_text([(1, 2)], ("a",))


cells = st.one_of(st.integers(-10**12, 10**12),
                  st.floats(allow_nan=False, allow_infinity=False).filter(lambda v: v != int(v) if abs(v) < 1e15 else False),
                  st.sampled_from(["slope", "indeterminate", "rss"]))


@given(st.lists(st.tuples(cells, cells, cells), max_size=5))
@settings(max_examples=200)
def test_csv_round_trip(rows):
    schema = ("a", "b", "c")
    assert parse_csv(csv_text(rows, schema)) == (schema, rows)


# --- configuration ----------------------------------------------------------------

def test_config_file_and_flag_override(tmp_path):
    cfg_file = tmp_path / "c.cfg"
    cfg_file.write_text("# neutral\nJ = 10\nx0 = 0.3  # comment\nseed=5\n")
    cfg = build_config("moments", read_config_file(str(cfg_file)), {"J": "20"})
    assert cfg.J == 20 and cfg.x0 == 0.3 and cfg.seed == 5


def test_unknown_key_is_config_error(tmp_path):
    cfg_file = tmp_path / "c.cfg"
    cfg_file.write_text("colour = blue\n")
    with pytest.raises(ConfigError):
        read_config_file(str(cfg_file))
    code, out = run(tmp_path, "moments", "--config", str(cfg_file))
    assert code == 2 and not out.exists()


def test_seed_from_environment(monkeypatch):
    monkeypatch.setenv(SEED_ENV, "42")
    assert build_config("rate", {}, {}).seed == 42
    assert build_config("rate", {"seed": "3"}, {}).seed == 3
    monkeypatch.delenv(SEED_ENV)
    assert build_config("rate", {}, {}).seed == 0


@pytest.mark.parametrize("argv", [
    ["moments", "--p", "1.5"],
    ["moments", "--J", "ten"],
    ["moments", "--x0", "0.33", "--J", "10"],
    ["rate", "--J_list", "100,50"],
    ["jump", "--model", "wf"],
    ["simulate", "--bogus", "1"],
    ["frobnicate"],
])
def test_invalid_config_exits_2_without_output(tmp_path, argv, capsys):
    code, out = run(tmp_path, *argv)
    assert code == 2 and not out.exists()
    err = capsys.readouterr().err.strip().splitlines()
    if argv[0] == "frobnicate" or "--bogus" in argv:
        assert err[0].startswith("usage:")  # argparse rejection
    else:
        assert len(err) == 1 and err[0].startswith("error: config:")


def test_nonconvergence_exits_3(tmp_path, capsys):
    code, out = run(tmp_path, "pde", "--N", "201", "--f", "0,0,0,1", "--s_prime", "5")
    assert code == 3 and not out.exists()
    assert capsys.readouterr().err.startswith("error: nonconvergence:")


# --- commands --------------------------------------------------------------------

def test_moments_neutral_example(tmp_path):
    code, out = run(tmp_path, "moments", "--J", "10", "--x0", "0.5")
    assert code == 0
    schema, rows = parse_csv(out.read_text())
    row = dict(zip(schema, rows[0]))
    assert row["J"] == 10 and row["m1"] == 0 and row["m2"] == pytest.approx(0.005, abs=1e-18)
    assert row["max_abs_diff"] < 1e-14


def test_moments_wf_has_five_orders(tmp_path):
    code, out = run(tmp_path, "moments", "--model", "wf", "--J", "20", "--x0", "0.3",
                    "--s_prime", "1", "--m_prime", "0.2")
    schema, rows = parse_csv(out.read_text())
    assert code == 0 and "m5" in schema and rows[0][-1] < 1e-14


def test_simulate_paths(tmp_path):
    for extra in ([], ["--model", "wf"], ["--selection", "jump", "--s0", "1"],
                  ["--selection", "diffusion", "--s0", "0.5"]):
        code, out = run(tmp_path, "simulate", "--J", "20", "--steps", "50", "--s_prime", "1",
                        "--m_prime", "0.2", *extra)
        schema, rows = parse_csv(out.read_text())
        assert code == 0 and schema == ("step", "t", "count", "x", "s") and len(rows) == 51
        assert all(0 <= r[2] <= 20 and r[3] == r[2] / 20 for r in rows)


def test_defect_and_pde_commands(tmp_path):
    code, out = run(tmp_path, "defect", "--J_list", "20,40", "--f", "0,0,0,1",
                    "--s_prime", "1", "--m_prime", "0.2")
    schema, rows = parse_csv(out.read_text())
    assert code == 0 and len(rows) == 2 and rows[1][4] < rows[0][4]
    code, out = run(tmp_path, "pde", "--m_prime", "1", "--N", "201", "--dt", "1e-3", "--t", "0.5")
    schema, rows = parse_csv(out.read_text())
    assert code == 0 and schema == ("t", "x", "phi") and len(rows) == 201


def test_rate_output_and_determinism(tmp_path):
    code, a = run(tmp_path, "rate", *SMALL_RATE, "--seed", "9", name="a.csv")
    code_b, b = run(tmp_path, "rate", *SMALL_RATE, "--seed", "9", name="b.csv")
    assert code == code_b == 0
    assert a.read_bytes() == b.read_bytes()
    lines = a.read_text().splitlines()
    assert lines[0] == "J,n,t,error,stderr,replicates,seed"
    schema, rows = parse_csv(a.read_text())
    assert [r[0] for r in rows[:4]] == [20, 30, 40, 50]
    assert rows[0][1] == 80 and rows[0][5] == 2000 and rows[0][6] == 9
    assert rows[-1][0] == "slope" and rows[-1][2] == "intercept" and rows[-1][4] == "rss"


def test_jump_and_diffsel_commands(tmp_path):
    code, out = run(tmp_path, "jump", "--J_list", "20,30,40", "--m_prime", "0.2", "--x0", "0.7",
                    "--t", "0.2", "--s0", "1", "--replicates", "2000")
    schema, rows = parse_csv(out.read_text())
    assert code == 0 and len(rows) == 4 and rows[-1][0] == "slope"
    code, out = run(tmp_path, "diffsel", "--J_list", "50,100", "--m_prime", "0.2", "--x0", "0.5",
                    "--s0", "0.5", "--samples", "10000")
    schema, rows = parse_csv(out.read_text())
    assert code == 0 and len(rows) == 2
    row = dict(zip(schema, rows[0]))
    assert abs(row["mean"] - row["enum_mean"]) < 1e-14 and abs(row["var"] - row["enum_var"]) < 1e-14


def test_module_entry_point_uses_env_seed(tmp_path):
    env = {"PATH": "/usr/bin:/bin", SEED_ENV: "7"}
    args = [sys.executable, "-m", "moranwf", "simulate", "--J", "10", "--steps", "20",
            "--m_prime", "1"]
    a = subprocess.run(args, capture_output=True, env=env, check=True).stdout
    b = subprocess.run(args + ["--seed", "7"], capture_output=True, env=env, check=True).stdout
    c = subprocess.run(args + ["--seed", "8"], capture_output=True, env=env, check=True).stdout
    assert a == b != c
    assert a.startswith(b"step,t,count,x,s\n")
