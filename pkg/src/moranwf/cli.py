"""Command-line front end: ``moranwf <command> [--config FILE] [--key value ...]``.

Configuration is a flat ``key = value`` file (``#`` starts a comment);
flags override file values.  The default seed comes from the ``MORANWF_SEED``
environment variable when neither the file nor a flag sets one.  Every
command writes one CSV (``output``, default stdout).

Exit codes: 0 success, 2 configuration error, 3 numerical non-convergence.
"""
from __future__ import annotations

import argparse
import csv
import io
import math
import os
import sys
from dataclasses import dataclass

import numpy as np
from scipy.stats import binom

from .diffusion import UnconvergedError, bk_solve
from .environment import (
    DiffusionSelectionSpec,
    JumpSelectionSpec,
    SpecError,
    coupled_diffusion_path,
    coupled_moments,
    coupled_moments_enumerated,
    coupled_moran_path,
    cross_moment_estimate,
    moran_path,
)
from .generator import TestFunction, gamma_moran, gamma_wf, one_step_defect
from .harness import (
    CSV_SCHEMA,
    RateIndeterminate,
    error_curve,
    rate_fit,
    row_rng,
)
from .kernels import (
    ParameterError,
    PopulationParams,
    lattice_index,
    moran_centered_moments,
    moran_transition_probs,
    wf_centered_moments,
    wf_success_prob,
)

SEED_ENV = "MORANWF_SEED"
EXIT_OK, EXIT_CONFIG, EXIT_UNCONVERGED = 0, 2, 3
COMMANDS = ("simulate", "moments", "defect", "pde", "rate", "jump", "diffsel")


class ConfigError(ValueError):
    pass


def _floats(text):
    return [float(v) for v in str(text).split(",") if v.strip()]


def _ints(text):
    out = []
    for v in str(text).split(","):
        if v.strip():
            f = float(v)
            if f != int(f):
                raise ValueError(f"{v!r} is not an integer")
            out.append(int(f))
    return out


def _int(text):
    vals = _ints(text)
    if len(vals) != 1:
        raise ValueError(f"expected one integer, got {text!r}")
    return vals[0]


def _matrix(text):
    rows = [_floats(r) for r in str(text).split(";") if r.strip()]
    return np.array(rows, dtype=float)


def _choice(*options):
    def parse(text):
        if text not in options:
            raise ValueError(f"{text!r} not in {options}")
        return text
    return parse


# key -> (parser, default)
KEYS = {
    "model": (_choice("moran", "wf"), "moran"),
    "selection": (_choice("constant", "jump", "diffusion"), "constant"),
    "J": (_int, "50"),
    "J_list": (_ints, "50,100,200,400"),
    "s_prime": (float, "0"),
    "m_prime": (float, "0"),
    "p": (float, "0.5"),
    "x0": (float, "0.5"),
    "t": (float, "1"),
    "f": (_floats, "0,1"),
    "replicates": (_int, "200000"),
    "batches": (_int, "10"),
    "seed": (_int, None),
    "N": (_int, "2001"),
    "dt": (float, "1e-4"),
    "em_dt": (float, "1e-3"),
    "steps": (_int, "100"),
    "reference": (_choice("pde", "mc"), "pde"),
    "states": (_floats, "0,1"),
    "alpha": (_floats, "1,1"),
    "Q": (_matrix, "-1,1;1,-1"),
    "s0": (float, "0"),
    "sigma": (float, "0.5"),
    "samples": (_int, "1000000"),
    "output": (str, "-"),
}


@dataclass
class ExperimentConfig:
    command: str
    values: dict

    def __getattr__(self, key):
        try:
            return self.values[key]
        except KeyError:
            raise AttributeError(key) from None


def read_config_file(path: str) -> dict:
    out = {}
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def build_config(command: str, file_values: dict, flag_values: dict) -> ExperimentConfig:
    """Defaults < config file < flags < (seed only) environment fallback; every value parsed."""
    raw = {k: d for k, (_, d) in KEYS.items()}
    raw.update(file_values)
    raw.update({k: v for k, v in flag_values.items() if v is not None})
    if raw["seed"] is None:
        raw["seed"] = os.environ.get(SEED_ENV, "0")
    values = {}
    for key, text in raw.items():
        parser, _ = KEYS[key]
        try:
            values[key] = parser(text)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from None
    return ExperimentConfig(command, values)


# --------------------------------------------------------------------------
# CSV
# --------------------------------------------------------------------------

def format_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def csv_text(rows, schema) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(schema)
    for row in rows:
        if len(row) != len(schema):
            raise ValueError(f"row of length {len(row)} does not match schema of {len(schema)}")
        writer.writerow([format_value(v) for v in row])
    return buf.getvalue()


def emit_csv(rows, schema, path) -> None:
    """Write ``rows`` under header ``schema``; ``path='-'`` writes to stdout."""
    text = csv_text(rows, schema)
    if path == "-":
        sys.stdout.write(text)
        return
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from None


def _parse_field(text: str):
    if text == "":
        return None
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def parse_csv(text: str):
    """Inverse of ``csv_text``: returns ``(schema, rows)`` with ints, floats and strings restored."""
    reader = list(csv.reader(io.StringIO(text)))
    schema, body = tuple(reader[0]), reader[1:]
    return schema, [tuple(_parse_field(v) for v in row) for row in body]


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

def _params(cfg, J=None):
    return PopulationParams(cfg.J if J is None else J, cfg.s_prime, cfg.m_prime, cfg.p)


def _jump_factory(cfg):
    def make(J):
        return JumpSelectionSpec.exact_rate(cfg.states, cfg.alpha, cfg.Q, J)
    return make


def _diffusion_spec(cfg):
    return DiffusionSelectionSpec.default(sigma=cfg.sigma)


def validate(cfg: ExperimentConfig) -> None:
    """Check every precondition the command will rely on before running anything."""
    f = TestFunction(cfg.f)
    if cfg.t < 0 or not math.isfinite(cfg.t):
        raise ConfigError("t must be finite and nonnegative")
    for key in ("replicates", "steps", "batches", "samples"):
        if cfg.values[key] < (2 if key != "steps" else 0):
            raise ConfigError(f"{key} is too small")
    if cfg.N < 3 or cfg.dt <= 0 or cfg.em_dt <= 0:
        raise ConfigError("N >= 3 and positive dt, em_dt required")
    Js = cfg.J_list if cfg.command in ("defect", "rate", "jump", "diffsel") else [cfg.J]
    if any(b <= a for a, b in zip(Js, Js[1:])):
        raise ConfigError("J_list must be strictly increasing")
    for J in Js:
        params = _params(cfg, J)
        if cfg.command != "pde":
            lattice_index(cfg.x0, J)
        if cfg.command == "jump" or (cfg.command == "simulate" and cfg.selection == "jump"):
            spec = _jump_factory(cfg)(J)
            spec.check_params(params)
            spec.index_of(cfg.s0)
        if cfg.command == "diffsel" or (cfg.command == "simulate" and cfg.selection == "diffusion"):
            _diffusion_spec(cfg).h(cfg.s0, J)
    if cfg.command in ("jump", "diffsel") and cfg.model != "moran":
        raise ConfigError(f"{cfg.command} is defined for the Moran chain only")
    if cfg.command == "simulate" and cfg.selection != "constant" and cfg.model != "moran":
        raise ConfigError("random selection is simulated for the Moran chain only")
    if cfg.command == "pde" and not 0 <= cfg.x0 <= 1:
        raise ConfigError("x0 must lie in [0, 1]")
    del f


def cmd_simulate(cfg):
    params = _params(cfg)
    rng = np.random.default_rng(cfg.seed)
    scale = cfg.J**2 if cfg.model == "moran" else cfg.J
    if cfg.selection == "jump":
        spec = _jump_factory(cfg)(cfg.J)
        path = coupled_moran_path(spec, params, cfg.x0, spec.index_of(cfg.s0), cfg.steps, rng)
        xs, ss = path.x, path.s * cfg.J
    elif cfg.selection == "diffusion":
        path = coupled_diffusion_path(_diffusion_spec(cfg), params, cfg.x0, cfg.s0, cfg.steps, rng)
        xs, ss = path.x, path.s
    elif cfg.model == "moran":
        xs = moran_path(params, cfg.x0, cfg.steps, rng)
        ss = np.full(len(xs), cfg.s_prime)
    else:
        i = np.empty(cfg.steps + 1, dtype=np.int64)
        i[0] = lattice_index(cfg.x0, cfg.J)
        for k in range(cfg.steps):
            i[k + 1] = rng.binomial(cfg.J, wf_success_prob(i[k] / cfg.J, params))
        xs, ss = i / cfg.J, np.full(len(i), cfg.s_prime)
    rows = [(k, k / scale, int(round(x * cfg.J)), float(x), float(s))
            for k, (x, s) in enumerate(zip(xs, ss))]
    return rows, ("step", "t", "count", "x", "s")


def cmd_moments(cfg):
    params = _params(cfg)
    J, x = cfg.J, cfg.x0
    if cfg.model == "moran":
        rep = moran_centered_moments(x, params)
        pp, pm, _ = moran_transition_probs(x, params)
        d = 1.0 / J
        enum = [pp * d**k + pm * (-d) ** k for k in (1, 2, 3)]
        got = [rep.m1, rep.m2, rep.m3]
        schema = ("J", "x", "m1", "m2", "m3", "enum_m1", "enum_m2", "enum_m3", "max_abs_diff")
    else:
        rep = wf_centered_moments(x, params)
        k = np.arange(J + 1)
        w = binom.pmf(k, J, wf_success_prob(x, params))
        enum = [float(np.dot(w, (k / J - x) ** r)) for r in range(1, 6)]
        got = list(rep.as_tuple())
        schema = ("J", "x", "m1", "m2", "m3", "m4", "m5",
                  "enum_m1", "enum_m2", "enum_m3", "enum_m4", "enum_m5", "max_abs_diff")
    diff = max(abs(a - b) for a, b in zip(got, enum))
    return [(J, x, *got, *enum, diff)], schema


def cmd_defect(cfg):
    f = TestFunction(cfg.f)
    rows = []
    for J in cfg.J_list:
        params = _params(cfg, J)
        gam = gamma_moran(params) if cfg.model == "moran" else gamma_wf(params)
        d = one_step_defect(f, cfg.x0, params, model=cfg.model)
        lead = gam.leading_term(f, cfg.x0)
        rows.append((J, cfg.x0, d, lead, abs(d - lead)))
    return rows, ("J", "x", "defect", "leading", "residual")


def cmd_pde(cfg):
    f = TestFunction(cfg.f)
    kappa = 1.0 if cfg.model == "moran" else 0.5
    sol = bk_solve(f, _params(cfg), cfg.t, N=cfg.N, dt=min(cfg.dt, cfg.t / 1000) if cfg.t else None,
                   kappa=kappa)
    return [(cfg.t, float(x), float(v)) for x, v in zip(sol.x, sol.values)], ("t", "x", "phi")


def _curve_rows(curve, min_rows):
    rows = [r.as_tuple() for r in curve.rows]
    try:
        fit = rate_fit(curve, min_rows=min_rows)
        rows.append(("slope", fit.slope, "intercept", fit.intercept, "rss", fit.rss, fit.n_rows))
    except RateIndeterminate:
        rows.append(("slope", "indeterminate", "intercept", "", "rss", "", 0))
    return rows, CSV_SCHEMA


def cmd_rate(cfg):
    f = TestFunction(cfg.f)
    curve = error_curve(f, _params(cfg, cfg.J_list[0]), cfg.x0, cfg.t, cfg.J_list,
                        cfg.replicates, cfg.seed, model=cfg.model, reference=cfg.reference,
                        batches=cfg.batches, em_dt=cfg.em_dt, N_min=cfg.N, pde_dt=cfg.dt)
    return _curve_rows(curve, 4)


def cmd_jump(cfg):
    f = TestFunction(cfg.f)
    curve = error_curve(f, _params(cfg, cfg.J_list[0]), cfg.x0, cfg.t, cfg.J_list,
                        cfg.replicates, cfg.seed, env=_jump_factory(cfg), s0=cfg.s0,
                        reference=cfg.reference, batches=cfg.batches, em_dt=cfg.em_dt,
                        N_min=cfg.N, pde_dt=cfg.dt)
    return _curve_rows(curve, 3)


def cmd_diffsel(cfg):
    spec = _diffusion_spec(cfg)
    rows = []
    for k, J in enumerate(cfg.J_list):
        params = _params(cfg, J)
        mean, var = coupled_moments(cfg.x0, cfg.s0, spec, params)
        e_mean, e_var = coupled_moments_enumerated(cfg.x0, cfg.s0, spec, params)
        cross, se = cross_moment_estimate(cfg.x0, cfg.s0, spec, params, cfg.samples, row_rng(cfg.seed, k))
        rows.append((J, cfg.x0, cfg.s0, mean, var, e_mean, e_var, cross, se, J**3 * abs(cross)))
    return rows, ("J", "x", "z", "mean", "var", "enum_mean", "enum_var",
                  "cross", "cross_stderr", "J3_abs_cross")


HANDLERS = {
    "simulate": cmd_simulate, "moments": cmd_moments, "defect": cmd_defect, "pde": cmd_pde,
    "rate": cmd_rate, "jump": cmd_jump, "diffsel": cmd_diffsel,
}


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moranwf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value configuration file")
        for key in KEYS:
            p.add_argument(f"--{key}", dest=key, default=None)
    return parser


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(f"error: {kind}: {' '.join(str(message).split())}\n")
    return code


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    flags = {k: getattr(args, k) for k in KEYS}
    try:
        file_values = read_config_file(args.config) if args.config else {}
        cfg = build_config(args.command, file_values, flags)
        validate(cfg)
    except (ConfigError, ParameterError, SpecError, ValueError) as exc:
        return _fail("config", exc, EXIT_CONFIG)
    try:
        rows, schema = HANDLERS[cfg.command](cfg)
    except UnconvergedError as exc:
        return _fail("nonconvergence", exc, EXIT_UNCONVERGED)
    except (ParameterError, SpecError) as exc:
        return _fail("config", exc, EXIT_CONFIG)
    try:
        emit_csv(rows, schema, cfg.output)
    except OSError as exc:
        return _fail("io", exc, 1)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
