"""Command-line driver: ``fpcycle {cycle,spectrum,simulate,fit,oracle,all}``.

Configuration is an INI file with sections ``[system] [run] [cycle] [spectrum]
[mc] [fit] [oracle]``; ``--set section.key=value`` overrides single entries.
Every run writes ``manifest.ini`` with the fully resolved configuration, which
can be passed back through ``--config`` to reproduce the outputs.
"""
from __future__ import annotations

import argparse
import configparser
import math
import os
import sys
import warnings
from functools import cached_property
from pathlib import Path

import numpy as np

from . import cycle as cyc
from . import discrete_oracle as orc
from . import montecarlo as mc
from . import periodic_ode as po
from . import spectrum as sp
from . import wkb
from .dynamics import BUILTINS, builtin_parameters, jacobian_at, make_builtin

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
OUT_ENV = "FPCYCLE_OUT"

SECTIONS = ("system", "run", "cycle", "spectrum", "mc", "fit", "oracle")

_BASE = {
    "run": {"seed": "0", "out": "fpcycle-out"},
    "cycle": {"n_samples": "512", "residual_tol": "1e-08", "csv_stride": "1"},
    "spectrum": {"n_max": "3", "m_max": "5", "n_min": "1", "n_rays": "32", "ray_method": "DOP853"},
    "mc": {"n_paths": "10000", "dt": "auto", "max_time": "auto", "start": "focus", "bin_width": "0.25",
           "survival_points": "201"},
    "fit": {"freeze_lambda0": "true", "window_start": "first_peak", "window_end": "auto", "peak_z": "3"},
    "oracle": {"nx": "201", "ny": "201", "k": "8", "shift": "auto", "boundary": "shortley-weller",
               "advection": "central", "epsilon": "system"},
}

_PER_SYSTEM = {
    "fig1": {},
    "ht_upstate": {
        "cycle": {"n_samples": "1048576", "residual_tol": "1e-06", "csv_stride": "64"},
        "spectrum": {"n_rays": "16"},
        "mc": {"n_paths": "50000", "start": "uniform-in-D", "bin_width": "0.05"},
    },
}


class ConfigError(ValueError):
    """Invalid or unresolvable configuration."""


def _fmt_number(v: float) -> str:
    return repr(float(v))


def resolve_config(path=None, overrides=(), seed=None, out=None) -> dict:
    """Merge builtin defaults, the config file, ``--set`` overrides and flags."""
    filecfg = configparser.ConfigParser(interpolation=None)
    filecfg.optionxform = str
    if path is not None:
        if not Path(path).is_file():
            raise ConfigError(f"config file {path} not found")
        try:
            filecfg.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    sets = {}
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        sec, name = key.split(".", 1)
        sets.setdefault(sec.strip(), {})[name.strip()] = value.strip()
    for sec in list(filecfg.sections()) + list(sets):
        if sec not in SECTIONS:
            raise ConfigError(f"unknown config section [{sec}]")

    name = sets.get("system", {}).get("name") or filecfg.get("system", "name", fallback="fig1")
    if name not in BUILTINS:
        raise ConfigError(f"unknown system {name!r}; known: {', '.join(BUILTINS)}")
    cfg = {"system": {"name": name}}
    cfg["system"].update({k: _fmt_number(v) for k, v in builtin_parameters(name).items()})
    for sec, table in _BASE.items():
        cfg[sec] = dict(table)
        cfg[sec].update(_PER_SYSTEM[name].get(sec, {}))
    for source in ({s: dict(filecfg[s]) for s in filecfg.sections()}, sets):
        for sec, table in source.items():
            for k, v in table.items():
                if k not in cfg[sec]:
                    raise ConfigError(f"unknown key {sec}.{k}")
                cfg[sec][k] = v
    if seed is not None:
        cfg["run"]["seed"] = str(int(seed))
    if out is not None:
        cfg["run"]["out"] = str(out)
    elif os.environ.get(OUT_ENV):
        cfg["run"]["out"] = os.environ[OUT_ENV]
    _validate(cfg)
    return cfg


def _num(cfg, sec, key, kind=float, positive=False):
    raw = cfg[sec][key]
    try:
        v = kind(raw)
    except ValueError as exc:
        raise ConfigError(f"{sec}.{key} = {raw!r} is not a valid {kind.__name__}") from exc
    if positive and not v > 0:
        raise ConfigError(f"{sec}.{key} must be positive")
    return v


def _bool(cfg, sec, key):
    raw = cfg[sec][key].lower()
    if raw in ("1", "true", "yes", "on"):
        return True
    if raw in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{sec}.{key} = {raw!r} is not a boolean")


def _validate(cfg):
    for k in cfg["system"]:
        if k != "name":
            _num(cfg, "system", k)
    _num(cfg, "run", "seed", int)
    _num(cfg, "cycle", "n_samples", int, True)
    _num(cfg, "cycle", "residual_tol", float, True)
    _num(cfg, "cycle", "csv_stride", int, True)
    for k in ("n_max", "m_max", "n_rays"):
        _num(cfg, "spectrum", k, int, True)
    _num(cfg, "spectrum", "n_min", int)
    _num(cfg, "mc", "n_paths", int, True)
    _num(cfg, "mc", "bin_width", float, True)
    _num(cfg, "mc", "survival_points", int, True)
    for k in ("dt", "max_time"):
        if cfg["mc"][k] != "auto":
            _num(cfg, "mc", k, float, True)
    start = cfg["mc"]["start"]
    if start not in ("focus", "uniform-in-D"):
        _start_point(start)
    _bool(cfg, "fit", "freeze_lambda0")
    _num(cfg, "fit", "peak_z", float, True)
    if cfg["fit"]["window_start"] != "first_peak":
        _num(cfg, "fit", "window_start")
    if cfg["fit"]["window_end"] != "auto":
        _num(cfg, "fit", "window_end", float, True)
    for k in ("nx", "ny", "k"):
        _num(cfg, "oracle", k, int, True)
    if cfg["oracle"]["shift"] != "auto":
        _shift(cfg["oracle"]["shift"])
    if cfg["oracle"]["epsilon"] != "system":
        _num(cfg, "oracle", "epsilon", float, True)
    if cfg["oracle"]["boundary"] not in ("shortley-weller", "staircase"):
        raise ConfigError("oracle.boundary must be shortley-weller or staircase")
    if cfg["oracle"]["advection"] not in ("central", "upwind"):
        raise ConfigError("oracle.advection must be central or upwind")


def _start_point(raw):
    try:
        x, y = (float(v) for v in raw.split(","))
    except ValueError as exc:
        raise ConfigError(f"mc.start must be focus, uniform-in-D or 'x,y', got {raw!r}") from exc
    return np.array([x, y])


def _shift(raw):
    try:
        return complex(raw.replace(" ", ""))
    except ValueError as exc:
        raise ConfigError(f"oracle.shift = {raw!r} is not a complex number") from exc


def write_manifest(path, cfg) -> None:
    lines = []
    for sec in SECTIONS:
        lines.append(f"[{sec}]")
        lines.extend(f"{k} = {v}" for k, v in cfg[sec].items())
        lines.append("")
    Path(path).write_text("\n".join(lines))


class Pipeline:
    """Lazily evaluated stages shared by the subcommands."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.out = Path(cfg["run"]["out"])
        self.written: list[Path] = []

    def path(self, name) -> Path:
        p = self.out / name
        self.written.append(p)
        return p

    @cached_property
    def system(self):
        params = {k: float(v) for k, v in self.cfg["system"].items() if k != "name"}
        try:
            return make_builtin(self.cfg["system"]["name"], params)
        except KeyError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def epsilon(self) -> float:
        return self.system.epsilon

    @cached_property
    def cycle(self):
        return cyc.find_limit_cycle(self.system, n_samples=int(self.cfg["cycle"]["n_samples"]))

    @cached_property
    def frame(self):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return cyc.boundary_frame(self.system, self.cycle)

    @cached_property
    def periodic(self):
        tol = float(self.cfg["cycle"]["residual_tol"])
        xi = po.solve_xi(self.frame)
        phi = po.solve_phi(self.frame, xi, tol=tol)
        po.solve_xi_transport(self.frame, phi, xi, tol=1e-8)
        return xi, phi, po.k0_boundary(self.frame, xi)

    @cached_property
    def jacobian(self):
        return jacobian_at(self.system, self.system.focus)

    @cached_property
    def focus_frequency(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.jacobian).imag)))

    @cached_property
    def riccati(self):
        return wkb.solve_riccati(self.jacobian, self.system.sigma(self.system.focus))

    @cached_property
    def eikonal(self):
        s = self.cfg["spectrum"]
        return wkb.eikonal_psi_hat(self.system, self.cycle, self.riccati, int(s["n_rays"]),
                                   xi=self.periodic[0], method=s["ray_method"])

    @cached_property
    def tau(self):
        xi, _, K0 = self.periodic
        return wkb.mfpt(self.system, self.frame, xi, K0, self.riccati, self.eikonal.psi_hat)

    @cached_property
    def freqs(self):
        return sp.frequencies(self.frame, self.periodic[0], self.focus_frequency)

    @cached_property
    def spectrum(self):
        s = self.cfg["spectrum"]
        return sp.eigenvalue_lattice(self.freqs, int(s["n_max"]), int(s["m_max"]), int(s["n_min"]),
                                     self.tau.lambda0_log, self.epsilon)

    @cached_property
    def ensemble(self):
        m = self.cfg["mc"]
        start = m["start"] if m["start"] in ("focus", "uniform-in-D") else _start_point(m["start"])
        conf = mc.SimulationConfig(
            n_paths=int(m["n_paths"]),
            dt=None if m["dt"] == "auto" else float(m["dt"]),
            max_time=None if m["max_time"] == "auto" else float(m["max_time"]),
            seed=int(self.cfg["run"]["seed"]),
            start=start,
        )
        return mc.simulate_exits(self.system, self.cycle, conf)

    @cached_property
    def histogram(self):
        return mc.exit_time_histogram(self.ensemble, float(self.cfg["mc"]["bin_width"]))

    @cached_property
    def fit(self):
        f = self.cfg["fit"]
        t, h = self.histogram
        z = float(f["peak_z"])
        peaks, scores = mc.significant_peaks(t, h, z)
        if f["window_start"] == "first_peak":
            lo = float(peaks[0]) if peaks.size else 0.0
        else:
            lo = float(f["window_start"])
        hi = float(t[-1]) if f["window_end"] == "auto" else float(f["window_end"])
        lam0 = mc.survival_tail_rate(self.ensemble) if _bool(self.cfg, "fit", "freeze_lambda0") else None
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            fit = mc.fit_two_term(t, h, lambda0=lam0, lambda1_init=2 * self.freqs.omega1, window=(lo, hi))
        return fit, peaks, scores

    # ------------------------------------------------------------------ outputs

    def write_cycle(self):
        stride = int(self.cfg["cycle"]["csv_stride"])
        cyc.write_cycle_csv(self.path("cycle.csv"), self.cycle, self.frame, stride)
        cyc.write_frame_csv(self.path("frame.csv"), self.frame, stride)

    def write_spectrum(self):
        xi, phi, K0 = self.periodic
        sp.write_spectrum_json(self.path("spectrum.json"), self.spectrum, {
            "epsilon": self.epsilon,
            "T_period": self.freqs.T_period,
            "omega1_mean_identity": self.freqs.omega1_mean_identity,
        })
        sp.write_exit_density_csv(self.path("exit_density.csv"), sp.exit_density(self.frame, xi))
        wkb.write_wkb_json(self.path("psi.json"), self.riccati, self.eikonal, self.tau)
        po.write_periodic_csv(self.path("periodic.csv"), xi, phi, K0, int(self.cfg["cycle"]["csv_stride"]))

    def write_simulation(self):
        e = self.ensemble
        mc.write_exits_csv(self.path("exits.csv"), e)
        t, h = self.histogram
        mc.write_histogram_csv(self.path("histogram.csv"), t, h)
        grid = np.linspace(0.0, e.max_time, int(self.cfg["mc"]["survival_points"]))
        mc.write_survival_csv(self.path("survival.csv"), mc.survival_curve(e, grid))

    def write_fit(self):
        fit, peaks, scores = self.fit
        w2, wf = self.freqs.omega2, self.focus_frequency
        mc.write_fit_json(self.path("fit.json"), fit, {
            "omega2": w2,
            "focus_frequency": wf,
            "omega_rel_to_omega2": fit.omega / w2 - 1.0,
            "omega_rel_to_focus": fit.omega / wf - 1.0,
            "lambda1_lattice": 2 * self.freqs.omega1,
            "significant_peaks": [float(p) for p in peaks],
            "peak_zscores": [float(z) for z in scores],
            "n_paths": self.ensemble.n_paths,
            "n_censored": self.ensemble.n_censored,
        })

    def write_oracle(self):
        o = self.cfg["oracle"]
        eps = self.epsilon if o["epsilon"] == "system" else float(o["epsilon"])
        op = orc.discretize(self.system, self.cycle, int(o["nx"]), int(o["ny"]), epsilon=eps,
                            boundary=o["boundary"], advection=o["advection"])
        k = int(o["k"])
        seed = int(self.cfg["run"]["seed"])
        # lattice at the oracle's epsilon (frequencies do not depend on it)
        lattice = sp.eigenvalue_lattice(self.freqs, int(self.cfg["spectrum"]["n_max"]),
                                        int(self.cfg["spectrum"]["m_max"]), int(self.cfg["spectrum"]["n_min"]),
                                        epsilon=eps)
        if o["shift"] == "auto":
            shifts = [0.0, complex(2 * self.freqs.omega1, self.freqs.omega2)]
        else:
            shifts = [_shift(o["shift"])]
        vals, res, edge = [], [], []
        for shift in shifts:
            r = orc.leading_eigenvalues(op, k, shift, seed=seed)
            for z, rr, ee in zip(r.values, r.residuals, r.edge):
                if not any(abs(z - w) <= 1e-8 * max(1.0, abs(z)) for w in vals):
                    vals.append(z)
                    res.append(rr)
                    edge.append(ee)
        order = np.lexsort((np.imag(vals), np.real(vals)))
        ritz = orc.RitzResult(np.asarray(vals)[order], np.asarray(res)[order], np.asarray(edge)[order],
                              shifts[0], "arnoldi")
        comp = orc.compare_spectrum(ritz, lattice)
        extra = {"shifts": [{"re": s.real, "im": s.imag} for s in map(complex, shifts)],
                 "omega1": self.freqs.omega1, "omega2": self.freqs.omega2}
        try:
            extra["principal"] = float(ritz.principal().real)
        except ValueError:
            extra["principal"] = None
        orc.write_oracle_json(self.path("oracle_report.json"), op, ritz, comp, extra)


COMMANDS = {
    "cycle": ("write_cycle",),
    "spectrum": ("write_spectrum",),
    "simulate": ("write_simulation",),
    "fit": ("write_fit",),
    "oracle": ("write_oracle",),
    "all": ("write_cycle", "write_spectrum", "write_simulation", "write_fit", "write_oracle"),
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fpcycle", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="INI configuration file (e.g. a previous manifest.ini)")
    ap.add_argument("--seed", type=int, help="master seed for the Monte Carlo streams")
    ap.add_argument("--out", help="output directory")
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                    help="override one configuration entry (repeatable)")
    return ap


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args.config, args.overrides, args.seed, args.out)
    except ConfigError as exc:
        print(f"fpcycle: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    pipe = Pipeline(cfg)
    pipe.out.mkdir(parents=True, exist_ok=True)
    try:
        write_manifest(pipe.path("manifest.ini"), cfg)
        for step in COMMANDS[args.command]:
            getattr(pipe, step)()
    except ConfigError as exc:
        _cleanup(pipe.written)
        print(f"fpcycle: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArithmeticError, ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
        _cleanup(pipe.written)
        print(f"fpcycle: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except BaseException:
        _cleanup(pipe.written)
        raise
    return EXIT_OK


def _cleanup(paths):
    for p in paths:
        try:
            p.unlink()
        except FileNotFoundError:
            pass


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
