"""Command-line front end.

    backupsafe simulate --scenario backup-static --out runs/r1 [--config cfg.txt] [--seed 0]
    backupsafe check --log runs/r1/trajectory.csv --config runs/r1/config.txt

Exit codes: 0 when every invariant check passes, 1 when a check fails or the
run faults, 2 for usage, config or log-schema errors.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from . import __version__
from . import sim
from .safety import SafetyGains
from .unicycle import DesiredParams, InputBounds, ObstacleTrack

log = logging.getLogger(__name__)

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

SCENARIOS = {
    "cbf-unbounded": dict(controller="cbf-unbounded", delta=0.5),
    "backup-static": dict(controller="backup"),
    "backup-moving": dict(controller="backup", obstacle="sinusoidal"),
    "issf-fos": dict(controller="issf-backup", plant="fos-proxy", tau=0.5, noise=0.05),
    "pure-backup": dict(controller="pure-backup"),
    "synthetic-d": dict(controller="issf-backup", plant="rom-with-injected-d", B_inj=0.01),
}

FLOAT_KEYS = ("v_max", "v_min", "omega_max", "eta_g", "v_g", "K_eta", "K_psi", "R_O", "xi_O",
              "eta_bar_O", "A_eta", "Omega", "delta", "epsilon", "gamma", "gamma_b",
              "Gamma_11", "Gamma_22", "T", "sigma", "sigma_b", "p_slack", "p_slack_b", "tau",
              "noise", "B_inj", "duration", "control_dt")
INT_KEYS = ("N_c", "seed")
STR_KEYS = ("scenario", "disturbance", "obstacle")
CONFIG_KEYS = FLOAT_KEYS + INT_KEYS + STR_KEYS


class ConfigError(ValueError):
    def __init__(self, msg, line=None):
        super().__init__(msg if line is None else f"line {line}: {msg}")
        self.line = line


class LogSchemaError(ValueError):
    pass


# -- config ---------------------------------------------------------------------

def parse_config(text: str) -> dict:
    """Parse flat ``key=value`` lines into {key: (value, line_number)}.

    Blank lines and ``#`` comments are ignored.
    """
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected key=value, got {raw.strip()!r}", lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown key {key!r}", lineno)
        if key in out:
            raise ConfigError(f"duplicate key {key!r}", lineno)
        try:
            if key in FLOAT_KEYS:
                parsed = float(value)
                if math.isnan(parsed):
                    raise ValueError
            elif key in INT_KEYS:
                parsed = int(value)
            else:
                if not value:
                    raise ValueError
                parsed = value
        except ValueError:
            raise ConfigError(f"bad value {value!r} for {key}", lineno) from None
        out[key] = (parsed, lineno)
    return out


def load_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)


def build_config(scenario: str, overrides: dict, seed=None) -> sim.ScenarioConfig:
    """Scenario preset with ``overrides`` ({key: (value, line)}) applied."""
    if scenario not in SCENARIOS:
        raise ConfigError(f"unknown scenario {scenario!r}")
    values = {k: (v, None) for k, v in SCENARIOS[scenario].items()}
    values.update(overrides)
    if seed is not None:
        values["seed"] = (seed, None)
    get = {k: v for k, (v, _) in values.items()}.get

    def guard(keys, build):
        try:
            return build()
        except (ValueError, TypeError) as exc:
            lines = [values[k][1] for k in keys if k in values and values[k][1] is not None]
            raise ConfigError(str(exc), min(lines) if lines else None) from None

    base = sim.ScenarioConfig()
    track = guard(("obstacle", "xi_O", "eta_bar_O", "A_eta", "Omega"), lambda: ObstacleTrack(
        kind=get("obstacle", "static"), xi_O=get("xi_O", 2.0), eta_bar_O=get("eta_bar_O", -0.25),
        A_eta=get("A_eta", 0.1), Omega=get("Omega", 2 * math.pi / 5)))
    b0 = base.bounds
    bounds = guard(("v_min", "v_max", "omega_max"), lambda: _bounds(
        get("v_min", b0.v_min), get("v_max", b0.v_max), get("omega_max", b0.omega_max)))
    d0 = base.desired
    desired = guard(("v_g", "eta_g", "K_eta", "K_psi"), lambda: DesiredParams(
        v_g=get("v_g", d0.v_g), eta_g=get("eta_g", d0.eta_g),
        K_eta=get("K_eta", d0.K_eta), K_psi=get("K_psi", d0.K_psi)))
    g0 = base.gains
    gains = guard(("gamma", "gamma_b", "sigma", "sigma_b", "T", "N_c", "delta", "epsilon"),
                  lambda: SafetyGains(
                      gamma=get("gamma", g0.gamma), gamma_b=get("gamma_b", g0.gamma_b),
                      sigma=get("sigma", g0.sigma), sigma_b=get("sigma_b", g0.sigma_b),
                      T=get("T", g0.T), N_c=get("N_c", g0.N_c),
                      delta_heading=get("delta", g0.delta_heading),
                      epsilon=get("epsilon", g0.epsilon)))
    weight = (get("Gamma_11", base.weight[0]), get("Gamma_22", base.weight[1]))
    penalties = (get("p_slack", base.penalties[0]), get("p_slack_b", base.penalties[1]))
    return guard(("Gamma_11", "Gamma_22", "p_slack", "p_slack_b", "duration", "control_dt",
                  "tau", "noise", "B_inj", "disturbance", "seed"), lambda: _scenario_config(
        base, controller=get("controller"), plant=get("plant", base.plant), obstacle=track,
        gains=gains, desired=desired, bounds=bounds, R_O=get("R_O", base.R_O), weight=weight,
        penalties=penalties, duration=get("duration", base.duration),
        control_dt=get("control_dt", base.control_dt), tau=get("tau", base.tau),
        noise=get("noise", base.noise), B_inj=get("B_inj", base.B_inj),
        disturbance=get("disturbance", base.disturbance), seed=get("seed", base.seed)))


def _bounds(v_min, v_max, omega_max) -> InputBounds:
    if not (v_min <= v_max and omega_max >= 0):
        raise ValueError("need v_min <= v_max and omega_max >= 0")
    return InputBounds(v_min=v_min, v_max=v_max, omega_max=omega_max)


def _scenario_config(base, **kw) -> sim.ScenarioConfig:
    w = kw["weight"]
    if not (w[0] > 0 and w[1] > 0):
        raise ValueError("Gamma_11 and Gamma_22 must be positive")
    if not (kw["penalties"][0] > 0 and kw["penalties"][1] > 0):
        raise ValueError("slack penalties must be positive")
    if kw["tau"] <= 0 or kw["noise"] < 0 or kw["B_inj"] < 0:
        raise ValueError("need tau > 0, noise >= 0 and B_inj >= 0")
    return replace(base, **kw)


def dump_config(scenario: str, cfg: sim.ScenarioConfig) -> str:
    """Effective config in the same key=value format ``load_config`` reads."""
    g, b, d, o = cfg.gains, cfg.bounds, cfg.desired, cfg.obstacle
    items = [("scenario", scenario), ("seed", cfg.seed), ("disturbance", cfg.disturbance),
             ("obstacle", o.kind),
             ("v_max", b.v_max), ("v_min", b.v_min), ("omega_max", b.omega_max),
             ("eta_g", d.eta_g), ("v_g", d.v_g), ("K_eta", d.K_eta), ("K_psi", d.K_psi),
             ("R_O", cfg.R_O), ("xi_O", o.xi_O), ("eta_bar_O", o.eta_bar_O),
             ("A_eta", o.A_eta), ("Omega", o.Omega), ("delta", g.delta_heading),
             ("epsilon", g.epsilon), ("gamma", g.gamma), ("gamma_b", g.gamma_b),
             ("Gamma_11", cfg.weight[0]), ("Gamma_22", cfg.weight[1]), ("T", g.T),
             ("N_c", g.N_c), ("sigma", g.sigma), ("sigma_b", g.sigma_b),
             ("p_slack", cfg.penalties[0]), ("p_slack_b", cfg.penalties[1]),
             ("tau", cfg.tau), ("noise", cfg.noise), ("B_inj", cfg.B_inj),
             ("duration", cfg.duration), ("control_dt", cfg.control_dt)]
    return "".join(f"{k}={_fmt(v)}\n" for k, v in items)


# -- trajectory CSV ---------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_csv(path, tlog: sim.TrajectoryLog) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(sim.LOG_COLUMNS)
        for i in range(len(tlog)):
            w.writerow([_fmt(tlog[c][i]) for c in sim.LOG_COLUMNS])


def read_csv(path, cfg=None) -> sim.TrajectoryLog:
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise LogSchemaError(f"cannot read log {path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise LogSchemaError("log is empty")
        missing = [c for c in sim.LOG_COLUMNS if c not in header]
        if missing:
            raise LogSchemaError(f"missing column {missing[0]!r}")
        idx = {c: header.index(c) for c in sim.LOG_COLUMNS}
        rows = list(reader)
    if not rows:
        raise LogSchemaError("log has no records")
    cols = {}
    for c in sim.LOG_COLUMNS:
        try:
            vals = [r[idx[c]] for r in rows]
        except IndexError:
            raise LogSchemaError(f"short record in column {c!r}") from None
        if c == "qp_status":
            cols[c] = vals
        else:
            try:
                cols[c] = np.array([float(v) for v in vals])
            except ValueError:
                raise LogSchemaError(f"non-numeric value in column {c!r}") from None
    return sim.TrajectoryLog(columns=cols, config=cfg)


# -- SVG plots ---------------------------------------------------------------------

@dataclass
class _Frame:
    x0: float
    x1: float
    y0: float
    y1: float
    width: int = 640
    height: int = 400
    pad: int = 50

    def px(self, x):
        return self.pad + (x - self.x0) / (self.x1 - self.x0) * (self.width - 2 * self.pad)

    def py(self, y):
        return self.height - self.pad - (y - self.y0) / (self.y1 - self.y0) * (self.height - 2 * self.pad)


def _span(values, extra=()):
    vals = np.concatenate([np.asarray(v, float).ravel() for v in values] + [np.asarray(extra, float)])
    vals = vals[np.isfinite(vals)]
    if vals.size == 0:
        return 0.0, 1.0
    lo, hi = float(vals.min()), float(vals.max())
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    m = 0.05 * (hi - lo)
    return lo - m, hi + m


COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd")


def _path_data(fr: _Frame, xs, ys) -> str:
    parts, pen_down = [], False
    for x, y in zip(xs, ys):
        if not (math.isfinite(x) and math.isfinite(y)):
            pen_down = False
            continue
        parts.append(f"{'L' if pen_down else 'M'}{fr.px(x):.2f},{fr.py(y):.2f}")
        pen_down = True
    return " ".join(parts) or "M0,0"


def svg_plot(title, xlabel, series, hlines=(), circles=(), equal=False) -> str:
    """Line plot; ``series`` is [(label, xs, ys)], one <path> each.

    ``hlines`` are (y, label) reference lines and ``circles`` (cx, cy, r)
    outlines, both drawn without <path> elements.
    """
    xs_all = [s[1] for s in series]
    ys_all = [s[2] for s in series]
    cx = [c[0] + s * c[2] for c in circles for s in (-1, 1)]
    cy = [c[1] + s * c[2] for c in circles for s in (-1, 1)]
    x0, x1 = _span(xs_all, cx)
    y0, y1 = _span(ys_all, [h[0] for h in hlines] + cy)
    fr = _Frame(x0, x1, y0, y1)
    if equal:
        sx = (x1 - x0) / (fr.width - 2 * fr.pad)
        sy = (y1 - y0) / (fr.height - 2 * fr.pad)
        s = max(sx, sy)
        mx, my = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
        hw, hh = 0.5 * s * (fr.width - 2 * fr.pad), 0.5 * s * (fr.height - 2 * fr.pad)
        fr = _Frame(mx - hw, mx + hw, my - hh, my + hh)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{fr.width}" height="{fr.height}" '
           f'viewBox="0 0 {fr.width} {fr.height}">',
           f'<rect x="0" y="0" width="{fr.width}" height="{fr.height}" fill="white"/>',
           f'<text x="{fr.width / 2:.0f}" y="20" text-anchor="middle" font-size="14">'
           f'{escape(title)}</text>',
           f'<rect x="{fr.pad}" y="{fr.pad}" width="{fr.width - 2 * fr.pad}" '
           f'height="{fr.height - 2 * fr.pad}" fill="none" stroke="black"/>',
           f'<text x="{fr.width / 2:.0f}" y="{fr.height - 10}" text-anchor="middle" '
           f'font-size="12">{escape(xlabel)}</text>']
    for lbl, v in ((f"{fr.x0:.3g}", fr.x0), (f"{fr.x1:.3g}", fr.x1)):
        out.append(f'<text x="{fr.px(v):.1f}" y="{fr.height - fr.pad + 15}" '
                   f'text-anchor="middle" font-size="10">{lbl}</text>')
    for lbl, v in ((f"{fr.y0:.3g}", fr.y0), (f"{fr.y1:.3g}", fr.y1)):
        out.append(f'<text x="{fr.pad - 5}" y="{fr.py(v):.1f}" text-anchor="end" '
                   f'font-size="10">{lbl}</text>')
    for y, lbl in hlines:
        out.append(f'<line x1="{fr.pad}" y1="{fr.py(y):.2f}" x2="{fr.width - fr.pad}" '
                   f'y2="{fr.py(y):.2f}" stroke="gray" stroke-dasharray="4,3"/>')
        out.append(f'<text x="{fr.width - fr.pad + 3}" y="{fr.py(y):.1f}" font-size="9">'
                   f'{escape(lbl)}</text>')
    for ccx, ccy, r in circles:
        rx = abs(fr.px(ccx + r) - fr.px(ccx))
        ry = abs(fr.py(ccy + r) - fr.py(ccy))
        out.append(f'<ellipse cx="{fr.px(ccx):.2f}" cy="{fr.py(ccy):.2f}" rx="{rx:.2f}" '
                   f'ry="{ry:.2f}" fill="#f4cccc" stroke="#990000"/>')
    for k, (lbl, xs, ys) in enumerate(series):
        color = COLORS[k % len(COLORS)]
        out.append(f'<path d="{_path_data(fr, xs, ys)}" fill="none" stroke="{color}" '
                   f'stroke-width="1.5"><title>{escape(lbl)}</title></path>')
        out.append(f'<text x="{fr.pad + 8}" y="{fr.pad + 15 + 14 * k}" font-size="11" '
                   f'fill="{color}">{escape(lbl)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_plots(out: Path, tlog: sim.TrajectoryLog, cfg: sim.ScenarioConfig) -> None:
    t = tlog.t
    o = cfg.obstacle
    cx, cy = o.position(0.0)
    traj = [("path", tlog["xi"], tlog["eta"])]
    if o.kind != "static":
        centers = np.array([o.position(tk) for tk in t])
        traj.append(("obstacle center", centers[:, 0], centers[:, 1]))
    (out / "trajectory.svg").write_text(svg_plot(
        "trajectory", "xi [m] (vertical: eta [m])", traj,
        circles=[(cx, cy, cfg.R_O)], equal=True))
    b = cfg.bounds
    (out / "inputs.svg").write_text(svg_plot(
        "commanded inputs", "t [s]",
        [("v_cmd [m/s]", t, tlog["v_cmd"]), ("omega_cmd [rad/s]", t, tlog["omega_cmd"])],
        hlines=[(b.v_min, "v_min"), (b.v_max, "v_max"),
                (-b.omega_max, "-omega_max"), (b.omega_max, "omega_max")]))
    hs = [("h", t, tlog["h"])]
    if not np.all(np.isnan(tlog["hbar_min"])):
        hs.append(("min h along backup flow", t, tlog["hbar_min"]))
    (out / "h.svg").write_text(svg_plot("safety function", "t [s]", hs, hlines=[(0.0, "0")]))


# -- commands ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    try:
        overrides = load_config(args.config) if args.config else {}
        if "scenario" in overrides and overrides["scenario"][0] != args.scenario:
            raise ConfigError(f"config names scenario {overrides['scenario'][0]!r}, "
                              f"command line {args.scenario!r}", overrides["scenario"][1])
        overrides.pop("scenario", None)
        cfg = build_config(args.scenario, overrides, args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    fault = None
    try:
        tlog = sim.run_scenario(cfg)
        fault = tlog.aborted
    except Exception as exc:  # runtime fault: still write what we can
        log.exception("simulation failed")
        fault = f"{type(exc).__name__}: {exc}"
        tlog = None

    (out / "config.txt").write_text(dump_config(args.scenario, cfg))
    passed = False
    if tlog is not None and len(tlog):
        write_csv(out / "trajectory.csv", tlog)
        report = sim.check_invariants(tlog, cfg)
        text = f"scenario: {args.scenario}\n" + report.to_text()
        (out / "report.txt").write_text(text)
        write_plots(out, tlog, cfg)
        print(text, end="")
        passed = report.passed
    elapsed = time.perf_counter() - started
    manifest = {"scenario": args.scenario, "config": args.config or "(defaults)",
                "out": str(out), "seed": cfg.seed, "version": __version__,
                "wall_clock_s": f"{elapsed:.3f}"}
    if fault:
        manifest["fault"] = fault
    (out / "manifest.txt").write_text("".join(f"{k}: {v}\n" for k, v in manifest.items()))
    if fault:
        print(f"runtime fault: {fault}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK if passed else EXIT_FAIL


def cmd_check(args) -> int:
    try:
        overrides = load_config(args.config) if args.config else {}
        scenario = args.scenario or overrides.pop("scenario", (None, None))[0]
        overrides.pop("scenario", None)
        if scenario is None:
            raise ConfigError("scenario unknown: pass --scenario or put scenario= in the config")
        cfg = build_config(scenario, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        tlog = read_csv(args.log, cfg)
    except LogSchemaError as exc:
        print(f"log error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    report = sim.check_invariants(tlog, cfg)
    print(f"scenario: {scenario}\n" + report.to_text(), end="")
    return EXIT_OK if report.passed else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="backupsafe", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run a named scenario and write logs, plots and a report")
    s.add_argument("--scenario", required=True, choices=sorted(SCENARIOS))
    s.add_argument("--config", help="key=value file overriding scenario defaults")
    s.add_argument("--out", required=True, help="output directory (created if absent)")
    s.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("check", help="re-run the invariant checks on a stored trajectory.csv")
    c.add_argument("--log", required=True)
    c.add_argument("--config", help="config written next to the log by simulate")
    c.add_argument("--scenario", choices=sorted(SCENARIOS), help="overrides scenario= in config")
    c.set_defaults(func=cmd_check)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
