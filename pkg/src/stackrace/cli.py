"""Command-line entry point: ``stackrace {solve,simulate,study,report}``.

Exit codes: 0 success, 2 unreadable input, 3 solver non-convergence,
4 incomplete study results.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import subprocess
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .bilevel import BilevelOptions, solve_bilevel
from .errors import ConfigError, InfeasibleStart, StackRaceError
from .mcp import SolverOptions
from .nash import solve_nash
from .racing import (
    CraftState, RaceParams, TrackLayout, build_game, default_track, fit_arc, load_track, stage_cost,
    step_dynamics,
)
from .sim import (
    CANONICAL_CELLS, CompetitionType, PlannerOptions, StrategyKind, Warm, _clip_control, plan,
    simulate, write_trace,
)
from .study import (
    load_results, run_study, sample_initial_conditions, write_conditions, write_manifest,
)
from . import toys

log = logging.getLogger("stackrace")

EXIT_OK, EXIT_PARSE, EXIT_SOLVER, EXIT_INCOMPLETE = 0, 2, 3, 4


# --------------------------------------------------------------------------
# configuration


@dataclass
class TrackSpec:
    file: str = ""              # "long lat" checkpoint file; empty for the built-in layout
    period: float = 0.0         # repeat length for a file track; 0 uses the file's span
    spacing: float = 2.5
    straight: float = 20.0
    turn: float = 40.0
    amplitude: float = 4.0
    jitter: float = 1e-3


@dataclass
class Config:
    params: RaceParams = field(default_factory=RaceParams)
    planner: PlannerOptions = field(default_factory=PlannerOptions)
    track: TrackSpec = field(default_factory=TrackSpec)
    n_conditions: int = 200
    horizon_steps: int = 25
    master_seed: int = 0
    workers: int = 1
    out_dir: str = "results"
    cells: str = "all"

    def build_track(self) -> TrackLayout:
        t = self.track
        if t.file:
            return load_track(t.file, self.params.w_track, t.period or None)
        return default_track(self.params.w_track, t.spacing, t.straight, t.turn, t.amplitude,
                             t.jitter)

    def cell_list(self) -> list[CompetitionType]:
        return parse_cells(self.cells)

    def to_text(self) -> str:
        lines = ["# resolved configuration"]
        for section, obj in (("", self), ("", self.params), ("track_", self.track),
                             ("", self.planner)):
            for f in dataclasses.fields(obj):
                if obj is self and f.name in ("params", "planner", "track"):
                    continue
                lines.append(f"{section}{f.name} = {getattr(obj, f.name)}")
        return "\n".join(lines) + "\n"


def parse_cells(text: str) -> list[CompetitionType]:
    if text.strip().lower() == "all":
        return list(CANONICAL_CELLS)
    out = []
    for part in text.split(","):
        if part.strip():
            cell = CompetitionType.parse(part.strip()).canonical()
            if cell not in out:
                out.append(cell)
    if not out:
        raise ValueError("empty cell list")
    return out


def _targets(cfg: Config) -> dict:
    """Config key -> (object, field) for every settable value."""
    out = {}
    for f in dataclasses.fields(RaceParams):
        out[f.name] = (cfg.params, f)
    for f in dataclasses.fields(PlannerOptions):
        out[f.name] = (cfg.planner, f)
    for f in dataclasses.fields(TrackSpec):
        out["track_" + f.name] = (cfg.track, f)
    for f in dataclasses.fields(Config):
        if f.name not in ("params", "planner", "track"):
            out[f.name] = (cfg, f)
    return out


def _convert(value: str, f: dataclasses.Field, current):
    kind = type(current)
    if kind is bool:
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {value!r}")
    if kind is int:
        return int(value)
    if kind is float:
        return float(value)
    return value


def read_key_values(path) -> list[tuple[int, str, str]]:
    """``key = value`` lines; ``#`` starts a comment."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    out = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        k, v = (s.strip() for s in line.split("=", 1))
        if not k or not v:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        out.append((lineno, k, v))
    return out


def load_config(path=None, overrides: dict | None = None) -> Config:
    """Defaults, then the file (if any), then command-line overrides."""
    cfg = Config()
    targets = _targets(cfg)
    raw = {}
    entries = read_key_values(path) if path else []
    entries += [(None, k, str(v)) for k, v in (overrides or {}).items() if v is not None]
    for lineno, k, v in entries:
        if k not in targets:
            raise ConfigError(f"unknown key {k!r}", lineno)
        obj, f = targets[k]
        try:
            val = _convert(v, f, getattr(obj, f.name))
        except ValueError as exc:
            raise ConfigError(f"{k}: {exc}", lineno) from None
        raw[k] = (lineno, obj, f.name, val)
    params_kw = {}
    for k, (lineno, obj, name, val) in raw.items():
        if obj is cfg.params:
            params_kw[name] = val
        else:
            setattr(obj, name, val)
    try:
        cfg.params = RaceParams(**params_kw)
        cfg.cell_list()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    for name in ("n_conditions", "horizon_steps", "workers"):
        if getattr(cfg, name) < 1:
            raise ConfigError(f"{name} must be at least 1")
    return cfg


def tool_version() -> str:
    """Package version plus ``git describe`` of the source tree when available."""
    try:
        desc = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                              cwd=Path(__file__).parent, capture_output=True, text=True,
                              timeout=5)
        if desc.returncode == 0 and desc.stdout.strip():
            return f"{__version__}+{desc.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_run_metadata(out_dir: Path, cfg: Config, extra: dict | None = None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(cfg.to_text())
    entries = {"version": tool_version(), "master_seed": cfg.master_seed}
    entries.update(extra or {})
    write_manifest(out_dir, entries)


# --------------------------------------------------------------------------
# scenarios


@dataclass
class Scenario:
    game: str = "racing"
    pair: CompetitionType = CompetitionType(StrategyKind.NASH, StrategyKind.NASH)
    p1: CraftState | None = None
    p2: CraftState | None = None


def _state(text: str) -> CraftState:
    vals = [float(v) for v in text.replace(",", " ").split()]
    if len(vals) != 4:
        raise ValueError(f"expected 'lat long v theta', got {text!r}")
    return CraftState(*vals)


def read_scenario(path) -> Scenario:
    sc = Scenario()
    for lineno, k, v in read_key_values(path):
        try:
            if k == "game":
                if v not in ("racing", "nash-toy", "stackelberg-toy"):
                    raise ValueError(f"unknown game {v!r}")
                sc.game = v
            elif k == "pair":
                sc.pair = CompetitionType.parse(v)
            elif k in ("p1", "p2"):
                setattr(sc, k, _state(v))
            else:
                raise ValueError(f"unknown key {k!r}")
        except ValueError as exc:
            raise ConfigError(str(exc), lineno) from None
    if sc.game == "racing" and (sc.p1 is None or sc.p2 is None):
        raise ConfigError("racing scenario needs p1 and p2 states")
    return sc


# --------------------------------------------------------------------------
# commands


def cmd_solve(cfg: Config, sc: Scenario, out=None) -> int:
    """Solve one game and print statuses, diagnostics, first controls and stage costs."""
    out = out or sys.stdout
    pr = lambda *a: print(*a, file=out)
    if sc.game != "racing":
        return _solve_toy(sc, pr)
    params, track = cfg.params, cfg.build_track()
    states = (sc.p1, sc.p2)
    arcs = tuple(fit_arc(track, s.position) for s in states)
    plans = []
    for i, strat in enumerate((sc.pair.p1, sc.pair.p2)):
        rg = build_game((states[i], states[1 - i]), (arcs[i], arcs[1 - i]), params)
        p = plan(strat, rg, 0, Warm(), cfg.planner)
        plans.append(p)
        pr(f"P{i + 1} {strat.long_name}: status {p.status}, rung {p.rung} "
           f"(level {p.fallback_level}), attempts {', '.join(p.attempts) or '-'}")
        pr(f"  KKT violation {p.certificate:.3e}")
        pr(f"  first control tau {p.controls[0, 0]:.9f} omega {p.controls[0, 1]:.9f}")
    ctrl = [_clip_control(plans[i].controls[0], states[i], states[1 - i], params) for i in range(2)]
    nxt = [step_dynamics(states[i], ctrl[i], params) for i in range(2)]
    for i in range(2):
        c = stage_cost(nxt[i], ctrl[i], nxt[1 - i], arcs[i], params)
        pr(f"P{i + 1} executed tau {ctrl[i].tau:.9f} omega {ctrl[i].omega:.9f} stage cost {c:.9e}")
    return EXIT_OK if all(p.fallback_level == 0 for p in plans) else EXIT_SOLVER


def _solve_toy(sc: Scenario, pr) -> int:
    if sc.game == "nash-toy":
        game = toys.nash_toy()
        res = solve_nash(game, np.zeros(2), opts=SolverOptions(tol=1e-12))
        cert = res.certificate(game)
        pr(f"nash: status {res.status.value}, iterations {res.iterations}, "
           f"KKT residual {res.kkt_residual:.3e}, violation {cert.violation:.3e}")
        pr(f"x = {res.x[0]:.12f} {res.x[1]:.12f}")
        for i in range(2):
            pr(f"P{i + 1} cost {game.players[i].cost(res.x):.12f}")
        return EXIT_OK if res.converged else EXIT_SOLVER
    game = toys.stackelberg_toy()
    leader = 0 if sc.pair.p1 is not StrategyKind.FOLLOWER else 1
    res = solve_bilevel(game, leader, np.zeros(2), BilevelOptions(mcp=SolverOptions(tol=1e-12)))
    pr(f"bilevel (leader P{leader + 1}): status {res.status.value}, outer iterations "
       f"{res.outer_iterations}, pieces checked {res.pieces_checked}")
    pr(f"x = {res.x[0]:.12f} {res.x[1]:.12f}")
    pr(f"leader cost {res.leader_cost:.12f}")
    return EXIT_OK if res.ok else EXIT_SOLVER


def cmd_simulate(cfg: Config, sc: Scenario | None, pair: CompetitionType | None,
                 condition: int, out=None) -> int:
    out = out or sys.stdout
    out_dir = Path(cfg.out_dir)
    track = cfg.build_track()
    if sc is not None:
        init, seed = (sc.p1, sc.p2), cfg.master_seed
        pair = pair or sc.pair
        source = "scenario"
    else:
        conds = sample_initial_conditions(condition + 1, cfg.params, cfg.master_seed, track)
        c = conds[condition]
        init, seed = (c.p1, c.p2), c.seed
        source = f"condition {condition}"
    pair = pair or CompetitionType(StrategyKind.NASH, StrategyKind.NASH)
    tr = simulate(init, pair, cfg.params, cfg.horizon_steps, seed, track, cfg.planner)
    write_run_metadata(out_dir, cfg, {"command": "simulate", "pair": pair.label,
                                      "initial_state": source})
    write_trace(tr, out_dir / f"{pair.label}.trace")
    s = tr.summary()
    (out_dir / "summary.txt").write_text("".join(f"{k} = {v}\n" for k, v in s.items()))
    print(f"{pair.label}: {s['termination']} after {s['steps']} steps"
          + (f" (violation at step {s['violation_step']})" if s["violation_step"] >= 0 else "")
          + f", cost P1 {s['cost_p1']:.6e} P2 {s['cost_p2']:.6e}", file=out)
    return EXIT_OK


def cmd_study(cfg: Config, out=None) -> int:
    out = out or sys.stdout
    out_dir = Path(cfg.out_dir)
    track = cfg.build_track()
    cells = cfg.cell_list()
    conds = sample_initial_conditions(cfg.n_conditions, cfg.params, cfg.master_seed, track)
    write_run_metadata(out_dir, cfg, {
        "command": "study", "n_conditions": cfg.n_conditions,
        "horizon_steps": cfg.horizon_steps, "cells": ",".join(c.label for c in cells),
        "cost_accumulation": "realized stage costs summed over executed steps; "
                             "terminated runs contribute partial sums"})
    write_conditions(out_dir / "conditions.csv", conds)
    total = len(conds) * len(cells)
    done = [0]

    def progress(label, index, _):
        done[0] += 1
        log.info("finished %s condition %d (%d/%d new)", label, index, done[0], total)

    run_study(conds, cfg.params, cfg.horizon_steps, cells, cfg.workers, out_dir, track,
              cfg.planner, progress)
    return cmd_report(out_dir, out)


def cmd_report(results_dir, out=None, report_dir=None) -> int:
    """Write the report into ``report_dir`` (default: ``<results_dir>/report``)."""
    out = out or sys.stdout
    from .report import write_report
    results_dir = Path(results_dir)
    if not (results_dir / "conditions.csv").exists():
        print(f"no study results in {results_dir}", file=sys.stderr)
        return EXIT_INCOMPLETE
    res = load_results(results_dir)
    rep = write_report(res, Path(report_dir) if report_dir else results_dir / "report")
    out.write((rep / "tables.txt").read_text())
    if not res.complete:
        print("results incomplete: " + ", ".join(res.missing_cells), file=sys.stderr)
        return EXIT_INCOMPLETE
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key = value configuration file")
    common.add_argument("--seed", type=int, metavar="N", help="master seed")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--cells", metavar="LIST", help="comma-separated canonical cells, e.g. L-L,S-F")
    common.add_argument("--workers", type=int, metavar="N", help="worker processes for the study")
    common.add_argument("--dynamics", choices=("integrated", "paper-literal"),
                        help="velocity update variant")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="stackrace", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("solve", parents=[common], help="solve one game and print the equilibrium")
    s.add_argument("scenario", help="scenario file (game, pair, p1, p2)")
    s.add_argument("--pair", help="strategy pair such as L-F (overrides the scenario)")
    s = sub.add_parser("simulate", parents=[common], help="run one receding-horizon race")
    s.add_argument("scenario", nargs="?", help="scenario file with p1/p2 states")
    s.add_argument("--pair", help="strategy pair such as L-F")
    s.add_argument("--condition", type=int, default=0,
                   help="sampled initial condition index when no scenario is given")
    sub.add_parser("study", parents=[common], help="run the competition study")
    s = sub.add_parser("report", parents=[common], help="tables and plots for a study directory")
    s.add_argument("results", nargs="?",
                   help="study directory; without it --out is the study directory, "
                        "with it --out receives the report")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {"master_seed": args.seed, "out_dir": args.out, "cells": args.cells,
                 "workers": args.workers, "dynamics_mode": args.dynamics}
    try:
        cfg = load_config(args.config, overrides)
        pair = CompetitionType.parse(args.pair) if getattr(args, "pair", None) else None
        if args.command == "solve":
            sc = read_scenario(args.scenario)
            if pair is not None:
                sc.pair = pair
            return cmd_solve(cfg, sc)
        if args.command == "simulate":
            sc = read_scenario(args.scenario) if args.scenario else None
            if args.condition < 0:
                raise ConfigError("--condition must be non-negative")
            return cmd_simulate(cfg, sc, pair, args.condition)
        if args.command == "study":
            return cmd_study(cfg)
        if args.results:
            return cmd_report(args.results, report_dir=args.out)
        return cmd_report(cfg.out_dir)
    except (ConfigError, InfeasibleStart, ValueError) as exc:
        print(f"stackrace: error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except StackRaceError as exc:
        print(f"stackrace: error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
