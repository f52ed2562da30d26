"""Monte Carlo competition study: sampling, cell runs, tables and the meta game."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import SamplingExhausted
from .racing import CraftState, RaceParams, TrackLayout, default_track, on_track
from .racing.model import collided
from .sim import (
    ALL_CELLS, CANONICAL_CELLS, STRATEGY_ORDER, CompetitionType, PlannerOptions, SimTrace,
    format_trace, parse_trace, read_trace, simulate,
)

MAX_REJECTIONS = 1000


@dataclass(frozen=True)
class InitialCondition:
    p1: CraftState
    p2: CraftState
    track_phase: float
    seed: int
    index: int = 0


def _condition_seed(master_seed: int, index: int) -> int:
    ss = np.random.SeedSequence([master_seed, index])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def sample_condition(rng, track: TrackLayout, params: RaceParams, r_min: float | None = None,
                     r_max: float | None = None) -> tuple[CraftState, CraftState, float]:
    """One feasible start: P1 on the track at a random phase, P2 on a ring around P1."""
    r_min = params.r_plan if r_min is None else r_min
    r_max = 2 * params.r_plan if r_max is None else r_max
    half = track.width / 2
    for _ in range(MAX_REJECTIONS):
        phase = float(rng.uniform(0.0, track.pattern_period))
        lat1 = track.center_lat(phase) + float(rng.uniform(-half, half))
        ang = float(rng.uniform(0.0, 2 * math.pi))
        rad = float(rng.uniform(r_min, r_max))
        v1 = float(rng.uniform(1.5, 3.0))
        v2 = v1 + float(rng.uniform(0.0, 1.5))
        p1 = CraftState(lat1, phase, v1, 0.0)
        p2 = CraftState(lat1 + rad * math.sin(ang), phase + rad * math.cos(ang), v2, 0.0)
        if (on_track(track, p1.position) and on_track(track, p2.position)
                and not collided(p1.position, p2.position, params)):
            return p1, p2, phase
    raise SamplingExhausted(f"no feasible start after {MAX_REJECTIONS} draws")


def sample_initial_conditions(n: int, params: RaceParams | None = None, master_seed: int = 0,
                              track: TrackLayout | None = None) -> list[InitialCondition]:
    if n < 1:
        raise ValueError("n must be at least 1")
    params = params or RaceParams()
    track = track or default_track(width=params.w_track)
    out = []
    for j in range(n):
        seed = _condition_seed(master_seed, j)
        p1, p2, phase = sample_condition(np.random.default_rng(seed), track, params)
        out.append(InitialCondition(p1, p2, phase, seed, j))
    return out


# --------------------------------------------------------------------------
# running


@dataclass
class StudyConfig:
    params: RaceParams = field(default_factory=RaceParams)
    horizon_steps: int = 25
    track: TrackLayout | None = None
    opts: PlannerOptions = field(default_factory=PlannerOptions)


def trace_path(out_dir, cell: CompetitionType, index: int) -> Path:
    return Path(out_dir) / "traces" / cell.label / f"{index:04d}.trace"


def _run_task(task) -> tuple[str, int, str]:
    cond, cell, cfg = task
    tr = simulate((cond.p1, cond.p2), cell, cfg.params, cfg.horizon_steps, cond.seed,
                  cfg.track, cfg.opts)
    return cell.label, cond.index, format_trace(tr)


def _stored(path: Path, cell: CompetitionType, cond: InitialCondition, horizon: int):
    if not path.exists():
        return None
    try:
        tr = read_trace(path)
    except (ValueError, KeyError, IndexError):
        return None
    if tr.pair != cell or tr.seed != cond.seed or tr.horizon != horizon:
        return None
    return tr


def run_study(conditions: list, params: RaceParams | None = None, horizon_steps: int = 25,
              cells=CANONICAL_CELLS, workers: int = 1, out_dir=None, track: TrackLayout | None = None,
              opts: PlannerOptions | None = None, progress=None) -> "StudyResults":
    """Simulate every condition in every requested canonical cell.

    Mirrored cells reuse the canonical traces with the labels swapped. With
    ``out_dir`` each trace is written as soon as it finishes and existing
    matching traces are reused, so an interrupted study resumes. Results do
    not depend on ``workers``.
    """
    if not conditions:
        raise ValueError("conditions must be nonempty")
    cfg = StudyConfig(params or RaceParams(), horizon_steps, track, opts or PlannerOptions())
    cells = [c.canonical() for c in cells]
    cells = [c for c in CANONICAL_CELLS if c in cells]
    traces: dict[str, dict[int, SimTrace]] = {c.label: {} for c in cells}
    todo = []
    # condition-major order: an interrupted study has balanced cells
    for cond in conditions:
        for cell in cells:
            tr = _stored(trace_path(out_dir, cell, cond.index), cell, cond, horizon_steps) \
                if out_dir is not None else None
            if tr is None:
                todo.append((cond, cell, cfg))
            else:
                traces[cell.label][cond.index] = tr

    def take(label, index, text):
        if out_dir is not None:
            path = trace_path(out_dir, CompetitionType.parse(label), index)
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(text)
        traces[label][index] = parse_trace(text)
        if progress is not None:
            progress(label, index, len(todo))

    if workers <= 1 or len(todo) <= 1:
        for task in todo:
            take(*_run_task(task))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_task, t) for t in todo]
            for fut in as_completed(futures):
                take(*fut.result())
    order = [c.index for c in conditions]
    by_cell = {label: [d[i] for i in order] for label, d in traces.items()}
    return StudyResults.from_canonical(conditions, by_cell, horizon_steps)


# --------------------------------------------------------------------------
# statistics


@dataclass(frozen=True)
class CellStat:
    mean: float
    half: float          # half-width of the normal-approximation 95% interval
    n: int

    @property
    def low(self) -> float:
        return self.mean - self.half

    @property
    def high(self) -> float:
        return self.mean + self.half

    def overlaps(self, other: "CellStat") -> bool:
        return self.low <= other.high and other.low <= self.high


Z95 = 1.96


def mean_ci(samples) -> CellStat:
    x = np.asarray(samples, dtype=float)
    n = x.size
    if n == 0:
        return CellStat(math.nan, math.nan, 0)
    half = Z95 * float(np.std(x, ddof=1)) / math.sqrt(n) if n >= 2 else math.nan
    return CellStat(float(np.mean(x)), half, n)


def meta_game_nash(cost_p1, cost_p2) -> set[tuple[int, int]]:
    """Pure equilibria of the bimatrix game with costs indexed ``[row, col]``.

    Rows are P2's strategies and columns P1's. A cell is an equilibrium when
    P1 cannot lower its cost by changing column and P2 cannot lower its cost
    by changing row.
    """
    A = np.asarray(cost_p1, dtype=float)
    B = np.asarray(cost_p2, dtype=float)
    if A.shape != B.shape or A.ndim != 2:
        raise ValueError("cost tables must be matrices of equal shape")
    out = set()
    for r in range(A.shape[0]):
        for c in range(A.shape[1]):
            if A[r, c] <= A[r, :].min() and B[r, c] <= B[:, c].min():
                out.add((r, c))
    return out


@dataclass
class StudyResults:
    """Traces per competition cell plus the derived tables.

    Tables are 4x4 lists of CellStat indexed ``[row][col]`` with the row the
    P2 strategy and the column the P1 strategy, both in STRATEGY_ORDER.
    Costs are P1's total running cost, unscaled.
    """

    conditions: list
    cells: dict                  # label -> list of SimTrace, one per condition
    horizon: int

    @classmethod
    def from_canonical(cls, conditions, canonical: dict, horizon: int) -> "StudyResults":
        cells = dict(canonical)
        for label, trs in canonical.items():
            cell = CompetitionType.parse(label)
            if cell.p1 != cell.p2:
                cells[cell.swapped().label] = [t.mirrored() for t in trs]
        return cls(list(conditions), cells, horizon)

    @property
    def complete(self) -> bool:
        n = len(self.conditions)
        return all(len(self.cells.get(c.label, ())) == n for c in ALL_CELLS)

    @property
    def missing_cells(self) -> list[str]:
        n = len(self.conditions)
        return [c.label for c in CANONICAL_CELLS if len(self.cells.get(c.label, ())) != n]

    def _table(self, metric) -> list[list[CellStat]]:
        out = []
        for p2 in STRATEGY_ORDER:
            row = []
            for p1 in STRATEGY_ORDER:
                trs = self.cells.get(CompetitionType(p1, p2).label, [])
                row.append(mean_ci([metric(t) for t in trs]))
            out.append(row)
        return out

    def _averages(self, metric) -> list[CellStat]:
        """Per P1 strategy, pooled over all P2 strategies."""
        out = []
        for p1 in STRATEGY_ORDER:
            vals = [metric(t) for p2 in STRATEGY_ORDER
                    for t in self.cells.get(CompetitionType(p1, p2).label, [])]
            out.append(mean_ci(vals))
        return out

    @staticmethod
    def _steps(t: SimTrace) -> float:
        return float(t.steps_completed)

    @staticmethod
    def _cost(t: SimTrace) -> float:
        return t.total_cost(0)

    @property
    def steps_table(self):
        return self._table(self._steps)

    @property
    def cost_table(self):
        return self._table(self._cost)

    @property
    def steps_averages(self):
        return self._averages(self._steps)

    @property
    def cost_averages(self):
        return self._averages(self._cost)

    def cost_means(self) -> np.ndarray:
        return np.array([[s.mean for s in row] for row in self.cost_table])

    @property
    def meta_equilibria(self) -> set[CompetitionType]:
        A = self.cost_means()
        return {CompetitionType(STRATEGY_ORDER[c], STRATEGY_ORDER[r])
                for r, c in meta_game_nash(A, A.T)}

    def cost_curves(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        """Per cell: mean P1 stage cost at each step over traces still running, and counts."""
        out = {}
        for cell in ALL_CELLS:
            trs = self.cells.get(cell.label, [])
            tot = np.zeros(self.horizon)
            cnt = np.zeros(self.horizon, dtype=int)
            for t in trs:
                for r in t.steps:
                    tot[r.step] += r.costs[0]
                    cnt[r.step] += 1
            with np.errstate(invalid="ignore", divide="ignore"):
                out[cell.label] = (np.where(cnt > 0, tot / np.maximum(cnt, 1), np.nan), cnt)
        return out


# --------------------------------------------------------------------------
# formatting

COST_SCALE = 100.0


def _fmt(s: CellStat, scale: float = 1.0, digits: int = 2) -> str:
    if s.n == 0:
        return "-"
    half = "nan" if math.isnan(s.half) else f"{s.half * scale:.{digits}f}"
    return f"{s.mean * scale:.{digits}f} ±{half}"


def _grid(title: str, table, averages, scale: float, digits: int) -> list[str]:
    head = ["P2 \\ P1"] + [f"{k.long_name} ({k.value})" for k in STRATEGY_ORDER]
    rows = [[f"{k.long_name} ({k.value})"] + [_fmt(s, scale, digits) for s in row]
            for k, row in zip(STRATEGY_ORDER, table)]
    rows.append(["Average"] + [_fmt(s, scale, digits) for s in averages])
    widths = [max(len(r[j]) for r in [head] + rows) for j in range(len(head))]
    line = lambda r: "  ".join(v.rjust(w) if j else v.ljust(w) for j, (v, w) in enumerate(zip(r, widths)))
    sep = "-" * len(line(head))
    return [title, sep, line(head), sep] + [line(r) for r in rows[:-1]] + [sep, line(rows[-1]), sep]


def _overlap_notes(name: str, table, averages, want_min: bool = True) -> list[str]:
    notes = []
    flat = [(s, CompetitionType(STRATEGY_ORDER[c], STRATEGY_ORDER[r]).label)
            for r, row in enumerate(table) for c, s in enumerate(row) if s.n]
    if flat:
        best, label = min(flat, key=lambda p: p[0].mean)
        over = [lab for s, lab in flat if lab != label and s.overlaps(best)]
        notes.append(f"{name}: minimum cell {label}; CI overlaps: {', '.join(over) or 'none'}")
    avg = [(s, k) for s, k in zip(averages, STRATEGY_ORDER) if s.n]
    if avg:
        best, k = min(avg, key=lambda p: p[0].mean)
        over = [o.long_name for s, o in avg if o != k and s.overlaps(best)]
        notes.append(f"{name}: minimum average {k.long_name}; CI overlaps: {', '.join(over) or 'none'}")
    return notes


def summarize(results: StudyResults) -> str:
    """Both tables with 95% intervals, the averages, overlap flags and the meta game."""
    n = len(results.conditions)
    out = [f"conditions: {n}  horizon: {results.horizon}", ""]
    out += _grid("Robustness: mean number of completed steps (±95% CI)",
                 results.steps_table, results.steps_averages, 1.0, 2)
    out.append("")
    out += _grid(f"Performance: mean total running cost for P1 (x{COST_SCALE:g}, ±95% CI; "
                 "transpose for P2)", results.cost_table, results.cost_averages, COST_SCALE, 3)
    out.append("")
    out += _overlap_notes("steps", results.steps_table, results.steps_averages)
    out += _overlap_notes("cost", results.cost_table, results.cost_averages)
    if results.complete:
        meta = sorted(c.label for c in results.meta_equilibria)
        out.append("meta-game pure equilibria (P1-P2): " + (", ".join(meta) or "none"))
    else:
        out.append("incomplete cells: " + ", ".join(results.missing_cells))
    return "\n".join(out) + "\n"


# --------------------------------------------------------------------------
# persistence

CONDITION_COLUMNS = ("index", "seed", "track_phase", "lat1", "long1", "v1", "theta1",
                     "lat2", "long2", "v2", "theta2")


def write_conditions(path, conditions) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CONDITION_COLUMNS)
        for c in conditions:
            w.writerow([c.index, c.seed, repr(c.track_phase)]
                       + [repr(float(v)) for v in (*c.p1.as_array(), *c.p2.as_array())])


def read_conditions(path) -> list[InitialCondition]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            v = [float(row[k]) for k in CONDITION_COLUMNS[3:]]
            out.append(InitialCondition(CraftState(*v[:4]), CraftState(*v[4:]),
                                        float(row["track_phase"]), int(row["seed"]),
                                        int(row["index"])))
    return out


MANIFEST = "manifest.txt"


def bundled_smoke_dir() -> Path:
    """The 10-condition smoke study shipped with the package (read-only)."""
    return Path(__file__).resolve().parent / "data" / "smoke"


def write_manifest(out_dir, entries: dict) -> None:
    lines = [f"{k} = {v}" for k, v in entries.items()]
    (Path(out_dir) / MANIFEST).write_text("\n".join(lines) + "\n")


def read_manifest(out_dir) -> dict:
    out = {}
    for line in (Path(out_dir) / MANIFEST).read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def load_results(out_dir, finished_only: bool = False) -> StudyResults:
    """Rebuild results from a study directory; missing traces leave cells short.

    With ``finished_only`` the results keep just the conditions whose traces
    exist in every canonical cell, which gives balanced tables for a study
    that is still running.
    """
    out_dir = Path(out_dir)
    manifest = read_manifest(out_dir)
    horizon = int(manifest["horizon_steps"])
    conditions = read_conditions(out_dir / "conditions.csv")
    stored = {cell.label: [_stored(trace_path(out_dir, cell, c.index), cell, c, horizon)
                           for c in conditions] for cell in CANONICAL_CELLS}
    if finished_only:
        keep = [j for j in range(len(conditions))
                if all(trs[j] is not None for trs in stored.values())]
        conditions = [conditions[j] for j in keep]
        stored = {k: [trs[j] for j in keep] for k, trs in stored.items()}
    canonical = {k: [t for t in trs if t is not None] for k, trs in stored.items()}
    return StudyResults.from_canonical(conditions, canonical, horizon)
