"""Implicit cell-centered finite-difference solver for 2-D transient saturated flow.

Backward Euler in time, 5-point stencil in space, harmonic-mean face
conductivity. Constant-head boundaries are whole columns/rows of constant-head
cells; sides without a constant head are no-flow.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)

RESIDUAL_TOL = 1e-10
SIDES = ("left", "right", "bottom", "top")


class SolverError(RuntimeError):
    def __init__(self, msg: str, step: int | None = None):
        super().__init__(msg if step is None else f"step {step}: {msg}")
        self.step = step


@dataclass(frozen=True)
class Grid2D:
    nx: int = 51
    ny: int = 51
    dx: float = 20.0
    dy: float = 20.0

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise ValueError("grid needs at least 2 cells per axis")
        if not (self.dx > 0 and self.dy > 0):
            raise ValueError("cell sizes must be positive")

    @property
    def length_x(self) -> float:
        return self.nx * self.dx

    @property
    def length_y(self) -> float:
        return self.ny * self.dy

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        return (np.arange(self.nx) + 0.5) * self.dx, (np.arange(self.ny) + 0.5) * self.dy

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        """(row, col) of the cell containing the point."""
        return int(min(y // self.dy, self.ny - 1)), int(min(x // self.dx, self.nx - 1))


@dataclass(frozen=True)
class ConstantHead:
    """Constant-head side. ``changes`` holds (time, new value) pairs, applied from that time on."""

    value: float
    changes: tuple[tuple[float, float], ...] = ()

    def at(self, t: float) -> float:
        v = self.value
        for tc, vc in sorted(self.changes):
            if t >= tc - 1e-9:
                v = vc
        return v


@dataclass(frozen=True)
class WellSpec:
    row: int
    col: int
    rate: float
    head_floor: float | None = None

    def __post_init__(self):
        if self.rate < 0:
            raise ValueError("well rate must be >= 0 (positive = extraction)")


@dataclass(frozen=True)
class FlowProblem:
    grid: Grid2D
    conductivity: np.ndarray  # (ny, nx) cell values
    initial_heads: np.ndarray  # (ny, nx)
    specific_storage: float = 1e-4
    dt: float = 0.2
    n_steps: int = 50
    left: ConstantHead | None = None
    right: ConstantHead | None = None
    bottom: ConstantHead | None = None
    top: ConstantHead | None = None
    wells: tuple[WellSpec, ...] = ()

    def __post_init__(self):
        g = self.grid
        k = np.asarray(self.conductivity, dtype=float)
        h0 = np.asarray(self.initial_heads, dtype=float)
        if k.shape != (g.ny, g.nx) or h0.shape != (g.ny, g.nx):
            raise ValueError("conductivity and initial heads must have shape (ny, nx)")
        if not np.all(np.isfinite(k)) or np.any(k <= 0):
            raise ValueError("conductivity must be finite and strictly positive")
        if not (self.dt > 0 and self.specific_storage > 0):
            raise ValueError("dt and specific storage must be positive")
        for side in SIDES:
            bc = getattr(self, side)
            if bc is not None and not np.isfinite([bc.value, *(v for _, v in bc.changes)]).all():
                raise ValueError(f"{side} constant head must be finite")
        for w in self.wells:
            if not (0 < w.row < g.ny - 1 and 0 < w.col < g.nx - 1):
                raise ValueError(f"well cell ({w.row}, {w.col}) is not in the grid interior")
        object.__setattr__(self, "conductivity", k)
        object.__setattr__(self, "initial_heads", h0)

    def boundary_values(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        """Mask of constant-head cells and their prescribed heads at time ``t``."""
        g = self.grid
        mask = np.zeros((g.ny, g.nx), bool)
        vals = np.zeros((g.ny, g.nx))
        sl = {"left": np.s_[:, 0], "right": np.s_[:, -1], "bottom": np.s_[0, :], "top": np.s_[-1, :]}
        for side in SIDES:
            bc = getattr(self, side)
            if bc is not None:
                mask[sl[side]] = True
                vals[sl[side]] = bc.at(t)
        return mask, vals


@dataclass
class WellRecord:
    step: int
    mode: str  # "rate" or "head"
    head: float


@dataclass
class HeadSolution:
    grid: Grid2D
    dt: float
    times: np.ndarray
    heads: np.ndarray  # (n_steps + 1, ny, nx)
    well_log: list[list[WellRecord]] = field(default_factory=list)
    mass_balance: np.ndarray | None = None  # relative residual per step

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1


def _face_transmissivity(k: np.ndarray):
    """Harmonic-mean conductivity on interior x faces (ny, nx-1) and y faces (ny-1, nx)."""
    kx = 2.0 * k[:, 1:] * k[:, :-1] / (k[:, 1:] + k[:, :-1])
    ky = 2.0 * k[1:, :] * k[:-1, :] / (k[1:, :] + k[:-1, :])
    return kx, ky


class _Stepper:
    """Factorized backward-Euler system for a fixed set of constant-head cells."""

    def __init__(self, problem: FlowProblem, fixed: np.ndarray):
        g = problem.grid
        self.problem = problem
        self.fixed = fixed.ravel()
        n = g.nx * g.ny
        idx = np.arange(n).reshape(g.ny, g.nx)
        kx, ky = _face_transmissivity(problem.conductivity)
        cx = kx / g.dx**2
        cy = ky / g.dy**2
        rows, cols, data = [], [], []
        diag = np.full(n, problem.specific_storage / problem.dt)
        for a, b, c in ((idx[:, :-1], idx[:, 1:], cx), (idx[:-1, :], idx[1:, :], cy)):
            a, b, c = a.ravel(), b.ravel(), c.ravel()
            rows += [a, b]
            cols += [b, a]
            data += [-c, -c]
            np.add.at(diag, a, c)
            np.add.at(diag, b, c)
        off = sp.csr_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
        self.off = off
        self.diag = diag
        active = ~self.fixed
        a = sp.diags(np.where(active, diag, 1.0)) + sp.diags(active.astype(float)) @ off
        self.matrix = a.tocsc()
        self.solve = spla.factorized(self.matrix)

    def step(self, h_prev: np.ndarray, fixed_vals: np.ndarray, sink: np.ndarray, step: int) -> np.ndarray:
        p = self.problem
        rhs = np.where(self.fixed, fixed_vals.ravel(), p.specific_storage / p.dt * h_prev.ravel() - sink.ravel())
        h = self.solve(rhs)
        res = np.linalg.norm(self.matrix @ h - rhs)
        scale = max(np.linalg.norm(rhs), np.finfo(float).tiny)
        if not np.isfinite(res) or res / scale > RESIDUAL_TOL:
            raise SolverError(f"linear solve relative residual {res / scale:.3e} exceeds {RESIDUAL_TOL}", step)
        return h.reshape(h_prev.shape)


def well_sink(problem: FlowProblem, rate_wells) -> np.ndarray:
    g = problem.grid
    q = np.zeros((g.ny, g.nx))
    for w in rate_wells:
        q[w.row, w.col] += w.rate / (g.dx * g.dy)
    return q


def assemble_and_step(problem: FlowProblem, current_heads: np.ndarray, t_next: float,
                      head_controlled: frozenset = frozenset()) -> np.ndarray:
    """One implicit step from ``current_heads`` to time ``t_next``.

    Wells listed (by index) in ``head_controlled`` act as constant-head cells at
    their floor; all other wells extract at their rate.
    """
    current_heads = np.asarray(current_heads, float)
    if current_heads.shape != (problem.grid.ny, problem.grid.nx):
        raise ValueError("head field does not match the grid")
    mask, vals = problem.boundary_values(t_next)
    mask, vals = mask.copy(), vals.copy()
    for i in head_controlled:
        w = problem.wells[i]
        mask[w.row, w.col] = True
        vals[w.row, w.col] = w.head_floor
    rate_wells = [w for i, w in enumerate(problem.wells) if i not in head_controlled]
    return _Stepper(problem, mask).step(current_heads, vals, well_sink(problem, rate_wells), -1)


def apply_well_control(well: WellSpec, tentative: np.ndarray, resolve) -> tuple[np.ndarray, bool]:
    """Keep the rate-controlled result unless the well head dropped below its floor.

    ``resolve`` recomputes the step with the well held at its floor. Returns the
    final head field and whether the well switched.
    """
    if well.head_floor is None or tentative[well.row, well.col] >= well.head_floor:
        return tentative, False
    return resolve(), True


def mass_balance_residual(problem: FlowProblem, h_prev, h_next, fixed: np.ndarray, sink: np.ndarray) -> float:
    """Relative mismatch between storage change of active cells and net inflow."""
    g = problem.grid
    area = g.dx * g.dy
    active = ~fixed
    storage = problem.specific_storage * area * np.sum((h_next - h_prev)[active]) / problem.dt
    kx, ky = _face_transmissivity(problem.conductivity)
    # flux across faces between a fixed and an active cell, positive into the active one
    inflow = 0.0
    fx = kx * g.dy / g.dx * (h_next[:, :-1] - h_next[:, 1:])  # from left cell to right cell
    fy = ky * g.dx / g.dy * (h_next[:-1, :] - h_next[1:, :])
    inflow += np.sum(fx[fixed[:, :-1] & active[:, 1:]]) - np.sum(fx[active[:, :-1] & fixed[:, 1:]])
    inflow += np.sum(fy[fixed[:-1, :] & active[1:, :]]) - np.sum(fy[active[:-1, :] & fixed[1:, :]])
    extraction = np.sum(sink[active]) * area
    net = inflow - extraction
    scale = max(abs(storage), abs(inflow), abs(extraction), np.finfo(float).tiny)
    return abs(storage - net) / scale


def simulate(problem: FlowProblem) -> HeadSolution:
    g = problem.grid
    heads = np.empty((problem.n_steps + 1, g.ny, g.nx))
    heads[0] = problem.initial_heads
    times = problem.dt * np.arange(problem.n_steps + 1)
    controlled: set[int] = set()
    steppers: dict[bytes, _Stepper] = {}
    well_log: list[list[WellRecord]] = []
    balance = np.zeros(problem.n_steps)

    def stepper_for(mask):
        key = np.packbits(mask).tobytes()
        if key not in steppers:
            steppers[key] = _Stepper(problem, mask)
        return steppers[key]

    def solve(n, ctl):
        mask, vals = problem.boundary_values(times[n])
        mask, vals = mask.copy(), vals.copy()
        for i in ctl:
            w = problem.wells[i]
            mask[w.row, w.col] = True
            vals[w.row, w.col] = w.head_floor
        sink = well_sink(problem, [w for i, w in enumerate(problem.wells) if i not in ctl])
        h = stepper_for(mask).step(heads[n - 1], vals, sink, n)
        return h, mask, sink

    for n in range(1, problem.n_steps + 1):
        h, mask, sink = solve(n, controlled)
        for i, w in enumerate(problem.wells):
            if i in controlled:
                continue
            newly = controlled | {i}
            h_new, switched = apply_well_control(w, h, lambda: solve(n, newly))
            if switched:
                log.info("well %d switched to head control at step %d", i, n)
                controlled = newly
                h, mask, sink = h_new
        heads[n] = h
        balance[n - 1] = mass_balance_residual(problem, heads[n - 1], h, mask, sink)
        well_log.append([
            WellRecord(n, "head" if i in controlled else "rate", float(h[w.row, w.col]))
            for i, w in enumerate(problem.wells)
        ])
    return HeadSolution(grid=g, dt=problem.dt, times=times, heads=heads, well_log=well_log, mass_balance=balance)


def base_problem(conductivity: np.ndarray, grid: Grid2D | None = None, **overrides) -> FlowProblem:
    """The standard setup: left head 1, right head 0, no-flow top/bottom, 50 steps of 0.2."""
    grid = grid or Grid2D()
    h0 = np.zeros((grid.ny, grid.nx))
    h0[:, 0] = 1.0
    kw = dict(grid=grid, conductivity=conductivity, initial_heads=h0, specific_storage=1e-4,
              dt=0.2, n_steps=50, left=ConstantHead(1.0), right=ConstantHead(0.0))
    kw.update(overrides)
    return FlowProblem(**kw)


@dataclass
class Observations:
    """Labeled head records; one row per (step, cell)."""

    step: np.ndarray
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    h: np.ndarray

    def __len__(self) -> int:
        return len(self.h)

    def with_heads(self, h: np.ndarray) -> "Observations":
        return replace(self, h=np.asarray(h, float))

    def subset(self, idx) -> "Observations":
        return Observations(self.step[idx], self.t[idx], self.x[idx], self.y[idx], self.h[idx])

    @classmethod
    def concat(cls, parts) -> "Observations":
        parts = list(parts)
        return cls(*(np.concatenate([getattr(p, k) for p in parts]) for k in ("step", "t", "x", "y", "h")))

    def to_csv(self, path) -> None:
        write_rows(path, ("step", "t", "x", "y", "h"), [self.step, self.t, self.x, self.y, self.h])

    @classmethod
    def from_csv(cls, path) -> "Observations":
        cols = read_rows(path)
        return cls(cols["step"].astype(int), cols["t"], cols["x"], cols["y"], cols["h"])


def extract_observations(solution: HeadSolution, steps, points_per_step: int, seed: int) -> Observations:
    g = solution.grid
    ncell = g.nx * g.ny
    if points_per_step > ncell:
        raise ValueError(f"cannot draw {points_per_step} distinct cells from {ncell}")
    rng = np.random.default_rng(seed)
    xc, yc = g.centers()
    parts = []
    for s in steps:
        if not 0 <= s <= solution.n_steps:
            raise ValueError(f"step {s} outside solution range")
        cells = rng.choice(ncell, size=points_per_step, replace=False)
        r, c = np.divmod(cells, g.nx)
        parts.append(Observations(
            step=np.full(points_per_step, s), t=np.full(points_per_step, solution.times[s]),
            x=xc[c], y=yc[r], h=solution.heads[s][r, c],
        ))
    return Observations.concat(parts)


def solution_rows(solution: HeadSolution, steps=None):
    """Long-format columns (step, t, x, y, h) for the requested steps."""
    g = solution.grid
    steps = range(solution.n_steps + 1) if steps is None else list(steps)
    xc, yc = g.centers()
    X, Y = np.meshgrid(xc, yc)
    step = np.concatenate([np.full(X.size, s) for s in steps])
    t = solution.times[step]
    x = np.tile(X.ravel(), len(steps))
    y = np.tile(Y.ravel(), len(steps))
    h = np.concatenate([solution.heads[s].ravel() for s in steps])
    return step, t, x, y, h


def write_rows(path, names, columns) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(names) + "\n")
        for row in zip(*columns):
            fh.write(",".join(str(int(v)) if isinstance(v, (np.integer, int)) else repr(float(v)) for v in row))
            fh.write("\n")


def read_rows(path) -> dict[str, np.ndarray]:
    with open(path) as fh:
        names = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return {n: data[:, i] for i, n in enumerate(names)}


def _bc_meta(bc):
    return None if bc is None else {"value": bc.value, "changes": [list(c) for c in bc.changes]}


def save_solution(solution: HeadSolution, problem: FlowProblem, directory) -> list[Path]:
    """Write ``solution.csv`` and ``solution.json``; returns the written paths."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    g = solution.grid
    meta = {
        "format": "tgnn-solution",
        "version": 1,
        "grid": {"nx": g.nx, "ny": g.ny, "dx": g.dx, "dy": g.dy},
        "dt": solution.dt,
        "n_steps": solution.n_steps,
        "specific_storage": problem.specific_storage,
        "boundaries": {s: _bc_meta(getattr(problem, s)) for s in SIDES},
        "wells": [{"row": w.row, "col": w.col, "rate": w.rate, "head_floor": w.head_floor} for w in problem.wells],
        "well_log": [[{"step": r.step, "mode": r.mode, "head": r.head} for r in step] for step in solution.well_log],
        "max_mass_balance_residual": float(np.max(solution.mass_balance)) if solution.mass_balance is not None
        and solution.mass_balance.size else 0.0,
    }
    csv_path, meta_path = d / "solution.csv", d / "solution.json"
    write_rows(csv_path, ("step", "t", "x", "y", "h"), solution_rows(solution))
    meta_path.write_text(json.dumps(meta, indent=2))
    return [csv_path, meta_path]


def load_solution(directory) -> HeadSolution:
    d = Path(directory)
    meta = json.loads((d / "solution.json").read_text())
    g = Grid2D(**meta["grid"])
    cols = read_rows(d / "solution.csv")
    n = meta["n_steps"]
    heads = cols["h"].reshape(n + 1, g.ny, g.nx)
    times = cols["t"].reshape(n + 1, -1)[:, 0]
    well_log = [[WellRecord(**r) for r in step] for step in meta["well_log"]]
    return HeadSolution(grid=g, dt=meta["dt"], times=times, heads=heads, well_log=well_log)
