"""End-to-end experiment harness: spec files, corruption models, TgNN/ANN runs, metrics.

A scenario builds a conductivity realization, simulates the reference heads,
draws (and optionally corrupts) observations, trains a theory-guided network
and a data-only baseline with identical architecture, initialization and
optimizer, then scores both on a held-out window of time steps.
"""

from __future__ import annotations

import json
import logging
import math
import typing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .groundtruth import (
    ConstantHead,
    FlowProblem,
    Grid2D,
    HeadSolution,
    Observations,
    WellSpec,
    extract_observations,
    read_rows,
    simulate,
    write_rows,
)
from .kle import ConductivityField, CovarianceSpec, build_basis_2d
from .net import MlpParams, init_params, predict, save_checkpoint
from .physics_loss import Labeled, LossWeights, Physics, Points, PointSets
from .training import TrainConfig, TrainResult, train, transfer_mask, transfer_retrain, write_log

log = logging.getLogger(__name__)

KINDS = ("future_prediction", "changed_bc", "noisy", "outliers", "transfer", "engineering_control")
H_DIFF_MODES = ("range", "initial")
ANN_NEW_BC_MODES = ("after_change", "switch_time")


class SpecError(ValueError):
    """Invalid or incomplete scenario specification."""


class StageError(RuntimeError):
    """A scenario stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


# ---------------------------------------------------------------- metrics

def relative_l2(pred, true) -> float:
    pred = np.asarray(pred, float)
    true = np.asarray(true, float)
    if pred.shape != true.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {true.shape}")
    denom = np.linalg.norm(true.ravel())
    if denom == 0:
        raise ValueError("relative L2 error is undefined for an all-zero truth")
    return float(np.linalg.norm((pred - true).ravel()) / denom)


def r2_score(pred, true) -> float:
    pred = np.asarray(pred, float).ravel()
    true = np.asarray(true, float).ravel()
    if pred.shape != true.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {true.shape}")
    ss_tot = float(np.sum((true - true.mean()) ** 2))
    if ss_tot == 0:
        raise ValueError("R2 is undefined when all true values are identical")
    return 1.0 - float(np.sum((pred - true) ** 2)) / ss_tot


@dataclass
class EvalReport:
    scenario: str
    model: str
    relative_l2: float
    r2: float
    per_step_l2: dict[int, float]
    wall_time: float = 0.0

    def metrics(self) -> dict:
        """Deterministic part of the report (wall time excluded)."""
        return {"relative_l2": self.relative_l2, "r2": self.r2,
                "per_step_l2": {str(k): v for k, v in self.per_step_l2.items()}}


@dataclass
class Prediction:
    steps: np.ndarray
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    h_pred: np.ndarray
    h_true: np.ndarray

    def to_csv(self, path) -> None:
        write_rows(path, ("step", "t", "x", "y", "h_pred", "h_true"),
                   [self.steps, self.t, self.x, self.y, self.h_pred, self.h_true])

    @classmethod
    def from_csv(cls, path) -> "Prediction":
        c = read_rows(path)
        return cls(c["step"].astype(int), c["t"], c["x"], c["y"], c["h_pred"], c["h_true"])


def predict_window(params: MlpParams, solution: HeadSolution, steps) -> Prediction:
    """Network prediction on every cell at the given steps, next to the reference heads."""
    g = solution.grid
    xc, yc = g.centers()
    X, Y = np.meshgrid(xc, yc)
    steps = np.asarray(list(steps), int)
    ncell = X.size
    s = np.repeat(steps, ncell)
    t = solution.times[s]
    x = np.tile(X.ravel(), len(steps))
    y = np.tile(Y.ravel(), len(steps))
    return Prediction(s, t, x, y, predict(params, t, x, y), solution.heads[steps].reshape(-1))


def evaluate(pred: Prediction, scenario: str, model: str, wall_time: float = 0.0) -> EvalReport:
    per_step = {}
    for s in np.unique(pred.steps):
        m = pred.steps == s
        per_step[int(s)] = relative_l2(pred.h_pred[m], pred.h_true[m])
    return EvalReport(scenario, model, relative_l2(pred.h_pred, pred.h_true), r2_score(pred.h_pred, pred.h_true),
                      per_step, wall_time)


# ---------------------------------------------------------------- corruption

def location_h_diff(obs: Observations, mode: str = "range", reference: Observations | None = None) -> np.ndarray:
    """Per-record head spread at the record's location.

    ``range`` is max minus min over the monitored records at that location;
    ``initial`` is the largest departure from the earliest record there.
    Spreads are computed from ``reference`` (default: ``obs`` itself).
    """
    if mode not in H_DIFF_MODES:
        raise ValueError(f"unknown h_diff mode {mode!r}")
    ref = obs if reference is None else reference
    keys, inv = np.unique(np.stack([ref.x, ref.y], axis=1), axis=0, return_inverse=True)
    inv = inv.ravel()
    if mode == "range":
        hi = np.full(len(keys), -np.inf)
        lo = np.full(len(keys), np.inf)
        np.maximum.at(hi, inv, ref.h)
        np.minimum.at(lo, inv, ref.h)
        spread = hi - lo
    else:
        order = np.lexsort((ref.t, inv))
        first = np.empty(len(keys))
        seen = np.zeros(len(keys), bool)
        for i in order:
            if not seen[inv[i]]:
                first[inv[i]] = ref.h[i]
                seen[inv[i]] = True
        spread = np.zeros(len(keys))
        np.maximum.at(spread, inv, np.abs(ref.h - first[inv]))
    lookup = {(a, b): i for i, (a, b) in enumerate(map(tuple, keys))}
    try:
        idx = np.array([lookup[(a, b)] for a, b in zip(obs.x, obs.y)], int)
    except KeyError as e:
        raise ValueError(f"location {e.args[0]} missing from the h_diff reference") from None
    return spread[idx]


def add_noise(obs: Observations, a_percent: float, seed: int, mode: str = "range",
              reference: Observations | None = None) -> Observations:
    """h + h_diff(x, y) * (a/100) * eps with eps ~ U(-1, 1) per record."""
    if a_percent < 0:
        raise ValueError("noise level must be >= 0")
    if a_percent == 0:
        return obs.with_heads(obs.h.copy())
    eps = np.random.default_rng(seed).uniform(-1.0, 1.0, len(obs))
    return obs.with_heads(obs.h + location_h_diff(obs, mode, reference) * (a_percent / 100.0) * eps)


def add_outliers(obs: Observations, fraction: float, seed: int) -> Observations:
    """Replace floor(p N) records, chosen without replacement, by U(1, 2) draws."""
    if not 0 <= fraction < 1:
        raise ValueError("outlier fraction must be in [0, 1)")
    h = obs.h.copy()
    n = math.floor(fraction * len(obs))
    if n:
        rng = np.random.default_rng(seed)
        idx = rng.choice(len(obs), size=n, replace=False)
        h[idx] = rng.uniform(1.0, 2.0, n)
    return obs.with_heads(h)


# ---------------------------------------------------------------- spec

@dataclass(frozen=True)
class ScenarioSpec:
    """Every knob of one experiment. Defaults give the future-prediction setup at desk scale."""

    kind: str = "future_prediction"
    name: str = "scenario"
    # conductivity field
    field_seed: int = 1
    ensemble_seeds: tuple[int, ...] = ()
    n_terms: int = 20
    variance: float = 1.0
    corr_len: float = 408.0
    # flow problem
    nx: int = 51
    ny: int = 51
    dx: float = 20.0
    dy: float = 20.0
    specific_storage: float = 1e-4
    dt: float = 0.2
    n_steps: int = 50
    left_head: float = 1.0
    right_head: float = 0.0
    initial_head: float | None = None
    bc_change_step: int = 0
    bc_change_value: float = 2.0
    well_x: float = 520.0
    well_y: float = 520.0
    well_rate: float = 0.0
    head_floor: float | None = None
    # observations and evaluation
    obs_first: int = 1
    obs_last: int = 18
    points_per_step: int = 1000
    obs_seed: int = 0
    obs_well: bool = False
    eval_first: int = 19
    eval_last: int = 50
    noise_percent: float = 0.0
    h_diff_mode: str = "range"
    outlier_fraction: float = 0.0
    corruption_seed: int = 0
    # loss point sets
    n_colloc: int = 1000
    n_bc: int = 500
    n_ic: int = 0
    n_well: int = 100
    n_new_bc: int = 250
    points_seed: int = 0
    ek_lower: float = 0.0
    ek_upper: float = 1.0
    ann_new_bc: str = "after_change"
    # network and optimizer
    layers: tuple[int, ...] = (3, 20, 20, 20, 20, 1)
    activation: str = "tanh"
    init_seed: int = 0
    output_shift: float = 0.0
    output_scale: float = 1.0
    epochs: int = 5000
    lr: float = 5e-3
    data_batch: int = 1000
    train_seed: int = 0
    log_every: int = 50
    checkpoint_every: int = 0
    w_data: float = 1.0
    w_pde: float = 1e9
    w_bc: float = 1.0
    w_ic: float = 1.0
    w_ec: float = 0.0
    w_ek: float = 1.0
    w_pde_well: float = 0.0
    w_new_bc: float = 0.0
    run_ann: bool = True
    # transfer protocol
    transfer_epochs: int = 2000
    transfer_lr: float = 5e-3
    transfer_trainable: int = 3

    def __post_init__(self):
        try:
            self._validate()
        except SpecError:
            raise
        except (TypeError, ValueError) as e:
            raise SpecError(str(e)) from None

    def _validate(self):
        def need(cond, key, what):
            if not cond:
                raise SpecError(f"{key}: {what}")

        need(self.kind in KINDS, "kind", f"must be one of {', '.join(KINDS)}")
        need(self.n_terms >= 1, "n_terms", "must be >= 1")
        need(self.n_steps >= 1, "n_steps", "must be >= 1")
        need(1 <= self.obs_first <= self.obs_last <= self.n_steps, "obs_first/obs_last",
             f"observation window must lie in [1, {self.n_steps}]")
        need(self.eval_first <= self.eval_last, "eval_first/eval_last", "evaluation window is empty")
        need(0 <= self.eval_first and self.eval_last <= self.n_steps, "eval_first/eval_last",
             f"evaluation window must lie in [0, {self.n_steps}]")
        need(1 <= self.points_per_step <= self.nx * self.ny, "points_per_step", "must be in [1, nx*ny]")
        need(self.noise_percent >= 0, "noise_percent", "must be >= 0")
        need(0 <= self.outlier_fraction < 1, "outlier_fraction", "must be in [0, 1)")
        need(self.h_diff_mode in H_DIFF_MODES, "h_diff_mode", f"must be one of {', '.join(H_DIFF_MODES)}")
        need(self.ann_new_bc in ANN_NEW_BC_MODES, "ann_new_bc", f"must be one of {', '.join(ANN_NEW_BC_MODES)}")
        need(self.n_colloc >= 1, "n_colloc", "must be >= 1")
        need(self.n_bc >= 0 and self.n_ic >= 0 and self.n_well >= 0 and self.n_new_bc >= 0,
             "n_bc/n_ic/n_well/n_new_bc", "must be >= 0")
        need(len(self.layers) >= 2 and self.layers[0] == 3 and self.layers[-1] == 1, "layers",
             "must start with 3 inputs and end with 1 output")
        need(all(w >= 1 for w in self.layers), "layers", "widths must be >= 1")
        need(self.epochs >= 1 and self.transfer_epochs >= 1, "epochs", "must be >= 1")
        need(self.lr > 0 and self.transfer_lr > 0, "lr", "must be > 0")
        need(self.data_batch >= 0, "data_batch", "must be >= 0 (0 = full batch)")
        need(self.log_every >= 1, "log_every", "must be >= 1")
        need(self.output_scale != 0, "output_scale", "must be nonzero")
        need(self.ek_lower <= self.ek_upper, "ek_lower/ek_upper", "lower bound above upper bound")
        for w in ("w_data", "w_pde", "w_bc", "w_ic", "w_ec", "w_ek", "w_pde_well", "w_new_bc"):
            need(getattr(self, w) >= 0, w, "must be >= 0")
        if self.kind in ("changed_bc", "transfer"):
            need(1 <= self.bc_change_step <= self.n_steps, "bc_change_step", "must be in [1, n_steps]")
        if self.kind == "transfer":
            need(1 <= self.transfer_trainable <= len(self.layers) - 1, "transfer_trainable",
                 "must be in [1, number of parameterized layers]")
        if self.kind == "engineering_control":
            need(self.well_rate > 0, "well_rate", "must be > 0 for engineering control")
            need(self.head_floor is not None, "head_floor", "required for engineering control")
        if self.w_pde_well > 0:
            need(self.n_well >= 1, "n_well", "must be >= 1 when w_pde_well > 0")
        if self.w_new_bc > 0:
            need(self.bc_change_step >= 1 and self.n_new_bc >= 1, "w_new_bc",
                 "needs bc_change_step >= 1 and n_new_bc >= 1")
        need(self.nx >= 3 and self.ny >= 1, "nx/ny", "grid too small")

    @property
    def grid(self) -> Grid2D:
        return Grid2D(self.nx, self.ny, self.dx, self.dy)

    @property
    def t_end(self) -> float:
        return self.n_steps * self.dt

    @property
    def t_change(self) -> float:
        return self.bc_change_step * self.dt

    def weights(self, **override) -> LossWeights:
        w = {k[2:]: getattr(self, k) for k in SPEC_KEYS if k.startswith("w_")}
        w.update(override)
        return LossWeights(**w)

    def for_seed(self, seed: int) -> "ScenarioSpec":
        return replace(self, field_seed=seed, ensemble_seeds=(), name=f"{self.name}-field{seed}")


SPEC_KEYS = tuple(f.name for f in fields(ScenarioSpec))
_HINTS = typing.get_type_hints(ScenarioSpec)


def _parse_int_list(text: str) -> tuple[int, ...]:
    out: list[int] = []
    for part in text.replace(" ", "").split(","):
        if not part:
            continue
        if "-" in part[1:]:
            a, b = part.split("-", 1) if not part.startswith("-") else part[1:].split("-", 1)
            lo, hi = int(a), int(b)
            if hi < lo:
                raise ValueError(f"empty range {part!r}")
            out.extend(range(lo, hi + 1))
        else:
            out.append(int(part))
    return tuple(out)


def _parse_value(key: str, text: str):
    hint = _HINTS[key]
    text = text.strip()
    try:
        if hint is bool:
            low = text.lower()
            if low not in ("true", "false", "yes", "no", "1", "0"):
                raise ValueError(f"expected a boolean, got {text!r}")
            return low in ("true", "yes", "1")
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if hint is str:
            return text
        if hint == (float | None):
            return None if text.lower() in ("none", "") else float(text)
        if hint == tuple[int, ...]:
            return _parse_int_list(text)
    except ValueError as e:
        raise SpecError(f"{key}: {e}") from None
    raise SpecError(f"{key}: unsupported type {hint}")  # pragma: no cover


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(i) for i in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def loads_spec(text: str) -> ScenarioSpec:
    """Parse ``key = value`` lines; '#' starts a comment. Unknown or repeated keys are errors."""
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SpecError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in SPEC_KEYS:
            raise SpecError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise SpecError(f"line {lineno}: key {key!r} given twice")
        values[key] = _parse_value(key, val)
    if "kind" not in values:
        raise SpecError("kind: required")
    return ScenarioSpec(**values)


def load_spec(path) -> ScenarioSpec:
    return loads_spec(Path(path).read_text())


def dumps_spec(spec: ScenarioSpec) -> str:
    return "".join(f"{k} = {_format_value(getattr(spec, k))}\n" for k in SPEC_KEYS)


def bundled_specs() -> dict[str, Path]:
    """Spec files shipped with the package, by stem."""
    root = Path(__file__).with_name("specs")
    return {p.stem: p for p in sorted(root.glob("*.spec"))}


# ---------------------------------------------------------------- problem setup

_BASES: dict[tuple, object] = {}


def build_field(spec: ScenarioSpec) -> ConductivityField:
    g = spec.grid
    cov = CovarianceSpec(spec.variance, spec.corr_len, spec.corr_len, g.length_x, g.length_y)
    key = (cov, spec.n_terms)
    if key not in _BASES:
        _BASES[key] = build_basis_2d(cov, spec.n_terms)
    return ConductivityField.from_seed(_BASES[key], spec.field_seed)


def well_cell(spec: ScenarioSpec) -> tuple[int, int]:
    return spec.grid.cell_of(spec.well_x, spec.well_y)


def build_problem(spec: ScenarioSpec, fld: ConductivityField, changed: bool | None = None) -> FlowProblem:
    """Reference flow problem. ``changed`` forces the boundary change on or off."""
    g = spec.grid
    h0 = np.full((g.ny, g.nx), spec.right_head if spec.initial_head is None else spec.initial_head)
    h0[:, 0] = spec.left_head
    h0[:, -1] = spec.right_head
    if changed is None:
        changed = spec.bc_change_step > 0
    right = ConstantHead(spec.right_head, ((spec.t_change, spec.bc_change_value),) if changed else ())
    wells = ()
    if spec.well_rate:
        r, c = well_cell(spec)
        wells = (WellSpec(r, c, spec.well_rate, spec.head_floor),)
    return FlowProblem(grid=g, conductivity=fld.on_grid(g), initial_heads=h0,
                       specific_storage=spec.specific_storage, dt=spec.dt, n_steps=spec.n_steps,
                       left=ConstantHead(spec.left_head), right=right, wells=wells)


def observations(spec: ScenarioSpec, solution: HeadSolution) -> Observations:
    """Observed records, corrupted as the spec asks (noise first, then outliers)."""
    steps = range(spec.obs_first, spec.obs_last + 1)
    obs = extract_observations(solution, steps, spec.points_per_step, spec.obs_seed)
    if spec.obs_well:
        r, c = well_cell(spec)
        xc, yc = spec.grid.centers()
        s = np.arange(spec.obs_first, spec.obs_last + 1)
        obs = Observations.concat([obs, Observations(s, solution.times[s], np.full(len(s), xc[c]),
                                                     np.full(len(s), yc[r]), solution.heads[s, r, c])])
    if spec.noise_percent > 0:
        # spreads come from the full monitored window at every cell
        ref = extract_observations(solution, steps, spec.nx * spec.ny, 0)
        obs = add_noise(obs, spec.noise_percent, spec.corruption_seed, spec.h_diff_mode, ref)
    if spec.outlier_fraction > 0:
        obs = add_outliers(obs, spec.outlier_fraction, spec.corruption_seed + 1)
    return obs


def _face(rng, n: int, x: float, t_lo: float, t_hi: float, value: float, length_y: float) -> Labeled:
    return Labeled(rng.uniform(t_lo, t_hi, n), np.full(n, x), rng.uniform(0.0, length_y, n), np.full(n, value))


def point_sets(spec: ScenarioSpec, solution: HeadSolution, obs: Observations | None,
               t_start: float = 0.0, ic: Labeled | None = None, rng_offset: int = 0) -> PointSets:
    """Loss point sets over [t_start, t_end]; collocation is drawn once per run.

    Prescribed-head points sit on the constant-head cell centers, split evenly
    between the two faces. The right face uses its original value before the
    scheduled change and the new value (as the ``new_bc`` set) after it.
    """
    rng = np.random.default_rng(spec.points_seed + rng_offset)
    g = spec.grid
    xc, yc = g.centers()
    T = spec.t_end
    colloc = Points(rng.uniform(t_start, T, spec.n_colloc), rng.uniform(xc[0], xc[-1], spec.n_colloc),
                    rng.uniform(0.0, g.length_y, spec.n_colloc))
    changes = spec.bc_change_step > 0
    t_c = spec.t_change if changes else T
    n_left = spec.n_bc // 2
    left = _face(rng, n_left, xc[0], t_start, T, spec.left_head, g.length_y)
    new_bc = None
    if t_start >= t_c:
        right = _face(rng, spec.n_bc - n_left, xc[-1], t_start, T, spec.bc_change_value, g.length_y)
    else:
        right = _face(rng, spec.n_bc - n_left, xc[-1], t_start, t_c, spec.right_head, g.length_y)
        if changes and spec.n_new_bc:
            new_bc = _face(rng, spec.n_new_bc, xc[-1], t_c, T, spec.bc_change_value, g.length_y)
    bc = Labeled.concat([left, right]) if spec.n_bc else None
    if ic is None:
        X, Y = np.meshgrid(xc, yc)
        h0 = solution.heads[0]
        if spec.n_ic == 0 or spec.n_ic >= X.size:
            idx = np.arange(X.size)
        else:
            idx = np.sort(rng.choice(X.size, spec.n_ic, replace=False))
        ic = Labeled(np.zeros(len(idx)), X.ravel()[idx], Y.ravel()[idx], h0.ravel()[idx])
    well = None
    if spec.well_rate and spec.n_well:
        r, c = well_cell(spec)
        well = Points(rng.uniform(t_start, T, spec.n_well), np.full(spec.n_well, xc[c]), np.full(spec.n_well, yc[r]))
    data = Labeled.from_observations(obs) if obs is not None else None
    return PointSets(data=data, colloc=colloc, bc=bc, ic=ic, new_bc=new_bc, well=well)


def physics_for(spec: ScenarioSpec, fld: ConductivityField) -> Physics:
    return Physics(specific_storage=spec.specific_storage, field=fld, well_rate=spec.well_rate,
                   cell_area=spec.dx * spec.dy, ek_bounds=(spec.ek_lower, spec.ek_upper),
                   ec_floor=spec.head_floor)


def initial_params(spec: ScenarioSpec, seed: int | None = None) -> MlpParams:
    g = spec.grid
    return init_params(spec.init_seed if seed is None else seed, spec.layers, spec.activation,
                       input_scale=(spec.t_end, g.length_x, g.length_y),
                       output_shift=spec.output_shift, output_scale=spec.output_scale)


def train_config(spec: ScenarioSpec, weights: LossWeights, **kw) -> TrainConfig:
    cfg = dict(epochs=spec.epochs, lr=spec.lr, seed=spec.train_seed, weights=weights, log_every=spec.log_every,
               checkpoint_every=spec.checkpoint_every, data_batch=spec.data_batch or None)
    cfg.update(kw)
    return TrainConfig(**cfg)


def ann_weights() -> LossWeights:
    return LossWeights.only(data=1.0)


def tgnn_weights(spec: ScenarioSpec, points: PointSets, **override) -> LossWeights:
    """Spec weights with terms that have no points (or no bounds) switched off."""
    w = spec.weights(**override).as_dict()
    if points.data is None:
        w["data"] = 0.0
    for name in ("new_bc", "pde_well", "bc", "ic"):
        if points.count(name) == 0:
            w[name] = 0.0
    if spec.head_floor is None:
        w["ec"] = 0.0
    return LossWeights(**w)


# ---------------------------------------------------------------- running

@dataclass
class ModelRun:
    tag: str
    params: MlpParams
    result: TrainResult
    prediction: Prediction
    report: EvalReport


@dataclass
class ScenarioResult:
    spec: ScenarioSpec
    reports: dict[str, EvalReport]
    extras: dict = field(default_factory=dict)
    artifacts: list[Path] = field(default_factory=list)
    runs: dict[str, ModelRun] = field(default_factory=dict, repr=False)

    def metrics(self) -> dict:
        """Deterministic metrics record: every value here is reproducible bitwise."""
        return {"scenario": self.spec.name, "kind": self.spec.kind, "field_seed": self.spec.field_seed,
                "models": {k: r.metrics() for k, r in self.reports.items()}, "extras": self.extras}

    def timing(self) -> dict:
        return {k: r.wall_time for k, r in self.reports.items()}


def _stage(name, fn, *a, **kw):
    try:
        return fn(*a, **kw)
    except StageError:
        raise
    except Exception as e:  # noqa: BLE001 - every failure is re-raised tagged with its stage
        raise StageError(name, e) from e


def _fit(tag, spec, params, points, physics, cfg, solution, eval_steps, runs, transfer_from=None, **kw):
    if transfer_from is None:
        res = _stage(f"train:{tag}", train, params, points, physics, cfg)
    else:
        res = _stage(f"train:{tag}", transfer_retrain, params, points, physics, cfg, **kw)
    pred = _stage(f"evaluate:{tag}", predict_window, res.params, solution, eval_steps)
    rep = evaluate(pred, spec.name, tag, res.wall_time)
    runs[tag] = ModelRun(tag, res.params, res, pred, rep)
    log.info("%s %s: L2 %.4e R2 %.5f (%.1fs)", spec.name, tag, rep.relative_l2, rep.r2, res.wall_time)
    return runs[tag]


def _well_summary(spec: ScenarioSpec, run: ModelRun) -> dict:
    r, c = well_cell(spec)
    xc, yc = spec.grid.centers()
    m = (run.prediction.x == xc[c]) & (run.prediction.y == yc[r])
    h = run.prediction.h_pred[m]
    floor = spec.head_floor
    return {"well_head_pred": [float(v) for v in h], "well_head_true": [float(v) for v in run.prediction.h_true[m]],
            "min_well_head": float(h.min()), "floor_violation": float(max(0.0, floor - h.min())),
            "fraction_below_floor_minus_1": float(np.mean(h < floor - 1.0))}


def run_scenario(spec: ScenarioSpec, out_dir=None, pretrained: MlpParams | None = None) -> ScenarioResult:
    """Run one scenario end to end; artifacts are written only when ``out_dir`` is given.

    For the transfer kind, ``pretrained`` replaces the pretraining phase.
    """
    fld = _stage("field", build_field, spec)
    problem = _stage("problem", build_problem, spec, fld)
    solution = _stage("simulate", simulate, problem)
    eval_steps = range(spec.eval_first, spec.eval_last + 1)
    physics = physics_for(spec, fld)
    runs: dict[str, ModelRun] = {}
    extras: dict = {}

    if spec.kind == "transfer":
        _run_transfer(spec, fld, solution, physics, eval_steps, runs, extras, pretrained)
    else:
        obs = _stage("observations", observations, spec, solution)
        pts = _stage("points", point_sets, spec, solution, obs)
        p0 = initial_params(spec)
        w = tgnn_weights(spec, pts)
        _fit("TgNN", spec, p0, pts, physics, train_config(spec, w), solution, eval_steps, runs)
        if spec.kind == "engineering_control":
            w_off = replace(w, ec=0.0)
            _fit("TgNN-noEC", spec, p0, pts, physics, train_config(spec, w_off), solution, eval_steps, runs)
        if spec.run_ann:
            ann_pts, ann_w = pts, ann_weights()
            if spec.kind == "changed_bc" and pts.new_bc is not None:
                nb = pts.new_bc
                if spec.ann_new_bc == "switch_time":
                    nb = Labeled(np.full(len(nb), spec.t_change), nb.x, nb.y, nb.h)
                ann_pts = replace(pts, data=Labeled.concat([pts.data, nb]), _cache={})
            _fit("ANN", spec, p0, ann_pts, physics, train_config(spec, ann_w), solution, eval_steps, runs)
        if spec.kind == "engineering_control":
            extras["well"] = {tag: _well_summary(spec, run) for tag, run in runs.items()}
            extras["well_switch_step"] = next((rec[0].step for rec in solution.well_log if rec[0].mode == "head"),
                                              None)

    result = ScenarioResult(spec, {k: r.report for k, r in runs.items()}, extras, runs=runs)
    if out_dir is not None:
        result.artifacts = _stage("write", write_artifacts, result, Path(out_dir))
    return result


def _run_transfer(spec, fld, solution, physics, eval_steps, runs, extras, pretrained=None):
    """Pretrain on the original boundaries, then adapt to the changed boundary three ways."""
    pre_steps = range(spec.obs_first, spec.obs_last + 1)
    if pretrained is None:
        # the pretraining phase does not know about the change
        pre_spec = replace(spec, kind="future_prediction", bc_change_step=0, w_new_bc=0.0)
        obs = _stage("observations", observations, pre_spec, solution)
        pre_pts = _stage("points", point_sets, pre_spec, solution, obs)
        pre_w = tgnn_weights(pre_spec, pre_pts)
        _fit("pretrained", spec, initial_params(spec), pre_pts, physics, train_config(spec, pre_w), solution,
             pre_steps, runs)
        pretrained = runs["pretrained"].params
    else:
        if tuple(pretrained.layer_sizes) != tuple(spec.layers):
            raise StageError("transfer", SpecError(f"checkpoint layers {pretrained.layer_sizes} != spec layers"))
        pred = predict_window(pretrained, solution, pre_steps)
        runs["pretrained"] = ModelRun("pretrained", pretrained, TrainResult(pretrained, [], 0.0, None), pred,
                                      evaluate(pred, spec.name, "pretrained"))

    xc, yc = spec.grid.centers()
    X, Y = np.meshgrid(xc, yc)
    new_pts = _stage("points", point_sets, spec, solution, None, t_start=spec.t_change, rng_offset=1)
    w = tgnn_weights(spec, new_pts, data=0.0, new_bc=0.0)
    mask = transfer_mask(len(spec.layers) - 1, spec.transfer_trainable)
    common = dict(epochs=spec.transfer_epochs, lr=spec.transfer_lr)
    ic_kw = dict(t_switch=spec.t_change, ic_xy=(X.ravel(), Y.ravel()))
    fresh = initial_params(spec, spec.init_seed + 1)
    _fit("transfer", spec, pretrained, new_pts, physics, train_config(spec, w, freeze_mask=mask, **common),
         solution, eval_steps, runs, transfer_from=pretrained, **ic_kw)
    _fit("contrast1", spec, fresh, new_pts, physics, train_config(spec, w, freeze_mask=mask, **common),
         solution, eval_steps, runs, transfer_from=pretrained, **{**ic_kw, "ic_source": pretrained})
    _fit("contrast2", spec, fresh, new_pts, physics, train_config(spec, w, **common),
         solution, eval_steps, runs, transfer_from=pretrained, **{**ic_kw, "ic_source": pretrained})
    frozen = [i for i, on in enumerate(mask) if not on]
    extras["frozen_layers"] = frozen
    extras["frozen_unchanged"] = {
        tag: all(runs[tag].params.weights[i].tobytes() == start.weights[i].tobytes()
                 and runs[tag].params.biases[i].tobytes() == start.biases[i].tobytes() for i in frozen)
        for tag, start in (("transfer", pretrained), ("contrast1", fresh))}


def write_artifacts(result: ScenarioResult, out: Path) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    spec_path = out / "scenario.spec"
    spec_path.write_text(dumps_spec(result.spec))
    paths.append(spec_path)
    for tag, run in result.runs.items():
        p = out / f"predictions_{tag}.csv"
        run.prediction.to_csv(p)
        lp = out / f"log_{tag}.csv"
        write_log(run.result.log, lp)
        cp = out / f"model_{tag}.ckpt"
        save_checkpoint(run.params, cp)
        paths += [p, lp, cp]
    m = out / "metrics.json"
    m.write_text(json.dumps({**result.metrics(), "wall_time": result.timing(), "version": __version__},
                            indent=2, sort_keys=True))
    paths.append(m)
    return paths


def metrics_from_predictions(path, scenario: str = "", model: str = "") -> EvalReport:
    """Recompute a report from a stored prediction CSV."""
    return evaluate(Prediction.from_csv(path), scenario, model)


# ---------------------------------------------------------------- ensembles

@dataclass
class EnsembleReport:
    name: str
    seeds: list[int]
    status: dict[int, str]
    raw: dict[str, dict[str, list[float]]]  # model -> metric -> per-seed values (sorted seeds)
    results: dict[int, ScenarioResult] = field(default_factory=dict, repr=False)

    def stats(self) -> dict[str, dict[str, float]]:
        out = {}
        for model, m in self.raw.items():
            out[model] = {}
            for metric, vals in m.items():
                v = np.asarray(vals, float)
                out[model][f"{metric}_mean"] = float(v.mean()) if len(v) else float("nan")
                out[model][f"{metric}_var"] = float(v.var()) if len(v) else float("nan")
        return out

    def record(self) -> dict:
        return {"ensemble": self.name, "seeds": self.seeds, "status": {str(k): v for k, v in self.status.items()},
                "raw": self.raw, "stats": self.stats()}


def _run_one(args):
    spec, out = args
    try:
        return spec.field_seed, run_scenario(spec, out), "ok"
    except StageError as e:
        log.error("realization %d failed: %s", spec.field_seed, e)
        return spec.field_seed, None, f"failed: {e}"


def run_ensemble(base: ScenarioSpec, seeds=None, n_realizations: int | None = None, out_dir=None,
                 parallel: int = 1) -> EnsembleReport:
    """One scenario per field seed; statistics are aggregated over sorted seeds."""
    if seeds is None:
        seeds = base.ensemble_seeds or tuple(range(1, (n_realizations or 0) + 1))
    seeds = list(seeds)
    if n_realizations is not None:
        seeds = seeds[:n_realizations]
    if len(seeds) < 2:
        raise SpecError("ensemble needs at least 2 realizations")
    jobs = []
    for i, s in enumerate(seeds):
        sub = base.for_seed(s)
        out = None if out_dir is None else Path(out_dir) / f"realization_{i:03d}_field{s}"
        jobs.append((sub, out))
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            done = list(pool.map(_run_one, jobs))
    else:
        done = [_run_one(j) for j in jobs]
    # several positions may share a seed; key by position, aggregate in sorted-seed order
    order = sorted(range(len(seeds)), key=lambda i: (seeds[i], i))
    status = {}
    results = {}
    raw: dict[str, dict[str, list[float]]] = {}
    for i in order:
        seed, res, st = done[i]
        status[seed] = st
        if res is None:
            continue
        results[seed] = res
        for model, rep in res.reports.items():
            bucket = raw.setdefault(model, {"relative_l2": [], "r2": []})
            bucket["relative_l2"].append(rep.relative_l2)
            bucket["r2"].append(rep.r2)
    report = EnsembleReport(base.name, sorted(seeds), status, raw, results)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "ensemble.json").write_text(json.dumps(report.record(), indent=2, sort_keys=True))
    return report


def spec_as_dict(spec: ScenarioSpec) -> dict:
    return asdict(spec)
