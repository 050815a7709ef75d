"""Loss terms of the theory-guided objective and their parameter gradients.

Every term is a mean of squares over its own point set. Residuals are formed
in physical units from network jets taken in scaled inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .kle import ConductivityField
from .net import Gradients, MlpParams, backprop, forward_tape, tape_outputs

TERMS = ("data", "pde", "bc", "ic", "ec", "ek", "pde_well", "new_bc")


class EmptyPointSetError(ValueError):
    pass


@dataclass
class Labeled:
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        self.t, self.x, self.y, self.h = (np.asarray(a, float).ravel() for a in (self.t, self.x, self.y, self.h))
        if not (len(self.t) == len(self.x) == len(self.y) == len(self.h)):
            raise ValueError("coordinate and label arrays differ in length")

    def __len__(self):
        return len(self.t)

    def subset(self, idx) -> "Labeled":
        return Labeled(self.t[idx], self.x[idx], self.y[idx], self.h[idx])

    @classmethod
    def from_observations(cls, obs) -> "Labeled":
        return cls(obs.t, obs.x, obs.y, obs.h)

    @classmethod
    def concat(cls, parts) -> "Labeled":
        parts = [p for p in parts if p is not None]
        return cls(*(np.concatenate([getattr(p, k) for p in parts]) for k in "txyh"))


@dataclass
class Points:
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.t, self.x, self.y = (np.asarray(a, float).ravel() for a in (self.t, self.x, self.y))

    def __len__(self):
        return len(self.t)


@dataclass
class PointSets:
    data: Labeled | None = None
    colloc: Points | None = None
    bc: Labeled | None = None
    ic: Labeled | None = None
    new_bc: Labeled | None = None
    well: Points | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def count(self, name: str) -> int:
        """Size of the set backing loss term ``name``.

        EK uses the collocation set; EC uses the collocation set plus the well points.
        """
        if name == "ec":
            return self.count("pde") + self.count("pde_well")
        attr = {"pde": "colloc", "ek": "colloc", "pde_well": "well"}.get(name, name)
        s = getattr(self, attr)
        return 0 if s is None else len(s)


@dataclass(frozen=True)
class LossWeights:
    data: float = 1.0
    pde: float = 1.0
    bc: float = 1.0
    ic: float = 1.0
    ec: float = 1.0
    ek: float = 1.0
    pde_well: float = 1.0
    new_bc: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) >= 0:
                raise ValueError(f"loss weight {f.name} must be >= 0")

    def as_dict(self) -> dict[str, float]:
        return {t: getattr(self, t) for t in TERMS}

    @classmethod
    def only(cls, **on) -> "LossWeights":
        """All weights zero except the ones given."""
        return cls(**{**{t: 0.0 for t in TERMS}, **on})


@dataclass
class Physics:
    """Problem constants the residuals need. ``field=None`` means K = 1 everywhere."""

    specific_storage: float = 1e-4
    field: ConductivityField | None = None
    well_rate: float = 0.0
    cell_area: float = 400.0
    ek_bounds: tuple[float, float] | None = (0.0, 1.0)
    ec_floor: float | None = None

    def conductivity(self, x, y):
        if self.field is None:
            one = np.ones(np.shape(x))
            return one, np.zeros_like(one), np.zeros_like(one)
        return self.field.conductivity(x, y)


@dataclass
class LossBundle:
    terms: dict[str, float]
    weights: dict[str, float]
    total: float

    def record(self) -> dict[str, float]:
        """Flat record for the training log; absent terms are left out."""
        return {**self.terms, "total": self.total}


def _inputs(params: MlpParams, pts) -> np.ndarray:
    return params.scale_inputs(pts.t, pts.x, pts.y)


def _require(pts, name):
    if pts is None or len(pts) == 0:
        raise EmptyPointSetError(f"loss term {name!r} has nonzero weight but no points")


def _mse_values(params, pts: Labeled, name: str) -> float:
    _require(pts, name)
    tape = forward_tape(params, _inputs(params, pts), 0)
    r = tape_outputs(params, tape)["value"] - pts.h
    return float(np.mean(r * r))


def mse_data(params: MlpParams, data: Labeled) -> float:
    return _mse_values(params, data, "data")


def mse_bc(params: MlpParams, bc: Labeled) -> float:
    return _mse_values(params, bc, "bc")


def mse_ic(params: MlpParams, ic: Labeled) -> float:
    return _mse_values(params, ic, "ic")


def mse_new_bc(params: MlpParams, new_bc: Labeled) -> float:
    return _mse_values(params, new_bc, "new_bc")


def residual_from_outputs(out, params: MlpParams, specific_storage: float, k, kx, ky) -> np.ndarray:
    """S_s h_t - K (h_xx + h_yy) - K_x h_x - K_y h_y with derivatives converted to physical units."""
    st, sx, sy = params.input_scale
    h_t, h_x, h_y = out["d_t"] / st, out["d_x"] / sx, out["d_y"] / sy
    h_xx, h_yy = out["d_xx"] / sx**2, out["d_yy"] / sy**2
    return specific_storage * h_t - k * (h_xx + h_yy) - kx * h_x - ky * h_y


def _residual_seeds(df, params: MlpParams, specific_storage: float, k, kx, ky) -> dict:
    st, sx, sy = params.input_scale
    return {"d_t": df * specific_storage / st, "d_x": -df * kx / sx, "d_y": -df * ky / sy,
            "d_xx": -df * k / sx**2, "d_yy": -df * k / sy**2}


def pde_residual(params: MlpParams, physics: Physics, t, x, y) -> np.ndarray:
    """Flow-equation residual of the network at the given points."""
    pts = Points(t, x, y)
    k, kx, ky = physics.conductivity(pts.x, pts.y)
    out = tape_outputs(params, forward_tape(params, _inputs(params, pts), 2))
    return residual_from_outputs(out, params, physics.specific_storage, k, kx, ky)


def mse_pde(params: MlpParams, physics: Physics, colloc: Points) -> float:
    _require(colloc, "pde")
    f = pde_residual(params, physics, colloc.t, colloc.x, colloc.y)
    return float(np.mean(f * f))


def well_residual(params: MlpParams, physics: Physics, t, x, y) -> np.ndarray:
    """Residual at the well location including the sink Q / (dx dy)."""
    return pde_residual(params, physics, t, x, y) + physics.well_rate / physics.cell_area


def mse_pde_well(params: MlpParams, physics: Physics, well: Points) -> float:
    _require(well, "pde_well")
    f = well_residual(params, physics, well.t, well.x, well.y)
    return float(np.mean(f * f))


def bound_violations(h, lower: float, upper: float):
    return np.maximum(h - upper, 0.0), np.maximum(lower - h, 0.0)


def mse_ek_bounds(params: MlpParams, points: Points, lower: float = 0.0, upper: float = 1.0) -> float:
    _require(points, "ek")
    h = tape_outputs(params, forward_tape(params, _inputs(params, points), 0))["value"]
    over, under = bound_violations(h, lower, upper)
    return float(np.sum(over**2) / len(h) + np.sum(under**2) / len(h))


def mse_ec_floor(params: MlpParams, points: Points, floor: float) -> float:
    """Floor penalty on one point set; ``total_loss`` applies it to collocation and well points together."""
    _require(points, "ec")
    h = tape_outputs(params, forward_tape(params, _inputs(params, points), 0))["value"]
    return float(np.mean(np.maximum(floor - h, 0.0) ** 2))


def _conductivity_at(points: PointSets, physics: Physics, name: str, pts: Points):
    key = (name, id(physics.field))
    if key not in points._cache:
        points._cache[key] = physics.conductivity(pts.x, pts.y)
    return points._cache[key]


def total_loss(params: MlpParams, points: PointSets, physics: Physics, weights: LossWeights,
               with_grad: bool = False, trainable=None) -> tuple[LossBundle, Gradients | None]:
    """Weighted sum of every term with nonzero weight, and optionally its gradient.

    Terms with zero weight are not evaluated and do not appear in the bundle.
    ``trainable`` (per-layer flags) lets the gradient skip frozen layers.
    """
    w = weights.as_dict()
    active = [t for t in TERMS if w[t] > 0]
    if "ek" in active and physics.ek_bounds is None:
        active.remove("ek")
    if "ec" in active and physics.ec_floor is None:
        active.remove("ec")
    for t in active:
        if points.count(t) == 0:
            raise EmptyPointSetError(f"loss term {t!r} has nonzero weight but no points")

    terms: dict[str, float] = {}
    grads = params.zeros_like() if with_grad else None

    # value-only sets share one tape
    labeled = [(t, getattr(points, t)) for t in ("data", "bc", "ic", "new_bc") if t in active]
    if labeled:
        stacked = Labeled.concat([p for _, p in labeled])
        tape = forward_tape(params, _inputs(params, stacked), 0)
        r = tape_outputs(params, tape)["value"] - stacked.h
        seed = np.empty_like(r)
        start = 0
        for t, p in labeled:
            sl = slice(start, start + len(p))
            terms[t] = float(np.mean(r[sl] ** 2))
            seed[sl] = 2.0 * w[t] * r[sl] / len(p)
            start += len(p)
        if with_grad:
            grads = grads + backprop(params, tape, {"value": seed}, trainable)

    n_ec, ec_sum = points.count("ec"), 0.0
    colloc_terms = [t for t in ("pde", "ek", "ec") if t in active]
    if colloc_terms and points.count("pde") > 0:
        c = points.colloc
        order = 2 if "pde" in colloc_terms else 0
        tape = forward_tape(params, _inputs(params, c), order)
        out = tape_outputs(params, tape)
        seeds: dict[str, np.ndarray] = {}
        n = len(c)
        h = out["value"]
        vseed = np.zeros(n)
        if "pde" in colloc_terms:
            k, kx, ky = _conductivity_at(points, physics, "colloc", c)
            f = residual_from_outputs(out, params, physics.specific_storage, k, kx, ky)
            terms["pde"] = float(np.mean(f * f))
            seeds.update(_residual_seeds(2.0 * w["pde"] * f / n, params, physics.specific_storage, k, kx, ky))
        if "ek" in colloc_terms:
            lower, upper = physics.ek_bounds
            over, under = bound_violations(h, lower, upper)
            terms["ek"] = float(np.sum(over**2) / n + np.sum(under**2) / n)
            vseed += 2.0 * w["ek"] * (over - under) / n
        if "ec" in colloc_terms:
            under = np.maximum(physics.ec_floor - h, 0.0)
            ec_sum += float(np.sum(under**2))
            vseed -= 2.0 * w["ec"] * under / n_ec
        if with_grad:
            if np.any(vseed):
                seeds["value"] = vseed
            if seeds:
                grads = grads + backprop(params, tape, seeds, trainable)

    well_ec = "ec" in active and points.count("pde_well") > 0
    if "pde_well" in active or well_ec:
        wp = points.well
        order = 2 if "pde_well" in active else 0
        tape = forward_tape(params, _inputs(params, wp), order)
        out = tape_outputs(params, tape)
        seeds = {}
        if "pde_well" in active:
            k, kx, ky = _conductivity_at(points, physics, "well", wp)
            f = residual_from_outputs(out, params, physics.specific_storage, k, kx, ky)
            f = f + physics.well_rate / physics.cell_area
            terms["pde_well"] = float(np.mean(f * f))
            seeds = _residual_seeds(2.0 * w["pde_well"] * f / len(wp), params, physics.specific_storage, k, kx, ky)
        if well_ec:
            under = np.maximum(physics.ec_floor - out["value"], 0.0)
            ec_sum += float(np.sum(under**2))
            if np.any(under):
                seeds["value"] = -2.0 * w["ec"] * under / n_ec
        if with_grad and seeds:
            grads = grads + backprop(params, tape, seeds, trainable)
    if "ec" in active:
        terms["ec"] = ec_sum / n_ec

    ordered = {t: terms[t] for t in TERMS if t in terms}
    total = float(sum(w[t] * v for t, v in ordered.items()))
    return LossBundle(ordered, {t: w[t] for t in ordered}, total), grads
