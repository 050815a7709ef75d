import numpy as np
import pytest
import sympy as sp

from tgnn.kle import ConductivityField, CovarianceSpec, build_basis_2d
from tgnn.net import MlpParams, forward, init_params
from tgnn.physics_loss import (
    TERMS,
    EmptyPointSetError,
    Labeled,
    LossWeights,
    Physics,
    Points,
    PointSets,
    mse_bc,
    mse_data,
    mse_ec_floor,
    mse_ek_bounds,
    mse_ic,
    mse_pde,
    mse_pde_well,
    pde_residual,
    residual_from_outputs,
    total_loss,
    well_residual,
)

SCALE = (10.0, 1020.0, 1020.0)


def constant_net(c, sizes=(3, 4, 1)):
    p = init_params(0, sizes)
    for a in p.arrays():
        a[:] = 0.0
    p.biases[-1][:] = c
    return p


def random_net(seed, sizes=(3, 6, 5, 1), **kw):
    p = init_params(seed, sizes, input_scale=SCALE, **kw)
    rng = np.random.default_rng(seed)
    for b in p.biases:
        b[:] = 0.3 * rng.normal(size=b.shape)
    return p


@pytest.fixture(scope="module")
def field():
    return ConductivityField.from_seed(build_basis_2d(CovarianceSpec(), 20), 3)


def one(v):
    return np.array([v], float)


def test_constant_output_examples():
    p = constant_net(0.4)
    assert mse_data(p, Labeled(one(0), one(0), one(0), one(0.9))) == pytest.approx(0.25, abs=1e-15)
    assert mse_ic(constant_net(0.2), Labeled(one(0), one(1), one(1), one(0))) == pytest.approx(0.04, abs=1e-15)
    assert mse_bc(p, Labeled(one(1), one(2), one(3), one(0.4))) == 0.0
    assert mse_ek_bounds(constant_net(1.5), Points(one(0), one(0), one(0))) == pytest.approx(0.25)
    assert mse_ek_bounds(constant_net(-0.3), Points(one(0), one(0), one(0))) == pytest.approx(0.09)
    assert mse_ek_bounds(constant_net(0.7), Points(one(0), one(0), one(0))) == 0.0
    assert mse_ec_floor(constant_net(80.0), Points(one(0), one(0), one(0)), 81.0) == 1.0
    assert mse_ec_floor(constant_net(85.0), Points(one(0), one(0), one(0)), 81.0) == 0.0


def test_mse_data_matches_loop():
    p = random_net(1)
    rng = np.random.default_rng(2)
    d = Labeled(rng.uniform(0, 10, 100), rng.uniform(0, 1020, 100), rng.uniform(0, 1020, 100), rng.uniform(size=100))
    acc = 0.0
    for i in range(100):
        out = forward(p, p.scale_inputs(d.t[i:i + 1], d.x[i:i + 1], d.y[i:i + 1]))[0]
        acc += (out - d.h[i]) ** 2
    assert mse_data(p, d) == pytest.approx(acc / 100, rel=1e-12)


def test_constant_network_has_zero_residual(field):
    p = constant_net(0.6)
    rng = np.random.default_rng(0)
    f = pde_residual(p, Physics(field=field), rng.uniform(0, 10, 30), rng.uniform(0, 1020, 30), rng.uniform(0, 1020, 30))
    np.testing.assert_array_equal(f, 0.0)


def test_affine_network_is_harmonic():
    w = np.array([[0.0], [1.0 / 1020.0], [0.0]])
    p = MlpParams((3, 1), [w], [np.zeros(1)], activation="identity")
    f = pde_residual(p, Physics(), [1.0, 5.0], [100.0, 900.0], [20.0, 500.0])
    np.testing.assert_allclose(f, 0.0, atol=1e-18)


def test_manufactured_solution_against_symbolic_divergence():
    t, x, y = sp.symbols("t x y")
    Lx = 1020.0
    ss = 1e-4
    K = sp.exp(sp.Rational(3, 10) * sp.sin(x / 300) * sp.cos(y / 250))
    h = sp.sin(sp.pi * x / Lx) * sp.exp(-t) * (1 + y / 2000)
    oracle = ss * sp.diff(h, t) - sp.diff(K * sp.diff(h, x), x) - sp.diff(K * sp.diff(h, y), y)
    f_oracle = sp.lambdify((t, x, y), oracle, "numpy")
    derivs = {k: sp.lambdify((t, x, y), e, "numpy") for k, e in
              {"d_t": sp.diff(h, t), "d_x": sp.diff(h, x), "d_y": sp.diff(h, y),
               "d_xx": sp.diff(h, x, 2), "d_yy": sp.diff(h, y, 2)}.items()}
    kfun = [sp.lambdify((x, y), e, "numpy") for e in (K, sp.diff(K, x), sp.diff(K, y))]

    rng = np.random.default_rng(4)
    T, X, Y = rng.uniform(0, 10, 20), rng.uniform(0, 1020, 20), rng.uniform(0, 1020, 20)
    # jets are taken in scaled inputs; express the physical derivatives in those units
    st, sx, sy = SCALE
    out = {"d_t": derivs["d_t"](T, X, Y) * st, "d_x": derivs["d_x"](T, X, Y) * sx,
           "d_y": derivs["d_y"](T, X, Y) * sy, "d_xx": derivs["d_xx"](T, X, Y) * sx**2,
           "d_yy": derivs["d_yy"](T, X, Y) * sy**2}
    p = init_params(0, (3, 2, 1), input_scale=SCALE)
    k, kx, ky = (np.broadcast_to(fn(X, Y), X.shape) for fn in kfun)
    got = residual_from_outputs(out, p, ss, k, kx, ky)
    want = f_oracle(T, X, Y)
    np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-12 * np.max(np.abs(want)))


def test_network_residual_matches_finite_differences(field):
    p = random_net(5)
    phys = Physics(field=field)
    rng = np.random.default_rng(6)
    T, X, Y = rng.uniform(1, 9, 10), rng.uniform(100, 900, 10), rng.uniform(100, 900, 10)

    def h(tt, xx, yy):
        return forward(p, p.scale_inputs(tt, xx, yy))

    dt, dx = 1e-3, 1.0
    ht = (h(T + dt, X, Y) - h(T - dt, X, Y)) / (2 * dt)
    hx = (h(T, X + dx, Y) - h(T, X - dx, Y)) / (2 * dx)
    hy = (h(T, X, Y + dx) - h(T, X, Y - dx)) / (2 * dx)
    hxx = (h(T, X + dx, Y) - 2 * h(T, X, Y) + h(T, X - dx, Y)) / dx**2
    hyy = (h(T, X, Y + dx) - 2 * h(T, X, Y) + h(T, X, Y - dx)) / dx**2
    # K-gradients by differencing K itself, independent of the analytic ones
    K = lambda xx, yy: field.conductivity(xx, yy)[0]
    k = K(X, Y)
    kx = (K(X + dx, Y) - K(X - dx, Y)) / (2 * dx)
    ky = (K(X, Y + dx) - K(X, Y - dx)) / (2 * dx)
    want = 1e-4 * ht - k * (hxx + hyy) - kx * hx - ky * hy
    got = pde_residual(p, phys, T, X, Y)
    # pointwise residuals cancel, so tolerance is relative to the residual scale
    np.testing.assert_allclose(got, want, rtol=1e-4, atol=2e-5 * np.max(np.abs(want)))


def test_homogeneous_reduction_is_exact():
    p = random_net(7)
    rng = np.random.default_rng(8)
    T, X, Y = rng.uniform(0, 10, 15), rng.uniform(0, 1020, 15), rng.uniform(0, 1020, 15)
    basis = build_basis_2d(CovarianceSpec(), 20)
    flat = ConductivityField(basis, np.zeros(20))
    from tgnn.net import jet

    j = jet(p, p.scale_inputs(T, X, Y)).to_physical(p)
    eq5 = 1e-4 * j.d_t - (j.d_xx + j.d_yy)
    np.testing.assert_array_equal(pde_residual(p, Physics(field=flat), T, X, Y), eq5)
    np.testing.assert_array_equal(pde_residual(p, Physics(), T, X, Y), eq5)


def test_mse_pde_two_point_example(monkeypatch):
    import tgnn.physics_loss as pl

    monkeypatch.setattr(pl, "pde_residual", lambda *a: np.array([1.0, 3.0]))
    assert pl.mse_pde(None, Physics(), Points([0, 0], [0, 0], [0, 0])) == 5.0


def test_well_residual(field):
    p = constant_net(200.0)
    phys = Physics(field=field, well_rate=50.0, cell_area=400.0)
    tw = np.linspace(0.2, 10, 10)
    f = well_residual(p, phys, tw, np.full(10, 530.0), np.full(10, 530.0))
    np.testing.assert_allclose(f, 0.125, rtol=0, atol=1e-15)
    q = random_net(9)
    no_sink = Physics(field=field)
    np.testing.assert_array_equal(well_residual(q, no_sink, tw, np.full(10, 530.0), np.full(10, 530.0)),
                                  pde_residual(q, no_sink, tw, np.full(10, 530.0), np.full(10, 530.0)))
    with_sink = Physics(field=field, well_rate=50.0)
    loop = np.mean([(pde_residual(q, with_sink, [ti], [530.0], [530.0])[0] + 0.125) ** 2 for ti in tw])
    assert mse_pde_well(q, with_sink, Points(tw, np.full(10, 530.0), np.full(10, 530.0))) == pytest.approx(loop, rel=1e-12)


def small_points(rng, n=12):
    def lab():
        return Labeled(rng.uniform(0, 10, n), rng.uniform(0, 1020, n), rng.uniform(0, 1020, n), rng.uniform(size=n))

    return PointSets(data=lab(), colloc=Points(rng.uniform(0, 10, n), rng.uniform(0, 1020, n), rng.uniform(0, 1020, n)),
                     bc=lab(), ic=lab(), new_bc=lab(),
                     well=Points(rng.uniform(0, 10, 5), np.full(5, 530.0), np.full(5, 530.0)))


def fd_gradient_error(p, pts, phys, weights, h=1e-4):
    _, g = total_loss(p, pts, phys, weights, with_grad=True)
    worst = 0.0
    for arr, ga in zip(p.arrays(), g.arrays()):
        for idx in np.ndindex(arr.shape):
            v = arr[idx]
            arr[idx] = v + h
            fp = total_loss(p, pts, phys, weights)[0].total
            arr[idx] = v - h
            fm = total_loss(p, pts, phys, weights)[0].total
            arr[idx] = v
            fd = (fp - fm) / (2 * h)
            scale = max(abs(fd), 1e-3 * max(np.max(np.abs(x)) for x in g.arrays()))
            worst = max(worst, abs(fd - ga[idx]) / scale)
    return worst


@pytest.mark.parametrize("term", TERMS)
def test_gradient_of_each_term(term, field):
    rng = np.random.default_rng(TERMS.index(term))
    # shift/scale put outputs on both sides of the bounds so the penalties are active
    p = random_net(11 + TERMS.index(term), output_shift=0.5, output_scale=1.5)
    phys = Physics(field=field, well_rate=50.0, ek_bounds=(0.2, 0.8), ec_floor=0.5)
    weights = LossWeights.only(**{term: 1.0})
    bundle, _ = total_loss(p, small_points(rng), phys, weights)
    assert bundle.terms[term] > 0
    assert fd_gradient_error(p, small_points(np.random.default_rng(TERMS.index(term))), phys, weights) < 1e-4


def test_penalties_are_one_sided():
    pts = Points(np.zeros(3), np.zeros(3), np.zeros(3))
    # outputs move from outside toward and into the feasible band; penalty never rises
    prev_ek = prev_ec = np.inf
    for c in (1.8, 1.4, 1.0, 0.7, 0.5):
        ek = mse_ek_bounds(constant_net(c), pts, 0.0, 1.0)
        assert ek <= prev_ek
        prev_ek = ek
    for c in (70.0, 75.0, 80.5, 81.0, 90.0):
        ec = mse_ec_floor(constant_net(c), pts, 81.0)
        assert ec <= prev_ec
        prev_ec = ec
    assert prev_ek == 0.0 and prev_ec == 0.0


def test_total_is_weighted_sum(field):
    p = random_net(20)
    pts = small_points(np.random.default_rng(21))
    phys = Physics(field=field, well_rate=50.0, ec_floor=0.5)
    w = LossWeights(data=1, pde=1, bc=1, ic=1, ec=0, ek=1, pde_well=0.5, new_bc=2)
    b, _ = total_loss(p, pts, phys, w)
    assert "ec" not in b.terms
    assert b.total == pytest.approx(sum(w.as_dict()[t] * v for t, v in b.terms.items()), rel=1e-15)
    assert b.terms["data"] == pytest.approx(mse_data(p, pts.data), rel=1e-14)
    assert b.terms["pde"] == pytest.approx(mse_pde(p, phys, pts.colloc), rel=1e-12)
    assert b.terms["ek"] == pytest.approx(mse_ek_bounds(p, pts.colloc), rel=1e-12)
    assert all(v >= 0 for v in b.terms.values())


def test_all_zero_weights_and_absent_data(field):
    p = random_net(22)
    b, _ = total_loss(p, PointSets(), Physics(field=field), LossWeights.only())
    assert b.total == 0.0 and b.terms == {}
    pts = small_points(np.random.default_rng(23))
    pts.data = None
    b, _ = total_loss(p, pts, Physics(field=field), LossWeights(data=0, ec=0, pde_well=0))
    assert "data" not in b.terms


def test_empty_set_with_weight_rejected():
    with pytest.raises(EmptyPointSetError):
        total_loss(random_net(0), PointSets(), Physics(), LossWeights.only(bc=1.0))
    with pytest.raises(ValueError):
        LossWeights(pde=-1.0)


def test_ec_covers_well_points(field):
    p = constant_net(80.0)
    pts = PointSets(colloc=Points(np.zeros(3), np.zeros(3), np.zeros(3)),
                    well=Points(np.ones(1), np.full(1, 530.0), np.full(1, 530.0)))
    b, _ = total_loss(p, pts, Physics(field=field, ec_floor=81.0), LossWeights.only(ec=1.0))
    assert b.terms["ec"] == 1.0
    q = random_net(30, output_shift=0.5)
    pts = small_points(np.random.default_rng(31))
    phys = Physics(field=field, ec_floor=0.5)
    b, _ = total_loss(q, pts, phys, LossWeights.only(ec=1.0))
    both = Points(np.r_[pts.colloc.t, pts.well.t], np.r_[pts.colloc.x, pts.well.x], np.r_[pts.colloc.y, pts.well.y])
    assert b.terms["ec"] == pytest.approx(mse_ec_floor(q, both, 0.5), rel=1e-12)
    assert fd_gradient_error(q, pts, phys, LossWeights.only(ec=1.0, pde_well=1.0)) < 1e-4


def test_frozen_layer_gradients_skipped(field):
    p = random_net(32)
    pts = small_points(np.random.default_rng(33))
    phys = Physics(field=field, well_rate=50.0, ec_floor=0.5)
    w = LossWeights(new_bc=1.0, pde=1e6)
    _, full = total_loss(p, pts, phys, w, with_grad=True)
    mask = (False, True, False)
    _, part = total_loss(p, pts, phys, w, with_grad=True, trainable=mask)
    for i, on in enumerate(mask):
        if on:
            np.testing.assert_allclose(part.weights[i], full.weights[i], rtol=1e-12, atol=0)
        else:
            assert not np.any(part.weights[i]) and not np.any(part.biases[i])
