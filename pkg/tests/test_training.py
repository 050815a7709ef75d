import numpy as np
import pytest

from tgnn.net import Gradients, MlpParams, forward, init_params, load_checkpoint
from tgnn.physics_loss import Labeled, LossWeights, Physics, Points, PointSets
from tgnn.training import (
    AdamState,
    TrainConfig,
    TrainingError,
    adam_step,
    ic_from_model,
    layer_mask,
    train,
    transfer_mask,
    transfer_retrain,
)


def scalar_params(theta):
    return MlpParams((1, 1), [np.array([[theta]])], [np.array([0.0])], activation="identity")


def test_first_step_is_signed_learning_rate():
    p = init_params(0, (3, 4, 1))
    g = p.zeros_like()
    rng = np.random.default_rng(0)
    for a in g.arrays():
        a[:] = rng.normal(size=a.shape)
    before = [a.copy() for a in p.arrays()]
    adam_step(p, g, AdamState.zeros(p, lr=0.01))
    for b, a, ga in zip(before, p.arrays(), g.arrays()):
        np.testing.assert_allclose(a - b, -0.01 * np.sign(ga), rtol=1e-6)


def test_zero_gradient_leaves_params_and_decays_moments():
    p = init_params(1, (3, 4, 1))
    st = AdamState.zeros(p)
    st.m[0][:] = 1.0
    st.v[0][:] = 1.0
    before = [a.copy() for a in p.arrays()]
    adam_step(p, p.zeros_like(), st)
    # zero gradient with nonzero history still moves; with zero history it must not
    q = init_params(1, (3, 4, 1))
    adam_step(q, q.zeros_like(), AdamState.zeros(q))
    assert all(a.tobytes() == b.tobytes() for a, b in zip(q.arrays(), before))
    np.testing.assert_allclose(st.m[0], 0.9)
    np.testing.assert_allclose(st.v[0], 0.999)


def scalar_adam_oracle(theta, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t in range(1, steps + 1):
        g = 2 * (theta - 3.0)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    return theta


def test_quadratic_converges_like_scalar_recursion():
    p = scalar_params(0.0)
    st = AdamState.zeros(p, lr=0.1)
    for _ in range(2000):
        theta = p.weights[0][0, 0]
        g = Gradients([np.array([[2 * (theta - 3.0)]])], [np.zeros(1)])
        adam_step(p, g, st)
    assert abs(p.weights[0][0, 0] - 3.0) < 1e-3
    assert p.weights[0][0, 0] == pytest.approx(scalar_adam_oracle(0.0, 0.1, 2000), abs=1e-12)


def test_shape_mismatch_rejected():
    p = init_params(0, (3, 4, 1))
    q = init_params(0, (3, 5, 1))
    with pytest.raises(ValueError):
        adam_step(p, q.zeros_like(), AdamState.zeros(p))
    with pytest.raises(ValueError):
        layer_mask((True,), 2)


def teacher_student_points(n=50):
    teacher = init_params(7, (3, 3, 1))
    rng = np.random.default_rng(8)
    X = rng.uniform(size=(n, 3))
    h = forward(teacher, X)
    return PointSets(data=Labeled(X[:, 0], X[:, 1], X[:, 2], h))


def test_lr_zero_keeps_params():
    p = init_params(2, (3, 5, 1))
    res = train(p, teacher_student_points(), Physics(), TrainConfig(epochs=1, lr=0.0, weights=LossWeights.only(data=1)))
    assert all(a.tobytes() == b.tobytes() for a, b in zip(p.arrays(), res.params.arrays()))


def test_teacher_student_fit():
    res = train(init_params(3, (3, 8, 1)), teacher_student_points(), Physics(),
                TrainConfig(epochs=3000, lr=1e-2, weights=LossWeights.only(data=1), log_every=100))
    assert res.log[-1]["data"] < 1e-3
    first = [r["total"] for r in res.log[:3]]
    last = [r["total"] for r in res.log[-3:]]
    assert np.mean(last) < np.mean(first)


def test_training_does_not_touch_input_and_is_deterministic(tmp_path):
    p = init_params(4, (3, 6, 1))
    snap = [a.copy() for a in p.arrays()]
    cfg = TrainConfig(epochs=30, lr=1e-2, weights=LossWeights.only(data=1), data_batch=20, seed=5,
                      checkpoint_every=10)
    a = train(p, teacher_student_points(), Physics(), cfg, log_path=tmp_path / "log.csv", checkpoint_dir=tmp_path)
    b = train(p, teacher_student_points(), Physics(), cfg)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(snap, p.arrays()))
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.params.arrays(), b.params.arrays()))
    assert [r["total"] for r in a.log] == [r["total"] for r in b.log]
    assert (tmp_path / "log.csv").read_text().splitlines()[0].startswith("epoch,data,pde")
    ck = load_checkpoint(tmp_path / "epoch_000030.ckpt")
    assert all(x.tobytes() == y.tobytes() for x, y in zip(ck.arrays(), a.params.arrays()))


def test_linear_quadratic_descends_monotonically():
    # output linear in parameters: the data loss is a convex quadratic
    p = MlpParams((3, 1), [np.zeros((3, 1))], [np.zeros(1)], activation="identity")
    rng = np.random.default_rng(9)
    X = rng.uniform(size=(40, 3))
    h = X @ np.array([0.5, -1.0, 2.0]) + 0.3
    pts = PointSets(data=Labeled(X[:, 0], X[:, 1], X[:, 2], h))
    res = train(p, pts, Physics(), TrainConfig(epochs=300, lr=1e-3, weights=LossWeights.only(data=1)))
    totals = [r["total"] for r in res.log]
    assert np.all(np.diff(totals) <= 0)


def test_nonfinite_loss_aborts_with_record():
    p = init_params(0, (3, 4, 1))
    p.biases[-1][:] = np.nan
    with pytest.raises(TrainingError) as info:
        train(p, teacher_student_points(), Physics(), TrainConfig(epochs=5, weights=LossWeights.only(data=1)))
    assert info.value.record["epoch"] == 1


@pytest.mark.parametrize("mask", [(True, False, True), (False, False, False), (False, True, False)])
def test_frozen_layers_bitwise_and_moments_untouched(mask):
    p = init_params(6, (3, 5, 4, 1))
    res = train(p, teacher_student_points(), Physics(),
                TrainConfig(epochs=20, lr=1e-2, weights=LossWeights.only(data=1), freeze_mask=mask))
    for i, on in enumerate(mask):
        same = (res.params.weights[i].tobytes() == p.weights[i].tobytes()
                and res.params.biases[i].tobytes() == p.biases[i].tobytes())
        assert same != on
        if not on:
            assert not np.any(res.state.m[2 * i]) and not np.any(res.state.v[2 * i])


def test_transfer_mask_layout():
    assert transfer_mask(8) == (True, True, True, False, False, False, False, False)
    assert transfer_mask(8, 8) == (True,) * 8


def test_transfer_retrain_drops_data_and_uses_model_ic():
    p = init_params(10, (3, 6, 6, 1), input_scale=(10.0, 1020.0, 1020.0))
    rng = np.random.default_rng(11)
    colloc = Points(rng.uniform(4, 10, 30), rng.uniform(0, 1020, 30), rng.uniform(0, 1020, 30))
    bc = Labeled(rng.uniform(4, 10, 10), np.full(10, 10.0), rng.uniform(0, 1020, 10), np.ones(10))
    # the data set carries garbage; a retrain that used it would show a data term in the log
    junk = Labeled(np.zeros(3), np.zeros(3), np.zeros(3), np.full(3, 1e6))
    xy = (rng.uniform(0, 1020, 25), rng.uniform(0, 1020, 25))
    pts = PointSets(data=junk, colloc=colloc, bc=bc)
    cfg = TrainConfig(epochs=5, lr=1e-3, weights=LossWeights(pde=1.0, ec=0, ek=0, pde_well=0, new_bc=0),
                      freeze_mask=transfer_mask(3, 1))
    res = transfer_retrain(p, pts, Physics(), cfg, t_switch=4.0, ic_xy=xy)
    assert all("data" not in r for r in res.log)
    assert "ic" in res.log[0]
    for i in (1, 2):
        assert res.params.weights[i].tobytes() == p.weights[i].tobytes()
    ic = ic_from_model(p, 4.0, *xy)
    assert np.all(ic.t == 4.0)
    np.testing.assert_array_equal(ic.h, forward(p, p.scale_inputs(ic.t, ic.x, ic.y)))


def test_freeze_everything_is_identity():
    p = init_params(12, (3, 4, 1))
    res = transfer_retrain(p, teacher_student_points(), Physics(),
                           TrainConfig(epochs=10, weights=LossWeights.only(bc=0, data=1), freeze_mask=(False, False)),)
    assert all(a.tobytes() == b.tobytes() for a, b in zip(p.arrays(), res.params.arrays()))
