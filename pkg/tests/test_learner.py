import numpy as np
import pytest

from densplan.distributions import InitialDistribution
from densplan.dynamics import LinearSystem
from densplan.errors import DivergedTraining, HorizonExceeded
from densplan.learner import (
    DataSpec,
    Dataset,
    MlpModel,
    ModelPredictor,
    TrainConfig,
    build_dataset,
    gradient_check,
    rmse,
    train,
)
from densplan.scenario import car_template


def _decay_spec(n_steps=50):
    return DataSpec(LinearSystem([[-1.0]]), InitialDistribution.uniform([-1.0], [1.0]), n_steps=n_steps, dt=0.02)


def test_dataset_row_count_and_split():
    d = build_dataset(10, _decay_spec(), seed=0)
    assert d.n_rows == 500
    assert len(d.train_idx) + len(d.eval_idx) == 500
    assert not np.intersect1d(d.train_idx, d.eval_idx).size
    # split by trajectory, never by row
    assert not np.intersect1d(d.traj_id[d.train_idx], d.traj_id[d.eval_idx]).size
    assert np.all(np.isfinite(d.inputs)) and np.all(np.isfinite(d.targets))


def test_dataset_deterministic():
    a = build_dataset(8, car_template(), seed=4)
    b = build_dataset(8, car_template(), seed=4)
    np.testing.assert_array_equal(a.inputs, b.inputs)
    np.testing.assert_array_equal(a.targets, b.targets)
    np.testing.assert_array_equal(a.eval_idx, b.eval_idx)
    c = build_dataset(8, car_template(), seed=5)
    assert not np.array_equal(a.inputs, c.inputs)


def test_zero_variance_zero_disturbance_targets_are_zero():
    sc = car_template()
    spec = DataSpec(sc.loop, InitialDistribution.point([0.0, 0.0, 0.0]), InitialDistribution.point([0.0, 0.0]),
                    sc.u_min, sc.u_max, n_steps=20, dt=sc.dt)
    d = build_dataset(5, spec, seed=0)
    np.testing.assert_allclose(d.targets[:, :3], 0.0, atol=1e-12)


def test_linear_targets_match_analytic():
    d = build_dataset(6, _decay_spec(), seed=1)
    t, e0 = d.inputs[:, -1], d.inputs[:, 0]
    np.testing.assert_allclose(d.targets[:, 0], e0 * np.exp(-t), rtol=1e-9)
    np.testing.assert_allclose(d.targets[:, 1], t, rtol=1e-9)


def test_nonfinite_trajectories_dropped():
    spec = DataSpec(LinearSystem([[400.0]]), InitialDistribution.uniform([-1.0], [1.0]), n_steps=400, dt=0.1)
    d = build_dataset(4, spec, seed=0)
    assert d.meta["dropped"] == 4 and d.n_rows == 0


def test_dataset_invariants_enforced():
    with pytest.raises(ValueError):
        Dataset(np.zeros((3, 2)), np.zeros((2, 2)), np.zeros(3), np.arange(2), np.arange(2, 3), 1, 0, 0, 0.1, 3)
    with pytest.raises(ValueError):
        Dataset(np.zeros((3, 2)), np.zeros((3, 2)), np.zeros(3), np.arange(2), np.arange(1, 3), 1, 0, 0, 0.1, 3)


@pytest.fixture(scope="module")
def small_car_model():
    d = build_dataset(20, DataSpec.from_scenario(car_template(), n_steps=10), seed=0)
    return d, train(d, TrainConfig(steps=30, batch_size=64)).model


def test_gradient_check_at_init(small_car_model):
    d, _ = small_car_model
    x, y = d.subset("train")
    from densplan.learner import _norm_stats
    m = MlpModel.init(d.n_err, d.n_dist, d.n_uref, d.dt, d.n_steps, _norm_stats(x, y, d.n_err, d.dt * d.n_steps))
    assert gradient_check(m, x[:64], y[:64], n_weights=10) < 1e-4


def test_identity_at_t0(small_car_model):
    _, m = small_car_model
    e0 = np.array([[0.1, -0.2, 0.05], [0.0, 0.3, -0.1]])
    e, g = m.predict(e0, dist=[0.01, -0.02], u_ref=[2.0, 0.1], t=0.0)
    np.testing.assert_array_equal(e, e0)
    np.testing.assert_array_equal(g, 0.0)


def test_horizon_exceeded(small_car_model):
    _, m = small_car_model
    with pytest.raises(HorizonExceeded):
        m.predict([[0.0, 0.0, 0.0]], [0.0, 0.0], [1.0, 0.0], t=m.horizon * 1.5)
    with pytest.raises(HorizonExceeded):
        ModelPredictor(m).push(np.zeros((2, 3)), [0.0, 0.0], [1.0, 0.0], m.n_steps + 1)


def test_batching_transparent(small_car_model):
    _, m = small_car_model
    rng = np.random.default_rng(0)
    e0 = rng.uniform(-0.1, 0.1, (5, 3))
    e_b, g_b = m.predict(e0, [0.01, 0.0], [1.0, 0.0], t=0.1)
    for i in range(5):
        e_i, g_i = m.predict(e0[i], [0.01, 0.0], [1.0, 0.0], t=0.1)
        np.testing.assert_allclose(e_i[0], e_b[i], rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(g_i[0], g_b[i], rtol=1e-12, atol=1e-15)


def test_serialization_roundtrip(small_car_model):
    d, m = small_car_model
    blob = m.to_bytes("abc")
    m2 = MlpModel.from_bytes(blob)
    x = d.inputs[:50]
    np.testing.assert_array_equal(m.predict_rows(x), m2.predict_rows(x))
    assert m2.to_bytes("abc") == blob
    with pytest.raises(ValueError):
        MlpModel.from_bytes(b"garbage!" + blob[8:])


def test_training_deterministic():
    d = build_dataset(10, _decay_spec(20), seed=0)
    a = train(d, TrainConfig(steps=40, batch_size=32, seed=7)).model
    b = train(d, TrainConfig(steps=40, batch_size=32, seed=7)).model
    assert a.to_bytes() == b.to_bytes()


def test_constant_target_fit():
    # the t = 0 identity head makes the stationary flow (e_t = e0, g = 0) the constant target
    d = build_dataset(40, DataSpec(LinearSystem([[0.0]]), InitialDistribution.uniform([-1.0], [1.0]),
                                   n_steps=10, dt=0.1), seed=0)
    res = train(d, TrainConfig(steps=2000, batch_size=64, learning_rate=0.01))
    x, y = d.subset("eval")
    assert np.mean((res.model.predict_rows(x) - y) ** 2) <= 1e-6


def test_loss_decreases_and_divergence_detected():
    d = build_dataset(20, _decay_spec(20), seed=0)
    res = train(d, TrainConfig(steps=300, batch_size=32))
    assert res.history[-1] < res.history[0]
    with pytest.raises(DivergedTraining):
        train(d, TrainConfig(steps=300, batch_size=32, learning_rate=1e6, momentum=0.0))


def test_linear_decay_density_fit():
    d = build_dataset(200, _decay_spec(), seed=0)
    m = train(d, TrainConfig(steps=3000, batch_size=128)).model
    s_rmse, g_rmse = rmse(m, d)
    assert g_rmse < 0.05 and s_rmse < 0.05


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(steps=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(w_state=0.0, w_density=0.0)
