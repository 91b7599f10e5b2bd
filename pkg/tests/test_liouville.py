import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import simpson

from densplan.distributions import InitialDistribution, JointDistribution
from densplan.dynamics import CAR, HOVERCRAFT, ClosedLoop, LinearSystem, divergence
from densplan.errors import NonFiniteState
from densplan.liouville import (
    PiecewiseReference,
    Reference,
    TrajectorySample,
    flow_map,
    integrate_augmented,
    simulate_rollout,
)


def test_contracting_scalar_density_is_e():
    tr = integrate_augmented(LinearSystem([[-1.0]]), [[0.7]], 0.0, None, None, 1000, 1e-3, substeps=1)
    assert tr.densities[-1, 0] == pytest.approx(np.e, rel=1e-6)
    assert tr.errors[-1, 0, 0] == pytest.approx(0.7 * np.exp(-1), rel=1e-9)


def test_rotation_preserves_density():
    tr = integrate_augmented(LinearSystem([[0.0, -1.0], [1.0, 0.0]]), [[1.0, 0.5]], np.log(0.3), None, None,
                             200, 0.01)
    np.testing.assert_allclose(tr.densities[:, 0], 0.3, rtol=1e-10)


def test_zero_steps_is_identity():
    loop = ClosedLoop(CAR)
    e0 = np.array([[0.1, -0.2, 0.05]])
    tr = integrate_augmented(loop, e0, -1.5, np.zeros((0, 2)), None, 0, 0.02)
    np.testing.assert_array_equal(tr.errors[0], e0)
    np.testing.assert_array_equal(tr.log_densities, [[-1.5]])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_state_raises():
    with pytest.raises(NonFiniteState):
        integrate_augmented(LinearSystem([[200.0]]), [[1.0]], 0.0, None, None, 400, 0.1, substeps=1)


def _car_uref(n, seed=0):
    rng = np.random.default_rng(seed)
    return np.column_stack([1.0 + 0.5 * np.sin(np.arange(n) / 7), rng.uniform(-0.5, 0.5, n)])


def test_flow_map_identity_and_equilibrium():
    loop = ClosedLoop(CAR)
    u = _car_uref(30)
    e0 = np.array([[0.05, 0.02, -0.1]])
    np.testing.assert_array_equal(flow_map(loop, e0, u, None, 0, 0.02), e0)
    np.testing.assert_allclose(flow_map(loop, np.zeros((1, 3)), u, None, 30, 0.02), 0.0, atol=1e-14)


def test_flow_map_semigroup():
    loop = ClosedLoop(CAR)
    u = _car_uref(40)
    e0 = np.array([[0.1, -0.05, 0.2]])
    d = np.array([[0.02, -0.01]])
    full = flow_map(loop, e0, u, d, 40, 0.02)
    mid = flow_map(loop, e0, u[:15], d, 15, 0.02)
    rest = flow_map(loop, mid, u[15:], d, 25, 0.02)
    np.testing.assert_allclose(full, rest, atol=1e-8)


def test_liouville_consistency_against_quadrature():
    loop = ClosedLoop(CAR)
    n, dt = 1000, 1e-3
    u = np.tile([1.2, 0.3], (n, 1))
    e0 = np.array([[0.3, -0.2, 0.4]])
    tr = integrate_augmented(loop, e0, 0.0, u, None, n, dt, substeps=1)
    div = np.array([divergence(lambda e: loop.error_field(e, u[0]), tr.errors[k, 0]) for k in range(n + 1)])
    integral = simpson(div, x=tr.times)
    assert np.exp(tr.log_densities[-1, 0]) == pytest.approx(np.exp(-integral), rel=1e-6)


def test_mass_conservation_linear_system():
    A = np.array([[-0.8, 0.6], [-0.3, -1.2]])
    sys_ = LinearSystem(A)
    g = np.linspace(-1, 1, 11)
    e0 = np.array([[x, y] for x in g for y in g])
    rho0 = np.exp(-0.5 * np.sum(e0**2, axis=1))
    tr = integrate_augmented(sys_, e0, np.log(rho0), None, None, 100, 0.01)
    h = 1e-5
    masses = []
    for k in (0, 50, 100):
        # local cell volume transported by the flow = |det dPhi/de0| * cell area
        J = np.empty((len(e0), 2, 2))
        for i in range(2):
            step = np.zeros(2)
            step[i] = h
            plus = integrate_augmented(sys_, e0 + step, 0.0, None, None, k, 0.01).errors[-1]
            minus = integrate_augmented(sys_, e0 - step, 0.0, None, None, k, 0.01).errors[-1]
            J[:, :, i] = (plus - minus) / (2 * h)
        masses.append(np.sum(np.exp(tr.log_densities[k]) * np.abs(np.linalg.det(J))))
    np.testing.assert_allclose(masses, masses[0], rtol=0.01)


def test_rk4_fourth_order():
    loop = ClosedLoop(CAR)
    u = np.tile([1.5, 0.8], (10, 1))
    e0 = np.array([[0.8, -0.6, 1.0]])
    ends = [integrate_augmented(loop, e0, 0.0, u, None, 10, 0.1, substeps=s).errors[-1, 0] for s in (1, 2, 4)]
    d1 = np.linalg.norm(ends[0] - ends[2])
    d2 = np.linalg.norm(ends[1] - ends[2])
    # Richardson: successive differences shrink by ~2^4 (allow slack for the reference solution)
    assert d1 / d2 > 10


def test_heading_wrapped_after_steps():
    loop = ClosedLoop(CAR)
    tr = integrate_augmented(loop, [[0.0, 0.0, 3.1]], 0.0, np.tile([0.0, -2.0], (20, 1)), None, 20, 0.05)
    assert np.all(tr.errors[..., 2] > -np.pi) and np.all(tr.errors[..., 2] <= np.pi)


def test_trajectory_sample_validates_times():
    with pytest.raises(ValueError):
        TrajectorySample(np.array([0.0, 0.0]), np.zeros((2, 1, 1)))


# --------------------------------------------------------------- rollouts


def _ref(model=CAR, n=60):
    u = np.tile([1.0, 0.3], (n, 1)) if model is CAR else np.tile([1.0, 0.2, 0.3], (n, 1))
    q0 = np.zeros(model.state_dim)
    return Reference(model, q0, u, 0.02)


@pytest.mark.parametrize("model", [CAR, HOVERCRAFT])
def test_rollout_on_reference_follows_it(model):
    ref = _ref(model)
    sim = simulate_rollout(ClosedLoop(model), ref.q0, ref)
    np.testing.assert_allclose(sim.states[:, 0], ref.states, atol=1e-10)


def test_rollout_deterministic_and_contracting():
    ref = _ref()
    loop = ClosedLoop(CAR)
    q0 = ref.q0 + np.array([[0.1, -0.1, 0.1], [-0.05, 0.08, -0.2]])
    a = simulate_rollout(loop, q0, ref)
    b = simulate_rollout(loop, q0, ref)
    np.testing.assert_array_equal(a.states, b.states)
    assert np.all(np.linalg.norm(a.errors[-1], axis=1) <= np.linalg.norm(a.errors[0], axis=1))


def test_rollout_errors_match_error_integration():
    ref = _ref()
    loop = ClosedLoop(CAR)
    e0 = np.array([[0.05, -0.03, 0.02]])
    from densplan.dynamics import state_from_error

    sim = simulate_rollout(loop, state_from_error(e0, ref.q0), ref)
    tr = integrate_augmented(loop, e0, 0.0, ref.controls, None, ref.n_steps, ref.dt)
    np.testing.assert_allclose(sim.errors[:, 0], tr.errors[:, 0], atol=1e-9)


def test_piecewise_reference_matches_continuous_when_anchors_agree():
    seg = np.array([[1.0, 0.2], [1.5, -0.3], [0.8, 0.0]])
    full = Reference.from_segments(CAR, np.zeros(3), seg, 10, 0.02)
    anchors = full.states[[0, 10, 20]]
    pw = PiecewiseReference(CAR, anchors, seg, 10, 0.02)
    np.testing.assert_allclose(pw.states, full.states, atol=1e-12)
    loop = ClosedLoop(CAR)
    q0 = np.array([[0.05, 0.05, 0.0]])
    np.testing.assert_allclose(simulate_rollout(loop, q0, pw).states, simulate_rollout(loop, q0, full).states,
                               atol=1e-12)


def test_piecewise_reference_restarts_at_anchor():
    seg = np.array([[1.0, 0.0], [1.0, 0.0]])
    anchors = np.array([[0.0, 0.0, 0.0], [0.3, 0.1, 0.0]])
    pw = PiecewiseReference(CAR, anchors, seg, 5, 0.1)
    np.testing.assert_allclose(pw.states[5], anchors[1])
    np.testing.assert_allclose(pw.states[-1], [0.8, 0.1, 0.0], atol=1e-12)
    with pytest.raises(ValueError):
        PiecewiseReference(CAR, anchors[:1], seg, 5, 0.1)


# ---------------------------------------------------------- distributions


@pytest.mark.parametrize("dist", [
    InitialDistribution.gaussian([0.0, 1.0], [0.5, 0.2], width=3.0),
    InitialDistribution.uniform([-1.0, 0.0], [1.0, 0.5]),
])
def test_distribution_integrates_to_one(dist):
    xs = [np.linspace(lo, hi, 401) for lo, hi in zip(dist.lo, dist.hi)]
    X, Y = np.meshgrid(*xs, indexing="ij")
    pdf = dist.density(np.stack([X, Y], axis=-1))
    assert simpson(simpson(pdf, x=xs[1]), x=xs[0]) == pytest.approx(1.0, abs=2e-3)


@given(st.floats(-3, 3), st.floats(-3, 3))
def test_density_positive_iff_inside(x, y):
    d = InitialDistribution.gaussian([0, 0], [0.5, 0.5], width=2.0)
    p = d.density(np.array([x, y]))
    assert (p > 0) == bool(d.inside(np.array([x, y])))


def test_point_mass_dims_are_ignored_by_density(rng):
    d = InitialDistribution.point([0.0, 2.0])
    assert d.density(np.array([0.0, 2.0])) == 1.0
    np.testing.assert_array_equal(d.sample_uniform(rng, 5), np.tile([0.0, 2.0], (5, 1)))


def test_joint_distribution_concatenates(rng):
    a = InitialDistribution.uniform([0.0], [2.0])
    b = InitialDistribution.gaussian([0.0, 0.0], [1.0, 1.0])
    j = JointDistribution((a, b))
    x = j.sample_uniform(rng, 100)
    assert x.shape == (100, 3) and j.dim == 3
    np.testing.assert_allclose(j.log_density(x), a.log_density(x[:, :1]) + b.log_density(x[:, 1:]))
    assert j.support_volume == pytest.approx(2.0 * 36.0)


def test_truncated_sampler_stays_in_support(rng):
    d = InitialDistribution.gaussian([1.0], [0.1], width=2.0)
    x = d.sample(rng, 5000)
    assert np.all(d.inside(x))
    assert x.std() == pytest.approx(0.088, abs=0.01)  # sd of N(0,1) truncated at +-2 is 0.880
