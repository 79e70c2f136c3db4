import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from trackcert.controller import TrackingPolicy, pad_reference
from trackcert.dynamics import (
    DynamicsError,
    RolloutError,
    eval_continuous,
    lift_positions,
    make_model,
    model_from_json,
    rollout,
    step_discrete,
)
from trackcert.numeric import Activation, MlpParams, init_mlp, mlp_forward


def _zero_policy(n, m, N=1):
    layer = (np.zeros((m, n * N)), np.zeros(m))
    return TrackingPolicy(MlpParams([layer], Activation("identity")), N, n, m)


def test_unicycle3_heading_zero():
    f = eval_continuous(make_model("unicycle3"), np.zeros(3), np.array([1.0, 0.0]))
    assert f.tolist() == [1.0, 0.0, 0.0]


def test_planar_quad_hover_is_equilibrium():
    f = eval_continuous(make_model("planar_quad", m=0.5, g=-9.81), np.zeros(6), np.array([4.905, 0.0]))
    np.testing.assert_allclose(f, 0.0, atol=1e-15)


def test_quad3d_hover_is_equilibrium():
    f = eval_continuous(make_model("quad3d", m=1.0, g=-9.81), np.zeros(12), np.array([9.81, 0, 0, 0]))
    np.testing.assert_allclose(f, 0.0, atol=1e-15)


def test_euler_step_with_disturbance():
    x = step_discrete(make_model("unicycle3", dt=0.1), np.zeros(3), np.array([1.0, 0.0]),
                      np.array([0.05, 0.0, 0.0]))
    np.testing.assert_allclose(x, [0.15, 0.0, 0.0], atol=1e-15)


def test_zero_field_is_fixed_point():
    m = make_model("single_integrator", dim=3)
    x = np.array([0.3, -1.0, 2.0])
    assert np.array_equal(step_discrete(m, x, np.zeros(3), np.zeros(3)), x)


def _planar_quad_euler(x, u, dt, m, g, Iy):
    px, py, th, vx, vy, om = x
    return np.array([
        px + dt * vx,
        py + dt * vy,
        th + dt * om,
        vx + dt * (-u[0] / m * math.sin(th)),
        vy + dt * (u[0] / m * math.cos(th) + g),
        om + dt * (u[1] / Iy),
    ])


@given(st.integers(0, 2**31))
def test_planar_quad_matches_hand_integrator(seed):
    rng = np.random.default_rng(seed)
    model = make_model("planar_quad")
    x, u, w = rng.normal(size=6), rng.normal(size=2) * 5, rng.normal(size=6) * 0.1
    ref = _planar_quad_euler(x, u, model.dt, 0.5, -9.81, 0.01) + w
    np.testing.assert_allclose(step_discrete(model, x, u, w), ref, rtol=0, atol=1e-12)


def test_quad3d_matches_hand_integrator():
    rng = np.random.default_rng(0)
    model = make_model("quad3d")
    x = rng.normal(size=12) * 0.3
    u = rng.normal(size=4)
    psi, th, phi = x[3:6]
    p, q, r = x[9:12]
    T = u[0] / 1.0
    f = np.concatenate([
        x[6:9],
        [(q * math.sin(phi) + r * math.cos(phi)) / math.cos(th),
         q * math.cos(phi) - r * math.sin(phi),
         p + (q * math.sin(phi) + r * math.cos(phi)) * math.tan(th)],
        [T * (math.sin(phi) * math.sin(psi) + math.cos(phi) * math.cos(psi) * math.sin(th)),
         T * (math.cos(psi) * math.sin(phi) - math.cos(phi) * math.sin(psi) * math.sin(th)),
         T * math.cos(phi) * math.cos(th) - 9.81],
        [q * r * (0.1 - 0.3) / 0.5 + u[1] / 0.5,
         p * r * (0.3 - 0.5) / 0.1 + u[2] / 0.1,
         p * q * (0.5 - 0.1) / 0.3 + u[3] / 0.3],
    ])
    np.testing.assert_allclose(step_discrete(model, x, u), x + 0.05 * f, atol=1e-12)


def test_quad3d_guard_rejects_near_vertical_pitch():
    x = np.zeros(12)
    x[4] = math.pi / 2 - 0.05
    with pytest.raises(DynamicsError, match="pitch"):
        eval_continuous(make_model("quad3d"), x, np.zeros(4))


def test_dimension_mismatch_and_bad_params():
    with pytest.raises(DynamicsError):
        eval_continuous(make_model("unicycle3"), np.zeros(4), np.zeros(2))
    with pytest.raises(DynamicsError):
        make_model("planar_quad", m=-1.0)
    with pytest.raises(DynamicsError):
        make_model("boat")


def test_learned_model_wraps_mlp():
    rng = np.random.default_rng(0)
    p = init_mlp([5, 4, 3], rng)
    model = make_model("learned_mlp", mlp=p.to_dict(), base="unicycle3")
    x, u = rng.normal(size=3), rng.normal(size=2)
    np.testing.assert_allclose(eval_continuous(model, x, u), mlp_forward(p, np.concatenate([x, u])))
    again = model_from_json(__import__("json").dumps(model.to_dict()))
    np.testing.assert_allclose(eval_continuous(again, x, u), eval_continuous(model, x, u))
    with pytest.raises(DynamicsError):
        make_model("learned_mlp", mlp=p.to_dict(), base="planar_quad")


def test_rollout_single_step_unrolls(unicycle):
    model, policy = unicycle.model, unicycle.policy
    tau = pad_reference(unicycle.tau, 1, policy.N)
    x_I = unicycle.tau.states[0] + 0.01
    w = np.array([[0.01, -0.02, 0.0]])
    from trackcert.controller import build_error_window, policy_control
    u = policy_control(policy, build_error_window(x_I, tau, 0, policy.N))
    xs = rollout(model, policy, x_I, tau, w, K=1)
    np.testing.assert_allclose(xs[0], step_discrete(model, x_I, u, w[0]))


def test_rollout_identity_closed_loop():
    model = make_model("single_integrator", dim=2)
    tau = np.random.default_rng(0).normal(size=(12, 2))
    xs = rollout(model, _zero_policy(2, 2, 2), np.array([1.0, 2.0]), tau, np.zeros((10, 2)), K=10)
    assert np.all(xs == np.array([1.0, 2.0]))


def test_rollout_batch_matches_single(unicycle):
    model, policy = unicycle.model, unicycle.policy
    tau = pad_reference(unicycle.tau, 20, policy.N)
    rng = np.random.default_rng(1)
    x0 = tau[0] + rng.normal(0, 0.05, (4, 3))
    w = rng.normal(0, 0.01, (4, 20, 3))
    batch = rollout(model, policy, x0, tau, w, K=20)
    for i in range(4):
        np.testing.assert_allclose(batch[i], rollout(model, policy, x0[i], tau, w[i], K=20), atol=1e-14)


def test_rollout_reports_failing_step():
    model = make_model("quad3d")
    N = 1
    layer = (np.zeros((4, 12)), np.array([9.81, 0.0, 20.0, 0.0]))  # constant pitch torque
    policy = TrackingPolicy(MlpParams([layer], Activation("identity")), N, 12, 4)
    with pytest.raises(RolloutError) as err:
        rollout(model, policy, np.zeros(12), np.zeros((60, 12)), K=50)
    assert err.value.step > 1


def test_rollout_rejects_short_reference():
    with pytest.raises(DynamicsError):
        rollout(make_model("single_integrator"), _zero_policy(2, 2, 3), np.zeros(2), np.zeros((4, 2)), K=5)


def test_lift_planar_quad_straight_line_is_level():
    model = make_model("planar_quad")
    pos = np.column_stack([np.linspace(0, 1, 30), np.zeros(30)])
    lifted = lift_positions(model, pos)
    np.testing.assert_allclose(lifted[:, 2], 0.0, atol=1e-12)
    np.testing.assert_allclose(lifted[:, 3], 1.0 / (29 * model.dt))
