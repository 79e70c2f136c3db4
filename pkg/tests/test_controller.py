import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import fd_max_relative_error
from trackcert.controller import (
    CurveSampler,
    TrackingPolicy,
    TrainConfig,
    build_error_window,
    load_policy,
    losses,
    pad_reference,
    policy_control,
    tracking_error,
    train_tracking_controller,
)
from trackcert.dynamics import make_model
from trackcert.numeric import init_mlp

BOUNDS2 = {"x_L": (-1.0, -1.0), "x_U": (1.0, 1.0), "u_L": (-1.0,), "u_U": (1.0,)}


def test_pad_single_point():
    assert pad_reference([[1.0, 2.0]], 1, 2).tolist() == [[1.0, 2.0]] * 3


@given(st.integers(1, 30), st.integers(1, 12), st.integers(0, 2**31))
def test_pad_copies_head_and_repeats_last(K, N, seed):
    tau = np.random.default_rng(seed).normal(size=(K, 3))
    out = pad_reference(tau, K, N)
    assert out.shape == (K + N, 3)
    assert np.array_equal(out[:K], tau)
    assert np.all(out[K:] == tau[-1])


def test_error_window_example():
    e = build_error_window(np.array([1.0, 1.0]), np.array([[2.0, 1.0], [0.0, 0.0]]), 0, 2)
    assert e.tolist() == [1.0, 0.0, -1.0, -1.0]


def test_error_window_perfect_tracking_and_padding():
    p = np.array([0.5, -0.5])
    assert not np.any(build_error_window(p, np.tile(p, (3, 1)), 1, 2))
    tau = np.random.default_rng(0).normal(size=(6, 2))
    padded = pad_reference(tau, 6, 3)
    x = np.array([0.2, 0.1])
    e = build_error_window(x, padded, 6, 3).reshape(3, 2)
    assert np.allclose(e, tau[-1] - x)


def test_error_window_overflow():
    with pytest.raises(IndexError):
        build_error_window(np.zeros(2), np.zeros((4, 2)), 3, 2)


def test_policy_ignores_reference_outside_window(unicycle):
    policy = unicycle.policy
    tau = pad_reference(unicycle.tau, 50, policy.N)
    x = tau[20] + 0.02
    k = 20
    u = policy_control(policy, build_error_window(x, tau, k, policy.N))
    moved = tau.copy()
    moved[:k] += 3.0
    moved[k + policy.N:] -= 3.0
    assert np.array_equal(u, policy_control(policy, build_error_window(x, moved, k, policy.N)))


def test_losses_zero_tracking_error():
    s = [np.array([0.1, 0.2]), np.array([0.3, 0.4])]
    lt, _, _ = losses(s, [np.zeros(1)] * 2, np.stack(s), BOUNDS2)
    assert lt == 0.0


def test_state_at_bound_costs_ln2():
    s = [np.array([1.0, -100.0])]
    _, ls, _ = losses(s, [np.zeros(1)], np.zeros((1, 2)), {**BOUNDS2, "x_L": (-1.0, -200.0)})
    # upper term of dim 0 sits at the bound; the other three are far inside
    others = math.log1p(math.exp(-2.0)) + math.log1p(math.exp(-101.0)) + math.log1p(math.exp(-100.0))
    assert ls - others == pytest.approx(0.693147, abs=1e-6)


def test_losses_hand_computed_two_step():
    sp = lambda t: math.log1p(math.exp(t))
    xs = [np.array([0.5, 1.5]), np.array([-2.0, 0.0])]
    us = [np.array([0.0]), np.array([3.0])]
    tgt = np.array([[0.0, 1.0], [-1.0, 0.0]])
    lt, ls, lc = losses(xs, us, tgt, BOUNDS2)
    assert lt == pytest.approx((0.25 + 0.25 + 1.0) / 2)
    state = [sp(0.5 - 1) + sp(-1 - 0.5), sp(1.5 - 1) + sp(-1 - 1.5), sp(-2 - 1) + sp(-1 + 2), sp(-1) + sp(-1)]
    assert ls == pytest.approx(sum(state) / 2)
    ctrl = [sp(-1) + sp(-1), sp(3 - 1) + sp(-1 - 3)]
    assert lc == pytest.approx(sum(ctrl) / 2)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lambda_state=-1.0, x_L=(0,), x_U=(1,), u_L=(0,), u_U=(1,))
    with pytest.raises(ValueError):
        TrainConfig(x_L=(1,), x_U=(0,), u_L=(0,), u_U=(1,))
    with pytest.raises(ValueError):
        TrainConfig(hidden=(80, 40), x_L=(0,), x_U=(1,), u_L=(0,), u_U=(1,))


def test_policy_width_checked_and_round_trips(tmp_path):
    p = init_mlp([6, 4, 2], np.random.default_rng(0))
    with pytest.raises(ValueError):
        TrackingPolicy(p, 3, 3, 2)
    pol = TrackingPolicy(p, 2, 3, 2)
    path = tmp_path / "p.json"
    path.write_text(pol.to_json())
    assert load_policy(path).digest() == pol.digest()


@pytest.mark.parametrize("N", [1, 5, 10])
def test_loss_gradient_matches_finite_differences(N):
    assert max(fd_max_relative_error(seed, N=N)[0] for seed in range(4)) < 1e-4


def _si_config(**kw):
    base = dict(hidden=(8,), N=2, epochs=40, steps_per_epoch=50, batch_size=16, lr=1e-2, lr_final=1e-4,
                K=30, train_refs=40, val_refs=20, x_L=(-10.0, -10.0), x_U=(10.0, 10.0),
                u_L=(-20.0, -20.0), u_U=(20.0, 20.0), threshold=0.01)
    base.update(kw)
    return TrainConfig(**base)


def test_single_integrator_learns_straight_lines():
    model = make_model("single_integrator", dim=2)
    cfg = _si_config(lambda_state=0.0, lambda_ctrl=0.0)
    assert cfg.epochs * cfg.steps_per_epoch <= 2000
    res = train_tracking_controller(model, cfg, CurveSampler(model, K=30, straight=True))
    assert res.val_error < 0.01 and res.threshold_met
    assert [r["total"] for r in res.log] == pytest.approx([r["L_track"] for r in res.log], rel=0, abs=0)


def test_training_is_deterministic():
    model = make_model("single_integrator", dim=2)
    cfg = _si_config(epochs=3, threshold=1.0)
    a = train_tracking_controller(model, cfg, CurveSampler(model, K=30, straight=True))
    b = train_tracking_controller(model, cfg, CurveSampler(model, K=30, straight=True))
    assert a.policy.to_json() == b.policy.to_json()
    assert a.log_csv() == b.log_csv()


def test_unmet_threshold_warns():
    model = make_model("single_integrator", dim=2)
    with pytest.warns(UserWarning, match="threshold"):
        res = train_tracking_controller(model, _si_config(epochs=1, steps_per_epoch=2, threshold=1e-6),
                                        CurveSampler(model, K=30, straight=True))
    assert not res.threshold_met


def test_unicycle_controller_generalizes(unicycle):
    sampler = CurveSampler(unicycle.model, K=100)
    rng = np.random.default_rng(unicycle.cfg.get("seed", 0))
    train = [sampler(rng) for _ in range(50)]
    held_out = [sampler(np.random.default_rng([7, i])) for i in range(50)]
    e_train = tracking_error(unicycle.model, unicycle.policy, train)
    e_held = tracking_error(unicycle.model, unicycle.policy, held_out)
    assert e_held <= 2.0 * e_train
