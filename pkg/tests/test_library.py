import json
import math

import numpy as np
import pytest

from oracles import containment_violations, mc_extremes
from trackcert.bounds import HyperRect
from trackcert.controller import TrackingPolicy
from trackcert.dynamics import make_model
from trackcert.library import (
    Certifier,
    CoverageMap,
    LibraryError,
    MemoCertifier,
    RsoaLibrary,
    StubSource,
    build_library,
    coverage_map,
    coverage_probability_bound,
    estimate_reference_lipschitz,
    execute_runtime,
    imitation_error,
    required_library_size,
    select_nearest,
)
from trackcert.numeric import Activation, MlpParams
from trackcert.reference import ReferenceTrajectory
from trackcert.scenario import Obstacle, SafetySpec, StubParams

# Toy loop: single integrator with u = 5 (p - x), so x' = 0.5 x + 0.5 p + w.
MODEL = make_model("single_integrator", dim=2, dt=0.1)
POLICY = TrackingPolicy(MlpParams([(5.0 * np.eye(2), np.zeros(2))], Activation("identity")), 1, 2, 2)
SPEC = SafetySpec(HyperRect([-2.5, -2.5], [2.5, 2.5]), [Obstacle((0.0, 0.0), 0.5)],
                  HyperRect([1.5, -0.5], [2.5, 0.5]), (0, 1))
X_I = HyperRect.from_center([-2.0, 0.0], [0.05, 0.05])
W = HyperRect.from_center([0.0, 0.0], [0.01, 0.01])
K = 30


def _stub(**kw):
    return StubSource(SPEC, np.array([-2.0, 0.0]), np.array([2.0, 0.0]), StubParams(MODEL, K=K, **kw))


class FixedSource:
    def __init__(self, states):
        self.tau = ReferenceTrajectory(states, MODEL.dt)
        self.calls = 0

    def __call__(self, rng):
        self.calls += 1
        return self.tau


class CountingCertifier:
    def __init__(self):
        self.inner = Certifier(MODEL, POLICY, W, SPEC)
        self.calls = 0

    def __call__(self, tau, X):
        self.calls += 1
        return self.inner(tau, X)


def _safe_states(seed=0):
    return _stub()(np.random.default_rng(seed)).states


def test_fixed_source_gives_identical_entries():
    src = FixedSource(_safe_states())
    lib = build_library(src, MODEL, POLICY, X_I, W, SPEC, 4)
    assert len(lib) == 4 and lib.complete and src.calls == 4
    assert lib.log.sampled == 4 and lib.log.admitted == 4
    assert all(np.array_equal(e.tau.states, src.tau.states) for e in lib.entries)


def test_obstacle_reference_rejected_before_certification():
    line = np.column_stack([np.linspace(-2, 2, K), np.zeros(K)])
    cert = CountingCertifier()
    with pytest.warns(UserWarning):
        lib = build_library(FixedSource(line), MODEL, POLICY, X_I, W, SPEC, 2, 5, certifier=cert)
    assert len(lib) == 0 and not lib.complete
    assert lib.log.precheck_fail == 5 and cert.calls == 0


def test_incomplete_library_warns():
    line = np.column_stack([np.linspace(-2, 2, K), np.zeros(K)])
    with pytest.warns(UserWarning, match="0 of 2"):
        build_library(FixedSource(line), MODEL, POLICY, X_I, W, SPEC, 2, 3)


def test_bad_budget_rejected():
    with pytest.raises(ValueError):
        build_library(_stub(), MODEL, POLICY, X_I, W, SPEC, 0)
    with pytest.raises(ValueError):
        build_library(_stub(), MODEL, POLICY, X_I, W, SPEC, 5, 3)


def test_rsoa_failures_are_logged():
    # wide disturbance makes most references uncertifiable near the obstacle
    wide = HyperRect.from_center([0.0, 0.0], [0.3, 0.3])
    with pytest.warns(UserWarning):
        lib = build_library(_stub(via_sigma=0.3), MODEL, POLICY, X_I, wide, SPEC, 3, 20)
    assert lib.log.rsoa_fail > 0
    assert lib.log.sampled == lib.log.admitted + lib.log.precheck_fail + lib.log.rsoa_fail
    assert lib.log.admitted == len(lib)


def test_two_mode_library_entries_contain_samples():
    lib = build_library(_stub(via_sigma=0.1), MODEL, POLICY, X_I, W, SPEC, 5)
    assert len(lib) == 5
    assert {e.meta["mode"] for e in lib.entries} == {"above", "below"}
    for e in lib.entries:
        lo, hi = mc_extremes(MODEL, POLICY, e.tau, X_I, W, K, 10_000, np.random.default_rng(0))
        assert containment_violations(e.boxes, lo, hi) == 0


def test_library_independent_of_jobs():
    a = build_library(_stub(via_sigma=0.1), MODEL, POLICY, X_I, W, SPEC, 3, seed=4)
    b = build_library(_stub(via_sigma=0.1), MODEL, POLICY, X_I, W, SPEC, 3, seed=4, jobs=2)
    assert a.to_json() == b.to_json()


def test_memo_certifier_reuses_results():
    memo = MemoCertifier(Certifier(MODEL, POLICY, W, SPEC))
    lib = build_library(FixedSource(_safe_states()), MODEL, POLICY, X_I, W, SPEC, 3, certifier=memo)
    assert len(lib) == 3 and memo.calls == 1


def test_library_file_checks_hashes(tmp_path):
    lib = build_library(_stub(), MODEL, POLICY, X_I, W, SPEC, 2)
    lib.save(tmp_path / "lib.json")
    back = RsoaLibrary.load(tmp_path / "lib.json", SPEC, POLICY)
    assert back.to_json() == lib.to_json()
    with pytest.raises(LibraryError, match="spec"):
        RsoaLibrary.load(tmp_path / "lib.json", SPEC.with_obstacles([]), POLICY)
    other = TrackingPolicy(MlpParams([(4.0 * np.eye(2), np.zeros(2))], Activation("identity")), 1, 2, 2)
    with pytest.raises(LibraryError, match="policy"):
        RsoaLibrary.load(tmp_path / "lib.json", SPEC, other)


# ---------------------------------------------------------------------------
# nearest selection
# ---------------------------------------------------------------------------

def test_select_self():
    refs = [np.random.default_rng(i).normal(size=(5, 2)) for i in range(4)]
    assert select_nearest(refs[2], refs) == (2, 0.0)


def test_select_hand_distances():
    samp = np.zeros((2, 2))
    a = np.array([[1.0, 0.0], [1.0, 0.0]])  # 2.0
    b = np.array([[1.0, 2.0], [0.0, 0.0]])  # 5.0
    assert select_nearest(samp, [b, a]) == (1, 2.0)
    assert select_nearest(samp, [a, b]) == (0, 2.0)


def test_select_ties_lowest_index_and_pads():
    samp = np.zeros((3, 1))
    refs = [np.ones((3, 1)), -np.ones((3, 1)), np.ones((1, 1))]
    assert select_nearest(samp, refs) == (0, 3.0)


def test_select_scaling():
    rng = np.random.default_rng(0)
    refs = [rng.normal(size=(6, 2)) for _ in range(5)]
    samp = rng.normal(size=(6, 2))
    i, E = select_nearest(samp, refs)
    j, F = select_nearest(3.0 * samp, [3.0 * r for r in refs])
    assert i == j and F == pytest.approx(9.0 * E)


def test_select_empty():
    with pytest.raises(LibraryError):
        select_nearest(np.zeros((2, 2)), [])


# ---------------------------------------------------------------------------
# runtime
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def toy_library():
    return build_library(_stub(via_sigma=0.1), MODEL, POLICY, X_I, W, SPEC, 4)


def test_runtime_center_contained(toy_library):
    tau = _stub(via_sigma=0.1)(np.random.default_rng(99))
    xi, rep = execute_runtime(X_I.center, tau, toy_library, POLICY, MODEL, np.zeros((K, 2)))
    assert rep.certified and rep.all_contained and xi.shape == (K, 2)


def test_runtime_random_admissible_runs_contained(toy_library):
    rng = np.random.default_rng(1)
    for _ in range(50):
        x = X_I.sample(rng, 1)[0]
        w = rng.uniform(W.lower, W.upper, (K, 2))
        _, rep = execute_runtime(x, _stub(via_sigma=0.1)(rng), toy_library, POLICY, MODEL, w)
        assert rep.certified and rep.all_contained


def test_runtime_singleton(toy_library):
    single = RsoaLibrary(toy_library.entries[:1], toy_library.config)
    far = np.full((K, 2), 100.0)
    _, rep = execute_runtime(X_I.center, far, single, POLICY, MODEL)
    assert rep.index == 0


def test_runtime_flags_adversarial_disturbance(toy_library):
    w = np.tile([0.0, 0.5], (K, 1))
    _, rep = execute_runtime(X_I.center, toy_library.entries[0].tau, toy_library, POLICY, MODEL, w)
    assert not rep.w_admissible and not rep.certified
    assert not rep.all_contained
    assert any("leaves" in n for n in rep.warnings)


def test_runtime_outside_input_set(toy_library):
    x = np.array([-1.0, 1.0])
    _, rep = execute_runtime(x, toy_library.entries[0].tau, toy_library, POLICY, MODEL)
    assert not rep.in_input_set and rep.warnings
    with pytest.raises(LibraryError):
        execute_runtime(x, toy_library.entries[0].tau, toy_library, POLICY, MODEL, require_certified=True)


def test_imitation_error_zero_for_library_member(toy_library):
    assert imitation_error(X_I.center, toy_library.entries[2].tau, toy_library, POLICY, MODEL) == 0.0


def test_imitation_error_below_lipschitz_bound(toy_library):
    rng = np.random.default_rng(3)
    samples = [_stub(via_sigma=0.2)(rng) for _ in range(30)]
    refs = [e.tau for e in toy_library.entries] + samples
    L = estimate_reference_lipschitz(MODEL, POLICY, X_I.center, refs, 1000, np.random.default_rng(0))
    for tau in samples:
        i, E_tau = select_nearest(tau, toy_library)
        E_xi = imitation_error(X_I.center, tau, toy_library, POLICY, MODEL)
        assert E_xi <= L * math.sqrt(E_tau) + 1e-12


def test_required_library_size_examples():
    assert required_library_size(math.exp(-1), 1.0) == 1
    assert required_library_size(0.05, 0.1) == 30
    with pytest.raises(ValueError):
        required_library_size(1.0, 0.5)
    with pytest.raises(ValueError):
        required_library_size(0.1, 0.0)


def test_required_library_size_monotone():
    alphas = np.linspace(0.01, 0.99, 40)
    ps = np.linspace(0.01, 1.0, 40)
    C = np.array([[required_library_size(a, p) for p in ps] for a in alphas])
    assert np.all(np.diff(C, axis=0) <= 0) and np.all(np.diff(C, axis=1) <= 0)
    for a in alphas[::5]:
        for p in ps[::5]:
            assert 1 - coverage_probability_bound(p, required_library_size(a, p)) <= a + 1e-12


# ---------------------------------------------------------------------------
# coverage maps
# ---------------------------------------------------------------------------

def test_single_cell_map_matches_library():
    cmap = coverage_map(MODEL, POLICY, _stub(), X_I, 1, W, SPEC, K=K)
    lib = build_library(_stub(), MODEL, POLICY, X_I, W, SPEC, 1, 1, K=K)
    assert cmap.safe_cells == [0] and len(lib) == 1
    assert np.array_equal(cmap.cells[0].entry.tau.states, lib.entries[0].tau.states)
    assert cmap.cells[0].boxes == lib.entries[0].boxes


@pytest.fixture(scope="module")
def toy_map():
    big = HyperRect([-2.3, -0.3], [-1.7, 0.3])
    return coverage_map(MODEL, POLICY, _stub(), big, [3, 3], W, SPEC, K=K)


def test_map_cells_cover_and_are_certified(toy_map):
    assert len(toy_map.cells) == 9
    assert toy_map.safe_cells == list(range(9))
    for c in toy_map.cells:
        lo, hi = mc_extremes(MODEL, POLICY, c.entry.tau, c.input_set, W, K, 2000, np.random.default_rng(c.index))
        assert containment_violations(c.boxes, lo, hi) == 0


def test_requery_with_far_obstacle_keeps_safe_cells(toy_map):
    far = SPEC.with_obstacles([Obstacle((50.0, 50.0), 1.0)])
    assert set(toy_map.safe_cells) <= set(toy_map.requery(far))


def test_requery_blocking_obstacle_drops_cells(toy_map):
    blocked = SPEC.with_obstacles([Obstacle(tuple(toy_map.cells[0].boxes[15].center), 0.05)])
    assert 0 not in toy_map.requery(blocked)


def test_map_round_trip(toy_map):
    back = CoverageMap.from_dict(json.loads(toy_map.to_json()))
    assert back.requery(SPEC) == toy_map.requery(SPEC)
    assert len(back.to_library()) == 9
