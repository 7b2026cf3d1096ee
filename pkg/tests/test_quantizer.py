import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robustq.errors import ContractError, DimensionError, NonFiniteError
from robustq.nets import build_network
from robustq.quantizer import (
    QuantConfig,
    QuantState,
    bc_step,
    br_step,
    on_grid,
    project,
    project_4bit,
    project_binary,
    project_ternary,
    quant_step,
    relax_blend,
)

small_arrays = st.lists(st.floats(-3.0, 3.0, allow_nan=False), min_size=1, max_size=6).map(np.array)


def test_binary_projection():
    proj = project_binary(np.array([0.5, -1.5, 0.0, 2.0]))
    assert proj.scale == 1.0
    assert np.array_equal(proj.u, [1.0, -1.0, 1.0, 1.0])
    assert on_grid(proj.u, proj.scale, "binary")


def test_ternary_exact_picks_best_support():
    proj = project_ternary(np.array([3.0, -2.9, 0.1, 0.05]))
    assert proj.scale == pytest.approx(2.95)
    assert np.allclose(proj.u, [2.95, -2.95, 0.0, 0.0])
    assert on_grid(proj.u, proj.scale, "ternary")


def test_ternary_threshold():
    proj = project_ternary(np.array([1.0, -1.0, 0.1, 0.1]), method="threshold")
    assert proj.scale == 1.0
    assert np.array_equal(proj.u, [1.0, -1.0, 0.0, 0.0])


@settings(max_examples=60, deadline=None)
@given(small_arrays)
def test_ternary_exact_minimizes_distance(w):
    proj = project_ternary(w)
    best = np.sum(w ** 2)
    for k in range(1, w.size + 1):
        for support in itertools.combinations(range(w.size), k):
            idx = list(support)
            s = np.mean(np.abs(w[idx]))
            candidate = np.zeros_like(w)
            candidate[idx] = s * np.sign(w[idx])
            best = min(best, np.sum((w - candidate) ** 2))
    assert np.sum((w - proj.u) ** 2) <= best + 1e-9


@settings(max_examples=60, deadline=None)
@given(small_arrays)
def test_binary_scale_is_optimal(w):
    proj = project_binary(w)
    err = np.sum((w - proj.u) ** 2)
    sign = np.where(w >= 0, 1.0, -1.0)
    for s in np.linspace(0.0, 3.0, 61):
        assert err <= np.sum((w - s * sign) ** 2) + 1e-9


def test_four_bit_projection_is_on_grid_and_error_never_grows():
    w = np.random.default_rng(0).normal(size=(8, 3, 3, 3))
    trace = []
    proj = project_4bit(w, trace=trace)
    assert on_grid(proj.u, proj.scale, "four_bit")
    assert len(np.unique(proj.u)) <= 15
    assert len(trace) == 10
    assert all(b <= a + 1e-12 for a, b in zip(trace, trace[1:]))


@pytest.mark.parametrize("variant", ["binary", "ternary", "four_bit"])
def test_all_zero_array_is_degenerate(variant):
    proj = project(np.zeros((2, 3)), variant)
    assert proj.degenerate
    assert not proj.u.any()


@pytest.mark.parametrize("variant", ["binary", "ternary", "four_bit"])
def test_empty_array_is_rejected(variant):
    with pytest.raises(ContractError):
        project(np.zeros(0), variant)


def test_none_variant_copies():
    w = np.array([0.3, -0.2])
    proj = project(w, "none")
    assert proj.scale == 1.0 and np.array_equal(proj.u, w) and proj.u is not w


def test_unknown_variant():
    with pytest.raises(ContractError):
        project(np.ones(2), "octal")


def test_relax_blend():
    w = np.array([0.2, -0.4])
    p = np.array([1.0, -1.0])
    assert np.array_equal(relax_blend(w, p, 0.0), w)
    assert np.allclose(relax_blend(w, p, 3.0), (3.0 * p + w) / 4.0)
    assert np.allclose(relax_blend(w, p, 1e12), p)
    with pytest.raises(ContractError):
        relax_blend(w, p, -1.0)
    with pytest.raises(DimensionError):
        relax_blend(w, np.ones(3), 1.0)


def test_cutoff_resolution():
    assert QuantConfig(algorithm="bc", cutoff=7).resolve_cutoff(20) == 0
    assert QuantConfig().resolve_cutoff(20) == 16
    assert QuantConfig(cutoff=5).resolve_cutoff(20) == 5


@pytest.mark.parametrize("kwargs", [{"rho": 1.0}, {"lam0": -1.0}, {"variant": "octal"}, {"cutoff": -1}])
def test_config_validation(kwargs):
    with pytest.raises(ContractError):
        QuantConfig(**kwargs)


def test_state_starts_from_network_weights(tiny_net):
    state = QuantState.from_network(tiny_net, QuantConfig(), epochs=10)
    assert list(state.w) == tiny_net.quantizable
    for name in state.w:
        assert np.array_equal(state.w[name], tiny_net.weights[name])
        assert np.array_equal(state.u[name], state.w[name])
    assert state.cutoff == 8 and state.lam == 1.0
    assert "m0.stem.bn.gamma" in state.float_params


def test_exempt_boundary_layers(tiny_net):
    state = QuantState.from_network(tiny_net, QuantConfig(exempt_first=True, exempt_last=True), epochs=10)
    assert "m0.stem.conv.weight" not in state.w
    assert "m0.fc.weight" not in state.w
    assert "m0.fc.weight" in state.float_params


def test_float_training_quantizes_nothing(tiny_net):
    state = QuantState.from_network(tiny_net, QuantConfig(variant="none"), epochs=10)
    assert state.w == {} and set(state.float_params) == set(tiny_net.weights)


def _zero_directions(state):
    return {name: np.zeros_like(array) for name, array in state.w.items()}


def test_br_step_blends_and_grows_lambda(tiny_net):
    state = QuantState.from_network(tiny_net, QuantConfig(lam0=2.0, rho=1.5), epochs=10)
    stepped = br_step(state, _zero_directions(state), lr=0.1)
    assert stepped.lam == pytest.approx(3.0)
    assert stepped.steps == 1
    name = "m0.s0.b0.conv1.weight"
    proj = project_binary(state.w[name])
    assert np.allclose(stepped.u[name], (2.0 * proj.u + state.w[name]) / 3.0)
    assert stepped.scales[name] == pytest.approx(proj.scale)


def test_lambda_grows_geometrically(tiny_net):
    state = QuantState.from_network(tiny_net, QuantConfig(rho=1.02), epochs=10)
    for _ in range(5):
        state = br_step(state, _zero_directions(state), lr=0.1)
    assert state.lam == pytest.approx(1.02 ** 5)


def test_descent_moves_shadow_weights(tiny_net):
    state = QuantState.from_network(tiny_net, QuantConfig(), epochs=10)
    directions = {name: np.ones_like(array) for name, array in state.w.items()}
    stepped = br_step(state, directions, lr=0.5)
    name = "m0.fc.weight"
    assert np.allclose(stepped.w[name], state.w[name] - 0.5)


def test_br_step_refuses_after_cutoff(tiny_net):
    state = QuantState.from_network(tiny_net, QuantConfig(algorithm="bc"), epochs=10)
    with pytest.raises(ContractError):
        br_step(state, _zero_directions(state), lr=0.1)


@pytest.mark.parametrize("variant", ["binary", "ternary", "four_bit"])
def test_projected_steps_land_on_grid(tiny_net, variant):
    state = QuantState.from_network(tiny_net, QuantConfig(variant=variant, algorithm="bc"), epochs=10)
    assert state.projecting
    state = quant_step(state, _zero_directions(state), lr=0.1)
    assert state.on_grid()
    state.apply_to(tiny_net)
    for name in state.u:
        assert np.array_equal(tiny_net.weights[name], state.u[name])


def test_quant_step_switches_at_cutoff(tiny_net):
    state = QuantState.from_network(tiny_net, QuantConfig(cutoff=1), epochs=3)
    state = quant_step(state, _zero_directions(state), lr=0.1)
    assert not state.on_grid()
    state.epoch = 1
    state = quant_step(state, _zero_directions(state), lr=0.1)
    assert state.on_grid()


def test_non_finite_direction_is_rejected(tiny_net):
    state = QuantState.from_network(tiny_net, QuantConfig(algorithm="bc"), epochs=10)
    directions = _zero_directions(state)
    directions["m0.fc.weight"][0, 0] = np.nan
    with pytest.raises(NonFiniteError):
        bc_step(state, directions, lr=0.1)


def test_missing_direction_is_rejected(tiny_net):
    state = QuantState.from_network(tiny_net, QuantConfig(algorithm="bc"), epochs=10)
    directions = _zero_directions(state)
    directions.pop("m0.fc.weight")
    with pytest.raises(ContractError):
        bc_step(state, directions, lr=0.1)


def test_shadow_network_carries_full_precision_weights(tiny_net):
    state = QuantState.from_network(tiny_net, QuantConfig(algorithm="bc"), epochs=10)
    state = bc_step(state, _zero_directions(state), lr=0.1)
    state.apply_to(tiny_net)
    shadow = state.shadow_network(tiny_net)
    assert np.array_equal(shadow.weights["m0.fc.weight"], state.w["m0.fc.weight"])
    assert np.array_equal(tiny_net.weights["m0.fc.weight"], state.u["m0.fc.weight"])


@pytest.mark.parametrize("variant", ["binary", "ternary", "four_bit"])
def test_projected_state_matches_fresh_projection_of_shadow(tiny_net, variant):
    state = QuantState.from_network(tiny_net, QuantConfig(variant=variant, algorithm="bc"), epochs=10)
    directions = {name: np.full_like(array, 0.05) for name, array in state.w.items()}
    state = bc_step(state, directions, lr=0.1)
    for name, proj in state.project_all().items():
        assert np.array_equal(state.u[name], proj.u)
        assert state.scales[name] == proj.scale


def test_relaxed_schedule_with_zero_cutoff_is_binary_connect(tiny_net):
    relaxed = QuantState.from_network(tiny_net, QuantConfig(algorithm="br", cutoff=0), epochs=3)
    connect = QuantState.from_network(tiny_net, QuantConfig(algorithm="bc"), epochs=3)
    directions = {name: np.full_like(array, 0.05) for name, array in relaxed.w.items()}
    for _ in range(3):
        relaxed = quant_step(relaxed, directions, lr=0.1)
        connect = quant_step(connect, directions, lr=0.1)
    assert relaxed.lam == connect.lam
    for name in relaxed.w:
        assert np.array_equal(relaxed.w[name], connect.w[name])
        assert np.array_equal(relaxed.u[name], connect.u[name])
