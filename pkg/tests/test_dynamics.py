import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hamildis.dynamics import (
    IntegrationError,
    NoiseSpec,
    PendulumParams,
    PhaseState,
    SpringParams,
    Trajectory,
    export_csv,
    generate_dataset,
    integrate_adaptive,
    load_dataset,
    pendulum_hamiltonian,
    rk4_step,
    save_dataset,
    spring_analytic,
    spring_hamiltonian,
    time_evolution,
    vector_field,
)


def rotation(y):
    return np.array([y[1], -y[0]])


def test_pendulum_hamiltonian_examples():
    assert pendulum_hamiltonian(PhaseState(0, 0), PendulumParams(l=0.7)) == 0.0
    assert pendulum_hamiltonian(PhaseState(math.pi / 2, 0), PendulumParams(l=0.5)) == pytest.approx(4.9)
    assert pendulum_hamiltonian(PhaseState(0, 1), PendulumParams(l=0.5)) == pytest.approx(2.0)


def test_spring_hamiltonian_examples():
    assert spring_hamiltonian(PhaseState(1, 0), SpringParams(k=0.5, m=1)) == pytest.approx(0.25)
    assert spring_hamiltonian(PhaseState(0, 0), SpringParams(k=0.3, m=0.7)) == 0.0
    assert spring_hamiltonian(PhaseState(1, 1), SpringParams(k=0.1, m=0.5)) == pytest.approx(1.05)


def test_time_evolution_examples():
    assert time_evolution(PhaseState(1, 0), SpringParams(k=0.25, m=1)) == (0.0, -0.25)
    dq, dp = time_evolution(PhaseState(0, 0.5), PendulumParams(l=0.5))
    assert (dq, dp) == (pytest.approx(2.0), pytest.approx(0.0))
    dq, dp = time_evolution(PhaseState(math.pi / 2, 0), PendulumParams(l=0.5))
    assert dq == 0.0 and dp == pytest.approx(-4.9)


@pytest.mark.parametrize("params", [PendulumParams(l=0.45), SpringParams(k=0.3, m=0.8)])
def test_time_evolution_is_symplectic_gradient(params):
    # central differences of H reproduce (dH/dp, -dH/dq)
    from hamildis.dynamics import hamiltonian

    for q, p in np.random.default_rng(0).uniform(-1.5, 1.5, (20, 2)):
        h = 1e-6
        dh_dq = (hamiltonian((q + h, p), params) - hamiltonian((q - h, p), params)) / (2 * h)
        dh_dp = (hamiltonian((q, p + h), params) - hamiltonian((q, p - h), params)) / (2 * h)
        dq, dp = time_evolution((q, p), params)
        assert dq == pytest.approx(dh_dp, rel=1e-6, abs=1e-8)
        assert dp == pytest.approx(-dh_dq, rel=1e-6, abs=1e-8)


def test_invalid_params_rejected():
    with pytest.raises(ValueError):
        PendulumParams(l=0.0)
    with pytest.raises(ValueError):
        SpringParams(k=-1, m=1)
    with pytest.raises(ValueError):
        PhaseState(float("nan"), 0)
    with pytest.raises(ValueError):
        NoiseSpec(std=-0.1)


def test_rk4_step_matches_rotation():
    y = rk4_step(np.array([1.0, 0.0]), rotation, 0.1)
    assert abs(y[0] - math.cos(0.1)) < 1e-7
    assert abs(y[0] - 0.99500417) < 1e-7


def test_rk4_zero_field_leaves_state():
    y0 = np.array([0.3, -1.2])
    np.testing.assert_array_equal(rk4_step(y0, lambda y: np.zeros_like(y), 0.37), y0)


def test_rk4_round_trip_error_order():
    # RK4 is not symmetric; on a linear field the round trip misses by O(h^6)
    y0 = np.array([0.8, -0.3])

    def gap(h):
        return np.linalg.norm(rk4_step(rk4_step(y0, rotation, h), rotation, -h) - y0)

    assert gap(0.2) < 1e-6
    assert 50 < gap(0.2) / gap(0.1) < 80


def test_spring_analytic_examples():
    np.testing.assert_allclose(spring_analytic((1, 0), SpringParams(1, 1), math.pi / 2), [0, -1], atol=1e-15)
    np.testing.assert_array_equal(spring_analytic((0.3, 0.4), SpringParams(0.2, 0.9), 0.0), [0.3, 0.4])
    w = math.sqrt(0.25)
    np.testing.assert_allclose(spring_analytic((1, 0), SpringParams(0.25, 1), 2 * math.pi / w), [1, 0], atol=1e-12)


def test_adaptive_spring_matches_closed_form():
    params = SpringParams(0.25, 1.0)
    t = np.linspace(0, 10, 101)
    ys = integrate_adaptive([1.0, 0.0], vector_field(params), t, tol=1e-12)
    exact = np.array([math.cos(0.5 * ti) for ti in t])
    assert np.max(np.abs(ys[:, 0] - exact)) < 1e-9
    assert np.max(np.abs(ys - spring_analytic((1, 0), params, t).T)) < 1e-9


@settings(max_examples=10, deadline=None)
@given(st.floats(0.3, 0.8))
def test_adaptive_pendulum_conserves_energy(length):
    params = PendulumParams(l=length)
    ys = integrate_adaptive([1.0, 0.0], vector_field(params), np.linspace(0, 10, 50), tol=1e-12)
    energy = pendulum_hamiltonian(ys.T, params)
    assert np.max(np.abs(energy - energy[0])) / max(abs(energy[0]), 1e-12) < 1e-8


def test_adaptive_zero_length_span():
    ys = integrate_adaptive([0.2, 0.1], rotation, [0.0])
    np.testing.assert_array_equal(ys, [[0.2, 0.1]])
    ys = integrate_adaptive([0.2, 0.1], rotation, [1.0, 1.0])
    np.testing.assert_array_equal(ys, [[0.2, 0.1], [0.2, 0.1]])


def test_adaptive_output_grid_independence():
    f = vector_field(PendulumParams(l=0.4))
    coarse = integrate_adaptive([1.0, 0.0], f, np.linspace(0, 20, 101), tol=1e-10)
    fine = integrate_adaptive([1.0, 0.0], f, np.linspace(0, 20, 201), tol=1e-10)
    assert np.max(np.abs(fine[::2] - coarse)) < 10 * 1e-10


def test_adaptive_batched_states():
    t = np.linspace(0, 5, 11)
    y0 = np.array([[1.0, 0.5], [0.0, -0.2]])
    ys = integrate_adaptive(y0, rotation, t, tol=1e-12)
    for j in range(2):
        single = integrate_adaptive(y0[:, j], rotation, t, tol=1e-12)
        np.testing.assert_allclose(ys[:, :, j], single, atol=1e-10)


def test_adaptive_errors():
    with pytest.raises(ValueError):
        integrate_adaptive([1, 0], rotation, [0, 1], tol=0)
    with pytest.raises(IntegrationError):
        integrate_adaptive([1.0, 0.0], lambda y: np.array([np.inf, 0.0]), [0, 1])
    # dq/dt = q^2 from q=1 blows up at t=1
    with pytest.raises(IntegrationError) as info:
        integrate_adaptive([1.0, 0.0], lambda y: np.array([y[0] ** 2, 0.0]), [0, 2])
    assert 0.9 < info.value.last_time <= 1.0


def test_trajectory_validation():
    with pytest.raises(ValueError):
        Trajectory(np.array([0.0, 0.0]), np.zeros((2, 2)), None)
    with pytest.raises(ValueError):
        Trajectory(np.array([0.0, 1.0]), np.zeros((3, 2)), None)


def test_zero_noise_dataset_is_clean():
    ds = generate_dataset("spring", 5, traj_len=20, noise=NoiseSpec(std=0.0), seed=1, keep_clean=True)
    np.testing.assert_array_equal(ds.observations, ds.clean.reshape(5, 40))
    for i in range(ds.count):
        p = ds.param_object(i)
        np.testing.assert_array_equal(ds.targets[i], time_evolution(ds.aux[i], p))
        t_idx = int(np.flatnonzero(ds.times == ds.aux_t[i])[0])
        np.testing.assert_array_equal(ds.aux[i], ds.clean[i, :, t_idx])


def test_dataset_deterministic():
    a = generate_dataset("pendulum", 4, traj_len=30, seed=3)
    b = generate_dataset("pendulum", 4, traj_len=30, seed=3)
    for name in ("params", "observations", "aux", "targets", "aux_t"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
    c = generate_dataset("pendulum", 4, traj_len=30, seed=4)
    assert c.observations.tobytes() != a.observations.tobytes()


def test_degenerate_range_gives_identical_clean_trajectories():
    ds = generate_dataset("pendulum", 3, traj_len=25, seed=0, ranges={"l": (0.5, 0.5)}, keep_clean=True)
    assert np.all(ds.params == 0.5)
    np.testing.assert_array_equal(ds.clean[0], ds.clean[1])
    np.testing.assert_array_equal(ds.clean[0], ds.clean[2])


def test_dataset_ranges_and_grid():
    ds = generate_dataset("spring", 50, traj_len=100, seed=0)
    assert np.all((ds.params[:, 0] >= 0.1) & (ds.params[:, 0] <= 0.5))
    assert np.all((ds.params[:, 1] >= 0.5) & (ds.params[:, 1] <= 1.0))
    np.testing.assert_allclose(ds.times, np.linspace(0, 10, 100))
    assert ds.observations.shape == (50, 200)


def test_dataset_rejects_bad_input():
    with pytest.raises(ValueError):
        generate_dataset("spring", 0)
    with pytest.raises(ValueError):
        generate_dataset("spring", 1, traj_len=1)
    with pytest.raises(ValueError):
        generate_dataset("spring", 1, ranges={"k": (0.5, 0.1)})
    with pytest.raises(ValueError):
        generate_dataset("spring", 1, ranges={"l": (0.3, 0.5)})
    with pytest.raises(ValueError):
        generate_dataset("rotor", 1)


def test_noiseless_trajectories_conserve_energy():
    ds = generate_dataset("pendulum", 20, seed=5, noise=NoiseSpec(0.0), keep_clean=True)
    for i in range(ds.count):
        e = pendulum_hamiltonian(ds.clean[i], ds.param_object(i))
        assert np.max(np.abs(e - e[0])) / e[0] < 1e-8


def test_noise_statistics():
    ds = generate_dataset("spring", 100, traj_len=100, seed=11, keep_clean=True)
    resid = (ds.observations - ds.clean.reshape(100, 200)).ravel()
    n = resid.size
    assert n >= 10_000
    assert abs(resid.mean()) < 3 * 0.03 / math.sqrt(n)
    assert abs(resid.std() - 0.03) < 0.05 * 0.03


def test_aux_resampler_uses_generation_path():
    ds = generate_dataset("spring", 6, traj_len=30, seed=2, keep_clean=True)
    rows, aux, targets = ds.aux_resampler()(np.random.default_rng(0), 3)
    assert rows.tolist() == [0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3, 4, 4, 4, 5, 5, 5]
    for r, a, t in zip(rows, aux, targets):
        np.testing.assert_array_equal(t, time_evolution(a, ds.param_object(r)))


def test_save_load_roundtrip(tmp_path):
    ds = generate_dataset("spring", 7, traj_len=12, seed=9)
    save_dataset(ds, tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["sigma"] == 0.03 and manifest["count"] == 7 and manifest["traj_len"] == 12
    assert manifest["record_length"] == 2 + 3 * 12 + 5
    assert (tmp_path / "data.bin").stat().st_size == 7 * manifest["record_length"] * 8
    back = load_dataset(tmp_path)
    for name in ("params", "observations", "aux", "targets", "aux_t", "times"):
        np.testing.assert_array_equal(getattr(back, name), getattr(ds, name))
    export_csv(ds, tmp_path / "ds.csv")
    assert len((tmp_path / "ds.csv").read_text().splitlines()) == 1 + 7 * 12


def test_load_rejects_truncated_file(tmp_path):
    save_dataset(generate_dataset("pendulum", 3, traj_len=10, seed=0), tmp_path)
    data = (tmp_path / "data.bin").read_bytes()
    (tmp_path / "data.bin").write_bytes(data[:-8])
    with pytest.raises(ValueError, match="expected"):
        load_dataset(tmp_path)
