"""Ground-truth Hamiltonian systems, integrators and dataset generation.

States are numpy arrays whose leading axis is (q, p); a batch of states has
shape ``(2, n)`` and every function here broadcasts over the trailing axes.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ._rng import seed_sequence

FORMAT_VERSION = 1
TASKS = ("pendulum", "spring")
DEFAULT_RANGES = {
    "pendulum": {"l": (0.3, 0.8)},
    "spring": {"k": (0.1, 0.5), "m": (0.5, 1.0)},
}
PENDULUM_MASS = 1.0
PENDULUM_GRAVITY = 9.8
INITIAL_STATE = (1.0, 0.0)


class IntegrationError(RuntimeError):
    def __init__(self, message: str, last_time: float):
        super().__init__(f"{message} (last good t={last_time:.6g})")
        self.last_time = last_time


@dataclass(frozen=True)
class PhaseState:
    q: float
    p: float

    def __post_init__(self):
        if not (math.isfinite(self.q) and math.isfinite(self.p)):
            raise ValueError("phase state must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.q, self.p], dtype=np.float64)


@dataclass(frozen=True)
class PendulumParams:
    l: float  # noqa: E741
    m: float = PENDULUM_MASS
    g: float = PENDULUM_GRAVITY

    def __post_init__(self):
        if min(self.l, self.m, self.g) <= 0:
            raise ValueError("pendulum parameters must be positive")


@dataclass(frozen=True)
class SpringParams:
    k: float
    m: float

    def __post_init__(self):
        if min(self.k, self.m) <= 0:
            raise ValueError("spring parameters must be positive")


@dataclass(frozen=True)
class NoiseSpec:
    std: float = 0.03
    mean: float = 0.0

    def __post_init__(self):
        if self.std < 0:
            raise ValueError("noise std must be non-negative")


def _qp(state):
    if isinstance(state, PhaseState):
        return state.q, state.p
    state = np.asarray(state, dtype=np.float64)
    return state[0], state[1]


def pendulum_hamiltonian(state, params: PendulumParams):
    q, p = _qp(state)
    m, g, l = params.m, params.g, params.l
    return m * g * l * (1.0 - np.cos(q)) + p**2 / (2.0 * m * l**2)


def spring_hamiltonian(state, params: SpringParams):
    q, p = _qp(state)
    return 0.5 * params.k * q**2 + p**2 / (2.0 * params.m)


def hamiltonian(state, params):
    if isinstance(params, PendulumParams):
        return pendulum_hamiltonian(state, params)
    if isinstance(params, SpringParams):
        return spring_hamiltonian(state, params)
    raise TypeError(f"unknown parameter type {type(params).__name__}")


def time_evolution(state, params) -> tuple:
    """Closed-form (dq/dt, dp/dt) = (dH/dp, -dH/dq)."""
    q, p = _qp(state)
    if isinstance(params, PendulumParams):
        m, g, l = params.m, params.g, params.l
        return p / (m * l**2), -m * g * l * np.sin(q)
    if isinstance(params, SpringParams):
        return p / params.m, -params.k * q
    raise TypeError(f"unknown parameter type {type(params).__name__}")


def vector_field(params) -> Callable[[np.ndarray], np.ndarray]:
    """Autonomous field ``y -> dy/dt`` for ``y`` of shape (2, ...)."""

    def f(y):
        dq, dp = time_evolution(y, params)
        return np.stack([np.broadcast_to(dq, np.shape(y[0])), np.broadcast_to(dp, np.shape(y[1]))])

    return f


def batched_field(task: str, params: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    """Field over a (2, n) batch where column i uses parameter row ``params[i]``."""
    params = np.asarray(params, dtype=np.float64)
    if task == "pendulum":
        lengths = params[:, 0]
        m, g = PENDULUM_MASS, PENDULUM_GRAVITY

        def f(y):
            return np.stack([y[1] / (m * lengths**2), -m * g * lengths * np.sin(y[0])])

    elif task == "spring":
        k, mass = params[:, 0], params[:, 1]

        def f(y):
            return np.stack([y[1] / mass, -k * y[0]])

    else:
        raise ValueError(f"unknown task {task!r}")
    return f


def spring_analytic(state0, params: SpringParams, t) -> np.ndarray:
    q0, p0 = _qp(state0)
    w = math.sqrt(params.k / params.m)
    c, s = np.cos(w * t), np.sin(w * t)
    q = q0 * c + p0 / (params.m * w) * s
    p = -q0 * params.m * w * s + p0 * c
    return np.array([q, p])


# --- integration ---------------------------------------------------------------


def rk4_step(y: np.ndarray, field: Callable, h: float) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    k1 = field(y)
    k2 = field(y + 0.5 * h * k1)
    k3 = field(y + 0.5 * h * k2)
    k4 = field(y + h * k3)
    out = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise IntegrationError("non-finite field value", 0.0)
    return out


def _doubled_step(y, field, h, k1):
    """Full step vs. two half steps; returns (extrapolated state, error estimate)."""

    def step(y0, dt, d0):
        a = field(y0 + 0.5 * dt * d0)
        b = field(y0 + 0.5 * dt * a)
        c = field(y0 + dt * b)
        return y0 + (dt / 6.0) * (d0 + 2.0 * a + 2.0 * b + c)

    full = step(y, h, k1)
    half = step(y, 0.5 * h, k1)
    two = step(half, 0.5 * h, field(half))
    diff = (two - full) / 15.0
    if not (np.all(np.isfinite(full)) and np.all(np.isfinite(two))):
        return None, math.inf
    return two + diff, float(np.max(np.abs(diff)))


def integrate_adaptive(
    state0,
    field: Callable[[np.ndarray], np.ndarray],
    t_eval: Sequence[float],
    tol: float = 1e-10,
    first_step: float | None = None,
    min_step: float = 1e-10,
) -> np.ndarray:
    """Integrate an autonomous field with step-doubling RK4.

    Returns states at every time in ``t_eval`` (``t_eval[0]`` is the start),
    stacked along a new leading axis.  The accepted step sequence does not
    depend on the output grid: each output time inside an accepted step is
    reached by its own controlled sub-step from the start of that step.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    t_eval = np.asarray(t_eval, dtype=np.float64)
    if t_eval.ndim != 1 or t_eval.size == 0:
        raise ValueError("t_eval must be a non-empty 1-D sequence")
    if np.any(np.diff(t_eval) < 0):
        raise ValueError("t_eval must be non-decreasing")
    y = np.array(state0, dtype=np.float64)
    out = np.empty((t_eval.size,) + y.shape)
    t, t_end = float(t_eval[0]), float(t_eval[-1])
    out[0] = y
    j = 1
    while j < t_eval.size and t_eval[j] == t:
        out[j] = y
        j += 1
    if j == t_eval.size:
        return out

    h = first_step or min(0.01, t_end - t)
    while j < t_eval.size:
        k1 = field(y)
        if not np.all(np.isfinite(k1)):
            raise IntegrationError("non-finite field value", t)
        h = min(h, t_end - t)
        while True:
            y_new, err = _doubled_step(y, field, h, k1)
            scale = tol * max(1.0, float(np.max(np.abs(y))))
            if err <= scale:
                break
            if y_new is None and not np.isfinite(err):
                h *= 0.2
            else:
                h *= max(0.2, 0.9 * (scale / err) ** 0.2)
            if h < min_step:
                raise IntegrationError("step size underflow", t)
        t_next = t + h
        if t_end - t_next <= 1e-12 * max(1.0, abs(t_end)):
            t_next = t_end
        while j < t_eval.size and t_eval[j] <= t_next:
            dt = t_eval[j] - t
            if dt == h or t_eval[j] == t_next:
                out[j] = y_new
            else:
                out[j] = _substep(y, field, dt, k1, tol, min_step, t)
            j += 1
        y, t = y_new, t_next
        growth = 5.0 if err == 0 else min(5.0, 0.9 * (scale / err) ** 0.2)
        h *= max(1.0, growth)
    return out


def _substep(y, field, dt, k1, tol, min_step, t0):
    """Controlled integration from ``y`` over a short interval ``dt``."""
    t, remaining, h = 0.0, dt, dt
    d = k1
    while remaining > 0:
        h = min(h, remaining)
        while True:
            y_new, err = _doubled_step(y, field, h, d)
            scale = tol * max(1.0, float(np.max(np.abs(y))))
            if err <= scale:
                break
            h *= max(0.2, 0.9 * (scale / err) ** 0.2) if np.isfinite(err) else 0.2
            if h < min_step:
                raise IntegrationError("step size underflow", t0 + t)
        y, t = y_new, t + h
        remaining = dt - t
        if remaining <= 1e-15 * max(1.0, dt):
            break
        d = field(y)
    return y


# --- datasets --------------------------------------------------------------------


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (n, 2)
    params: object
    noisy: bool = False

    def __post_init__(self):
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        if len(self.states) != len(self.times):
            raise ValueError("states and times differ in length")


@dataclass
class Sample:
    observation: np.ndarray
    aux: PhaseState
    target: tuple
    t: float
    params: object


@dataclass
class Dataset:
    """Column-oriented dataset; one row per trajectory."""

    task: str
    times: np.ndarray  # (traj_len,)
    params: np.ndarray  # (count, n_params)
    observations: np.ndarray  # (count, 2 * traj_len): q-series then p-series
    aux_t: np.ndarray  # (count,)
    aux: np.ndarray  # (count, 2)
    targets: np.ndarray  # (count, 2)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    seed: int = 0
    ranges: dict = field(default_factory=dict)
    clean: np.ndarray | None = None  # (count, 2, traj_len), not persisted

    @property
    def count(self) -> int:
        return len(self.params)

    @property
    def traj_len(self) -> int:
        return len(self.times)

    @property
    def param_names(self) -> tuple:
        return tuple(DEFAULT_RANGES[self.task])

    def param_object(self, i: int):
        return make_params(self.task, self.params[i])

    def samples(self) -> list[Sample]:
        return [
            Sample(
                observation=self.observations[i],
                aux=PhaseState(*self.aux[i]),
                target=tuple(self.targets[i]),
                t=float(self.aux_t[i]),
                params=self.param_object(i),
            )
            for i in range(self.count)
        ]

    def trajectories(self, noisy: bool = True) -> list[Trajectory]:
        n = self.traj_len
        out = []
        for i in range(self.count):
            if noisy:
                states = self.observations[i].reshape(2, n).T.copy()
            else:
                if self.clean is None:
                    raise ValueError("clean trajectories were not retained")
                states = self.clean[i].T.copy()
            out.append(Trajectory(self.times.copy(), states, self.param_object(i), noisy=noisy))
        return out

    def aux_resampler(self, tol: float = 1e-12):
        """Callable ``(rng, k) -> (rows, aux, targets)`` picking k grid points per trajectory.

        The clean trajectories are regenerated from the stored parameters and
        the fixed initial state when they were not retained.
        """
        clean = self.clean
        if clean is None:
            clean = clean_trajectories(self.task, self.params, self.times, tol=tol)

        def resample(rng, k: int = 1):
            rows = np.repeat(np.arange(self.count), k)
            picks = rng.integers(self.traj_len, size=rows.size)
            aux = clean[rows, :, picks]
            return rows, aux, _targets(self.task, self.params[rows], aux)

        return resample

    def subset(self, idx) -> "Dataset":
        return Dataset(
            task=self.task,
            times=self.times,
            params=self.params[idx],
            observations=self.observations[idx],
            aux_t=self.aux_t[idx],
            aux=self.aux[idx],
            targets=self.targets[idx],
            noise=self.noise,
            seed=self.seed,
            ranges=self.ranges,
            clean=None if self.clean is None else self.clean[idx],
        )


def _targets(task, params, aux):
    targets = np.empty_like(aux)
    for i in range(len(aux)):
        targets[i] = time_evolution(aux[i], make_params(task, params[i]))
    return targets


def make_params(task: str, row):
    if task == "pendulum":
        return PendulumParams(l=float(row[0]))
    if task == "spring":
        return SpringParams(k=float(row[0]), m=float(row[1]))
    raise ValueError(f"unknown task {task!r}")


def _check_ranges(task: str, ranges: dict | None) -> dict:
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    merged = dict(DEFAULT_RANGES[task])
    for name, rng in (ranges or {}).items():
        if name not in merged:
            raise ValueError(f"{task} has no parameter {name!r}")
        merged[name] = rng
    for name, (lo, hi) in merged.items():
        if not (0 < lo <= hi):
            raise ValueError(f"invalid range for {name}: [{lo}, {hi}]")
    return {k: (float(v[0]), float(v[1])) for k, v in merged.items()}


def clean_trajectories(task: str, params: np.ndarray, times: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Noiseless trajectories from the fixed initial state, shape (count, 2, len(times))."""
    params = np.atleast_2d(np.asarray(params, dtype=np.float64))
    y0 = np.tile(np.array(INITIAL_STATE)[:, None], (1, len(params)))
    states = integrate_adaptive(y0, batched_field(task, params), times, tol=tol)
    return np.transpose(states, (2, 1, 0))


def generate_dataset(
    task: str,
    count: int,
    traj_len: int = 100,
    t_span: tuple = (0.0, 10.0),
    noise: NoiseSpec = NoiseSpec(),
    seed: int = 0,
    ranges: dict | None = None,
    tol: float = 1e-12,
    keep_clean: bool = False,
) -> Dataset:
    """Draw parameters, integrate, add observation noise and pick one target point.

    Each trajectory i has its own random stream spawned from ``seed``; it draws,
    in order, the parameters, the grid index of the target point, and the
    observation noise (all q entries, then all p entries).
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    if traj_len < 2:
        raise ValueError("traj_len must be at least 2")
    ranges = _check_ranges(task, ranges)
    times = np.linspace(t_span[0], t_span[1], traj_len)

    streams = seed_sequence(seed, "data").spawn(count)
    names = list(ranges)
    params = np.empty((count, len(names)))
    picks = np.empty(count, dtype=np.int64)
    noise_draws = np.empty((count, 2 * traj_len))
    for i, ss in enumerate(streams):
        rng = np.random.default_rng(ss)
        for j, name in enumerate(names):
            lo, hi = ranges[name]
            params[i, j] = rng.uniform(lo, hi)
        picks[i] = rng.integers(traj_len)
        noise_draws[i] = rng.standard_normal(2 * traj_len)

    clean = clean_trajectories(task, params, times, tol=tol)
    observations = clean.reshape(count, 2 * traj_len) + (noise.mean + noise.std * noise_draws)
    aux = clean[np.arange(count), :, picks]
    targets = _targets(task, params, aux)
    return Dataset(
        task=task,
        times=times,
        params=params,
        observations=observations,
        aux_t=times[picks],
        aux=aux,
        targets=targets,
        noise=noise,
        seed=seed,
        ranges=ranges,
        clean=clean if keep_clean else None,
    )


def _layout(task: str, traj_len: int) -> list:
    names = list(DEFAULT_RANGES[task])
    return [
        *({"field": n, "length": 1} for n in names),
        {"field": "times", "length": traj_len},
        {"field": "q_noisy", "length": traj_len},
        {"field": "p_noisy", "length": traj_len},
        *({"field": n, "length": 1} for n in ("t_aux", "q_aux", "p_aux", "dq_dt", "dp_dt")),
    ]


def save_dataset(ds: Dataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    n = ds.count
    times = np.broadcast_to(ds.times, (n, ds.traj_len))
    records = np.concatenate(
        [ds.params, times, ds.observations, ds.aux_t[:, None], ds.aux, ds.targets], axis=1
    )
    records.astype("<f8").tofile(directory / "data.bin")
    manifest = {
        "format_version": FORMAT_VERSION,
        "system": ds.task,
        "ranges": {k: list(v) for k, v in ds.ranges.items()},
        "count": n,
        "traj_len": ds.traj_len,
        "t_span": [float(ds.times[0]), float(ds.times[-1])],
        "sigma": ds.noise.std,
        "noise_mean": ds.noise.mean,
        "seed": ds.seed,
        "g": PENDULUM_GRAVITY,
        "m": PENDULUM_MASS,
        "initial_state": list(INITIAL_STATE),
        "dtype": "<f8",
        "record_length": int(records.shape[1]),
        "record_layout": _layout(ds.task, ds.traj_len),
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no dataset manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format version {manifest.get('format_version')!r}")
    task, n, L = manifest["system"], manifest["count"], manifest["traj_len"]
    width = manifest["record_length"]
    raw = np.fromfile(directory / "data.bin", dtype="<f8")
    if raw.size != n * width:
        raise ValueError(f"data.bin holds {raw.size} values, expected {n * width}")
    rec = raw.reshape(n, width).astype(np.float64)
    k = len(DEFAULT_RANGES[task])
    c = k
    times = rec[0, c : c + L].copy()
    c += L
    obs = rec[:, c : c + 2 * L].copy()
    c += 2 * L
    return Dataset(
        task=task,
        times=times,
        params=rec[:, :k].copy(),
        observations=obs,
        aux_t=rec[:, c].copy(),
        aux=rec[:, c + 1 : c + 3].copy(),
        targets=rec[:, c + 3 : c + 5].copy(),
        noise=NoiseSpec(std=manifest["sigma"], mean=manifest.get("noise_mean", 0.0)),
        seed=manifest["seed"],
        ranges={key: tuple(v) for key, v in manifest["ranges"].items()},
    )


def export_csv(ds: Dataset, path) -> None:
    names = ds.param_names
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trajectory", *names, "t", "q", "p"])
        L = ds.traj_len
        for i in range(ds.count):
            for j in range(L):
                w.writerow([i, *map(repr, ds.params[i]), repr(ds.times[j]),
                            repr(ds.observations[i, j]), repr(ds.observations[i, L + j])])


def noise_spec_dict(noise: NoiseSpec) -> dict:
    return asdict(noise)
