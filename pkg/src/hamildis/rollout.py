"""Use a trained decoder as a time-evolution model with the latent held fixed."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .dynamics import INITIAL_STATE, IntegrationError, Trajectory, integrate_adaptive
from .nets import LATENT_DIM, LatentDynamicsModel

DEFAULT_T_SPAN = (0.0, 20.0)
DEFAULT_POINTS = 200
DEFAULT_TOL = 1e-10


class FieldError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ParameterArgument:
    """Latent vector handed to the decoder; slots that carry no information are 0."""

    values: tuple

    def __post_init__(self):
        values = tuple(float(v) for v in self.values)
        if len(values) != LATENT_DIM:
            raise ValueError(f"parameter argument needs {LATENT_DIM} values, got {len(values)}")
        if not all(np.isfinite(values)):
            raise ValueError("parameter argument must be finite")
        object.__setattr__(self, "values", values)

    @classmethod
    def from_active(cls, active: dict) -> "ParameterArgument":
        values = [0.0] * LATENT_DIM
        for idx, v in active.items():
            values[int(idx)] = float(v)
        return cls(tuple(values))

    def as_array(self) -> np.ndarray:
        return np.array(self.values)


@dataclass
class GeneratedTrajectory:
    times: np.ndarray
    states: np.ndarray  # (n, 2)
    arg: ParameterArgument
    kind: str
    energy: np.ndarray | None = None  # decoder energy along the path, consci only
    tol: float = DEFAULT_TOL

    def energy_drift(self) -> float:
        if self.energy is None:
            raise ValueError("baseline trajectories carry no learned energy")
        e0 = self.energy[0]
        return float(np.max(np.abs(self.energy - e0)) / max(abs(e0), 1e-12))


def decoder_field(model: LatentDynamicsModel, arg: ParameterArgument) -> Callable[[np.ndarray], np.ndarray]:
    z = arg.as_array()[None, :]

    def field(y):
        out = model.time_derivative(np.asarray(y, dtype=np.float64)[None, :], z)[0]
        if not np.all(np.isfinite(out)):
            raise FieldError(f"non-finite decoder output at (q, p)={tuple(y)} with z={arg.values}")
        return out

    return field


def output_grid(t_span=DEFAULT_T_SPAN, n_points: int = DEFAULT_POINTS) -> np.ndarray:
    if t_span[1] == t_span[0]:
        return np.array([float(t_span[0])])
    return np.linspace(t_span[0], t_span[1], n_points)


def generate(model: LatentDynamicsModel, arg: ParameterArgument, state0=INITIAL_STATE,
             t_span=DEFAULT_T_SPAN, tol: float = DEFAULT_TOL, n_points: int = DEFAULT_POINTS,
             times=None) -> GeneratedTrajectory:
    times = output_grid(t_span, n_points) if times is None else np.asarray(times, dtype=np.float64)
    try:
        states = integrate_adaptive(np.asarray(state0, dtype=np.float64), decoder_field(model, arg), times, tol=tol)
    except FieldError as exc:
        raise IntegrationError(str(exc), float("nan")) from exc
    energy = None
    if model.kind == "consci":
        energy = model.energy(states, np.broadcast_to(arg.as_array(), (len(states), LATENT_DIM)))
    return GeneratedTrajectory(times, states, arg, model.kind, energy, tol)


def _states(traj) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(traj, (GeneratedTrajectory, Trajectory)):
        return np.asarray(traj.times), np.asarray(traj.states)
    times, states = traj
    return np.asarray(times), np.asarray(states)


def trajectory_mse(generated, truth) -> float:
    """Mean over time points of the squared error summed over (q, p)."""
    t_a, s_a = _states(generated)
    t_b, s_b = _states(truth)
    if t_a.shape != t_b.shape or not np.allclose(t_a, t_b, rtol=0, atol=1e-12):
        raise ValueError("trajectories are on different time grids")
    return float(np.mean(np.sum((s_a - s_b) ** 2, axis=1)))


def write_trajectory(gen: GeneratedTrajectory, path) -> tuple[Path, Path]:
    """CSV (t, q, p, H_star) plus a JSON sidecar describing the run."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "q", "p", "H_star"])
        for i, (t, (q, p)) in enumerate(zip(gen.times, gen.states)):
            h = "" if gen.energy is None else repr(float(gen.energy[i]))
            w.writerow([repr(float(t)), repr(float(q)), repr(float(p)), h])
    sidecar = path.with_suffix(".json")
    sidecar.write_text(json.dumps({"arg": list(gen.arg.values), "kind": gen.kind, "tol": gen.tol,
                                   "t_span": [float(gen.times[0]), float(gen.times[-1])],
                                   "points": len(gen.times)}, indent=2, sort_keys=True) + "\n")
    return path, sidecar
