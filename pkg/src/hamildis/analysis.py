"""Post-training evaluation: latent sweeps, latent/parameter maps and MSE tables."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr

from ._rng import stream
from .dynamics import (
    DEFAULT_RANGES,
    INITIAL_STATE,
    NoiseSpec,
    clean_trajectories,
    hamiltonian,
    make_params,
)
from .nets import LATENT_DIM, LatentDynamicsModel
from .rollout import DEFAULT_TOL, GeneratedTrajectory, ParameterArgument, generate, output_grid, trajectory_mse

MAP_DEGREE = {"pendulum": 3, "spring": 5}
ACTIVE_THRESHOLD = 0.1
PROBE_COUNT = 200

# Rows of the comparison tables: (table number, varied parameter, values, fixed parameters)
TABLES = {
    "pendulum": [(1, "l", (0.3, 0.5, 0.6, 0.8), {})],
    "spring": [
        (2, "k", (0.1, 0.2, 0.4, 0.5), {"m": 0.75}),
        (3, "m", (0.5, 0.7, 0.8, 1.0), {"k": 0.25}),
    ],
}


class AnalysisError(RuntimeError):
    pass


@dataclass
class LatentSweep:
    """Encoder posterior means for probe trajectories with known parameters."""

    task: str
    param_names: tuple
    params: np.ndarray  # (n, n_params)
    activations: np.ndarray  # (n, 3)

    def __len__(self) -> int:
        return len(self.params)

    def records(self):
        for row, act in zip(self.params, self.activations):
            yield dict(zip(self.param_names, row.tolist())), act.tolist()


@dataclass(frozen=True)
class ActiveLatent:
    index: int
    param: str
    rho: float
    std: float


def monomial_exponents(n_inputs: int, degree: int) -> np.ndarray:
    """Exponent rows of every monomial of total degree <= ``degree``, lowest first."""
    rows = [e for e in np.ndindex(*(degree + 1,) * n_inputs) if sum(e) <= degree]
    return np.array(sorted(rows, key=lambda e: (sum(e), tuple(-x for x in e))), dtype=int).reshape(-1, n_inputs)


@dataclass
class ParameterMap:
    """Least-squares polynomial from physical parameters to one latent.

    ``inputs`` names the parameters the polynomial reads (just ``param`` by
    default); ``exponents`` holds one row of powers per coefficient.
    """

    param: str
    latent: int
    degree: int
    coefficients: np.ndarray
    residual_rms: float
    latent_range: float
    direction: str = "truth->latent"
    inputs: tuple = ()
    exponents: np.ndarray | None = None

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=np.float64)
        self.inputs = tuple(self.inputs) or (self.param,)
        if self.exponents is None:
            if len(self.inputs) != 1:
                raise ValueError("multivariate maps need explicit exponents")
            self.exponents = np.arange(len(self.coefficients))[:, None]
        self.exponents = np.asarray(self.exponents, dtype=int)
        if self.exponents.shape != (len(self.coefficients), len(self.inputs)):
            raise ValueError("exponents must have one row per coefficient and one column per input")

    def __call__(self, value):
        """Evaluate at a scalar (single-input maps), a dict of parameters or an (n, inputs) array."""
        if isinstance(value, dict):
            value = [value[name] for name in self.inputs]
        x = np.asarray(value, dtype=np.float64)
        scalar = x.ndim == 0 or (x.ndim == 1 and len(self.inputs) > 1)
        x = x.reshape(-1, len(self.inputs))
        out = np.prod(x[:, None, :] ** self.exponents[None], axis=2) @ self.coefficients
        return out[0] if scalar else out

    @property
    def relative_residual(self) -> float:
        return self.residual_rms / self.latent_range if self.latent_range > 0 else math.inf

    def to_dict(self) -> dict:
        return {
            "param": self.param,
            "latent": self.latent,
            "degree": self.degree,
            "direction": self.direction,
            "inputs": list(self.inputs),
            "exponents": self.exponents.tolist(),
            "coefficients": self.coefficients.tolist(),
            "residual_rms": self.residual_rms,
            "latent_range": self.latent_range,
        }


def probe_parameters(task: str, count: int = PROBE_COUNT) -> np.ndarray:
    """Uniform grid over the training ranges; spring uses a square k-by-m grid."""
    ranges = DEFAULT_RANGES[task]
    if task == "pendulum":
        lo, hi = ranges["l"]
        return np.linspace(lo, hi, count)[:, None]
    side = math.ceil(math.sqrt(count))
    k = np.linspace(*ranges["k"], side)
    m = np.linspace(*ranges["m"], side)
    kk, mm = np.meshgrid(k, m, indexing="ij")
    return np.stack([kk.ravel(), mm.ravel()], axis=1)


def probe_observations(task: str, params: np.ndarray, traj_len: int = 100, t_span=(0.0, 10.0),
                       noise: NoiseSpec = NoiseSpec(), seed: int = 0) -> np.ndarray:
    times = np.linspace(t_span[0], t_span[1], traj_len)
    clean = clean_trajectories(task, params, times)
    rng = stream(seed, "probe")
    flat = clean.reshape(len(params), 2 * traj_len)
    return flat + noise.mean + noise.std * rng.standard_normal(flat.shape)


def latent_sweep(model: LatentDynamicsModel, task: str, params: np.ndarray, observations: np.ndarray) -> LatentSweep:
    observations = np.atleast_2d(observations)
    if observations.shape[1] != 2 * model.traj_len:
        raise ValueError(
            f"probe trajectories have {observations.shape[1] // 2} points, model expects {model.traj_len}"
        )
    mean = model.encode(observations, mode="eval").mean
    return LatentSweep(task, tuple(DEFAULT_RANGES[task]), np.asarray(params, dtype=np.float64), mean)


def _spearman(x, y) -> float:
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return 0.0
    return float(spearmanr(x, y)[0])


def identify_active_latents(sweep: LatentSweep, threshold: float = ACTIVE_THRESHOLD) -> list[ActiveLatent]:
    """Latents whose spread exceeds ``threshold`` times the largest latent spread.

    Each active latent is paired with a physical parameter by |Spearman rho|;
    assignments are made greedily from the strongest correlation down so that
    two latents only share a parameter when there are more latents than
    parameters.
    """
    if len(sweep) < 20:
        raise ValueError("need at least 20 sweep records")
    std = sweep.activations.std(axis=0)
    top = std.max()
    if top <= 0:
        return []
    active = [i for i in range(sweep.activations.shape[1]) if std[i] > threshold * top]
    rho = {
        (i, j): _spearman(sweep.params[:, j], sweep.activations[:, i])
        for i in active
        for j in range(len(sweep.param_names))
    }
    pairs = sorted(rho, key=lambda ij: (-abs(rho[ij]), ij))
    taken_latents: dict[int, int] = {}
    taken_params: set[int] = set()
    for i, j in pairs:
        if i in taken_latents or j in taken_params:
            continue
        taken_latents[i] = j
        taken_params.add(j)
    for i in active:
        if i not in taken_latents:
            taken_latents[i] = max(range(len(sweep.param_names)), key=lambda j: abs(rho[(i, j)]))
    return [
        ActiveLatent(i, sweep.param_names[taken_latents[i]], rho[(i, taken_latents[i])], float(std[i]))
        for i in active
    ]


def fit_parameter_map(sweep: LatentSweep, param: str, latent: int, degree: int, inputs=None) -> ParameterMap:
    """Fit ``latent`` as a polynomial of total degree ``degree`` in ``inputs`` (default: ``param`` alone)."""
    inputs = tuple(inputs or (param,))
    x = np.stack([sweep.params[:, sweep.param_names.index(n)] for n in inputs], axis=1)
    y = sweep.activations[:, latent]
    for j, name in enumerate(inputs):
        if np.unique(x[:, j]).size < degree + 2:
            raise np.linalg.LinAlgError(
                f"need at least {degree + 2} distinct {name} values for a degree-{degree} fit"
            )
    exponents = monomial_exponents(len(inputs), degree)
    design = np.prod(x[:, None, :] ** exponents[None], axis=2)
    coef, _, rank, _ = np.linalg.lstsq(design, y, rcond=None)
    if rank < len(exponents):
        raise np.linalg.LinAlgError("rank-deficient design matrix")
    residual = y - design @ coef
    return ParameterMap(
        param=param,
        latent=latent,
        degree=degree,
        coefficients=coef,
        residual_rms=float(np.sqrt(np.mean(residual**2))),
        latent_range=float(np.ptp(y)),
        inputs=inputs,
        exponents=exponents,
    )


def energy_drift_report(states: np.ndarray, params) -> float:
    """Max relative change of the true Hamiltonian along a state sequence (n, 2)."""
    states = np.asarray(states, dtype=np.float64)
    energy = hamiltonian(states.T, params)
    e0 = energy[0]
    return float(np.max(np.abs(energy - e0)) / max(abs(e0), 1e-12))


@dataclass
class ModelEvaluation:
    kind: str
    sweep: LatentSweep
    active: list
    maps: dict  # param name -> ParameterMap


def evaluate_latents(model: LatentDynamicsModel, task: str, probe_params=None, probe_obs=None,
                     seed: int = 0) -> ModelEvaluation:
    if probe_params is None:
        probe_params = probe_parameters(task)
    if probe_obs is None:
        probe_obs = probe_observations(task, probe_params, model.traj_len, seed=seed)
    sweep = latent_sweep(model, task, probe_params, probe_obs)
    active = identify_active_latents(sweep)
    maps = {}
    for a in sorted(active, key=lambda a: -abs(a.rho)):
        if a.param not in maps:
            # each latent may depend on every varied parameter, so the map reads all of them
            maps[a.param] = fit_parameter_map(sweep, a.param, a.index, MAP_DEGREE[task], sweep.param_names)
    return ModelEvaluation(model.kind, sweep, active, maps)


def parameter_argument(evaluation: ModelEvaluation, values: dict) -> ParameterArgument:
    active = {}
    for name, value in values.items():
        if name not in evaluation.maps:
            raise AnalysisError(f"{evaluation.kind} model has no latent mapped to parameter {name!r}")
        pm = evaluation.maps[name]
        missing = set(pm.inputs) - set(values)
        if missing:
            raise AnalysisError(f"map for {name!r} also needs {sorted(missing)}")
        active[pm.latent] = float(pm(values if len(pm.inputs) > 1 else value))
    return ParameterArgument.from_active(active)


@dataclass
class RowResult:
    table: int
    param: str
    value: float
    fixed: dict
    truth: np.ndarray
    generated: dict = field(default_factory=dict)  # kind -> GeneratedTrajectory
    mse: dict = field(default_factory=dict)  # kind -> float
    true_drift: dict = field(default_factory=dict)  # kind -> float
    learned_drift: dict = field(default_factory=dict)  # kind -> float (consci only)

    @property
    def label(self) -> str:
        return f"t{self.table}_{self.param}{self.value:g}"


@dataclass
class TableResult:
    number: int
    task: str
    param: str
    rows: list

    @property
    def partial(self) -> bool:
        return any(len(r.mse) < 2 for r in self.rows)

    def column(self, kind: str) -> list:
        return [r.mse.get(kind, math.nan) for r in self.rows]


def interpolated_eval(task: str, models: dict, evaluations: dict | None = None, t_span=(0.0, 20.0),
                      n_points: int = 200, tol: float = DEFAULT_TOL, seed: int = 0,
                      threads: int = 1) -> list[TableResult]:
    """Roll out every available model on the comparison-table rows of ``task``.

    ``models`` maps kind ("consci"/"baseline") to a model; either may be absent.
    Rows are independent, so ``threads > 1`` rolls them out concurrently;
    results do not depend on the thread count.
    """
    if not models:
        raise ValueError("no models to evaluate")
    if evaluations is None:
        evaluations = {kind: evaluate_latents(m, task, seed=seed) for kind, m in models.items()}
    times = output_grid(t_span, n_points)
    names = tuple(DEFAULT_RANGES[task])
    tables, jobs = [], []
    for number, param, values, fixed in TABLES[task]:
        rows = []
        for value in values:
            phys = {**fixed, param: value}
            row_params = np.array([[phys[n] for n in names]])
            truth = clean_trajectories(task, row_params, times)[0].T
            row = RowResult(number, param, value, fixed, truth)
            for kind in models:
                arg = parameter_argument(evaluations[kind], phys)
                jobs.append((row, kind, arg, make_params(task, row_params[0])))
            rows.append(row)
        tables.append(TableResult(number, task, param, rows))

    def run(job):
        row, kind, arg, true_params = job
        return generate(models[kind], arg, INITIAL_STATE, t_span, tol=tol, times=times)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            generated = list(pool.map(run, jobs))
    else:
        generated = [run(job) for job in jobs]
    for (row, kind, _, true_params), gen in zip(jobs, generated):
        row.generated[kind] = gen
        row.mse[kind] = trajectory_mse(gen, (times, row.truth))
        row.true_drift[kind] = energy_drift_report(gen.states, true_params)
        if gen.energy is not None:
            row.learned_drift[kind] = gen.energy_drift()
    return tables


def random_arguments(evaluation: ModelEvaluation, count: int, rng: np.random.Generator) -> list[ParameterArgument]:
    """Arguments drawn uniformly over the observed range of each active latent."""
    acts = evaluation.sweep.activations
    out = []
    for _ in range(count):
        active = {}
        for pm in evaluation.maps.values():
            lo, hi = acts[:, pm.latent].min(), acts[:, pm.latent].max()
            active[pm.latent] = rng.uniform(lo, hi)
        out.append(ParameterArgument.from_active(active))
    return out


__all__ = [
    "ActiveLatent",
    "AnalysisError",
    "LatentSweep",
    "ParameterMap",
    "TableResult",
    "RowResult",
    "ModelEvaluation",
    "TABLES",
    "MAP_DEGREE",
    "LATENT_DIM",
    "GeneratedTrajectory",
    "probe_parameters",
    "probe_observations",
    "latent_sweep",
    "identify_active_latents",
    "fit_parameter_map",
    "monomial_exponents",
    "energy_drift_report",
    "evaluate_latents",
    "parameter_argument",
    "interpolated_eval",
    "random_arguments",
]
