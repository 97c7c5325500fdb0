"""Losses, optimizer and training loop for the latent dynamics models."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffgraph as dg
from ._rng import stream
from .nets import LATENT_DIM, LatentCode, LatentDynamicsModel, MlpSpec, checkpoint_save

log = logging.getLogger(__name__)

SEED_ENV = "HAMILDIS_SEED"


class TrainingError(RuntimeError):
    """Training hit a non-finite loss; ``model`` holds the last good weights."""

    def __init__(self, message, model=None, sample_index=None):
        super().__init__(message)
        self.model = model
        self.sample_index = sample_index


# (beta_start, beta_epochs) per task. The spring mass moves the observations
# less than the stiffness does and only gets its own latent if the KL weight
# starts small; on the one-parameter pendulum the same warm-up leaves the
# spare latents switched on, so it trains at a fixed beta.
KL_WARMUP = {"spring": (1e-4, 20)}


@dataclass
class TrainingConfig:
    model: str = "consci"
    task: str = "pendulum"
    dataset: str | None = None
    beta: float = 0.005
    learning_rate: float = 1e-3
    final_learning_rate: float = 1e-5
    batch_size: int = 64
    epochs: int = 40
    seed: int = 0
    grad_clip: float = 10.0
    encoder_hidden: tuple = (128, 64)
    decoder_hidden: tuple = (64, 64)
    # fresh (aux, target) picks drawn from the clean trajectories every epoch;
    # with False each epoch reuses the single stored pick per trajectory
    resample_aux: bool = True
    pairs_per_trajectory: int = 25
    # KL warm-up: beta moves geometrically from beta_start to beta over the
    # first beta_epochs epochs; None takes the task default from KL_WARMUP
    beta_start: float | None = None
    beta_epochs: int | None = None

    def __post_init__(self):
        if self.model not in ("consci", "baseline"):
            raise ValueError(f"unknown model kind {self.model!r}")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.learning_rate <= 0 or self.final_learning_rate <= 0:
            raise ValueError("learning rates must be positive")
        if self.pairs_per_trajectory < 1:
            raise ValueError("pairs_per_trajectory must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.beta_start is not None and self.beta_start < 0:
            raise ValueError("beta_start must be non-negative")
        if self.beta_epochs is not None and self.beta_epochs < 0:
            raise ValueError("beta_epochs must be non-negative")
        self.encoder_hidden = tuple(int(w) for w in self.encoder_hidden)
        self.decoder_hidden = tuple(int(w) for w in self.decoder_hidden)

    @classmethod
    def from_json(cls, path, **overrides) -> "TrainingConfig":
        data = json.loads(Path(path).read_text())
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**data)

    def with_env_seed(self) -> "TrainingConfig":
        if SEED_ENV in os.environ:
            self.seed = int(os.environ[SEED_ENV])
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_hidden"] = list(self.encoder_hidden)
        d["decoder_hidden"] = list(self.decoder_hidden)
        return d


@dataclass
class LossReport:
    total: float
    dynamics: float
    kl: float
    epoch: int = 0
    batch: int = 0


def kl_divergence(code, logvar=None):
    """KL(q(z|x) || N(0, I)) summed over latents and averaged over the batch.

    Accepts a :class:`LatentCode` or a (mean, logvar) pair of arrays or tape
    nodes; returns a float for arrays and a node for nodes.
    """
    if isinstance(code, LatentCode):
        mean, logvar = code.mean, code.logvar
    else:
        mean = code
    per_sample = dg.sum(
        dg.sub(dg.sub(dg.add(1.0, logvar), dg.square(mean)), dg.exp(logvar)), axis=-1
    )
    out = dg.mul(-0.5, dg.mean(per_sample))
    return out if isinstance(out, dg.Node) else float(out)


def _predict_graph(model, dec_w, coords, z):
    """Tape version of the decoder; returns (dq/dt, dp/dt) nodes of shape (n, 1)."""
    q = coords[:, 0:1]
    p = coords[:, 1:2]
    tape = dec_w[0].tape
    if model.kind == "consci":
        q, p = tape.variable(q), tape.variable(p)
        energy = model.decoder.graph(dec_w, dg.concat([q, p, z], axis=1))
        dh = dg.grad(dg.sum(energy), [q, p], create_graph=True)
        assert len(dh) == 2
        return dh[1], dg.neg(dh[0])
    out = model.decoder.graph(dec_w, dg.concat([tape.constant(q), tape.constant(p), z], axis=1))
    return out[:, 0:1], out[:, 1:2]


def _loss_graph(model, tape, obs_norm, coords, targets, beta, eps):
    enc_w = [tape.variable(w) for w in model.encoder.params]
    dec_w = [tape.variable(w) for w in model.decoder.params]
    enc_out = model.encoder.graph(enc_w, tape.constant(obs_norm))
    mean, logvar = enc_out[:, :LATENT_DIM], enc_out[:, LATENT_DIM:]
    z = mean if eps is None else dg.add(mean, dg.mul(eps, dg.exp(dg.mul(0.5, logvar))))
    dq, dp = _predict_graph(model, dec_w, coords, z)
    dynamics = dg.add(
        dg.mean(dg.square(dg.sub(dq, targets[:, 0:1]))),
        dg.mean(dg.square(dg.sub(dp, targets[:, 1:2]))),
    )
    kl = kl_divergence(mean, logvar)
    total = dg.add(dynamics, dg.mul(beta, kl))
    return total, dynamics, kl, enc_w + dec_w


def loss_and_grads(model: LatentDynamicsModel, observations, coords, targets, beta=None, eps=None,
                   with_grads=True):
    """Evaluate the training objective for one batch.

    ``eps`` is the standard-normal draw for the reparameterized latent sample;
    ``None`` feeds the posterior mean to the decoder.  Returns a
    :class:`LossReport` and, if requested, one gradient array per parameter
    (encoder parameters first).
    """
    beta = model.beta if beta is None else beta
    tape = dg.Tape()
    total, dynamics, kl, weights = _loss_graph(
        model, tape, model.normalize(observations), np.asarray(coords, dtype=np.float64),
        np.asarray(targets, dtype=np.float64), beta, eps,
    )
    report = LossReport(total.item(), dynamics.item(), kl.item())
    if not with_grads:
        return report, None
    grads = [g.value for g in dg.grad(total, weights)]
    return report, grads


def consci_loss(model, observations, coords, targets, beta=None, eps=None) -> LossReport:
    if model.kind != "consci":
        raise ValueError("consci_loss needs a consci model")
    return loss_and_grads(model, observations, coords, targets, beta, eps, with_grads=False)[0]


def baseline_loss(model, observations, coords, targets, beta=None, eps=None) -> LossReport:
    if model.kind != "baseline":
        raise ValueError("baseline_loss needs a baseline model")
    return loss_and_grads(model, observations, coords, targets, beta, eps, with_grads=False)[0]


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params: list, grads: list, state: AdamState, lr: float) -> list:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def clip_by_global_norm(grads: list, max_norm: float) -> tuple[list, float]:
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        grads = [g * scale for g in grads]
    return grads, norm


def _first_bad_sample(model, observations, coords, targets):
    for i in range(len(observations)):
        try:
            r, _ = loss_and_grads(model, observations[i : i + 1], coords[i : i + 1], targets[i : i + 1],
                                  with_grads=False)
            if not math.isfinite(r.total):
                return i
        except (OverflowError, FloatingPointError, ValueError):
            return i
    return None


def schedule(start: float, end: float, epoch: int, n_epochs: int) -> float:
    """Geometric interpolation from ``start`` (first epoch) to ``end`` (last)."""
    if n_epochs <= 1 or start == end:
        return end
    frac = min(1.0, epoch / (n_epochs - 1))
    return start * (end / start) ** frac


def train_model(
    model: LatentDynamicsModel,
    observations,
    coords,
    targets,
    *,
    learning_rate: float = 1e-3,
    final_learning_rate: float | None = None,
    batch_size: int = 256,
    epochs: int = 40,
    seed: int = 0,
    grad_clip: float | None = 10.0,
    beta_start: float | None = None,
    beta_epochs: int | None = None,
    resampler=None,
    pairs_per_trajectory: int = 1,
) -> list[LossReport]:
    """Mini-batch Adam on the model's objective; mutates ``model`` in place.

    Without a ``resampler`` every epoch visits the stored (coords, targets)
    pair of each trajectory once.  ``resampler(rng, k)`` instead returns
    ``(trajectory_index, coords, targets)`` with ``k`` fresh pairs per
    trajectory and is called at the start of every epoch.

    The learning rate decays geometrically to ``final_learning_rate``; the KL
    weight moves geometrically from ``beta_start`` to ``model.beta`` over the
    first ``beta_epochs`` epochs and stays at ``model.beta`` afterwards.
    """
    observations = np.asarray(observations, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    traj_index = np.arange(len(observations))
    shuffle_rng = stream(seed, "shuffle")
    reparam_rng = stream(seed, "reparam")
    pairs_rng = stream(seed, "pairs")
    params = model.encoder.params + model.decoder.params
    state = AdamState.zeros_like(params)
    final_lr = learning_rate if final_learning_rate is None else final_learning_rate
    b_start = model.beta if beta_start is None else beta_start
    b_epochs = epochs if beta_epochs is None else beta_epochs
    history: list[LossReport] = []
    for epoch in range(epochs):
        lr = schedule(learning_rate, final_lr, epoch, epochs)
        beta = schedule(b_start, model.beta, epoch, b_epochs) if b_start > 0 and model.beta > 0 else model.beta
        if epoch >= b_epochs:
            beta = model.beta
        if resampler is not None:
            traj_index, coords, targets = resampler(pairs_rng, pairs_per_trajectory)
        order = shuffle_rng.permutation(len(traj_index))
        for b, start in enumerate(range(0, len(order), batch_size)):
            idx = order[start : start + batch_size]
            obs = observations[traj_index[idx]]
            eps = reparam_rng.standard_normal((len(idx), LATENT_DIM))
            backup = [p.copy() for p in params]
            try:
                report, grads = loss_and_grads(model, obs, coords[idx], targets[idx], beta=beta, eps=eps)
                if not math.isfinite(report.total):
                    raise OverflowError("non-finite loss")
            except (OverflowError, FloatingPointError) as exc:
                for p, old in zip(params, backup):
                    p[...] = old
                bad = _first_bad_sample(model, obs, coords[idx], targets[idx])
                index = None if bad is None else int(traj_index[idx[bad]])
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} batch {b} (trajectory {index}): {exc}", model, index
                ) from exc
            grads, _ = clip_by_global_norm(grads, grad_clip)
            adam_step(params, grads, state, lr)
            report.epoch, report.batch = epoch, b
            history.append(report)
        if history:
            last = history[-1]
            log.info("epoch %d: lr=%.3g beta=%.3g total=%.6g dynamics=%.6g kl=%.6g",
                     epoch, lr, beta, last.total, last.dynamics, last.kl)
    return history


def normalization_stats(observations) -> tuple[np.ndarray, np.ndarray]:
    observations = np.asarray(observations, dtype=np.float64)
    return observations.mean(axis=0), np.maximum(observations.std(axis=0), 1e-8)


def build_model(kind: str, traj_len: int, observations, *, beta=0.005, seed=0, encoder_hidden=(128, 64),
                decoder_hidden=(64, 64), task=None) -> LatentDynamicsModel:
    mean, std = normalization_stats(observations)
    enc = MlpSpec((2 * traj_len, *encoder_hidden, 2 * LATENT_DIM), "elu")
    dec = MlpSpec((2 + LATENT_DIM, *decoder_hidden, 1 if kind == "consci" else 2), "tanh")
    return LatentDynamicsModel.initialize(
        kind, traj_len, obs_mean=mean, obs_std=std, rng=stream(seed, "init"),
        encoder_spec=enc, decoder_spec=dec, beta=beta, seed=seed, task=task,
    )


def write_history_csv(history: list[LossReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "batch", "dynamics", "kl", "total"])
        for r in history:
            w.writerow([r.epoch, r.batch, repr(r.dynamics), repr(r.kl), repr(r.total)])


@dataclass
class TrainingResult:
    model: LatentDynamicsModel
    history: list = field(default_factory=list)
    checkpoint_path: Path | None = None
    history_path: Path | None = None


def train(config: TrainingConfig, out_dir=None) -> TrainingResult:
    """Load the configured dataset, fit a model and (optionally) write outputs."""
    from .dynamics import load_dataset

    if config.dataset is None:
        raise FileNotFoundError("no dataset path configured")
    ds = load_dataset(config.dataset)
    if ds.task != config.task:
        log.warning("dataset task %s overrides configured task %s", ds.task, config.task)
        config.task = ds.task
    model = build_model(
        config.model, ds.traj_len, ds.observations, beta=config.beta, seed=config.seed,
        encoder_hidden=config.encoder_hidden, decoder_hidden=config.decoder_hidden, task=ds.task,
    )
    resampler = None
    if config.resample_aux:
        resampler = ds.aux_resampler()
    warm_start, warm_epochs = KL_WARMUP.get(ds.task, (None, None))
    beta_start = warm_start if config.beta_start is None else config.beta_start
    beta_epochs = warm_epochs if config.beta_epochs is None else config.beta_epochs
    model.metadata = {"config": config.to_dict(), "dataset_count": ds.count, "traj_len": ds.traj_len}
    ckpt = hist = None
    try:
        history = train_model(
            model, ds.observations, ds.aux, ds.targets, learning_rate=config.learning_rate,
            final_learning_rate=config.final_learning_rate, batch_size=config.batch_size,
            epochs=config.epochs, seed=config.seed, grad_clip=config.grad_clip, resampler=resampler,
            pairs_per_trajectory=config.pairs_per_trajectory, beta_start=beta_start,
            beta_epochs=beta_epochs,
        )
    except TrainingError as exc:
        if out_dir is not None:
            checkpoint_save(exc.model, Path(out_dir) / f"{config.model}_last_good.json")
        raise
    if out_dir is not None:
        out_dir = Path(out_dir)
        ckpt = checkpoint_save(model, out_dir / f"{config.model}_{ds.task}.json")
        hist = out_dir / f"{config.model}_{ds.task}_loss.csv"
        write_history_csv(history, hist)
    return TrainingResult(model, history, ckpt, hist)
