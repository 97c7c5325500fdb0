"""Encoder and decoder networks plus the JSON checkpoint format.

Weights live as plain numpy arrays.  Training wraps them in tape variables
(:meth:`Mlp.graph`); inference and rollouts use the numpy paths, which are
checked against the graph versions in the test suite.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffgraph as dg

CHECKPOINT_VERSION = 1
LATENT_DIM = 3
MODEL_KINDS = ("consci", "baseline")


class CheckpointError(ValueError):
    """A checkpoint file could not be read back into a model."""


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple  # input, hidden..., output
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 3:
            raise ValueError("an MLP needs at least one hidden layer")
        if min(self.widths) < 1:
            raise ValueError("layer widths must be positive")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_in(self) -> int:
        return self.widths[0]

    @property
    def n_out(self) -> int:
        return self.widths[-1]


def _elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def _elu_prime(x, y):
    return np.where(x > 0, 1.0, y + 1.0)


def _tanh_prime(x, y):
    return 1.0 - y * y


_ACTIVATIONS = {
    "tanh": (np.tanh, _tanh_prime, dg.tanh),
    "elu": (_elu, _elu_prime, dg.elu),
}


class Mlp:
    """Fully connected network with identity output layer."""

    def __init__(self, spec: MlpSpec, params: list | None = None, rng: np.random.Generator | None = None):
        self.spec = spec
        if params is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            params = []
            for fan_in, fan_out in zip(spec.widths[:-1], spec.widths[1:]):
                bound = math.sqrt(6.0 / (fan_in + fan_out))
                params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
                params.append(np.zeros(fan_out))
        self.params = [np.array(p, dtype=np.float64) for p in params]
        self._check()

    def _check(self):
        shapes = []
        for fan_in, fan_out in zip(self.spec.widths[:-1], self.spec.widths[1:]):
            shapes += [(fan_in, fan_out), (fan_out,)]
        if [p.shape for p in self.params] != shapes:
            raise ValueError(f"parameter shapes {[p.shape for p in self.params]} do not match {shapes}")

    @property
    def n_layers(self) -> int:
        return len(self.params) // 2

    def copy(self) -> "Mlp":
        return Mlp(self.spec, [p.copy() for p in self.params])

    def forward(self, x: np.ndarray) -> np.ndarray:
        act = _ACTIVATIONS[self.spec.activation][0]
        h = np.asarray(x, dtype=np.float64)
        for i in range(self.n_layers):
            h = h @ self.params[2 * i] + self.params[2 * i + 1]
            if i < self.n_layers - 1:
                h = act(h)
        return h

    def input_gradient(self, x: np.ndarray) -> np.ndarray:
        """d(output)/d(input) for a single-output network, row per sample."""
        if self.spec.n_out != 1:
            raise ValueError("input_gradient needs a scalar-output network")
        act, act_prime, _ = _ACTIVATIONS[self.spec.activation]
        h = np.atleast_2d(np.asarray(x, dtype=np.float64))
        derivs = []
        for i in range(self.n_layers - 1):
            pre = h @ self.params[2 * i] + self.params[2 * i + 1]
            h = act(pre)
            derivs.append(act_prime(pre, h))
        delta = np.broadcast_to(self.params[-2][:, 0], h.shape)
        for i in range(self.n_layers - 2, -1, -1):
            delta = (delta * derivs[i]) @ self.params[2 * i].T
        return delta

    def graph(self, weights: list, x):
        """Forward pass on the tape; ``weights`` are the Nodes for ``self.params``."""
        act = _ACTIVATIONS[self.spec.activation][2]
        h = x
        for i in range(self.n_layers):
            h = dg.affine(h, weights[2 * i], weights[2 * i + 1])
            if i < self.n_layers - 1:
                h = act(h)
        return h

    def to_dict(self) -> dict:
        layers = [
            {"weight": self.params[2 * i].ravel().tolist(), "bias": self.params[2 * i + 1].tolist()}
            for i in range(self.n_layers)
        ]
        return {"widths": list(self.spec.widths), "activation": self.spec.activation, "layers": layers}

    @classmethod
    def from_dict(cls, d: dict, name: str) -> "Mlp":
        try:
            spec = MlpSpec(tuple(d["widths"]), d["activation"])
            layers = d["layers"]
        except (KeyError, TypeError) as exc:
            raise CheckpointError(f"{name}: missing field {exc}") from exc
        except ValueError as exc:
            raise CheckpointError(f"{name}: {exc}") from exc
        if len(layers) != len(spec.widths) - 1:
            raise CheckpointError(f"{name}: {len(layers)} layers stored, descriptor implies {len(spec.widths) - 1}")
        params = []
        for i, (layer, fan_in, fan_out) in enumerate(zip(layers, spec.widths[:-1], spec.widths[1:])):
            w = np.asarray(layer.get("weight", []), dtype=np.float64)
            b = np.asarray(layer.get("bias", []), dtype=np.float64)
            if w.size != fan_in * fan_out or b.size != fan_out:
                raise CheckpointError(
                    f"{name}.layers[{i}]: expected {fan_in}x{fan_out} weight and {fan_out} bias, "
                    f"got {w.size} and {b.size} values"
                )
            params += [w.reshape(fan_in, fan_out), b]
        return cls(spec, params)


@dataclass
class LatentCode:
    mean: np.ndarray
    logvar: np.ndarray
    sample: np.ndarray


def default_encoder_spec(traj_len: int) -> MlpSpec:
    return MlpSpec((2 * traj_len, 128, 64, 2 * LATENT_DIM), "elu")


def default_decoder_spec(kind: str) -> MlpSpec:
    return MlpSpec((2 + LATENT_DIM, 64, 64, 1 if kind == "consci" else 2), "tanh")


def interface_concat(z, coord):
    """(q, p, z1, z2, z3) for one coordinate pair or a batch of them."""
    z = np.asarray(z, dtype=np.float64)
    coord = np.asarray(coord, dtype=np.float64)
    return np.concatenate([coord, z], axis=-1)


def interface_split(x):
    """Inverse of :func:`interface_concat`: returns (z, coord)."""
    x = np.asarray(x, dtype=np.float64)
    return x[..., 2:], x[..., :2]


@dataclass
class LatentDynamicsModel:
    """Encoder + decoder pair, with the stats used to normalize observations.

    ``kind`` is ``"consci"`` (the decoder outputs a scalar energy whose
    symplectic gradient is the predicted time derivative) or ``"baseline"``
    (the decoder regresses the time derivative directly).
    """

    kind: str
    encoder: Mlp
    decoder: Mlp
    obs_mean: np.ndarray
    obs_std: np.ndarray
    beta: float = 0.005
    seed: int = 0
    task: str | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.encoder.spec.n_out != 2 * LATENT_DIM:
            raise ValueError("encoder must output mean and log-variance for 3 latents")
        if self.decoder.spec.n_in != 2 + LATENT_DIM:
            raise ValueError("decoder input must be (q, p, z1, z2, z3)")
        want = 1 if self.kind == "consci" else 2
        if self.decoder.spec.n_out != want:
            raise ValueError(f"{self.kind} decoder must have {want} output(s)")
        self.obs_mean = np.asarray(self.obs_mean, dtype=np.float64)
        self.obs_std = np.asarray(self.obs_std, dtype=np.float64)
        if self.obs_mean.shape != (self.encoder.spec.n_in,) or self.obs_std.shape != self.obs_mean.shape:
            raise ValueError("normalization stats do not match the encoder input width")

    @classmethod
    def initialize(cls, kind, traj_len, obs_mean=None, obs_std=None, rng=None, encoder_spec=None,
                   decoder_spec=None, **kw) -> "LatentDynamicsModel":
        rng = rng if rng is not None else np.random.default_rng(0)
        enc_spec = encoder_spec or default_encoder_spec(traj_len)
        dec_spec = decoder_spec or default_decoder_spec(kind)
        n = enc_spec.n_in
        return cls(
            kind=kind,
            encoder=Mlp(enc_spec, rng=rng),
            decoder=Mlp(dec_spec, rng=rng),
            obs_mean=np.zeros(n) if obs_mean is None else obs_mean,
            obs_std=np.ones(n) if obs_std is None else obs_std,
            **kw,
        )

    @property
    def traj_len(self) -> int:
        return self.encoder.spec.n_in // 2

    def normalize(self, observations) -> np.ndarray:
        obs = np.atleast_2d(np.asarray(observations, dtype=np.float64))
        if obs.shape[-1] != self.encoder.spec.n_in:
            raise ValueError(f"observation length {obs.shape[-1]} != expected {self.encoder.spec.n_in}")
        return (obs - self.obs_mean) / self.obs_std

    def encode(self, observations, mode: str = "eval", rng: np.random.Generator | None = None) -> LatentCode:
        out = self.encoder.forward(self.normalize(observations))
        mean, logvar = out[:, :LATENT_DIM], out[:, LATENT_DIM:]
        if mode == "eval":
            sample = mean.copy()
        elif mode == "train":
            if rng is None:
                raise ValueError("train mode needs a random generator")
            sample = mean + rng.standard_normal(mean.shape) * np.exp(0.5 * logvar)
        else:
            raise ValueError(f"unknown mode {mode!r}")
        return LatentCode(mean, logvar, sample)

    def energy(self, coords, z) -> np.ndarray:
        if self.kind != "consci":
            raise ValueError("only consci models define an energy")
        return self.decoder.forward(interface_concat(z, coords))[..., 0]

    def time_derivative(self, coords, z) -> np.ndarray:
        """Predicted (dq/dt, dp/dt) rows for coordinate rows and latent rows."""
        coords = np.atleast_2d(np.asarray(coords, dtype=np.float64))
        z = np.broadcast_to(np.atleast_2d(np.asarray(z, dtype=np.float64)), (len(coords), LATENT_DIM))
        x = interface_concat(z, coords)
        if self.kind == "baseline":
            return self.decoder.forward(x)
        g = self.decoder.input_gradient(x)
        return np.stack([g[:, 1], -g[:, 0]], axis=1)

    # --- serialization ---

    def to_dict(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "kind": self.kind,
            "task": self.task,
            "beta": self.beta,
            "seed": self.seed,
            "latent_dim": LATENT_DIM,
            "encoder": self.encoder.to_dict(),
            "decoder": self.decoder.to_dict(),
            "normalization": {"mean": self.obs_mean.tolist(), "std": self.obs_std.tolist()},
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LatentDynamicsModel":
        if not isinstance(d, dict):
            raise CheckpointError("checkpoint root must be an object")
        if "version" not in d:
            raise CheckpointError("missing field 'version'")
        if d["version"] != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {d['version']!r}")
        for name in ("kind", "encoder", "decoder", "normalization"):
            if name not in d:
                raise CheckpointError(f"missing field {name!r}")
        norm = d["normalization"]
        for name in ("mean", "std"):
            if not isinstance(norm, dict) or name not in norm:
                raise CheckpointError(f"missing field 'normalization.{name}'")
        encoder = Mlp.from_dict(d["encoder"], "encoder")
        decoder = Mlp.from_dict(d["decoder"], "decoder")
        try:
            return cls(
                kind=d["kind"],
                encoder=encoder,
                decoder=decoder,
                obs_mean=np.asarray(norm["mean"], dtype=np.float64),
                obs_std=np.asarray(norm["std"], dtype=np.float64),
                beta=float(d.get("beta", 0.005)),
                seed=int(d.get("seed", 0)),
                task=d.get("task"),
                metadata=d.get("metadata", {}),
            )
        except ValueError as exc:
            raise CheckpointError(str(exc)) from exc


def checkpoint_save(model: LatentDynamicsModel, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(model.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def checkpoint_load(path) -> LatentDynamicsModel:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not a valid checkpoint document ({exc.msg} at char {exc.pos})") from exc
    return LatentDynamicsModel.from_dict(d)
