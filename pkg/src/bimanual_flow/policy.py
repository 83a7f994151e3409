"""Unimanual flow-matching policy: training, velocity-field evaluation, the
squared-velocity energy proxy, and Langevin stepping.

The velocity net maps (action, t, conditioning) -> velocity in normalized
action coordinates. Training regresses the constant displacement target
X1 - X0 on linear interpolation paths, with stratified condition dropout so
the same checkpoint also provides the unconditioned field.

The implicit energy of a flow policy is defined only up to an intractable
normalization constant, so the engine works with the proxy E = 0.5 * |v|^2,
which is zero exactly where the field is stationary. All energy thresholds
in the sampler are calibrated against this proxy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .numerics import (
    AdamState,
    MlpParams,
    MlpSpec,
    SeededRng,
    adam_step,
    check_finite,
    derive_seed,
    init_mlp,
    mlp_backward,
    mlp_forward,
)

CHECKPOINT_SCHEMA = "policy-checkpoint/1"


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class CondLayout:
    """Dimensions of the conditioning blocks; +1 channel flags the null."""

    obs_dim: int
    proprio_dim: int
    instr_dim: int

    @property
    def total_dim(self) -> int:
        return self.obs_dim + self.proprio_dim + self.instr_dim + 1


@dataclass
class Conditioning:
    """Per-arm conditioning: scene features, proprioception, task one-hot."""

    observation: np.ndarray
    proprio: np.ndarray
    instruction: np.ndarray
    is_null: bool = False

    def vector(self) -> np.ndarray:
        flag = 1.0 if self.is_null else 0.0
        return np.concatenate(
            [self.observation, self.proprio, self.instruction, [flag]]
        )

    def layout(self) -> CondLayout:
        return CondLayout(
            len(self.observation), len(self.proprio), len(self.instruction)
        )


def null_conditioning(layout: CondLayout) -> Conditioning:
    """The reserved null embedding: zeros everywhere, flag channel 1."""
    return Conditioning(
        observation=np.zeros(layout.obs_dim),
        proprio=np.zeros(layout.proprio_dim),
        instruction=np.zeros(layout.instr_dim),
        is_null=True,
    )


@dataclass
class ActionNormalizer:
    """Per-coordinate affine map to zero mean, unit variance.

    Coordinates with (near-)zero spread over the demo set keep scale 1 so
    constant channels stay finite.
    """

    mean: np.ndarray
    std: np.ndarray

    @staticmethod
    def fit(actions: np.ndarray) -> "ActionNormalizer":
        mean = actions.mean(axis=0)
        std = actions.std(axis=0)
        std = np.where(std > 1e-8, std, 1.0)
        return ActionNormalizer(mean=mean, std=std)

    @staticmethod
    def identity(dim: int) -> "ActionNormalizer":
        return ActionNormalizer(mean=np.zeros(dim), std=np.ones(dim))

    def normalize(self, action: np.ndarray) -> np.ndarray:
        return (action - self.mean) / self.std

    def denormalize(self, z: np.ndarray) -> np.ndarray:
        return z * self.std + self.mean


@dataclass
class PolicyCheckpoint:
    """A trained velocity-field net plus everything needed to reuse it."""

    spec: MlpSpec
    params: MlpParams
    action_dim: int
    cond_layout: CondLayout
    normalizer: ActionNormalizer
    seed: int
    epochs: int
    final_loss: float
    null_fraction: float = 0.0

    def __post_init__(self):
        expected = self.action_dim + self.cond_layout.total_dim + 1
        if self.spec.input_dim != expected:
            raise ValueError(
                f"spec input_dim {self.spec.input_dim} != action+cond+1 ({expected})"
            )
        if self.spec.output_dim != self.action_dim:
            raise ValueError("spec output_dim must equal action_dim")

    @property
    def cond_dim(self) -> int:
        return self.cond_layout.total_dim

    def velocity(self, z: np.ndarray, t: float, cond: Conditioning) -> np.ndarray:
        return velocity(self, z, t, cond)

    def energy_proxy(self, z: np.ndarray, t: float, cond: Conditioning) -> float:
        return energy_proxy(self, z, t, cond)


def velocity(
    ckpt: PolicyCheckpoint, z: np.ndarray, t: float, cond: Conditioning
) -> np.ndarray:
    """The learned field at (z, t, cond); z in normalized action coords."""
    z = np.asarray(z, dtype=float)
    if z.shape != (ckpt.action_dim,):
        raise ValueError(f"action dim {z.shape} != ({ckpt.action_dim},)")
    cvec = cond.vector()
    if cvec.shape != (ckpt.cond_dim,):
        raise ValueError(f"cond dim {cvec.shape} != ({ckpt.cond_dim},)")
    x = np.concatenate([z, [float(t)], cvec])
    return mlp_forward(ckpt.params, x)


def energy_proxy(
    ckpt: PolicyCheckpoint, z: np.ndarray, t: float, cond: Conditioning
) -> float:
    v = velocity(ckpt, z, t, cond)
    return 0.5 * float(np.dot(v, v))


def guided_velocity(
    ckpt: PolicyCheckpoint,
    z: np.ndarray,
    t: float,
    cond: Conditioning,
    weight: float,
) -> np.ndarray:
    """Classifier-free combination v_null + w * (v_cond - v_null)."""
    if cond.is_null:
        raise ValueError("guided_velocity needs a non-null conditioning")
    v_cond = velocity(ckpt, z, t, cond)
    v_null = velocity(ckpt, z, t, null_conditioning(ckpt.cond_layout))
    return v_null + weight * (v_cond - v_null)


def langevin_step(
    ckpt,
    z: np.ndarray,
    t: float,
    cond: Conditioning,
    eta: float,
    noise_scale: float,
    rng: SeededRng,
) -> np.ndarray:
    """z - eta * grad(E) + sqrt(2 eta) * noise, with grad(E) = -velocity.

    With noise_scale 0 this is exactly the Euler flow update with dt = eta
    (the noise term is skipped entirely, keeping the update bit-identical).
    """
    if eta <= 0:
        raise ValueError("eta must be positive")
    v = ckpt.velocity(z, t, cond)
    out = z + eta * v
    if noise_scale != 0.0:
        out = out + np.sqrt(2.0 * eta) * noise_scale * rng.normal(len(z))
    return out


def flow_euler_step(
    ckpt, z: np.ndarray, t: float, cond: Conditioning, dt: float
) -> np.ndarray:
    v = ckpt.velocity(z, t, cond)
    return z + dt * v


@dataclass
class FlowSample:
    """Intermediate states of one flow integration plus the final action."""

    states: list
    final_action: np.ndarray


def interpolation_batch(z1: np.ndarray, t: np.ndarray, x0: np.ndarray):
    """Linear interpolation states X_t = (1-t) X0 + t X1 and the constant
    displacement regression target X1 - X0."""
    x_t = (1.0 - t)[:, None] * x0 + t[:, None] * z1
    return x_t, z1 - x0


def flow_matching_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean squared-norm residual over the batch; overflow maps to inf so
    divergence is caught by the caller rather than warned about."""
    resid = pred - target
    with np.errstate(over="ignore"):
        return float(np.mean(np.sum(resid * resid, axis=1)))


@dataclass
class TrainConfig:
    hidden_dims: tuple = (128, 128)
    activation: str = "tanh"
    lr: float = 1e-3
    lr_decay: float = 1.0  # final lr = lr * lr_decay, exponential schedule
    epochs: int = 2000
    p_uncond: float = 0.1
    draws_per_sample: int = 1
    batch_size: int | None = None  # None: full batch
    seed: int = 0
    normalize_actions: bool = True
    loss_log: list = field(default_factory=list)

    def lr_at(self, epoch: int) -> float:
        if self.lr_decay == 1.0 or self.epochs <= 1:
            return self.lr
        return self.lr * self.lr_decay ** (epoch / (self.epochs - 1))


def train_unimanual(demos, hyper: TrainConfig) -> PolicyCheckpoint:
    """Fit the velocity field to (conditioning, action) pairs.

    Each epoch runs one full-batch step: every demo row contributes
    `draws_per_sample` fresh (t, X0) draws with X_t = (1-t) X0 + t X1 and
    regression target X1 - X0. A stratified fraction p_uncond of rows per
    epoch is trained against the null embedding.
    """
    if not demos:
        raise ValueError("at least one demonstration pair is required")
    layout = demos[0][0].layout()
    actions = np.stack([np.asarray(a, dtype=float) for _, a in demos])
    check_finite(actions, "demo actions")
    conds = np.stack([c.vector() for c, _ in demos])
    if conds.shape[1] != layout.total_dim:
        raise ValueError("inconsistent conditioning dims across demos")
    action_dim = actions.shape[1]

    if hyper.normalize_actions:
        normalizer = ActionNormalizer.fit(actions)
    else:
        normalizer = ActionNormalizer.identity(action_dim)
    z1 = np.stack([normalizer.normalize(a) for a in actions])

    reps = max(1, int(hyper.draws_per_sample))
    z1 = np.repeat(z1, reps, axis=0)
    conds = np.repeat(conds, reps, axis=0)
    n_rows = z1.shape[0]
    null_vec = null_conditioning(layout).vector()

    spec = MlpSpec(
        input_dim=action_dim + 1 + layout.total_dim,
        hidden_dims=tuple(hyper.hidden_dims),
        output_dim=action_dim,
        activation=hyper.activation,
    )
    params = init_mlp(spec, seed=derive_seed(hyper.seed, "init"))
    state = AdamState.for_params(params)
    rng = SeededRng(derive_seed(hyper.seed, "train"))

    hyper.loss_log.clear()
    total_rows = 0
    total_null = 0
    loss = float("nan")
    for epoch in range(hyper.epochs):
        if hyper.batch_size is not None and hyper.batch_size < n_rows:
            pick = rng.permutation(n_rows)[: hyper.batch_size]
            z1_b = z1[pick]
            conds_b = conds[pick]
        else:
            z1_b, conds_b = z1, conds
        batch_rows = z1_b.shape[0]
        batch_null = int(round(hyper.p_uncond * batch_rows))
        t = rng.uniform(batch_rows)
        x0 = rng.normal_matrix(batch_rows, action_dim)
        x_t, target = interpolation_batch(z1_b, t, x0)

        cond_rows = conds_b.copy()
        if batch_null > 0:
            null_idx = rng.permutation(batch_rows)[:batch_null]
            cond_rows[null_idx] = null_vec
        total_rows += batch_rows
        total_null += batch_null

        x = np.concatenate([x_t, t[:, None], cond_rows], axis=1)
        pred = mlp_forward(params, x)
        resid = pred - target
        loss = flow_matching_loss(pred, target)
        if not np.isfinite(loss):
            raise TrainingDivergedError(
                f"loss became non-finite at epoch {epoch}"
            )
        hyper.loss_log.append(loss)

        grads, _ = mlp_backward(params, x, 2.0 * resid / batch_rows)
        params, state = adam_step(params, grads, state, lr=hyper.lr_at(epoch))

    return PolicyCheckpoint(
        spec=spec,
        params=params,
        action_dim=action_dim,
        cond_layout=layout,
        normalizer=normalizer,
        seed=hyper.seed,
        epochs=hyper.epochs,
        final_loss=loss,
        null_fraction=(total_null / total_rows) if total_rows else 0.0,
    )


def sample_action(
    ckpt: PolicyCheckpoint,
    cond: Conditioning,
    n_steps: int,
    rng: SeededRng,
    guidance: float = 1.0,
):
    """Integrate the flow from seeded noise; returns (action, FlowSample).

    The returned action is in physical units; FlowSample states are the
    normalized intermediate states, step count + 1 of them.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    z = rng.normal(ckpt.action_dim)
    states = [z.copy()]
    dt = 1.0 / n_steps
    for k in range(n_steps):
        t = k * dt
        if cond.is_null:
            v = velocity(ckpt, z, t, cond)
        else:
            v = guided_velocity(ckpt, z, t, cond, guidance)
        z = z + dt * v
        states.append(z.copy())
    return ckpt.normalizer.denormalize(z), FlowSample(states=states, final_action=z)


# ---------------------------------------------------------------------------
# checkpoint persistence
# ---------------------------------------------------------------------------


def save_checkpoint(ckpt: PolicyCheckpoint, path):
    doc = {
        "schema": CHECKPOINT_SCHEMA,
        "action_dim": ckpt.action_dim,
        "cond_layout": {
            "obs_dim": ckpt.cond_layout.obs_dim,
            "proprio_dim": ckpt.cond_layout.proprio_dim,
            "instr_dim": ckpt.cond_layout.instr_dim,
        },
        "spec": {
            "input_dim": ckpt.spec.input_dim,
            "hidden_dims": list(ckpt.spec.hidden_dims),
            "output_dim": ckpt.spec.output_dim,
            "activation": ckpt.spec.activation,
        },
        "layers": [
            {
                "weight_shape": list(w.shape),
                "weight": w.reshape(-1).tolist(),  # row-major
                "bias": b.tolist(),
            }
            for w, b in zip(ckpt.params.weights, ckpt.params.biases)
        ],
        "normalizer": {
            "mean": ckpt.normalizer.mean.tolist(),
            "std": ckpt.normalizer.std.tolist(),
        },
        "seed": ckpt.seed,
        "epochs": ckpt.epochs,
        "final_loss": ckpt.final_loss,
        "null_fraction": ckpt.null_fraction,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, allow_nan=False)
        fh.write("\n")


def load_checkpoint(path) -> PolicyCheckpoint:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("schema") != CHECKPOINT_SCHEMA:
        raise ValueError(f"unsupported checkpoint schema: {doc.get('schema')!r}")
    spec = MlpSpec(
        input_dim=doc["spec"]["input_dim"],
        hidden_dims=tuple(doc["spec"]["hidden_dims"]),
        output_dim=doc["spec"]["output_dim"],
        activation=doc["spec"]["activation"],
    )
    weights, biases = [], []
    for layer in doc["layers"]:
        shape = tuple(layer["weight_shape"])
        weights.append(np.array(layer["weight"]).reshape(shape))
        biases.append(np.array(layer["bias"]))
    layout = CondLayout(
        obs_dim=doc["cond_layout"]["obs_dim"],
        proprio_dim=doc["cond_layout"]["proprio_dim"],
        instr_dim=doc["cond_layout"]["instr_dim"],
    )
    return PolicyCheckpoint(
        spec=spec,
        params=MlpParams(spec, weights, biases),
        action_dim=doc["action_dim"],
        cond_layout=layout,
        normalizer=ActionNormalizer(
            mean=np.array(doc["normalizer"]["mean"]),
            std=np.array(doc["normalizer"]["std"]),
        ),
        seed=doc["seed"],
        epochs=doc["epochs"],
        final_loss=doc["final_loss"],
        null_fraction=doc.get("null_fraction", 0.0),
    )
