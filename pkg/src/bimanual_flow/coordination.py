"""Temporal-spatial coordination energies over bimanual actions.

Six constraint terms (velocity, acceleration, jerk, synchronization,
end-effector clearance, joint-space clearance) with analytic gradients with
respect to the current action, softmax-predicted adaptive weights, and the
unified total energy combining the generative proxy with the weighted
coordination sum.

Coordinate conventions: the sampler state is the concatenated normalized
action pair. Temporal terms are computed directly on normalized coordinates;
the two clearance terms are computed in physical meters/radians (their safe
distances are physical) and chain-ruled back through the per-arm
normalizers. Gradients treat the adaptive weights as constants within a
denoising step.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .composition import BimanualAction
from .kinematics import (
    ACTION_DIM,
    ArmGeometry,
    JointConfig,
    UnreachableTargetError,
    clamp_to_workspace,
    ik_position_jacobian,
    inverse_kin,
    wrap_angle,
)
from .numerics import (
    AdamState,
    MlpParams,
    MlpSpec,
    SeededRng,
    adam_step,
    derive_seed,
    init_mlp,
    mlp_backward,
    mlp_forward,
    zero_mlp,
)
from .policy import ActionNormalizer

WEIGHT_NET_SCHEMA = "weight-net/1"
WEIGHT_NET_INPUT = "[z_left; z_right; v_left; v_right]"

N_TERMS = 6
TERM_NAMES = ("e_vel", "e_accel", "e_jerk", "e_sync", "e_ee", "e_joint")
TEMPORAL_TERMS = (0, 1, 2, 3)
SPATIAL_TERMS = (4, 5)

_DIR_GATE_HARD = 1e-9
_DIR_GATE_SOFT = 3e-2  # typical per-step motion scale; see energy_sync


# ---------------------------------------------------------------------------
# history
# ---------------------------------------------------------------------------


@dataclass
class PoseHistory:
    """The last three executed bimanual actions (newest first) plus the last
    joint configurations; shorter histories repeat the oldest entry."""

    actions: list
    joints_left: JointConfig
    joints_right: JointConfig

    def __post_init__(self):
        if len(self.actions) != 3:
            raise ValueError("history holds exactly 3 actions (padded)")

    @staticmethod
    def initial(pose: BimanualAction, joints_left: JointConfig, joints_right: JointConfig):
        return PoseHistory(
            actions=[pose.copy(), pose.copy(), pose.copy()],
            joints_left=joints_left,
            joints_right=joints_right,
        )

    def advanced(self, executed: BimanualAction, joints_left: JointConfig,
                 joints_right: JointConfig) -> "PoseHistory":
        return PoseHistory(
            actions=[executed.copy(), self.actions[0], self.actions[1]],
            joints_left=joints_left,
            joints_right=joints_right,
        )


# ---------------------------------------------------------------------------
# term kernels: plain formulas on caller-supplied coordinates
# ---------------------------------------------------------------------------


def energy_velocity(a_l, a_r, h1_l, h1_r) -> float:
    d_l = a_l - h1_l
    d_r = a_r - h1_r
    return float(d_l @ d_l + d_r @ d_r)


def energy_acceleration(a_l, a_r, h1_l, h1_r, h2_l, h2_r) -> float:
    d_l = a_l - 2.0 * h1_l + h2_l
    d_r = a_r - 2.0 * h1_r + h2_r
    return float(d_l @ d_l + d_r @ d_r)


def energy_jerk(a_l, a_r, h1_l, h1_r, h2_l, h2_r, h3_l, h3_r) -> float:
    d_l = a_l - 3.0 * h1_l + 3.0 * h2_l - h3_l
    d_r = a_r - 3.0 * h1_r + 3.0 * h2_r - h3_r
    return float(d_l @ d_l + d_r @ d_r)


def _sync_pieces(v_l, v_r):
    n_l = float(np.linalg.norm(v_l))
    n_r = float(np.linalg.norm(v_r))
    n_min = min(n_l, n_r)
    if n_min < _DIR_GATE_HARD:
        return n_l, n_r, 0.0, None
    gate = min(1.0, (n_min / _DIR_GATE_SOFT) ** 2)
    diff = v_l / n_l - v_r / n_r
    return n_l, n_r, gate, diff


def energy_sync(a_l, a_r, h1_l, h1_r) -> float:
    """Magnitude and direction mismatch of the two per-step velocities.

    The direction part is zero for (near-)stationary arms and quadratically
    gated below the per-step motion scale: the raw 1/|v| direction gradient
    would otherwise amplify dwell-phase jitter into arbitrarily large kicks,
    and synchronization is moot for arms that are not really moving.
    """
    v_l = a_l - h1_l
    v_r = a_r - h1_r
    n_l, n_r, gate, diff = _sync_pieces(v_l, v_r)
    e = (n_l - n_r) ** 2
    if diff is not None:
        e += gate * float(diff @ diff)
    return float(e)


def energy_sync_gradient(a_l, a_r, h1_l, h1_r):
    v_l = a_l - h1_l
    v_r = a_r - h1_r
    n_l, n_r, gate, diff = _sync_pieces(v_l, v_r)
    g_l = np.zeros_like(v_l)
    g_r = np.zeros_like(v_r)

    mag = n_l - n_r
    if n_l > 0.0:
        g_l += 2.0 * mag * (v_l / n_l)
    if n_r > 0.0:
        g_r += -2.0 * mag * (v_r / n_r)

    if diff is not None:
        u_l, u_r = v_l / n_l, v_r / n_r
        dir_val = float(diff @ diff)
        # d(dir)/dv_i through the normalization projector
        g_l += gate * (2.0 / n_l) * (diff - u_l * float(u_l @ diff))
        g_r += gate * (-2.0 / n_r) * (diff - u_r * float(u_r @ diff))
        if gate < 1.0:
            # gradient of the quadratic gate, through whichever norm is smaller
            n_min = min(n_l, n_r)
            coeff = dir_val * 2.0 * n_min / _DIR_GATE_SOFT**2
            if n_l <= n_r:
                g_l += coeff * u_l
            else:
                g_r += coeff * u_r
    return g_l, g_r


def energy_ee(pos_l, pos_r, d_safe: float) -> float:
    gap = d_safe - float(np.linalg.norm(pos_l - pos_r))
    return max(0.0, gap) ** 2


def energy_ee_gradient(pos_l, pos_r, d_safe: float):
    delta = pos_l - pos_r
    dist = float(np.linalg.norm(delta))
    if dist >= d_safe or dist == 0.0:
        return np.zeros_like(pos_l), np.zeros_like(pos_r)
    coeff = -2.0 * (d_safe - dist) / dist
    return coeff * delta, -coeff * delta


def energy_joint(joints_l: JointConfig, joints_r: JointConfig, d_safe_joint: float) -> float:
    dvec = np.array(
        [wrap_angle(x - y) for x, y in zip(joints_l.angles, joints_r.angles)]
    )
    gap = d_safe_joint - float(np.linalg.norm(dvec))
    return max(0.0, gap) ** 2


# ---------------------------------------------------------------------------
# weight predictor
# ---------------------------------------------------------------------------


@dataclass
class WeightNetParams:
    """Softmax predictor of the six constraint weights."""

    params: MlpParams
    input_layout: str = WEIGHT_NET_INPUT

    @property
    def input_dim(self) -> int:
        return self.params.spec.input_dim


def init_weight_net(seed: int, hidden: int = 32) -> WeightNetParams:
    """Hidden layer seeded, final layer zeroed: uniform weights at start."""
    spec = MlpSpec(4 * ACTION_DIM, (hidden,), N_TERMS, activation="relu")
    params = init_mlp(spec, seed=seed)
    params.weights[-1] = np.zeros_like(params.weights[-1])
    params.biases[-1] = np.zeros_like(params.biases[-1])
    return WeightNetParams(params=params)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    e = np.exp(shifted)
    return e / e.sum()


def uniform_weights() -> np.ndarray:
    return np.full(N_TERMS, 1.0 / N_TERMS)


def weight_net_input(z: np.ndarray, h1_norm: np.ndarray) -> np.ndarray:
    """[z_left; z_right; v_left; v_right] in normalized coordinates."""
    return np.concatenate([z, z - h1_norm])


def predict_weights(wp: WeightNetParams | None, z: np.ndarray, h1_norm: np.ndarray) -> np.ndarray:
    if wp is None:
        return uniform_weights()
    return softmax(mlp_forward(wp.params, weight_net_input(z, h1_norm)))


def save_weight_net(wp: WeightNetParams, path):
    spec = wp.params.spec
    doc = {
        "schema": WEIGHT_NET_SCHEMA,
        "input_layout": wp.input_layout,
        "spec": {
            "input_dim": spec.input_dim,
            "hidden_dims": list(spec.hidden_dims),
            "output_dim": spec.output_dim,
            "activation": spec.activation,
        },
        "layers": [
            {
                "weight_shape": list(w.shape),
                "weight": w.reshape(-1).tolist(),
                "bias": b.tolist(),
            }
            for w, b in zip(wp.params.weights, wp.params.biases)
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, allow_nan=False)
        fh.write("\n")


def load_weight_net(path) -> WeightNetParams:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("schema") != WEIGHT_NET_SCHEMA:
        raise ValueError(f"unsupported weight-net schema: {doc.get('schema')!r}")
    spec = MlpSpec(
        input_dim=doc["spec"]["input_dim"],
        hidden_dims=tuple(doc["spec"]["hidden_dims"]),
        output_dim=doc["spec"]["output_dim"],
        activation=doc["spec"]["activation"],
    )
    weights = [
        np.array(layer["weight"]).reshape(tuple(layer["weight_shape"]))
        for layer in doc["layers"]
    ]
    biases = [np.array(layer["bias"]) for layer in doc["layers"]]
    return WeightNetParams(
        params=MlpParams(spec, weights, biases),
        input_layout=doc.get("input_layout", WEIGHT_NET_INPUT),
    )


# ---------------------------------------------------------------------------
# assembled coordination energy on the normalized sampler state
# ---------------------------------------------------------------------------


@dataclass
class CoordinationSetup:
    """Static context for evaluating coordination terms on normalized states."""

    norm_left: ActionNormalizer
    norm_right: ActionNormalizer
    geom_left: ArmGeometry
    geom_right: ArmGeometry
    d_safe: float = 0.001
    d_safe_joint: float = 0.001
    enable_temporal: bool = True
    enable_spatial: bool = True
    temporal_positions_only: bool = False
    weight_params: WeightNetParams | None = None

    @property
    def enabled(self) -> bool:
        return self.enable_temporal or self.enable_spatial

    def normalized_history(self, history: PoseHistory) -> list:
        out = []
        for act in history.actions:
            out.append(
                np.concatenate(
                    [
                        self.norm_left.normalize(act.left),
                        self.norm_right.normalize(act.right),
                    ]
                )
            )
        return out


@dataclass
class EnergyBreakdown:
    """The six term values, their weights, and the combined totals."""

    e_vel: float
    e_accel: float
    e_jerk: float
    e_sync: float
    e_ee: float
    e_joint: float
    weights: np.ndarray
    e_coord: float
    e_comp: float
    e_total: float

    def __post_init__(self):
        terms = self.terms()
        if np.any(terms < 0):
            raise ValueError("energy terms must be non-negative")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be a probability simplex")
        if abs(self.e_coord - float(self.weights @ terms)) > 1e-9:
            raise ValueError("e_coord must equal the weighted term sum")
        if abs(self.e_total - (self.e_comp + self.e_coord)) > 1e-9:
            raise ValueError("e_total must equal e_comp + e_coord")

    def terms(self) -> np.ndarray:
        return np.array(
            [self.e_vel, self.e_accel, self.e_jerk, self.e_sync, self.e_ee, self.e_joint]
        )

    def as_dict(self) -> dict:
        doc = {name: float(v) for name, v in zip(TERM_NAMES, self.terms())}
        doc["weights"] = [float(w) for w in self.weights]
        doc["e_coord"] = float(self.e_coord)
        doc["e_comp"] = float(self.e_comp)
        doc["e_total"] = float(self.e_total)
        return doc


def make_breakdown(terms: np.ndarray, weights: np.ndarray, e_comp: float) -> EnergyBreakdown:
    e_coord = float(weights @ terms)
    return EnergyBreakdown(
        e_vel=float(terms[0]),
        e_accel=float(terms[1]),
        e_jerk=float(terms[2]),
        e_sync=float(terms[3]),
        e_ee=float(terms[4]),
        e_joint=float(terms[5]),
        weights=np.asarray(weights, dtype=float),
        e_coord=e_coord,
        e_comp=float(e_comp),
        e_total=float(e_comp) + e_coord,
    )


def _split(z: np.ndarray):
    return z[:ACTION_DIM], z[ACTION_DIM:]


def _temporal_slice(setup: CoordinationSetup):
    return slice(0, 3) if setup.temporal_positions_only else slice(0, ACTION_DIM)


def _joint_state(setup: CoordinationSetup, pos_l, pos_r, history: PoseHistory):
    """IK both arms at the (possibly clamped) planar targets; returns
    (joints_l, joints_r, clamped_l, clamped_r)."""
    out = []
    flags = []
    for pos, geom, seed in (
        (pos_l, setup.geom_left, history.joints_left),
        (pos_r, setup.geom_right, history.joints_right),
    ):
        target = pos[0:2]
        try:
            joints = inverse_kin(geom, target, seed)
            clamped = False
        except UnreachableTargetError:
            projected, _ = clamp_to_workspace(geom, target)
            joints = inverse_kin(geom, projected, seed)
            clamped = True
        out.append(joints)
        flags.append(clamped)
    return out[0], out[1], flags[0], flags[1]


def six_energy_terms(z: np.ndarray, setup: CoordinationSetup, history: PoseHistory):
    """Term values at normalized state z; returns (terms[6], flags list)."""
    z_l, z_r = _split(z)
    hist = setup.normalized_history(history)
    h1_l, h1_r = _split(hist[0])
    h2_l, h2_r = _split(hist[1])
    h3_l, h3_r = _split(hist[2])
    terms = np.zeros(N_TERMS)
    flags = []

    if setup.enable_temporal:
        sl = _temporal_slice(setup)
        terms[0] = energy_velocity(z_l[sl], z_r[sl], h1_l[sl], h1_r[sl])
        terms[1] = energy_acceleration(
            z_l[sl], z_r[sl], h1_l[sl], h1_r[sl], h2_l[sl], h2_r[sl]
        )
        terms[2] = energy_jerk(
            z_l[sl], z_r[sl], h1_l[sl], h1_r[sl], h2_l[sl], h2_r[sl], h3_l[sl], h3_r[sl]
        )
        terms[3] = energy_sync(z_l[sl], z_r[sl], h1_l[sl], h1_r[sl])

    if setup.enable_spatial:
        a_l = setup.norm_left.denormalize(z_l)
        a_r = setup.norm_right.denormalize(z_r)
        pos_l, pos_r = a_l[0:3], a_r[0:3]
        terms[4] = energy_ee(pos_l, pos_r, setup.d_safe)
        joints_l, joints_r, clamp_l, clamp_r = _joint_state(setup, pos_l, pos_r, history)
        terms[5] = energy_joint(joints_l, joints_r, setup.d_safe_joint)
        if clamp_l:
            flags.append("ik_clamped_left")
        if clamp_r:
            flags.append("ik_clamped_right")
    return terms, flags


def six_energy_gradients(z: np.ndarray, setup: CoordinationSetup, history: PoseHistory):
    """Analytic d(term)/dz for each term; returns (grads (6, 2*7), flags)."""
    z_l, z_r = _split(z)
    hist = setup.normalized_history(history)
    h1_l, h1_r = _split(hist[0])
    h2_l, h2_r = _split(hist[1])
    h3_l, h3_r = _split(hist[2])
    grads = np.zeros((N_TERMS, 2 * ACTION_DIM))
    flags = []

    if setup.enable_temporal:
        sl = _temporal_slice(setup)
        grads[0, : ACTION_DIM][sl] = 2.0 * (z_l[sl] - h1_l[sl])
        grads[0, ACTION_DIM:][sl] = 2.0 * (z_r[sl] - h1_r[sl])
        grads[1, : ACTION_DIM][sl] = 2.0 * (z_l[sl] - 2.0 * h1_l[sl] + h2_l[sl])
        grads[1, ACTION_DIM:][sl] = 2.0 * (z_r[sl] - 2.0 * h1_r[sl] + h2_r[sl])
        grads[2, : ACTION_DIM][sl] = 2.0 * (
            z_l[sl] - 3.0 * h1_l[sl] + 3.0 * h2_l[sl] - h3_l[sl]
        )
        grads[2, ACTION_DIM:][sl] = 2.0 * (
            z_r[sl] - 3.0 * h1_r[sl] + 3.0 * h2_r[sl] - h3_r[sl]
        )
        g_l, g_r = energy_sync_gradient(z_l[sl], z_r[sl], h1_l[sl], h1_r[sl])
        grads[3, : ACTION_DIM][sl] = g_l
        grads[3, ACTION_DIM:][sl] = g_r

    if setup.enable_spatial:
        a_l = setup.norm_left.denormalize(z_l)
        a_r = setup.norm_right.denormalize(z_r)
        pos_l, pos_r = a_l[0:3], a_r[0:3]
        g_l, g_r = energy_ee_gradient(pos_l, pos_r, setup.d_safe)
        grads[4, 0:3] = setup.norm_left.std[0:3] * g_l
        grads[4, ACTION_DIM : ACTION_DIM + 3] = setup.norm_right.std[0:3] * g_r

        joints_l, joints_r, clamp_l, clamp_r = _joint_state(setup, pos_l, pos_r, history)
        if clamp_l:
            flags.append("ik_clamped_left")
        if clamp_r:
            flags.append("ik_clamped_right")
        dvec = np.array(
            [wrap_angle(x - y) for x, y in zip(joints_l.angles, joints_r.angles)]
        )
        dist = float(np.linalg.norm(dvec))
        gap = setup.d_safe_joint - dist
        if gap > 0.0 and dist > 0.0:
            de_djl = -2.0 * gap * dvec / dist
            jac_l = None if clamp_l else ik_position_jacobian(setup.geom_left, joints_l)
            jac_r = None if clamp_r else ik_position_jacobian(setup.geom_right, joints_r)
            if jac_l is not None:
                de_dpos = jac_l.T @ de_djl
                grads[5, 0:2] = setup.norm_left.std[0:2] * de_dpos
            else:
                flags.append("ik_singular_left")
            if jac_r is not None:
                de_dpos = jac_r.T @ (-de_djl)
                grads[5, ACTION_DIM : ACTION_DIM + 2] = (
                    setup.norm_right.std[0:2] * de_dpos
                )
            else:
                flags.append("ik_singular_right")
    return grads, flags


def coord_energy(z: np.ndarray, setup: CoordinationSetup, history: PoseHistory):
    """Weighted coordination energy; returns (e_coord, terms, weights, flags)."""
    terms, flags = six_energy_terms(z, setup, history)
    hist = setup.normalized_history(history)
    weights = predict_weights(setup.weight_params, z, hist[0])
    return float(weights @ terms), terms, weights, flags


def coord_gradient(z: np.ndarray, setup: CoordinationSetup, history: PoseHistory):
    """d(e_coord)/dz with the predicted weights held constant."""
    if not setup.enabled:
        return np.zeros(2 * ACTION_DIM), []
    grads, flags = six_energy_gradients(z, setup, history)
    hist = setup.normalized_history(history)
    weights = predict_weights(setup.weight_params, z, hist[0])
    return weights @ grads, flags


def total_energy(
    z: np.ndarray, t: float, gen_field, setup: CoordinationSetup, history: PoseHistory
) -> EnergyBreakdown:
    """Full breakdown at (z, t): generative proxy plus coordination terms."""
    e_comp = gen_field.energy(z, t)
    terms, flags = six_energy_terms(z, setup, history)
    hist = setup.normalized_history(history)
    weights = predict_weights(setup.weight_params, z, hist[0])
    breakdown = make_breakdown(terms, weights, e_comp)
    return breakdown


# ---------------------------------------------------------------------------
# weight-net training
# ---------------------------------------------------------------------------


@dataclass
class WeightTrainConfig:
    lr: float = 3e-3
    epochs: int = 80
    unroll_steps: int = 5
    seed: int = 0
    hidden: int = 32
    loss_log: list = field(default_factory=list)


def train_weight_net(bimanual_demos, left_ckpt, right_ckpt, setup_base, hyper):
    """Fit the weight predictor by imitation through a denoising unroll.

    Each training state replays one demo step: unroll `unroll_steps` Euler
    steps of the total velocity field from seeded noise and regress the final
    state onto the demo action. Gradients into the weight net are truncated
    per step (the running state is treated as given when differentiating a
    step's increment); policy checkpoints stay frozen. The epoch with the
    lowest true loss wins, so the returned net never scores worse than the
    uniform initialization. With no demos the uniform-weight initialization
    is returned unchanged.
    """
    from .sampler import unroll_states

    wp = init_weight_net(derive_seed(hyper.seed, "weight-init"), hidden=hyper.hidden)
    hyper.loss_log.clear()
    if not bimanual_demos or hyper.epochs == 0:
        return wp

    states = _weight_training_states(bimanual_demos, left_ckpt, right_ckpt, setup_base)
    if not states:
        return wp

    rng_master = derive_seed(hyper.seed, "weight-train")
    adam = AdamState.for_params(wp.params)
    best_params = wp.params.copy()
    best_loss = _weight_net_loss(states, wp, left_ckpt, right_ckpt, rng_master)
    hyper.loss_log.append(best_loss)

    dt = 1.0 / hyper.unroll_steps
    dim = 2 * ACTION_DIM
    for epoch in range(hyper.epochs):
        grad_acc = zero_mlp(wp.params.spec)
        loss_acc = 0.0
        for idx, st in enumerate(states):
            field_, setup, history, z_target = st
            setup.weight_params = wp
            z0 = SeededRng(derive_seed(rng_master, "noise", idx)).normal(dim)
            zs, records = unroll_states(
                field_, setup, history, z0, hyper.unroll_steps, record_weights=True
            )
            z_final = zs[-1]
            resid = z_final - z_target
            loss_acc += float(resid @ resid) / dim
            dl_dz = 2.0 * resid / dim
            for (z_k, u_k, w_k, term_grads) in records:
                # truncated chain: dz_final/dw_i ~= -dt * g_i(z_k)
                dl_dw = term_grads @ (-dt * dl_dz)
                dl_dlogits = w_k * (dl_dw - float(w_k @ dl_dw))
                g_step, _ = mlp_backward(wp.params, u_k, dl_dlogits)
                for acc, g in zip(grad_acc.flat_arrays(), g_step.flat_arrays()):
                    acc += g
        for acc in grad_acc.flat_arrays():
            acc /= len(states)
        new_params, adam = adam_step(wp.params, grad_acc, adam, lr=hyper.lr)
        wp = WeightNetParams(params=new_params)
        loss = loss_acc / len(states)
        hyper.loss_log.append(loss)
        if loss < best_loss:
            best_loss = loss
            best_params = wp.params.copy()
    return WeightNetParams(params=best_params)


def _weight_training_states(bimanual_demos, left_ckpt, right_ckpt, setup_base):
    """(field, setup, history, target) tuples from bimanual demo steps."""
    from .composition import ComposedField
    from dataclasses import replace

    states = []
    for demo in bimanual_demos:
        steps = demo.steps
        if not steps:
            continue
        first = steps[0].action
        joints_l = inverse_kin(
            setup_base.geom_left, first.left[0:2], JointConfig((0.0, 0.5))
        )
        joints_r = inverse_kin(
            setup_base.geom_right, first.right[0:2], JointConfig((0.0, -0.5))
        )
        history = PoseHistory.initial(first, joints_l, joints_r)
        for step in steps:
            field_ = ComposedField(
                left_ckpt, right_ckpt, step.cond_left, step.cond_right
            )
            z_target = field_.normalize(step.action)
            states.append((field_, replace(setup_base), history, z_target))
            joints_l = inverse_kin(
                setup_base.geom_left, step.action.left[0:2], history.joints_left
            )
            joints_r = inverse_kin(
                setup_base.geom_right, step.action.right[0:2], history.joints_right
            )
            history = history.advanced(step.action, joints_l, joints_r)
    return states


def _weight_net_loss(states, wp, left_ckpt, right_ckpt, rng_master):
    from .sampler import unroll_states

    dim = 2 * ACTION_DIM
    total = 0.0
    for idx, st in enumerate(states):
        field_, setup, history, z_target = st
        setup.weight_params = wp
        z0 = SeededRng(derive_seed(rng_master, "noise", idx)).normal(dim)
        zs, _ = unroll_states(field_, setup, history, z0, 5, record_weights=False)
        resid = zs[-1] - z_target
        total += float(resid @ resid) / dim
    return total / len(states)
