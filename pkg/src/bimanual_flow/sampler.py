"""Bimanual action generation by integrating the total velocity field.

Three strategies share one Euler core:

* fixed       — exactly n_max steps with dt = 1/n_max;
* adaptive    — the initial total energy fixes a step budget between 1 and
                n_max, then dt = 1/budget so the flow still integrates t over
                the full [0, 1] interval;
* early_stop  — the fixed schedule with energy monitoring after each step,
                terminating once the energy falls below tau_low.

The total velocity is the generative field minus the gradient of the
weighted coordination energy (descent direction), both in normalized
coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .composition import BimanualAction, GuidanceWeights
from .coordination import (
    CoordinationSetup,
    EnergyBreakdown,
    PoseHistory,
    coord_gradient,
    predict_weights,
    six_energy_gradients,
    total_energy,
    weight_net_input,
)
from .kinematics import ACTION_DIM
from .numerics import SeededRng, derive_seed

STRATEGIES = ("fixed", "adaptive", "early_stop")


class DenoiseDivergedError(RuntimeError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass
class SamplerConfig:
    strategy: str = "fixed"
    n_max: int = 5
    tau_low: float = 4.0
    tau_high: float = 10.0
    guidance: GuidanceWeights = GuidanceWeights()
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if self.n_max < 1:
            raise ValueError("n_max must be >= 1")
        finite = math.isfinite(self.tau_low) and math.isfinite(self.tau_high)
        if finite and not (self.tau_low < self.tau_high):
            raise ValueError("tau_low must be < tau_high")


@dataclass
class StepRecord:
    t: float
    energy_after: float
    action: BimanualAction


@dataclass
class DenoiseTrace:
    initial_energy: float
    steps: list
    steps_used: int
    reason: str  # budget | early_energy | fixed
    flags: list = dc_field(default_factory=list)

    def summary(self) -> dict:
        return {
            "initial_energy": float(self.initial_energy),
            "final_energy": float(self.steps[-1].energy_after) if self.steps else None,
            "steps_used": self.steps_used,
            "reason": self.reason,
            "flags": sorted(set(self.flags)),
        }


@dataclass
class SamplingContext:
    """Everything one denoise call needs: the generative field, the
    coordination setup, and the execution history. initial_state, when set,
    replaces the seeded noise draw (oracle tests)."""

    field: object
    setup: CoordinationSetup
    history: PoseHistory
    initial_state: np.ndarray | None = None


def total_velocity(z: np.ndarray, t: float, ctx: SamplingContext):
    """Generative velocity plus coordination descent; returns (v, flags)."""
    v = ctx.field.velocity(z, t)
    if not ctx.setup.enabled:
        return v, []
    g, flags = coord_gradient(z, ctx.setup, ctx.history)
    return v - g, flags


def step_budget(initial_energy: float, cfg: SamplerConfig) -> int:
    """Energy-adaptive step count: 1 below tau_low, n_max above tau_high,
    linear interpolation rounded half away from zero in between. A
    non-finite interpolation span falls back to the full budget."""
    energy = float(initial_energy)
    if energy < cfg.tau_low:
        return 1
    if energy > cfg.tau_high:
        return cfg.n_max
    span = cfg.tau_high - cfg.tau_low
    if not math.isfinite(span) or span <= 0.0:
        return cfg.n_max
    frac = (energy - cfg.tau_low) / span
    steps = math.floor(1.0 + frac * (cfg.n_max - 1) + 0.5)
    return max(1, min(cfg.n_max, steps))


def _initial_state(ctx: SamplingContext, cfg: SamplerConfig) -> np.ndarray:
    """Per-arm noise streams so composed and solo denoising can share draws."""
    if ctx.initial_state is not None:
        return np.asarray(ctx.initial_state, dtype=float).copy()
    left = SeededRng(derive_seed(cfg.seed, "noise", "left")).normal(ACTION_DIM)
    right = SeededRng(derive_seed(cfg.seed, "noise", "right")).normal(ACTION_DIM)
    return np.concatenate([left, right])


def _energy_total(z, t, ctx) -> EnergyBreakdown:
    return total_energy(z, t, ctx.field, ctx.setup, ctx.history)


def _run_euler(ctx, cfg, budget, reason_on_budget, early_threshold=None):
    """Shared Euler loop; stops early when the post-step energy drops below
    early_threshold (if given). Records (t, energy_after, action) per step."""
    z = _initial_state(ctx, cfg)
    initial = _energy_total(z, 0.0, ctx).e_total
    dt = 1.0 / budget
    steps = []
    flags = []
    reason = reason_on_budget
    for k in range(budget):
        t = k * dt
        v, step_flags = total_velocity(z, t, ctx)
        flags.extend(step_flags)
        z = z + dt * v
        if not np.all(np.isfinite(z)):
            trace = DenoiseTrace(initial, steps, len(steps), "budget", flags)
            raise DenoiseDivergedError(
                f"non-finite state after step {k + 1}", trace
            )
        t_after = (k + 1) * dt
        energy_after = _energy_total(z, t_after, ctx).e_total
        steps.append(StepRecord(t_after, energy_after, ctx.field.denormalize(z)))
        if early_threshold is not None and energy_after < early_threshold:
            reason = "early_energy"
            break
    trace = DenoiseTrace(initial, steps, len(steps), reason, flags)
    return ctx.field.denormalize(z), trace


def denoise_fixed(ctx: SamplingContext, cfg: SamplerConfig):
    return _run_euler(ctx, cfg, cfg.n_max, "fixed")


def denoise_adaptive(ctx: SamplingContext, cfg: SamplerConfig):
    z = _initial_state(ctx, cfg)
    initial = _energy_total(z, 0.0, ctx).e_total
    budget = step_budget(initial, cfg)
    action, trace = _run_euler(ctx, cfg, budget, "budget")
    return action, trace


def denoise_early_stop(ctx: SamplingContext, cfg: SamplerConfig):
    return _run_euler(ctx, cfg, cfg.n_max, "budget", early_threshold=cfg.tau_low)


_DISPATCH = {
    "fixed": denoise_fixed,
    "adaptive": denoise_adaptive,
    "early_stop": denoise_early_stop,
}


def run_denoise(ctx: SamplingContext, cfg: SamplerConfig):
    return _DISPATCH[cfg.strategy](ctx, cfg)


def unroll_states(field, setup, history, z0, n_steps, record_weights=False):
    """Plain fixed-step unroll used by weight-net training.

    Matches the denoise arithmetic (z += dt * (v_field - coord descent));
    optionally records per step (z_k, weight-net input, weights, term
    gradients) for truncated backprop into the weight net.
    """
    dt = 1.0 / n_steps
    z = np.asarray(z0, dtype=float).copy()
    zs = [z.copy()]
    records = []
    h1_norm = setup.normalized_history(history)[0]
    for k in range(n_steps):
        t = k * dt
        v = field.velocity(z, t)
        if setup.enabled:
            if record_weights:
                term_grads, _ = six_energy_gradients(z, setup, history)
                u = weight_net_input(z, h1_norm)
                w = predict_weights(setup.weight_params, z, h1_norm)
                records.append((z.copy(), u, w, term_grads))
                g = w @ term_grads
            else:
                g, _ = coord_gradient(z, setup, history)
            v = v - g
        z = z + dt * v
        zs.append(z.copy())
    return zs, records
