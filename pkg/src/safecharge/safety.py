"""Safety layer: learned unsafety predictor plus a one-constraint QP projection.

The safety network maps (normalized state, normalized action) to a predicted
probability-like score that the next state is unsafe. Around the proposed
action ``a0`` it is linearized into

    g * a + c <= d,   g = dS/da (per ampere),   c = S(s, a0) - g * a0

where ``d`` is the score above which an action is treated as unsafe (0.5 by
default, halfway between the two training labels).

and the executed action is the minimizer of 0.5 * (a - a0)**2 over that
half-line intersected with the current box [a_lo, a_hi].
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import nn_core
from .battery_env import BatteryConfig, BatteryState, is_unsafe
from .ddpg import STATE_DIM
from .nn_core import MlpParams, OptimizerState

logger = logging.getLogger(__name__)

INACTIVE = "inactive"
PROJECTED = "projected"
FALLBACK = "fallback"


def init_safety_network(hidden: tuple[int, ...], rng: np.random.Generator, final_scale: float | None = 3e-3) -> MlpParams:
    return nn_core.init_mlp((STATE_DIM + 1, *hidden, 1), rng, final_scale=final_scale)


@dataclass(frozen=True)
class SafetyConstraintSet:
    g: float
    c: float
    d: float = 0.5
    a_lo: float = -4.2
    a_hi: float = 0.0

    def __post_init__(self) -> None:
        if self.a_lo > self.a_hi:
            raise ValueError("empty action box")


class SafetySignal(NamedTuple):
    g: float
    c: float
    prediction: float


class SafeAction(NamedTuple):
    action: float
    status: str


def safety_signal(
    net: MlpParams,
    state: np.ndarray,
    action_a: float,
    max_current_a: float,
) -> SafetySignal:
    """Linearize the safety network in the action around ``action_a`` (amperes)."""
    x = np.append(np.asarray(state, dtype=np.float64), action_a / max_current_a)
    out, cache = nn_core.forward(net, x)
    _, dx = nn_core.backward(net, cache, np.ones(1), input_gradient=True, param_gradients=False)
    prediction = float(out[0])
    g = float(dx[STATE_DIM]) / max_current_a
    c = prediction - g * action_a
    return SafetySignal(g, c, prediction)


def perturb_action(raw_action: float, constraints: SafetyConstraintSet) -> SafeAction:
    """Closed-form solution of min 0.5 (a - raw)^2 s.t. g a + c <= d, a_lo <= a <= a_hi.

    When no action in the box satisfies the linear constraint, returns the
    most conservative action ``a_hi`` (no charging) with status ``fallback``.
    """
    g, c, d = constraints.g, constraints.c, constraints.d
    lo, hi = constraints.a_lo, constraints.a_hi
    if not lo <= raw_action <= hi:
        raise ValueError(f"raw action {raw_action} outside [{lo}, {hi}]")
    if g * raw_action + c <= d:
        return SafeAction(raw_action, INACTIVE)
    if g == 0.0:
        logger.debug("safety constraint infeasible (g = 0, c = %g > d = %g); falling back", c, d)
        return SafeAction(hi, FALLBACK)
    bound = (d - c) / g
    # g < 0: feasible set is a >= bound; g > 0: a <= bound.
    if (g < 0 and bound > hi) or (g > 0 and bound < lo):
        logger.debug("safety constraint has no solution in [%g, %g]; falling back", lo, hi)
        return SafeAction(hi, FALLBACK)
    return SafeAction(min(max(bound, lo), hi), PROJECTED)


def safety_target(temp_k: float, voltage_v: float, config: BatteryConfig, margin_k: float = 0.0, margin_v: float = 0.0) -> int:
    """0 if strictly below both safe limits, else 1.

    The margins tighten the limits the network is taught (t_safe - margin_k,
    v_safe - margin_v); with both at 0 the label is the environment's flag.
    """
    return int(temp_k >= config.t_safe_k - margin_k or voltage_v >= config.v_safe - margin_v or is_unsafe(temp_k, voltage_v, config))


def safety_targets(next_state: BatteryState, config: BatteryConfig, margin_k: float = 0.0, margin_v: float = 0.0) -> int:
    return safety_target(next_state.temp_k, next_state.voltage_v, config, margin_k, margin_v)


def update_safety(
    net: MlpParams,
    opt: OptimizerState,
    states: np.ndarray,
    actions_a: np.ndarray,
    targets: np.ndarray,
    max_current_a: float,
) -> float:
    """One gradient step on mean (S(s, a) - K)^2. Returns the pre-step loss.

    A non-finite loss or gradient skips the step and returns NaN.
    """
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    n = states.shape[0]
    if n == 0:
        raise ValueError("empty safety batch")
    x = np.hstack([states, np.asarray(actions_a, dtype=np.float64).reshape(n, 1) / max_current_a])
    pred, cache = nn_core.forward(net, x)
    err = pred[:, 0] - np.asarray(targets, dtype=np.float64)
    loss = float(np.mean(err * err))
    if not math.isfinite(loss):
        logger.warning("safety update skipped: non-finite loss")
        return float("nan")
    grads = nn_core.backward(net, cache, (2.0 / n) * err[:, None])
    try:
        nn_core.apply_gradients(net, grads, opt)
    except nn_core.NonFiniteError:
        logger.warning("safety update skipped: non-finite gradient")
        return float("nan")
    return loss


class SafetyLayer:
    """Safety network, its optimizer, and the projection applied at each step."""

    def __init__(self, net: MlpParams, opt: OptimizerState, max_current_a: float, d: float = 0.5):
        self.net = net
        self.opt = opt
        self.max_current_a = max_current_a
        self.d = d

    @classmethod
    def create(cls, hidden: tuple[int, ...], lr: float, rng: np.random.Generator, max_current_a: float, d: float = 0.5) -> "SafetyLayer":
        net = init_safety_network(hidden, rng)
        return cls(net, OptimizerState.for_params(net, lr), max_current_a, d)

    def signal(self, state: np.ndarray, action_a: float) -> SafetySignal:
        return safety_signal(self.net, state, action_a, self.max_current_a)

    def project(self, state: np.ndarray, raw_action: float, a_lo: float | None = None) -> tuple[SafeAction, SafetySignal]:
        sig = self.signal(state, raw_action)
        lo = -self.max_current_a if a_lo is None else a_lo
        cons = SafetyConstraintSet(sig.g, sig.c, self.d, lo, 0.0)
        return perturb_action(raw_action, cons), sig

    def update(self, states: np.ndarray, actions_a: np.ndarray, targets: np.ndarray) -> float:
        return update_safety(self.net, self.opt, states, actions_a, targets, self.max_current_a)
