"""Step-size schedules for the global (M) and local (E) updates."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# exponent of the t^(-1/2 + 1e-16) factor; evaluates to just above -1/2 in doubles
_T_EXPONENT = -0.5 + 1e-16


@dataclass
class StepState:
    """Adaptive step state shared by all parameter arrays of a model.

    ``s`` holds one running average of squared gradients per parameter
    array, keyed by name. The base rate is ``rho0 * decay**floor((t-1)/period)``,
    so iterations ``1..period`` use ``rho0`` and the first decayed step is
    iteration ``period + 1``.
    """

    rho0: float = 0.02
    decay: float = 0.9
    period: int = 2000
    t: int = 0
    s: dict = field(default_factory=dict)

    def base_rate(self, t: int | None = None) -> float:
        t = self.t if t is None else t
        return self.rho0 * self.decay ** ((t - 1) // self.period)


def global_step_size(state: StepState, grads: dict) -> dict:
    """Advance ``state`` by one iteration and return elementwise step sizes.

    ``s <- 0.1 g^2 + 0.9 s`` and ``rho = base * t^(-1/2+1e-16) / (1 + sqrt(s))``.
    """
    state.t += 1
    rate = state.base_rate() * state.t**_T_EXPONENT
    steps = {}
    for name, g in grads.items():
        s = state.s.get(name)
        s = 0.1 * np.square(g) if s is None else 0.1 * np.square(g) + 0.9 * s
        state.s[name] = s
        steps[name] = rate / (1.0 + np.sqrt(s))
    return steps


def alpha_schedule(t, model: str = "softmax"):
    """Local step size: ``(1+t)^-0.9`` for softmax, ``0.01 (1+t)^-0.9`` otherwise."""
    scale = 1.0 if model == "softmax" else 0.01
    return scale * (1.0 + np.asarray(t, dtype=float)) ** -0.9
