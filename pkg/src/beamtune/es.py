"""Bounded extremum-seeking controllers.

Two forms are provided:

* `es_step` — the discrete multi-parameter update used on the magnets,
    Q_i(t+1) = Q_i(t) + dt * sqrt(alpha * w_i) * cos(w_i * t * dt -/+ k * V),
  whose per-step change is hard-bounded by dt * sqrt(alpha * w_i) no
  matter what the measured objective does.

* `es_continuous` — the continuous-time law u = sqrt(alpha*w) * cos(w t -/+ k V)
  closed around a scalar time-varying plant, for the 1D studies.

The controller reads only the scalar objective value; it never sees
plant internals. For large w the trajectory tracks an averaged system
whose drift is a (semi)gradient of the objective — `averaged_descent_check`
and `averaged_1d_reference` provide the matching oracles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

GOLDEN_FRAC = (math.sqrt(5.0) - 1.0) / 2.0


def golden_ratios(n: int) -> tuple[float, ...]:
    """n pairwise-distinct dither ratios in [1, 2) from the golden ladder."""
    return tuple(1.0 + math.fmod(i * GOLDEN_FRAC, 1.0) for i in range(1, n + 1))


@dataclass(frozen=True)
class EsConfig:
    """Dither amplitudes, frequencies and gain for one ES instance.

    maximize=True puts -k*V inside the cosine (ascent of V); False puts
    +k*V (descent of a cost).
    """

    alpha: float
    omega_base: float
    ratios: tuple[float, ...]
    gain_k: float = 15.0
    dt: float = 1.0
    maximize: bool = True

    def __post_init__(self) -> None:
        if self.alpha < 0.0:
            raise ValueError("alpha must be nonnegative")
        if self.omega_base <= 0.0:
            raise ValueError("omega_base must be positive")
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")
        if len(self.ratios) == 0:
            raise ValueError("need at least one dither ratio")
        if any(r <= 0.0 for r in self.ratios):
            raise ValueError("ratios must be positive")
        if len(set(self.ratios)) != len(self.ratios):
            raise ValueError("dither ratios must be pairwise distinct")
        if self.dt * max(self.ratios) * self.omega_base > 0.25:
            raise ValueError(
                "dt * max(omega_i) exceeds 0.25; reduce dt or omega_base"
            )

    @property
    def n_params(self) -> int:
        return len(self.ratios)

    @property
    def omegas(self) -> np.ndarray:
        return self.omega_base * np.asarray(self.ratios)

    def with_n_params(self, n: int) -> "EsConfig":
        return replace(self, ratios=golden_ratios(n))


def step_bound(cfg: EsConfig) -> np.ndarray:
    """Hard per-step bound dt * sqrt(alpha * w_i), one entry per parameter.

    `es_step` multiplies exactly this array by a cosine, so the bound
    holds bit-level.
    """
    return cfg.dt * np.sqrt(cfg.alpha * cfg.omegas)


@dataclass(frozen=True)
class EsState:
    """Dither phase index and current parameter vector."""

    step_index: int
    params: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "params", np.asarray(self.params, dtype=float))
        if self.step_index < 0:
            raise ValueError("step_index must be nonnegative")


def es_increment(state: EsState, objective_value: float, cfg: EsConfig) -> np.ndarray:
    """Commanded per-step parameter change; |dq_i| <= step_bound(cfg)[i]
    holds bit-level because the bound is multiplied by a cosine."""
    if not math.isfinite(objective_value):
        raise ValueError(f"objective value must be finite, got {objective_value}")
    if state.params.shape != (cfg.n_params,):
        raise ValueError(
            f"state has {state.params.shape[0]} parameters, config expects {cfg.n_params}"
        )
    sign = -1.0 if cfg.maximize else 1.0
    phase = cfg.omegas * (state.step_index * cfg.dt) + sign * cfg.gain_k * objective_value
    return step_bound(cfg) * np.cos(phase)


def es_step(state: EsState, objective_value: float, cfg: EsConfig) -> EsState:
    """One bounded ES update from the measured scalar objective."""
    dq = es_increment(state, objective_value, cfg)
    return EsState(step_index=state.step_index + 1, params=state.params + dq)


@dataclass(frozen=True)
class Plant1D:
    """dx/dt = a x + b(t) u with sinusoidal gain b(t) = b0 cos(2 pi f t)."""

    a: float
    b0: float
    freq: float = 0.0

    def gain(self, t: float) -> float:
        if self.freq == 0.0:
            return self.b0
        return self.b0 * math.cos(2.0 * math.pi * self.freq * t)


def gaussian_objective(x: float) -> float:
    return math.exp(-x * x)


def gaussian_objective_grad(x: float) -> float:
    return -2.0 * x * math.exp(-x * x)


def es_control_law(cfg: EsConfig, v_of_x: Callable[[float], float]) -> Callable[[float, float], float]:
    """Scalar ES feedback u(x, t) for the first configured dither channel."""
    omega = float(cfg.omegas[0])
    amp = math.sqrt(cfg.alpha * omega)
    sign = -1.0 if cfg.maximize else 1.0

    def u(x: float, t: float) -> float:
        return amp * math.cos(omega * t + sign * cfg.gain_k * v_of_x(x))

    return u


@dataclass
class Run1D:
    """Sampled closed-loop trajectory of the scalar plant."""

    t: np.ndarray
    x: np.ndarray
    v: np.ndarray
    diverged: bool


def es_continuous(
    u_of: Callable[[float, float], float],
    plant: Plant1D,
    cfg: EsConfig,
    horizon: float,
    *,
    x0: float = 1.0,
    v_of_x: Callable[[float], float] = gaussian_objective,
    x_ceiling: float = 1e3,
) -> Run1D:
    """Integrate dx/dt = a x + b(t) u(x, t) with RK4 at step cfg.dt.

    cfg.dt * max(omega) <= 0.25 (config invariant) keeps the dither well
    resolved. Crossing |x| > x_ceiling stops the run and flags divergence.
    """
    if horizon <= 0.0:
        raise ValueError("horizon must be positive")
    h = cfg.dt
    n = int(round(horizon / h))
    t = np.arange(n + 1) * h
    x_out = np.empty(n + 1)
    v_out = np.empty(n + 1)
    x = float(x0)
    x_out[0] = x
    v_out[0] = v_of_x(x)
    a = plant.a
    diverged = False

    def f(xv: float, tv: float) -> float:
        return a * xv + plant.gain(tv) * u_of(xv, tv)

    for k in range(n):
        tk = k * h
        k1 = f(x, tk)
        k2 = f(x + 0.5 * h * k1, tk + 0.5 * h)
        k3 = f(x + 0.5 * h * k2, tk + 0.5 * h)
        k4 = f(x + h * k3, tk + h)
        x = x + h / 6.0 * (k1 + 2.0 * (k2 + k3) + k4)
        x_out[k + 1] = x
        v_out[k + 1] = v_of_x(x)
        if not math.isfinite(x) or abs(x) > x_ceiling:
            diverged = True
            t = t[: k + 2]
            x_out = x_out[: k + 2]
            v_out = v_out[: k + 2]
            break

    return Run1D(t=t, x=x_out, v=v_out, diverged=diverged)


def averaged_1d_reference(
    plant: Plant1D,
    cfg: EsConfig,
    horizon: float,
    *,
    x0: float = 1.0,
    grad_v: Callable[[float], float] = gaussian_objective_grad,
    dt: float | None = None,
) -> Run1D:
    """Weak-limit averaged system dxb/dt = a xb + (k a_dither/2) b^2(t) grad V(xb).

    Integrated with RK4 at a step independent of (and much finer than)
    the dither period, so it can serve as the closeness oracle.
    """
    omega = float(cfg.omegas[0])
    h = dt if dt is not None else (2.0 * math.pi / omega) / 100.0
    gain = 0.5 * cfg.gain_k * cfg.alpha
    sign = 1.0 if cfg.maximize else -1.0
    n = int(round(horizon / h))
    t = np.arange(n + 1) * h
    x_out = np.empty(n + 1)
    x = float(x0)
    x_out[0] = x

    def f(xv: float, tv: float) -> float:
        b = plant.gain(tv)
        return plant.a * xv + sign * gain * b * b * grad_v(xv)

    for k in range(n):
        tk = k * h
        k1 = f(x, tk)
        k2 = f(x + 0.5 * h * k1, tk + 0.5 * h)
        k3 = f(x + 0.5 * h * k2, tk + 0.5 * h)
        k4 = f(x + h * k3, tk + h)
        x = x + h / 6.0 * (k1 + 2.0 * (k2 + k3) + k4)
        x_out[k + 1] = x

    v = np.array([gaussian_objective(xv) for xv in x_out])
    return Run1D(t=t, x=x_out, v=v, diverged=False)


@dataclass
class DescentReport:
    """Deviation of the discrete ES trajectory from its gradient-flow oracle."""

    max_deviation: float
    diameter: float
    es_path: np.ndarray        # (n_steps + 1, n_params)
    oracle_path: np.ndarray    # same shape, sampled at the ES step times

    @property
    def relative_deviation(self) -> float:
        return self.max_deviation / self.diameter if self.diameter > 0.0 else math.inf


def _central_gradient(J: Callable[[np.ndarray], float], q: np.ndarray, h: float) -> np.ndarray:
    g = np.empty_like(q)
    for i in range(len(q)):
        qp = q.copy()
        qm = q.copy()
        qp[i] += h
        qm[i] -= h
        g[i] = (J(qp) - J(qm)) / (2.0 * h)
    return g


def averaged_descent_check(
    J: Callable[[np.ndarray], float],
    cfg: EsConfig,
    *,
    q0: np.ndarray,
    n_steps: int,
    grad_h: float = 1e-6,
    oracle_substeps: int = 100,
) -> DescentReport:
    """Run discrete ES on a static objective and compare against the
    gradient flow dQb/dt = -/+ (k alpha / 2) grad J(Qb).

    The oracle is integrated with RK4 at 1/oracle_substeps of the fastest
    dither period; the finite-difference gradient keeps it independent of
    the ES path.
    """
    q0 = np.asarray(q0, dtype=float)
    state = EsState(step_index=0, params=q0)
    es_path = np.empty((n_steps + 1, cfg.n_params))
    es_path[0] = q0
    for k in range(n_steps):
        state = es_step(state, J(state.params), cfg)
        es_path[k + 1] = state.params

    sign = 1.0 if cfg.maximize else -1.0
    gain = 0.5 * cfg.gain_k * cfg.alpha

    def flow(q: np.ndarray) -> np.ndarray:
        return sign * gain * _central_gradient(J, q, grad_h)

    h_oracle = (2.0 * math.pi / float(np.max(cfg.omegas))) / oracle_substeps
    sub = max(1, int(math.ceil(cfg.dt / h_oracle)))
    h = cfg.dt / sub
    oracle_path = np.empty_like(es_path)
    q = q0.copy()
    oracle_path[0] = q
    for k in range(n_steps):
        for _ in range(sub):
            k1 = flow(q)
            k2 = flow(q + 0.5 * h * k1)
            k3 = flow(q + 0.5 * h * k2)
            k4 = flow(q + h * k3)
            q = q + h / 6.0 * (k1 + 2.0 * (k2 + k3) + k4)
        oracle_path[k + 1] = q

    deviation = float(np.max(np.linalg.norm(es_path - oracle_path, axis=1)))
    span = oracle_path.max(axis=0) - oracle_path.min(axis=0)
    diameter = float(np.linalg.norm(span))
    return DescentReport(
        max_deviation=deviation,
        diameter=diameter,
        es_path=es_path,
        oracle_path=oracle_path,
    )
