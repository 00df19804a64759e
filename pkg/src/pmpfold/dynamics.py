"""Optimal-trajectory dynamics in torsion space and the running cost that induces them.

With running cost l(s, a) = G(t) (U(s) - |a|^2 / 2) and ds = a dt, the optimal
velocity obeys

    da = -(G'(t) / G(t)) a dt - grad U(s) dt - K dW

G(t) = exp(gamma t) gives damped (Langevin) dynamics with constant friction;
G(t) = t^3 gives friction 3/t, the continuous limit of Nesterov acceleration.
Along a deterministic optimal path the costate is p(t) = G(t) a(t).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .energy import EnergyBreakdown, energy_of_coords, torsion_gradient
from .errors import SingularityError
from .kinematics import Conformation, rebuild_cartesian, wrap_angle
from .topology import MolecularTopology

WEIGHTS = ("exp", "cubic", "unit")
FAMILIES = ("pmp", "langevin", "nesterov", "exploration")
NESTEROV_T_MIN = 1e-3
# exp(-U) is evaluated with U clamped from below here
POTENTIAL_CLAMP = -50.0

GradientFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class PhaseState:
    s: np.ndarray
    a: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        s = np.asarray(self.s, dtype=float).reshape(-1)
        a = np.asarray(self.a, dtype=float).reshape(-1)
        if s.shape != a.shape:
            raise ValueError(f"s and a lengths differ: {s.shape} vs {a.shape}")
        if self.t < 0:
            raise ValueError("t must be non-negative")
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "a", a)


@dataclass(frozen=True)
class DynamicsParams:
    gamma: float = 1.0
    noise_scale: float = 0.1
    dt: float = 0.01
    horizon: float = 10.0
    cost_weight: str = "exp"

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be >= 0")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.horizon < 0:
            raise ValueError("horizon must be >= 0")
        if self.horizon > 0 and self.dt > self.horizon:
            raise ValueError("dt must not exceed horizon")
        if self.cost_weight not in WEIGHTS:
            raise ValueError(f"cost_weight must be one of {WEIGHTS}")


class NoiseSource:
    """Seeded stream of i.i.d. standard normal vectors, drawn in blocks."""

    def __init__(self, seed=0, block: int = 8192):
        self.rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.block = block
        self._buf = np.empty(0)
        self._pos = 0

    def normal(self, size: int) -> np.ndarray:
        if self._pos + size > len(self._buf):
            self._buf = self.rng.standard_normal(max(self.block, size))
            self._pos = 0
        out = self._buf[self._pos : self._pos + size]
        self._pos += size
        return out


# ---------------------------------------------------------------------------
# cost weights


def cost_weight(kind: str, t: float, gamma: float = 0.0) -> float:
    if kind == "exp":
        return math.exp(gamma * t)
    if kind == "cubic":
        return t**3
    if kind == "unit":
        return 1.0
    raise ValueError(f"unknown cost weight {kind!r}")


def damping_rate(kind: str, t: float, gamma: float = 0.0) -> float:
    """G'(t) / G(t) for the named weight."""
    if kind == "exp":
        return gamma
    if kind == "cubic":
        if t <= 0:
            raise ValueError("cubic weight has singular damping 3/t at t <= 0")
        return 3.0 / t
    if kind == "unit":
        return 0.0
    raise ValueError(f"unknown cost weight {kind!r}")


def running_cost(U: float, a, t: float, kind: str = "exp", gamma: float = 0.0) -> float:
    a = np.asarray(a, dtype=float)
    return cost_weight(kind, t, gamma) * (U - 0.5 * float(a @ a))


def running_reward(U_t: float, a, t: float, T: float, gamma: float = 1.0, mode: str = "exp",
                   t_cap: float | None = None) -> float:
    """Per-step training reward on the normalised time t / T.

    exp:   exp(gamma t / T) (|a|^2 / 2 - U_t)
    cubic: (t / T)^3 (|a|^2 / 2 - U_t)

    ``t_cap`` optionally caps t inside the weight.
    """
    if not T > 0:
        raise ValueError("T must be positive")
    a = np.asarray(a, dtype=float)
    kinetic = 0.5 * float(a @ a)
    tw = t if t_cap is None else min(t, t_cap)
    if mode == "exp":
        w = math.exp(gamma * tw / T)
    elif mode == "cubic":
        w = (tw / T) ** 3
    else:
        raise ValueError(f"unknown reward mode {mode!r}")
    return w * (kinetic - U_t)


def hamiltonian(U: float, a) -> float:
    a = np.asarray(a, dtype=float)
    return 0.5 * float(a @ a) + U


# ---------------------------------------------------------------------------
# steppers


def weighted_step(state: PhaseState, params: DynamicsParams, gradient_fn: GradientFn,
                  weight: str | None = None) -> PhaseState:
    """Explicit Euler step of ds = a dt, da = (-(G'/G) a - grad U) dt."""
    kind = params.cost_weight if weight is None else weight
    dt = params.dt
    rate = damping_rate(kind, state.t, params.gamma)
    g = np.asarray(gradient_fn(state.s), dtype=float)
    return PhaseState(state.s + state.a * dt, state.a + (-rate * state.a - g) * dt, state.t + dt)


def pmp_deterministic_step(state, params, gradient_fn) -> PhaseState:
    return weighted_step(state, params, gradient_fn, "exp")


def langevin_step(state, params, gradient_fn, noise_source: NoiseSource) -> PhaseState:
    """Euler-Maruyama: s += a dt; a += (-gamma a - grad U) dt - K sqrt(dt) xi."""
    det = weighted_step(state, params, gradient_fn, "exp")
    xi = noise_source.normal(state.a.size)
    kick = params.noise_scale * math.sqrt(params.dt) * xi
    return PhaseState(det.s, det.a - kick, det.t)


def nesterov_step(state, params, gradient_fn, t_min: float = NESTEROV_T_MIN) -> PhaseState:
    if state.t < t_min:
        raise ValueError(f"nesterov dynamics need t >= t_min={t_min}; got t={state.t}")
    return weighted_step(state, params, gradient_fn, "cubic")


def exploration_adjusted_step(state, params, gradient_fn, noise_source: NoiseSource,
                              potential_fn: Callable[[np.ndarray], float]) -> PhaseState:
    """Noise moved onto the position with amplitude exp(-U(s)); velocity stays deterministic."""
    dt = params.dt
    U = max(float(potential_fn(state.s)), POTENTIAL_CLAMP)
    g = np.asarray(gradient_fn(state.s), dtype=float)
    xi = noise_source.normal(state.s.size)
    s_new = state.s + state.a * dt + math.exp(-U) * math.sqrt(dt) * xi
    a_new = state.a + (-params.gamma * state.a - g) * dt
    return PhaseState(s_new, a_new, state.t + dt)


def leapfrog_step(state, params, gradient_fn) -> PhaseState:
    """Velocity Verlet for the conservative case (gamma = 0, K = 0)."""
    if params.gamma != 0 or params.noise_scale != 0:
        raise ValueError("leapfrog_step is only defined for gamma = 0 and noise_scale = 0")
    dt = params.dt
    a_half = state.a - 0.5 * dt * np.asarray(gradient_fn(state.s), dtype=float)
    s_new = state.s + dt * a_half
    a_new = a_half - 0.5 * dt * np.asarray(gradient_fn(s_new), dtype=float)
    return PhaseState(s_new, a_new, state.t + dt)


# ---------------------------------------------------------------------------
# trajectories on a molecule


@dataclass
class Trajectory:
    states: list = field(default_factory=list)
    energies: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    aborted: bool = False
    error: str | None = None

    def __len__(self):
        return len(self.states)

    @property
    def potential(self) -> np.ndarray:
        return np.array([e.total for e in self.energies])

    @property
    def hamiltonian(self) -> np.ndarray:
        return np.array([hamiltonian(e.total, st.a) for st, e in zip(self.states, self.energies)])


def simulate(top: MolecularTopology, conf0: Conformation, a0, params: DynamicsParams,
             family: str = "pmp", seed=0) -> Trajectory:
    """Integrate one of the dynamics families from ``conf0`` up to ``params.horizon``.

    A singularity (clashing atoms) stops the run; the partial trajectory is
    returned with ``aborted`` set.
    """
    if family not in FAMILIES:
        raise ValueError(f"family must be one of {FAMILIES}")
    noise = NoiseSource(seed)

    def gradient(s):
        return torsion_gradient(top, Conformation.build(top, s))

    def energy(s) -> EnergyBreakdown:
        return energy_of_coords(top, rebuild_cartesian(top, np.asarray(wrap_angle(s)).reshape(-1)))

    def potential(s):
        return energy(s).total

    t0 = NESTEROV_T_MIN if family == "nesterov" else 0.0
    mode = "cubic" if family == "nesterov" else "exp"
    state = PhaseState(conf0.torsions.copy(), np.asarray(a0, dtype=float), t0)
    n_steps = int(round(params.horizon / params.dt))
    T = max(params.horizon, params.dt)
    traj = Trajectory()

    def record(st):
        e = energy(st.s)
        traj.states.append(st)
        traj.energies.append(e)
        traj.rewards.append(running_reward(e.total, st.a, st.t, T, params.gamma, mode))

    try:
        record(state)
        for _ in range(n_steps):
            if family == "pmp":
                state = pmp_deterministic_step(state, params, gradient)
            elif family == "langevin":
                state = langevin_step(state, params, gradient, noise)
            elif family == "nesterov":
                state = nesterov_step(state, params, gradient)
            else:
                state = exploration_adjusted_step(state, params, gradient, noise, potential)
            record(state)
    except SingularityError as exc:
        traj.aborted = True
        traj.error = str(exc)
    return traj


def write_trajectory_csv(traj: Trajectory, path, include_torsions: bool = False) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        m = traj.states[0].s.size if traj.states else 0
        header = ["t", "U", "H", "speed", "reward"]
        if include_torsions:
            header += [f"d{j}" for j in range(m)]
        w.writerow(header)
        for st, e, r in zip(traj.states, traj.energies, traj.rewards):
            row = [repr(st.t), repr(e.total), repr(hamiltonian(e.total, st.a)),
                   repr(float(np.linalg.norm(st.a))), repr(r)]
            if include_torsions:
                row += [repr(float(v)) for v in np.asarray(wrap_angle(st.s)).reshape(-1)]
            w.writerow(row)
