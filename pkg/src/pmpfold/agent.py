"""Torsion-space folding environment and the soft actor-critic trainer.

Each environment step moves every torsion by ``step_size * velocity``,
rebuilds the Cartesian coordinates, evaluates the potential at the new
configuration and pays

    r_t = w(t) (|velocity|^2 / 2 - U_t),   w = exp(gamma t / T) or (t / T)^3

Episodes end after ``max_episode_steps`` steps or when two atoms collide.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .dynamics import running_reward
from .energy import EnergyBreakdown, total_energy
from .errors import PmpFoldError, SingularityError
from .kinematics import Conformation, apply_action
from .learn import (
    AdamState,
    Graph,
    GaussianPolicy,
    MlpParams,
    adam_step,
    deterministic_action,
    forward,
    named_arrays,
    policy_sample,
    torsion_features,
)
from .topology import MolecularTopology

SINGULARITY_REWARD = -1.0e3
RESET_ATTEMPTS = 50

# (phi, psi) basin centres in degrees and their von Mises concentration
RAMACHANDRAN_BASINS = ((-60.0, -45.0), (-120.0, 130.0))
RAMACHANDRAN_KAPPA = 8.0
RAMACHANDRAN_UNIFORM = 0.10
ROTAMER_CENTRES = (-60.0, 60.0, 180.0)
ROTAMER_KAPPA = 20.0


@dataclass(frozen=True)
class SacConfig:
    alpha: float = 0.2
    discount: float = 1.0
    discount_threshold: float = 100.0
    use_discount_threshold: bool = False
    max_episode_steps: int = 300
    max_total_steps: int = 100_000
    step_size: float = 0.5
    lr: float = 3e-4
    tau: float = 0.005
    batch_size: int = 256
    gamma_reward: float = 1.0
    reward_mode: str = "exp"
    reward_horizon: float | None = None
    warmup_steps: int = 1000
    buffer_capacity: int = 1_000_000
    hidden: tuple = (128, 128)
    max_velocity: float = 1.0
    auto_alpha: bool = False
    target_entropy: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        positive = ("max_episode_steps", "step_size", "lr", "batch_size", "buffer_capacity",
                    "max_velocity", "discount_threshold")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_total_steps < 0 or self.warmup_steps < 0:
            raise ValueError("step counts must be non-negative")
        if not 0 < self.tau <= 1:
            raise ValueError("tau must lie in (0, 1]")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if not 0 <= self.discount <= 1:
            raise ValueError("discount must lie in [0, 1]")
        if self.reward_mode not in ("exp", "cubic"):
            raise ValueError("reward_mode must be 'exp' or 'cubic'")
        if self.reward_horizon is not None and not self.reward_horizon > 0:
            raise ValueError("reward_horizon must be positive")

    @property
    def horizon(self) -> float:
        """T in the reward weight; defaults to the episode length."""
        return float(self.reward_horizon or self.max_episode_steps)

    @property
    def t_cap(self) -> float | None:
        if not self.use_discount_threshold:
            return None
        return self.discount_threshold * self.horizon / self.max_episode_steps

    def to_dict(self) -> dict:
        out = asdict(self)
        out["hidden"] = list(self.hidden)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "SacConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown SAC settings: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# replay


@dataclass
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    terminal: bool
    t: int


@dataclass
class Batch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    terminal: np.ndarray
    t: np.ndarray

    def __len__(self):
        return len(self.r)


class ReplayBuffer:
    """Fixed-capacity ring buffer with uniform sampling."""

    def __init__(self, capacity: int, dim: int):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.dim = dim
        self.s = np.zeros((capacity, dim))
        self.a = np.zeros((capacity, dim))
        self.r = np.zeros(capacity)
        self.s_next = np.zeros((capacity, dim))
        self.terminal = np.zeros(capacity, dtype=bool)
        self.t = np.zeros(capacity, dtype=np.int64)
        self.size = 0
        self._head = 0

    def __len__(self):
        return self.size

    def add(self, tr: Transition) -> None:
        if len(tr.s) != self.dim or len(tr.a) != self.dim or len(tr.s_next) != self.dim:
            raise ValueError("transition vectors must have length M")
        k = self._head
        self.s[k], self.a[k], self.r[k] = tr.s, tr.a, tr.r
        self.s_next[k], self.terminal[k], self.t[k] = tr.s_next, tr.terminal, tr.t
        self._head = (k + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(0, self.size, size=batch_size)
        return Batch(self.s[idx], self.a[idx], self.r[idx], self.s_next[idx],
                     self.terminal[idx], self.t[idx])

    def transitions(self):
        for k in range(self.size):
            yield Transition(self.s[k].copy(), self.a[k].copy(), float(self.r[k]),
                             self.s_next[k].copy(), bool(self.terminal[k]), int(self.t[k]))


# ---------------------------------------------------------------------------
# networks


@dataclass
class TwinCritics:
    q1: MlpParams
    q2: MlpParams
    q1_target: MlpParams
    q2_target: MlpParams

    @classmethod
    def init(cls, state_dim, action_dim, hidden, rng) -> "TwinCritics":
        sizes = [state_dim + action_dim, *hidden, 1]
        q1 = MlpParams.init(sizes, rng)
        q2 = MlpParams.init(sizes, rng)
        return cls(q1, q2, q1.copy(), q2.copy())

    def q_values(self, feats, actions, graph: Graph, which=("q1", "q2"), register=False):
        """Q(s, a) nodes of shape (B,) for the named networks."""
        if not hasattr(actions, "graph"):
            actions = graph.constant(actions)
        inputs = graph.concat([graph.constant(feats), actions], axis=1)
        return [
            graph.sum(forward(getattr(self, name), inputs, graph, name if register else None), axis=1)
            for name in which
        ]


@dataclass
class Agent:
    policy: GaussianPolicy
    critics: TwinCritics
    log_alpha: float
    policy_opt: AdamState = field(default_factory=AdamState)
    critic_opt: AdamState = field(default_factory=AdamState)
    alpha_opt: AdamState = field(default_factory=AdamState)

    @classmethod
    def init(cls, n_torsions: int, config: SacConfig, rng) -> "Agent":
        state_dim = 2 * n_torsions
        policy = GaussianPolicy.init(state_dim, n_torsions, config.hidden, rng)
        critics = TwinCritics.init(state_dim, n_torsions, config.hidden, rng)
        return cls(policy, critics, math.log(config.alpha) if config.alpha > 0 else -math.inf)

    @property
    def alpha(self) -> float:
        return math.exp(self.log_alpha)

    def checkpoint(self) -> dict:
        out = {}
        out.update(named_arrays("policy", self.policy.trunk))
        for name in ("q1", "q2", "q1_target", "q2_target"):
            out.update(named_arrays(name, getattr(self.critics, name)))
        out["log_alpha"] = np.array(self.log_alpha)
        return {k: np.array(v, copy=True) for k, v in out.items()}

    @classmethod
    def from_checkpoint(cls, arrays: dict) -> "Agent":
        def net(prefix):
            return MlpParams.from_arrays(
                {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith(prefix + "/")}
            )

        trunk = net("policy")
        policy = GaussianPolicy(trunk, trunk.sizes[-1] // 2)
        critics = TwinCritics(net("q1"), net("q2"), net("q1_target"), net("q2_target"))
        return cls(policy, critics, float(arrays["log_alpha"]))


# ---------------------------------------------------------------------------
# environment


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def sample_reset_torsions(top: MolecularTopology, rng: np.random.Generator) -> np.ndarray:
    """Draw backbone torsions from the two-basin Ramachandran mixture and
    rotamer torsions around the staggered positions.

    Backbone torsions are taken pairwise in index order as (phi, psi); an odd
    one out is drawn as a phi.
    """
    out = np.empty(top.n_torsions)
    backbone = [j for j, k in enumerate(top.torsion_kinds) if k == "backbone_dihedral"]
    for p in range(0, len(backbone), 2):
        pair = backbone[p : p + 2]
        if rng.random() < RAMACHANDRAN_UNIFORM:
            vals = rng.uniform(-math.pi, math.pi, size=2)
        else:
            centre = RAMACHANDRAN_BASINS[rng.integers(len(RAMACHANDRAN_BASINS))]
            vals = rng.vonmises(np.radians(centre), RAMACHANDRAN_KAPPA)
        out[pair] = vals[: len(pair)]
    for j, kind in enumerate(top.torsion_kinds):
        if kind == "rotamer":
            centre = math.radians(ROTAMER_CENTRES[rng.integers(len(ROTAMER_CENTRES))])
            out[j] = rng.vonmises(centre, ROTAMER_KAPPA)
    return out


def env_reset(top: MolecularTopology, sampler_seed=None) -> Conformation:
    rng = _rng(sampler_seed)
    if top.n_torsions == 0:
        return Conformation.build(top)
    for _ in range(RESET_ATTEMPTS):
        conf = Conformation.build(top, sample_reset_torsions(top, rng))
        try:
            total_energy(top, conf)
        except SingularityError:
            continue
        return conf
    raise SingularityError(f"no clash-free reset in {RESET_ATTEMPTS} draws")


@dataclass
class StepResult:
    conf: Conformation
    reward: float
    terminal: bool
    info: EnergyBreakdown | None


def env_step(top: MolecularTopology, conf: Conformation, velocity, config: SacConfig,
             t: int = 0) -> StepResult:
    """Apply one torsion-velocity action taken at episode step ``t``."""
    velocity = np.asarray(velocity, dtype=float)
    nxt = Conformation.build(top, apply_action(conf.torsions, velocity, config.step_size))
    terminal = t + 1 >= config.max_episode_steps
    try:
        info = total_energy(top, nxt)
    except SingularityError:
        return StepResult(nxt, SINGULARITY_REWARD, True, None)
    reward = running_reward(info.total, velocity, t, config.horizon, config.gamma_reward,
                            config.reward_mode, config.t_cap)
    return StepResult(nxt, reward, terminal, info)


# ---------------------------------------------------------------------------
# SAC updates


def q_target(batch: Batch, critics: TwinCritics, policy: GaussianPolicy, config: SacConfig,
             rng=None, alpha: float | None = None, noise=None) -> np.ndarray:
    """y = r + discount (1 - terminal) (min Q_target(s', a') - alpha log pi(a'|s'))."""
    alpha = config.alpha if alpha is None else alpha
    feats = torsion_features(batch.s_next)
    if noise is None:
        noise = _rng(rng).standard_normal((len(batch), policy.action_dim))
    g = Graph()
    a_next, logp = policy_sample(policy, feats, noise, g)
    q1, q2 = critics.q_values(feats, a_next.value, g, which=("q1_target", "q2_target"))
    soft_v = np.minimum(q1.value, q2.value) - alpha * logp.value
    return batch.r + config.discount * (1.0 - batch.terminal) * soft_v


def critic_loss(batch: Batch, critics: TwinCritics, targets):
    g = Graph()
    q1, q2 = critics.q_values(torsion_features(batch.s), batch.a, g, register=True)
    y = g.constant(targets)
    loss = g.add(g.mean(g.square(g.add(q1, g.neg(y)))), g.mean(g.square(g.add(q2, g.neg(y)))))
    loss = g.mul(loss, g.constant(0.5))
    return g, loss


def update_critics(batch: Batch, critics: TwinCritics, targets, optimizer: AdamState,
                   lr: float = 3e-4) -> float:
    """One Adam step on 1/2 mean (Q_i - y)^2 summed over both critics; returns the pre-step loss."""
    g, loss = critic_loss(batch, critics, targets)
    grads = g.backward(loss)
    params = {**named_arrays("q1", critics.q1), **named_arrays("q2", critics.q2)}
    adam_step(params, grads, lr, optimizer)
    return float(loss.value)


def policy_objective(batch: Batch, critics, policy: GaussianPolicy, alpha: float, noise):
    """J = mean(alpha log pi(f(eps; s)|s) - min_i Q_i(s, f(eps; s)))."""
    g = Graph()
    feats = torsion_features(batch.s)
    action, logp = policy_sample(policy, feats, noise, g, prefix="policy")
    q1, q2 = critics.q_values(feats, action, g)
    q = g.minimum(q1, q2)
    loss = g.mean(g.add(g.mul(logp, g.constant(alpha)), g.neg(q)))
    return g, loss, logp


def update_policy(batch: Batch, critics, policy: GaussianPolicy, config: SacConfig,
                  optimizer: AdamState, rng=None, alpha: float | None = None, noise=None):
    """One Adam step on the reparameterised policy objective.

    Returns (pre-step loss, log-probabilities of the sampled actions).
    """
    alpha = config.alpha if alpha is None else alpha
    if noise is None:
        noise = _rng(rng).standard_normal((len(batch), policy.action_dim))
    g, loss, logp = policy_objective(batch, critics, policy, alpha, noise)
    grads = g.backward(loss)
    adam_step(named_arrays("policy", policy.trunk), grads, config.lr, optimizer)
    return float(loss.value), logp.value


def polyak_update(online: MlpParams, target: MlpParams, tau: float) -> MlpParams:
    """target <- tau * online + (1 - tau) * target, in place."""
    for src, dst in zip(online.weights + online.biases, target.weights + target.biases):
        if src.shape != dst.shape:
            raise ValueError(f"shape mismatch {src.shape} vs {dst.shape}")
        dst *= 1.0 - tau
        dst += tau * src
    return target


def update_alpha(agent: Agent, logp, target_entropy: float, lr: float) -> None:
    """Temperature step on -log_alpha * mean(log pi + target_entropy)."""
    grad = -float(np.mean(logp + target_entropy))
    params = {"log_alpha": np.array([agent.log_alpha])}
    adam_step(params, {"log_alpha": np.array([grad])}, lr, agent.alpha_opt)
    agent.log_alpha = float(params["log_alpha"][0])


# ---------------------------------------------------------------------------
# training and evaluation

LOG_COLUMNS = ("step", "episode", "E_initial", "E_final", "delta_E", "cumulative_reward",
               "critic_loss", "policy_loss", "alpha")


@dataclass
class TrainResult:
    log: list
    agent: Agent
    buffer: ReplayBuffer

    @property
    def checkpoints(self) -> dict:
        return self.agent.checkpoint()


def _energy_or_nan(top, conf):
    try:
        return total_energy(top, conf).total
    except SingularityError:
        return math.nan


def train(top: MolecularTopology, config: SacConfig, seed: int = 0, progress=None) -> TrainResult:
    """Soft actor-critic over torsion velocities.

    Observe s_t, sample a_t ~ pi(.|s_t), step the environment, store the
    transition, then (after ``warmup_steps``) take one critic step, one policy
    step and one target update per environment step.  Terminal states trigger
    a reset.  The run is a pure function of (top, config, seed).
    """
    m = top.n_torsions
    if m == 0:
        raise PmpFoldError("no movable torsions")
    rng = np.random.default_rng(seed)
    agent = Agent.init(m, config, rng)
    buffer = ReplayBuffer(min(config.buffer_capacity, max(config.max_total_steps, 1)), m)
    target_entropy = -float(m) if config.target_entropy is None else config.target_entropy
    log = []
    if config.max_total_steps == 0:
        return TrainResult(log, agent, buffer)

    conf = env_reset(top, rng)
    e_initial = _energy_or_nan(top, conf)
    t, episode, ep_reward = 0, 0, 0.0
    c_losses, p_losses = [], []
    last_energy = e_initial

    for step in range(config.max_total_steps):
        g = Graph()
        eps = rng.standard_normal((1, m))
        action, _ = policy_sample(agent.policy, torsion_features(conf.torsions), eps, g)
        action = action.value[0]
        res = env_step(top, conf, action * config.max_velocity, config, t)
        buffer.add(Transition(conf.torsions, action, res.reward, res.conf.torsions, res.terminal, t))
        ep_reward += res.reward
        last_energy = res.info.total if res.info is not None else math.nan

        if step >= config.warmup_steps and len(buffer) >= config.batch_size:
            batch = buffer.sample(config.batch_size, rng)
            alpha = agent.alpha
            y = q_target(batch, agent.critics, agent.policy, config, rng, alpha)
            c_losses.append(update_critics(batch, agent.critics, y, agent.critic_opt, config.lr))
            p_loss, logp = update_policy(batch, agent.critics, agent.policy, config,
                                         agent.policy_opt, rng, alpha)
            p_losses.append(p_loss)
            polyak_update(agent.critics.q1, agent.critics.q1_target, config.tau)
            polyak_update(agent.critics.q2, agent.critics.q2_target, config.tau)
            if config.auto_alpha:
                update_alpha(agent, logp, target_entropy, config.lr)

        conf = res.conf
        t += 1
        if res.terminal:
            log.append({
                "step": step + 1,
                "episode": episode,
                "E_initial": e_initial,
                "E_final": last_energy,
                "delta_E": last_energy - e_initial,
                "cumulative_reward": ep_reward,
                "critic_loss": float(np.mean(c_losses)) if c_losses else math.nan,
                "policy_loss": float(np.mean(p_losses)) if p_losses else math.nan,
                "alpha": agent.alpha,
            })
            if progress is not None:
                progress(log[-1])
            episode += 1
            conf = env_reset(top, rng)
            e_initial = _energy_or_nan(top, conf)
            t, ep_reward = 0, 0.0
            c_losses, p_losses = [], []
    return TrainResult(log, agent, buffer)


@dataclass(frozen=True)
class EvalEpisode:
    seed: int
    E_initial: float
    E_final: float
    cumulative_reward: float
    steps: int

    @property
    def delta_E(self) -> float:
        return self.E_final - self.E_initial


def episode_seeds(seed: int, n: int) -> list:
    """Independent per-episode reset seeds derived from one master seed."""
    if n == 0:
        return []
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n, dtype=np.uint64)]


def evaluate(top: MolecularTopology, checkpoints, episodes: int, seed: int = 0,
             config: SacConfig | None = None) -> list:
    """Roll out the deterministic policy tanh(mu) from fresh resets."""
    config = config or SacConfig()
    agent = checkpoints if isinstance(checkpoints, Agent) else Agent.from_checkpoint(checkpoints)
    out = []
    for ep_seed in episode_seeds(seed, episodes):
        conf = env_reset(top, ep_seed)
        e_initial = total_energy(top, conf).total
        e_final, total = e_initial, 0.0
        steps = 0
        for t in range(config.max_episode_steps):
            action = deterministic_action(agent.policy, torsion_features(conf.torsions))[0]
            res = env_step(top, conf, action * config.max_velocity, config, t)
            total += res.reward
            conf = res.conf
            steps += 1
            e_final = res.info.total if res.info is not None else math.nan
            if res.terminal:
                break
        out.append(EvalEpisode(ep_seed, e_initial, e_final, total, steps))
    return out


def write_training_log(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def write_eval_csv(episodes, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["episode", "seed", "E_initial", "E_final", "delta_E", "cumulative_reward", "steps"])
        for k, ep in enumerate(episodes):
            w.writerow([k, ep.seed, repr(ep.E_initial), repr(ep.E_final), repr(ep.delta_E),
                        repr(ep.cumulative_reward), ep.steps])
