"""Deterministic actor-critic training (DDPG) on the envelope-tuning task.

Actions are absolute strength offsets from the nominal lattice settings,
saturated per magnet; the observation is the flattened envelope profile.
A failed integration yields the failure reward, terminates the episode,
and leaves the magnets at the last feasible setting.

Training follows a three-phase curriculum: group-wise actuation with the
rest of the magnets at nominal, then all magnets with a fixed incoming
beam, then all magnets with the incoming beam randomized per episode.
Phase transitions require both a minimum episode budget and a reward
saturation test.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .kv import BeamInit, Lattice, integrate, observe
from .nets import (
    AdamState,
    Mlp,
    adam_step,
    backward_from_cache,
    forward,
    forward_with_cache,
    load_arrays,
    mlp_from_arrays,
    mlp_init,
    mlp_to_arrays,
    polyak,
    save_arrays,
)
from .reward import RewardConfig, failure_reward, penalty


class TrainingDivergedError(RuntimeError):
    """Raised when the IVP failure rate makes further training pointless."""


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    done: int


class ReplayBuffer:
    """Fixed-capacity ring store with uniform sampling."""

    def __init__(self, capacity: int, obs_dim: int, act_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._s = np.empty((capacity, obs_dim))
        self._a = np.empty((capacity, act_dim))
        self._r = np.empty(capacity)
        self._s2 = np.empty((capacity, obs_dim))
        self._d = np.empty(capacity)
        self._idx = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def push(self, tr: Transition) -> None:
        i = self._idx
        self._s[i] = tr.s
        self._a[i] = tr.a
        self._r[i] = tr.r
        self._s2[i] = tr.s_next
        self._d[i] = tr.done
        self._idx = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def sample(self, rng: np.random.Generator, batch: int) -> dict[str, np.ndarray]:
        if self._size < batch:
            raise ValueError(f"buffer holds {self._size} transitions, need {batch}")
        idx = rng.integers(0, self._size, size=batch)
        return {
            "s": self._s[idx],
            "a": self._a[idx],
            "r": self._r[idx],
            "s2": self._s2[idx],
            "d": self._d[idx],
        }


@dataclass(frozen=True)
class DdpgConfig:
    """Hyperparameters; the defaults follow the accelerator training setup."""

    gamma: float = 0.99
    tau: float = 0.005
    noise_sigma: float = 0.1
    batch: int = 128
    actor_lr: float = 1e-5
    critic_lr: float = 1e-4
    buffer_capacity: int = 1_000_000
    actor_hidden: tuple[int, ...] = (512, 512, 512)
    critic_hidden: tuple[int, ...] = (512, 512, 512)
    action_limit_frac: float = 0.5
    horizon: int = 50
    warmup_factor: int = 10
    updates_per_step: int = 1

    def __post_init__(self) -> None:
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if self.batch < 1 or self.horizon < 1:
            raise ValueError("batch and horizon must be positive")


@dataclass
class AgentBundle:
    actor: Mlp
    critic: Mlp
    target_actor: Mlp
    target_critic: Mlp
    actor_opt: AdamState
    critic_opt: AdamState
    action_low: np.ndarray
    action_high: np.ndarray
    gamma: float
    tau: float
    noise_sigma: float
    batch: int

    @property
    def obs_dim(self) -> int:
        return self.actor.n_in

    @property
    def act_dim(self) -> int:
        return self.actor.n_out


def make_bundle(
    obs_dim: int,
    action_high: np.ndarray,
    cfg: DdpgConfig,
    rng: np.random.Generator,
) -> AgentBundle:
    """Fresh actor/critic pair with shape-identical Polyak targets.

    Action bounds are symmetric offsets; the actor's tanh output scale
    equals `action_high`, so raw policy outputs already respect the
    limits. The final actor layer starts near zero so episode-0 actions
    sit at the nominal settings.
    """
    action_high = np.asarray(action_high, dtype=float)
    act_dim = action_high.shape[0]
    actor = mlp_init(
        (obs_dim, *cfg.actor_hidden, act_dim),
        rng,
        output_scale=action_high,
        final_init_scale=1e-3,
    )
    critic = mlp_init((obs_dim + act_dim, *cfg.critic_hidden, 1), rng)
    return AgentBundle(
        actor=actor,
        critic=critic,
        target_actor=actor.copy(),
        target_critic=critic.copy(),
        actor_opt=AdamState.for_params(actor.params(), cfg.actor_lr),
        critic_opt=AdamState.for_params(critic.params(), cfg.critic_lr),
        action_low=-action_high,
        action_high=action_high,
        gamma=cfg.gamma,
        tau=cfg.tau,
        noise_sigma=cfg.noise_sigma,
        batch=cfg.batch,
    )


def critic_update(bundle: AgentBundle, minibatch: dict[str, np.ndarray]) -> float:
    """One Adam step on the critic toward the TD targets; returns pre-step loss."""
    s, a, r, s2, d = (minibatch[k] for k in ("s", "a", "r", "s2", "d"))
    n = len(r)
    a2 = forward(bundle.target_actor, s2)
    q2 = forward(bundle.target_critic, np.hstack([s2, a2]))[:, 0]
    y = r + bundle.gamma * (1.0 - d) * q2

    q, cache = forward_with_cache(bundle.critic, np.hstack([s, a]))
    err = q[:, 0] - y
    loss = float(np.mean(err**2))
    upstream = (2.0 * err / n)[:, None]
    grads, _ = backward_from_cache(bundle.critic, cache, upstream)
    adam_step(bundle.critic.params(), grads, bundle.critic_opt)
    return loss


def actor_update(bundle: AgentBundle, minibatch: dict[str, np.ndarray]) -> float:
    """Ascend mean Q(s, mu(s)) through the frozen critic; returns the estimate."""
    s = minibatch["s"]
    n = s.shape[0]
    a, actor_cache = forward_with_cache(bundle.actor, s)
    q, critic_cache = forward_with_cache(bundle.critic, np.hstack([s, a]))
    objective = float(np.mean(q[:, 0]))

    upstream = np.full((n, 1), 1.0 / n)
    _, dinput = backward_from_cache(bundle.critic, critic_cache, upstream)
    dq_da = dinput[:, bundle.obs_dim :]
    grads, _ = backward_from_cache(bundle.actor, actor_cache, dq_da)
    adam_step(bundle.actor.params(), [-g for g in grads], bundle.actor_opt)
    return objective


def polyak_update(bundle: AgentBundle) -> None:
    polyak(bundle.target_actor.params(), bundle.actor.params(), bundle.tau)
    polyak(bundle.target_critic.params(), bundle.critic.params(), bundle.tau)


def env_step(
    lattice: Lattice,
    reward_cfg: RewardConfig,
    q_current: np.ndarray,
    action: np.ndarray,
    init: BeamInit,
    *,
    action_low: np.ndarray,
    action_high: np.ndarray,
    active_mask: np.ndarray | None = None,
    obs_current: np.ndarray | None = None,
) -> tuple[Transition, np.ndarray]:
    """Apply saturated offsets from nominal, integrate, and score.

    `action` is an offset vector from the nominal strengths; inactive
    magnets (mask 0) stay at nominal. On an infeasible integration the
    transition carries the failure reward with done=1 and the magnets
    revert to `q_current`, the last feasible setting.

    `obs_current` (the observation at `q_current`) is integrated on
    demand when not supplied.
    """
    offset = np.clip(np.asarray(action, dtype=float), action_low, action_high)
    if active_mask is not None:
        offset = offset * active_mask
    q_cmd = lattice.nominal_strengths() + offset

    if obs_current is None:
        ref = integrate(lattice, q_current, init)
        obs_current = observe(ref)

    traj = integrate(lattice, q_cmd, init)
    if traj.feasible:
        tr = Transition(
            s=obs_current,
            a=offset,
            r=penalty(traj, reward_cfg).R,
            s_next=observe(traj),
            done=0,
        )
        return tr, q_cmd
    tr = Transition(
        s=obs_current,
        a=offset,
        r=failure_reward(reward_cfg),
        s_next=obs_current,
        done=1,
    )
    return tr, q_current


def default_groups(n_magnets: int = 22, sizes: Sequence[int] = (4, 3, 3, 3, 3, 3, 3)) -> tuple[tuple[int, ...], ...]:
    """Contiguous magnet groups in beamline order, 1-based indices."""
    if sum(sizes) != n_magnets:
        raise ValueError(f"group sizes {tuple(sizes)} do not sum to {n_magnets}")
    groups = []
    start = 1
    for s in sizes:
        groups.append(tuple(range(start, start + s)))
        start += s
    return tuple(groups)


@dataclass(frozen=True)
class CurriculumPlan:
    """Phase structure: seven group segments, then full, then randomized."""

    groups: tuple[tuple[int, ...], ...] = field(default_factory=default_groups)
    min_episodes: int = 500
    saturation_window: int = 50
    saturation_threshold: float = 0.01
    max_episodes: int | None = None
    phase3_envelope_range: tuple[float, float] = (1.5e-3, 4.5e-3)
    phase3_slope_range: tuple[float, float] = (-1e-2, 1e-2)

    def validate(self, n_magnets: int) -> None:
        seen: list[int] = []
        for g in self.groups:
            if len(g) == 0:
                raise ValueError("empty magnet group")
            if list(g) != list(range(g[0], g[0] + len(g))):
                raise ValueError(f"group {g} is not contiguous")
            seen.extend(g)
        if sorted(seen) != list(range(1, n_magnets + 1)):
            raise ValueError(
                f"groups {self.groups} do not partition 1..{n_magnets}"
            )
        if self.min_episodes < 1:
            raise ValueError("min_episodes must be positive")
        if self.saturation_window < 1:
            raise ValueError("saturation_window must be positive")
        if self.max_episodes is not None and self.max_episodes < 1:
            raise ValueError("max_episodes must be positive when set")


def saturated(rewards: Sequence[float], window: int, threshold: float) -> bool:
    """Moving-average improvement below threshold across adjacent windows."""
    if len(rewards) < 2 * window:
        return False
    last = float(np.mean(rewards[-window:]))
    prev = float(np.mean(rewards[-2 * window : -window]))
    denom = max(abs(prev), 1e-12)
    return (last - prev) / denom < threshold


@dataclass(frozen=True)
class EnvSetup:
    """Environment side of training: lattice, reward, beam, episode length."""

    lattice: Lattice
    reward_cfg: RewardConfig
    init: BeamInit
    horizon: int = 50


@dataclass
class TrainResult:
    curves: list[dict]
    checkpoints: dict[str, str]
    episodes_run: int


def _group_mask(n: int, group: tuple[int, ...] | None) -> np.ndarray | None:
    if group is None:
        return None
    mask = np.zeros(n)
    for i in group:
        mask[i - 1] = 1.0
    return mask


def train(
    plan: CurriculumPlan,
    bundle: AgentBundle,
    env: EnvSetup,
    seed: int,
    *,
    cfg: DdpgConfig,
    log: Callable[[dict], None] | None = None,
    checkpoint_path: Callable[[str], str] | None = None,
    start_episode: int = 0,
) -> TrainResult:
    """Run the three-phase curriculum and return curves plus checkpoints.

    Segments: one per Phase-I group (others at nominal), Phase II (all
    magnets, fixed beam), Phase III (all magnets, randomized beam).
    Actor-critic parameters carry across segments. Aborts when more than
    half of any 100 consecutive episodes fail the IVP.
    """
    n_mag = env.lattice.n_magnets
    plan.validate(n_mag)
    rng = np.random.default_rng(seed)
    buffer = ReplayBuffer(cfg.buffer_capacity, bundle.obs_dim, bundle.act_dim)
    warmup = cfg.warmup_factor * cfg.batch

    q_nominal = env.lattice.nominal_strengths()
    nominal_traj = integrate(env.lattice, q_nominal, env.init)
    if not nominal_traj.feasible:
        raise ValueError("nominal lattice must integrate feasibly before training")

    segments: list[tuple[str, tuple[int, ...] | None, bool]] = [
        (f"I.{gi + 1}", g, False) for gi, g in enumerate(plan.groups)
    ]
    segments.append(("II", None, False))
    segments.append(("III", None, True))

    curves: list[dict] = []
    checkpoints: dict[str, str] = {}
    fail_window: deque[int] = deque(maxlen=100)
    episode = start_episode

    for label, group, randomize in segments:
        mask = _group_mask(n_mag, group)
        seg_rewards: list[float] = []
        while True:
            if randomize:
                lo, hi = plan.phase3_envelope_range
                slo, shi = plan.phase3_slope_range
                init = BeamInit(
                    X0=rng.uniform(lo, hi),
                    Y0=rng.uniform(lo, hi),
                    Xp0=rng.uniform(slo, shi),
                    Yp0=rng.uniform(slo, shi),
                )
            else:
                init = env.init

            rewards: list[float] = []
            closses: list[float] = []
            aobjs: list[float] = []
            failed = 0
            ep_traj = integrate(env.lattice, q_nominal, init)
            if not ep_traj.feasible:
                # randomized beam start that fails even at nominal settings
                failed = 1
                rewards.append(failure_reward(env.reward_cfg))
            else:
                obs = observe(ep_traj)
                q = q_nominal.copy()
                for _ in range(env.horizon):
                    a = forward(bundle.actor, obs)
                    a = a + rng.normal(0.0, bundle.noise_sigma, bundle.act_dim)
                    tr, q = env_step(
                        env.lattice,
                        env.reward_cfg,
                        q,
                        a,
                        init,
                        action_low=bundle.action_low,
                        action_high=bundle.action_high,
                        active_mask=mask,
                        obs_current=obs,
                    )
                    buffer.push(tr)
                    obs = tr.s_next
                    rewards.append(tr.r)
                    if len(buffer) >= warmup:
                        for _ in range(cfg.updates_per_step):
                            closses.append(critic_update(bundle, buffer.sample(rng, cfg.batch)))
                            aobjs.append(actor_update(bundle, buffer.sample(rng, cfg.batch)))
                            polyak_update(bundle)
                    if tr.done:
                        failed = 1
                        break

            episode += 1
            mean_r = float(np.mean(rewards))
            seg_rewards.append(mean_r)
            fail_window.append(failed)
            record = {
                "episode": episode,
                "phase": label,
                "mean_reward": mean_r,
                "critic_loss": float(np.mean(closses)) if closses else math.nan,
                "actor_objective": float(np.mean(aobjs)) if aobjs else math.nan,
                "failed": failed,
            }
            curves.append(record)
            if log is not None:
                log(record)

            if len(fail_window) == 100 and sum(fail_window) > 50:
                raise TrainingDivergedError(
                    f"{sum(fail_window)} of the last 100 episodes failed the IVP "
                    f"(segment {label}); check actuator limits and lattice calibration"
                )

            n_seg = len(seg_rewards)
            if plan.max_episodes is not None and n_seg >= plan.max_episodes:
                break
            if n_seg >= plan.min_episodes and saturated(
                seg_rewards, plan.saturation_window, plan.saturation_threshold
            ):
                break

        if checkpoint_path is not None:
            path = checkpoint_path(label)
            save_bundle(path, bundle, meta={"phase": label, "episode": episode, "seed": seed})
            checkpoints[label] = str(path)

    return TrainResult(curves=curves, checkpoints=checkpoints, episodes_run=episode - start_episode)


# --- persistence ------------------------------------------------------------


def save_bundle(path, bundle: AgentBundle, meta: dict | None = None) -> None:
    arrays: dict[str, np.ndarray] = {}
    arrays.update(mlp_to_arrays(bundle.actor, "actor."))
    arrays.update(mlp_to_arrays(bundle.critic, "critic."))
    arrays.update(mlp_to_arrays(bundle.target_actor, "target_actor."))
    arrays.update(mlp_to_arrays(bundle.target_critic, "target_critic."))
    arrays["action_high"] = bundle.action_high
    for name, opt in (("actor_opt", bundle.actor_opt), ("critic_opt", bundle.critic_opt)):
        for i, (m, v) in enumerate(zip(opt.m, opt.v)):
            arrays[f"{name}.m{i}"] = m
            arrays[f"{name}.v{i}"] = v
    full_meta = dict(meta or {})
    full_meta.update(
        {
            "actor_layer_sizes": list(bundle.actor.layer_sizes),
            "critic_layer_sizes": list(bundle.critic.layer_sizes),
            "gamma": bundle.gamma,
            "tau": bundle.tau,
            "noise_sigma": bundle.noise_sigma,
            "batch": bundle.batch,
            "actor_lr": bundle.actor_opt.learning_rate,
            "critic_lr": bundle.critic_opt.learning_rate,
            "adam_steps": {"actor": bundle.actor_opt.step, "critic": bundle.critic_opt.step},
        }
    )
    save_arrays(path, arrays, full_meta)


def load_bundle(path) -> tuple[AgentBundle, dict]:
    arrays, meta = load_arrays(path)
    actor = mlp_from_arrays(arrays, tuple(meta["actor_layer_sizes"]), "actor.")
    critic = mlp_from_arrays(arrays, tuple(meta["critic_layer_sizes"]), "critic.")
    t_actor = mlp_from_arrays(arrays, tuple(meta["actor_layer_sizes"]), "target_actor.")
    t_critic = mlp_from_arrays(arrays, tuple(meta["critic_layer_sizes"]), "target_critic.")
    action_high = arrays["action_high"]
    actor_opt = AdamState.for_params(actor.params(), meta["actor_lr"])
    critic_opt = AdamState.for_params(critic.params(), meta["critic_lr"])
    for name, opt in (("actor_opt", actor_opt), ("critic_opt", critic_opt)):
        for i in range(len(opt.m)):
            opt.m[i] = arrays[f"{name}.m{i}"].copy()
            opt.v[i] = arrays[f"{name}.v{i}"].copy()
    steps = meta.get("adam_steps", {})
    actor_opt.step = int(steps.get("actor", 0))
    critic_opt.step = int(steps.get("critic", 0))
    bundle = AgentBundle(
        actor=actor,
        critic=critic,
        target_actor=t_actor,
        target_critic=t_critic,
        actor_opt=actor_opt,
        critic_opt=critic_opt,
        action_low=-action_high,
        action_high=action_high,
        gamma=float(meta["gamma"]),
        tau=float(meta["tau"]),
        noise_sigma=float(meta["noise_sigma"]),
        batch=int(meta["batch"]),
    )
    return bundle, meta


class RuntimePolicy:
    """Frozen actor: o(t) -> sat(mu(o(t))). The critic is never loaded."""

    def __init__(self, actor: Mlp, action_low: np.ndarray, action_high: np.ndarray):
        self.actor = actor
        self.action_low = action_low
        self.action_high = action_high

    def __call__(self, obs: np.ndarray) -> np.ndarray:
        return np.clip(forward(self.actor, obs), self.action_low, self.action_high)


def runtime_policy(checkpoint_path) -> RuntimePolicy:
    """Load only the actor arrays from a bundle checkpoint."""
    arrays, meta = load_arrays(checkpoint_path)
    actor = mlp_from_arrays(arrays, tuple(meta["actor_layer_sizes"]), "actor.")
    action_high = arrays["action_high"]
    return RuntimePolicy(actor, -action_high, action_high)
