"""PPO training on the single-body prismatic environment.

Each episode places the body on a prismatic joint whose axis lies at a random
heading in the horizontal workplane, starts the hand with a motion direction
offset from the axis, and lets the policy correct the direction for
``episode_len`` steps. The reward is the negated constraint-force magnitude.

Rollouts are collected from many environments at once with numpy; the scalar
:class:`TrainingEnv` exposes the same dynamics one episode at a time.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import geom, world
from .nn import Adam, MlpSpec, PolicyNet, save_weights

log = logging.getLogger(__name__)

WORKPLANE_NORMAL = np.array([0.0, 0.0, 1.0])
LOG_2PI = math.log(2.0 * math.pi)


class NonFiniteLoss(RuntimeError):
    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class NoiseConfig:
    sigma_force_rel: float = 0.05
    sigma_dir_deg: float = 5.0


@dataclass
class TrainConfig:
    episode_len: int = 5
    batch_size: int = 6000
    lr: float = 5e-5
    clip_eps: float = 0.3
    gamma: float = 0.99
    gae_lambda: float = 0.5
    epochs_per_batch: int = 10
    minibatch_size: int = 64
    entropy_coef: float = 0.0
    value_coef: float = 0.5
    reward_scale: float = 0.1
    lr_schedule: str = "constant"  # or "linear": decays to zero at total_steps
    min_std: float = 0.1  # floor on the exploration std; 0 disables
    total_steps: int = 500_000
    seed: int = 0
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    init_offset_range_deg: float = 45.0
    step_len: float = 0.01
    stiffness: float = world.DEFAULT_STIFFNESS
    f_min: float = world.DEFAULT_DEAD_ZONE
    hidden: tuple[int, ...] = (256, 256)

    def validate(self) -> TrainConfig:
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must be in [0, 1), got {self.gamma}")
        if not self.clip_eps > 0:
            raise ValueError("clip_eps must be positive")
        if self.episode_len < 1 or self.batch_size < self.episode_len:
            raise ValueError("batch_size must hold at least one episode")
        if not 0.0 <= self.min_std < 1.0:
            raise ValueError(f"min_std must be in [0, 1), got {self.min_std}")
        if self.lr_schedule not in ("constant", "linear"):
            raise ValueError(f"lr_schedule must be 'constant' or 'linear', got {self.lr_schedule!r}")
        if self.minibatch_size < 1 or self.epochs_per_batch < 1:
            raise ValueError("minibatch_size and epochs_per_batch must be positive")
        if not (self.lr > 0 and self.step_len > 0 and self.stiffness > 0):
            raise ValueError("lr, step_len and stiffness must be positive")
        if self.f_min < 0 or self.init_offset_range_deg < 0:
            raise ValueError("f_min and init_offset_range_deg must be non-negative")
        if self.noise.sigma_force_rel < 0 or self.noise.sigma_dir_deg < 0:
            raise ValueError("noise scales must be non-negative")
        return self

    @property
    def spec(self) -> MlpSpec:
        return MlpSpec(6, tuple(self.hidden), 3)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def observe(force: np.ndarray, d: np.ndarray, f_min: float) -> np.ndarray:
    """Network input ``(F/|F|, d)``; a dead-zoned force enters as zeros.

    The normalized force is rounded to float32 resolution so that the
    observation of ``c * F`` is bit-identical to that of ``F`` for any
    ``c > 0`` (float64 normalization alone differs in the last ulp).
    """
    f = world.dead_zone(force, f_min)
    fbar = np.zeros(3) if f is None else _quantize(f / geom.norm(f))
    return np.concatenate([fbar, d])


def _quantize(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float32).astype(np.float64)


# -- scalar environment ------------------------------------------------------


@dataclass
class TrainingEnv:
    joint: world.JointConstraint
    body: world.BodyState
    d: np.ndarray
    force: np.ndarray
    cfg: TrainConfig
    t: int = 0


def reset_training_env(rng: np.random.Generator, cfg: TrainConfig, offset_deg: float | None = None,
                       heading: float | None = None):
    """Fresh episode; returns ``(env, state0)``.

    ``offset_deg`` and ``heading`` pin the otherwise random initial offset and
    axis heading (radians about the workplane normal).
    """
    if heading is None:
        heading = rng.uniform(0.0, 2.0 * math.pi)
    if offset_deg is None:
        offset_deg = rng.uniform(-cfg.init_offset_range_deg, cfg.init_offset_range_deg)
    axis = np.array([math.cos(heading), math.sin(heading), 0.0])
    joint = world.JointConstraint.prismatic(axis)
    offset = math.radians(offset_deg)
    if cfg.noise.sigma_dir_deg > 0:
        offset += math.radians(rng.normal(0.0, cfg.noise.sigma_dir_deg))
    d0 = geom.rotate_about(axis, WORKPLANE_NORMAL, offset)

    out = world.step(joint, world.initial_state(joint, np.zeros(3)), d0, cfg.step_len, cfg.stiffness)
    force = out.constraint_force.copy()
    if cfg.noise.sigma_force_rel > 0:
        force = force + cfg.noise.sigma_force_rel * geom.norm(force) * rng.normal(size=3)
    env = TrainingEnv(joint=joint, body=out.new_state, d=d0, force=out.constraint_force, cfg=cfg)
    return env, observe(force, d0, cfg.f_min)


def env_step(env: TrainingEnv, action: np.ndarray):
    """Apply a direction correction; returns ``(next_state, reward, done)``."""
    cfg = env.cfg
    action = np.asarray(action, dtype=np.float64)
    if not np.all(np.isfinite(action)):
        raise ValueError("non-finite action")
    env.t += 1
    try:
        d = geom.update_direction(env.d, action)
    except geom.DegenerateUpdate:
        return observe(env.force, env.d, cfg.f_min), -geom.norm(env.force), True
    out = world.step(env.joint, env.body, d, cfg.step_len, cfg.stiffness)
    env.body, env.d, env.force = out.new_state, d, out.constraint_force
    reward = -geom.norm(out.constraint_force)
    return observe(out.constraint_force, d, cfg.f_min), reward, env.t >= cfg.episode_len


# -- vectorized environment --------------------------------------------------


class BatchEnv:
    """``n`` independent prismatic training episodes stepped together."""

    def __init__(self, n: int, cfg: TrainConfig, rng: np.random.Generator):
        self.n, self.cfg, self.rng = n, cfg, rng

    def reset(self) -> np.ndarray:
        cfg, n, rng = self.cfg, self.n, self.rng
        heading = rng.uniform(0.0, 2.0 * math.pi, size=n)
        offset = np.radians(rng.uniform(-cfg.init_offset_range_deg, cfg.init_offset_range_deg, size=n))
        if cfg.noise.sigma_dir_deg > 0:
            offset = offset + np.radians(rng.normal(0.0, cfg.noise.sigma_dir_deg, size=n))
        self.axis = np.stack([np.cos(heading), np.sin(heading), np.zeros(n)], axis=1)
        self.d = np.stack([np.cos(heading + offset), np.sin(heading + offset), np.zeros(n)], axis=1)
        force = self._force(self.d)
        self.force = force
        if cfg.noise.sigma_force_rel > 0:
            mag = np.linalg.norm(force, axis=1, keepdims=True)
            force = force + cfg.noise.sigma_force_rel * mag * rng.normal(size=(n, 3))
        return self._observe(force)

    def _force(self, d: np.ndarray) -> np.ndarray:
        delta = self.cfg.step_len * d
        along = np.sum(delta * self.axis, axis=1, keepdims=True)
        return -self.cfg.stiffness * (delta - along * self.axis)

    def _observe(self, force: np.ndarray) -> np.ndarray:
        mag = np.linalg.norm(force, axis=1, keepdims=True)
        live = (mag > self.cfg.f_min) & (mag > geom.EPS_ZERO)
        fbar = np.where(live, force / np.where(live, mag, 1.0), 0.0)
        return np.concatenate([_quantize(fbar), self.d], axis=1)

    def step(self, actions: np.ndarray):
        """Returns ``(obs, reward, degenerate)``; degenerate rows keep their state."""
        s = self.d + actions
        mag = np.linalg.norm(s, axis=1, keepdims=True)
        degenerate = mag[:, 0] <= geom.EPS_ZERO
        d_new = np.where(degenerate[:, None], self.d, s / np.where(degenerate[:, None], 1.0, mag))
        self.d = d_new
        force = np.where(degenerate[:, None], self.force, self._force(d_new))
        self.force = force
        reward = -np.linalg.norm(force, axis=1)
        return self._observe(force), reward, degenerate


# -- policy distribution -----------------------------------------------------


def gaussian_log_prob(u: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    z = (u - mean) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - 0.5 * LOG_2PI, axis=-1)


def floor_log_std(log_std: np.ndarray, min_std: float) -> np.ndarray:
    return np.maximum(log_std, math.log(min_std)) if min_std > 0 else log_std


def squash_log_prob(u: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    """Log-density of ``tanh(u)`` under the squashed Gaussian."""
    # log(1 - tanh(u)^2) computed stably
    corr = 2.0 * (math.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))
    return gaussian_log_prob(u, mean, log_std) - np.sum(corr, axis=-1)


# -- rollout buffer and advantages -------------------------------------------


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    log_prob: float
    reward: float
    value: float
    done: bool


@dataclass
class RolloutBuffer:
    """Flat, episode-contiguous storage of one batch of transitions.

    ``actions`` hold the pre-squash Gaussian samples; the environment saw
    ``tanh(actions)``.
    """

    states: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.rewards)

    @classmethod
    def from_transitions(cls, transitions: list[Transition]) -> RolloutBuffer:
        return cls(
            states=np.array([t.state for t in transitions]),
            actions=np.array([t.action for t in transitions]),
            log_probs=np.array([t.log_prob for t in transitions]),
            rewards=np.array([t.reward for t in transitions]),
            values=np.array([t.value for t in transitions]),
            dones=np.array([t.done for t in transitions], dtype=bool),
        )


def compute_gae(buf: RolloutBuffer, gamma: float, lam: float, last_value: float = 0.0,
                normalize: bool = True) -> RolloutBuffer:
    """GAE(gamma, lambda) over an episode-contiguous buffer.

    Episodes end at ``done``; their bootstrap value is zero. ``last_value``
    bootstraps a trailing unfinished episode. Returns are ``adv + value``
    before the advantages are normalized.
    """
    n = len(buf)
    adv = np.zeros(n)
    last = 0.0
    for t in reversed(range(n)):
        if buf.dones[t]:
            next_value, last = 0.0, 0.0
        elif t == n - 1:
            next_value = last_value
        else:
            next_value = buf.values[t + 1]
        delta = buf.rewards[t] + gamma * next_value - buf.values[t]
        last = delta + gamma * lam * last
        adv[t] = last
    buf.returns = adv + buf.values
    if normalize and n > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    buf.advantages = adv
    return buf


def collect(net: PolicyNet, params: np.ndarray, env: BatchEnv, cfg: TrainConfig,
            rng: np.random.Generator) -> tuple[RolloutBuffer, np.ndarray]:
    """Run one wave of episodes; returns the buffer and per-episode rewards."""
    T, n = cfg.episode_len, env.n
    obs = env.reset()
    S = np.zeros((T, n, 6))
    U = np.zeros((T, n, 3))
    LP = np.zeros((T, n))
    R = np.zeros((T, n))
    V = np.zeros((T, n))
    alive = np.ones((T, n), dtype=bool)
    done = np.zeros((T, n), dtype=bool)
    running = np.ones(n, dtype=bool)
    for t in range(T):
        fwd = net.forward(params, obs)
        log_std = floor_log_std(fwd.log_std, cfg.min_std)
        u = fwd.mean + np.exp(log_std) * rng.normal(size=fwd.mean.shape)
        S[t], U[t], V[t] = obs, u, fwd.value
        LP[t] = gaussian_log_prob(u, fwd.mean, log_std)
        alive[t] = running
        obs, reward, degenerate = env.step(np.tanh(u))
        R[t] = reward
        ended = degenerate | (t == T - 1)
        done[t] = ended & running
        running = running & ~ended

    # episode-major flattening keeps each episode contiguous for GAE
    order = alive.T.reshape(-1)
    buf = RolloutBuffer(
        states=S.transpose(1, 0, 2).reshape(-1, 6)[order],
        actions=U.transpose(1, 0, 2).reshape(-1, 3)[order],
        log_probs=LP.T.reshape(-1)[order],
        rewards=R.T.reshape(-1)[order],
        values=V.T.reshape(-1)[order],
        dones=done.T.reshape(-1)[order],
    )
    episode_rewards = np.where(alive, R, 0.0).sum(axis=0)
    return buf, episode_rewards


def ppo_loss_grad(net: PolicyNet, params: np.ndarray, buf: RolloutBuffer, idx: np.ndarray,
                  cfg: TrainConfig) -> tuple[float, np.ndarray, dict]:
    """Clipped-surrogate + value + entropy loss and its parameter gradient."""
    s, u = buf.states[idx], buf.actions[idx]
    adv, ret, old_lp = buf.advantages[idx], buf.returns[idx], buf.log_probs[idx]
    m = len(idx)
    fwd = net.forward(params, s)
    log_std = floor_log_std(fwd.log_std, cfg.min_std)
    lp = gaussian_log_prob(u, fwd.mean, log_std)
    ratio = np.exp(lp - old_lp)
    clipped = np.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps)
    surr = np.minimum(ratio * adv, clipped * adv)
    policy_loss = -surr.mean()
    value_err = fwd.value - ret
    value_loss = float(np.mean(value_err**2))
    entropy = float(np.sum(log_std + 0.5 * (LOG_2PI + 1.0)))
    loss = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * entropy

    # the unclipped branch carries gradient; the clipped one is constant
    active = np.where(adv >= 0, ratio <= 1.0 + cfg.clip_eps, ratio >= 1.0 - cfg.clip_eps)
    dlp = np.where(active, -ratio * adv, 0.0) / m
    inv_var = np.exp(-2.0 * log_std)
    diff = u - fwd.mean
    d_mean = dlp[:, None] * diff * inv_var
    d_log_std = np.sum(dlp[:, None] * (diff * diff * inv_var - 1.0), axis=0) - cfg.entropy_coef
    d_log_std = np.where(log_std > fwd.log_std, 0.0, d_log_std)  # floored entries are constant
    d_value = 2.0 * cfg.value_coef * value_err / m
    grad = net.backward(params, fwd, d_mean=d_mean, d_log_std=d_log_std, d_value=d_value)
    stats = {
        "loss": float(loss),
        "policy_loss": float(policy_loss),
        "value_loss": value_loss,
        "clip_frac": float(np.mean(np.abs(ratio - 1.0) > cfg.clip_eps)),
    }
    return float(loss), grad, stats


def ppo_update(net: PolicyNet, params: np.ndarray, buf: RolloutBuffer, cfg: TrainConfig,
               opt: Adam, rng: np.random.Generator) -> tuple[np.ndarray, dict]:
    """``epochs_per_batch`` passes of shuffled minibatch Adam steps."""
    n = len(buf)
    stats = {}
    for _ in range(cfg.epochs_per_batch):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.minibatch_size):
            idx = perm[start:start + cfg.minibatch_size]
            loss, grad, stats = ppo_loss_grad(net, params, buf, idx, cfg)
            if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
                raise NonFiniteLoss("non-finite PPO loss or gradient",
                                    {"loss": loss, "adam_t": opt.t, **stats})
            opt.step(params, grad)
            if not np.all(np.isfinite(params)):
                raise NonFiniteLoss("parameters became non-finite", {"adam_t": opt.t, **stats})
    return params, stats


@dataclass
class TrainResult:
    params: np.ndarray
    net: PolicyNet
    episode_rewards: np.ndarray
    episode_steps: np.ndarray
    updates: int
    steps: int


def train(cfg: TrainConfig, progress=None) -> TrainResult:
    """Rollout/update loop until ``total_steps`` transitions are consumed."""
    cfg.validate()
    root = np.random.SeedSequence(cfg.seed)
    init_seq, env_seq, act_seq, shuffle_seq = root.spawn(4)
    net = PolicyNet(cfg.spec)
    params = net.init_params(np.random.default_rng(init_seq))
    opt = Adam(net.n_params, cfg.lr)
    env = BatchEnv(cfg.batch_size // cfg.episode_len, cfg, np.random.default_rng(env_seq))
    act_rng = np.random.default_rng(act_seq)
    shuffle_rng = np.random.default_rng(shuffle_seq)

    rewards, steps = [], []
    total = 0
    updates = 0
    while total < cfg.total_steps:
        if cfg.lr_schedule == "linear":
            opt.lr = cfg.lr * (1.0 - total / cfg.total_steps)
        buf, ep_rewards = collect(net, params, env, cfg, act_rng)
        buf.rewards = buf.rewards * cfg.reward_scale
        compute_gae(buf, cfg.gamma, cfg.gae_lambda)
        ep_len = np.bincount(np.cumsum(buf.dones) - buf.dones, minlength=len(ep_rewards))
        ep_steps = total + np.cumsum(ep_len)
        total += len(buf)
        params, stats = ppo_update(net, params, buf, cfg, opt, shuffle_rng)
        updates += 1
        rewards.append(ep_rewards)
        steps.append(ep_steps)
        if progress is not None:
            progress(updates, total, float(ep_rewards.mean()), stats)
        log.debug("update %d steps %d reward %.4f %s", updates, total, ep_rewards.mean(), stats)
    return TrainResult(params=params, net=net, episode_rewards=np.concatenate(rewards),
                       episode_steps=np.concatenate(steps), updates=updates, steps=total)


def evaluate_offset(net: PolicyNet, params: np.ndarray, cfg: TrainConfig, episodes: int = 1000,
                    offset_deg: float = 30.0, seed: int = 0) -> float:
    """Mean |angle(d_T, axis)| in degrees under the deterministic mean action.

    Each episode starts at ``offset_deg`` (random sign and axis heading) in
    the noise-free training environment and runs ``episode_len`` ticks.
    """
    quiet = replace(cfg, noise=NoiseConfig(0.0, 0.0))
    rng = np.random.default_rng(seed)
    env = BatchEnv(episodes, quiet, rng)
    env.reset()
    sign = rng.choice([-1.0, 1.0], size=episodes)
    heading = np.arctan2(env.axis[:, 1], env.axis[:, 0]) + sign * math.radians(offset_deg)
    env.d = np.stack([np.cos(heading), np.sin(heading), np.zeros(episodes)], axis=1)
    env.force = env._force(env.d)
    obs = env._observe(env.force)
    for _ in range(quiet.episode_len):
        obs, _, _ = env.step(np.tanh(net.forward(params, obs).mean))
    cos = np.clip(np.sum(env.d * env.axis, axis=1), -1.0, 1.0)
    return float(np.degrees(np.arccos(cos)).mean())


def learning_curve_rows(result: TrainResult):
    r = result.episode_rewards
    csum = np.concatenate([[0.0], np.cumsum(r)])
    for i in range(len(r)):
        lo = max(0, i - 99)
        yield i, int(result.episode_steps[i]), float(r[i]), float((csum[i + 1] - csum[lo]) / (i + 1 - lo))


def write_learning_curve(path: str | Path, result: TrainResult) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["episode_index", "steps", "episode_reward", "mean_reward_100"])
        for i, s, r, m in learning_curve_rows(result):
            w.writerow([i, s, repr(r), repr(m)])
    return path


def read_learning_curve(path: str | Path) -> np.ndarray:
    with Path(path).open() as fh:
        return np.array([float(row["episode_reward"]) for row in csv.DictReader(fh)])


@dataclass(frozen=True)
class Convergence:
    first_mean: float
    final_mean: float
    gain_fraction: float
    plateau_change: float
    improved: bool
    plateaued: bool

    @property
    def converged(self) -> bool:
        return self.improved and self.plateaued


def convergence(rewards: np.ndarray, window: int = 1000, min_gain: float = 0.5,
                tail_frac: float = 0.2, plateau_tol: float = 0.01) -> Convergence:
    """Learning-curve criteria.

    ``gain_fraction`` is how much of the gap between the first-window mean and
    zero the final window closed. The plateau test compares the mean reward
    of the two halves of the last ``tail_frac`` of episodes.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    w = min(window, len(rewards))
    first, final = float(rewards[:w].mean()), float(rewards[-w:].mean())
    gain = (final - first) / abs(first) if first != 0 else 0.0
    tail = rewards[-max(2, int(len(rewards) * tail_frac)):]
    h = len(tail) // 2
    a, b = float(tail[:h].mean()), float(tail[h:].mean())
    change = abs(b - a) / max(abs(a), 1e-12)
    return Convergence(first, final, gain, change, gain >= min_gain, change < plateau_tol)


def save_training(out_dir: str | Path, result: TrainResult, cfg: TrainConfig) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    conv = convergence(result.episode_rewards)
    meta = {
        "seed": cfg.seed,
        "training_steps": result.steps,
        "updates": result.updates,
        "train_config": cfg.to_dict(),
        "converged": conv.converged,
    }
    weights = save_weights(out / "policy.capw", result.net, result.params, meta)
    curve = write_learning_curve(out / "learning_curve.csv", result)
    return {"weights": weights, "meta": weights.with_name(weights.name + ".meta.json"), "curve": curve}


def dump_diagnostics(out_dir: str | Path, err: NonFiniteLoss) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    p = out / "nonfinite_diagnostics.json"
    p.write_text(json.dumps({"error": str(err), **err.diagnostics}, indent=2, default=float) + "\n")
    return p
