"""Double-DQN training loop with target sync and validation selection.

Targets follow the double-DQN rule by default (online net picks the next
action, target net evaluates it); plain DQN targets are available as a
config switch. Exploration is epsilon-greedy with a linear decay per
environment step. Every ``val_every`` episodes a greedy pass over the
validation volumes measures mean distance error, and the parameters with
the lowest validation error are retained as the result.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import environment as env
from . import qnet
from .qnet import NetConfig, QNetParams
from .replay import JointBatch, JointTransition, ReplayBuffer
from .rng import Rng, derive_seed
from .volume_io import DatasetSplit, Volume3D

F32 = np.float32
F64 = np.float64


@dataclass
class TrainConfig:
    gamma: float = 0.9
    target_sync_every: int = 2500     # training updates between target syncs
    batch_size: int = 32
    learn_rate: float = 1e-3
    eps_start: float = 1.0
    eps_end: float = 0.1
    eps_decay_steps: int = 100_000
    target_mode: str = "double_dqn"   # "dqn" | "double_dqn"
    steps_per_train: int = 4          # env steps per gradient update
    max_train_steps: int = 100_000    # env-step budget
    val_every: int = 25               # episodes between validation passes
    replay_capacity: int | None = None  # None = floor(100000 / n_agents)
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must be in [0, 1)")
        if self.eps_start < self.eps_end:
            raise ValueError("eps_start must be >= eps_end")
        if self.target_mode not in ("dqn", "double_dqn"):
            raise ValueError(f"unknown target_mode {self.target_mode!r}")
        if min(self.target_sync_every, self.batch_size, self.steps_per_train,
               self.val_every, self.eps_decay_steps) < 1:
            raise ValueError("cadence/batch fields must be positive")
        if self.learn_rate <= 0.0:
            raise ValueError("learn_rate must be positive")
        if self.max_train_steps < 0:
            raise ValueError("max_train_steps must be >= 0")


def epsilon(step: int, cfg: TrainConfig) -> float:
    """Linear eps_start -> eps_end over eps_decay_steps, constant after.

    Exactly eps_start at step 0 and exactly eps_end from decay onward.
    """
    if step <= 0:
        return cfg.eps_start
    if step >= cfg.eps_decay_steps:
        return cfg.eps_end
    frac = step / cfg.eps_decay_steps
    return cfg.eps_start + (cfg.eps_end - cfg.eps_start) * frac


def select_actions(qvalues: np.ndarray, eps: float, rng: Rng) -> np.ndarray:
    """Per-agent epsilon-greedy; greedy ties break to the lowest action id."""
    q = np.asarray(qvalues)
    actions = np.empty(q.shape[0], dtype=np.int64)
    for a in range(q.shape[0]):
        if rng.random() < eps:
            actions[a] = rng.randrange(q.shape[1])
        else:
            actions[a] = int(np.argmax(q[a]))
    return actions


def compute_targets(batch: JointBatch, online: QNetParams, target: QNetParams,
                    net_cfg: NetConfig, cfg: TrainConfig) -> np.ndarray:
    """Bootstrap targets, float64, shape (batch, n_agents).

    double_dqn: y = r + gamma * Qhat(s', argmax_a Q(s', a))
    dqn:        y = r + gamma * max_a Qhat(s', a)
    Terminal entries keep y = r.
    """
    q_target, _ = qnet.forward(target, net_cfg, batch.next_obs)
    qt = q_target.astype(F64)
    if cfg.target_mode == "double_dqn":
        q_online, _ = qnet.forward(online, net_cfg, batch.next_obs)
        best = np.argmax(q_online.astype(F64), axis=-1)
        boot = np.take_along_axis(qt, best[..., None], axis=-1)[..., 0]
    else:
        boot = qt.max(axis=-1)
    y = batch.rewards.astype(F64) + cfg.gamma * boot
    return np.where(batch.terminal, batch.rewards.astype(F64), y)


class OptState:
    """Adam accumulators (beta1=0.9, beta2=0.999, eps=1e-8) plus counters."""

    BETA1 = 0.9
    BETA2 = 0.999
    EPS = 1e-8

    def __init__(self, params: QNetParams):
        self.m = [np.zeros_like(a) for a in params.arrays()]
        self.v = [np.zeros_like(a) for a in params.arrays()]
        self.t = 0  # completed training updates


def _adam_apply(params: QNetParams, grads: QNetParams, opt: OptState,
                lr: float) -> None:
    b1, b2, eps = OptState.BETA1, OptState.BETA2, OptState.EPS
    t = opt.t
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params.arrays(), grads.arrays(), opt.m, opt.v):
        m *= F32(b1)
        m += F32(1.0 - b1) * g
        v *= F32(b2)
        v += F32(1.0 - b2) * g * g
        p -= (F32(lr) * (m / F32(bc1))
              / (np.sqrt(v / F32(bc2)) + F32(eps)))


def sync_target(online: QNetParams, target: QNetParams) -> None:
    """Copy online parameters into the target arrays in place."""
    for src, dst in zip(online.arrays(), target.arrays()):
        dst[...] = src


def train_step(online: QNetParams, target: QNetParams, opt: OptState,
               buf: ReplayBuffer, net_cfg: NetConfig, cfg: TrainConfig,
               rng: Rng) -> float:
    """One sampled minibatch update; returns the scalar MSE loss.

    Loss gathers only the Q-values of taken actions. The target network
    is refreshed in place every target_sync_every completed updates.
    """
    batch = buf.sample(cfg.batch_size, rng)
    y = compute_targets(batch, online, target, net_cfg, cfg)
    q, cache = qnet.forward(online, net_cfg, batch.obs)
    q_sa = np.take_along_axis(q, batch.actions[..., None], axis=-1)[..., 0]
    diff = q_sa.astype(F64) - y
    loss = float(np.mean(diff * diff))
    dq = np.zeros_like(q)
    np.put_along_axis(
        dq, batch.actions[..., None],
        (2.0 * diff / diff.size)[..., None].astype(F32), axis=-1)
    grads = qnet.backward(online, net_cfg, cache, dq)
    opt.t += 1
    _adam_apply(online, grads, opt, cfg.learn_rate)
    if opt.t % cfg.target_sync_every == 0:
        sync_target(online, target)
    return loss


# ---------------------------------------------------------------------------
# Full training run
# ---------------------------------------------------------------------------

@dataclass
class LogRecord:
    episode: int
    step: int
    epsilon: float
    mean_loss: float
    mean_reward: float
    val_error_mm: float | None = None


@dataclass
class TrainRun:
    volumes: dict[str, Volume3D]
    split: DatasetSplit
    targets: list[str]            # landmark name per agent
    env: env.EnvConfig
    net: NetConfig
    train: TrainConfig
    eval_seed: int = 0            # start seeding for validation episodes


@dataclass
class TrainResult:
    best_params: QNetParams
    best_val_error: float         # nan if validation never ran
    final_params: QNetParams
    log: list = field(default_factory=list)
    env_steps: int = 0
    updates: int = 0
    episodes: int = 0


LOG_FIELDS = ("episode", "step", "epsilon", "mean_loss", "mean_reward",
              "val_error_mm")


def format_log_row(rec: LogRecord) -> dict:
    return {
        "episode": rec.episode,
        "step": rec.step,
        "epsilon": f"{rec.epsilon:.6f}",
        "mean_loss": f"{rec.mean_loss:.6f}",
        "mean_reward": f"{rec.mean_reward:.6f}",
        "val_error_mm": "" if rec.val_error_mm is None
                        else f"{rec.val_error_mm:.6f}",
    }


def write_log_csv(path, log: list) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        writer.writeheader()
        for rec in log:
            writer.writerow(format_log_row(rec))


def _validate(params: QNetParams, run: TrainRun) -> float:
    """Mean per-agent distance error over the validation volumes, greedy."""
    from .evaluator import run_episode  # local import, evaluator is downstream

    errors = []
    for vid in run.split.validation:
        report = run_episode(params, run.volumes[vid], list(run.targets),
                             run.env, run.net,
                             episode_seed=_episode_seed(run.eval_seed, vid, 0))
        errors.extend(a.error_mm for a in report.agents)
    return float(np.mean(errors))


def _episode_seed(eval_seed: int, volume_id: str, episode_idx: int) -> int:
    import hashlib

    digest = hashlib.blake2b(str(volume_id).encode("utf-8"),
                             digest_size=8).digest()
    return derive_seed(eval_seed, int.from_bytes(digest, "little"), episode_idx)


def train(run: TrainRun, log_stream=None) -> TrainResult:
    """Run episodes with epsilon-greedy acting, interleaving minibatch
    updates every steps_per_train env steps; keep the best-validation
    parameters.

    ``log_stream``, when given, receives CSV rows append-only as episodes
    finish.
    """
    cfg = run.train
    cfg.validate()
    run.env.validate()
    run.net.validate()
    if run.net.n_agents != len(run.targets):
        raise ValueError("one target landmark per agent required")
    if run.net.in_frames != run.env.history_len \
            or run.net.roi_size != run.env.roi_size:
        raise ValueError("net input shape inconsistent with env config")

    master = Rng(derive_seed(cfg.seed))
    env_rng = master.spawn(1)
    action_rng = master.spawn(2)
    replay_rng = master.spawn(3)

    online = qnet.init_params(run.net, master.spawn(0))
    target = qnet.copy_to_target(online)
    opt = OptState(online)
    buf = ReplayBuffer(run.net.n_agents, capacity=cfg.replay_capacity)

    result = TrainResult(best_params=qnet.copy_to_target(online),
                         best_val_error=float("nan"),
                         final_params=online)
    writer = None
    if log_stream is not None:
        writer = csv.DictWriter(log_stream, fieldnames=LOG_FIELDS)
        writer.writeheader()

    env_steps = 0
    episode_idx = 0
    train_vols = list(run.split.train)
    if not train_vols:
        raise ValueError("empty training split")

    while env_steps < cfg.max_train_steps:
        volume = run.volumes[train_vols[episode_idx % len(train_vols)]]
        states = env.reset(volume, list(run.targets), run.env, env_rng)
        ep_rewards = []
        ep_losses = []
        step_count = 0
        while not env.episode_done(states, step_count, run.env) \
                and env_steps < cfg.max_train_steps:
            obs_now = np.stack([env.observation(s) for s in states])[None]
            q, _ = qnet.forward(online, run.net, obs_now)
            eps = epsilon(env_steps, cfg)
            actions = select_actions(q[0], eps, action_rng)
            outcomes = env.step(states, actions, volume, run.env, mode="train")
            buf.push(JointTransition(
                obs=obs_now[0],
                actions=actions,
                rewards=np.array([o.reward for o in outcomes], dtype=F32),
                next_obs=np.stack([o.obs for o in outcomes]),
                terminal=np.array([o.terminal for o in outcomes], dtype=bool),
            ))
            ep_rewards.append(np.mean([o.reward for o in outcomes]))
            env_steps += 1
            step_count += 1
            if env_steps % cfg.steps_per_train == 0 \
                    and len(buf) >= cfg.batch_size:
                ep_losses.append(train_step(online, target, opt, buf,
                                            run.net, cfg, replay_rng))

        episode_idx += 1
        rec = LogRecord(
            episode=episode_idx,
            step=env_steps,
            epsilon=epsilon(env_steps, cfg),
            mean_loss=float(np.mean(ep_losses)) if ep_losses else 0.0,
            mean_reward=float(np.mean(ep_rewards)) if ep_rewards else 0.0,
        )
        if episode_idx % cfg.val_every == 0 and run.split.validation:
            val_err = _validate(online, run)
            rec.val_error_mm = val_err
            if not (val_err >= result.best_val_error):  # nan-aware "improved"
                result.best_val_error = val_err
                sync_target(online, result.best_params)
        result.log.append(rec)
        if writer is not None:
            writer.writerow(format_log_row(rec))

    result.env_steps = env_steps
    result.updates = opt.t
    result.episodes = episode_idx
    return result
