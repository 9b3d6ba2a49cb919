"""Training loop for Q-learning with optimality tightening.

Each environment step: act epsilon-greedily, store the transition, and (once
the memory is warm) take one gradient step on a sampled minibatch.  The
frozen copy is re-synced every ``sync_every`` steps and discounted returns
are written back into the memory when an episode ends.  ``lam = 0`` gives
plain DQN.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from .bounds import PenaltyConfig, batch_loss
from .qfunc import NetQ, TabularQ
from .replay import ReplayMemory, Transition

log = logging.getLogger(__name__)

LOG_COLUMNS = ["step", "episode", "episode_return", "loss_mean", "epsilon", "sync_count", "eval_score"]


class DivergenceError(RuntimeError):
    """Raised when the training loss stops being finite."""

    def __init__(self, message, step=None, episode=None):
        super().__init__(message)
        self.step = step
        self.episode = episode


@dataclass
class TrainingConfig:
    gamma: float = 0.99
    K: int = 4
    lam: float = 4.0
    rescale: str = "adaptive"
    use_return_bound: bool = True
    max_constraints: int | None = None
    sync_every: int = 100
    batch_size: int = 32
    episodes: int = 100
    max_steps: int | None = None
    episode_cap: int | None = None
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_anneal: int | None = None
    eval_epsilon: float = 0.05
    eval_every: int = 0
    eval_episodes: int = 30
    noop_max: int = 30
    train_noop_max: int = 0
    replay_capacity: int = 100_000
    learn_start: int | None = None
    seed: int = 0
    backend: str = "tabular"
    hidden: tuple[int, ...] = (16,)
    lr: float | None = None
    rms_decay: float = 0.95
    rms_eps: float = 1e-6
    init_scale: float = 0.0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        problems = []
        if not 0.0 <= self.gamma < 1.0:
            problems.append("gamma must lie in [0, 1)")
        for name in ("sync_every", "batch_size", "episodes", "replay_capacity", "eval_episodes"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be positive")
        for name in ("max_steps", "episode_cap", "epsilon_anneal"):
            v = getattr(self, name)
            if v is not None and v < 1:
                problems.append(f"{name} must be positive")
        for name in ("epsilon_start", "epsilon_end", "eval_epsilon"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                problems.append(f"{name} must lie in [0, 1]")
        if self.backend not in ("tabular", "dense"):
            problems.append("backend must be 'tabular' or 'dense'")
        if self.lr is not None and self.lr <= 0:
            problems.append("lr must be positive")
        if self.noop_max < 0 or self.train_noop_max < 0 or self.eval_every < 0:
            problems.append("noop_max, train_noop_max and eval_every must be >= 0")
        try:
            self.penalty
        except ValueError as exc:
            problems.append(str(exc))
        if problems:
            raise ValueError("; ".join(problems))

    @property
    def penalty(self) -> PenaltyConfig:
        return PenaltyConfig(self.lam, self.K, self.rescale, self.use_return_bound, self.max_constraints)

    @property
    def learning_rate(self) -> float:
        if self.lr is not None:
            return self.lr
        return 0.05 if self.backend == "tabular" else 2.5e-4

    @property
    def mode(self) -> str:
        return "dqn-baseline" if self.lam == 0 or self.K == 0 else "optimality-tightening"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def epsilon_at(cfg: TrainingConfig, step: int) -> float:
    """Linear anneal from ``epsilon_start`` to ``epsilon_end``."""
    anneal = cfg.epsilon_anneal
    if anneal is None:
        horizon = cfg.max_steps if cfg.max_steps is not None else cfg.episodes * (cfg.episode_cap or 200)
        anneal = max(1, horizon // 10)
    if step >= anneal:
        return cfg.epsilon_end
    frac = step / anneal
    return cfg.epsilon_start + frac * (cfg.epsilon_end - cfg.epsilon_start)


def greedy(values) -> int:
    # np.argmax breaks ties by lowest index.
    return int(np.argmax(values))


def select_action(q, state, epsilon: float, rng: np.random.Generator) -> int:
    if rng.random() < epsilon:
        return int(rng.integers(q.n_actions))
    return greedy(q.values(state))


def make_q(cfg: TrainingConfig, n_states: int, n_actions: int, rng: np.random.Generator):
    if cfg.backend == "tabular":
        table = None
        if cfg.init_scale > 0:
            table = rng.uniform(-cfg.init_scale, cfg.init_scale, size=(n_states, n_actions))
        return TabularQ(n_states, n_actions, table, lr=cfg.learning_rate)
    return NetQ.create(
        n_states, n_actions, cfg.hidden, rng=rng,
        lr=cfg.learning_rate, decay=cfg.rms_decay, eps=cfg.rms_eps,
    )


@dataclass
class EpisodeRecord:
    step: int
    episode: int
    episode_return: float
    loss_mean: float | None
    epsilon: float
    sync_count: int
    eval_score: float | None = None


@dataclass
class TrainResult:
    q: object
    log: list[EpisodeRecord] = field(default_factory=list)
    steps: int = 0
    updates: int = 0
    sync_count: int = 0
    stopped_at: int | None = None
    eval_scores: list[tuple[int, float]] = field(default_factory=list)
    memory: ReplayMemory | None = None
    agent: Agent | None = None

    @property
    def best_eval(self) -> float | None:
        return max(s for _, s in self.eval_scores) if self.eval_scores else None

    @property
    def final_eval(self) -> float | None:
        return self.eval_scores[-1][1] if self.eval_scores else None

    def log_csv(self) -> str:
        return format_log(self.log)


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def format_log(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for r in records:
        w.writerow([_fmt(getattr(r, c)) for c in LOG_COLUMNS])
    return buf.getvalue()


class Agent:
    """Live and frozen Q-functions, replay memory and counters."""

    def __init__(self, cfg: TrainingConfig, n_states: int, n_actions: int):
        self.cfg = cfg
        seeds = np.random.SeedSequence(cfg.seed).spawn(4)
        self.init_rng, self.act_rng, self.sample_rng, self.noop_rng = (np.random.default_rng(s) for s in seeds)
        self.q = make_q(cfg, n_states, n_actions, self.init_rng)
        self.frozen = self.q.snapshot()
        self.memory = ReplayMemory(cfg.replay_capacity, self.sample_rng)
        self.steps = 0
        self.updates = 0
        self.sync_count = 0
        self.episodes = 0

    def act(self, state, epsilon: float) -> int:
        return select_action(self.q, state, epsilon, self.act_rng)

    def ready(self) -> bool:
        need = self.cfg.learn_start if self.cfg.learn_start is not None else self.cfg.batch_size
        return self.memory.n_episodes >= 1 and self.memory.n_finalized >= need

    def update(self) -> float:
        items = self.memory.sample_batch(self.cfg.batch_size, self.cfg.K)
        bl = batch_loss(items, self.q, self.frozen, self.cfg.penalty, self.cfg.gamma, self.sample_rng)
        if not math.isfinite(bl.loss):
            raise DivergenceError(f"non-finite loss {bl.loss!r} at step {self.steps}", self.steps, self.episodes)
        self.q.apply([it.center.state for it in items], [it.center.action for it in items], bl.grads)
        if not self.q.is_finite():
            raise DivergenceError(f"non-finite parameters after step {self.steps}", self.steps, self.episodes)
        self.updates += 1
        return bl.loss

    def sync(self):
        self.frozen.sync_from(self.q)
        self.sync_count += 1


def _noop_count(env, noop_max: int, rng) -> int:
    if getattr(env, "noop_action", None) is None or noop_max <= 0:
        return 0
    return int(rng.integers(0, noop_max + 1))


def train(
    cfg: TrainingConfig,
    env,
    eval_env=None,
    until: Callable[[Agent], bool] | None = None,
    on_episode: Callable[[EpisodeRecord], None] | None = None,
    on_step: Callable[[Agent], None] | None = None,
) -> TrainResult:
    """Run the training loop.

    ``until(agent)`` is checked after every environment step; when it
    returns True training stops and the step count is recorded in
    ``stopped_at``.  Raises ``DivergenceError`` on a non-finite loss.
    """
    agent = Agent(cfg, env.n_states, env.n_actions)
    result = TrainResult(agent.q, memory=agent.memory)
    cap = cfg.episode_cap or env.cap
    stop = False
    for _ in range(cfg.episodes):
        state = env.reset()
        agent.memory.begin_episode()
        ep_return = 0.0
        losses = []
        terminal = False
        for _ in range(_noop_count(env, cfg.train_noop_max, agent.noop_rng)):
            state, r, terminal = env.step(env.noop_action)
            ep_return += r
            if terminal:
                break
        t = 0
        while not terminal and t < cap:
            eps = epsilon_at(cfg, agent.steps)
            a = agent.act(state, eps)
            nxt, r, terminal = env.step(a)
            t += 1
            agent.memory.push(Transition(state, a, r, nxt, terminal=terminal, truncated=(not terminal and t == cap)))
            ep_return += r
            state = nxt
            agent.steps += 1
            if agent.ready():
                losses.append(agent.update())
            if agent.steps % cfg.sync_every == 0:
                agent.sync()
            if on_step is not None:
                on_step(agent)
            if until is not None and until(agent):
                result.stopped_at = agent.steps
                stop = True
                break
            if cfg.max_steps is not None and agent.steps >= cfg.max_steps:
                stop = True
                break
        if len(agent.memory.open or ()):
            agent.memory.finalize_episode(cfg.gamma)
        agent.episodes += 1
        rec = EpisodeRecord(
            agent.steps, agent.episodes, ep_return,
            float(np.mean(losses)) if losses else None,
            epsilon_at(cfg, agent.steps), agent.sync_count,
        )
        if cfg.eval_every and agent.episodes % cfg.eval_every == 0:
            rec.eval_score = evaluate(
                agent.q, eval_env if eval_env is not None else env, cfg.eval_episodes,
                cfg.eval_epsilon, cfg.noop_max, np.random.default_rng([cfg.seed, agent.episodes]), cap,
            )
            result.eval_scores.append((agent.steps, rec.eval_score))
        result.log.append(rec)
        log.debug("episode %d: steps=%d return=%s loss=%s", rec.episode, rec.step, rec.episode_return, rec.loss_mean)
        if on_episode is not None:
            on_episode(rec)
        if stop:
            break
    result.steps = agent.steps
    result.updates = agent.updates
    result.sync_count = agent.sync_count
    result.agent = agent
    return result


def run_episode(q, env, epsilon: float, noop_max: int, rng, cap: int | None = None) -> float:
    cap = cap or env.cap
    state = env.reset()
    total = 0.0
    terminal = False
    for _ in range(_noop_count(env, noop_max, rng)):
        state, r, terminal = env.step(env.noop_action)
        total += r
        if terminal:
            return total
    for _ in range(cap):
        state, r, terminal = env.step(select_action(q, state, epsilon, rng))
        total += r
        if terminal:
            break
    return total


def evaluate(q, env, episodes: int = 30, epsilon: float = 0.05, noop_max: int = 30, rng=None, cap=None) -> float:
    """Mean undiscounted return over ``episodes`` no-op-start episodes."""
    return float(np.mean(evaluate_returns(q, env, episodes, epsilon, noop_max, rng, cap)))


def evaluate_returns(q, env, episodes=30, epsilon=0.05, noop_max=30, rng=None, cap=None) -> list[float]:
    rng = rng if rng is not None else np.random.default_rng(0)
    return [run_episode(q, env, epsilon, noop_max, rng, cap) for _ in range(episodes)]


def greedy_is_optimal(q, q_star: np.ndarray, states, atol: float = 1e-9) -> bool:
    """True if the greedy action of ``q`` is optimal under ``q_star`` in every state."""
    for s in states:
        row = q_star[s]
        if row[greedy(q.values(s))] < row.max() - atol:
            return False
    return True
