"""Toy environments, explicit MDPs and an exact value-iteration solver.

States are integer indices everywhere.  Every environment exposes
``reset() -> state``, ``step(action) -> (state, reward, terminal)``,
``n_states``, ``n_actions``, ``cap`` (episode step limit) and
``noop_action`` (``None`` if the environment has no designated no-op).
"""

from __future__ import annotations

import collections
import os
from dataclasses import dataclass
from typing import Iterable

import numpy as np


@dataclass
class Mdp:
    """Finite MDP.

    ``transitions[s, a, s2]`` is P(s2 | s, a); ``rewards[s, a, s2]`` is the
    reward emitted on that transition.
    """

    transitions: np.ndarray
    rewards: np.ndarray
    terminal: np.ndarray
    initial: np.ndarray
    action_names: list[str] | None = None

    def __post_init__(self):
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        if self.rewards.ndim == 2:
            self.rewards = np.repeat(self.rewards[:, :, None], self.n_states, axis=2)
        self.terminal = np.asarray(self.terminal, dtype=bool)
        self.initial = np.asarray(self.initial, dtype=np.float64)
        S, A = self.n_states, self.n_actions
        if self.transitions.shape != (S, A, S) or self.rewards.shape != (S, A, S):
            raise ValueError("transition and reward arrays must have shape (S, A, S)")
        if self.terminal.shape != (S,) or self.initial.shape != (S,):
            raise ValueError("terminal mask and initial distribution must have length S")
        self.validate()

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[1]

    @property
    def expected_reward(self) -> np.ndarray:
        return np.einsum("ijk,ijk->ij", self.transitions, self.rewards)

    def validate(self):
        if np.any(self.transitions < 0):
            raise ValueError("negative transition probability")
        sums = self.transitions.sum(axis=2)
        bad = np.argwhere(np.abs(sums - 1.0) > 1e-12)
        if len(bad):
            s, a = bad[0]
            raise ValueError(f"transition row (s={s}, a={a}) sums to {sums[s, a]!r}, not 1")
        for s in np.flatnonzero(self.terminal):
            if not np.all(self.transitions[s, :, s] == 1.0) or np.any(self.rewards[s, :, s] != 0.0):
                raise ValueError(f"terminal state {s} must self-loop with zero reward")
        if abs(self.initial.sum() - 1.0) > 1e-12 or np.any(self.initial < 0):
            raise ValueError("initial distribution must be a probability vector")


@dataclass
class ValueIterationResult:
    q: np.ndarray
    iterations: int
    residual: float

    @property
    def v(self) -> np.ndarray:
        return self.q.max(axis=1)


def bellman_backup(mdp: Mdp, q: np.ndarray, gamma: float) -> np.ndarray:
    out = mdp.expected_reward + gamma * mdp.transitions @ q.max(axis=1)
    out[mdp.terminal] = 0.0
    return out


def value_iteration(mdp: Mdp, gamma: float, tol: float = 1e-10, max_iter: int = 1_000_000) -> ValueIterationResult:
    """Iterate the Bellman optimality backup from Q = 0 until the sup-norm
    change is at most ``tol``.  The reported residual is that of the
    returned table.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("discount must lie in [0, 1]")
    mdp.validate()
    q = np.zeros((mdp.n_states, mdp.n_actions))
    for it in range(1, max_iter + 1):
        new = bellman_backup(mdp, q, gamma)
        delta = float(np.max(np.abs(new - q))) if q.size else 0.0
        q = new
        if delta <= tol:
            residual = float(np.max(np.abs(bellman_backup(mdp, q, gamma) - q))) if q.size else 0.0
            return ValueIterationResult(q, it, residual)
    raise RuntimeError(f"value iteration did not reach tol={tol} in {max_iter} iterations")


def optimal_action_sets(q_star: np.ndarray, atol: float = 1e-9) -> list[set[int]]:
    return [set(np.flatnonzero(row >= row.max() - atol).tolist()) for row in q_star]


# ---------------------------------------------------------------------------
# Environments


class _EpisodeGuard:
    def _start(self):
        self._done = False

    def _check(self, action):
        if getattr(self, "_done", None) is None:
            raise RuntimeError("call reset() before step()")
        if self._done:
            raise RuntimeError("episode already ended; call reset()")
        if not 0 <= int(action) < self.n_actions:
            raise ValueError(f"action {action} out of range [0, {self.n_actions})")


class ChainEnv(_EpisodeGuard):
    """Deterministic chain s0 -> s1 -> ... -> s_{n-1}.

    Action 0 moves left (staying put at s0), action 1 moves right.  Entering
    the last state yields reward 1 and ends the episode.
    """

    LEFT, RIGHT = 0, 1
    action_names = ["left", "right"]
    noop_action = None

    def __init__(self, length: int = 3, reward: float = 1.0, cap: int = 200):
        if length < 2:
            raise ValueError("chain needs at least two states")
        self.length = length
        self.reward = reward
        self.cap = cap
        self.state = 0

    @property
    def n_states(self):
        return self.length

    @property
    def n_actions(self):
        return 2

    def reset(self) -> int:
        self._start()
        self.state = 0
        return self.state

    def transition(self, s: int, a: int) -> tuple[int, float, bool]:
        nxt = max(s - 1, 0) if a == self.LEFT else min(s + 1, self.length - 1)
        done = nxt == self.length - 1
        return nxt, (self.reward if done else 0.0), done

    def step(self, action: int):
        self._check(action)
        self.state, r, self._done = self.transition(self.state, int(action))
        return self.state, r, self._done


class GridMaze(_EpisodeGuard):
    """Deterministic grid maze with a single rewarding goal cell.

    Cells are indexed ``row * width + col``.  Actions are up, right, down,
    left (plus ``stay`` when ``with_noop`` is set).  Moving into a wall or
    off the grid keeps the agent in place.
    """

    MOVES = [(-1, 0), (0, 1), (1, 0), (0, -1)]

    def __init__(
        self,
        width: int,
        height: int,
        walls: Iterable[tuple[int, int]] = (),
        start: tuple[int, int] = (0, 0),
        goal: tuple[int, int] | None = None,
        step_reward: float = 0.0,
        goal_reward: float = 1.0,
        cap: int = 200,
        with_noop: bool = False,
    ):
        self.width, self.height = width, height
        self.walls = frozenset(tuple(w) for w in walls)
        self.start = tuple(start)
        self.goal = tuple(goal) if goal is not None else (height - 1, width - 1)
        self.step_reward, self.goal_reward = step_reward, goal_reward
        self.cap = cap
        self.with_noop = with_noop
        for name, cell in (("start", self.start), ("goal", self.goal)):
            if not self.is_open(cell):
                raise ValueError(f"{name} cell {cell} is not an open cell")
        shortest_path_length(self)
        self.state = self.index(self.start)

    @classmethod
    def corridor(cls, length: int, **kwargs) -> "GridMaze":
        return cls(length, 1, start=(0, 0), goal=(0, length - 1), **kwargs)

    @classmethod
    def from_ascii(cls, rows: list[str], **kwargs) -> "GridMaze":
        """'#' wall, 'S' start, 'G' goal, anything else open."""
        walls, start, goal = [], None, None
        for r, line in enumerate(rows):
            for c, ch in enumerate(line):
                if ch == "#":
                    walls.append((r, c))
                elif ch == "S":
                    start = (r, c)
                elif ch == "G":
                    goal = (r, c)
        if start is None or goal is None:
            raise ValueError("maze needs an S and a G cell")
        return cls(len(rows[0]), len(rows), walls=walls, start=start, goal=goal, **kwargs)

    @property
    def n_states(self):
        return self.width * self.height

    @property
    def n_actions(self):
        return 5 if self.with_noop else 4

    @property
    def noop_action(self):
        return 4 if self.with_noop else None

    @property
    def action_names(self):
        names = ["up", "right", "down", "left"]
        return names + ["stay"] if self.with_noop else names

    def index(self, cell) -> int:
        return cell[0] * self.width + cell[1]

    def cell(self, index: int) -> tuple[int, int]:
        return divmod(int(index), self.width)

    def is_open(self, cell) -> bool:
        r, c = cell
        return 0 <= r < self.height and 0 <= c < self.width and (r, c) not in self.walls

    def open_states(self) -> list[int]:
        return [self.index((r, c)) for r in range(self.height) for c in range(self.width) if self.is_open((r, c))]

    def move(self, cell, a: int):
        if a == 4:
            return cell
        dr, dc = self.MOVES[a]
        nxt = (cell[0] + dr, cell[1] + dc)
        return nxt if self.is_open(nxt) else cell

    def transition(self, s: int, a: int) -> tuple[int, float, bool]:
        nxt = self.move(self.cell(s), a)
        if nxt == self.goal:
            return self.index(nxt), self.goal_reward, True
        return self.index(nxt), self.step_reward, False

    def reset(self) -> int:
        self._start()
        self.state = self.index(self.start)
        return self.state

    def step(self, action: int):
        self._check(action)
        self.state, r, self._done = self.transition(self.state, int(action))
        return self.state, r, self._done


class MdpEnv(_EpisodeGuard):
    """Simulates an explicit (possibly stochastic) Mdp with a seeded generator."""

    noop_action = None

    def __init__(self, mdp: Mdp, seed: int | None = 0, cap: int = 200):
        self.mdp = mdp
        self.cap = cap
        self.rng = np.random.default_rng(seed)
        self.state = 0

    @property
    def n_states(self):
        return self.mdp.n_states

    @property
    def n_actions(self):
        return self.mdp.n_actions

    def reset(self) -> int:
        self._start()
        self.state = int(self.rng.choice(self.n_states, p=self.mdp.initial))
        self._done = bool(self.mdp.terminal[self.state])
        return self.state

    def step(self, action: int):
        self._check(action)
        s, a = self.state, int(action)
        nxt = int(self.rng.choice(self.n_states, p=self.mdp.transitions[s, a]))
        r = float(self.mdp.rewards[s, a, nxt])
        self.state = nxt
        self._done = bool(self.mdp.terminal[nxt])
        return nxt, r, self._done


def shortest_path_length(maze: GridMaze) -> int:
    """Number of moves on a shortest open path from start to goal (BFS)."""
    start, goal = tuple(maze.start), tuple(maze.goal)
    dist = {start: 0}
    queue = collections.deque([start])
    while queue:
        cell = queue.popleft()
        if cell == goal:
            return dist[cell]
        for a in range(4):
            nxt = maze.move(cell, a)
            if nxt not in dist:
                dist[nxt] = dist[cell] + 1
                queue.append(nxt)
    raise ValueError(f"goal {goal} is unreachable from {start}")


def export_mdp(env) -> Mdp:
    """Explicit Mdp for an environment with an enumerable state space."""
    if isinstance(env, MdpEnv):
        return env.mdp
    if not hasattr(env, "transition"):
        raise TypeError(f"cannot export {type(env).__name__}: no enumerable transition function")
    S, A = env.n_states, env.n_actions
    P = np.zeros((S, A, S))
    R = np.zeros((S, A, S))
    terminal = np.zeros(S, dtype=bool)
    for s in range(S):
        for a in range(A):
            nxt, r, done = env.transition(s, a)
            P[s, a, nxt] = 1.0
            R[s, a, nxt] = r
            if done:
                terminal[nxt] = True
    for s in np.flatnonzero(terminal):
        P[s] = 0.0
        P[s, :, s] = 1.0
        R[s] = 0.0
    initial = np.zeros(S)
    initial[env.reset()] = 1.0
    return Mdp(P, R, terminal, initial, list(env.action_names))


# ---------------------------------------------------------------------------
# MDP interchange format
#
#   states <S>
#   actions <A>
#   terminal <s> [<s> ...]        (optional)
#   start <s> [<prob>] ...        (optional; defaults to state 0)
#   <s> <a> <s'> <prob> <reward>  (one line per transition)
#
# '#' starts a comment.  Rows of terminal states may be omitted.


class MdpFormatError(ValueError):
    pass


def parse_mdp(text: str) -> Mdp:
    S = A = None
    terminal: list[int] = []
    start: dict[int, float] = {}
    triples = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if parts[0] == "states":
                S = int(parts[1])
            elif parts[0] == "actions":
                A = int(parts[1])
            elif parts[0] == "terminal":
                terminal.extend(int(p) for p in parts[1:])
            elif parts[0] == "start":
                s = int(parts[1])
                start[s] = float(parts[2]) if len(parts) > 2 else 1.0
            else:
                if len(parts) != 5:
                    raise MdpFormatError(f"line {lineno}: expected 's a s2 prob reward', got {raw.strip()!r}")
                s, a, s2 = (int(p) for p in parts[:3])
                triples.append((lineno, s, a, s2, float(parts[3]), float(parts[4])))
        except (IndexError, ValueError) as exc:
            if isinstance(exc, MdpFormatError):
                raise
            raise MdpFormatError(f"line {lineno}: cannot parse {raw.strip()!r}") from exc
    if S is None or A is None:
        raise MdpFormatError("missing 'states' or 'actions' header")
    P = np.zeros((S, A, S))
    R = np.zeros((S, A, S))
    for lineno, s, a, s2, p, r in triples:
        if not (0 <= s < S and 0 <= s2 < S and 0 <= a < A):
            raise MdpFormatError(f"line {lineno}: index out of range")
        P[s, a, s2] += p
        R[s, a, s2] = r
    term = np.zeros(S, dtype=bool)
    for s in terminal:
        if not 0 <= s < S:
            raise MdpFormatError(f"terminal state {s} out of range")
        term[s] = True
        if not P[s].any():
            P[s, :, s] = 1.0
    initial = np.zeros(S)
    if start:
        for s, p in start.items():
            initial[s] = p
    else:
        initial[0] = 1.0
    try:
        return Mdp(P, R, term, initial)
    except ValueError as exc:
        raise MdpFormatError(str(exc)) from exc


def format_mdp(mdp: Mdp) -> str:
    lines = [f"states {mdp.n_states}", f"actions {mdp.n_actions}"]
    term = np.flatnonzero(mdp.terminal)
    if len(term):
        lines.append("terminal " + " ".join(str(s) for s in term))
    for s in np.flatnonzero(mdp.initial):
        lines.append(f"start {s} {float(mdp.initial[s])!r}")
    for s in range(mdp.n_states):
        if mdp.terminal[s]:
            continue
        for a in range(mdp.n_actions):
            for s2 in np.flatnonzero(mdp.transitions[s, a]):
                lines.append(f"{s} {a} {s2} {float(mdp.transitions[s, a, s2])!r} {float(mdp.rewards[s, a, s2])!r}")
    return "\n".join(lines) + "\n"


def read_mdp(path) -> Mdp:
    with open(path, encoding="utf-8") as fh:
        return parse_mdp(fh.read())


def write_mdp(mdp: Mdp, path):
    from .numcore import atomic_write_bytes

    atomic_write_bytes(os.fspath(path), format_mdp(mdp).encode("utf-8"))
