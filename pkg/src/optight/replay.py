"""Episode-aware replay memory.

Transitions are grouped by episode so a sampled transition can be served
together with its in-episode successors and predecessors.  Discounted
returns are filled in by a backward pass when an episode is finalized;
until then the episode is not sampleable.
"""

from __future__ import annotations

import bisect
import collections
import json
import os
from dataclasses import dataclass, field
from typing import Any, Iterator

import numpy as np


@dataclass
class Transition:
    state: Any
    action: int
    reward: float
    next_state: Any
    terminal: bool = False
    truncated: bool = False
    episode: int = -1
    index: int = -1
    # Discounted reward sum from this step to the end of the episode.  For a
    # truncated episode the full return also needs
    # ret_bootstrap_discount * max_a Q(ret_bootstrap_state, a).
    ret: float | None = None
    ret_bootstrap_state: Any = None
    ret_bootstrap_discount: float = 0.0

    def __post_init__(self):
        if self.terminal and self.truncated:
            raise ValueError("a transition cannot be both terminal and truncated")

    @property
    def finalized(self) -> bool:
        return self.ret is not None

    @property
    def bootstrapped_return(self) -> bool:
        return self.ret_bootstrap_state is not None


@dataclass
class Episode:
    id: int
    transitions: list[Transition] = field(default_factory=list)
    finalized: bool = False

    def __len__(self):
        return len(self.transitions)

    @property
    def terminal(self) -> bool:
        return bool(self.transitions) and self.transitions[-1].terminal


@dataclass
class SampledItem:
    """A replayed transition plus up to K in-episode neighbours on each side.

    Both neighbour lists are in chronological order, so ``predecessors[-1]``
    is the step right before ``center`` and ``successors[0]`` the step right
    after it.
    """

    center: Transition
    successors: list[Transition]
    predecessors: list[Transition]


def compute_returns(rewards, gamma: float) -> list[float]:
    """Backward recurrence R_t = r_t + gamma * R_{t+1}, with R_T = r_T."""
    out = [0.0] * len(rewards)
    acc = None
    for t in range(len(rewards) - 1, -1, -1):
        acc = float(rewards[t]) if acc is None else rewards[t] + gamma * acc
        out[t] = acc
    return out


class ReplayMemory:
    """Bounded memory evicting whole episodes, oldest first.

    ``capacity`` counts transitions.  The open (in-flight) episode is never
    evicted, so the total can exceed the capacity by at most one episode.
    """

    def __init__(self, capacity: int, seed: int | np.random.Generator | None = 0):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.episodes: collections.deque[Episode] = collections.deque()
        self.open: Episode | None = None
        self._next_id = 0
        self._n_finalized = 0
        self._offsets: list[int] | None = None

    def __len__(self) -> int:
        return self._n_finalized + (len(self.open) if self.open else 0)

    @property
    def n_finalized(self) -> int:
        return self._n_finalized

    @property
    def n_episodes(self) -> int:
        return len(self.episodes)

    def begin_episode(self) -> int:
        if self.open is not None and len(self.open):
            raise RuntimeError("previous episode has not been finalized")
        self.open = Episode(self._next_id)
        self._next_id += 1
        return self.open.id

    def push(self, transition: Transition):
        if self.open is None:
            self.begin_episode()
        ep = self.open
        if ep.transitions and (ep.transitions[-1].terminal or ep.transitions[-1].truncated):
            raise RuntimeError("episode already ended; finalize it before pushing more transitions")
        transition.episode = ep.id
        transition.index = len(ep.transitions)
        transition.ret = None
        ep.transitions.append(transition)
        self._evict()

    def _evict(self):
        open_len = len(self.open) if self.open else 0
        while self.episodes and self._n_finalized + open_len > self.capacity:
            old = self.episodes.popleft()
            self._n_finalized -= len(old)
            self._offsets = None

    def finalize_episode(self, gamma: float, bootstrap: bool | None = None):
        """Fill in discounted returns for the open episode and close it.

        Episodes whose last transition is not terminal get their returns
        marked for bootstrapping from the final next state.
        """
        ep = self.open
        if ep is None or not ep.transitions:
            raise RuntimeError("no open episode with transitions to finalize")
        trans = ep.transitions
        returns = compute_returns([t.reward for t in trans], gamma)
        if bootstrap is None:
            bootstrap = not trans[-1].terminal
        n = len(trans)
        tail = trans[-1].next_state if bootstrap else None
        for j, (t, R) in enumerate(zip(trans, returns)):
            t.ret = R
            t.ret_bootstrap_state = tail
            t.ret_bootstrap_discount = gamma ** (n - j) if bootstrap else 0.0
        ep.finalized = True
        self.episodes.append(ep)
        self._n_finalized += n
        self.open = None
        self._offsets = None
        self._evict()

    def _index(self):
        if self._offsets is None:
            offs, total = [], 0
            for ep in self.episodes:
                offs.append(total)
                total += len(ep)
            self._offsets = offs
        return self._offsets

    def locate(self, flat: int) -> tuple[Episode, int]:
        offs = self._index()
        k = bisect.bisect_right(offs, flat) - 1
        ep = self.episodes[k]
        return ep, flat - offs[k]

    def item(self, episode: Episode, j: int, K: int) -> SampledItem:
        trans = episode.transitions
        return SampledItem(
            center=trans[j],
            successors=trans[j + 1 : j + 1 + K],
            predecessors=trans[max(0, j - K) : j],
        )

    def sample_batch(self, batch_size: int, K: int) -> list[SampledItem]:
        """Uniform sample (with replacement) over finalized transitions."""
        if self._n_finalized == 0:
            raise RuntimeError("replay memory holds no finalized transitions")
        flats = self.rng.integers(0, self._n_finalized, size=batch_size)
        out = []
        for f in flats:
            ep, j = self.locate(int(f))
            out.append(self.item(ep, j, K))
        return out

    def iter_items(self, K: int) -> Iterator[SampledItem]:
        for ep in self.episodes:
            for j in range(len(ep)):
                yield self.item(ep, j, K)

    def transitions(self) -> Iterator[Transition]:
        for ep in self.episodes:
            yield from ep.transitions


# ---------------------------------------------------------------------------
# Line-delimited dump: a header record followed by one record per transition.

DUMP_VERSION = 1


class DumpFormatError(ValueError):
    pass


def _jsonable(state):
    if isinstance(state, np.ndarray):
        return state.tolist()
    if isinstance(state, np.integer):
        return int(state)
    return state


def dump_lines(memory: ReplayMemory, gamma: float) -> Iterator[str]:
    yield json.dumps({"kind": "header", "version": DUMP_VERSION, "gamma": gamma})
    for t in memory.transitions():
        yield json.dumps(
            {
                "episode": t.episode,
                "index": t.index,
                "s": _jsonable(t.state),
                "a": int(t.action),
                "r": float(t.reward),
                "R": t.ret,
                "s_next": _jsonable(t.next_state),
                "terminal": bool(t.terminal),
                "truncated": bool(t.truncated),
            }
        )


def write_dump(memory: ReplayMemory, gamma: float, path):
    from .numcore import atomic_write_bytes

    text = "\n".join(dump_lines(memory, gamma)) + "\n"
    atomic_write_bytes(os.fspath(path), text.encode("utf-8"))


def read_dump(path, gamma: float | None = None) -> tuple[ReplayMemory, float]:
    """Rebuild a memory from a dump.  Returns the memory and the discount."""
    episodes: dict[int, list[tuple[int, dict]]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DumpFormatError(f"line {lineno}: not valid JSON ({exc.msg})") from exc
            if not isinstance(rec, dict):
                raise DumpFormatError(f"line {lineno}: expected a JSON object")
            if rec.get("kind") == "header":
                if gamma is None:
                    gamma = float(rec["gamma"])
                continue
            try:
                key = int(rec["episode"])
                idx = int(rec["index"])
                rec["a"] = int(rec["a"])
                rec["r"] = float(rec["r"])
                for name in ("s", "s_next", "terminal", "truncated"):
                    rec[name]
            except (KeyError, TypeError, ValueError) as exc:
                raise DumpFormatError(f"line {lineno}: malformed transition record ({exc!r})") from exc
            episodes.setdefault(key, []).append((idx, rec))
    if gamma is None:
        raise DumpFormatError("dump has no header and no discount was supplied")
    total = sum(len(v) for v in episodes.values())
    mem = ReplayMemory(max(total, 1))
    for key in sorted(episodes):
        recs = sorted(episodes[key], key=lambda p: p[0])
        if [i for i, _ in recs] != list(range(len(recs))):
            raise DumpFormatError(f"episode {key}: transition indices are not contiguous")
        mem.begin_episode()
        for _, rec in recs:
            mem.push(
                Transition(
                    rec["s"], rec["a"], rec["r"], rec["s_next"],
                    terminal=bool(rec["terminal"]), truncated=bool(rec["truncated"]),
                )
            )
        mem.finalize_episode(gamma)
    return mem, gamma
