"""Q-function backends: a lookup table and a dense network over one-hot states.

Both expose the same small surface used by the bounds and the agent:
``values(s)``, ``values_many(states)``, ``apply(states, actions, dq)``,
``snapshot()`` and ``sync_from(other)``.  A snapshot is the frozen copy
used for targets and bounds; it is never updated in place, only replaced
wholesale by ``sync_from``.
"""

from __future__ import annotations

import numpy as np

from . import numcore
from .numcore import DenseNet, RmsPropState


class TabularQ:
    kind = "tabular"

    def __init__(self, n_states: int, n_actions: int, table: np.ndarray | None = None, lr: float = 0.1, frozen: bool = False):
        self.n_states, self.n_actions = n_states, n_actions
        self.table = np.zeros((n_states, n_actions)) if table is None else np.array(table, dtype=np.float64)
        if self.table.shape != (n_states, n_actions):
            raise ValueError(f"table shape {self.table.shape} != {(n_states, n_actions)}")
        self.lr = lr
        self.frozen = frozen
        self._rows: list[list[float]] | None = None
        self._maxes: list[float] | None = None

    def values(self, state) -> np.ndarray:
        return self.table[int(state)]

    def _cache(self):
        if self._rows is None:
            self._rows = self.table.tolist()
            self._maxes = self.table.max(axis=1).tolist()

    def value(self, state, action) -> float:
        if self.frozen:
            self._cache()
            return self._rows[int(state)][int(action)]
        return float(self.table[int(state), int(action)])

    def max_value(self, state) -> float:
        if self.frozen:
            self._cache()
            return self._maxes[int(state)]
        return float(self.table[int(state)].max())

    def values_many(self, states) -> np.ndarray:
        return self.table[np.asarray(states, dtype=np.int64)]

    def apply(self, states, actions, dq):
        """One SGD step on the summed loss, given dLoss/dQ(s_i, a_i)."""
        if self.frozen:
            raise RuntimeError("frozen Q-function cannot be updated")
        np.add.at(self.table, (np.asarray(states, dtype=np.int64), np.asarray(actions)), -self.lr * np.asarray(dq))

    def snapshot(self) -> "TabularQ":
        return TabularQ(self.n_states, self.n_actions, self.table, self.lr, frozen=True)

    def sync_from(self, other: "TabularQ"):
        self.table[...] = other.table
        self._rows = self._maxes = None

    def all_values(self) -> np.ndarray:
        return self.table.copy()

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.table)))

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {
            "format_version": np.array(numcore.CHECKPOINT_VERSION),
            "kind": np.array("tabular"),
            "table": self.table,
            "lr": np.array(self.lr),
        }


class NetQ:
    """Dense network over one-hot encoded integer states."""

    kind = "dense"

    def __init__(self, net: DenseNet, opt: RmsPropState | None = None, frozen: bool = False):
        self.net = net
        self.opt = opt if opt is not None else RmsPropState.for_net(net)
        self.frozen = frozen
        self._cache: dict[int, np.ndarray] = {}
        self._max_cache: dict[int, float] = {}

    @classmethod
    def create(cls, n_states: int, n_actions: int, hidden=(16,), rng=None, **opt_kwargs) -> "NetQ":
        rng = rng if rng is not None else np.random.default_rng(0)
        net = DenseNet.init([n_states, *hidden, n_actions], rng)
        return cls(net, RmsPropState.for_net(net, **opt_kwargs))

    @property
    def n_states(self) -> int:
        return self.net.input_dim

    @property
    def n_actions(self) -> int:
        return self.net.output_dim

    def encode(self, states) -> np.ndarray:
        idx = np.asarray(states, dtype=np.int64)
        return np.eye(self.n_states)[idx]

    def values(self, state) -> np.ndarray:
        if not self.frozen:
            return numcore.forward(self.net, self.encode(state))
        key = int(state)
        out = self._cache.get(key)
        if out is None:
            out = numcore.forward(self.net, self.encode(key))
            self._cache[key] = out
        return out

    def value(self, state, action) -> float:
        return float(self.values(state)[int(action)])

    def max_value(self, state) -> float:
        if not self.frozen:
            return float(self.values(state).max())
        key = int(state)
        out = self._max_cache.get(key)
        if out is None:
            out = self._max_cache[key] = float(self.values(key).max())
        return out

    def values_many(self, states) -> np.ndarray:
        return numcore.forward(self.net, self.encode(states))

    def apply(self, states, actions, dq):
        if self.frozen:
            raise RuntimeError("frozen Q-function cannot be updated")
        x = self.encode(states)
        g = np.zeros((len(x), self.n_actions))
        np.add.at(g, (np.arange(len(x)), np.asarray(actions)), np.asarray(dq))
        numcore.rmsprop_step(self.net, numcore.backward(self.net, x, g), self.opt)

    def snapshot(self) -> "NetQ":
        return NetQ(self.net.clone(), self.opt, frozen=True)

    def sync_from(self, other: "NetQ"):
        self.net.copy_from(other.net)
        self._cache.clear()
        self._max_cache.clear()

    def all_values(self) -> np.ndarray:
        return np.array([self.values(s) for s in range(self.n_states)])

    def is_finite(self) -> bool:
        return self.net.is_finite()

    def to_arrays(self) -> dict[str, np.ndarray]:
        return numcore.checkpoint_arrays(self.net, self.opt)


def save_q(path, q):
    numcore.save_arrays(path, q.to_arrays())


def load_q(path):
    arrays = numcore.load_arrays(path)
    kind = str(arrays.get("kind", "dense"))
    if kind == "tabular":
        table = arrays["table"]
        return TabularQ(table.shape[0], table.shape[1], table, float(arrays["lr"]))
    net, opt = numcore.net_from_arrays(arrays)
    return NetQ(net, opt)
