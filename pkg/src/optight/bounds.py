"""Targets, multi-step bounds and the penalized Q-learning objective.

For a replayed transition j with in-episode neighbours, and a frozen
Q-function Q-:

* target       y_j    = r_j + gamma * max_a Q-(s_{j+1}, a)   (no max term if s_{j+1} is terminal)
* lower bound  L_{j,k} = sum_{i=0..k} gamma^i r_{j+i} + gamma^(k+1) max_a Q-(s_{j+k+1}, a)
* upper bound  U_{j,k} = gamma^(-k-1) Q-(s_{j-k-1}, a_{j-k-1}) - sum_{i=0..k} gamma^(i-k-1) r_{j-k-1+i}

Lower bounds use k = 1..K (successors), upper bounds k = 0..K-1
(predecessors).  The loss for one sample with live value q is

    (q - y)^2 + lam * (Lmax - q)_+^2 + lam * (q - Umin)_+^2

and everything except q is held constant when differentiating.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .replay import SampledItem, Transition

RESCALE_MODES = ("adaptive", "constant", "none")


@dataclass
class PenaltyConfig:
    lam: float = 4.0
    K: int = 4
    rescale: str = "adaptive"
    use_return_bound: bool = True
    # Evaluate at most this many randomly chosen bounds per sample (None: all).
    max_constraints: int | None = None

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("penalty coefficient must be >= 0")
        if self.K < 0:
            raise ValueError("horizon K must be >= 0")
        if self.rescale not in RESCALE_MODES:
            raise ValueError(f"rescale must be one of {RESCALE_MODES}")
        if self.max_constraints is not None and self.max_constraints < 0:
            raise ValueError("max_constraints must be >= 0")


@dataclass
class BoundSet:
    """Bounds for one sample.  ``lower_max``/``upper_min`` are ``None`` when
    no bound of that kind is available (the constraint is inactive)."""

    target: float
    lower: dict[int, float] = field(default_factory=dict)
    upper: dict[int, float] = field(default_factory=dict)
    ret: float | None = None
    lower_max: float | None = None
    upper_min: float | None = None

    @property
    def n_bounds(self) -> int:
        return len(self.lower) + len(self.upper) + (self.ret is not None)


def max_q(frozen, state) -> float:
    return frozen.max_value(state)


def _lower_series(item: SampledItem, kmax: int, frozen, gamma: float) -> dict[int, float]:
    # L_{j,k} for k = 1..kmax, accumulating the discounted reward sum.
    out = {}
    t = item.center
    total = t.reward
    disc = gamma
    if t.terminal:
        return out
    for k in range(1, kmax + 1):
        t = item.successors[k - 1]
        total += disc * t.reward
        disc *= gamma
        out[k] = total if t.terminal else total + disc * max_q(frozen, t.next_state)
        if t.terminal:
            break
    return out


def _upper_series(item: SampledItem, kmax: int, frozen, gamma: float) -> dict[int, float]:
    # U_{j,k} for k = 0..kmax-1, walking backwards through the predecessors.
    out = {}
    if gamma == 0.0:
        return out
    preds = item.predecessors
    acc = 0.0
    for k in range(kmax):
        p = preds[len(preds) - 1 - k]
        # acc = sum_{i=0..k} gamma^i r_{j-k-1+i}
        acc = p.reward + gamma * acc
        out[k] = (frozen.value(p.state, p.action) - acc) / gamma ** (k + 1)
    return out


def target(item: SampledItem, frozen, gamma: float) -> float:
    t = item.center
    if t.terminal:
        return float(t.reward)
    return t.reward + gamma * max_q(frozen, t.next_state)


def lower_bound(item: SampledItem, k: int, frozen, gamma: float) -> float | None:
    """L_{j,k} for k >= 1, or None if fewer than k successors are stored."""
    if k < 1 or k > len(item.successors):
        return None
    return _lower_series(item, k, frozen, gamma).get(k)


def upper_bound(item: SampledItem, k: int, frozen, gamma: float) -> float | None:
    """U_{j,k} for k >= 0, or None if fewer than k + 1 predecessors are stored."""
    if k < 0 or k + 1 > len(item.predecessors) or gamma == 0.0:
        return None
    return _upper_series(item, k + 1, frozen, gamma)[k]


def full_return(t: Transition, frozen) -> float:
    """R_j including the bootstrap tail for truncated episodes."""
    if t.ret is None:
        raise ValueError("transition has no discounted return yet")
    if t.ret_bootstrap_state is None:
        return t.ret
    return t.ret + t.ret_bootstrap_discount * max_q(frozen, t.ret_bootstrap_state)


def aggregate(item: SampledItem, cfg: PenaltyConfig, frozen, gamma: float, rng=None) -> BoundSet:
    ks_lower = list(range(1, min(cfg.K, len(item.successors)) + 1))
    ks_upper = list(range(0, min(cfg.K, len(item.predecessors))))
    if gamma == 0.0:
        ks_upper = []
    use_ret = (
        cfg.use_return_bound
        and cfg.K >= 1
        and item.center.ret is not None
        and item.center.ret_bootstrap_state is None
    )
    if cfg.max_constraints is not None and rng is not None:
        pool = [("L", k) for k in ks_lower] + [("U", k) for k in ks_upper]
        if len(pool) > cfg.max_constraints:
            keep = sorted(rng.choice(len(pool), size=cfg.max_constraints, replace=False))
            pool = [pool[i] for i in keep]
            ks_lower = [k for kind, k in pool if kind == "L"]
            ks_upper = [k for kind, k in pool if kind == "U"]

    bs = BoundSet(target=target(item, frozen, gamma))
    if ks_lower:
        series = _lower_series(item, ks_lower[-1], frozen, gamma)
        bs.lower = {k: series[k] for k in ks_lower}
    if ks_upper:
        series = _upper_series(item, ks_upper[-1] + 1, frozen, gamma)
        bs.upper = {k: series[k] for k in ks_upper}
    if use_ret:
        bs.ret = float(item.center.ret)
    lows = list(bs.lower.values()) + ([bs.ret] if bs.ret is not None else [])
    bs.lower_max = max(lows) if lows else None
    bs.upper_min = min(bs.upper.values()) if bs.upper else None
    return bs


def constraint_activity(q: float, b: BoundSet) -> tuple[bool, bool]:
    """Whether the lower / upper penalty is active (strictly violated)."""
    low = b.lower_max is not None and b.lower_max - q > 0.0
    up = b.upper_min is not None and q - b.upper_min > 0.0
    return low, up


def penalty_loss(q: float, b: BoundSet, lam: float) -> tuple[float, float]:
    """Penalized squared error for one sample and its derivative in q."""
    diff = q - b.target
    loss = diff * diff
    grad = 2.0 * diff
    low, up = constraint_activity(q, b)
    if low:
        h = b.lower_max - q
        loss += lam * h * h
        grad -= 2.0 * lam * h
    if up:
        h = q - b.upper_min
        loss += lam * h * h
        grad += 2.0 * lam * h
    return loss, grad


def rescale_factor(n_active: int, n_items: int, lam: float, mode: str = "adaptive") -> float:
    """Multiplier keeping penalized gradients on the scale of the plain loss.

    ``adaptive`` uses 1 / (1 + 2 lam alpha) with alpha the fraction of active
    penalty terms (two slots per sample); ``constant`` always uses the
    worst case 1 / (1 + 2 lam).
    """
    if mode == "none":
        return 1.0
    if mode == "constant":
        return 1.0 / (1.0 + 2.0 * lam)
    if mode != "adaptive":
        raise ValueError(f"unknown rescale mode {mode!r}")
    alpha = n_active / (2.0 * n_items) if n_items else 0.0
    f = 1.0 / (1.0 + 2.0 * lam * alpha)
    return min(1.0, max(1.0 / (1.0 + 2.0 * lam), f))


@dataclass
class BatchLoss:
    loss: float
    grads: np.ndarray
    q: np.ndarray
    bounds: list[BoundSet]
    factor: float
    n_active: int


def penalized_loss(qs: Sequence[float], bounds: Sequence[BoundSet], cfg: PenaltyConfig) -> tuple[float, np.ndarray, float, int]:
    """Summed penalized loss over a batch with the bounds held fixed.

    Returns (loss, dLoss/dq per item, rescale factor, active penalty count).
    """
    total = 0.0
    grads = np.empty(len(qs))
    n_active = 0
    for i, (q, b) in enumerate(zip(qs, bounds)):
        q = float(q)
        loss, g = penalty_loss(q, b, cfg.lam)
        total += loss
        grads[i] = g
        if cfg.lam > 0:
            n_active += sum(constraint_activity(q, b))
    factor = rescale_factor(n_active, len(qs), cfg.lam, cfg.rescale)
    if factor != 1.0:
        total *= factor
        grads *= factor
    return total, grads, factor, n_active


def batch_loss(items: Sequence[SampledItem], live, frozen, cfg: PenaltyConfig, gamma: float, rng=None) -> BatchLoss:
    bounds = [aggregate(it, cfg, frozen, gamma, rng) for it in items]
    values = live.values_many([it.center.state for it in items])
    qs = values[np.arange(len(items)), [it.center.action for it in items]]
    total, grads, factor, n_active = penalized_loss(qs, bounds, cfg)
    return BatchLoss(total, grads, np.asarray(qs), bounds, factor, n_active)


# ---------------------------------------------------------------------------
# Audit records


def _num(x):
    return None if x is None or (isinstance(x, float) and not math.isfinite(x)) else float(x)


def audit_record(item: SampledItem, b: BoundSet, q: float) -> dict:
    low, up = constraint_activity(q, b)
    return {
        "episode": item.center.episode,
        "j": item.center.index,
        "y": _num(b.target),
        "L_max": _num(b.lower_max),
        "U_min": _num(b.upper_min),
        "q": _num(q),
        "lower_active": low,
        "upper_active": up,
    }


def write_audit(records, path):
    from .numcore import atomic_write_bytes

    text = "".join(json.dumps(r) + "\n" for r in records)
    atomic_write_bytes(os.fspath(path), text.encode("utf-8"))
