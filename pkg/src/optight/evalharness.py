"""Score metrics, score-table ingestion and learning-curve smoothing.

Percentages are returned unrounded; rounding to two decimals happens only
when reports are rendered.
"""

from __future__ import annotations

import csv
import statistics
import warnings
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

REQUIRED_COLUMNS = ("game", "random", "human", "agent")


class ScoreFormatError(ValueError):
    pass


class DegenerateRowError(ValueError):
    """A metric denominator is zero for this row."""


@dataclass(frozen=True)
class ScoreRow:
    game: str
    random: float
    human: float
    agent: float
    baseline: float | None = None


def improvement(row: ScoreRow) -> float:
    """(agent - baseline) / (max(human, baseline) - random), in percent."""
    if row.baseline is None:
        raise ValueError(f"{row.game}: improvement needs a baseline score")
    denom = max(row.human, row.baseline) - row.random
    if denom == 0:
        raise DegenerateRowError(f"{row.game}: max(human, baseline) equals the random score")
    return 100.0 * (row.agent - row.baseline) / denom


def normalized_score(row: ScoreRow) -> float:
    """(agent - random) / |human - random|, in percent."""
    denom = abs(row.human - row.random)
    if denom == 0:
        raise DegenerateRowError(f"{row.game}: human and random scores coincide")
    return 100.0 * (row.agent - row.random) / denom


@dataclass
class EvalReport:
    normalized: dict[str, float]
    improvements: dict[str, float]
    mean: float
    median: float
    n_improved: int
    excluded: list[str] = field(default_factory=list)

    @property
    def n_games(self) -> int:
        return len(self.normalized)

    def to_dict(self, digits: int = 2) -> dict:
        games = []
        for name, score in self.normalized.items():
            entry = {"game": name, "normalized": round(score, digits)}
            if name in self.improvements:
                entry["improvement"] = round(self.improvements[name], digits)
            games.append(entry)
        return {
            "games": games,
            "summary": {
                "n_games": self.n_games,
                "mean": round(self.mean, digits),
                "median": round(self.median, digits),
                "n_improved": self.n_improved,
                "n_compared": len(self.improvements),
                "excluded": list(self.excluded),
            },
        }


def summarize(rows) -> EvalReport:
    rows = list(rows)
    if not rows:
        raise ValueError("cannot summarize an empty score table")
    normalized, improvements, excluded = {}, {}, []
    for row in rows:
        try:
            normalized[row.game] = normalized_score(row)
        except DegenerateRowError as exc:
            warnings.warn(f"excluding row: {exc}", stacklevel=2)
            excluded.append(row.game)
            continue
        if row.baseline is not None:
            try:
                improvements[row.game] = improvement(row)
            except DegenerateRowError as exc:
                warnings.warn(f"no improvement for row: {exc}", stacklevel=2)
    if not normalized:
        raise ValueError("no valid rows left to summarize")
    values = sorted(normalized.values())
    return EvalReport(
        normalized=normalized,
        improvements=improvements,
        mean=statistics.fmean(values),
        median=statistics.median(values),
        n_improved=sum(v > 0 for v in improvements.values()),
        excluded=excluded,
    )


def moving_average(series, window: int = 4) -> np.ndarray:
    """Trailing mean over the last ``window`` points; the first points use
    whatever prefix is available."""
    if window < 1:
        raise ValueError("window must be >= 1")
    x = np.asarray(series, dtype=np.float64)
    csum = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(1, len(x) + 1)
    lo = np.maximum(idx - window, 0)
    return (csum[idx] - csum[lo]) / (idx - lo)


@dataclass
class ScoreTable:
    rows: list[ScoreRow]
    problems: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)


def _parse_float(value, column, lineno):
    try:
        return float(value)
    except (TypeError, ValueError):
        raise ValueError(f"line {lineno}: column {column!r} is not numeric ({value!r})") from None


def parse_scores(lines, source: str = "<scores>") -> ScoreTable:
    reader = csv.DictReader(lines)
    if reader.fieldnames is None:
        raise ScoreFormatError(f"{source}: empty score file")
    header = [h.strip() for h in reader.fieldnames]
    reader.fieldnames = header
    missing = [c for c in REQUIRED_COLUMNS if c not in header]
    if missing:
        raise ScoreFormatError(f"{source}: missing required column(s) {', '.join(missing)}")
    has_baseline = "baseline" in header
    rows, problems, seen = [], [], set()
    for rec in reader:
        lineno = reader.line_num
        try:
            game = (rec["game"] or "").strip()
            if not game:
                raise ValueError(f"line {lineno}: empty game name")
            if game in seen:
                raise ValueError(f"line {lineno}: duplicate game {game!r}")
            vals = {c: _parse_float(rec[c], c, lineno) for c in REQUIRED_COLUMNS[1:]}
            base = rec.get("baseline") if has_baseline else None
            base = None if base is None or base.strip() == "" else _parse_float(base, "baseline", lineno)
        except ValueError as exc:
            problems.append(str(exc))
            warnings.warn(f"{source}: {exc}", stacklevel=2)
            continue
        seen.add(game)
        rows.append(ScoreRow(game, baseline=base, **vals))
    if not rows and not problems:
        raise ScoreFormatError(f"{source}: score file has no rows")
    return ScoreTable(rows, problems)


def ingest_scores(path) -> ScoreTable:
    """Read a ``game,random,human,agent[,baseline]`` CSV file."""
    with open(path, newline="", encoding="utf-8") as fh:
        return parse_scores(fh, str(path))


def as_agent(rows, column: str = "baseline") -> list[ScoreRow]:
    """Rows with ``column`` promoted to the agent score (baseline dropped)."""
    return [replace(r, agent=getattr(r, column), baseline=None) for r in rows]


def bundled_path(name: str) -> Path:
    return Path(str(resources.files("optight") / "data" / name))


def atari_raw_scores() -> ScoreTable:
    """Raw 49-game scores: agent = 10M-frame tightened agent, baseline = 200M-frame DQN."""
    return ingest_scores(bundled_path("atari_raw_scores.csv"))


def atari_published_normalized() -> dict[str, tuple[float, float]]:
    """Published per-game normalized percentages as (baseline, agent)."""
    with open(bundled_path("atari_normalized_scores.csv"), newline="", encoding="utf-8") as fh:
        return {r["game"]: (float(r["baseline"]), float(r["agent"])) for r in csv.DictReader(fh)}


def learning_curve_rows(steps, raw, window: int = 4):
    smooth = moving_average(raw, window)
    return [(s, float(r), float(m)) for s, r, m in zip(steps, raw, smooth)]
