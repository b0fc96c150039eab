"""Grid search over the merge scale ``t`` against an external or in-process scorer."""

from __future__ import annotations

import dataclasses
import logging
import math
import shlex
import subprocess
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Union

from .adapters import AdapterSet
from .checkpoint import write_checkpoint
from .errors import SweepError, ValidationError
from .merge import MergeConfig, merge

logger = logging.getLogger(__name__)

Scorer = Union[str, Mapping[float, float], Callable[[float, AdapterSet], float]]


def default_grid() -> tuple[float, ...]:
    return tuple(round(0.1 * i, 10) for i in range(21))


def make_grid(start: float, stop: float, step: float) -> tuple[float, ...]:
    """Inclusive grid ``start, start + step, ..., stop`` rounded to 10 decimals."""
    if step <= 0:
        raise ValidationError("grid step must be positive")
    count = int(math.floor((stop - start) / step + 1e-9)) + 1
    if count < 1:
        raise ValidationError(f"empty grid from {start} to {stop}")
    return tuple(round(start + i * step, 10) for i in range(count))


def _key(t: float) -> float:
    return round(float(t), 10)


def read_score_file(path) -> dict[float, float]:
    """Two whitespace-separated columns ``t score`` per line; ``#`` starts a comment."""
    scores = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 2:
            raise ValidationError(f"{path}:{lineno}: expected two columns, got {line!r}")
        try:
            t, s = float(parts[0]), float(parts[1])
        except ValueError:
            raise ValidationError(f"{path}:{lineno}: non-numeric entry {line!r}") from None
        scores[_key(t)] = s
    return scores


@dataclass(frozen=True)
class SweepPlan:
    """Candidate ``t`` values and how to score a merged adapter.

    ``scorer`` is one of: a command template (``{checkpoint}`` is replaced by the
    merged checkpoint path and ``{t}`` by the value; the command must print one
    number as its last output line), a mapping ``t -> score``, or a callable
    ``(t, merged_set) -> score``.
    """

    scorer: Scorer
    t_grid: tuple[float, ...] = field(default_factory=default_grid)
    direction: str = "maximize"
    reentrant: bool = False

    def __post_init__(self):
        grid = sorted(float(t) for t in self.t_grid)
        if not grid:
            raise ValidationError("t grid is empty")
        if any(not math.isfinite(t) for t in grid):
            raise ValidationError("t grid values must be finite")
        if len({_key(t) for t in grid}) != len(grid):
            raise ValidationError("t grid contains duplicate values")
        object.__setattr__(self, "t_grid", tuple(grid))
        if self.direction not in ("maximize", "minimize"):
            raise ValidationError("direction must be 'maximize' or 'minimize'")
        if self.scorer is None or (isinstance(self.scorer, str) and not self.scorer.strip()):
            raise ValidationError("a scorer is required")
        if isinstance(self.scorer, Mapping):
            object.__setattr__(self, "scorer", {_key(t): float(s) for t, s in self.scorer.items()})


@dataclass
class SweepResult:
    best_t: float
    best_score: float
    table: list[tuple[float, float]]
    direction: str

    def to_dict(self) -> dict:
        return {
            "best_t": self.best_t,
            "best_score": self.best_score,
            "direction": self.direction,
            "table": [{"t": t, "score": s} for t, s in self.table],
        }

    def to_text(self) -> str:
        width = max(len(f"{t:g}") for t, _ in self.table)
        lines = [f"{'t':>{width}}  score"]
        for t, s in self.table:
            mark = "  *" if t == self.best_t else ""
            lines.append(f"{t:>{width}g}  {s:.6g}{mark}")
        lines.append(f"best t = {self.best_t:g} (score {self.best_score:.6g}, {self.direction})")
        return "\n".join(lines)


def run_command_scorer(template: str, checkpoint: Path, t: float, timeout: float | None = None) -> float:
    argv = [tok.replace("{checkpoint}", str(checkpoint)).replace("{t}", repr(t)) for tok in shlex.split(template)]
    try:
        proc = subprocess.run(argv, capture_output=True, text=True, timeout=timeout, check=False)
    except (OSError, subprocess.TimeoutExpired) as exc:
        raise SweepError(t, f"scorer command failed to run: {exc}") from None
    if proc.returncode != 0:
        raise SweepError(t, f"scorer exited with status {proc.returncode}: {proc.stderr.strip()[-500:]}")
    lines = [ln.strip() for ln in proc.stdout.splitlines() if ln.strip()]
    if not lines:
        raise SweepError(t, "scorer printed nothing")
    try:
        score = float(lines[-1])
    except ValueError:
        raise SweepError(t, f"scorer output {lines[-1]!r} is not a number") from None
    if not math.isfinite(score):
        raise SweepError(t, f"scorer returned non-finite score {score}")
    return score


def select_best(table: list[tuple[float, float]], direction: str = "maximize") -> tuple[float, float]:
    """Best (t, score); exact ties go to the smallest t."""
    sign = -1.0 if direction == "maximize" else 1.0
    t, s = min(table, key=lambda row: (sign * row[1], row[0]))
    return t, s


def sweep_t(
    task_src: AdapterSet,
    ref_tgt: AdapterSet,
    ref_src: AdapterSet,
    cfg_base: MergeConfig,
    plan: SweepPlan,
    workdir=None,
    threads: int = 1,
) -> SweepResult:
    """Merge once per grid value, score each merge, and return the best ``t``."""
    scorer = plan.scorer
    tmp = None
    if isinstance(scorer, str):
        if workdir is None:
            tmp = tempfile.TemporaryDirectory(prefix="xlmerge-sweep-")
            workdir = tmp.name
        workdir = Path(workdir)
        workdir.mkdir(parents=True, exist_ok=True)

    def score(t: float) -> float:
        if isinstance(scorer, Mapping):
            if _key(t) not in scorer:
                raise SweepError(t, "no score listed for this t")
            return scorer[_key(t)]
        merged = merge(task_src, ref_tgt, ref_src, dataclasses.replace(cfg_base, t=t))
        if callable(scorer):
            value = scorer(t, merged)
        else:
            ckpt = workdir / f"merged_t{t:g}.amgx"
            write_checkpoint(merged, ckpt)
            value = run_command_scorer(scorer, ckpt, t)
        try:
            value = float(value)
        except (TypeError, ValueError):
            raise SweepError(t, f"scorer returned non-numeric {value!r}") from None
        if not math.isfinite(value):
            raise SweepError(t, f"scorer returned non-finite score {value}")
        logger.debug("t=%g score=%g", t, value)
        return value

    parallel = threads > 1 and (plan.reentrant or not isinstance(scorer, str))
    try:
        if parallel:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                scores = list(pool.map(score, plan.t_grid))
        else:
            scores = [score(t) for t in plan.t_grid]
    finally:
        if tmp is not None:
            tmp.cleanup()
    table = list(zip(plan.t_grid, scores))
    best_t, best_score = select_best(table, plan.direction)
    return SweepResult(best_t=best_t, best_score=best_score, table=table, direction=plan.direction)
