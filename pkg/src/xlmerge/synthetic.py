"""Desk-scale synthetic check of merge quality with closed-form adapter fits.

A "world" holds ground-truth weights for every (language, task) cell. In the
additive structure ``W[l, t] = W0 + U[t] + V[l]`` with low-rank task and
language effects; in the multiplicative structure ``W[l, t] = W0 * (s[t] * s[l])``
column-wise. Adapters are fitted to noisy samples of each cell by least
squares, the held-out target cell (language 0, task 0) is synthesized from the
other three by :func:`xlmerge.merge.merge`, and the result is compared against
both the direct fit and the truth.
"""

from __future__ import annotations

import dataclasses
import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations
from typing import Any

import numpy as np

from . import tensor_core as tc
from .adapters import AdapterLayer, AdapterMeta, AdapterSet, Ia3Layer, LoraLayer, compose_delta
from .errors import NumericError, ValidationError
from .merge import ALL_MODULES, MergeConfig, MergeWarning, merge
from .tuning import default_grid

STRUCTURES = ("additive", "multiplicative")
MODULE = "layer.W^Q"
TARGET, TASK_SRC, REF_TGT, REF_SRC = (0, 0), (1, 0), (0, 1), (1, 1)


@dataclass(frozen=True)
class SyntheticSpec:
    d: int = 16
    k: int = 16
    r: int = 6
    L: int = 2
    T: int = 2
    sigma: float = 0.0
    n: int = 128
    t_grid: tuple[float, ...] = field(default_factory=default_grid)
    seed: int = 0
    structure: str = "additive"
    # Size of the language effect; 0 removes it entirely.
    language_scale: float = 1.0
    lora_mode: str = "composed"
    ia3_interpretation: str = "affine"
    include_cross_rule: bool = True

    def __post_init__(self):
        for name in ("d", "k", "r", "L", "T", "n"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ValidationError(f"{name} must be a positive integer, got {value!r}")
        if self.r > min(self.d, self.k):
            raise ValidationError(f"r={self.r} exceeds min(d, k)={min(self.d, self.k)}")
        if not self.sigma >= 0:
            raise ValidationError("sigma must be nonnegative")
        if self.language_scale < 0:
            raise ValidationError("language_scale must be nonnegative")
        grid = tuple(float(t) for t in self.t_grid)
        if not grid or not all(math.isfinite(t) for t in grid):
            raise ValidationError("t_grid must be a non-empty list of finite values")
        object.__setattr__(self, "t_grid", grid)
        if self.structure not in STRUCTURES:
            raise ValidationError(f"structure must be one of {STRUCTURES}")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SyntheticSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown synthetic spec fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["t_grid"] = list(self.t_grid)
        return d

    @property
    def kind(self) -> str:
        return "lora" if self.structure == "additive" else "ia3"


@dataclass(frozen=True)
class World:
    spec: SyntheticSpec
    base: np.ndarray
    task_effects: tuple[np.ndarray, ...]
    language_effects: tuple[np.ndarray, ...]

    def weight(self, language: int, task: int) -> np.ndarray:
        if self.spec.structure == "additive":
            return self.base + self.task_effects[task] + self.language_effects[language]
        return self.base * self.scaling(language, task)[None, :]

    def scaling(self, language: int, task: int) -> np.ndarray:
        return self.task_effects[task] * self.language_effects[language]

    def true_layer_output(self, language: int, task: int) -> np.ndarray:
        """Ground truth in the representation :func:`compose` produces."""
        if self.spec.structure == "additive":
            return self.task_effects[task] + self.language_effects[language]
        return self.weight(language, task)


def _unit_low_rank(rng: np.random.Generator, d: int, k: int, rank: int, norm: float) -> np.ndarray:
    M = tc.matmul(rng.standard_normal((d, rank)), rng.standard_normal((rank, k)))
    return M * (norm / tc.frobenius_norm(M))


def generate_world(spec: SyntheticSpec) -> World:
    """Deterministic ground truth for every (language, task) cell."""
    rng = np.random.default_rng([spec.seed, 0])
    base = rng.standard_normal((spec.d, spec.k)) / math.sqrt(spec.k)
    if spec.structure == "additive":
        q = math.ceil(spec.r / 2)
        tasks = tuple(_unit_low_rank(rng, spec.d, spec.k, q, 1.0) for _ in range(spec.T))
        langs = tuple(
            _unit_low_rank(rng, spec.d, spec.k, q, 1.0) * spec.language_scale for _ in range(spec.L)
        )
    else:
        # Log-uniform factors in [2^-1/2, 2^1/2], so their products stay in [0.5, 2].
        half = math.log(2.0) / 2
        tasks = tuple(np.exp(rng.uniform(-half, half, spec.k)) for _ in range(spec.T))
        langs = tuple(
            np.exp(spec.language_scale * rng.uniform(-half, half, spec.k)) for _ in range(spec.L)
        )
    return World(spec, base, tasks, langs)


def fit_adapter(world: World, language: int, task: int, spec: SyntheticSpec | None = None) -> AdapterLayer:
    """Closed-form least-squares fit of one cell, reduced to an adapter layer.

    Draws ``n`` inputs ``x ~ N(0, I)``, observes ``y = W x + noise`` and solves
    ``W_hat = Y X^T pinv(X X^T)``. LoRA keeps the best rank-``r`` approximation
    of ``W_hat - W0``; (IA)^3 takes the ratio of column norms of ``W_hat`` and ``W0``.
    """
    spec = spec or world.spec
    if not (0 <= language < spec.L and 0 <= task < spec.T):
        raise ValidationError(f"cell ({language}, {task}) is outside the {spec.L}x{spec.T} world")
    if spec.n < spec.k:
        raise NumericError(f"n={spec.n} samples cannot determine k={spec.k} columns; use n >= k")
    rng = np.random.default_rng([spec.seed, 1, language, task])
    X = rng.standard_normal((spec.k, spec.n))
    noise = rng.standard_normal((spec.d, spec.n))
    Y = tc.matmul(world.weight(language, task), X) + spec.sigma * noise
    gram = tc.matmul(X, X.T)
    gram_pinv, rank = tc.pinv(gram, return_rank=True)
    if rank < spec.k:
        raise NumericError(f"X X^T is numerically singular (rank {rank} < {spec.k}); increase n")
    W_hat = tc.matmul(tc.matmul(Y, X.T), gram_pinv)
    if spec.structure == "additive":
        B, A = tc.truncated_factors(W_hat - world.base, spec.r)
        return LoraLayer(B, A)
    col = np.sqrt(np.sum(W_hat * W_hat, axis=0))
    base_col = np.sqrt(np.sum(world.base * world.base, axis=0))
    return Ia3Layer(col / base_col)


def compose(layer: AdapterLayer, world: World) -> np.ndarray:
    """LoRA: the weight delta. (IA)^3: the rescaled weight ``W0 * v``."""
    if isinstance(layer, LoraLayer):
        return compose_delta(layer)
    return world.base * tc.as_tensor(layer.v)[None, :]


def as_set(layer: AdapterLayer, language: int, task: int) -> AdapterSet:
    return AdapterSet(layer.kind, {MODULE: layer}, AdapterMeta(language=f"l{language}", task=f"t{task}"))


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = tc.frobenius_norm(a), tc.frobenius_norm(b)
    if na == 0.0 and nb == 0.0:
        return 1.0
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.sum((a / na) * (b / nb)))


def _divergence(world: World, fits: dict, task: int) -> np.ndarray:
    tgt, src = fits[(0, task)], fits[(1, task)]
    if world.spec.structure == "additive":
        return compose(tgt, world) - compose(src, world)
    return tc.ew_div(tgt.v, src.v) - 1.0


def variants(spec: SyntheticSpec) -> dict[str, MergeConfig]:
    """Merge configurations compared on one world; the first is the primary one."""
    if spec.structure == "additive":
        primary = f"lora_{spec.lora_mode}"
        out = {
            "lora_composed": MergeConfig(t=1.0, lora_mode="composed", merge_filter=ALL_MODULES),
            "lora_factorwise": MergeConfig(t=1.0, lora_mode="factorwise", merge_filter=ALL_MODULES),
        }
        if spec.include_cross_rule:
            out["cross_ia3"] = MergeConfig(
                t=1.0,
                lora_mode="composed",
                merge_filter=ALL_MODULES,
                cross_rule_override="ia3_multiplicative",
                ia3_interpretation=spec.ia3_interpretation,
            )
    else:
        primary = f"ia3_{spec.ia3_interpretation}"
        out = {
            "ia3_affine": MergeConfig(t=1.0, ia3_interpretation="affine", merge_filter=ALL_MODULES),
            "ia3_literal": MergeConfig(t=1.0, ia3_interpretation="literal", merge_filter=ALL_MODULES),
        }
        if spec.include_cross_rule:
            out["cross_lora"] = MergeConfig(t=1.0, merge_filter=ALL_MODULES, cross_rule_override="lora_additive")
    return {primary: out.pop(primary), **out}


@dataclass
class ExperimentReport:
    spec: dict
    primary: str
    direct_fit_error: dict[str, float]
    target_direct_error: float
    curves: dict[str, dict]
    divergence_similarity: dict[str, float]
    clamp_count: int
    warning_count: int

    @property
    def best_t(self) -> float:
        return self.curves[self.primary]["best_t"]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self) | {"best_t": self.best_t}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self) -> str:
        names = list(self.curves)
        head = ["t"] + [f"{n}:vs_direct" for n in names] + [f"{n}:vs_truth" for n in names]
        rows = []
        for i, t in enumerate(self.curves[self.primary]["t"]):
            row = [f"{t:g}"]
            row += [f"{self.curves[n]['merged_vs_direct'][i]:.3e}" for n in names]
            row += [f"{self.curves[n]['merged_vs_truth'][i]:.3e}" for n in names]
            rows.append(row)
        widths = [max(len(h), *(len(r[j]) for r in rows)) for j, h in enumerate(head)]
        fmt = lambda cells: "  ".join(c.rjust(w) for c, w in zip(cells, widths))
        lines = [fmt(head), fmt(["-" * w for w in widths])] + [fmt(r) for r in rows]
        lines.append("")
        lines.append(f"target direct-fit error  {self.target_direct_error:.3e}")
        for n in names:
            c = self.curves[n]
            lines.append(
                f"{n:<16} best t={c['best_t']:g}  vs_direct={c['best_error']:.3e}  "
                f"vs_truth={c['best_truth_error']:.3e}  clamps={c['clamp_count']}"
            )
        lines.append(f"divergence cosine min    {self.divergence_similarity['min']:.12f}")
        return "\n".join(lines)


def run_experiment(spec: SyntheticSpec, threads: int = 1) -> ExperimentReport:
    """Fit the three source adapters and the target oracle, merge over the t grid, report errors."""
    if spec.L < 2 or spec.T < 2:
        raise ValidationError("run_experiment needs at least two languages and two tasks")
    world = generate_world(spec)
    cells = [(l, t) for l in range(spec.L) for t in range(spec.T)]
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    run = pool.map if pool else map
    try:
        fitted = list(run(lambda c: fit_adapter(world, *c, spec), cells))
        fits = dict(zip(cells, fitted))
        direct = {
            f"l{l}t{t}": tc.rel_error(compose(fits[(l, t)], world), world.true_layer_output(l, t)) for l, t in cells
        }
        target_out = compose(fits[TARGET], world)
        truth = world.true_layer_output(*TARGET)
        sets = {c: as_set(fits[c], *c) for c in (TASK_SRC, REF_TGT, REF_SRC)}

        configs = variants(spec)
        jobs = [(name, t) for name in configs for t in spec.t_grid]

        def job(item):
            name, t = item
            merged = merge(sets[TASK_SRC], sets[REF_TGT], sets[REF_SRC], dataclasses.replace(configs[name], t=t))
            out = compose(merged.layers[MODULE], world)
            rec = merged.meta.notes["merge"]
            return tc.rel_error(out, target_out), tc.rel_error(out, truth), rec["clamp_count"], len(rec["warnings"])

        with warnings.catch_warnings():
            warnings.simplefilter("ignore", MergeWarning)
            results = dict(zip(jobs, run(job, jobs)))
    finally:
        if pool:
            pool.shutdown()

    curves, clamps, warns = {}, 0, 0
    for name in configs:
        vs_direct = [results[(name, t)][0] for t in spec.t_grid]
        vs_truth = [results[(name, t)][1] for t in spec.t_grid]
        c = sum(results[(name, t)][2] for t in spec.t_grid)
        clamps += c
        warns += sum(results[(name, t)][3] for t in spec.t_grid)
        # Smallest error wins; ties go to the smaller t.
        best = min(range(len(spec.t_grid)), key=lambda i: (vs_direct[i], spec.t_grid[i]))
        curves[name] = {
            "t": list(spec.t_grid),
            "merged_vs_direct": vs_direct,
            "merged_vs_truth": vs_truth,
            "best_t": spec.t_grid[best],
            "best_error": vs_direct[best],
            "best_truth_error": vs_truth[best],
            "clamp_count": c,
        }

    divs = {t: _divergence(world, fits, t) for t in range(spec.T)}
    pairs = {f"t{a}~t{b}": _cosine(divs[a], divs[b]) for a, b in combinations(range(spec.T), 2)}
    similarity = {"min": min(pairs.values()), **pairs}

    return ExperimentReport(
        spec=spec.to_dict(),
        primary=next(iter(configs)),
        direct_fit_error=direct,
        target_direct_error=direct["l0t0"],
        curves=curves,
        divergence_similarity=similarity,
        clamp_count=clamps,
        warning_count=warns,
    )
