"""Structure-adaptive merging of a task adapter with a language divergence.

Given a task adapter fine-tuned in the source language (``task_src``) and two
adapters trained on a shared reference task in the target and source
languages (``ref_tgt``, ``ref_src``), each rule estimates the adapter for the
task in the target language:

* ``lora_additive``:      task + t * (tgt - src)
* ``ia3_multiplicative``: task * (t * (tgt / src - 1) + 1)   (affine reading)
* ``prefix_matmul``:      t * (tgt @ pinv(src)) @ task

Only modules selected by the merge filter receive the divergence; all other
modules are copied from ``task_src`` untouched.
"""

from __future__ import annotations

import dataclasses
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor_core as tc
from .adapters import (
    AdapterLayer,
    AdapterMeta,
    AdapterSet,
    Ia3Layer,
    LoraLayer,
    PrefixLayer,
    compose_delta,
    module_matches,
    select_modules,
    validate_merge_inputs,
)
from .errors import NumericError, ValidationError

logger = logging.getLogger(__name__)

RULES = ("lora_additive", "ia3_multiplicative", "prefix_matmul")
NATIVE_RULE = {"lora": "lora_additive", "ia3": "ia3_multiplicative", "prefix": "prefix_matmul"}
IA3_INTERPRETATIONS = ("affine", "literal")
LORA_MODES = ("factorwise", "composed")

# Query and value projections, under both naming conventions in common use.
DEFAULT_LORA_FILTER = ("*W^Q*", "*W^V*", "q_proj", "v_proj")
ALL_MODULES = ("*",)


class MergeWarning(UserWarning):
    pass


@dataclass(frozen=True)
class MergeConfig:
    """Settings for one merge.

    ``rule=None`` follows the adapter kind. ``cross_rule_override`` forces a
    different rule's arithmetic onto the inputs (ablation mode); the output
    metadata records that it happened.
    """

    t: float
    rule: str | None = None
    ia3_interpretation: str = "affine"
    lora_mode: str = "factorwise"
    merge_filter: tuple[str, ...] | None = None
    cross_rule_override: str | None = None
    div_eps: float = 1e-8
    pinv_rtol: float | None = None

    def __post_init__(self):
        if not np.isfinite(self.t):
            raise ValidationError(f"t must be finite, got {self.t!r}")
        object.__setattr__(self, "t", float(self.t))
        for name, value, allowed in (
            ("rule", self.rule, RULES),
            ("cross_rule_override", self.cross_rule_override, RULES),
        ):
            if value is not None and value not in allowed:
                raise ValidationError(f"unknown {name} {value!r}; expected one of {allowed}")
        if self.ia3_interpretation not in IA3_INTERPRETATIONS:
            raise ValidationError(f"ia3_interpretation must be one of {IA3_INTERPRETATIONS}")
        if self.lora_mode not in LORA_MODES:
            raise ValidationError(f"lora_mode must be one of {LORA_MODES}")
        if self.merge_filter is not None:
            patterns = tuple(self.merge_filter)
            if not patterns or any(not p for p in patterns):
                raise ValidationError("merge_filter patterns must be non-empty")
            object.__setattr__(self, "merge_filter", patterns)
        if self.div_eps < 0:
            raise ValidationError("div_eps must be nonnegative")

    def filter_for(self, kind: str) -> tuple[str, ...]:
        if self.merge_filter is not None:
            return self.merge_filter
        return DEFAULT_LORA_FILTER if kind == "lora" else ALL_MODULES

    def rule_for(self, kind: str) -> str:
        if self.cross_rule_override is not None:
            return self.cross_rule_override
        native = NATIVE_RULE[kind]
        if self.rule is not None and self.rule != native:
            raise ValidationError(
                f"rule {self.rule!r} does not match adapter kind {kind!r}; "
                "set cross_rule_override to apply it anyway"
            )
        return native

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if d["merge_filter"] is not None:
            d["merge_filter"] = list(d["merge_filter"])
        return d


# -- rule kernels on plain matrices -------------------------------------------------


def additive_rule(task, tgt, src, t: float) -> np.ndarray:
    return tc.ew_add(task, tc.scale(tc.ew_sub(tgt, src), t))


def multiplicative_rule(task, tgt, src, t: float, interpretation: str = "affine", eps: float = 1e-8):
    """Returns ``(merged, n_clamped)``.

    ``literal`` keeps the ``(t * ratio - 1) + 1`` parenthesization, which
    reduces to ``t * ratio``; ``affine`` uses ``t * (ratio - 1) + 1`` so that
    t = 0 and ratio = 1 are both exact identities.
    """
    ratio, n_clamped = tc.ew_div(tgt, src, eps, return_count=True)
    ones = np.ones_like(ratio)
    if interpretation == "affine":
        factor = tc.ew_add(tc.scale(tc.ew_sub(ratio, ones), t), ones)
    elif interpretation == "literal":
        factor = tc.ew_add(tc.ew_sub(tc.scale(ratio, t), ones), ones)
    else:
        raise ValidationError(f"unknown (IA)^3 interpretation {interpretation!r}")
    return tc.ew_mul(task, factor), n_clamped


def matmul_rule(task, tgt, src, t: float, rtol: float | None = None):
    """Returns ``(t * (tgt @ pinv(src)) @ task, numerical rank of src)``."""
    src_pinv, rank = tc.pinv(src, rtol, return_rank=True)
    transfer = tc.scale(tc.matmul(tgt, src_pinv), t)
    return tc.matmul(transfer, task), rank


# -- per-layer merge -----------------------------------------------------------------


@dataclass
class _LayerOutcome:
    layer: AdapterLayer
    clamped: int = 0
    warnings: list[str] = dataclasses.field(default_factory=list)


def _as_matrices(layer: AdapterLayer, lora_mode: str) -> list[np.ndarray]:
    if isinstance(layer, LoraLayer):
        if lora_mode == "composed":
            return [compose_delta(layer)]
        return [tc.as_tensor(layer.B), tc.as_tensor(layer.A)]
    if isinstance(layer, Ia3Layer):
        return [tc.as_tensor(layer.v)[None, :]]
    return [tc.as_tensor(layer.P)]


def composed_rank(task: LoraLayer, ref: LoraLayer) -> int:
    return min(task.rank + 2 * ref.rank, min(task.d, task.k))


def _rebuild(task: AdapterLayer, ref: AdapterLayer, mats: list[np.ndarray], lora_mode: str, dtype) -> AdapterLayer:
    if isinstance(task, LoraLayer):
        if lora_mode == "composed":
            B, A = tc.truncated_factors(mats[0], composed_rank(task, ref))
            return LoraLayer(B.astype(dtype), A.astype(dtype), scale=1.0)
        return LoraLayer(mats[0].astype(dtype), mats[1].astype(dtype), scale=task.scale)
    if isinstance(task, Ia3Layer):
        return Ia3Layer(mats[0][0].astype(dtype))
    return PrefixLayer(mats[0].astype(dtype))


def merge_layer(
    path: str,
    task: AdapterLayer,
    tgt: AdapterLayer,
    src: AdapterLayer,
    rule: str,
    cfg: MergeConfig,
    dtype=np.float64,
) -> _LayerOutcome:
    """Apply ``rule`` to one module. The layer kind decides the representation
    the rule acts on (factors, composed delta, scaling row, or prefix matrix)."""
    lora_mode = cfg.lora_mode
    if isinstance(task, LoraLayer) and lora_mode == "factorwise":
        scales = {task.scale, tgt.scale, src.scale}
        if len(scales) > 1:
            raise ValidationError(
                f"module {path!r}: factorwise LoRA merging needs equal scales, got {sorted(scales)}; "
                "use lora_mode='composed'"
            )
    out = _LayerOutcome(layer=task)
    merged = []
    for m_task, m_tgt, m_src in zip(_as_matrices(task, lora_mode), _as_matrices(tgt, lora_mode), _as_matrices(src, lora_mode)):
        if rule == "lora_additive":
            merged.append(additive_rule(m_task, m_tgt, m_src, cfg.t))
        elif rule == "ia3_multiplicative":
            res, n = multiplicative_rule(m_task, m_tgt, m_src, cfg.t, cfg.ia3_interpretation, cfg.div_eps)
            merged.append(res)
            out.clamped += n
        else:
            res, rank = matmul_rule(m_task, m_tgt, m_src, cfg.t, cfg.pinv_rtol)
            merged.append(res)
            if rank < min(m_src.shape):
                out.warnings.append(
                    f"module {path!r}: reference matrix {m_src.shape} has numerical rank {rank}; "
                    "pseudo-inverse acts as a projection"
                )
    if out.clamped:
        out.warnings.append(f"module {path!r}: {out.clamped} divisor entries clamped to eps={cfg.div_eps}")
    for m in merged:
        if not np.all(np.isfinite(m)):
            raise NumericError(f"module {path!r}: merge produced non-finite values")
    out.layer = _rebuild(task, tgt, merged, lora_mode, dtype)
    return out


# -- set-level merging ---------------------------------------------------------------


def _merge_sets(
    task_src: AdapterSet,
    ref_tgt: AdapterSet,
    ref_src: AdapterSet,
    cfg: MergeConfig,
    rule: str,
    threads: int = 1,
) -> AdapterSet:
    patterns = cfg.filter_for(task_src.kind)
    selected = select_modules(task_src, patterns)
    validate_merge_inputs(task_src, ref_tgt, ref_src, required=selected).raise_for_violations()
    if not selected:
        warnings.warn(f"merge filter {list(patterns)} matched no modules", MergeWarning, stacklevel=3)

    dtype = np.result_type(task_src.dtype, ref_tgt.dtype, ref_src.dtype)

    def work(path: str) -> _LayerOutcome:
        return merge_layer(
            path, task_src.layers[path], ref_tgt.layers[path], ref_src.layers[path], rule, cfg, dtype
        )

    if threads > 1 and len(selected) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = dict(zip(selected, pool.map(work, selected)))
    else:
        outcomes = {p: work(p) for p in selected}

    layers = {}
    messages = []
    clamped = 0
    for path, layer in task_src.layers.items():
        if path in outcomes:
            layers[path] = outcomes[path].layer
            messages += outcomes[path].warnings
            clamped += outcomes[path].clamped
        else:
            layers[path] = layer
    for msg in messages:
        warnings.warn(msg, MergeWarning, stacklevel=3)

    native = NATIVE_RULE[task_src.kind]
    record = {
        "rule": rule,
        "native_rule": native,
        "cross_rule": rule != native,
        "t": cfg.t,
        "lora_mode": cfg.lora_mode if task_src.kind == "lora" else None,
        "ia3_interpretation": cfg.ia3_interpretation if rule == "ia3_multiplicative" else None,
        "merge_filter": list(patterns),
        "config": cfg.to_dict(),
        "merged_modules": selected,
        "copied_modules": [p for p in task_src.layers if p not in outcomes],
        "clamp_count": clamped,
        "warnings": messages,
        "inputs": {
            "task_src": {"language": task_src.meta.language, "task": task_src.meta.task, "sha256": task_src.fingerprint()},
            "ref_tgt": {"language": ref_tgt.meta.language, "task": ref_tgt.meta.task, "sha256": ref_tgt.fingerprint()},
            "ref_src": {"language": ref_src.meta.language, "task": ref_src.meta.task, "sha256": ref_src.fingerprint()},
        },
    }
    meta = AdapterMeta(
        language=ref_tgt.meta.language,
        task=task_src.meta.task,
        base_model=task_src.meta.base_model,
        notes={"merge": record},
    )
    logger.info("merged %d modules, copied %d (rule=%s, t=%g)", len(selected), len(layers) - len(selected), rule, cfg.t)
    return AdapterSet(task_src.kind, layers, meta)


def _require_kind(kind: str, *sets: AdapterSet) -> None:
    for s in sets:
        if s.kind != kind:
            raise ValidationError(f"expected {kind} adapters, got {s.kind}")


def merge_lora(task_src, ref_tgt, ref_src, cfg: MergeConfig, threads: int = 1) -> AdapterSet:
    _require_kind("lora", task_src, ref_tgt, ref_src)
    return _merge_sets(task_src, ref_tgt, ref_src, cfg, cfg.rule_for("lora"), threads)


def merge_ia3(task_src, ref_tgt, ref_src, cfg: MergeConfig, threads: int = 1) -> AdapterSet:
    _require_kind("ia3", task_src, ref_tgt, ref_src)
    return _merge_sets(task_src, ref_tgt, ref_src, cfg, cfg.rule_for("ia3"), threads)


def merge_prefix(task_src, ref_tgt, ref_src, cfg: MergeConfig, threads: int = 1) -> AdapterSet:
    _require_kind("prefix", task_src, ref_tgt, ref_src)
    return _merge_sets(task_src, ref_tgt, ref_src, cfg, cfg.rule_for("prefix"), threads)


_DISPATCH = {"lora": merge_lora, "ia3": merge_ia3, "prefix": merge_prefix}


def merge(task_src: AdapterSet, ref_tgt: AdapterSet, ref_src: AdapterSet, cfg: MergeConfig, threads: int = 1) -> AdapterSet:
    """Merge the task adapter with the reference divergence, dispatching on kind."""
    kinds = {task_src.kind, ref_tgt.kind, ref_src.kind}
    if len(kinds) > 1:
        validate_merge_inputs(task_src, ref_tgt, ref_src).raise_for_violations()
    if task_src.kind not in _DISPATCH:
        raise ValidationError(f"unsupported adapter kind {task_src.kind!r}")
    return _DISPATCH[task_src.kind](task_src, ref_tgt, ref_src, cfg, threads)


# -- divergence ----------------------------------------------------------------------


def diverge_layer(path: str, tgt: AdapterLayer, src: AdapterLayer, lora_mode="factorwise", eps=1e-8, rtol=None):
    """Divergence of one module: difference, ratio, or ``tgt @ pinv(src)``."""
    if isinstance(tgt, LoraLayer):
        if lora_mode == "composed":
            delta = tc.ew_sub(compose_delta(tgt), compose_delta(src))
            B, A = tc.truncated_factors(delta, min(2 * tgt.rank, min(tgt.d, tgt.k)))
            return LoraLayer(B, A), 0
        if tgt.scale != src.scale:
            raise ValidationError(f"module {path!r}: factorwise divergence needs equal LoRA scales")
        return LoraLayer(tc.ew_sub(tgt.B, src.B), tc.ew_sub(tgt.A, src.A), scale=tgt.scale), 0
    if isinstance(tgt, Ia3Layer):
        ratio, n = tc.ew_div(tgt.v, src.v, eps, return_count=True)
        return Ia3Layer(ratio), n
    transfer = tc.matmul(tgt.P, tc.pinv(src.P, rtol))
    return PrefixLayer(transfer), 0


def diverge(
    ref_tgt: AdapterSet,
    ref_src: AdapterSet,
    modules: Sequence[str] | None = None,
    lora_mode: str = "factorwise",
    eps: float = 1e-8,
    rtol: float | None = None,
) -> AdapterSet:
    """Materialize the language divergence between two reference adapters.

    ``modules`` restricts the computation to matching glob patterns; by default
    every module is used.
    """
    if ref_tgt.kind != ref_src.kind:
        raise ValidationError(f"kind mismatch: ref_tgt={ref_tgt.kind}, ref_src={ref_src.kind}")
    selected = select_modules(ref_tgt, modules or ALL_MODULES)
    validate_merge_inputs(ref_tgt, ref_tgt, ref_src, required=selected).raise_for_violations()
    layers, clamped = {}, 0
    for path in selected:
        layer, n = diverge_layer(path, ref_tgt.layers[path], ref_src.layers[path], lora_mode, eps, rtol)
        layers[path] = layer
        clamped += n
    if clamped:
        warnings.warn(f"{clamped} divisor entries clamped to eps={eps}", MergeWarning, stacklevel=2)
    meta = AdapterMeta(
        language=f"{ref_tgt.meta.language}|{ref_src.meta.language}",
        task=ref_tgt.meta.task,
        base_model=ref_tgt.meta.base_model,
        notes={
            "divergence": {
                "kind": ref_tgt.kind,
                "lora_mode": lora_mode if ref_tgt.kind == "lora" else None,
                "modules": selected,
                "clamp_count": clamped,
                "inputs": {"ref_tgt": ref_tgt.fingerprint(), "ref_src": ref_src.fingerprint()},
            }
        },
    )
    return AdapterSet(ref_tgt.kind, layers, meta)


def diverge_lora(ref_tgt: AdapterSet, ref_src: AdapterSet, modules: Sequence[str] | None = None) -> AdapterSet:
    """Factor-wise ``B_tgt - B_src`` and ``A_tgt - A_src`` for every selected module."""
    _require_kind("lora", ref_tgt, ref_src)
    return diverge(ref_tgt, ref_src, modules=modules, lora_mode="factorwise")
