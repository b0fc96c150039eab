"""Adapter layer types, adapter sets, and compatibility checks for merging."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import re
import warnings
from dataclasses import dataclass, field
from fnmatch import fnmatchcase
from typing import Any, ClassVar, Iterable, Mapping, Sequence, Union

import numpy as np

from . import tensor_core as tc
from .errors import ValidationError

KINDS = ("lora", "ia3", "prefix")


class AdapterWarning(UserWarning):
    pass


def _frozen(x) -> np.ndarray:
    a = np.asarray(x)
    if a.dtype not in (np.float32, np.float64):
        a = a.astype(np.float64)
    a = np.array(a, copy=True, order="C")
    a.setflags(write=False)
    return a


def _bitwise_equal(a: np.ndarray, b: np.ndarray) -> bool:
    return a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()


class _Layer:
    kind: ClassVar[str]
    roles: ClassVar[tuple[str, ...]]

    def tensors(self) -> dict[str, np.ndarray]:
        return {role: getattr(self, role) for role in self.roles}

    @property
    def param_count(self) -> int:
        return sum(t.size for t in self.tensors().values())

    @property
    def dtype(self) -> np.dtype:
        return np.result_type(*self.tensors().values())

    def __eq__(self, other) -> bool:
        if type(other) is not type(self):
            return NotImplemented
        same = all(_bitwise_equal(x, y) for x, y in zip(self.tensors().values(), other.tensors().values()))
        return same and getattr(self, "scale", None) == getattr(other, "scale", None)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class LoraLayer(_Layer):
    """Low-rank factor pair; the weight delta is ``scale * B @ A``."""

    B: np.ndarray
    A: np.ndarray
    scale: float = 1.0

    kind: ClassVar[str] = "lora"
    roles: ClassVar[tuple[str, ...]] = ("B", "A")

    def __post_init__(self):
        B, A = _frozen(self.B), _frozen(self.A)
        if B.ndim != 2 or A.ndim != 2:
            raise ValidationError(f"LoRA factors must be 2-D, got B{B.shape} A{A.shape}")
        if B.shape[1] != A.shape[0] or B.shape[1] < 1:
            raise ValidationError(f"LoRA rank mismatch: B{B.shape} vs A{A.shape}")
        if not np.isfinite(self.scale):
            raise ValidationError("LoRA scale must be finite")
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "scale", float(self.scale))
        if self.rank > min(self.d, self.k):
            warnings.warn(
                f"LoRA rank {self.rank} exceeds min(d, k) = {min(self.d, self.k)}",
                AdapterWarning,
                stacklevel=3,
            )

    @property
    def rank(self) -> int:
        return self.B.shape[1]

    @property
    def d(self) -> int:
        return self.B.shape[0]

    @property
    def k(self) -> int:
        return self.A.shape[1]


@dataclass(frozen=True, eq=False)
class Ia3Layer(_Layer):
    """Per-column scaling vector applied element-wise to each row of the frozen weight."""

    v: np.ndarray

    kind: ClassVar[str] = "ia3"
    roles: ClassVar[tuple[str, ...]] = ("v",)

    def __post_init__(self):
        v = _frozen(self.v)
        if v.ndim != 1 or v.size < 1:
            raise ValidationError(f"(IA)^3 vector must be 1-D and non-empty, got shape {v.shape}")
        object.__setattr__(self, "v", v)

    @property
    def k(self) -> int:
        return self.v.shape[0]


@dataclass(frozen=True, eq=False)
class PrefixLayer(_Layer):
    """Prefix token matrix, one row per token (m x d)."""

    P: np.ndarray

    kind: ClassVar[str] = "prefix"
    roles: ClassVar[tuple[str, ...]] = ("P",)

    def __post_init__(self):
        P = _frozen(self.P)
        if P.ndim != 2 or min(P.shape) < 1:
            raise ValidationError(f"prefix matrix must be 2-D and non-empty, got shape {P.shape}")
        object.__setattr__(self, "P", P)


AdapterLayer = Union[LoraLayer, Ia3Layer, PrefixLayer]
LAYER_TYPES: dict[str, type] = {"lora": LoraLayer, "ia3": Ia3Layer, "prefix": PrefixLayer}


def layer_from_tensors(kind: str, tensors: Mapping[str, np.ndarray], scale: float = 1.0) -> AdapterLayer:
    if kind not in LAYER_TYPES:
        raise ValidationError(f"unsupported adapter kind {kind!r}; expected one of {KINDS}")
    cls = LAYER_TYPES[kind]
    missing = [r for r in cls.roles if r not in tensors]
    if missing:
        raise ValidationError(f"{kind} layer is missing tensors {missing}")
    kwargs = {r: tensors[r] for r in cls.roles}
    if kind == "lora":
        kwargs["scale"] = scale
    return cls(**kwargs)


@dataclass(frozen=True)
class AdapterMeta:
    language: str = ""
    task: str = ""
    base_model: str = ""
    notes: dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class AdapterSet:
    """Adapter layers of one kind keyed by module path, plus (language, task) labels.

    Layers are stored in sorted module-path order whatever order they were
    given in, so iteration order never depends on how a set was built.
    """

    kind: str
    layers: Mapping[str, AdapterLayer]
    meta: AdapterMeta = field(default_factory=AdapterMeta)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unsupported adapter kind {self.kind!r}; expected one of {KINDS}")
        layers = dict(self.layers)
        for path, layer in layers.items():
            if not isinstance(path, str) or not path:
                raise ValidationError(f"module path must be a non-empty string, got {path!r}")
            if getattr(layer, "kind", None) != self.kind:
                raise ValidationError(
                    f"module {path!r} holds a {getattr(layer, 'kind', type(layer).__name__)} layer in a {self.kind} set"
                )
        object.__setattr__(self, "layers", {p: layers[p] for p in sorted(layers)})

    def __eq__(self, other) -> bool:
        if not isinstance(other, AdapterSet):
            return NotImplemented
        return (
            self.kind == other.kind
            and list(self.layers) == list(other.layers)
            and all(self.layers[p] == other.layers[p] for p in self.layers)
            and self.meta == other.meta
        )

    __hash__ = None

    def __len__(self) -> int:
        return len(self.layers)

    @property
    def module_paths(self) -> list[str]:
        return list(self.layers)

    @property
    def param_count(self) -> int:
        return sum(layer.param_count for layer in self.layers.values())

    @property
    def dtype(self) -> np.dtype:
        return np.result_type(*[layer.dtype for layer in self.layers.values()]) if self.layers else np.dtype(np.float64)

    def with_meta(self, **changes) -> "AdapterSet":
        return dataclasses.replace(self, meta=dataclasses.replace(self.meta, **changes))

    def subset(self, paths: Iterable[str]) -> "AdapterSet":
        paths = set(paths)
        return dataclasses.replace(self, layers={p: l for p, l in self.layers.items() if p in paths})

    def fingerprint(self) -> str:
        """SHA-256 over kind, module paths, scales and raw tensor bytes, in canonical order."""
        h = hashlib.sha256()
        h.update(self.kind.encode())
        for path, layer in self.layers.items():
            h.update(b"\0" + path.encode())
            h.update(json.dumps(getattr(layer, "scale", None)).encode())
            for role, t in layer.tensors().items():
                h.update(f"{role}:{t.dtype.str}:{t.shape}".encode())
                h.update(t.tobytes())
        return h.hexdigest()


def module_matches(path: str, patterns: Sequence[str]) -> bool:
    """True if any glob matches the whole path or one of its ``.``/``/`` components."""
    parts = re.split(r"[./]", path)
    return any(fnmatchcase(path, p) or any(fnmatchcase(c, p) for c in parts) for p in patterns)


def select_modules(adapters: AdapterSet, patterns: Sequence[str]) -> list[str]:
    return [p for p in adapters.layers if module_matches(p, patterns)]


def is_finite(adapters: AdapterSet) -> bool:
    return all(np.all(np.isfinite(t)) for layer in adapters.layers.values() for t in layer.tensors().values())


def compose_delta(layer: LoraLayer) -> np.ndarray:
    """Weight delta ``scale * (B @ A)`` contributed by a LoRA layer."""
    return tc.scale(tc.matmul(layer.B, layer.A), layer.scale)


@dataclass
class CompatibilityReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def raise_for_violations(self) -> None:
        if self.violations:
            raise ValidationError(
                "adapter sets are not mergeable:\n  " + "\n  ".join(self.violations), self.violations
            )


def _layer_shapes(layer: AdapterLayer) -> dict[str, tuple[int, ...]]:
    return {role: t.shape for role, t in layer.tensors().items()}


def validate_merge_inputs(
    task_src: AdapterSet,
    ref_tgt: AdapterSet,
    ref_src: AdapterSet,
    required: Iterable[str] | None = None,
) -> CompatibilityReport:
    """Check that three adapter sets can be merged; collect every violation.

    With ``required=None`` all three sets must have identical module paths.
    Otherwise ``required`` lists the task modules that will be merged, and the
    reference sets only need to cover those.
    """
    report = CompatibilityReport()
    named = {"task_src": task_src, "ref_tgt": ref_tgt, "ref_src": ref_src}
    kinds = {name: s.kind for name, s in named.items()}
    if len(set(kinds.values())) > 1:
        report.violations.append(
            "kind mismatch: " + ", ".join(f"{n}={k}" for n, k in kinds.items())
        )
    if not task_src.layers:
        report.violations.append("task_src has no modules")

    if required is None:
        reference_paths = set(task_src.layers)
        for name in ("ref_tgt", "ref_src"):
            other = set(named[name].layers)
            for p in sorted(reference_paths - other):
                report.violations.append(f"module {p!r}: missing from {name}")
            for p in sorted(other - reference_paths):
                report.violations.append(f"module {p!r}: present in {name} but not in task_src")
        checked = sorted(reference_paths)
    else:
        checked = sorted(set(required))
        for p in checked:
            for name, s in named.items():
                if p not in s.layers:
                    report.violations.append(f"module {p!r}: missing from {name}")

    for p in checked:
        present = {n: s.layers[p] for n, s in named.items() if p in s.layers}
        if len(present) < 2 or len({l.kind for l in present.values()}) > 1:
            continue
        shapes = {n: _layer_shapes(l) for n, l in present.items()}
        if len({tuple(sorted(s.items())) for s in shapes.values()}) > 1:
            detail = "; ".join(
                f"{n}: " + ", ".join(f"{r}{list(shp)}" for r, shp in s.items()) for n, s in shapes.items()
            )
            ranks = {n: l.rank for n, l in present.items() if isinstance(l, LoraLayer)}
            what = "rank mismatch" if len(set(ranks.values())) > 1 else "shape mismatch"
            report.violations.append(f"module {p!r}: {what} ({detail})")
    return report
