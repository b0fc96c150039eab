"""Binary checkpoint container for adapter sets.

Layout (all integers little-endian)::

    0..3    magic b"AMGX"
    4..7    format version, uint32
    8..15   header length H, uint64
    16..    H bytes of UTF-8 JSON header
    ...     data section: raw little-endian tensor values in header order, no padding

Tensor offsets in the header are relative to the start of the data section.
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .adapters import LAYER_TYPES, AdapterMeta, AdapterSet, is_finite, layer_from_tensors, module_matches
from .errors import ErrorCode, FormatError, ValidationError

MAGIC = b"AMGX"
FORMAT_VERSION = 1
PREAMBLE = struct.Struct("<4sIQ")
DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


def tensor_name(module_path: str, role: str) -> str:
    return f"{module_path}.{role}"


def build_header(adapters: AdapterSet) -> tuple[dict, list[np.ndarray]]:
    """Header dict and the tensors in data-section order."""
    modules, entries, payload = [], [], []
    offset = 0
    for path, layer in adapters.layers.items():
        names, shapes = {}, {}
        for role, t in layer.tensors().items():
            name = tensor_name(path, role)
            dt = _DTYPE_NAMES[np.dtype(t.dtype)]
            nbytes = t.size * DTYPES[dt].itemsize
            entries.append(
                {"name": name, "dtype": dt, "shape": list(t.shape), "offset_begin": offset, "offset_end": offset + nbytes}
            )
            payload.append(np.ascontiguousarray(t, dtype=DTYPES[dt]))
            offset += nbytes
            names[role] = name
            shapes[role] = list(t.shape)
        module = {"module_path": path, "tensors": names, "shapes": shapes, "dtype": _DTYPE_NAMES[np.dtype(layer.dtype)]}
        if adapters.kind == "lora":
            module["scale"] = layer.scale
        modules.append(module)
    header = {
        "format_version": FORMAT_VERSION,
        "adapter_kind": adapters.kind,
        "language": adapters.meta.language,
        "task": adapters.meta.task,
        "base_model": adapters.meta.base_model,
        "modules": modules,
        "tensors": entries,
        "extra": adapters.meta.notes,
    }
    return header, payload


def encode(adapters: AdapterSet, *, allow_nonfinite: bool = False) -> bytes:
    if not adapters.layers:
        raise ValidationError("refusing to write an empty adapter set")
    if not allow_nonfinite and not is_finite(adapters):
        raise ValidationError("adapter set contains non-finite values (pass allow_nonfinite to write anyway)")
    header, payload = build_header(adapters)
    blob = json.dumps(header, ensure_ascii=False, separators=(",", ":"), allow_nan=False).encode("utf-8")
    parts = [PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(blob)), blob]
    parts += [t.tobytes() for t in payload]
    return b"".join(parts)


def write_checkpoint(adapters: AdapterSet, path, *, allow_nonfinite: bool = False) -> None:
    """Write ``adapters`` to ``path`` atomically (temp file + rename)."""
    data = encode(adapters, allow_nonfinite=allow_nonfinite)
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- reading -------------------------------------------------------------------------


@dataclass
class Manifest:
    """Parsed, validated header plus where the data section begins."""

    header: dict
    data_start: int
    data_length: int
    tensors: dict[str, dict] = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return self.header["adapter_kind"]

    @property
    def modules(self) -> list[dict]:
        return self.header["modules"]


def _fail(code: ErrorCode, msg: str):
    raise FormatError(code, msg)


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def _parse_preamble(head: bytes, file_size: int) -> int:
    if len(head) < 4:
        if MAGIC.startswith(head):
            _fail(ErrorCode.OUT_OF_BOUNDS, f"file is {file_size} bytes, too short for the preamble")
        _fail(ErrorCode.BAD_MAGIC, f"bad magic {head!r}")
    if head[:4] != MAGIC:
        _fail(ErrorCode.BAD_MAGIC, f"bad magic {head[:4]!r}, expected {MAGIC!r}")
    if len(head) < PREAMBLE.size:
        _fail(ErrorCode.OUT_OF_BOUNDS, f"file is {file_size} bytes, too short for the preamble")
    _, version, hlen = PREAMBLE.unpack(head[: PREAMBLE.size])
    if version != FORMAT_VERSION:
        _fail(ErrorCode.UNSUPPORTED_VERSION, f"format version {version} (supported: {FORMAT_VERSION})")
    if PREAMBLE.size + hlen > file_size:
        _fail(ErrorCode.OUT_OF_BOUNDS, f"header length {hlen} runs past end of file ({file_size} bytes)")
    return hlen


def _check_header(header: Any, data_length: int) -> dict[str, dict]:
    if not isinstance(header, dict):
        _fail(ErrorCode.BAD_HEADER, "header is not a JSON object")
    for key, typ in (
        ("format_version", int),
        ("adapter_kind", str),
        ("language", str),
        ("task", str),
        ("base_model", str),
        ("modules", list),
        ("tensors", list),
        ("extra", dict),
    ):
        if not isinstance(header.get(key), typ):
            _fail(ErrorCode.BAD_HEADER, f"header field {key!r} missing or not a {typ.__name__}")
    if header["format_version"] != FORMAT_VERSION:
        _fail(ErrorCode.BAD_HEADER, f"header format_version {header['format_version']} disagrees with preamble")

    tensors: dict[str, dict] = {}
    for entry in header["tensors"]:
        if not isinstance(entry, dict) or not isinstance(entry.get("name"), str):
            _fail(ErrorCode.BAD_HEADER, f"malformed tensor entry {entry!r}")
        name = entry["name"]
        if name in tensors:
            _fail(ErrorCode.DUPLICATE_NAME, f"tensor {name!r} appears twice")
        if entry.get("dtype") not in DTYPES:
            _fail(ErrorCode.BAD_HEADER, f"tensor {name!r}: unsupported dtype {entry.get('dtype')!r}")
        shape = entry.get("shape")
        if not isinstance(shape, list) or not all(_is_int(s) and s > 0 for s in shape):
            _fail(ErrorCode.BAD_HEADER, f"tensor {name!r}: shape must be a list of positive integers")
        begin, end = entry.get("offset_begin"), entry.get("offset_end")
        if not (_is_int(begin) and _is_int(end)):
            _fail(ErrorCode.BAD_HEADER, f"tensor {name!r}: offsets must be integers")
        if not 0 <= begin <= end <= data_length:
            _fail(
                ErrorCode.OUT_OF_BOUNDS,
                f"tensor {name!r}: range [{begin}, {end}) outside data section of {data_length} bytes",
            )
        expected = math.prod(shape) * DTYPES[entry["dtype"]].itemsize
        if end - begin != expected:
            _fail(
                ErrorCode.SIZE_MISMATCH,
                f"tensor {name!r}: {entry['dtype']}{shape} needs {expected} bytes, range holds {end - begin}",
            )
        tensors[name] = entry

    ordered = sorted(tensors.values(), key=lambda e: (e["offset_begin"], e["offset_end"]))
    for prev, cur in zip(ordered, ordered[1:]):
        if cur["offset_begin"] < prev["offset_end"]:
            _fail(ErrorCode.OVERLAP, f"tensors {prev['name']!r} and {cur['name']!r} overlap")
    used = ordered[-1]["offset_end"] if ordered else 0
    if used != data_length:
        _fail(ErrorCode.SIZE_MISMATCH, f"data section is {data_length} bytes but tensors cover {used}")

    kind = header["adapter_kind"]
    if kind not in LAYER_TYPES:
        _fail(ErrorCode.KIND_SHAPE, f"unsupported adapter kind {kind!r}")
    roles = LAYER_TYPES[kind].roles
    seen_paths = set()
    for module in header["modules"]:
        if not isinstance(module, dict) or not isinstance(module.get("module_path"), str):
            _fail(ErrorCode.BAD_HEADER, f"malformed module entry {module!r}")
        path = module["module_path"]
        if path in seen_paths:
            _fail(ErrorCode.DUPLICATE_NAME, f"module {path!r} appears twice")
        seen_paths.add(path)
        names = module.get("tensors")
        if not isinstance(names, dict) or sorted(names) != sorted(roles):
            _fail(ErrorCode.KIND_SHAPE, f"module {path!r}: {kind} needs tensor roles {list(roles)}, got {names!r}")
        shapes = {}
        for role, name in names.items():
            if name not in tensors:
                _fail(ErrorCode.BAD_HEADER, f"module {path!r}: tensor {name!r} not listed")
            shapes[role] = tensors[name]["shape"]
        if "shapes" in module and module["shapes"] != shapes:
            _fail(ErrorCode.KIND_SHAPE, f"module {path!r}: declared shapes {module['shapes']} disagree with tensors")
        _check_kind_shapes(kind, path, shapes)
        if kind == "lora":
            scale = module.get("scale", 1.0)
            if not isinstance(scale, (int, float)) or isinstance(scale, bool) or not math.isfinite(scale):
                _fail(ErrorCode.BAD_HEADER, f"module {path!r}: scale must be a finite number")
    return tensors


def _check_kind_shapes(kind: str, path: str, shapes: dict[str, list[int]]) -> None:
    if kind == "lora":
        B, A = shapes["B"], shapes["A"]
        if len(B) != 2 or len(A) != 2 or B[1] != A[0]:
            _fail(ErrorCode.KIND_SHAPE, f"module {path!r}: LoRA needs B (d x r) and A (r x k), got B{B} A{A}")
    elif kind == "ia3":
        if len(shapes["v"]) != 1:
            _fail(ErrorCode.KIND_SHAPE, f"module {path!r}: (IA)^3 vector must be 1-D, got {shapes['v']}")
    elif len(shapes["P"]) != 2:
        _fail(ErrorCode.KIND_SHAPE, f"module {path!r}: prefix matrix must be 2-D, got {shapes['P']}")


def read_manifest(path) -> Manifest:
    """Parse and validate the header without touching tensor data."""
    path = Path(path)
    file_size = path.stat().st_size
    with open(path, "rb") as fh:
        head = fh.read(PREAMBLE.size)
        hlen = _parse_preamble(head, file_size)
        raw = fh.read(hlen)
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(ErrorCode.BAD_HEADER, f"header is not valid UTF-8 JSON: {exc}") from None
    data_start = PREAMBLE.size + hlen
    data_length = file_size - data_start
    tensors = _check_header(header, data_length)
    return Manifest(header=header, data_start=data_start, data_length=data_length, tensors=tensors)


def read_checkpoint(path, modules: Sequence[str] | None = None, *, allow_nonfinite: bool = False) -> AdapterSet:
    """Load an adapter set. ``modules`` (glob patterns) limits which tensors are read."""
    manifest = read_manifest(path)
    kind = manifest.kind
    wanted = [m for m in manifest.modules if modules is None or module_matches(m["module_path"], modules)]
    layers = {}
    with open(path, "rb") as fh:
        for module in wanted:
            arrays = {}
            for role, name in module["tensors"].items():
                entry = manifest.tensors[name]
                fh.seek(manifest.data_start + entry["offset_begin"])
                buf = fh.read(entry["offset_end"] - entry["offset_begin"])
                dt = DTYPES[entry["dtype"]]
                arr = np.frombuffer(buf, dtype=dt).reshape(entry["shape"]).astype(dt.newbyteorder("="))
                if not allow_nonfinite and not np.all(np.isfinite(arr)):
                    raise FormatError(ErrorCode.NON_FINITE, f"tensor {name!r} contains non-finite values")
                arrays[role] = arr
            layers[module["module_path"]] = layer_from_tensors(kind, arrays, module.get("scale", 1.0))
    h = manifest.header
    meta = AdapterMeta(language=h["language"], task=h["task"], base_model=h["base_model"], notes=h["extra"])
    return AdapterSet(kind, layers, meta)


# -- inspection ----------------------------------------------------------------------


@dataclass
class CheckpointSummary:
    path: str
    format_version: int
    kind: str
    language: str
    task: str
    base_model: str
    module_count: int
    param_count: int
    modules: list[dict]

    def to_dict(self) -> dict:
        return {
            "path": self.path,
            "format_version": self.format_version,
            "kind": self.kind,
            "language": self.language,
            "task": self.task,
            "base_model": self.base_model,
            "module_count": self.module_count,
            "param_count": self.param_count,
            "modules": self.modules,
        }

    def to_text(self) -> str:
        lines = [
            f"checkpoint   {self.path}",
            f"format       v{self.format_version}",
            f"kind         {self.kind}",
            f"language     {self.language or '-'}",
            f"task         {self.task or '-'}",
            f"base model   {self.base_model or '-'}",
            f"modules      {self.module_count}",
            f"parameters   {self.param_count}",
        ]
        if self.modules:
            width = max(len(m["module_path"]) for m in self.modules)
            lines.append("")
            for m in self.modules:
                shapes = "  ".join(f"{role}{'x'.join(map(str, s))}" for role, s in m["shapes"].items())
                rank = f"  r={m['rank']}" if "rank" in m else ""
                lines.append(f"  {m['module_path']:<{width}}  {m['dtype']}  {shapes}{rank}")
        return "\n".join(lines)


def inspect(path) -> CheckpointSummary:
    manifest = read_manifest(path)
    modules, params = [], 0
    for m in manifest.modules:
        shapes = {role: manifest.tensors[name]["shape"] for role, name in m["tensors"].items()}
        dtypes = {manifest.tensors[name]["dtype"] for name in m["tensors"].values()}
        entry = {"module_path": m["module_path"], "shapes": shapes, "dtype": "f64" if "f64" in dtypes else "f32"}
        if manifest.kind == "lora":
            entry["rank"] = shapes["B"][1]
            entry["scale"] = m.get("scale", 1.0)
        modules.append(entry)
        params += sum(math.prod(s) for s in shapes.values())
    h = manifest.header
    return CheckpointSummary(
        path=str(path),
        format_version=h["format_version"],
        kind=manifest.kind,
        language=h["language"],
        task=h["task"],
        base_model=h["base_model"],
        module_count=len(modules),
        param_count=params,
        modules=modules,
    )


def dump_manifest(path) -> dict:
    """The raw JSON header, for debugging."""
    return read_manifest(path).header
