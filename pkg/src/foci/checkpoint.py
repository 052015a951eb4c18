"""Binary checkpoints for frozen backbones and, optionally, a trained selector head.

Layout (little endian)::

    "FOCM" u32 version
    u32 len + archetype tag (UTF-8)
    u32 len + JSON header (constructor params, classes, input dim)
    param table
    [ "FSEL" u32 version, u32 len + JSON header, param table ]

A param table is ``u32 count`` followed by, per entry, ``u32 len + name``,
``u32 ndim``, ``ndim x u32`` shape and the float64 values row-major.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .backbones import ARCHETYPES, make_backbone
from .selector import SelectorHead

MODEL_MAGIC = b"FOCM"
SELECTOR_MAGIC = b"FSEL"
CHECKPOINT_VERSION = 1

_U32 = struct.Struct("<I")


class CheckpointError(ValueError):
    """Malformed, truncated or incompatible checkpoint."""


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return _U32.pack(len(raw)) + raw


def _pack_table(arrays: dict[str, np.ndarray]) -> bytes:
    out = [_U32.pack(len(arrays))]
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        out.append(_pack_str(name))
        out.append(_U32.pack(a.ndim))
        out.extend(_U32.pack(n) for n in a.shape)
        out.append(a.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes, path):
        self.buf = memoryview(data)
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> memoryview:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated while reading {what}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]

    def string(self, what: str) -> str:
        return bytes(self.take(self.u32(what), what)).decode("utf-8")

    def table(self) -> dict[str, np.ndarray]:
        arrays = {}
        for _ in range(self.u32("parameter count")):
            name = self.string("parameter name")
            shape = tuple(self.u32(f"shape of {name}") for _ in range(self.u32(f"rank of {name}")))
            n = int(np.prod(shape)) if shape else 1
            arrays[name] = np.frombuffer(self.take(8 * n, f"values of {name}"), dtype="<f8").astype(np.float64).reshape(shape)
        return arrays

    def section(self, magic: bytes) -> None:
        got = bytes(self.take(4, "section tag"))
        if got != magic:
            raise CheckpointError(f"{self.path}: expected section {magic.decode()}, found {got!r}")
        version = self.u32("section version")
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{self.path}: {magic.decode()} version {version}, expected {CHECKPOINT_VERSION}")

    @property
    def done(self) -> bool:
        return self.pos >= len(self.buf)


def _model_header(model) -> dict:
    return {
        "params": model.get_params(),
        "activation": model.activation,
        "n_features_in": int(model.n_features_in_),
        "n_classes": int(len(model.classes_)),
    }


def _selector_header(selector) -> dict:
    params = {k: v for k, v in selector.get_params(deep=False).items() if k not in ("backbone", "callback")}
    if isinstance(params.get("adaptive_k"), tuple):
        params["adaptive_k"] = list(params["adaptive_k"])
    return {"params": params, "hidden": selector.head_.hidden}


def save_checkpoint(path, model, selector=None) -> None:
    """Write a backbone checkpoint, with the selector section when given."""
    if not getattr(model, "frozen_", False):
        raise CheckpointError("only frozen (trained) backbones can be checkpointed")
    chunks = [
        MODEL_MAGIC,
        _U32.pack(CHECKPOINT_VERSION),
        _pack_str(model.archetype),
        _pack_str(json.dumps(_model_header(model), sort_keys=True)),
        _pack_table(model.param_arrays()),
    ]
    if selector is not None:
        chunks += [
            SELECTOR_MAGIC,
            _U32.pack(CHECKPOINT_VERSION),
            _pack_str(json.dumps(_selector_header(selector), sort_keys=True)),
            _pack_table(selector.head_.param_arrays()),
        ]
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path):
    """Return ``(model, selector_or_None)``; the model comes back frozen."""
    from .training import FOCISelector

    r = _Reader(Path(path).read_bytes(), path)
    r.section(MODEL_MAGIC)
    tag = r.string("archetype tag")
    if tag not in ARCHETYPES:
        raise CheckpointError(f"{path}: unknown archetype {tag!r}")
    header = json.loads(r.string("model header"))
    model = make_backbone(tag, **header["params"])
    model.activation = header["activation"]
    arrays = r.table()
    try:
        model.load_param_arrays(arrays, header["n_classes"])
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    selector = None
    if not r.done:
        r.section(SELECTOR_MAGIC)
        sh = json.loads(r.string("selector header"))
        params = dict(sh["params"])
        if params.get("adaptive_k") is not None:
            params["adaptive_k"] = tuple(params["adaptive_k"])
        selector = FOCISelector(model, **params)
        selector.head_ = SelectorHead(sh["hidden"], seed=params.get("seed", 0))
        try:
            selector.head_.load_param_arrays(r.table())
        except ValueError as exc:
            raise CheckpointError(f"{path}: {exc}") from None
        if not r.done:
            raise CheckpointError(f"{path}: trailing bytes after selector section")
    return model, selector


__all__ = ["CheckpointError", "save_checkpoint", "load_checkpoint", "MODEL_MAGIC", "SELECTOR_MAGIC", "CHECKPOINT_VERSION"]
