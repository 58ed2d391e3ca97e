"""Flat parameter collections: the unit of exchange between server and clients.

A :class:`ModelParams` is an ordered list of float32 arrays plus a schema id
binding the layout to an architecture. Same-schema collections support
element-wise addition and scaling; weighted sums are accumulated in float64.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import SchemaMismatchError


def schema_id(arch_name: str, shapes: list[tuple[int, ...]]) -> str:
    digest = hashlib.blake2b(repr(shapes).encode(), digest_size=6).hexdigest()
    return f"{arch_name}:{digest}"


@dataclass
class ModelParams:
    arrays: list[np.ndarray]
    schema: str

    def __post_init__(self):
        self.arrays = [np.ascontiguousarray(a, dtype=np.float32) for a in self.arrays]

    @property
    def num_values(self) -> int:
        return int(sum(a.size for a in self.arrays))

    def copy(self) -> "ModelParams":
        return ModelParams([a.copy() for a in self.arrays], self.schema)

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays)

    def allclose(self, other: "ModelParams", rtol: float = 0.0, atol: float = 0.0) -> bool:
        if self.schema != other.schema:
            return False
        return all(
            np.allclose(a, b, rtol=rtol, atol=atol)
            for a, b in zip(self.arrays, other.arrays)
        )

    def scaled(self, factor: float) -> "ModelParams":
        return ModelParams([a * np.float32(factor) for a in self.arrays], self.schema)


def check_same_schema(a: ModelParams, b: ModelParams) -> None:
    if a.schema != b.schema:
        raise SchemaMismatchError(f"schema mismatch: {a.schema} vs {b.schema}")


def params_add(a: ModelParams, b: ModelParams) -> ModelParams:
    check_same_schema(a, b)
    return ModelParams([x + y for x, y in zip(a.arrays, b.arrays)], a.schema)


def params_sub(a: ModelParams, b: ModelParams) -> ModelParams:
    check_same_schema(a, b)
    return ModelParams([x - y for x, y in zip(a.arrays, b.arrays)], a.schema)


def weighted_sum(items: list[tuple[float, ModelParams]]) -> ModelParams:
    """sum_i c_i * p_i with float64 accumulation, cast back to float32."""
    if not items:
        raise ValueError("weighted_sum needs at least one item")
    ref = items[0][1]
    for _, p in items[1:]:
        check_same_schema(ref, p)
    out = []
    for k in range(len(ref.arrays)):
        acc = np.zeros(ref.arrays[k].shape, dtype=np.float64)
        for c, p in items:
            acc += float(c) * p.arrays[k].astype(np.float64)
        out.append(acc.astype(np.float32))
    return ModelParams(out, ref.schema)


def save_params(path: str | Path, params: ModelParams) -> None:
    """Portable serialized arrays (zip of .npy entries) plus the schema."""
    buf = io.BytesIO()
    np.savez(
        buf,
        schema=np.frombuffer(params.schema.encode(), dtype=np.uint8),
        **{f"arr_{i}": a for i, a in enumerate(params.arrays)},
    )
    Path(path).write_bytes(buf.getvalue())


def load_params(path: str | Path) -> ModelParams:
    with np.load(Path(path)) as payload:
        schema = payload["schema"].tobytes().decode()
        arrays = [payload[f"arr_{i}"] for i in range(len(payload.files) - 1)]
    return ModelParams(arrays, schema)
