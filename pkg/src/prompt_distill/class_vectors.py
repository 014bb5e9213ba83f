"""Teacher text features computed once and persisted as the shared class table.

Cache file layout (integers u32 little-endian)::

    b"PKDW" | version | N | d | fingerprint[32]
    | name_count | name_count x (len, utf-8 bytes)
    | N*d float32 little-endian, row-major
    | sha256 of every preceding byte [32]
"""
from __future__ import annotations

import hashlib
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import core_math
from .checkpoint import _Reader, atomic_write
from .data import DEFAULT_TEMPLATE, Vocabulary
from .errors import CacheIntegrityError, TokenizationError
from .evaluation import CostCounter
from .model import Teacher, named_model_parameters

MAGIC = b"PKDW"
VERSION = 1
NORM_TOL = 1e-6
HEADER_BYTES = 4 + 4 * 3 + 32
TRAILER_BYTES = 32


@dataclass(frozen=True)
class ClassVectorTable:
    W: torch.Tensor
    class_names: tuple[str, ...]
    fingerprint: bytes

    def __post_init__(self):
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if self.W.dim() != 2 or self.W.shape[0] != len(self.class_names):
            raise CacheIntegrityError(
                f"table shape {tuple(self.W.shape)} does not match {len(self.class_names)} names"
            )
        if len(self.fingerprint) != 32:
            raise CacheIntegrityError("fingerprint must be 32 bytes")

    @property
    def num_classes(self) -> int:
        return self.W.shape[0]

    @property
    def dim(self) -> int:
        return self.W.shape[1]

    def row_norm_error(self) -> float:
        norms = torch.linalg.vector_norm(self.W.double(), dim=1)
        return float((norms - 1).abs().max())

    def equals(self, other: "ClassVectorTable") -> bool:
        """Bitwise equality of W, names and fingerprint."""
        return (self.class_names == other.class_names and self.fingerprint == other.fingerprint
                and self.W.dtype == other.W.dtype and self.W.shape == other.W.shape
                and self.W.numpy().tobytes() == other.W.numpy().tobytes())


def teacher_fingerprint(teacher: Teacher) -> bytes:
    """SHA-256 over every teacher parameter (backbone and prompts)."""
    h = hashlib.sha256()
    for name, p in sorted(named_model_parameters(teacher=teacher).items()):
        h.update(name.encode())
        h.update(p.detach().cpu().float().contiguous().numpy().tobytes())
    return h.digest()


def tokenize_classes(class_names: Sequence[str], vocab: Vocabulary,
                     template: str = DEFAULT_TEMPLATE) -> list[list[int]]:
    """Token ids (EOS appended) per class; unknown words are reported by class name."""
    out = []
    for name in class_names:
        try:
            out.append(vocab.tokenize(name, template) + [vocab.eos_id])
        except TokenizationError as e:
            raise TokenizationError(f"cannot tokenize class {name!r}: {e}") from None
    return out


def encode_class_texts(encode_text, token_lists: list[list[int]]) -> torch.Tensor:
    """Run the text encoder once per class, batching sequences of equal length."""
    feats: list[torch.Tensor | None] = [None] * len(token_lists)
    by_len: dict[int, list[int]] = {}
    for i, ids in enumerate(token_lists):
        by_len.setdefault(len(ids), []).append(i)
    for _, rows in sorted(by_len.items()):
        out = encode_text(torch.tensor([token_lists[i] for i in rows]))
        for i, f in zip(rows, out):
            feats[i] = f
    return torch.stack(feats)


def compute_class_vectors(teacher: Teacher, class_names: Sequence[str], vocab: Vocabulary,
                          template: str = DEFAULT_TEMPLATE,
                          counter: CostCounter | None = None) -> ClassVectorTable:
    """One text-encoder forward per class, normalized rows, tagged with the teacher fingerprint."""
    if not class_names:
        raise ValueError("class vectors need at least one class name")
    if len(set(class_names)) != len(class_names):
        warnings.warn("duplicate class names produce duplicate class vectors", stacklevel=2)
    tokens = tokenize_classes(class_names, vocab, template)
    with torch.no_grad():
        if counter is not None:
            with counter.phase("cache"):
                raw = encode_class_texts(teacher.encode_text, tokens)
        else:
            raw = encode_class_texts(teacher.encode_text, tokens)
    W = core_math.l2_normalize(raw.double()).float().contiguous()
    return ClassVectorTable(W, tuple(class_names), teacher_fingerprint(teacher))


def encode_cache(table: ClassVectorTable) -> bytes:
    n, d = table.W.shape
    parts = [MAGIC, struct.pack("<III", VERSION, n, d), table.fingerprint,
             struct.pack("<I", len(table.class_names))]
    for name in table.class_names:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
    parts.append(np.ascontiguousarray(table.W.numpy(), dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def decode_cache(buf: bytes) -> ClassVectorTable:
    if len(buf) < HEADER_BYTES + TRAILER_BYTES:
        raise CacheIntegrityError("class-vector cache is truncated")
    r = _Reader(buf, "class-vector cache")
    if r.take(4) != MAGIC:
        raise CacheIntegrityError("not a class-vector cache (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise CacheIntegrityError(f"unsupported class-vector cache version {version}")
    n, d = r.u32(), r.u32()
    fingerprint = r.take(32)
    count = r.u32()
    if count != n:
        raise CacheIntegrityError(f"cache header says {n} classes but lists {count} names")
    names = tuple(r.string() for _ in range(count))
    W = np.frombuffer(r.take(4 * n * d), dtype="<f4").reshape(n, d).astype(np.float32)
    body_end = r.pos
    digest = r.take(TRAILER_BYTES)
    if r.pos != len(buf):
        raise CacheIntegrityError("trailing bytes after class-vector cache")
    if hashlib.sha256(buf[:body_end]).digest() != digest:
        raise CacheIntegrityError("class-vector cache checksum mismatch")
    table = ClassVectorTable(torch.from_numpy(W), names, fingerprint)
    if table.row_norm_error() > NORM_TOL:
        raise CacheIntegrityError(f"class vector rows are not unit norm (max error {table.row_norm_error():.2e})")
    return table


def save_cache(table: ClassVectorTable, path: str | Path) -> None:
    atomic_write(path, encode_cache(table))


def load_cache(path: str | Path) -> ClassVectorTable:
    try:
        buf = Path(path).read_bytes()
    except FileNotFoundError as e:
        raise CacheIntegrityError(f"class-vector cache {path} does not exist") from e
    return decode_cache(buf)


def cache_file_size(class_names: Sequence[str], dim: int) -> int:
    names = 4 + sum(4 + len(n.encode("utf-8")) for n in class_names)
    return HEADER_BYTES + names + 4 * len(class_names) * dim + TRAILER_BYTES


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def raise_if_invalid(self) -> None:
        if self.violations:
            raise CacheIntegrityError("; ".join(self.violations))


def validate_cache(table: ClassVectorTable, expected_class_names: Sequence[str],
                   projector_dim: int | None = None) -> ValidationReport:
    """Check row norms, name alignment and feature dimension; never raises."""
    report = ValidationReport()
    err = table.row_norm_error()
    if not err <= NORM_TOL:
        report.violations.append(f"row norm error {err:.2e} exceeds {NORM_TOL:g}")
    expected = tuple(expected_class_names)
    if len(expected) != table.num_classes:
        report.violations.append(
            f"table has {table.num_classes} classes, evaluation split has {len(expected)}"
        )
    for i, (got, want) in enumerate(zip(table.class_names, expected)):
        if got != want:
            report.violations.append(f"class name mismatch at index {i}: table {got!r} vs split {want!r}")
            break
    if projector_dim is not None and projector_dim != table.dim:
        report.violations.append(
            f"dimension mismatch: class vectors have d={table.dim}, student features have {projector_dim}"
        )
    return report


def check_fingerprint(table: ClassVectorTable, teacher: Teacher, allow_mismatch: bool = False) -> None:
    if table.fingerprint != teacher_fingerprint(teacher) and not allow_mismatch:
        raise CacheIntegrityError(
            "class-vector cache was produced by a different teacher (fingerprint mismatch)"
        )
