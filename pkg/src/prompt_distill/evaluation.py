"""Accuracy metrics, base-to-novel reports, teacher agreement and forward-pass accounting."""
from __future__ import annotations

import csv
import io
import statistics
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
import torch

from . import core_math
from .data import ClassSplit, LabeledSet
from .errors import DataError

PHASES = ("stage1", "cache", "stage2", "inference")
COUNTER_KEYS = ("image_teacher", "image_student", "text_teacher", "text_student")


class CostCounter:
    """Monotone per-phase counts of encoder forward passes, one per input sample.

    Encoders are instrumented with forward hooks, so counts reflect the
    forwards that actually ran rather than what a caller claims to have run.
    """

    def __init__(self):
        self._counts: dict[tuple[str, str], int] = defaultdict(int)
        self._phase = "unscoped"
        self._handles = []

    @contextmanager
    def phase(self, name: str) -> Iterator["CostCounter"]:
        previous, self._phase = self._phase, name
        try:
            yield self
        finally:
            self._phase = previous

    @property
    def current_phase(self) -> str:
        return self._phase

    def add(self, key: str, n: int, phase: str | None = None) -> None:
        if n < 0:
            raise ValueError("counters never decrease")
        self._counts[(phase or self._phase, key)] += int(n)

    def watch(self, module: torch.nn.Module, key: str):
        if key not in COUNTER_KEYS:
            raise ValueError(f"unknown counter key {key!r}")

        def hook(_mod, inputs, _out):
            self.add(key, inputs[0].shape[0])

        handle = module.register_forward_hook(hook)
        self._handles.append(handle)
        return handle

    def watch_teacher(self, teacher) -> None:
        self.watch(teacher.backbone.image, "image_teacher")
        self.watch(teacher.backbone.text, "text_teacher")

    def watch_student(self, student) -> None:
        self.watch(student.backbone.image, "image_student")
        self.watch(student.backbone.text, "text_student")

    def detach(self) -> None:
        for h in self._handles:
            h.remove()
        self._handles.clear()

    def get(self, phase: str, key: str) -> int:
        return self._counts.get((phase, key), 0)

    def text_forwards(self, phase: str) -> int:
        return self.get(phase, "text_teacher") + self.get(phase, "text_student")

    def image_forwards(self, phase: str, who: str) -> int:
        return self.get(phase, f"image_{who}")

    def snapshot(self) -> dict[str, dict[str, int]]:
        out: dict[str, dict[str, int]] = {}
        for (phase, key), n in sorted(self._counts.items()):
            out.setdefault(phase, {})[key] = n
        return out

    def merge(self, other: "CostCounter") -> "CostCounter":
        merged = CostCounter()
        for src in (self, other):
            for k, n in src._counts.items():
                merged._counts[k] += n
        return merged


def cost_report(counter: CostCounter, num_classes: int | None = None) -> dict:
    """Per-phase counts plus the checks behind the shared-class-vector efficiency claim."""
    phases = {}
    for phase in sorted({p for p, _ in counter._counts} | set(PHASES)):
        phases[phase] = {
            "image_forwards_teacher": counter.get(phase, "image_teacher"),
            "image_forwards_student": counter.get(phase, "image_student"),
            "text_forwards": counter.text_forwards(phase),
        }
    checks = {
        "stage2_text_free": phases["stage2"]["text_forwards"] == 0,
        "inference_text_free": phases["inference"]["text_forwards"] == 0,
    }
    if num_classes is not None:
        checks["cache_equals_num_classes"] = phases["cache"]["text_forwards"] == num_classes
    s2 = phases["stage2"]
    ratio = (s2["image_forwards_student"] / s2["image_forwards_teacher"]
             if s2["image_forwards_teacher"] else None)
    return {"phases": phases, "checks": checks, "stage2_student_per_teacher": ratio}


Scorer = Callable[[torch.Tensor], torch.Tensor]


def predict(scorer: Scorer, images, table: torch.Tensor, batch_size: int = 256) -> np.ndarray:
    """Argmax class of each image against the (unit-norm) class table."""
    images = torch.as_tensor(np.asarray(images))
    preds = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            feats = scorer(images[start:start + batch_size])
            q = core_math.similarity_logits(core_math.l2_normalize(feats), table)
            preds.append(core_math.argmax(q))
    if not preds:
        return np.zeros(0, dtype=np.int64)
    return torch.cat(preds).numpy()


def top1_accuracy(scorer: Scorer, samples: LabeledSet, table: torch.Tensor) -> float:
    if len(samples) == 0:
        raise DataError("top-1 accuracy of an empty set is undefined")
    preds = predict(scorer, samples.images, table)
    return float((preds == samples.labels).mean())


def safe_harmonic_mean(base: float, novel: float) -> float:
    # HM is 0 in the limit where either accuracy is 0
    if base <= 0 or novel <= 0:
        return 0.0
    return core_math.harmonic_mean(base, novel)


@dataclass
class EvalReport:
    base_acc: float
    novel_acc: float
    hm: float
    per_class_acc: list[float]
    num_samples: int
    seed: int | None = None
    table_mode: str = "full"

    @classmethod
    def from_accuracies(cls, base_acc: float, novel_acc: float, **kw) -> "EvalReport":
        return cls(base_acc, novel_acc, safe_harmonic_mean(base_acc, novel_acc),
                   kw.pop("per_class_acc", []), kw.pop("num_samples", 0), **kw)


def evaluate_base_to_novel(scorer: Scorer, table, test: LabeledSet, split: ClassSplit, *,
                           class_names: Sequence[str] | None = None, table_mode: str = "full",
                           seed: int | None = None) -> EvalReport:
    """Base and novel accuracy plus their harmonic mean.

    ``table_mode="full"`` scores every sample N-way against the whole table;
    ``"split"`` restricts base samples to base rows and novel samples to novel rows.
    """
    from .class_vectors import validate_cache  # local: class_vectors imports this module

    expected = table.class_names if class_names is None else class_names
    validate_cache(table, expected).raise_if_invalid()
    W = table.W
    accs = {}
    per_class = np.zeros(test.num_classes)
    for name, classes in (("base", split.base), ("novel", split.novel)):
        part = test.of_classes(classes)
        if len(part) == 0:
            raise DataError(f"test set has no {name}-class samples")
        if table_mode == "full":
            preds = predict(scorer, part.images, W)
        elif table_mode == "split":
            idx = np.asarray(classes)
            preds = idx[predict(scorer, part.images, W[torch.as_tensor(idx)])]
        else:
            raise ValueError(f"unknown table mode {table_mode!r}")
        hit = preds == part.labels
        accs[name] = float(hit.mean())
        for c in classes:
            per_class[c] = float(hit[part.labels == c].mean())
    return EvalReport.from_accuracies(accs["base"], accs["novel"], per_class_acc=per_class.tolist(),
                                      num_samples=len(test), seed=seed, table_mode=table_mode)


def agreement_rate(student: Scorer, teacher: Scorer, images, table: torch.Tensor) -> float:
    """Fraction of images where student and teacher pick the same class."""
    if len(images) == 0:
        raise DataError("agreement on an empty image set is undefined")
    return float((predict(student, images, table) == predict(teacher, images, table)).mean())


@dataclass
class ReportRow:
    variant: str
    seed: int
    base_acc: float
    novel_acc: float
    hm: float
    agreement: float
    text_forwards_stage2: int
    teacher_hm: float = 0.0
    extra: dict = field(default_factory=dict)


CSV_COLUMNS = ("variant", "seed", "base_acc", "novel_acc", "hm", "agreement", "text_forwards_stage2",
               "teacher_hm")


def rows_to_csv(rows: Sequence[ReportRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([r.variant, r.seed, f"{r.base_acc:.6f}", f"{r.novel_acc:.6f}", f"{r.hm:.6f}",
                    f"{r.agreement:.6f}", r.text_forwards_stage2, f"{r.teacher_hm:.6f}"])
    return buf.getvalue()


def summarize(rows: Sequence[ReportRow]) -> list[dict]:
    """Mean and spread over seeds per variant, sorted by mean HM (best first)."""
    groups: dict[str, list[ReportRow]] = defaultdict(list)
    for r in rows:
        groups[r.variant].append(r)
    out = []
    for variant, rs in groups.items():
        entry = {"variant": variant, "seeds": [r.seed for r in rs]}
        for key in ("base_acc", "novel_acc", "hm", "agreement", "teacher_hm"):
            vals = [getattr(r, key) for r in rs]
            entry[key] = statistics.fmean(vals)
            entry[f"{key}_std"] = statistics.pstdev(vals) if len(vals) > 1 else 0.0
        out.append(entry)
    return sorted(out, key=lambda e: -e["hm"])


def format_table(rows: Sequence[ReportRow], table_mode: str = "full") -> str:
    """Aligned text table in percent; base/novel/HM as in the usual protocol tables."""
    lines = [f"accuracy scoring: {table_mode} (N-way over the shared class table)"
             if table_mode == "full" else f"accuracy scoring: {table_mode}"]
    header = f"{'variant':<24} {'base':>7} {'novel':>7} {'HM':>7} {'±HM':>6} {'agree':>7} {'T-HM':>7} {'seeds':>6}"
    lines += [header, "-" * len(header)]
    for e in summarize(rows):
        lines.append(
            f"{e['variant']:<24} {100 * e['base_acc']:7.2f} {100 * e['novel_acc']:7.2f} "
            f"{100 * e['hm']:7.2f} {100 * e['hm_std']:6.2f} {100 * e['agreement']:7.2f} "
            f"{100 * e['teacher_hm']:7.2f} {len(e['seeds']):>6}"
        )
    return "\n".join(lines)


def report_dict(report: EvalReport) -> dict:
    return asdict(report)
