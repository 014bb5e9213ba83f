"""One-axis ablation sweeps over the pipeline, seeds shared across axis values."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from .. import checkpoint as ckpt
from .. import evaluation as ev
from ..errors import ConfigError, StageError
from ..model import TEACHER_CONFIG
from .config import ExperimentConfig, format_value
from .pipeline import RunManifest, result_row, run_pipeline, runs_root

# teacher encoders of decreasing capacity; output_dim stays fixed so the
# student projector and class-vector width do not change across the sweep
TEACHER_CAPACITIES = {
    "base": {f"teacher.{k}": v for k, v in (("num_layers", TEACHER_CONFIG.num_layers),
                                            ("width", TEACHER_CONFIG.width),
                                            ("num_heads", TEACHER_CONFIG.num_heads))},
    "small": {"teacher.num_layers": 2, "teacher.width": 32, "teacher.num_heads": 2},
}

METHODS = {
    "shared_text": {"distill.trainable": "prompts_and_projector", "distill.text_branch": "shared_cache"},
    "own_text": {"distill.trainable": "prompts_and_projector", "distill.text_branch": "own_text_encoder"},
    "projector_only": {"distill.trainable": "projector_only", "distill.text_branch": "shared_cache"},
    "full_finetune": {"distill.trainable": "full_finetune", "distill.text_branch": "shared_cache"},
}

AXES: dict[str, tuple[str, tuple]] = {
    "kd_form": ("distill.mode", ("logit_kl", "feature_l1", "feature_mse")),
    "method": ("method", tuple(METHODS)),
    "projector_layers": ("distill.projector_layers", (1, 2, 3)),
    "temperature": ("stage2.tau", (0.5, 1.0, 2.0, 4.0)),
    "images_per_class": ("protocol.images_per_class", (1, 4, 16, 64, None)),
    "teacher_capacity": ("teacher_capacity", tuple(TEACHER_CAPACITIES)),
    "epochs": ("stage2.epochs", (5, 10, 20)),
}


def axis_overrides(axis: str, value: Any) -> dict[str, Any]:
    key, _ = AXES[axis]
    if key == "method":
        return dict(METHODS[value])
    if key == "teacher_capacity":
        return dict(TEACHER_CAPACITIES[value])
    return {key: value}


@dataclass
class AblationReport:
    axis: str
    values: list
    rows: list[ev.ReportRow]
    manifests: list[RunManifest] = field(default_factory=list)
    outputs: dict[str, str] = field(default_factory=dict)

    @property
    def summary(self) -> list[dict]:
        return ev.summarize(self.rows)

    def mean(self, label: str, key: str = "hm") -> float:
        for e in self.summary:
            if e["variant"] == label:
                return e[key]
        raise KeyError(label)

    @property
    def table(self) -> str:
        return ev.format_table(self.rows)

    @property
    def failed(self) -> bool:
        return any(not m.ok for m in self.manifests)


def value_label(axis: str, value: Any) -> str:
    return f"{axis}={format_value(value)}"


def run_ablation(config: ExperimentConfig, axis: str, values: Sequence | None = None, *,
                 resume: bool = True) -> AblationReport:
    """Run the full pipeline once per axis value, holding every other field fixed.

    Runs live in the usual hash-named directories, so values that reproduce
    an existing configuration reuse its artifacts when ``resume`` is set.
    """
    if axis not in AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; expected one of {sorted(AXES)}")
    values = list(AXES[axis][1] if values is None else values)
    allowed = AXES[axis][1]
    for v in values:
        if v not in allowed and AXES[axis][0] in ("method", "teacher_capacity", "distill.mode"):
            raise ConfigError(f"{axis}: unknown value {v!r}; expected one of {list(allowed)}")
    rows: list[ev.ReportRow] = []
    manifests = []
    for v in values:
        cfg = config.with_overrides(axis_overrides(axis, v))
        m = run_pipeline(cfg, resume=resume)
        manifests.append(m)
        rows += _rows(m, value_label(axis, v))
    report = AblationReport(axis, values, rows, manifests)
    report.outputs = _write(config, report)
    return report


def _rows(m: RunManifest, label: str) -> list[ev.ReportRow]:
    return [result_row(label, r) for r in m.results]


def _write(config: ExperimentConfig, report: AblationReport) -> dict[str, str]:
    d = runs_root(config) / "ablations" / f"{report.axis}-{config.hash}"
    d.mkdir(parents=True, exist_ok=True)
    csv_path, txt_path, json_path = d / "report.csv", d / "report.txt", d / "runs.json"
    ckpt.atomic_write(csv_path, ev.rows_to_csv(report.rows).encode())
    ckpt.atomic_write(txt_path, f"axis {report.axis}\n{report.table}\n".encode())
    runs = [{"value": format_value(v), "run_dir": m.run_dir, "ok": m.ok}
            for v, m in zip(report.values, report.manifests)]
    ckpt.atomic_write(json_path, json.dumps(runs, indent=2).encode())
    return {"csv": str(csv_path), "table": str(txt_path), "runs": str(json_path)}


def load_ablation(path: str | Path) -> str:
    p = Path(path)
    if not p.exists():
        raise StageError(f"no ablation report at {p}")
    return p.read_text()
