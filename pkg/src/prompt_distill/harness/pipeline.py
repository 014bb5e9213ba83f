"""End-to-end orchestration: Stage I, class-vector cache, Stage II and evaluation.

Each stage persists its artifacts under ``<root>/<config hash>/seed<k>/`` so
any stage can run on its own against what the earlier stages left behind.
Backbones are pretrained once per (encoder, recipe, dataset) and shared by
every run under the same root.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch

from .. import checkpoint as ckpt
from .. import class_vectors as cv
from .. import core_math, data, evaluation as ev, model, training
from ..errors import CacheIntegrityError, ConfigError, StageError
from .config import ExperimentConfig

log = logging.getLogger(__name__)

RUNS_ROOT_ENV = "PROMPT_DISTILL_RUNS"
STAGE_ORDER = ("stage1", "cache", "stage2", "eval")

# purpose ids for seeds derived from a run seed
INIT_TEACHER_VISUAL = 31
INIT_TEACHER_TEXT = 32
INIT_STUDENT_VISUAL = 33
INIT_STUDENT_TEXT = 34
INIT_PROJECTOR = 35
SAMPLE_FEWSHOT = 36
STAGE1_STREAM = 37
STAGE2_STREAM = 38


def derive_seed(seed: int, *purpose: int) -> int:
    return int(np.random.SeedSequence([seed, *purpose]).generate_state(1)[0])


def runs_root(config: ExperimentConfig) -> Path:
    return Path(os.environ.get(RUNS_ROOT_ENV) or config.run.root)


def run_dir(config: ExperimentConfig) -> Path:
    return runs_root(config) / config.hash


@dataclass
class StageRecord:
    stage: str
    seed: int
    status: str                      # done | resumed | failed | skipped
    outputs: dict[str, str] = field(default_factory=dict)
    started: float = 0.0
    finished: float = 0.0
    cause: str | None = None
    counts: dict = field(default_factory=dict)


@dataclass
class RunManifest:
    config_hash: str
    config_text: str
    run_dir: str
    stages: list[StageRecord] = field(default_factory=list)
    reports: dict[str, str] = field(default_factory=dict)
    results: list[dict] = field(default_factory=list)

    @property
    def failed(self) -> list[StageRecord]:
        return [r for r in self.stages if r.status == "failed"]

    @property
    def ok(self) -> bool:
        return not self.failed

    def record(self, seed: int, stage: str) -> StageRecord | None:
        for r in self.stages:
            if r.seed == seed and r.stage == stage:
                return r
        return None

    def put(self, rec: StageRecord) -> None:
        self.stages = [r for r in self.stages if (r.seed, r.stage) != (rec.seed, rec.stage)]
        self.stages.append(rec)
        self.stages.sort(key=lambda r: (r.seed, STAGE_ORDER.index(r.stage)))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def write(self, path: str | Path) -> None:
        self._check_outputs()
        ckpt.atomic_write(path, self.to_json().encode())

    def _check_outputs(self) -> None:
        """Every referenced artifact must exist and pass its format check."""
        for rec in self.stages:
            if rec.status not in ("done", "resumed"):
                continue
            for path in rec.outputs.values():
                p = Path(path)
                if not p.exists():
                    raise StageError(f"manifest references missing artifact {p}")
                if p.suffix == ".pkdw":
                    cv.load_cache(p)
                elif p.suffix == ".pkdc":
                    ckpt.load_checkpoint(p)
                elif p.suffix == ".json":
                    json.loads(p.read_text())

    @classmethod
    def load(cls, path: str | Path) -> "RunManifest":
        raw = json.loads(Path(path).read_text())
        raw["stages"] = [StageRecord(**r) for r in raw["stages"]]
        return cls(**raw)


class Context:
    """Dataset, vocabulary and backbones for one config, built lazily."""

    def __init__(self, config: ExperimentConfig):
        self.config = config.validate()
        self.dir = run_dir(config)
        self.dataset = data.generate_synthetic_dataset(config.dataset)
        self.names = self.dataset.class_names
        self.vocab = data.Vocabulary(self.names)
        self.split = data.base_novel_split(self.names)
        self._backbones: dict[str, model.DualEncoder] = {}

    def seed_dir(self, seed: int) -> Path:
        d = self.dir / f"seed{seed}"
        d.mkdir(parents=True, exist_ok=True)
        return d

    def backbone(self, which: str) -> model.DualEncoder:
        if which not in self._backbones:
            self._backbones[which] = load_or_pretrain_backbone(self.config, which, self.dataset,
                                                               self.vocab)
        return copy.deepcopy(self._backbones[which])


def backbone_key(config: ExperimentConfig, which: str) -> str:
    enc = getattr(config, which)
    b = config.backbone
    steps = b.teacher_steps if which == "teacher" else b.student_steps
    seed = b.teacher_seed if which == "teacher" else b.student_seed
    text = json.dumps({"encoder": asdict(enc), "dataset": asdict(config.dataset), "steps": steps,
                       "seed": seed, "lr": b.lr, "batch": b.batch_size, "scale": b.logit_scale},
                      sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def load_or_pretrain_backbone(config: ExperimentConfig, which: str, dataset: data.SyntheticDataset,
                              vocab: data.Vocabulary) -> model.DualEncoder:
    enc_cfg = getattr(config, which)
    b = config.backbone
    seed = b.teacher_seed if which == "teacher" else b.student_seed
    steps = b.teacher_steps if which == "teacher" else b.student_steps
    path = runs_root(config) / "backbones" / f"{which}-{backbone_key(config, which)}.pkdc"
    enc = model.build_encoder(enc_cfg, seed)
    if path.exists():
        ckpt.load_module(path, enc)
    else:
        log.info("pretraining %s backbone for %d steps", which, steps)
        training.pretrain_backbone(enc, dataset.prototypes, dataset.class_names, vocab, steps=steps,
                                   batch_size=b.batch_size, lr=b.lr, noise_std=config.dataset.noise_std,
                                   seed=seed, logit_scale=b.logit_scale)
        path.parent.mkdir(parents=True, exist_ok=True)
        ckpt.save_module(path, enc)
    for p in enc.parameters():
        p.requires_grad_(False)
    return enc


def build_teacher(ctx: Context, seed: int) -> model.Teacher:
    cfg = ctx.config
    enc = ctx.backbone("teacher")
    w, L = cfg.teacher.width, cfg.teacher.num_layers
    image = model.init_prompts(cfg.prompts.depth, cfg.prompts.length, w, "visual",
                               derive_seed(seed, INIT_TEACHER_VISUAL), num_layers=L)
    text = model.init_prompts(cfg.prompts.depth, cfg.prompts.length, w, "textual",
                              derive_seed(seed, INIT_TEACHER_TEXT), num_layers=L,
                              embedding_table=enc.text.token_embedding.weight,
                              template_tokens=ctx.vocab.template_ids())
    return model.Teacher(enc, image, text)


def build_student(ctx: Context, seed: int) -> model.Student:
    cfg = ctx.config
    enc = ctx.backbone("student")
    w, L = cfg.student.width, cfg.student.num_layers
    image = model.init_prompts(cfg.prompts.student_depth, cfg.prompts.length, w, "visual",
                               derive_seed(seed, INIT_STUDENT_VISUAL), num_layers=L)
    proj = model.Projector(cfg.student.output_dim, cfg.teacher.output_dim,
                           derive_seed(seed, INIT_PROJECTOR), num_layers=cfg.distill.projector_layers)
    text = None
    if cfg.distill.text_branch == "own_text_encoder":
        text = model.init_prompts(cfg.prompts.student_depth, cfg.prompts.length, w, "textual",
                                  derive_seed(seed, INIT_STUDENT_TEXT), num_layers=L,
                                  embedding_table=enc.text.token_embedding.weight,
                                  template_tokens=ctx.vocab.template_ids())
    return model.Student(enc, image, proj, text)


def _prompt_state(m: model.Teacher) -> dict[str, torch.Tensor]:
    return {"image_prompts": m.image_prompts.levels.detach(), "text_prompts": m.text_prompts.levels.detach()}


def _load_teacher(ctx: Context, seed: int, path: Path) -> model.Teacher:
    teacher = build_teacher(ctx, seed)
    state = ckpt.load_checkpoint(path)
    if set(state) != {"image_prompts", "text_prompts"}:
        raise CacheIntegrityError(f"{path} is not a teacher prompt checkpoint")
    with torch.no_grad():
        teacher.image_prompts.levels.copy_(state["image_prompts"])
        teacher.text_prompts.levels.copy_(state["text_prompts"])
    for p in teacher.parameters():
        p.requires_grad_(False)
    return teacher


def _stage_config(base: training.TrainConfig, seed: int, purpose: int) -> training.TrainConfig:
    return replace(base, seed=derive_seed(seed, purpose))


def run_stage1(ctx: Context, seed: int, counter: ev.CostCounter) -> tuple[model.Teacher, dict]:
    teacher = build_teacher(ctx, seed)
    fewshot = data.few_shot_sample(ctx.dataset.train, ctx.config.protocol.shots, ctx.split.base,
                                   derive_seed(seed, SAMPLE_FEWSHOT))
    counter.watch_teacher(teacher)
    try:
        tlog = training.pretrain_teacher(teacher, fewshot, ctx.split.base, ctx.names, ctx.vocab,
                                         _stage_config(ctx.config.stage1, seed, STAGE1_STREAM),
                                         counter=counter)
    finally:
        counter.detach()
    d = ctx.seed_dir(seed)
    ckpt.save_checkpoint(d / "teacher_prompts.pkdc", _prompt_state(teacher))
    ckpt.atomic_write(d / "stage1_log.jsonl", tlog.to_lines().encode())
    return teacher, {"teacher": str(d / "teacher_prompts.pkdc"), "log": str(d / "stage1_log.jsonl")}


def run_cache(ctx: Context, seed: int, teacher: model.Teacher,
              counter: ev.CostCounter) -> tuple[cv.ClassVectorTable, dict]:
    counter.watch_teacher(teacher)
    try:
        table = cv.compute_class_vectors(teacher, ctx.names, ctx.vocab, counter=counter)
    finally:
        counter.detach()
    cv.validate_cache(table, ctx.names, projector_dim=ctx.config.teacher.output_dim).raise_if_invalid()
    path = ctx.seed_dir(seed) / "class_vectors.pkdw"
    cv.save_cache(table, path)
    return table, {"cache": str(path)}


def _pool(ctx: Context) -> data.UnlabeledPool:
    p = ctx.config.protocol
    return data.unlabeled_pool(ctx.dataset.train, p.pool_scope, per_class_cap=p.images_per_class,
                               split=ctx.split)


def run_stage2(ctx: Context, seed: int, teacher: model.Teacher, table: cv.ClassVectorTable,
               counter: ev.CostCounter) -> tuple[model.Student, dict]:
    student = build_student(ctx, seed)
    counter.watch_teacher(teacher)
    counter.watch_student(student)
    try:
        slog = training.distill_student(teacher, student, table, _pool(ctx),
                                        _stage_config(ctx.config.stage2, seed, STAGE2_STREAM),
                                        ctx.config.distill.variant, counter=counter, vocab=ctx.vocab)
    finally:
        counter.detach()
    d = ctx.seed_dir(seed)
    ckpt.save_module(d / "student.pkdc", student)
    ckpt.atomic_write(d / "stage2_log.jsonl", slog.to_lines().encode())
    ckpt.atomic_write(d / "stage2_epochs.json", json.dumps(slog.epochs, sort_keys=True).encode())
    return student, {"student": str(d / "student.pkdc"), "log": str(d / "stage2_log.jsonl"),
                     "epochs": str(d / "stage2_epochs.json")}


def _student_table(ctx: Context, student: model.Student) -> cv.ClassVectorTable:
    tokens = cv.tokenize_classes(ctx.names, ctx.vocab)
    with torch.no_grad():
        W = core_math.l2_normalize(cv.encode_class_texts(student.encode_text, tokens).double()).float()
    return cv.ClassVectorTable(W.contiguous(), tuple(ctx.names), bytes(32))


def run_eval(ctx: Context, seed: int, teacher: model.Teacher, student: model.Student,
             table: cv.ClassVectorTable, counter: ev.CostCounter) -> tuple[dict, dict]:
    cfg = ctx.config
    test = ctx.dataset.test
    mode = cfg.protocol.table_mode
    teacher_report = ev.evaluate_base_to_novel(teacher.encode_image, table, test, ctx.split,
                                               class_names=ctx.names, table_mode=mode, seed=seed)
    own_text = cfg.distill.text_branch == "own_text_encoder"
    counter.watch_student(student)
    try:
        with counter.phase("inference"):
            if own_text:
                s_table = _student_table(ctx, student)
                scorer = student.encode_image_raw
            else:
                s_table, scorer = table, student.encode_image
            report = ev.evaluate_base_to_novel(scorer, s_table, test, ctx.split,
                                               class_names=ctx.names, table_mode=mode, seed=seed)
            s_pred = ev.predict(scorer, test.images, s_table.W)
    finally:
        counter.detach()
    t_pred = ev.predict(teacher.encode_image, test.images, table.W)
    agreement = float((s_pred == t_pred).mean())
    costs = ev.cost_report(counter, len(ctx.names))
    result = {"seed": seed, "student": ev.report_dict(report), "teacher": ev.report_dict(teacher_report),
              "agreement": agreement, "costs": costs}
    path = ctx.seed_dir(seed) / "eval.json"
    ckpt.atomic_write(path, json.dumps(result, indent=2, sort_keys=True).encode())
    return result, {"eval": str(path)}


def _counter_from(records: Sequence[StageRecord | None]) -> ev.CostCounter:
    c = ev.CostCounter()
    for rec in records:
        if rec is None:
            continue
        for phase, keys in rec.counts.items():
            for key, n in keys.items():
                c.add(key, n, phase)
    return c


def _phase_counts(counter: ev.CostCounter, phases: Sequence[str]) -> dict:
    snap = counter.snapshot()
    return {p: snap[p] for p in phases if p in snap}


def _label(config: ExperimentConfig) -> str:
    d = config.distill
    return d.mode if d.trainable == "prompts_and_projector" and d.text_branch == "shared_cache" \
        else f"{d.mode}/{d.trainable}/{d.text_branch}"


def run_pipeline(config: ExperimentConfig, stages: Sequence[str] = STAGE_ORDER, *,
                 resume: bool = False) -> RunManifest:
    """Run the requested stages for every seed; earlier stages are loaded from disk.

    With ``resume`` a stage whose artifacts already exist (and, for the
    teacher and cache, whose fingerprints agree) is loaded instead of rerun.
    Failures are recorded in the manifest and skip the seed's later stages.
    """
    unknown = set(stages) - set(STAGE_ORDER)
    if unknown:
        raise ConfigError(f"unknown stages {sorted(unknown)}; expected a subset of {STAGE_ORDER}")
    ctx = Context(config)
    ctx.dir.mkdir(parents=True, exist_ok=True)
    ckpt.atomic_write(ctx.dir / "config.txt", config.to_text().encode())
    mpath = ctx.dir / "manifest.json"
    previous = RunManifest.load(mpath) if mpath.exists() else None
    manifest = RunManifest(config.hash, config.to_text(), str(ctx.dir))
    if previous is not None and previous.config_hash == config.hash:
        manifest.stages = list(previous.stages)
    last = max(STAGE_ORDER.index(s) for s in stages)
    wanted = STAGE_ORDER[:last + 1]
    label = _label(config)
    rows: list[ev.ReportRow] = []

    for seed in config.run.seeds:
        objs: dict[str, Any] = {}
        for stage in wanted:
            rec = StageRecord(stage, seed, "done", started=time.time())
            log.info("seed %d: %s", seed, stage)
            try:
                prior = manifest.record(seed, stage)
                reuse = stage not in stages or (resume and stage != "eval")
                loaded = _try_load(ctx, seed, stage, prior, objs) if reuse else None
                if loaded is not None:
                    objs[stage] = loaded
                    rec.status = "resumed"
                    rec.outputs, rec.counts = prior.outputs, prior.counts
                elif stage not in stages and not resume:
                    raise StageError(f"{stage} artifacts for seed {seed} are missing; run that stage first")
                else:
                    counter = ev.CostCounter()
                    if stage == "stage1":
                        objs[stage], rec.outputs = run_stage1(ctx, seed, counter)
                    elif stage == "cache":
                        objs[stage], rec.outputs = run_cache(ctx, seed, objs["stage1"], counter)
                    elif stage == "stage2":
                        objs[stage], rec.outputs = run_stage2(ctx, seed, objs["stage1"], objs["cache"], counter)
                    else:
                        upstream = _counter_from([manifest.record(seed, s) for s in ("stage1", "cache", "stage2")])
                        objs[stage], rec.outputs = run_eval(ctx, seed, objs["stage1"], objs["stage2"],
                                                            objs["cache"], upstream)
                        counter = upstream
                    rec.counts = _phase_counts(counter, {"stage1": ["stage1"], "cache": ["cache"],
                                                         "stage2": ["stage2", "monitor"],
                                                         "eval": ["inference"]}[stage])
            except Exception as exc:  # recorded; later stages of this seed are skipped
                log.exception("stage %s failed for seed %d", stage, seed)
                rec.status, rec.cause = "failed", f"{type(exc).__name__}: {exc}"
            rec.finished = time.time()
            manifest.put(rec)
            if rec.status == "failed":
                for later in wanted[wanted.index(stage) + 1:]:
                    manifest.put(StageRecord(later, seed, "skipped", cause=f"{stage} failed"))
                break
        if "eval" in objs:
            result = objs["eval"]
            manifest.results.append(result)
            rows.append(result_row(label, result))

    if rows:
        manifest.reports = write_reports(ctx.dir, rows, config)
    manifest.write(mpath)
    return manifest


def result_row(label: str, result: dict) -> ev.ReportRow:
    s = result["student"]
    return ev.ReportRow(label, result["seed"], s["base_acc"], s["novel_acc"], s["hm"], result["agreement"],
                        result["costs"]["phases"]["stage2"]["text_forwards"], result["teacher"]["hm"])


def write_reports(directory: Path, rows: Sequence[ev.ReportRow], config: ExperimentConfig) -> dict[str, str]:
    csv_path, txt_path = directory / "report.csv", directory / "report.txt"
    ckpt.atomic_write(csv_path, ev.rows_to_csv(rows).encode())
    text = ev.format_table(rows, config.protocol.table_mode)
    ckpt.atomic_write(txt_path, (f"config {config.hash}\n{text}\n\n{config.to_text()}").encode())
    return {"csv": str(csv_path), "table": str(txt_path)}


def _try_load(ctx: Context, seed: int, stage: str, prior: StageRecord | None, objs: dict):
    """Load a stage's persisted result, or None when it is absent or stale."""
    if prior is None or prior.status not in ("done", "resumed"):
        return None
    d = ctx.seed_dir(seed)
    try:
        if stage == "stage1":
            return _load_teacher(ctx, seed, d / "teacher_prompts.pkdc")
        if stage == "cache":
            table = cv.load_cache(d / "class_vectors.pkdw")
            cv.check_fingerprint(table, objs["stage1"])
            cv.validate_cache(table, ctx.names, projector_dim=ctx.config.teacher.output_dim).raise_if_invalid()
            return table
        if stage == "stage2":
            student = build_student(ctx, seed)
            ckpt.load_module(d / "student.pkdc", student)
            for p in student.parameters():
                p.requires_grad_(False)
            return student
        return json.loads((d / "eval.json").read_text())
    except (OSError, CacheIntegrityError) as exc:
        log.warning("cannot reuse %s for seed %d: %s", stage, seed, exc)
        return None


def load_results(config: ExperimentConfig) -> list[ev.ReportRow]:
    path = run_dir(config) / "manifest.json"
    if not path.exists():
        raise StageError(f"no manifest at {path}")
    m = RunManifest.load(path)
    return [result_row(_label(config), r) for r in m.results]
