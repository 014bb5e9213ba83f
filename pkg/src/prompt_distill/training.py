"""Backbone pretraining stand-in, Stage I teacher prompt tuning and Stage II prompt distillation."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Literal, Sequence

import numpy as np
import torch

from . import core_math
from .class_vectors import (ClassVectorTable, check_fingerprint, encode_class_texts,
                            tokenize_classes)
from .data import (DEFAULT_TEMPLATE, STREAM_PRETRAIN, LabeledSet, UnlabeledPool, Vocabulary,
                   augment_batch, rng_stream)
from .errors import ConfigError, DataError, DomainError, ShapeError
from .evaluation import CostCounter
from .model import (DualEncoder, ParameterPartition, Student, Teacher, checksum,
                    partition_parameters)

log = logging.getLogger(__name__)

# purpose-split RNG stream ids for the training loops
STREAM_BATCHES = 21
STREAM_AUGMENT = 22

DEFAULT_LOGIT_SCALE = 100.0


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    lr: float = 0.005
    momentum: float = 0.9
    tau: float = 1.0
    seed: int = 0
    lr_schedule: Literal["constant", "cosine"] = "cosine"
    augment: bool = True
    logit_scale: float = DEFAULT_LOGIT_SCALE

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not self.tau > 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if not self.logit_scale > 0:
            raise ConfigError(f"logit_scale must be > 0, got {self.logit_scale}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")


KD_MODES = ("logit_kl", "feature_l1", "feature_mse")
TRAINABLE_SETS = ("prompts_and_projector", "projector_only", "full_finetune")
TEXT_BRANCHES = ("shared_cache", "own_text_encoder")


@dataclass(frozen=True)
class DistillVariant:
    mode: str = "logit_kl"
    trainable: str = "prompts_and_projector"
    text_branch: str = "shared_cache"

    def validate(self) -> None:
        if self.mode not in KD_MODES:
            raise ConfigError(f"unknown distillation mode {self.mode!r}")
        if self.trainable not in TRAINABLE_SETS:
            raise ConfigError(f"unknown trainable set {self.trainable!r}")
        if self.text_branch not in TEXT_BRANCHES:
            raise ConfigError(f"unknown text branch {self.text_branch!r}")
        if self.text_branch == "own_text_encoder" and (
                self.mode != "logit_kl" or self.trainable != "prompts_and_projector"):
            raise ConfigError("own_text_encoder is only defined for logit_kl with prompts")

    @property
    def stage(self) -> str:
        if self.text_branch == "own_text_encoder":
            return "student_distill_own_text"
        return {"prompts_and_projector": "student_distill", "projector_only": "projector_only",
                "full_finetune": "full_finetune"}[self.trainable]


@dataclass
class TrainingLog:
    config: dict
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    seeds: dict = field(default_factory=dict)

    def frozen_checksums(self) -> list[str]:
        return [e["frozen_checksum"] for e in self.epochs]

    def epoch_losses(self, key: str = "pool_loss") -> list[float]:
        return [e[key] for e in self.epochs]

    def to_lines(self) -> str:
        lines = [json.dumps({"config": self.config, "seeds": self.seeds}, sort_keys=True)]
        lines += [json.dumps(s, sort_keys=True) for s in self.steps]
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_lines())


def learning_rate_at(config: TrainConfig, step: int, total_steps: int) -> float:
    if not 0 <= step < total_steps:
        raise DomainError(f"step {step} outside [0, {total_steps})")
    if config.lr_schedule == "constant":
        return config.lr
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def sgd_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor | None], lr: float,
             momentum: float, velocity: dict[str, torch.Tensor]) -> None:
    """In-place classical momentum: v <- mu v + g; p <- p - lr v.

    A ``None`` gradient counts as zero. Only names in ``params`` are touched.
    """
    if not lr > 0:
        raise DomainError(f"learning rate must be positive, got {lr}")
    if set(grads) != set(params):
        raise ShapeError("gradients are not aligned with the trainable parameters")
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if g is None:
                g = torch.zeros_like(p)
            elif g.shape != p.shape:
                raise ShapeError(f"gradient for {name} has shape {tuple(g.shape)}, parameter {tuple(p.shape)}")
            v = velocity.get(name)
            v = g.clone() if v is None else v.mul_(momentum).add_(g)
            velocity[name] = v
            p.sub_(lr * v)


def _gradients(loss: torch.Tensor, params: dict[str, torch.Tensor]) -> dict[str, torch.Tensor | None]:
    names = list(params)
    grads = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
    return dict(zip(names, grads))


def _batch_tensor(images: np.ndarray, rng: np.random.Generator | None) -> torch.Tensor:
    if rng is not None:
        images = augment_batch(images, rng)
    return torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32))


def scaled_logits(features: torch.Tensor, table: torch.Tensor, logit_scale: float) -> torch.Tensor:
    """``logit_scale * normalize(features) @ table.T``; the table rows are unit norm."""
    return logit_scale * core_math.similarity_logits(core_math.l2_normalize(features), table)


def pretrain_backbone(backbone: DualEncoder, prototypes: np.ndarray, class_names: Sequence[str],
                      vocab: Vocabulary, *, steps: int = 300, batch_size: int = 64,
                      lr: float = 1e-3, noise_std: float = 0.5, seed: int = 0,
                      logit_scale: float = DEFAULT_LOGIT_SCALE, augment: bool = True,
                      template: str = DEFAULT_TEMPLATE) -> list[float]:
    """Image-to-text contrastive training of both towers, standing in for pretrained weights.

    Fresh noisy draws of the class prototypes are paired with their captions;
    each image is classified against the captions of every class.
    """
    rng = rng_stream(seed, STREAM_PRETRAIN)
    tokens = tokenize_classes(class_names, vocab, template)
    params = [p for p in backbone.parameters()]
    for p in params:
        p.requires_grad_(True)
    opt = torch.optim.Adam(params, lr=lr)
    n = len(class_names)
    losses = []
    for step in range(steps):
        labels = rng.integers(0, n, size=batch_size)
        images = prototypes[labels] + noise_std * rng.standard_normal(
            (batch_size,) + prototypes.shape[1:]).astype(np.float32)
        x = _batch_tensor(images, rng if augment else None)
        text = core_math.l2_normalize(encode_class_texts(lambda t: backbone.text(t), tokens))
        logits = scaled_logits(backbone.image(x), text, logit_scale)
        loss = core_math.cross_entropy(logits, torch.from_numpy(labels))
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    for p in params:
        p.requires_grad_(False)
    return losses


def _frozen_checksum(partition: ParameterPartition) -> str:
    return checksum(partition.frozen)


def pretrain_teacher(teacher: Teacher, labeled: LabeledSet, base_classes: Sequence[int],
                     class_names: Sequence[str], vocab: Vocabulary, config: TrainConfig, *,
                     counter: CostCounter | None = None, template: str = DEFAULT_TEMPLATE,
                     aux_loss: Callable[..., torch.Tensor] | None = None) -> TrainingLog:
    """Few-shot cross-entropy training of the teacher's visual and textual prompts.

    Logits are taken against the base-class text features, recomputed with
    gradients every step so that the textual prompts are trained too.
    ``aux_loss(teacher, images, labels, logits)`` is added when given.
    """
    config.validate()
    if len(labeled) == 0:
        raise DataError("teacher pretraining needs a nonempty labeled set")
    base = list(base_classes)
    remap = {c: i for i, c in enumerate(base)}
    if not set(labeled.labels.tolist()) <= set(base):
        raise DataError("teacher pretraining data must come from base classes only")
    targets = np.array([remap[int(c)] for c in labeled.labels], dtype=np.int64)
    tokens = tokenize_classes([class_names[c] for c in base], vocab, template)

    partition = partition_parameters("teacher_pretrain", teacher=teacher).apply()
    trainable = partition.trainable
    velocity: dict[str, torch.Tensor] = {}
    batch_rng = rng_stream(config.seed, STREAM_BATCHES)
    aug_rng = rng_stream(config.seed, STREAM_AUGMENT) if config.augment else None
    n = len(labeled)
    per_epoch = max(1, math.ceil(n / config.batch_size))
    total = per_epoch * config.epochs
    tlog = TrainingLog(config=asdict(config), seeds={"seed": config.seed})
    frozen_sum = _frozen_checksum(partition)
    tlog.epochs.append({"epoch": 0, "frozen_checksum": frozen_sum})
    phase = counter.phase("stage1") if counter is not None else _null()
    step = 0
    with phase:
        for epoch in range(1, config.epochs + 1):
            order = batch_rng.permutation(n)
            epoch_losses = []
            for b in range(per_epoch):
                idx = order[b * config.batch_size:(b + 1) * config.batch_size]
                x = _batch_tensor(labeled.images[idx], aug_rng)
                y = torch.from_numpy(targets[idx])
                W = core_math.l2_normalize(encode_class_texts(teacher.encode_text, tokens))
                logits = scaled_logits(teacher.encode_image(x), W, config.logit_scale)
                loss = core_math.cross_entropy(logits, y)
                if aux_loss is not None:
                    loss = loss + aux_loss(teacher, x, y, logits)
                lr_t = learning_rate_at(config, step, total)
                sgd_step(trainable, _gradients(loss, trainable), lr_t, config.momentum, velocity)
                epoch_losses.append(loss.item())
                tlog.steps.append({"step": step, "epoch": epoch, "loss": loss.item(), "lr": lr_t,
                                   "frozen_checksum": frozen_sum})
                step += 1
            frozen_sum = _frozen_checksum(partition)
            tlog.epochs.append({"epoch": epoch, "train_loss": float(np.mean(epoch_losses)),
                                "frozen_checksum": frozen_sum})
    for p in trainable.values():
        p.requires_grad_(False)
    return tlog


class _null:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def distillation_loss(teacher: Teacher, student: Student, images: torch.Tensor,
                      table: torch.Tensor, variant: DistillVariant, tau: float,
                      logit_scale: float, student_text: torch.Tensor | None = None,
                      teacher_features: torch.Tensor | None = None) -> torch.Tensor:
    """Loss of one unlabeled batch; the teacher side carries no gradient.

    ``teacher_features`` may hold the teacher's image features for ``images``
    when they were computed ahead of time.
    """
    if teacher_features is not None:
        f_t = teacher_features
    else:
        with torch.no_grad():
            f_t = teacher.encode_image(images)
    if variant.mode == "logit_kl":
        q_t = scaled_logits(f_t, table, logit_scale)
        if variant.text_branch == "own_text_encoder":
            q_s = scaled_logits(student.encode_image_raw(images), student_text, logit_scale)
        else:
            q_s = scaled_logits(student.encode_image(images), table, logit_scale)
        return core_math.kd_loss(q_t, q_s, tau)
    kind = "L1" if variant.mode == "feature_l1" else "MSE"
    return core_math.feature_kd_loss(f_t, student.encode_image(images), kind)


def _check_variant_dims(student: Student, table: ClassVectorTable, variant: DistillVariant) -> None:
    if variant.text_branch == "own_text_encoder":
        if student.text_prompts is None:
            raise ConfigError("own_text_encoder variant needs student text prompts")
        return
    if student.projector is None and student.backbone.cfg.output_dim != table.dim:
        raise ConfigError("student without projector does not reach the class-vector dimension")
    if student.feature_dim != table.dim:
        raise ConfigError(
            f"student features have dim {student.feature_dim}, class vectors {table.dim}"
        )


def pool_kd_loss(teacher: Teacher, student: Student, pool: UnlabeledPool, table: torch.Tensor,
                 tau: float, logit_scale: float, teacher_logits: torch.Tensor | None = None,
                 batch_size: int = 512) -> float:
    """Mean logit-distillation loss over the whole (unaugmented) pool."""
    total = 0.0
    with torch.no_grad():
        for start in range(0, len(pool), batch_size):
            x = torch.from_numpy(pool.images[start:start + batch_size])
            q_t = (teacher_logits[start:start + batch_size] if teacher_logits is not None
                   else scaled_logits(teacher.encode_image(x), table, logit_scale))
            q_s = scaled_logits(student.encode_image(x), table, logit_scale)
            total += float(core_math.kd_loss(q_t, q_s, tau)) * len(x)
    return total / len(pool)


def distill_student(teacher: Teacher, student: Student, table: ClassVectorTable,
                    pool: UnlabeledPool, config: TrainConfig,
                    variant: DistillVariant = DistillVariant(), *,
                    counter: CostCounter | None = None, vocab: Vocabulary | None = None,
                    template: str = DEFAULT_TEMPLATE, allow_fingerprint_mismatch: bool = False,
                    track_pool_loss: bool = True) -> TrainingLog:
    """Train the student on unlabeled images to reproduce the teacher's class distribution.

    Batches come from a seeded per-epoch shuffle with the ragged tail dropped.
    Without augmentation the frozen teacher sees the same images every epoch,
    so its features are computed once up front. ``pool_loss`` in the epoch
    records is the mean logit-distillation loss over the unaugmented pool,
    measured outside the counted stage2 phase.
    """
    config.validate()
    variant.validate()
    if len(pool) == 0:
        raise DataError("distillation needs a nonempty unlabeled pool")
    check_fingerprint(table, teacher, allow_fingerprint_mismatch)
    _check_variant_dims(student, table, variant)
    W = table.W
    student_tokens = None
    if variant.text_branch == "own_text_encoder":
        if vocab is None:
            raise ConfigError("own_text_encoder variant needs the vocabulary")
        student_tokens = tokenize_classes(table.class_names, vocab, template)

    partition = partition_parameters(variant.stage, teacher=teacher, student=student).apply()
    trainable = partition.trainable
    teacher_before = checksum({n: p for n, p in partition.frozen.items() if n.startswith("teacher.")})
    velocity: dict[str, torch.Tensor] = {}
    batch_rng = rng_stream(config.seed, STREAM_BATCHES)
    aug_rng = rng_stream(config.seed, STREAM_AUGMENT) if config.augment else None
    n = len(pool)
    bs = min(config.batch_size, n)
    per_epoch = n // bs
    total = per_epoch * config.epochs
    tlog = TrainingLog(config={**asdict(config), "variant": asdict(variant)},
                       seeds={"seed": config.seed})

    def teacher_pool_features() -> torch.Tensor:
        with torch.no_grad():
            return torch.cat([teacher.encode_image(torch.from_numpy(pool.images[s:s + 512]))
                              for s in range(0, n, 512)])

    pool_features = None
    if not config.augment:
        with (counter.phase("stage2") if counter is not None else _null()):
            pool_features = teacher_pool_features()
    teacher_logits = None
    if track_pool_loss:
        with (counter.phase("monitor") if counter is not None else _null()):
            feats = pool_features if pool_features is not None else teacher_pool_features()
            teacher_logits = scaled_logits(feats, W, config.logit_scale)

    def monitor(epoch: int, frozen_sum: str, losses: list[float]) -> None:
        rec = {"epoch": epoch, "frozen_checksum": frozen_sum}
        if losses:
            rec["train_loss"] = float(np.mean(losses))
        if track_pool_loss and variant.text_branch == "shared_cache":
            with (counter.phase("monitor") if counter is not None else _null()):
                rec["pool_loss"] = pool_kd_loss(teacher, student, pool, W, config.tau,
                                                config.logit_scale, teacher_logits)
        tlog.epochs.append(rec)

    frozen_sum = _frozen_checksum(partition)
    monitor(0, frozen_sum, [])
    step = 0
    with (counter.phase("stage2") if counter is not None else _null()):
        for epoch in range(1, config.epochs + 1):
            order = batch_rng.permutation(n)
            losses = []
            for b in range(per_epoch):
                idx = order[b * bs:(b + 1) * bs]
                x = _batch_tensor(pool.images[idx], aug_rng)
                student_text = None
                if student_tokens is not None:
                    student_text = core_math.l2_normalize(
                        encode_class_texts(student.encode_text, student_tokens))
                f_t = pool_features[torch.from_numpy(idx)] if pool_features is not None else None
                loss = distillation_loss(teacher, student, x, W, variant, config.tau,
                                         config.logit_scale, student_text, f_t)
                lr_t = learning_rate_at(config, step, total)
                sgd_step(trainable, _gradients(loss, trainable), lr_t, config.momentum, velocity)
                losses.append(loss.item())
                tlog.steps.append({"step": step, "epoch": epoch, "loss": loss.item(), "lr": lr_t,
                                   "frozen_checksum": frozen_sum})
                step += 1
            frozen_sum = _frozen_checksum(partition)
            monitor(epoch, frozen_sum, losses)
    for p in trainable.values():
        p.requires_grad_(False)
    teacher_after = checksum({n: p for n, p in partition.frozen.items() if n.startswith("teacher.")})
    if teacher_after != teacher_before:
        raise RuntimeError("teacher parameters changed during distillation")
    return tlog
