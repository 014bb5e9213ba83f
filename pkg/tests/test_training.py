import math

import numpy as np
import pytest
import torch

from prompt_distill import class_vectors as cv
from prompt_distill import core_math, data, model, training
from prompt_distill.errors import CacheIntegrityError, ConfigError, DataError, DomainError, ShapeError

from oracles import relative_error

NAMES = data.class_names_for(4)
VOCAB = data.Vocabulary(NAMES)
TINY_T = model.EncoderConfig(num_layers=2, width=8, num_heads=2, patch_grid=2, patch_size=2,
                             vocab_size=16, max_seq_len=8, output_dim=8)
TINY_S = model.EncoderConfig(num_layers=2, width=8, num_heads=2, patch_grid=2, patch_size=2,
                             vocab_size=16, max_seq_len=8, output_dim=6)


def tiny_teacher(seed=0):
    enc = model.build_encoder(TINY_T, seed)
    text = model.init_prompts(2, 4, 8, "textual", seed + 1, num_layers=2,
                              embedding_table=enc.text.token_embedding.weight,
                              template_tokens=VOCAB.template_ids())
    t = model.Teacher(enc, model.init_prompts(2, 2, 8, "visual", seed + 2, num_layers=2), text)
    for p in t.parameters():
        p.requires_grad_(False)
    return t


def tiny_student(seed=0, own_text=False):
    enc = model.build_encoder(TINY_S, seed + 10)
    for p in enc.parameters():
        p.requires_grad_(False)
    text = None
    if own_text:
        text = model.init_prompts(1, 4, 8, "textual", seed + 12, num_layers=2,
                                  embedding_table=enc.text.token_embedding.weight,
                                  template_tokens=VOCAB.template_ids())
    return model.Student(enc, model.init_prompts(2, 2, 8, "visual", seed + 11, num_layers=2),
                         model.Projector(6, 8, seed + 13), text)


def tiny_images(n, seed=0, dtype=np.float32):
    return np.random.default_rng(seed).standard_normal((n, 4, 4)).astype(dtype)


@pytest.fixture(scope="module")
def setup():
    teacher = tiny_teacher()
    table = cv.compute_class_vectors(teacher, NAMES, VOCAB)
    pool = data.UnlabeledPool(tiny_images(24), np.arange(24))
    return teacher, table, pool


class TestSgdStep:
    def test_half_square(self):
        p = {"p": torch.tensor([1.0], dtype=torch.float64)}
        training.sgd_step(p, {"p": p["p"].clone()}, 0.1, 0.0, {})
        assert p["p"].item() == 0.9

    def test_zero_gradient_zero_velocity(self):
        p = {"a": torch.tensor([0.3, -2.0])}
        before = p["a"].clone()
        training.sgd_step(p, {"a": torch.zeros(2)}, 0.5, 0.9, {})
        assert torch.equal(p["a"], before)
        training.sgd_step(p, {"a": None}, 0.5, 0.9, {})
        assert torch.equal(p["a"], before)

    def test_momentum_accumulates(self):
        p = {"a": torch.tensor([0.0], dtype=torch.float64)}
        vel = {}
        training.sgd_step(p, {"a": torch.tensor([1.0], dtype=torch.float64)}, 0.1, 0.5, vel)
        training.sgd_step(p, {"a": torch.tensor([1.0], dtype=torch.float64)}, 0.1, 0.5, vel)
        # v1 = 1, v2 = 1.5; p = -0.1 - 0.15
        assert p["a"].item() == pytest.approx(-0.25, abs=1e-15)
        assert vel["a"].item() == 1.5

    def test_misaligned(self):
        p = {"a": torch.zeros(2)}
        with pytest.raises(ShapeError):
            training.sgd_step(p, {"b": torch.zeros(2)}, 0.1, 0.0, {})
        with pytest.raises(ShapeError):
            training.sgd_step(p, {"a": torch.zeros(3)}, 0.1, 0.0, {})
        with pytest.raises(DomainError):
            training.sgd_step(p, {"a": torch.zeros(2)}, 0.0, 0.0, {})


class TestSchedule:
    def test_cosine(self):
        cfg = training.TrainConfig(lr=0.01)
        assert training.learning_rate_at(cfg, 0, 200) == 0.01
        assert training.learning_rate_at(cfg, 100, 200) == pytest.approx(0.005)
        assert training.learning_rate_at(cfg, 199, 200) <= 0.01 * 1e-3

    def test_constant(self):
        cfg = training.TrainConfig(lr=0.02, lr_schedule="constant")
        assert {training.learning_rate_at(cfg, s, 50) for s in range(50)} == {0.02}

    @pytest.mark.parametrize("step", [-1, 10])
    def test_out_of_range(self, step):
        with pytest.raises(DomainError):
            training.learning_rate_at(training.TrainConfig(), step, 10)


class TestConfig:
    @pytest.mark.parametrize("field,value", [("tau", 0.0), ("epochs", 0), ("lr", -1.0),
                                             ("momentum", 1.0), ("lr_schedule", "step")])
    def test_invalid(self, field, value):
        with pytest.raises(ConfigError):
            training.TrainConfig(**{field: value}).validate()

    def test_variant_rules(self):
        with pytest.raises(ConfigError):
            training.DistillVariant(mode="feature_mse", text_branch="own_text_encoder").validate()
        with pytest.raises(ConfigError):
            training.DistillVariant(mode="bogus").validate()
        assert training.DistillVariant(trainable="projector_only").stage == "projector_only"


class TestStageOne:
    def fewshot(self, n_per=4):
        labels = np.repeat(np.arange(2), n_per)
        return data.LabeledSet(tiny_images(len(labels), seed=5), labels, 4)

    def test_initial_loss_near_log_n(self):
        # small logit scale keeps a freshly built teacher's logits near uniform
        teacher = tiny_teacher(3)
        cfg = training.TrainConfig(epochs=1, batch_size=8, logit_scale=1.0, augment=False)
        log = training.pretrain_teacher(teacher, self.fewshot(), (0, 1), NAMES, VOCAB, cfg)
        assert abs(log.steps[0]["loss"] - math.log(2)) < 0.15 * math.log(2)

    def test_prompts_move_backbone_does_not(self):
        teacher = tiny_teacher(4)
        before = model.checksum(teacher.backbone.named_parameters())
        prompts = teacher.image_prompts.levels.detach().clone()
        cfg = training.TrainConfig(epochs=3, batch_size=4)
        log = training.pretrain_teacher(teacher, self.fewshot(), (0, 1), NAMES, VOCAB, cfg)
        assert model.checksum(teacher.backbone.named_parameters()) == before
        assert len(set(log.frozen_checksums())) == 1
        assert not torch.equal(prompts, teacher.image_prompts.levels)
        assert len(log.steps) == 6

    def test_rejects_novel_or_empty(self):
        teacher = tiny_teacher()
        bad = data.LabeledSet(tiny_images(2), np.array([0, 3]), 4)
        with pytest.raises(DataError):
            training.pretrain_teacher(teacher, bad, (0, 1), NAMES, VOCAB, training.TrainConfig())
        empty = data.LabeledSet(tiny_images(0), np.zeros(0, np.int64), 4)
        with pytest.raises(DataError):
            training.pretrain_teacher(teacher, empty, (0, 1), NAMES, VOCAB, training.TrainConfig())

    def test_aux_loss_hook_is_called(self):
        calls = []

        def aux(teacher, x, y, logits):
            calls.append(len(x))
            return logits.sum() * 0

        training.pretrain_teacher(tiny_teacher(), self.fewshot(), (0, 1), NAMES, VOCAB,
                                  training.TrainConfig(epochs=1, batch_size=4), aux_loss=aux)
        assert calls == [4, 4]


class TestStageTwo:
    def test_frozen_parameters_bit_identical(self, setup):
        teacher, table, pool = setup
        student = tiny_student()
        cfg = training.TrainConfig(epochs=2, batch_size=8)
        part = model.partition_parameters("student_distill", teacher=teacher, student=student)
        frozen_before = {n: p.detach().clone() for n, p in part.frozen.items()}
        trainable_before = {n: p.detach().clone() for n, p in part.trainable.items()}
        log = training.distill_student(teacher, student, table, pool, cfg)
        for n, p in part.frozen.items():
            assert torch.equal(p, frozen_before[n]), n
        assert all(not torch.equal(p, trainable_before[n]) for n, p in part.trainable.items())
        assert len(set(log.frozen_checksums())) == 1
        assert all(not p.requires_grad for p in student.parameters())

    def test_step_count_and_ragged_tail(self, setup):
        teacher, table, pool = setup
        cfg = training.TrainConfig(epochs=2, batch_size=10)
        log = training.distill_student(teacher, tiny_student(), table, pool, cfg)
        assert len(log.steps) == 2 * 2  # 24 images, batches of 10, tail of 4 dropped
        assert [e["epoch"] for e in log.epochs] == [0, 1, 2]

    def test_pool_smaller_than_batch(self, setup):
        teacher, table, _ = setup
        tiny_pool = data.UnlabeledPool(tiny_images(3), np.arange(3))
        log = training.distill_student(teacher, tiny_student(), table, tiny_pool,
                                       training.TrainConfig(epochs=1, batch_size=8))
        assert len(log.steps) == 1

    def test_reproducible_logs(self, setup):
        teacher, table, pool = setup
        cfg = training.TrainConfig(epochs=2, batch_size=8, seed=7)
        a = training.distill_student(teacher, tiny_student(), table, pool, cfg)
        b = training.distill_student(teacher, tiny_student(), table, pool, cfg)
        assert a.to_lines() == b.to_lines()

    def test_fingerprint_mismatch(self, setup):
        teacher, table, pool = setup
        other = tiny_teacher(seed=5)
        with pytest.raises(CacheIntegrityError):
            training.distill_student(other, tiny_student(), table, pool, training.TrainConfig(epochs=1))
        training.distill_student(other, tiny_student(), table, pool, training.TrainConfig(epochs=1),
                                 allow_fingerprint_mismatch=True)

    def test_projector_less_student_rejected(self, setup):
        teacher, table, pool = setup
        s = tiny_student()
        s.projector = None
        with pytest.raises(ConfigError):
            training.distill_student(teacher, s, table, pool, training.TrainConfig(epochs=1))

    def test_empty_pool(self, setup):
        teacher, table, _ = setup
        with pytest.raises(DataError):
            training.distill_student(teacher, tiny_student(), table,
                                     data.UnlabeledPool(tiny_images(0), np.zeros(0, np.int64)),
                                     training.TrainConfig(epochs=1))

    @pytest.mark.parametrize("mode", ["feature_l1", "feature_mse"])
    def test_feature_modes_train(self, setup, mode):
        teacher, table, pool = setup
        log = training.distill_student(teacher, tiny_student(), table, pool,
                                       training.TrainConfig(epochs=3, batch_size=8, augment=False),
                                       training.DistillVariant(mode=mode))
        losses = [s["loss"] for s in log.steps]
        assert losses[-1] < losses[0]

    def test_own_text_encoder_trains_student_text_prompts(self, setup):
        teacher, table, pool = setup
        student = tiny_student(own_text=True)
        variant = training.DistillVariant(text_branch="own_text_encoder")
        part = model.partition_parameters(variant.stage, teacher=teacher, student=student).apply()
        x = torch.from_numpy(pool.images[:8])
        tokens = cv.tokenize_classes(NAMES, VOCAB)
        text = core_math.l2_normalize(cv.encode_class_texts(student.encode_text, tokens))
        loss = training.distillation_loss(teacher, student, x, table.W, variant, 1.0, 100.0, text)
        grads = training._gradients(loss, part.trainable)
        g = grads["student.text_prompts.levels"]
        assert g is not None and g.abs().sum() > 0
        assert "student.projector.layers.0.weight" not in part.trainable
        before = student.text_prompts.levels.detach().clone()
        training.distill_student(teacher, student, table, pool, training.TrainConfig(epochs=1),
                                 variant, vocab=VOCAB)
        assert not torch.equal(before, student.text_prompts.levels)

    def test_single_image_pool_converges(self, setup):
        teacher, table, _ = setup
        one = data.UnlabeledPool(tiny_images(1, seed=9), np.array([0]))
        cfg = training.TrainConfig(epochs=300, batch_size=1, lr=0.05, augment=False,
                                   lr_schedule="constant")
        log = training.distill_student(teacher, tiny_student(), table, one, cfg)
        assert log.epochs[-1]["pool_loss"] < 1e-3
        assert log.epochs[-1]["pool_loss"] < log.epochs[0]["pool_loss"]


def _double(module):
    return module.double()


class TestEndToEndGradient:
    """Autograd vs central differences through encoder, prompts and projector in float64."""

    @pytest.fixture(scope="class")
    @classmethod
    def instance(cls):
        teacher = _double(tiny_teacher(1))
        student = _double(tiny_student(1))
        with torch.no_grad():
            W = core_math.l2_normalize(cv.encode_class_texts(teacher.encode_text,
                                                             cv.tokenize_classes(NAMES, VOCAB)))
        x = torch.from_numpy(tiny_images(6, seed=2, dtype=np.float64))
        part = model.partition_parameters("student_distill", teacher=teacher, student=student).apply()
        return teacher, student, W, x, part

    def loss(self, inst, mode="logit_kl", tau=2.0):
        teacher, student, W, x, _ = inst
        return training.distillation_loss(teacher, student, x, W, training.DistillVariant(mode=mode),
                                          tau, 10.0)

    @pytest.mark.parametrize("mode", ["logit_kl", "feature_mse"])
    def test_random_directions(self, instance, mode):
        params = instance[4].trainable
        names = sorted(params)
        grads = training._gradients(self.loss(instance, mode), params)
        rng = np.random.default_rng(0)
        h = 1e-4
        errors = []
        for _ in range(100):
            dirs = {n: torch.from_numpy(rng.standard_normal(tuple(params[n].shape))) for n in names}
            # unit-length step in the joint parameter space
            scale = math.sqrt(sum(float((d * d).sum()) for d in dirs.values()))
            dirs = {n: d / scale for n, d in dirs.items()}
            analytic = sum(float((grads[n] * dirs[n]).sum()) for n in names)
            with torch.no_grad():
                for n in names:
                    params[n].add_(h * dirs[n])
                up = self.loss(instance, mode).item()
                for n in names:
                    params[n].sub_(2 * h * dirs[n])
                down = self.loss(instance, mode).item()
                for n in names:
                    params[n].add_(h * dirs[n])
            errors.append(relative_error([analytic], [(up - down) / (2 * h)]))
        assert max(errors) < 1e-3

    def test_every_trainable_tensor_gets_matching_gradient(self, instance):
        params = instance[4].trainable
        grads = training._gradients(self.loss(instance), params)
        h = 1e-4
        for name, p in params.items():
            flat = p.view(-1)
            idx = int(torch.argmax(grads[name].abs()))
            with torch.no_grad():
                old = flat[idx].item()
                flat[idx] = old + h
                up = self.loss(instance).item()
                flat[idx] = old - h
                down = self.loss(instance).item()
                flat[idx] = old
            fd = (up - down) / (2 * h)
            assert relative_error([grads[name].view(-1)[idx].item()], [fd]) < 1e-3, name

    def test_frozen_parameters_are_used(self, instance):
        base = self.loss(instance).item()
        student = instance[1]
        w = student.backbone.image.proj
        with torch.no_grad():
            w[0, 0] += 1e-2
            moved = self.loss(instance).item()
            w[0, 0] -= 1e-2
        assert moved != base
