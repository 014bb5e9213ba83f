import json

import pytest

from prompt_distill.errors import ConfigError
from prompt_distill.harness import ablation, cli, config as hc, pipeline

TINY = {
    "dataset.num_classes": "4", "dataset.images_per_class": "8", "dataset.test_per_class": "4",
    "teacher.num_layers": "2", "teacher.width": "16", "teacher.num_heads": "2", "teacher.output_dim": "16",
    "student.num_layers": "1", "student.width": "8", "student.num_heads": "2", "student.output_dim": "8",
    "backbone.teacher_steps": "3", "backbone.student_steps": "3", "backbone.batch_size": "8",
    "stage1.epochs": "1", "stage2.epochs": "2", "protocol.shots": "4", "run.seeds": "0,1",
}


def tiny(tmp_path, **extra):
    return hc.parse_config(flags={**TINY, "run.root": str(tmp_path), **extra})


def argv_for(tmp_path, **extra):
    flags = {**TINY, "run.root": str(tmp_path), **extra}
    out = []
    for k, v in flags.items():
        out += [f"--{k}", v]
    return out


class TestConfig:
    def test_empty_file_gives_defaults(self, tmp_path):
        path = tmp_path / "empty.cfg"
        path.write_text("# nothing here\n\n")
        c = hc.parse_config(path)
        assert c == hc.ExperimentConfig()
        assert (c.stage1.epochs, c.stage1.batch_size, c.stage1.lr) == (20, 8, 0.005)
        assert (c.stage2.tau, c.prompts.depth, c.prompts.length) == (1.0, 9, 4)
        assert c.run.seeds == (0, 1, 2)

    def test_precedence(self, tmp_path):
        path = tmp_path / "a.cfg"
        path.write_text("stage2.lr = 0.01\nstage2.epochs = 7\n")
        c = hc.parse_config(path, {"stage2.lr": "0.02"})
        assert c.stage2.lr == 0.02 and c.stage2.epochs == 7

    def test_tau_zero_rejected(self, tmp_path):
        path = tmp_path / "t.cfg"
        path.write_text("tau = 0\n")
        with pytest.raises(ConfigError, match="tau must be > 0"):
            hc.parse_config(path)

    @pytest.mark.parametrize("text,needle", [("stage2.bogus = 1", "stage2.bogus"),
                                             ("nosection = 1", "nosection"),
                                             ("stage2.epochs = many", "stage2.epochs"),
                                             ("stage2.augment = maybe", "stage2.augment"),
                                             ("protocol.pool_scope = half", "protocol.pool_scope"),
                                             ("stage1.seed = 3", "stage1.seed"),
                                             ("just words", "expected 'key = value'")])
    def test_bad_lines_name_the_key(self, tmp_path, text, needle):
        path = tmp_path / "bad.cfg"
        path.write_text(text + "\n")
        with pytest.raises(ConfigError, match=needle.replace(".", r"\.")):
            hc.parse_config(path)

    def test_text_round_trip(self, tmp_path):
        c = hc.parse_config(flags={"protocol.images_per_class": "64", "run.seeds": "3,5"})
        path = tmp_path / "c.cfg"
        path.write_text(c.to_text())
        again = hc.parse_config(path)
        assert again == c and again.hash == c.hash
        assert again.protocol.images_per_class == 64

    def test_every_field_moves_the_hash(self):
        base = hc.ExperimentConfig()
        seen = {base.hash}
        changes = {"distill.mode": "feature_l1", "protocol.pool_scope": "base_only",
                   "protocol.table_mode": "split", "distill.text_branch": "shared_cache",
                   "stage1.lr_schedule": "constant", "stage2.lr_schedule": "constant",
                   "distill.trainable": "projector_only", "protocol.images_per_class": "3",
                   "run.seeds": "4"}
        for key, value in hc.flatten(base).items():
            if key in ("run.root", "run.name", "distill.text_branch"):
                continue
            if key in changes:
                new = changes[key]
            elif isinstance(value, bool):
                new = "false" if value else "true"
            elif key.endswith(("num_heads", "width", "patch_grid", "patch_size", "image_side")):
                continue  # coupled fields, covered below
            elif isinstance(value, int):
                new = str(value + 1)
            else:
                new = repr(value / 2)
            changed = base.with_overrides({key: new})
            assert changed.hash not in seen, key
            seen.add(changed.hash)
        assert base.with_overrides({"teacher.width": 128}).hash not in seen

    def test_root_does_not_enter_hash(self):
        base = hc.ExperimentConfig()
        assert base.with_overrides({"run.root": "/elsewhere"}).hash == base.hash

    def test_env_overrides_root(self, tmp_path, monkeypatch):
        monkeypatch.setenv(pipeline.RUNS_ROOT_ENV, str(tmp_path))
        assert pipeline.run_dir(hc.ExperimentConfig()).parent == tmp_path


@pytest.fixture(scope="module")
def fresh_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    cfg = tiny(root)
    return cfg, pipeline.run_pipeline(cfg)


class TestPipeline:
    def test_all_stages_in_order(self, fresh_run):
        cfg, m = fresh_run
        assert m.ok
        assert [(r.seed, r.stage) for r in m.stages] == [
            (s, st) for s in (0, 1) for st in pipeline.STAGE_ORDER]
        assert [r["seed"] for r in m.results] == [0, 1]
        assert m.config_text == cfg.to_text()

    def test_artifacts_under_hash_dir(self, fresh_run):
        cfg, m = fresh_run
        assert m.run_dir.endswith(cfg.hash)
        for rec in m.stages:
            for path in rec.outputs.values():
                assert path.startswith(m.run_dir)

    def test_cost_checks(self, fresh_run):
        _, m = fresh_run
        for r in m.results:
            assert all(r["costs"]["checks"].values())
            assert r["costs"]["phases"]["cache"]["text_forwards"] == 4

    def test_resume_skips_teacher_and_cache(self, fresh_run):
        cfg, m = fresh_run
        csv_before = open(m.reports["csv"]).read()
        again = pipeline.run_pipeline(cfg, resume=True)
        status = {(r.seed, r.stage): r.status for r in again.stages}
        assert status[(0, "stage1")] == status[(0, "cache")] == "resumed"
        assert open(again.reports["csv"]).read() == csv_before
        assert all(all(r["costs"]["checks"].values()) for r in again.results)

    def test_resume_from_cache_equals_fresh(self, fresh_run, tmp_path):
        cfg, m = fresh_run
        for seed in cfg.run.seeds:
            (pipeline.run_dir(cfg) / f"seed{seed}" / "student.pkdc").unlink()
        resumed = pipeline.run_pipeline(cfg, resume=True)
        assert {r.status for r in resumed.stages if r.stage == "stage2"} == {"done"}
        other = pipeline.run_pipeline(tiny(tmp_path))
        assert open(resumed.reports["csv"], "rb").read() == open(other.reports["csv"], "rb").read()

    def test_stale_cache_is_recomputed(self, fresh_run):
        cfg, _ = fresh_run
        path = pipeline.run_dir(cfg) / "seed0" / "class_vectors.pkdw"
        raw = bytearray(path.read_bytes())
        raw[60] ^= 0xFF
        path.write_bytes(bytes(raw))
        m = pipeline.run_pipeline(cfg, resume=True)
        assert m.record(0, "cache").status == "done"
        assert m.record(1, "cache").status == "resumed"

    def test_stage_failure_recorded(self, tmp_path):
        cfg = tiny(tmp_path, **{"protocol.shots": "50"})
        m = pipeline.run_pipeline(cfg)
        assert not m.ok
        rec = m.record(0, "stage1")
        assert rec.status == "failed" and "DataError" in rec.cause
        assert m.record(0, "eval").status == "skipped"
        assert json.loads(open(pipeline.run_dir(cfg) / "manifest.json").read())["stages"][0]["status"] == "failed"


class TestCli:
    def test_standalone_stages_match_pipeline(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for cmd in ("pretrain", "cache", "distill", "eval"):
            assert cli.main([cmd] + argv_for(a)) == 0
        assert cli.main(["pipeline"] + argv_for(b)) == 0
        cfg = tiny(a)
        csv_a = (pipeline.run_dir(cfg)).joinpath("report.csv").read_bytes()
        csv_b = pipeline.run_dir(tiny(b)).joinpath("report.csv").read_bytes()
        assert csv_a == csv_b

    def test_config_errors_exit_1(self, tmp_path, capsys):
        assert cli.main(["pipeline", "--stage2.tau", "0"] + argv_for(tmp_path)) == 1
        assert "tau" in capsys.readouterr().err
        assert cli.main(["pipeline", "--stage2.nope", "1"]) == 1
        assert cli.main(["ablate", "--axis", "colour"]) == 1
        assert cli.main(["pipeline", "--config", str(tmp_path / "missing.cfg")]) == 1

    def test_stage_failure_exit_2(self, tmp_path):
        assert cli.main(["distill"] + argv_for(tmp_path)) == 2
        assert cli.main(["report"] + argv_for(tmp_path / "none")) == 2

    def test_report_prints_table(self, tmp_path, capsys):
        assert cli.main(["pipeline"] + argv_for(tmp_path)) == 0
        capsys.readouterr()
        assert cli.main(["report", "--csv"] + argv_for(tmp_path)) == 0
        assert capsys.readouterr().out.startswith("variant,seed,base_acc")


class TestAblation:
    def test_unknown_axis(self, tmp_path):
        with pytest.raises(ConfigError):
            ablation.run_ablation(tiny(tmp_path), "colour")

    def test_axis_values(self):
        assert ablation.AXES["kd_form"][1] == ("logit_kl", "feature_l1", "feature_mse")
        assert ablation.AXES["images_per_class"][1] == (1, 4, 16, 64, None)

    def test_kd_form_rows(self, tmp_path):
        rep = ablation.run_ablation(tiny(tmp_path), "kd_form")
        assert len(rep.rows) == 3 * 2
        assert {r.variant for r in rep.rows} == {"kd_form=logit_kl", "kd_form=feature_l1",
                                                 "kd_form=feature_mse"}
        hms = [e["hm"] for e in rep.summary]
        assert hms == sorted(hms, reverse=True)
        assert open(rep.outputs["csv"]).read().count("\n") == 7

    def test_shared_runs_are_reused(self, tmp_path):
        cfg = tiny(tmp_path, **{"run.seeds": "0"})
        ref = pipeline.run_pipeline(cfg)
        rep = ablation.run_ablation(cfg, "epochs", [2])
        statuses = {r.stage: r.status for r in rep.manifests[0].stages}
        assert rep.manifests[0].run_dir == ref.run_dir
        assert statuses["stage2"] == "resumed"

    def test_ablation_leaves_run_report_alone(self, tmp_path):
        cfg = tiny(tmp_path, **{"run.seeds": "0"})
        ref = pipeline.run_pipeline(cfg)
        before = open(ref.reports["csv"], "rb").read()
        rep = ablation.run_ablation(cfg, "kd_form", ["logit_kl"])
        assert open(ref.reports["csv"], "rb").read() == before
        assert rep.rows[0].variant == "kd_form=logit_kl"

    @pytest.mark.parametrize("axis", ["method", "teacher_capacity", "images_per_class",
                                      "projector_layers", "temperature"])
    def test_each_axis_runs(self, tmp_path, axis):
        cfg = tiny(tmp_path, **{"run.seeds": "0"})
        values = ablation.AXES[axis][1][:2]
        rep = ablation.run_ablation(cfg, axis, values)
        assert not rep.failed
        assert len(rep.rows) == len(values)
