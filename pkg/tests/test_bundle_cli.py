import numpy as np
import pytest

from trustmerge.bundle import (
    BundleConfig,
    bundle_config_from_mapping,
    load_bundle,
    make_bundle,
    save_bundle,
)
from trustmerge.cli import main
from trustmerge.errors import MissingArtifact
from trustmerge.mlp import TrainConfig

from conftest import tiny_bundle_config


TINY_FLAGS = [
    "--set", "hidden=8",
    "--set", "samples_train=96",
    "--set", "samples_test=48",
    "--set", "exemplar_count=12",
    "--set", "pretrain_epochs=6",
    "--set", "finetune_epochs=10",
]


@pytest.fixture(scope="module")
def bundle_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("bundles") / "b3"
    code = main(["gen-train", "--seed", "3", "--out", str(out)] + TINY_FLAGS)
    assert code == 0
    return out


class TestBundle:
    def test_deterministic_construction(self, small_bundle):
        again = make_bundle(tiny_bundle_config())
        assert again.theta_pre == small_bundle.theta_pre
        for a, b in zip(again.experts, small_bundle.experts):
            assert a == b

    def test_experts_differ_from_pretrained_and_each_other(self, small_bundle):
        for expert in small_bundle.experts:
            assert expert != small_bundle.theta_pre
        assert small_bundle.experts[0] != small_bundle.experts[1]

    def test_subset(self, small_bundle):
        sub = small_bundle.subset([2, 0])
        assert sub.num_tasks == 2
        assert sub.experts[0] == small_bundle.experts[2]
        assert sub.test_sets[1] is small_bundle.test_sets[0]

    def test_gradient_estimates_trim_exemplars(self, small_bundle):
        full = small_bundle.gradient_estimates()
        trimmed = small_bundle.gradient_estimates(3)
        assert full[0].exemplar_count == 12
        assert trimmed[0].exemplar_count == 3
        zero_shot = small_bundle.gradient_estimates(0)
        assert all(g.source == "zero_shot" for g in zero_shot)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            BundleConfig(num_tasks=0)
        with pytest.raises(ValueError):
            BundleConfig(num_tasks=5)  # only 4 default rotations/perms

    def test_pretraining_mode_changes_theta_pre(self):
        from dataclasses import replace

        mix = make_bundle(tiny_bundle_config())
        base = make_bundle(replace(tiny_bundle_config(), pretrain_on_mixture=False))
        assert mix.theta_pre != base.theta_pre


class TestBundleRoundTrip:
    def test_save_load(self, small_bundle, tmp_path):
        out = tmp_path / "bundle"
        save_bundle(small_bundle, out)
        loaded = load_bundle(out)
        assert loaded.theta_pre == small_bundle.theta_pre
        assert loaded.config == small_bundle.config
        for a, b in zip(loaded.experts, small_bundle.experts):
            assert a == b
        for a, b in zip(loaded.test_sets, small_bundle.test_sets):
            assert np.array_equal(a.inputs, b.inputs)
            assert np.array_equal(a.labels, b.labels)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(MissingArtifact):
            load_bundle(tmp_path)

    def test_tampered_file_detected(self, small_bundle, tmp_path):
        out = tmp_path / "bundle"
        save_bundle(small_bundle, out)
        target = out / "task0_test.csv"
        target.write_text(target.read_text().replace("0", "1", 1))
        with pytest.raises(MissingArtifact):
            load_bundle(out)

    def test_config_mapping_round_trip(self, small_bundle, tmp_path):
        out = tmp_path / "bundle"
        save_bundle(small_bundle, out)
        from trustmerge.bundle import _parse_config_file

        cfg = bundle_config_from_mapping(_parse_config_file(out / "bundle_config.txt"))
        assert cfg == small_bundle.config

    def test_mapping_defaults_and_overrides(self):
        cfg = bundle_config_from_mapping({"seed": "7", "noise_std": "0.2"})
        assert cfg.seed == 7
        assert cfg.noise_std == 0.2
        assert cfg.num_tasks == BundleConfig().num_tasks
        assert cfg.pretrain == TrainConfig(epochs=60)


class TestCli:
    def test_merge_eval_pipeline(self, bundle_dir, tmp_path, capsys):
        merged = tmp_path / "tatr"
        assert main(["merge", "--bundle", str(bundle_dir), "--out", str(merged)]) == 0
        assert (merged / "merged.tmrg").exists()
        assert (merged / "mask.tmrg").exists()
        assert (merged / "provenance.txt").exists()

        out = tmp_path / "eval"
        code = main([
            "eval", "--bundle", str(bundle_dir), "--merged", str(merged),
            "--out", str(out),
        ])
        assert code == 0
        captured = capsys.readouterr().out
        assert "avg_acc=" in captured
        assert (out / "accuracy.csv").exists()

    def test_tau_zero_merge_matches_task_arithmetic_bytes(self, bundle_dir, tmp_path):
        a = tmp_path / "ta"
        b = tmp_path / "tatr0"
        main(["merge", "--bundle", str(bundle_dir), "--method", "task_arithmetic",
              "--out", str(a)])
        main(["merge", "--bundle", str(bundle_dir), "--method", "tatr", "--tau", "0",
              "--out", str(b)])
        assert (a / "merged.tmrg").read_bytes() == (b / "merged.tmrg").read_bytes()

    def test_merge_is_idempotent(self, bundle_dir, tmp_path):
        a = tmp_path / "m1"
        b = tmp_path / "m2"
        for out in (a, b):
            main(["merge", "--bundle", str(bundle_dir), "--out", str(out)])
        assert (a / "merged.tmrg").read_bytes() == (b / "merged.tmrg").read_bytes()

    def test_zero_exemplar_flag_switches_source(self, bundle_dir, tmp_path):
        out = tmp_path / "zs"
        main(["merge", "--bundle", str(bundle_dir), "--exemplars", "0",
              "--out", str(out)])
        assert "grad_source=zero_shot" in (out / "provenance.txt").read_text()

    def test_conflict_emits_both_bases(self, bundle_dir, tmp_path):
        out = tmp_path / "conflict"
        code = main(["conflict", "--bundle", str(bundle_dir),
                     "--method", "task_arithmetic", "--out", str(out)])
        assert code == 0
        assert (out / "conflict_loss.csv").exists()
        assert (out / "conflict_accuracy.csv").exists()

    def test_landscape_csv(self, bundle_dir, tmp_path):
        out = tmp_path / "scape"
        code = main(["landscape", "--bundle", str(bundle_dir), "--out", str(out)])
        assert code == 0
        lines = (out / "landscape.csv").read_text().splitlines()
        assert len(lines) == 226

    def test_sensitivity_csv(self, bundle_dir, tmp_path):
        out = tmp_path / "sens"
        code = main(["sensitivity", "--bundle", str(bundle_dir), "--exemplars", "4",
                     "--out", str(out)])
        assert code == 0
        lines = (out / "sensitivity_per_layer.csv").read_text().splitlines()
        assert lines[0] == "layer,mean_sensitivity"
        assert len(lines) == 5  # 2 layers x weight+bias

    def test_sweep_csvs(self, bundle_dir, tmp_path):
        out = tmp_path / "sweep"
        code = main(["sweep", "--bundle", str(bundle_dir), "--exemplars", "4",
                     "--out", str(out)])
        assert code == 0
        tau_lines = (out / "tau_sweep.csv").read_text().splitlines()
        ex_lines = (out / "exemplar_sweep.csv").read_text().splitlines()
        assert tau_lines[0] == "tau,avg_acc"
        assert len(tau_lines) == 7
        assert ex_lines[0] == "exemplars,avg_acc"
        assert len(ex_lines) == 10

    def test_bad_config_exits_2(self, tmp_path, capsys):
        code = main(["gen-train", "--set", "nonsense", "--out", str(tmp_path / "x")])
        assert code == 2
        code = main(["gen-train", "--set", "num_tasks=zero", "--out", str(tmp_path / "y")])
        assert code == 2

    def test_missing_bundle_exits_1(self, tmp_path, capsys):
        code = main(["merge", "--bundle", str(tmp_path / "absent"),
                     "--out", str(tmp_path / "m")])
        assert code == 1

    def test_usage_error_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2

    def test_gen_train_with_config_file(self, tmp_path):
        cfg = tmp_path / "cfg.txt"
        cfg.write_text(
            "# comment line\n"
            "hidden=8\nsamples_train=64\nsamples_test=32\nexemplar_count=8\n"
            "pretrain_epochs=4\nfinetune_epochs=6\n"
        )
        out = tmp_path / "bundle"
        code = main(["gen-train", "--config", str(cfg), "--seed", "11",
                     "--out", str(out)])
        assert code == 0
        loaded = load_bundle(out)
        assert loaded.config.seed == 11
        assert loaded.config.hidden == (8,)
