"""Pipeline tests: synthetic generation, splits, config parsing, stage
caching, CLI exit codes, and a small end-to-end run."""

import logging

import numpy as np
import pytest

from fvslide.cli import main
from fvslide.data import ValidationError, load_manifest
from fvslide.pipeline import (
    PipelineConfig,
    SplitSpec,
    config_from_mapping,
    parse_config_file,
    run_pipeline,
    stratified_split,
)
from fvslide.synth import SyntheticSpec, generate_synthetic


def small_spec(**kwargs):
    base = dict(
        n_classes=2,
        slides_per_class=12,
        patches_min=20,
        patches_max=40,
        dim=8,
        phenotypes_per_class=2,
        separation=20.0,
        seed=7,
    )
    base.update(kwargs)
    return SyntheticSpec(**base)


def small_config(manifest_path, work_dir, **kwargs):
    values = {
        "manifest": str(manifest_path),
        "work_dir": str(work_dir),
        "seed": 11,
        "clustering.k": 3,
        "fv.m": 2,
        "train.epochs": 8,
        "train.batch_size": 8,
        "train.hidden": 16,
        "train.attn_dim": 8,
    }
    values.update(kwargs)
    return config_from_mapping(values)


class TestSynthetic:
    def test_same_seed_bit_identical_files(self, tmp_path):
        a_dir, b_dir = tmp_path / "a", tmp_path / "b"
        generate_synthetic(small_spec(), a_dir)
        generate_synthetic(small_spec(), b_dir)
        for name in sorted(p.name for p in a_dir.iterdir()):
            assert (a_dir / name).read_bytes() == (b_dir / name).read_bytes()

    def test_manifest_loads_and_counts(self, tmp_path):
        manifest = generate_synthetic(small_spec(), tmp_path)
        assert len(manifest.entries) == 24
        assert manifest.dim == 8
        assert manifest.class_names == ("class_0", "class_1")
        counts = [e.n_patches for e in manifest.entries]
        assert all(20 <= c <= 40 for c in counts)

    def test_zero_separation_classes_identically_distributed(self, tmp_path):
        generate_synthetic(small_spec(separation=0.0, seed=3), tmp_path)
        manifest = load_manifest(tmp_path / "manifest.csv")
        means = {0: [], 1: []}
        for e in manifest.entries:
            pack = manifest.load_pack(e)
            means[e.label].append(np.asarray(pack.embeddings, dtype=np.float64).mean(0))
        gap = np.linalg.norm(np.mean(means[0], axis=0) - np.mean(means[1], axis=0))
        assert gap < 1.0  # same phenotype constellation, so class means agree

    def test_separation_spreads_class_centers(self, tmp_path):
        generate_synthetic(small_spec(separation=20.0, seed=3), tmp_path)
        manifest = load_manifest(tmp_path / "manifest.csv")
        means = {0: [], 1: []}
        for e in manifest.entries:
            pack = manifest.load_pack(e)
            means[e.label].append(np.asarray(pack.embeddings, dtype=np.float64).mean(0))
        gap = np.linalg.norm(np.mean(means[0], axis=0) - np.mean(means[1], axis=0))
        assert gap > 10.0


class TestSplits:
    def test_stratified_disjoint_and_covering(self, tmp_path):
        manifest = generate_synthetic(small_spec(slides_per_class=20), tmp_path)
        split = stratified_split(manifest, SplitSpec(), seed=1)
        assert set(split) == {e.slide_id for e in manifest.entries}
        per_class = {0: [], 1: []}
        for e in manifest.entries:
            per_class[e.label].append(split[e.slide_id])
        for label, names in per_class.items():
            assert names.count("train") == 12
            assert names.count("val") == 4
            assert names.count("test") == 4

    def test_fraction_validation(self):
        with pytest.raises(ValidationError, match="sum to 1"):
            SplitSpec(train=0.5, val=0.2, test=0.2)

    def test_largest_remainder_with_odd_counts(self, tmp_path):
        manifest = generate_synthetic(small_spec(slides_per_class=5), tmp_path)
        split = stratified_split(manifest, SplitSpec(), seed=2)
        names = [split[e.slide_id] for e in manifest.entries if e.label == 0]
        assert len(names) == 5
        assert names.count("train") == 3
        assert names.count("val") == 1
        assert names.count("test") == 1


class TestConfigFile:
    def test_parse_types_and_comments(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text(
            """
            # pipeline config
            manifest = data/manifest.csv
            work_dir = work
            seed = 42
            clustering.k = 10       # per-slide clusters
            fv.sigma = 0.1
            train.scale_per_instance = false
            fv.normalize = "power_l2"
            """
        )
        values = parse_config_file(path)
        assert values["seed"] == 42
        assert values["clustering.k"] == 10
        assert values["fv.sigma"] == 0.1
        assert values["train.scale_per_instance"] is False
        assert values["fv.normalize"] == "power_l2"

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("mystery = 3\n")
        with pytest.raises(ValidationError, match="unknown key"):
            parse_config_file(path)

    def test_bad_value_rejected(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("seed = banana\n")
        with pytest.raises(ValidationError, match="cannot parse"):
            parse_config_file(path)

    def test_mapping_requires_paths(self):
        with pytest.raises(ValidationError, match="manifest"):
            config_from_mapping({"seed": 1})


class TestRunPipeline:
    def test_end_to_end_and_caching(self, tmp_path, caplog):
        data_dir, work = tmp_path / "data", tmp_path / "work"
        generate_synthetic(small_spec(), data_dir)
        cfg = small_config(data_dir / "manifest.csv", work)

        with caplog.at_level(logging.INFO, logger="fvslide.pipeline"):
            reports = run_pipeline(cfg)
        assert set(reports) == {"train", "val", "test"}
        assert reports["test"].accuracy >= 0.9  # wide separation: easy task
        assert (work / "metrics.csv").is_file()
        assert (work / "split.csv").is_file()
        first_bytes = (work / "metrics.csv").read_bytes()
        assert "stage cluster: running" in caplog.text

        caplog.clear()
        with caplog.at_level(logging.INFO, logger="fvslide.pipeline"):
            again = run_pipeline(cfg)
        for stage in ("split", "cluster", "encode", "train"):
            assert f"stage {stage}: cached" in caplog.text
        assert (work / "metrics.csv").read_bytes() == first_bytes
        assert again["test"].accuracy == reports["test"].accuracy

    def test_cache_invalidated_by_config_change(self, tmp_path, caplog):
        data_dir, work = tmp_path / "data", tmp_path / "work"
        generate_synthetic(small_spec(), data_dir)
        run_pipeline(small_config(data_dir / "manifest.csv", work))
        with caplog.at_level(logging.INFO, logger="fvslide.pipeline"):
            run_pipeline(small_config(data_dir / "manifest.csv", work, **{"fv.m": 3}))
        assert "stage cluster: cached" in caplog.text
        assert "stage encode: running" in caplog.text
        assert "stage train: running" in caplog.text

    def test_cold_runs_byte_identical(self, tmp_path):
        data_dir = tmp_path / "data"
        generate_synthetic(small_spec(), data_dir)
        run_pipeline(small_config(data_dir / "manifest.csv", tmp_path / "w1"))
        run_pipeline(small_config(data_dir / "manifest.csv", tmp_path / "w2"))
        assert (tmp_path / "w1/metrics.csv").read_bytes() == (tmp_path / "w2/metrics.csv").read_bytes()

    def test_explicit_split_file(self, tmp_path):
        data_dir, work = tmp_path / "data", tmp_path / "work"
        manifest = generate_synthetic(small_spec(), data_dir)
        rows = ["slide_id,split"]
        for i, e in enumerate(manifest.entries):
            rows.append(f"{e.slide_id},{'train' if i % 2 else 'test'}")
        split_path = tmp_path / "split.csv"
        split_path.write_text("\n".join(rows) + "\n")
        cfg = small_config(data_dir / "manifest.csv", work, **{"split.file": str(split_path)})
        reports = run_pipeline(cfg)
        assert set(reports) == {"train", "test"}  # no val rows supplied

    def test_stage_error_carries_slide_context(self, tmp_path):
        data_dir, work = tmp_path / "data", tmp_path / "work"
        manifest = generate_synthetic(small_spec(slides_per_class=3), data_dir)
        victim = manifest.entries[1]
        (data_dir / victim.path).write_bytes(b"WSFV" + b"\x00" * 12)
        cfg = small_config(data_dir / "manifest.csv", work)
        with pytest.raises(Exception) as err:
            run_pipeline(cfg)
        assert "stage" in str(err.value)


class TestCli:
    def run_synth(self, tmp_path, **kwargs):
        args = [
            "synth", "--out-dir", str(tmp_path / "data"),
            "--slides-per-class", "10", "--patches-min", "15", "--patches-max", "25",
            "--dim", "6", "--separation", "20", "--seed", "3",
        ]
        assert main(args) == 0
        return tmp_path / "data"

    def test_full_cli_stage_chain(self, tmp_path):
        data = self.run_synth(tmp_path)
        manifest = str(data / "manifest.csv")
        clusters = str(tmp_path / "clusters")
        reprs = str(tmp_path / "reprs")
        assert main(["cluster", "--manifest", manifest, "--k", "3", "--seed", "1", "--out-dir", clusters]) == 0
        assert main([
            "encode", "--manifest", manifest, "--clusters-dir", clusters,
            "--m", "2", "--seed", "1", "--out-dir", reprs,
        ]) == 0

        rows = ["slide_id,split"]
        loaded = load_manifest(manifest)
        for i, e in enumerate(loaded.entries):
            rows.append(f"{e.slide_id},{['train', 'train', 'val', 'test'][i % 4]}")
        split_file = tmp_path / "split.csv"
        split_file.write_text("\n".join(rows) + "\n")

        model = str(tmp_path / "model.wsam")
        assert main([
            "train", "--representations-dir", reprs, "--manifest", manifest,
            "--split-file", str(split_file), "--epochs", "4", "--seed", "2", "--out", model,
        ]) == 0
        metrics = tmp_path / "metrics.csv"
        assert main([
            "eval", "--model", model, "--representations-dir", reprs, "--manifest", manifest,
            "--split-file", str(split_file), "--split", "test", "--out", str(metrics),
        ]) == 0
        lines = metrics.read_text().splitlines()
        assert lines[0] == "split,accuracy,auc,precision,recall,f1"
        assert lines[1].startswith("test,")

    def test_elbow_prints_curve(self, tmp_path, capsys):
        data = self.run_synth(tmp_path)
        assert main(["elbow", "--manifest", str(data / "manifest.csv"), "--ks", "1,2,3,4", "--seed", "1"]) == 0
        out = capsys.readouterr().out.splitlines()
        assert out[0] == "k,wcss"
        assert len(out) == 6
        assert out[-1].startswith("chosen_k,")

    def test_run_subcommand_with_overrides(self, tmp_path):
        data = self.run_synth(tmp_path)
        cfg = tmp_path / "run.cfg"
        cfg.write_text(
            f"manifest = {data / 'manifest.csv'}\n"
            f"work_dir = {tmp_path / 'work'}\n"
            "seed = 5\nclustering.k = 3\nfv.m = 2\n"
            "train.epochs = 3\ntrain.hidden = 8\ntrain.attn_dim = 4\n"
        )
        assert main(["run", "--config", str(cfg), "--set", "train.epochs=2"]) == 0
        assert (tmp_path / "work" / "metrics.csv").is_file()

    def test_validation_error_exit_code(self, tmp_path):
        assert main(["cluster", "--manifest", "nope.csv", "--k", "0", "--seed", "1", "--out-dir", str(tmp_path)]) in (1, 2)
        data = self.run_synth(tmp_path)
        # k = 0 is a validation failure: exit 1
        assert main(["cluster", "--manifest", str(data / "manifest.csv"), "--k", "0", "--out-dir", str(tmp_path / "c")]) == 1

    def test_io_error_exit_code(self, tmp_path):
        assert main(["elbow", "--manifest", str(tmp_path / "missing.csv")]) == 2

    def test_bad_flag_exit_code(self):
        assert main(["cluster", "--nonsense"]) == 1
