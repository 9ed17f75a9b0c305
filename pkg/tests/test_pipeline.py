import json
import shutil
from types import SimpleNamespace

import numpy as np
import pytest

from histopipe import boosting, features, pipeline, synthetic
from histopipe.errors import ConfigError
from histopipe.pipeline import (
    ArtifactPaths,
    CropVariant,
    FoldCoverageError,
    MissingArtifacts,
    PartialStore,
    PipelineConfig,
    audit_leakage,
    cross_validated_predict,
    load_config,
    predict_test,
)
from histopipe.stainlab import InsufficientTissue


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    """One small finished run shared by the read-only tests below."""
    root = tmp_path_factory.mktemp("tiny")
    labels = synthetic.write_synthetic_dataset(root / "data", images_per_class=3, seed=0)
    cfg_path = synthetic.write_config_toml(
        root / "cfg.toml", root / "data", labels, root / "out",
        n_augmentations=2, k_folds=3, seeds=(0, 1), crops_per_size=2,
        num_rounds=4, max_leaves=4, num_bins=32,
    )
    config = load_config(cfg_path)
    manifest, folds = pipeline.run_ingest(config)
    stores = pipeline.run_extraction(config, manifest, jobs=1)
    bank = pipeline.run_training(config, manifest, folds, jobs=1)
    return SimpleNamespace(
        root=root, cfg_path=cfg_path, config=config, manifest=manifest,
        folds=folds, stores=stores, bank=bank,
    )


class TestConfig:
    def test_defaults_mirror_reference_grid(self, tmp_path):
        cfg = PipelineConfig(
            dataset_root=tmp_path, labels_file=tmp_path / "l.csv", output_dir=tmp_path / "o"
        )
        assert cfg.n_augmentations == 50 and cfg.k_folds == 10
        assert cfg.seeds == (0, 1, 2, 3, 4)
        assert cfg.sizes == (400, 650)
        assert [e.encoder_id for e in cfg.encoders] == ["resnet50", "inception_v3", "vgg16"]
        assert cfg.descriptors_per_image() == 50 * 2 * 3  # the documented 300

    def test_four_variant_grid_has_600_cells(self, tmp_path):
        cfg = PipelineConfig(
            dataset_root=tmp_path, labels_file=tmp_path / "l.csv",
            output_dir=tmp_path / "o", crop_variants=pipeline.FOUR_VARIANT_GRID,
        )
        assert len(cfg.bank_cells()) == 10 * 5 * 4 * 3  # the documented 600

    def test_load_and_overrides(self, tiny):
        config = load_config(tiny.cfg_path, overrides=["gbdt.num_rounds=9", "master_seed=5"])
        assert config.gbdt.num_rounds == 9 and config.master_seed == 5

    def test_env_overrides_output_dir(self, tiny):
        config = load_config(tiny.cfg_path, env={"HISTOPIPE_CACHE": "/elsewhere"})
        assert str(config.output_dir) == "/elsewhere"

    def test_set_beats_env(self, tiny):
        config = load_config(
            tiny.cfg_path,
            overrides=['output_dir="/flag"'],
            env={"HISTOPIPE_CACHE": "/env"},
        )
        assert str(config.output_dir) == "/flag"

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.toml")

    def test_unparseable_toml(self, tmp_path):
        bad = tmp_path / "bad.toml"
        bad.write_text("this is { not toml", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_config(bad)

    def test_missing_required_key(self, tmp_path):
        cfg = tmp_path / "c.toml"
        cfg.write_text('dataset_root = "x"\n', encoding="utf-8")
        with pytest.raises(ConfigError):
            load_config(cfg)

    def test_k_folds_minimum(self, tmp_path):
        with pytest.raises(ConfigError):
            PipelineConfig(
                dataset_root=tmp_path, labels_file=tmp_path / "l", output_dir=tmp_path,
                k_folds=1,
            )

    def test_duplicate_sizes_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            PipelineConfig(
                dataset_root=tmp_path, labels_file=tmp_path / "l", output_dir=tmp_path,
                crop_variants=(CropVariant(400), CropVariant(400, "original")),
            )

    def test_bad_scale_rejected(self):
        with pytest.raises(ConfigError):
            CropVariant(400, "quarter")


class TestExtraction:
    def test_store_layout(self, tiny):
        for (name, size), path in tiny.stores.items():
            header, rows = features.read_descriptor_store(path)
            assert header["image_ids"] == tiny.manifest.image_ids
            assert rows.shape == (12 * 2, 64)
            assert np.isfinite(rows).all() and rows.min() >= 0.0

    def test_rerun_skips_and_preserves_bytes(self, tiny):
        before = {p: p.read_bytes() for p in tiny.stores.values()}
        pipeline.run_extraction(tiny.config, tiny.manifest, jobs=1)
        assert {p: p.read_bytes() for p in tiny.stores.values()} == before

    def test_checksum_mismatch_raises_partial_store(self, tiny):
        path = next(iter(tiny.stores.values()))
        original = path.read_bytes()
        try:
            data = bytearray(original)
            data[-1] ^= 0xFF
            path.write_bytes(bytes(data))
            with pytest.raises(PartialStore):
                pipeline.run_extraction(tiny.config, tiny.manifest, jobs=1)
        finally:
            path.write_bytes(original)

    def test_missing_sidecar_raises(self, tiny):
        path = next(iter(tiny.stores.values()))
        sidecar = path.with_suffix(path.suffix + ".sha256")
        content = sidecar.read_text()
        try:
            sidecar.unlink()
            with pytest.raises(PartialStore):
                pipeline.run_extraction(tiny.config, tiny.manifest, jobs=1)
        finally:
            sidecar.write_text(content)

    def test_stain_error_tagged_with_image_id(self, tmp_path):
        from PIL import Image

        data = tmp_path / "data"
        data.mkdir()
        lines = ["image_id,filename,label"]
        labels = ["normal", "benign", "in_situ", "invasive"] * 2
        for i, label in enumerate(labels):
            name = f"im{i}.png"
            if i == 2:
                arr = np.full((64, 96, 3), 255, dtype=np.uint8)  # blank slide
            else:
                rng = np.random.default_rng(i)
                conc = synthetic.class_concentration_field(label, 64, 96, rng)
                arr = synthetic.beer_lambert_image(conc)
            Image.fromarray(arr).save(data / name)
            lines.append(f"id{i},{name},{label}")
        (data / "labels.csv").write_text("\n".join(lines) + "\n")
        cfg_path = synthetic.write_config_toml(
            tmp_path / "c.toml", data, data / "labels.csv", tmp_path / "out",
            n_augmentations=1, k_folds=2, seeds=(0,), crops_per_size=1,
        )
        config = load_config(cfg_path)
        manifest, _ = pipeline.run_ingest(config)
        with pytest.raises(InsufficientTissue) as exc:
            pipeline.run_extraction(config, manifest, jobs=1)
        assert "id2" in str(exc.value)


class TestTraining:
    def test_bank_cardinality(self, tiny):
        assert len(tiny.bank["cells"]) == 3 * 2 * 2 * 1  # folds x seeds x sizes x encoders
        expected = {(c["fold"], c["seed"], c["size"]) for c in tiny.bank["cells"]}
        assert len(expected) == 12

    def test_models_deserialize_and_predict(self, tiny):
        paths = ArtifactPaths(tiny.config.output_dir)
        cell = tiny.bank["cells"][0]
        model = boosting.deserialize_model((paths.root / cell["path"]).read_bytes())
        proba = boosting.predict_proba(model, np.zeros((2, 64)))
        assert proba.shape == (2, 4)

    def test_rerun_skips(self, tiny):
        paths = ArtifactPaths(tiny.config.output_dir)
        before = paths.bank.read_bytes()
        bank = pipeline.run_training(tiny.config, tiny.manifest, tiny.folds, jobs=1)
        assert paths.bank.read_bytes() == before
        assert bank == tiny.bank

    def test_audit_catches_planted_leak(self, tiny):
        bank = json.loads(json.dumps(tiny.bank))
        cell = bank["cells"][0]
        leaked = tiny.folds.images_in_fold(cell["fold"])[0]
        cell["train_images"].append(leaked)
        with pytest.raises(Exception, match="leakage"):
            audit_leakage(bank, tiny.folds)

    def test_training_sets_exclude_eval_fold(self, tiny):
        for cell in tiny.bank["cells"]:
            for image_id in cell["train_images"]:
                assert tiny.folds.fold_of[image_id] != cell["fold"]
            # and the rest of the dataset is fully used
            expected = [
                i for i, f in tiny.folds.fold_of.items() if f != cell["fold"]
            ]
            assert sorted(expected) == cell["train_images"]

    def test_fold_coverage_error(self, tiny):
        header = {"image_ids": ["ghost"], "n_augmentations": 1}
        with pytest.raises(FoldCoverageError):
            pipeline._training_arrays(header, np.zeros((1, 4), dtype=np.float32), tiny.manifest)


class TestPredictEvaluate:
    def test_cv_records_cover_manifest_on_simplex(self, tiny):
        records = cross_validated_predict(tiny.config, tiny.manifest, tiny.folds)
        assert [r.image_id for r in records] == tiny.manifest.image_ids
        for r in records:
            assert r.proba.sum() == pytest.approx(1.0, abs=1e-9)
            assert r.predicted_label in ("normal", "benign", "in_situ", "invasive")

    def test_cv_deterministic(self, tiny):
        a = cross_validated_predict(tiny.config, tiny.manifest, tiny.folds)
        b = cross_validated_predict(tiny.config, tiny.manifest, tiny.folds)
        assert all(np.array_equal(x.proba, y.proba) for x, y in zip(a, b))

    def test_group_filter_restricts_models(self, tiny):
        group = tiny.config.store_keys()[0]
        records = cross_validated_predict(tiny.config, tiny.manifest, tiny.folds, group=group)
        fused = cross_validated_predict(tiny.config, tiny.manifest, tiny.folds)
        assert not all(np.array_equal(a.proba, b.proba) for a, b in zip(records, fused))

    def test_predictions_and_metrics_files(self, tiny):
        payload = pipeline.run_predict(tiny.config, tiny.manifest, tiny.folds)
        assert set(payload) == {"fused", "groups"}
        assert len(payload["fused"]) == 12
        assert set(payload["groups"]) == {"stub-16", "stub-24"}
        metrics = pipeline.run_evaluate(tiny.config, tiny.folds)
        assert set(metrics["four_class"]["groups"]) == {"stub-16", "stub-24"}
        assert len(metrics["four_class"]["fused"]["per_fold"]) == 3
        assert 0.0 <= metrics["two_class"]["auc"] <= 1.0
        assert np.asarray(metrics["confusion"]).sum() == 12
        ops = metrics["two_class"]["operating_points"]
        assert set(ops) == {"0.33", "0.50"}

    def test_fused_equals_mean_of_group_sums(self, tiny):
        payload = pipeline.run_predict(tiny.config, tiny.manifest, tiny.folds)
        for i, rec in enumerate(payload["fused"]):
            acc = np.zeros(4)
            for g in payload["groups"].values():
                acc += np.asarray(g[i]["proba"])
            assert np.asarray(rec["proba"]) == pytest.approx(acc / len(payload["groups"]))

    def test_report_files_and_roundtrip(self, tiny):
        written = pipeline.run_report(tiny.config)
        names = {p.name for p in written}
        assert names == {"table1.csv", "roc_points.csv", "confusion.csv", "roc.svg"}
        paths = ArtifactPaths(tiny.config.output_dir)
        metrics = json.loads(paths.metrics.read_text())
        lines = (paths.report / "table1.csv").read_text().splitlines()
        assert lines[0] == "model,f1,f2,f3,mean,std"
        fused_cells = lines[-1].split(",")
        assert fused_cells[0] == "fusion"
        parsed = [float(v) for v in fused_cells[1:4]]
        assert parsed == metrics["four_class"]["fused"]["per_fold"]
        assert float(fused_cells[4]) == metrics["four_class"]["fused"]["mean_1dp"]
        assert float(fused_cells[5]) == metrics["four_class"]["fused"]["std_1dp"]
        svg = (paths.report / "roc.svg").read_text()
        assert "<svg" in svg

    def test_report_missing_artifacts(self, tmp_path):
        cfg = PipelineConfig(
            dataset_root=tmp_path, labels_file=tmp_path / "l", output_dir=tmp_path / "o"
        )
        with pytest.raises(MissingArtifacts):
            pipeline.run_report(cfg)

    def test_predict_test_single_image(self, tiny):
        path = tiny.manifest.records[0].source_path
        records = predict_test(tiny.config, [path], jobs=1)
        assert len(records) == 1
        assert records[0].proba.sum() == pytest.approx(1.0, abs=1e-9)
        again = predict_test(tiny.config, [path], jobs=1)
        assert np.array_equal(records[0].proba, again[0].proba)

    def test_missing_model_detected(self, tiny):
        bad = PipelineConfig(
            dataset_root=tiny.config.dataset_root,
            labels_file=tiny.config.labels_file,
            output_dir=tiny.config.output_dir,
            encoders=tiny.config.encoders,
            crop_variants=tiny.config.crop_variants,
            crops_per_size=tiny.config.crops_per_size,
            n_augmentations=tiny.config.n_augmentations,
            k_folds=tiny.config.k_folds,
            seeds=(0, 1, 7),  # seed 7 was never trained
            gbdt=tiny.config.gbdt,
            stain=tiny.config.stain,
            pool=tiny.config.pool,
            master_seed=tiny.config.master_seed,
        )
        with pytest.raises(pipeline.MissingModel):
            cross_validated_predict(bad, tiny.manifest, tiny.folds)


class TestRunArtifacts:
    def test_load_validates_everything(self, tiny):
        artifacts = pipeline.RunArtifacts.load(tiny.config)
        assert set(artifacts.store_paths) == set(tiny.stores)
        assert artifacts.metrics["k_folds"] == 3

    def test_missing_bank_detected(self, tiny, tmp_path):
        broken_out = tmp_path / "out"
        shutil.copytree(tiny.config.output_dir, broken_out)
        shutil.rmtree(broken_out / "models")
        cfg = PipelineConfig(
            dataset_root=tiny.config.dataset_root,
            labels_file=tiny.config.labels_file,
            output_dir=broken_out,
            encoders=tiny.config.encoders,
            crop_variants=tiny.config.crop_variants,
            crops_per_size=tiny.config.crops_per_size,
            n_augmentations=tiny.config.n_augmentations,
            k_folds=tiny.config.k_folds,
            seeds=tiny.config.seeds,
            gbdt=tiny.config.gbdt,
            stain=tiny.config.stain,
            pool=tiny.config.pool,
            master_seed=tiny.config.master_seed,
        )
        with pytest.raises(MissingArtifacts):
            pipeline.RunArtifacts.load(cfg)
