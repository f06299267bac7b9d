import numpy as np
import pytest

from soleprint import experiments, synthetic
from soleprint.experiments import (
    LengthMismatchError,
    NetConfig,
    ScenarioConfig,
    ScenarioConfigError,
    ScenarioDataset,
    accuracy,
    build_scenario_input,
    mae,
    report_table,
    run_scenario,
    run_scenarios,
    save_reports,
    standard_scenarios,
)
from soleprint.neuralnet import TrainConfig


@pytest.fixture(scope="module")
def small_dataset():
    data = synthetic.make_benchmark(n=24, seed=7)
    return ScenarioDataset(
        manifest=data.manifest, images=data.images, landmarks=data.landmarks,
        split=data.split, squares=data.squares,
    )


SMALL_NET = NetConfig(input_w=48, input_h=60, widths=(4, 8), hidden=8)
FAST_TRAIN = dict(epochs_head=1, epochs_finetune=1, batch_size=8, dropout_rate=0.0)


class TestScenarioConfig:
    def test_grid_is_seventeen(self):
        grid = standard_scenarios()
        assert [s.scenario_id for s in grid] == list(range(1, 18))
        assert grid[0].task == "sex" and grid[5].task == "both" and grid[10].task == "age"
        assert grid[15].method == "lda_coords" and grid[16].method == "lda_distances"

    def test_size_requires_shape(self):
        with pytest.raises(ScenarioConfigError):
            ScenarioConfig(1, "sex", shape=False, texture=True, size=True)

    def test_rejects_unknown_method(self):
        with pytest.raises(ScenarioConfigError):
            ScenarioConfig(1, "sex", True, True, True, method="svm")

    def test_scenario_id_range(self):
        with pytest.raises(ScenarioConfigError):
            ScenarioConfig(18, "sex", True, True, True)


class TestMetrics:
    def test_accuracy_labels(self):
        assert accuracy(["F", "F", "M", "M"], ["F", "M", "M", "M"]) == 0.75

    def test_accuracy_probability_threshold(self):
        assert accuracy([0.9, 0.2], ["F", "M"]) == 1.0
        # exactly 0.5 classifies female by the documented tie-break
        assert accuracy([0.5, 0.5, 0.5], ["F", "F", "M"]) == pytest.approx(2 / 3)

    def test_mae(self):
        assert mae([30.0, 40.0], [25.0, 45.0]) == 5.0

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatchError):
            accuracy(["F"], ["F", "M"])
        with pytest.raises(LengthMismatchError):
            mae([], [])


class TestBuildScenarioInput:
    def test_full_flags_keep_relative_size(self, small_dataset):
        config = ScenarioConfig(1, "sex", True, True, True)
        ids = sorted(small_dataset.images)
        composites = [
            build_scenario_input(small_dataset.images[i], small_dataset.landmarks[i],
                                 config, 48, 60, small_dataset.squares)
            for i in ids[:6]
        ]
        # constant page size -> constant scale -> content height tracks print
        # length: female (even index) shorter than male
        heights = [int((c.channels[0] < 0.9).any(axis=1).sum()) for c in composites]
        female = np.array(heights[0::2])
        male = np.array(heights[1::2])
        assert male.mean() > female.mean()

    def test_size_off_equalizes_content(self, small_dataset):
        config = ScenarioConfig(3, "sex", True, True, False)
        ids = sorted(small_dataset.images)
        heights = []
        for i in ids[:6]:
            comp = build_scenario_input(small_dataset.images[i], small_dataset.landmarks[i],
                                        config, 48, 60, small_dataset.squares)
            heights.append(int((comp.channels[0] < 0.9).any(axis=1).sum()))
        assert max(heights) - min(heights) <= 1

    def test_texture_off_detextures(self, small_dataset):
        ids = sorted(small_dataset.images)
        textured = build_scenario_input(small_dataset.images[ids[0]], None,
                                        ScenarioConfig(1, "sex", True, True, True), 48, 60)
        plain = build_scenario_input(small_dataset.images[ids[0]], None,
                                     ScenarioConfig(2, "sex", True, False, True), 48, 60)
        # texture-free content is a denser solid: more fully-dark pixels in
        # the NEAREST channel within the content area, fewer isolated ridges
        assert (plain.channels[0] == 0.0).sum() > 0
        assert not np.array_equal(textured.channels[0], plain.channels[0])

    def test_shape_off_tiles_squares(self, small_dataset):
        ids = sorted(small_dataset.images)
        config = ScenarioConfig(5, "sex", False, True, False)
        comp = build_scenario_input(small_dataset.images[ids[0]], small_dataset.landmarks[ids[0]],
                                    config, 48, 60, small_dataset.squares)
        assert comp.channels.shape == (3, 60, 48)

    def test_shape_off_needs_landmarks(self, small_dataset):
        ids = sorted(small_dataset.images)
        with pytest.raises(experiments.ExperimentError):
            build_scenario_input(small_dataset.images[ids[0]], None,
                                 ScenarioConfig(5, "sex", False, True, False), 48, 60)


class TestRunScenario:
    def test_lda_coords_scenario(self, small_dataset):
        report = run_scenario(small_dataset, ScenarioConfig(16, "sex", True, False, False,
                                                            "lda_coords"))
        assert report.accuracy is not None and report.jackknife is not None
        assert report.mae_years is None
        assert report.n_test == 24

    def test_lda_distances_scenario(self, small_dataset):
        report = run_scenario(small_dataset, ScenarioConfig(17, "sex", True, False, True,
                                                            "lda_distances"))
        assert report.config["features"] == 153
        assert report.accuracy > 0.5  # strong planted size signal

    def test_cnn_scenario_smoke(self, small_dataset):
        config = TrainConfig(task="both", seed=5, **FAST_TRAIN)
        report = run_scenario(small_dataset, ScenarioConfig(6, "both", True, True, True),
                              config, SMALL_NET)
        assert report.accuracy is not None and report.mae_years is not None
        assert report.n_test == 2

    def test_age_scenario_has_no_accuracy(self, small_dataset):
        config = TrainConfig(task="age", seed=5, **FAST_TRAIN)
        report = run_scenario(small_dataset, ScenarioConfig(11, "age", True, True, True),
                              config, SMALL_NET)
        assert report.accuracy is None and report.mae_years is not None

    def test_single_class_surfaces_scenario_id(self, small_dataset):
        from soleprint import dataio, discriminant

        records = tuple(
            dataio.ManifestRecord(r.id, r.image_path, "F", r.age, r.side, r.source)
            for r in small_dataset.manifest.records
        )
        broken = ScenarioDataset(
            manifest=dataio.DatasetManifest(records=records),
            images=small_dataset.images, landmarks=small_dataset.landmarks,
            split=small_dataset.split, squares=small_dataset.squares)
        config = TrainConfig(task="sex", seed=5, **FAST_TRAIN)
        with pytest.raises(discriminant.SingleClassError, match="scenario 1"):
            run_scenario(broken, ScenarioConfig(1, "sex", True, True, True), config, SMALL_NET)


class TestReportTable:
    def _report(self, sid, task, acc=None, jack=None, mae_years=None,
                shape=True, texture=True, size=True, method="cnn"):
        return experiments.ScenarioReport(
            scenario_id=sid, task=task, shape=shape, texture=texture, size=size,
            method=method, n_test=40, seed=42, accuracy=acc, jackknife=jack,
            mae_years=mae_years,
        )

    def test_single_row(self):
        text, payload = report_table([self._report(1, "sex", acc=0.8876)])
        assert "88.76%" in text
        assert len(payload["rows"]) == 1

    def test_age_rows_dash_accuracy(self):
        text, _ = report_table([self._report(11, "age", mae_years=8.47)])
        row = text.splitlines()[2]
        assert "-" in row and "8.47" in row

    def test_jackknife_parenthesized(self):
        text, _ = report_table([self._report(16, "sex", acc=0.6964, jack=0.7095,
                                             texture=False, size=False, method="lda_coords")])
        assert "69.64% (70.95%)" in text

    def test_task_blocks_grouped(self):
        reports = [self._report(i, "sex", acc=0.8) for i in range(1, 6)]
        reports += [self._report(i, "both", acc=0.8, mae_years=8.0) for i in range(6, 11)]
        reports += [self._report(i, "age", mae_years=8.0) for i in range(11, 16)]
        text, payload = report_table(reports)
        assert text.count("Sex estimation") == 1
        assert text.count("Sex & age estimation") == 1
        assert text.count("Age estimation") == 1
        assert [r["scenario_id"] for r in payload["rows"]] == list(range(1, 16))

    def test_sorted_by_scenario(self):
        reports = [self._report(3, "sex", acc=0.5), self._report(1, "sex", acc=0.6)]
        _, payload = report_table(reports)
        assert [r["scenario_id"] for r in payload["rows"]] == [1, 3]


class TestDeterminism:
    def test_identical_report_json(self, tmp_path):
        paths = []
        for run in ("a", "b"):
            data = synthetic.make_benchmark(n=24, seed=42)
            dataset = ScenarioDataset(
                manifest=data.manifest, images=data.images, landmarks=data.landmarks,
                split=data.split, squares=data.squares)
            config = TrainConfig(task="sex", seed=42, **FAST_TRAIN)
            reports = run_scenarios(
                dataset,
                [ScenarioConfig(1, "sex", True, True, True),
                 ScenarioConfig(16, "sex", True, False, False, "lda_coords")],
                config, SMALL_NET)
            path = tmp_path / f"report_{run}.json"
            save_reports(reports, path)
            paths.append(path)
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_audit_rejects_leaky_split(self, small_dataset):
        from soleprint.dataio import DatasetSplit

        leaky = DatasetSplit(
            train_ids=small_dataset.split.train_ids,
            val_ids=small_dataset.split.val_ids,
            test_ids=small_dataset.split.train_ids[:2],
            seed=0, ratios=(0.8, 0.1, 0.1))
        broken = ScenarioDataset(
            manifest=small_dataset.manifest, images=small_dataset.images,
            landmarks=small_dataset.landmarks, split=leaky, squares=small_dataset.squares)
        with pytest.raises(experiments.ExperimentError, match="leak"):
            run_scenario(broken, ScenarioConfig(16, "sex", True, False, False, "lda_coords"))


class TestSynthetic:
    def test_benchmark_structure(self):
        data = synthetic.make_benchmark(n=20, seed=3)
        assert len(data.manifest) == 20
        counts = data.manifest.count_by_sex()
        assert counts["F"] == 10 and counts["M"] == 10
        assert all(lms.k == 18 for lms in data.landmarks.values())
        assert all(img.pixels.shape == (300, 240) for img in data.images.values())

    def test_reproducible(self):
        a = synthetic.make_benchmark(n=10, seed=9)
        b = synthetic.make_benchmark(n=10, seed=9)
        for rid in a.images:
            assert np.array_equal(a.images[rid].pixels, b.images[rid].pixels)
        assert a.manifest == b.manifest

    def test_size_dimorphism_ratio(self):
        data = synthetic.make_benchmark(n=200, seed=1)
        from soleprint.raster import bounding_box

        heights = {"F": [], "M": []}
        for record in data.manifest.records:
            x0, y0, x1, y1 = bounding_box(data.images[record.id])
            heights[record.sex].append(y1 - y0 + 1)
        ratio = np.mean(heights["M"]) / np.mean(heights["F"])
        assert 1.04 < ratio < 1.10

    def test_region_mask_nontrivial(self):
        data = synthetic.make_benchmark(n=40, seed=2)
        dataset = ScenarioDataset(
            manifest=data.manifest, images=data.images, landmarks=data.landmarks,
            split=data.split, squares=data.squares)
        arrays = experiments.scenario_arrays(dataset, ScenarioConfig(1, "sex", True, True, True),
                                           SMALL_NET)
        region = synthetic.discriminative_region(arrays["train"].x, arrays["train"].sex)
        assert 0.05 < region.mean() < 0.7
