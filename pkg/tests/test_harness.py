import numpy as np
import pytest

from krawdetect.attacks import fgsm_spec, pgd_spec
from krawdetect.errors import ConfigError, DataError, DegenerateError, RangeError
from krawdetect.harness import (
    ConfusionCounts,
    DataConfig,
    DetectorOptions,
    ExperimentConfig,
    Report,
    ReportRow,
    Seeds,
    apply_detector,
    compute_metrics,
    config_echo,
    emit_report,
    fit_detector,
    read_report_json,
    run_experiment,
    run_experiment_with_artifacts,
    split_indices,
    synthetic_victim_dataset,
)
from krawdetect.keyed_selection import DetectorKey
from krawdetect.svm import TrainConfig

FAST_DETECTOR = DetectorOptions(num_bands=8, train=TrainConfig(epochs=10))


def small_config(protocol, attacks, pool=80, count=80, **kwargs):
    return ExperimentConfig(
        protocol=protocol,
        data=DataConfig(kind="synthetic", count=count),
        attacks=attacks,
        pool_size=pool,
        detector=FAST_DETECTOR,
        surrogate_epochs=80,
        **kwargs,
    )


def test_compute_metrics_symmetric_counts():
    metrics = compute_metrics(ConfusionCounts(tp=90, fp=10, tn=90, fn=10))
    for value in metrics.values():
        assert value == pytest.approx(0.9)


def test_compute_metrics_no_positives_edge():
    metrics = compute_metrics(ConfusionCounts(tp=0, fp=0, tn=100, fn=0))
    assert metrics["precision"] == 0.0
    assert metrics["recall"] == 0.0
    assert metrics["f1"] == 0.0
    assert metrics["accuracy"] == 1.0


def test_compute_metrics_perfect():
    metrics = compute_metrics(ConfusionCounts(tp=100, fp=0, tn=100, fn=0))
    assert all(v == 1.0 for v in metrics.values())


def test_confusion_validation():
    with pytest.raises(RangeError):
        ConfusionCounts(tp=-1, fp=0, tn=0, fn=0)
    with pytest.raises(DegenerateError):
        compute_metrics(ConfusionCounts(tp=0, fp=0, tn=0, fn=0))


def test_split_indices_hygiene():
    train, test = split_indices(100, 0.5, seed=4)
    assert len(train) == 50 and len(test) == 50
    assert not set(train) & set(test)
    assert sorted(train + test) == list(range(100))
    assert split_indices(100, 0.5, seed=4) == (train, test)
    assert split_indices(100, 0.5, seed=5) != (train, test)


def test_split_indices_too_small():
    with pytest.raises(DataError):
        split_indices(1, 0.5, seed=0)


def test_synthetic_dataset_deterministic_and_quantized():
    a = synthetic_victim_dataset(30, seed=9)
    b = synthetic_victim_dataset(30, seed=9)
    for x, y in zip(a.examples, b.examples):
        np.testing.assert_array_equal(x.image.pixels, y.image.pixels)
        assert x.label == y.label
    px = a.examples[0].image.pixels
    assert px.min() >= 0.0 and px.max() <= 1.0
    np.testing.assert_allclose(px * 255, np.rint(px * 255), atol=1e-9)
    labels = [ex.label for ex in a.examples]
    assert set(labels) == set(range(10))


def test_experiment_config_validation():
    with pytest.raises(ConfigError):
        small_config("tournament", (fgsm_spec(0.2),))
    with pytest.raises(ConfigError):
        small_config("benchmark", ())
    with pytest.raises(ConfigError):
        small_config("benchmark", (fgsm_spec(0.2),), split_fraction=1.0)


def test_pool_larger_than_dataset():
    config = small_config("benchmark", (fgsm_spec(0.2),), pool=200, count=100)
    with pytest.raises(DataError):
        run_experiment(config, clock=lambda: "T")


def test_fit_and_apply_detector():
    dataset = synthetic_victim_dataset(40, seed=2)
    clean = [ex.image for ex in dataset.examples[:20]]
    rng = np.random.default_rng(0)
    noisy = [
        type(im)(width=im.width, height=im.height,
                 pixels=np.clip(im.pixels + 0.2 * np.sign(rng.random(784) - 0.5), 0, 1))
        for im in clean
    ]
    model = fit_detector(clean, noisy, DetectorKey(5), FAST_DETECTOR)
    label, margin = apply_detector(model, clean[0])
    assert label in (0, 1)
    assert isinstance(margin, float)


def test_benchmark_row_shape():
    report = run_experiment(small_config("benchmark", (fgsm_spec(0.2),)),
                            clock=lambda: "T0")
    assert report.timestamp == "T0"
    assert len(report.rows) == 1
    row = report.rows[0]
    assert row.protocol == "benchmark"
    assert row.train_attack == row.test_attack == "fgsm"
    assert row.n_test == 80
    assert 0.0 <= row.accuracy <= 1.0
    assert report.footer.startswith("metric convention")


def test_crossing_covers_all_ordered_pairs():
    attacks = (fgsm_spec(0.2), pgd_spec(0.2, steps=4))
    report = run_experiment(small_config("crossing_attack", attacks),
                            clock=lambda: "T")
    pairs = {(r.train_attack, r.test_attack) for r in report.rows}
    assert pairs == {("fgsm", "fgsm"), ("fgsm", "pgd"),
                     ("pgd", "fgsm"), ("pgd", "pgd")}


def test_challenging_degenerate_equals_benchmark():
    attacks = (fgsm_spec(0.2),)
    bench = run_experiment(small_config("benchmark", attacks), clock=lambda: "T")
    chall = run_experiment(small_config("challenging", attacks), clock=lambda: "T")
    assert chall.rows == bench.rows


def test_challenging_mixture_rows():
    attacks = (fgsm_spec(0.2), pgd_spec(0.2, steps=4))
    report = run_experiment(small_config("challenging", attacks), clock=lambda: "T")
    assert len(report.rows) == 2
    assert all(r.train_attack == "mixture2" for r in report.rows)
    assert [r.test_attack for r in report.rows] == ["fgsm", "pgd"]


def test_harmless_rows_and_artifacts():
    attacks = (fgsm_spec(0.2),)
    report, artifacts = run_experiment_with_artifacts(
        small_config("harmless", attacks), clock=lambda: "T")
    assert [r.test_attack for r in report.rows] == [
        "clean", "gaussian", "salt_pepper", "resample"
    ]
    # Same adversarial pool in every row: recall is constant across rows.
    recalls = {round(r.recall, 12) for r in report.rows}
    assert len(recalls) == 1
    for key, counts in artifacts["confusion"].items():
        assert counts.total == report.rows[0].n_test


def test_crossing_surrogate_runs():
    report = run_experiment(small_config("crossing_surrogate", (fgsm_spec(0.2),)),
                            clock=lambda: "T")
    assert len(report.rows) == 1
    assert report.rows[0].protocol == "crossing_surrogate"


def test_run_is_deterministic_and_worker_independent():
    config = small_config("benchmark", (pgd_spec(0.2, steps=4),))
    a = run_experiment(config, clock=lambda: "T")
    b = run_experiment(config, clock=lambda: "T")
    c = run_experiment(config, clock=lambda: "T", workers=3)
    assert a.rows == b.rows == c.rows


def test_pool_hygiene_in_artifacts():
    config = small_config("benchmark", (fgsm_spec(0.2),))
    _, artifacts = run_experiment_with_artifacts(config, clock=lambda: "T")
    assert not set(artifacts["train_idx"]) & set(artifacts["test_idx"])


def test_emit_csv_and_json_round_trip(tmp_path):
    config = small_config("benchmark", (fgsm_spec(0.2),))
    report = run_experiment(config, clock=lambda: "2026-01-01T00:00:00+00:00")
    csv_path = str(tmp_path / "report.csv")
    json_path = str(tmp_path / "report.json")
    emit_report(report, csv_path, "csv")
    emit_report(report, json_path, "json")

    lines = open(csv_path).read().splitlines()
    assert lines[0] == ("protocol,train_attack,test_attack,recall,precision,"
                        "f1,accuracy,n_test,seed,model_fingerprint")
    assert len(lines) == 2
    cells = lines[1].split(",")
    assert cells[0] == "benchmark"
    assert len(cells[3].split(".")[1]) == 4  # four decimals

    again = read_report_json(json_path)
    assert again.timestamp == report.timestamp
    assert again.model_fingerprint == report.model_fingerprint
    assert len(again.rows) == len(report.rows)
    for x, y in zip(again.rows, report.rows):
        assert x.recall == pytest.approx(y.recall, abs=5e-5)
        assert x.train_attack == y.train_attack


def test_emit_empty_report_header_only(tmp_path):
    report = Report(protocol="benchmark", rows=(), config_echo={},
                    timestamp="T", model_fingerprint="")
    path = str(tmp_path / "empty.csv")
    emit_report(report, path, "csv")
    lines = open(path).read().splitlines()
    assert len(lines) == 1


def test_emit_rejects_unknown_format(tmp_path):
    report = Report(protocol="benchmark", rows=(), config_echo={},
                    timestamp="T", model_fingerprint="")
    with pytest.raises(ConfigError):
        emit_report(report, str(tmp_path / "x"), "xml")


def test_config_echo_is_json_ready():
    import json

    config = small_config("benchmark", (fgsm_spec(0.2),))
    echo = config_echo(config)
    parsed = json.loads(json.dumps(echo))
    assert parsed["protocol"] == "benchmark"
    assert parsed["detector"]["num_bands"] == 8
    assert parsed["seeds"]["root"] == 0


def test_seeds_derive_from_root():
    seeds = Seeds(root=10)
    assert (seeds.data, seeds.split, seeds.attack) == (11, 12, 13)
    explicit = Seeds(root=10, attack=99)
    assert explicit.attack == 99
