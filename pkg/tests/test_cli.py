import json

import numpy as np
import pytest

from krawdetect.cli import dispatch, load_cli_config
from krawdetect.errors import ConfigError
from krawdetect.harness import synthetic_victim_dataset
from krawdetect.image_io import save_idx_pair, save_pgm
from krawdetect.keyed_selection import read_key_file


@pytest.fixture()
def tiny_config(tmp_path):
    """Config small enough for second-scale CLI runs."""
    cfg = {
        "data": {"kind": "synthetic", "count": 60},
        "bands": {"count": 8},
        "svm": {"epochs": 10},
        "experiment": {"protocol": "benchmark", "pool_size": 60,
                       "surrogate_epochs": 60},
        "attacks": [{"kind": "fgsm", "epsilon": 0.2}],
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def test_keygen_writes_key_file(tmp_path, capsys):
    path = str(tmp_path / "key.txt")
    assert dispatch(["keygen", "--out", path]) == 0
    key = read_key_file(path)
    assert 0 <= key.seed < 2**64


def test_keygen_stdout(capsys):
    assert dispatch(["keygen"]) == 0
    out = capsys.readouterr().out.strip()
    assert len(out) == 16
    int(out, 16)


def test_train_requires_key(tmp_path, tiny_config, monkeypatch, capsys):
    monkeypatch.delenv("KRAWDETECT_KEYFILE", raising=False)
    code = dispatch(["train", "--config", tiny_config,
                     "--out", str(tmp_path / "model.json")])
    assert code == 2


def test_usage_error_exit_code():
    assert dispatch(["train"]) == 2  # missing required --out
    assert dispatch(["no-such-command"]) == 2


def test_selftest_passes(capsys):
    assert dispatch(["selftest"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 4
    for suite in ("orthonormality", "oracle", "reconstruction", "linearity"):
        assert suite in out


def test_unknown_config_key_rejected(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"data": {"bogus": 1}}))
    with pytest.raises(ConfigError):
        load_cli_config(str(path))
    assert dispatch(["evaluate", "--config", str(path), "--out",
                     str(tmp_path / "r")]) == 2


def test_unknown_section_rejected(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"experiments": {}}))
    with pytest.raises(ConfigError):
        load_cli_config(str(path))


def test_defaults_merge(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"bands": {"count": 4}}))
    config = load_cli_config(str(path))
    assert config["bands"]["count"] == 4
    assert config["integration_mode"] == "magnitude"
    assert config["grid"]["blocking_prob"] == 0.5


def test_missing_model_file_is_data_error(tmp_path):
    code = dispatch(["detect", "--model", str(tmp_path / "nope.json"),
                     "--image", str(tmp_path / "nope.pgm")])
    assert code == 3


@pytest.fixture(scope="module")
def trained_model(tmp_path_factory):
    """Train a tiny detector through the full CLI path."""
    root = tmp_path_factory.mktemp("cli-train")
    dataset = synthetic_victim_dataset(40, seed=3)
    clean_i = str(root / "clean-images")
    clean_l = str(root / "clean-labels")
    save_idx_pair(dataset, clean_i, clean_l)

    rng = np.random.default_rng(0)
    from krawdetect.image_io import Dataset, Image, LabeledExample

    noisy = Dataset(
        examples=[
            LabeledExample(
                Image(width=28, height=28,
                      pixels=np.clip(ex.image.pixels
                                     + 0.2 * np.sign(rng.random(784) - 0.5), 0, 1)),
                ex.label,
            )
            for ex in dataset.examples
        ],
        num_classes=10,
    )
    adv_i = str(root / "adv-images")
    adv_l = str(root / "adv-labels")
    save_idx_pair(noisy, adv_i, adv_l)

    key_path = str(root / "key.txt")
    assert dispatch(["keygen", "--out", key_path]) == 0

    config = {
        "data": {"kind": "idx", "clean_images": clean_i, "clean_labels": clean_l,
                 "adversarial_images": adv_i, "adversarial_labels": adv_l},
        "bands": {"count": 8},
        "svm": {"epochs": 10},
    }
    config_path = str(root / "train.json")
    open(config_path, "w").write(json.dumps(config))

    model_path = str(root / "model.json")
    code = dispatch(["train", "--config", config_path, "--key", key_path,
                     "--out", model_path])
    assert code == 0
    return model_path, dataset


def test_detect_single_pgm(tmp_path, trained_model, capsys):
    model_path, dataset = trained_model
    capsys.readouterr()
    pgm = str(tmp_path / "img.pgm")
    save_pgm(dataset.examples[0].image, pgm)
    assert dispatch(["detect", "--model", model_path, "--image", pgm]) == 0
    line = capsys.readouterr().out.strip().splitlines()[-1]
    record = json.loads(line)
    assert list(record.keys()) == ["index", "label", "margin"]
    assert record["index"] == 0
    assert record["label"] in (0, 1)


def test_detect_dataset_ordered(tmp_path, trained_model, capsys):
    model_path, dataset = trained_model
    capsys.readouterr()
    images = str(tmp_path / "d-images")
    labels = str(tmp_path / "d-labels")
    save_idx_pair(dataset, images, labels)
    config = {"data": {"kind": "idx", "images": images, "labels": labels}}
    config_path = str(tmp_path / "detect.json")
    open(config_path, "w").write(json.dumps(config))
    assert dispatch(["detect", "--model", model_path, "--config", config_path,
                     "--workers", "3"]) == 0
    lines = [json.loads(l) for l in capsys.readouterr().out.strip().splitlines()]
    assert [r["index"] for r in lines] == list(range(len(dataset)))


def test_env_var_key_fallback(tmp_path, tiny_config, monkeypatch, capsys):
    key_path = str(tmp_path / "key.txt")
    assert dispatch(["keygen", "--out", key_path]) == 0
    monkeypatch.setenv("KRAWDETECT_KEYFILE", key_path)

    dataset = synthetic_victim_dataset(30, seed=7)
    clean_i, clean_l = str(tmp_path / "ci"), str(tmp_path / "cl")
    save_idx_pair(dataset, clean_i, clean_l)
    config = {
        "data": {"kind": "idx", "clean_images": clean_i, "clean_labels": clean_l,
                 "adversarial_images": clean_i, "adversarial_labels": clean_l},
        "bands": {"count": 4},
        "svm": {"epochs": 5},
    }
    config_path = str(tmp_path / "cfg.json")
    open(config_path, "w").write(json.dumps(config))
    code = dispatch(["train", "--config", config_path,
                     "--out", str(tmp_path / "m.json")])
    assert code == 0


def test_evaluate_writes_reports(tmp_path, tiny_config, capsys):
    out = str(tmp_path / "run")
    code = dispatch(["evaluate", "--config", tiny_config, "--out", out,
                     "--timestamp", "2026-01-01T00:00:00+00:00"])
    assert code == 0
    csv_lines = open(out + ".csv").read().splitlines()
    assert len(csv_lines) == 2
    doc = json.loads(open(out + ".json").read())
    assert doc["timestamp"] == "2026-01-01T00:00:00+00:00"
    assert doc["config"]["protocol"] == "benchmark"
    assert doc["rows"][0]["train_attack"] == "fgsm"


def test_evaluate_fixed_timestamp_reproducible(tmp_path, tiny_config):
    out_a = str(tmp_path / "a")
    out_b = str(tmp_path / "b")
    for out in (out_a, out_b):
        assert dispatch(["evaluate", "--config", tiny_config, "--out", out,
                         "--timestamp", "T"]) == 0
    assert open(out_a + ".csv").read() == open(out_b + ".csv").read()
    assert open(out_a + ".json").read() == open(out_b + ".json").read()


def test_attack_gen_writes_idx_and_manifest(tmp_path, tiny_config, capsys):
    prefix = str(tmp_path / "atk")
    code = dispatch(["attack-gen", "--config", tiny_config, "--out", prefix,
                     "--attack", "bim", "--epsilon", "0.1"])
    assert code == 0
    from krawdetect.image_io import load_idx_pair

    ds = load_idx_pair(prefix + "-images-idx3-ubyte", prefix + "-labels-idx1-ubyte")
    assert len(ds) == 60
    manifest = json.loads(open(prefix + "-manifest.json").read())
    assert manifest["attack_kind"] == "bim"
    assert manifest["epsilon"] == 0.1
