"""Command-line entry point.

Subcommands: keygen (new key file from OS entropy), attack-gen (write an
attacked IDX pair plus manifest), train (fit a detector model from clean
and adversarial IDX data), detect (per-example JSON lines), evaluate (run
an experiment protocol and emit reports), selftest (numerical suites).

Exit codes: 0 success, 2 usage or configuration error, 3 data or format
error, 4 numerical-stability error.  Configuration comes from a JSON file
(--config) with flag overrides; flags win.  The KRAWDETECT_KEYFILE
environment variable is the fallback key path.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys

import numpy as np

from . import __version__
from .attacks import (
    PerturbationSpec,
    attack_dataset,
    surrogate_fingerprint,
    train_surrogate,
    write_attacked_dataset,
)
from .errors import (
    ConfigError,
    DataError,
    KrawdetectError,
    OrderError,
    StabilityError,
)
from .harness import (
    DataConfig,
    DetectorOptions,
    ExperimentConfig,
    Seeds,
    apply_detector,
    emit_report,
    fit_detector,
    run_experiment_with_artifacts,
)
from .image_io import load_idx_pair, load_pgm
from .keyed_selection import generate_key, read_key_file, write_key_file
from .svm import TrainConfig, load_model, save_model

KEYFILE_ENV = "KRAWDETECT_KEYFILE"

DEFAULT_CONFIG = {
    "data": {
        "kind": "synthetic",
        "images": None,
        "labels": None,
        "clean_images": None,
        "clean_labels": None,
        "adversarial_images": None,
        "adversarial_labels": None,
        "count": 2000,
        "width": 28,
        "height": 28,
        "num_classes": 10,
    },
    "grid": {
        "spatial_values": [0.25, 0.375, 0.5, 0.625, 0.75],
        "blocking_prob": 0.5,
        "min_retained_configs": 4,
        "max_order": None,
    },
    "bands": {"count": 16},
    "integration_mode": "magnitude",
    "enhancement": {"enabled": True, "weighting": True, "keep_fraction": 0.75},
    "svm": {"regularization": 1e-4, "epochs": 50, "schedule": "pegasos-avg",
            "shuffle_seed": 0},
    "attacks": [
        {"kind": "fgsm", "epsilon": 0.2, "steps": 1, "alpha": None,
         "rand_init": False, "seed": 0},
    ],
    "experiment": {
        "protocol": "benchmark",
        "split_fraction": 0.5,
        "pool_size": 2000,
        "harmless": [["gaussian", 0.1], ["salt_pepper", 0.05], ["resample", 2]],
        "surrogate_epochs": 300,
        "surrogate_lr": 0.5,
    },
    "seeds": {"root": 0, "data": None, "split": None, "attack": None,
              "surrogate": None, "train": None, "key": None},
    "output": {"report_csv": None, "report_json": None, "model": None},
}


def _validate_section(name: str, value, default) -> None:
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"config section {name!r} must be an object")
        for key in value:
            if key not in default:
                raise ConfigError(f"unknown config key {name}.{key}")
            if isinstance(default[key], dict):
                _validate_section(f"{name}.{key}", value[key], default[key])


def load_cli_config(path: str | None) -> dict:
    """Defaults merged with the config file; unknown keys are rejected."""
    merged = copy.deepcopy(DEFAULT_CONFIG)
    if path is None:
        return merged
    with open(path, "r", encoding="utf-8") as fh:
        try:
            user = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path!r} is not valid JSON: {exc}") from exc
    if not isinstance(user, dict):
        raise ConfigError("config document must be a JSON object")
    for section, value in user.items():
        if section not in merged:
            raise ConfigError(f"unknown config section {section!r}")
        if isinstance(merged[section], dict):
            _validate_section(section, value, merged[section])
            merged[section].update(value)
        else:
            merged[section] = value
    return merged


def _apply_flag_overrides(config: dict, args) -> None:
    if getattr(args, "seed", None) is not None:
        config["seeds"]["root"] = args.seed
        for k in ("data", "split", "attack", "surrogate", "train", "key"):
            config["seeds"][k] = None
    if getattr(args, "mode", None) is not None:
        config["integration_mode"] = args.mode
    if getattr(args, "bands", None) is not None:
        config["bands"]["count"] = args.bands
    if getattr(args, "blocking_prob", None) is not None:
        config["grid"]["blocking_prob"] = args.blocking_prob
    if getattr(args, "attack", None) is not None:
        config["attacks"] = [
            {"kind": args.attack, "epsilon": 0.2,
             "steps": 1 if args.attack == "fgsm" else 10, "alpha": None,
             "rand_init": args.attack == "pgd", "seed": 0}
        ]
    if getattr(args, "epsilon", None) is not None:
        for spec in config["attacks"]:
            spec["epsilon"] = args.epsilon


def _seeds(config: dict) -> Seeds:
    s = config["seeds"]
    return Seeds(root=s["root"], data=s["data"], split=s["split"],
                 attack=s["attack"], surrogate=s["surrogate"],
                 train=s["train"], key=s["key"])


def _detector_options(config: dict) -> DetectorOptions:
    seeds = _seeds(config)
    return DetectorOptions(
        spatial_values=tuple(config["grid"]["spatial_values"]),
        blocking_prob=config["grid"]["blocking_prob"],
        min_retained_configs=config["grid"]["min_retained_configs"],
        max_order=config["grid"]["max_order"],
        num_bands=config["bands"]["count"],
        mode=config["integration_mode"],
        enhancement=config["enhancement"]["enabled"],
        weighting=config["enhancement"]["weighting"],
        keep_fraction=config["enhancement"]["keep_fraction"],
        train=TrainConfig(
            regularization=config["svm"]["regularization"],
            epochs=config["svm"]["epochs"],
            schedule=config["svm"]["schedule"],
            shuffle_seed=(config["svm"]["shuffle_seed"]
                          if config["svm"]["shuffle_seed"] is not None
                          else seeds.train),
        ),
    )


def _attack_specs(config: dict) -> tuple:
    specs = []
    for raw in config["attacks"]:
        specs.append(PerturbationSpec(
            attack_kind=raw["kind"],
            epsilon=raw["epsilon"],
            steps=raw.get("steps", 1),
            alpha=raw.get("alpha"),
            rand_init=raw.get("rand_init", raw["kind"] == "pgd"),
            seed=raw.get("seed", 0),
        ))
    return tuple(specs)


def _key_from_args(args, config_required: bool = True):
    path = getattr(args, "key", None) or os.environ.get(KEYFILE_ENV)
    if path is None:
        if config_required:
            raise ConfigError(
                f"a key file is required (--key or ${KEYFILE_ENV})"
            )
        return None
    return read_key_file(path)


def _cmd_keygen(args) -> int:
    key = generate_key()
    if args.out:
        write_key_file(args.out, key)
        print(f"key written to {args.out}")
    else:
        print(f"{key.seed:016x}")
    return 0


def _cmd_attack_gen(args) -> int:
    config = load_cli_config(args.config)
    _apply_flag_overrides(config, args)
    seeds = _seeds(config)
    data = config["data"]
    if data["kind"] == "idx":
        dataset = load_idx_pair(data["images"], data["labels"],
                                num_classes=data["num_classes"])
    else:
        from .harness import synthetic_victim_dataset

        dataset = synthetic_victim_dataset(data["count"], data["width"],
                                           data["height"], data["num_classes"],
                                           seed=seeds.data)
    spec = _attack_specs(config)[0]
    surrogate = train_surrogate(dataset,
                                epochs=config["experiment"]["surrogate_epochs"],
                                lr=config["experiment"]["surrogate_lr"],
                                seed=seeds.surrogate)
    deltas = attack_dataset(surrogate, dataset, spec, workers=args.workers)
    prefix = args.out
    write_attacked_dataset(dataset, deltas, f"{prefix}-images-idx3-ubyte",
                           f"{prefix}-labels-idx1-ubyte",
                           f"{prefix}-manifest.json", spec, surrogate)
    print(f"wrote {len(dataset)} attacked examples to {prefix}-*; "
          f"surrogate {surrogate_fingerprint(surrogate)}")
    return 0


def _cmd_train(args) -> int:
    config = load_cli_config(args.config)
    _apply_flag_overrides(config, args)
    key = _key_from_args(args)
    data = config["data"]
    for field in ("clean_images", "clean_labels", "adversarial_images",
                  "adversarial_labels"):
        if not data[field]:
            raise ConfigError(f"train needs data.{field}")
    clean = load_idx_pair(data["clean_images"], data["clean_labels"],
                          num_classes=data["num_classes"])
    adversarial = load_idx_pair(data["adversarial_images"],
                                data["adversarial_labels"],
                                num_classes=data["num_classes"])
    model = fit_detector(clean.images(), adversarial.images(), key,
                         _detector_options(config), workers=args.workers)
    save_model(model, args.out)
    print(f"model written to {args.out} "
          f"(fingerprint {model.key_fingerprint:016x}, "
          f"dim {len(model.svm.weights)})")
    return 0


def _cmd_detect(args) -> int:
    model = load_model(args.model)
    if args.image:
        images = [load_pgm(args.image)]
    else:
        config = load_cli_config(args.config)
        data = config["data"]
        if not (data["images"] and data["labels"]):
            raise ConfigError("detect needs --image or data.images/data.labels")
        images = load_idx_pair(data["images"], data["labels"],
                               num_classes=data["num_classes"]).images()

    def one(i: int):
        label, margin = apply_detector(model, images[i])
        return {"index": i, "label": label, "margin": margin}

    if args.workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(one, range(len(images))))
    else:
        results = [one(i) for i in range(len(images))]
    for record in results:
        print(json.dumps(record))
    return 0


def _cmd_evaluate(args) -> int:
    config = load_cli_config(args.config)
    _apply_flag_overrides(config, args)
    seeds = _seeds(config)
    data = config["data"]
    experiment = ExperimentConfig(
        protocol=config["experiment"]["protocol"],
        data=DataConfig(
            kind=data["kind"], images_path=data["images"],
            labels_path=data["labels"], count=data["count"],
            width=data["width"], height=data["height"],
            num_classes=data["num_classes"],
        ),
        attacks=_attack_specs(config),
        harmless=tuple((k, m) for k, m in config["experiment"]["harmless"]),
        split_fraction=config["experiment"]["split_fraction"],
        pool_size=config["experiment"]["pool_size"],
        seeds=seeds,
        detector=_detector_options(config),
        surrogate_epochs=config["experiment"]["surrogate_epochs"],
        surrogate_lr=config["experiment"]["surrogate_lr"],
    )
    clock = (lambda: args.timestamp) if args.timestamp else None
    report, artifacts = run_experiment_with_artifacts(experiment, clock=clock,
                                                      workers=args.workers)
    out = config["output"]
    csv_path = out["report_csv"] or (f"{args.out}.csv" if args.out else None)
    json_path = out["report_json"] or (f"{args.out}.json" if args.out else None)
    if not csv_path and not json_path:
        raise ConfigError("evaluate needs --out or output.report_csv/report_json")
    if csv_path:
        emit_report(report, csv_path, "csv")
        print(f"report written to {csv_path}")
    if json_path:
        emit_report(report, json_path, "json")
        print(f"report written to {json_path}")
    model_path = out["model"] or (f"{args.out}.model.json" if args.out else None)
    if model_path and artifacts["models"]:
        first = next(iter(artifacts["models"].values()))
        save_model(first, model_path)
        print(f"model written to {model_path}")
    for row in report.rows:
        print(f"{row.protocol} {row.train_attack}->{row.test_attack}: "
              f"recall={row.recall:.4f} precision={row.precision:.4f} "
              f"f1={row.f1:.4f} accuracy={row.accuracy:.4f}")
    return 0


def _cmd_selftest(args) -> int:
    from .image_io import Image
    from .krawtchouk import (
        SpatialConfig,
        decompose,
        eval_hypergeometric_reference,
        full_order_set,
        orthonormality_deviation,
        reconstruct,
        build_polynomial_table,
    )

    failures = 0

    dev = max(orthonormality_deviation(p, 27, 20)
              for p in (0.25, 0.375, 0.5, 0.625, 0.75))
    ok = dev < 1e-8
    failures += not ok
    print(f"orthonormality: {'PASS' if ok else 'FAIL'} (max deviation {dev:.3e})")

    worst = 0.0
    for bound in (16, 27):
        for p in (0.25, 0.5, 0.75):
            table = build_polynomial_table(p, bound, 8)
            for l in range(table.max_order + 1):
                for z in range(bound + 1):
                    ref = eval_hypergeometric_reference(l, z, p, bound)
                    worst = max(worst, abs(ref - table.values[l, z]))
    ok = worst < 1e-9
    failures += not ok
    print(f"oracle agreement: {'PASS' if ok else 'FAIL'} (max difference {worst:.3e})")

    rng = np.random.default_rng(0)
    config = SpatialConfig(0.5, 0.5)
    orders = full_order_set(28, 28)
    worst = 0.0
    for _ in range(3):
        img = Image.from_matrix(rng.random((28, 28)))
        rec = reconstruct(decompose(img, config, orders))
        worst = max(worst, float(np.sqrt(np.mean((rec.pixels - img.pixels) ** 2))))
    ok = worst < 1e-8
    failures += not ok
    print(f"reconstruction: {'PASS' if ok else 'FAIL'} (max RMSE {worst:.3e})")

    worst = 0.0
    small = tuple((n, m) for n in range(16) for m in range(16))
    for _ in range(3):
        base = rng.uniform(0.2, 0.8, (16, 16))
        bump = rng.uniform(-0.2, 0.2, (16, 16))
        a = decompose(Image.from_matrix(base + bump), config, small).values
        b = (decompose(Image.from_matrix(base), config, small).values
             + decompose(Image.from_matrix(bump), config, small).values)
        worst = max(worst, float(np.abs(a - b).max()))
    ok = worst < 1e-12
    failures += not ok
    print(f"linearity: {'PASS' if ok else 'FAIL'} (max violation {worst:.3e})")

    if failures:
        print(f"selftest: {failures} of 4 suites FAILED")
        return 4
    print("selftest: all 4 suites passed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="krawdetect",
        description="Key-controlled spatial-frequency detector for "
                    "adversarial image perturbations",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, key=False, out_required=False):
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--workers", type=int, default=1,
                       help="parallelism bound (results are worker-count independent)")
        p.add_argument("--seed", type=int, help="root seed override")
        p.add_argument("--mode", choices=("raw", "magnitude"),
                       help="band integration mode")
        p.add_argument("--bands", type=int, help="number of frequency bands")
        p.add_argument("--blocking-prob", dest="blocking_prob", type=float,
                       help="candidate blocking probability")
        p.add_argument("--epsilon", type=float, help="attack budget override")
        p.add_argument("--attack", choices=("fgsm", "bim", "pgd"),
                       help="attack kind override")
        if key:
            p.add_argument("--key", help=f"key file (fallback ${KEYFILE_ENV})")
        if out_required:
            p.add_argument("--out", required=True, help="output path")

    p = sub.add_parser("keygen", help="write a new key file from OS entropy")
    p.add_argument("--out", help="key file path (stdout when omitted)")
    p.set_defaults(func=_cmd_keygen)

    p = sub.add_parser("attack-gen",
                       help="generate an attacked IDX pair plus manifest")
    common(p, out_required=True)
    p.set_defaults(func=_cmd_attack_gen)

    p = sub.add_parser("train", help="train a detector model")
    common(p, key=True, out_required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("detect", help="label images with a trained model")
    common(p)
    p.add_argument("--model", required=True, help="detector model file")
    p.add_argument("--image", help="single PGM image")
    p.set_defaults(func=_cmd_detect)

    p = sub.add_parser("evaluate", help="run an experiment protocol")
    common(p)
    p.add_argument("--out", help="output path prefix for reports")
    p.add_argument("--timestamp",
                   help="fixed report timestamp (for byte-reproducible runs)")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("selftest", help="run the numerical self-checks")
    p.set_defaults(func=_cmd_selftest)
    return parser


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, OrderError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except StabilityError as exc:
        print(f"numerical-stability error: {exc}", file=sys.stderr)
        return 4
    except (KrawdetectError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))
