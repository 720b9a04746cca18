"""Command-line entry point: dataset synthesis, training, sampling,
evaluation, and the T-sweep, driven by a flat INI-style configuration.

Config files are key = value lines under bracketed section headers. Every
key has a default, unknown sections or keys are rejected, and validation
collects every problem before reporting, so a config either parses into
fully valid typed settings or fails with the complete list. Command-line
overrides use --section.key=value and win over file values.

Exit codes: 0 success, 1 user error (bad config, missing or malformed
files), 2 internal error.
"""
import argparse
import configparser
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .augment import AugmentConfig
from .data import (
    SplitManifest,
    load_corpus,
    read_landmark_csv,
    read_manifest,
    save_corpus,
    synth_corpus,
    write_landmark_csv,
    write_pgm,
)
from .errors import ConfigError
from .heatmap import dump_heatmap, extract_landmarks
from .loss import LossWeights
from .metrics import evaluate, report_to_json
from .sampler import sample_multistep, sample_singlestep
from .schedule import BlurConfig, make_linear_schedule
from .train import TrainConfig, build_denoiser, fit, load_checkpoint

__all__ = ["RunConfig", "parse_config", "main"]


# ------------------------------------------------------------ configuration

DEFAULTS = {
    "data": {
        "height": "64",
        "width": "64",
        "n_landmarks": "4",
        "train_records": "200",
        "val_records": "50",
        "test_records": "50",
        "spacing": "1.0,1.0",
    },
    "schedule": {
        "T": "200",
        "beta_start": "0.0001",
        "beta_end": "0.02",
    },
    "blur": {
        "sigma_min": "0.1",
        "sigma_max": "14.0",
        "kernel_size": "13",
    },
    "model": {
        "enc_plan": "8,16,32",
        "dec_plan": "16,8",
        "time_dim": "32",
        "gn_groups": "4",
    },
    "train": {
        "epochs": "120",
        "batch_size": "1",
        "learning_rate": "0.0001",
        "weight_decay": "0.0001",
        "beta1": "0.9",
        "beta2": "0.999",
        "epsilon_opt": "1e-8",
        "lambda_s": "0.01",
        "lambda_nll": "1.0",
        "epsilon_floor": "1e-9",
        "dropout_p": "0.0005",
        "parameterization": "x0",
        "mode": "diffusion",
        "seed": "0",
        "checkpoint_every": "0",
    },
    "augment": {
        "enabled": "true",
        "rotation_deg": "3.0",
        "translate_px": "10.0",
        "scale_min": "0.95",
        "scale_max": "1.05",
        "shear_deg": "10.0",
        "value_mult": "0.5",
        "elastic_alpha": "500.0",
        "elastic_sigma": "30.0",
        "cutout_max_frac": "0.3",
        "gamma_min": "0.5",
        "gamma_max": "2.0",
    },
}

_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def _to_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in _TRUE:
        return True
    if low in _FALSE:
        return False
    raise ValueError(f"expected a boolean, got {raw!r}")


def _to_int_tuple(raw: str):
    return tuple(int(part.strip()) for part in raw.split(","))


def _to_float_pair(raw: str):
    parts = [float(part.strip()) for part in raw.split(",")]
    if len(parts) != 2:
        raise ValueError(f"expected two comma-separated numbers, got {raw!r}")
    return tuple(parts)


_CONVERTERS = {
    ("data", "height"): int,
    ("data", "width"): int,
    ("data", "n_landmarks"): int,
    ("data", "train_records"): int,
    ("data", "val_records"): int,
    ("data", "test_records"): int,
    ("data", "spacing"): _to_float_pair,
    ("schedule", "T"): int,
    ("schedule", "beta_start"): float,
    ("schedule", "beta_end"): float,
    ("blur", "sigma_min"): float,
    ("blur", "sigma_max"): float,
    ("blur", "kernel_size"): int,
    ("model", "enc_plan"): _to_int_tuple,
    ("model", "dec_plan"): _to_int_tuple,
    ("model", "time_dim"): int,
    ("model", "gn_groups"): int,
    ("train", "epochs"): int,
    ("train", "batch_size"): int,
    ("train", "learning_rate"): float,
    ("train", "weight_decay"): float,
    ("train", "beta1"): float,
    ("train", "beta2"): float,
    ("train", "epsilon_opt"): float,
    ("train", "lambda_s"): float,
    ("train", "lambda_nll"): float,
    ("train", "epsilon_floor"): float,
    ("train", "dropout_p"): float,
    ("train", "parameterization"): str,
    ("train", "mode"): str,
    ("train", "seed"): int,
    ("train", "checkpoint_every"): int,
    ("augment", "enabled"): _to_bool,
    ("augment", "rotation_deg"): float,
    ("augment", "translate_px"): float,
    ("augment", "scale_min"): float,
    ("augment", "scale_max"): float,
    ("augment", "shear_deg"): float,
    ("augment", "value_mult"): float,
    ("augment", "elastic_alpha"): float,
    ("augment", "elastic_sigma"): float,
    ("augment", "cutout_max_frac"): float,
    ("augment", "gamma_min"): float,
    ("augment", "gamma_max"): float,
}


@dataclass(frozen=True)
class RunConfig:
    """Fully validated settings for one run."""

    height: int
    width: int
    n_landmarks: int
    train_records: int
    val_records: int
    test_records: int
    spacing: tuple
    train: TrainConfig
    blur: BlurConfig


def parse_config(path=None, overrides=()) -> RunConfig:
    """Merge defaults, an optional config file, and --section.key=value
    overrides, then validate everything at once.

    Raises ConfigError carrying the complete list of problems.
    """
    values = {section: dict(keys) for section, keys in DEFAULTS.items()}
    problems = []

    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError([f"config file not found: {path}"])
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(path.read_text(), source=str(path))
        except configparser.Error as exc:
            raise ConfigError([f"{path}: {exc}"]) from exc
        for section in parser.sections():
            if section not in values:
                problems.append(f"{path}: unknown section [{section}]")
                continue
            for key, raw in parser.items(section):
                if key not in values[section]:
                    problems.append(f"{path}: unknown key {section}.{key}")
                else:
                    values[section][key] = raw

    for item in overrides:
        body = item[2:] if item.startswith("--") else item
        key_part, eq, raw = body.partition("=")
        section, dot, key = key_part.partition(".")
        if not eq or not dot:
            problems.append(f"override {item!r} is not of the form --section.key=value")
            continue
        if section not in values or key not in values[section]:
            problems.append(f"override {item!r} names unknown key {section}.{key}")
            continue
        values[section][key] = raw

    typed = {}
    for (section, key), convert in _CONVERTERS.items():
        try:
            typed[(section, key)] = convert(values[section][key])
        except ValueError as exc:
            problems.append(f"{section}.{key} = {values[section][key]!r}: {exc}")
    if problems:
        raise ConfigError(problems)

    def pick(section, *keys):
        return {k: typed[(section, k)] for k in keys}

    data = pick(
        "data",
        "height",
        "width",
        "n_landmarks",
        "train_records",
        "val_records",
        "test_records",
        "spacing",
    )
    for key in ("height", "width"):
        if data[key] < 32:
            problems.append(f"data.{key} must be at least 32, got {data[key]}")
    divisor = 2 ** (len(typed[("model", "enc_plan")]) - 1)
    for key in ("height", "width"):
        if data[key] % divisor:
            problems.append(
                f"data.{key} = {data[key]} must be a multiple of {divisor} "
                f"(one 2x pooling per encoder level)"
            )
    if data["n_landmarks"] < 1:
        problems.append(f"data.n_landmarks must be at least 1, got {data['n_landmarks']}")
    for key in ("train_records", "val_records", "test_records"):
        if data[key] < 0:
            problems.append(f"data.{key} must be >= 0, got {data[key]}")
    if any(s <= 0 for s in data["spacing"]):
        problems.append(f"data.spacing entries must be positive, got {data['spacing']}")

    loss_w = None
    try:
        loss_w = LossWeights(
            lambda_s=typed[("train", "lambda_s")],
            lambda_nll=typed[("train", "lambda_nll")],
            epsilon_floor=typed[("train", "epsilon_floor")],
        )
    except ValueError as exc:
        problems.append(str(exc))

    aug = None
    if typed[("augment", "enabled")]:
        try:
            aug = AugmentConfig(
                rotation_deg=typed[("augment", "rotation_deg")],
                translate_px=typed[("augment", "translate_px")],
                scale=(typed[("augment", "scale_min")], typed[("augment", "scale_max")]),
                shear_deg=typed[("augment", "shear_deg")],
                value_mult=typed[("augment", "value_mult")],
                elastic_alpha=typed[("augment", "elastic_alpha")],
                elastic_sigma=typed[("augment", "elastic_sigma")],
                cutout_max_frac=typed[("augment", "cutout_max_frac")],
                gamma=(typed[("augment", "gamma_min")], typed[("augment", "gamma_max")]),
            )
        except ValueError as exc:
            problems.append(str(exc))

    blur = None
    try:
        blur = BlurConfig(
            sigma_min=typed[("blur", "sigma_min")],
            sigma_max=typed[("blur", "sigma_max")],
            kernel_size=typed[("blur", "kernel_size")],
        )
    except ValueError as exc:
        problems.append(str(exc))

    train = None
    if loss_w is not None:
        try:
            train = TrainConfig(
                epochs=typed[("train", "epochs")],
                batch_size=typed[("train", "batch_size")],
                learning_rate=typed[("train", "learning_rate")],
                weight_decay=typed[("train", "weight_decay")],
                beta1=typed[("train", "beta1")],
                beta2=typed[("train", "beta2")],
                epsilon_opt=typed[("train", "epsilon_opt")],
                T=typed[("schedule", "T")],
                beta_start=typed[("schedule", "beta_start")],
                beta_end=typed[("schedule", "beta_end")],
                loss=loss_w,
                augment=aug,
                dropout_p=typed[("train", "dropout_p")],
                parameterization=typed[("train", "parameterization")],
                mode=typed[("train", "mode")],
                seed=typed[("train", "seed")],
                enc_plan=typed[("model", "enc_plan")],
                dec_plan=typed[("model", "dec_plan")],
                time_dim=typed[("model", "time_dim")],
                gn_groups=typed[("model", "gn_groups")],
                checkpoint_every=typed[("train", "checkpoint_every")],
            )
        except ValueError as exc:
            problems.append(str(exc))
    if train is not None:
        try:
            make_linear_schedule(train.T, train.beta_start, train.beta_end)
        except ValueError as exc:
            problems.append(str(exc))
        try:
            build_denoiser(train, 1, data["n_landmarks"])
        except ValueError as exc:
            problems.append(str(exc))

    if problems:
        raise ConfigError(problems)
    return RunConfig(train=train, blur=blur, **data)


# ------------------------------------------------------------ corpus access


def _corpus_paths(corpus_dir):
    corpus_dir = Path(corpus_dir)
    manifest_path = corpus_dir / "manifest.txt"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no manifest.txt under {corpus_dir}")
    ann_root = corpus_dir / "annotations"
    ann_dirs = sorted(p for p in ann_root.iterdir() if p.is_dir()) if ann_root.is_dir() else []
    if not ann_dirs:
        raise FileNotFoundError(f"no annotation directories under {ann_root}")
    return corpus_dir / "images", ann_dirs, manifest_path


def _load_corpus(corpus_dir, cfg: RunConfig):
    image_dir, ann_dirs, manifest_path = _corpus_paths(corpus_dir)
    manifest = read_manifest(manifest_path)
    records = load_corpus(image_dir, ann_dirs, manifest, cfg.n_landmarks, cfg.spacing)
    by_id = {r.id: r for r in records}
    return manifest, by_id


def _split_records(manifest, by_id, split):
    return [by_id[record_id] for record_id in getattr(manifest, split)]


# ------------------------------------------------------------ commands


def cmd_synth(cfg: RunConfig, out_dir) -> int:
    total = cfg.train_records + cfg.val_records + cfg.test_records
    records = synth_corpus(total, cfg.height, cfg.width, cfg.n_landmarks, cfg.train.seed)
    ids = [r.id for r in records]
    manifest = SplitManifest(
        train=ids[: cfg.train_records],
        validation=ids[cfg.train_records : cfg.train_records + cfg.val_records],
        test=ids[cfg.train_records + cfg.val_records :],
    )
    save_corpus(records, out_dir, manifest)
    print(
        f"wrote {len(manifest.train)} train / {len(manifest.validation)} validation / "
        f"{len(manifest.test)} test records ({cfg.width}x{cfg.height}, "
        f"{cfg.n_landmarks} landmarks) to {out_dir}"
    )
    return 0


def cmd_train(cfg: RunConfig, corpus_dir, out_dir) -> int:
    manifest, by_id = _load_corpus(corpus_dir, cfg)
    train_records = _split_records(manifest, by_id, "train")
    val_records = _split_records(manifest, by_id, "validation")
    result = fit(train_records, cfg.train, out_dir=out_dir, val_records=val_records or None)
    final = result.history[-1]["total"] if result.history else float("nan")
    print(
        f"trained {cfg.train.mode} model for {cfg.train.epochs} epochs "
        f"({len(result.history)} steps, final loss {final:.6g}); "
        f"checkpoint at {Path(out_dir) / 'checkpoint.spck'}"
    )
    return 0


def _draw_cross(plane, x, y, level, arm=2):
    h, w = plane.shape
    cx, cy = int(round(x)), int(round(y))
    for dx in range(-arm, arm + 1):
        if 0 <= cx + dx < w and 0 <= cy < h:
            plane[cy, cx + dx] = level
    for dy in range(-arm, arm + 1):
        if 0 <= cx < w and 0 <= cy + dy < h:
            plane[cy + dy, cx] = level


def cmd_sample(cfg: RunConfig, checkpoint, corpus_dir, split, out_dir, single_step) -> int:
    d, _opt, _epoch, baseline = load_checkpoint(checkpoint)
    if baseline:
        raise ValueError("baseline checkpoints take no noisy input and cannot drive sampling")
    if d.predicts_x0 != (cfg.train.parameterization == "x0"):
        raise ValueError(
            f"checkpoint parameterization ({'x0' if d.predicts_x0 else 'eps'}) does not match "
            f"config train.parameterization = {cfg.train.parameterization!r}"
        )
    if d.out_channels != cfg.n_landmarks:
        raise ValueError(
            f"checkpoint predicts {d.out_channels} channels, config expects {cfg.n_landmarks}"
        )
    manifest, by_id = _load_corpus(corpus_dir, cfg)
    records = _split_records(manifest, by_id, split)
    sched = make_linear_schedule(cfg.train.T, cfg.train.beta_start, cfg.train.beta_end)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for idx, r in enumerate(records):
        result = sample_multistep(
            d, r.image, sched, cfg.blur, np.random.default_rng([cfg.train.seed, 4, idx])
        )
        pred = extract_landmarks(result.probs, cfg.spacing)
        dump_heatmap(result.probs, out_dir / f"{r.id}.sphm")
        write_landmark_csv(out_dir / f"{r.id}_pred.csv", pred)
        for k in range(result.probs.channels):
            overlay = r.image.values[0].copy()
            gx, gy = r.ground_truth.points[k]
            px, py = pred.points[k]
            _draw_cross(overlay, gx, gy, 1.0)
            _draw_cross(overlay, px, py, -1.0)
            write_pgm(out_dir / f"{r.id}_ch{k}.pgm", overlay)
        if single_step:
            one = sample_singlestep(
                d, r.image, sched, cfg.blur, np.random.default_rng([cfg.train.seed, 4, idx])
            )
            dump_heatmap(one.probs, out_dir / f"{r.id}_single.sphm")
            write_landmark_csv(
                out_dir / f"{r.id}_single_pred.csv", extract_landmarks(one.probs, cfg.spacing)
            )
    per_record = d.out_channels + 2 + (2 if single_step else 0)
    print(f"sampled {len(records)} {split} records into {out_dir} ({per_record} files each)")
    return 0


def _read_csv_checked(path, n, frame, spacing):
    try:
        return read_landmark_csv(path, n, frame, spacing)
    except ValueError as exc:
        message = str(exc)
        raise ValueError(message if str(path) in message else f"{path}: {message}") from exc


def cmd_eval(pred_dir, gt_dir, frame, spacing, out_path) -> int:
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    gt_files = sorted(gt_dir.glob("*.csv"))
    if not gt_files:
        raise ValueError(f"no ground-truth CSV files under {gt_dir}")
    n = sum(1 for line in gt_files[0].read_text().splitlines() if line.strip())
    preds, gts = [], []
    pred_names = {p.name for p in pred_dir.glob("*.csv")}
    for gt_file in gt_files:
        pred_file = pred_dir / gt_file.name
        if not pred_file.is_file():
            raise ValueError(f"prediction file missing for {gt_file.name}")
        pred_names.discard(gt_file.name)
        gts.append(_read_csv_checked(gt_file, n, frame, spacing))
        preds.append(_read_csv_checked(pred_file, n, frame, spacing))
    if pred_names:
        raise ValueError(f"prediction file {sorted(pred_names)[0]} has no ground-truth partner")

    report = evaluate(preds, gts)
    print(f"images {report.images}  landmarks {report.landmarks}")
    print(f"MRE  {report.mre_mm:.4f} mm (std {report.mre_std_mm:.4f})")
    for radius in sorted(report.sdr):
        print(f"SDR@{radius:g}mm  {report.sdr[radius]:.2f}%")
    text = report_to_json(report)
    sys.stdout.write(text)
    if out_path is not None:
        Path(out_path).write_text(text)
    return 0


def cmd_ablate(cfg: RunConfig, corpus_dir, out_dir, t_list) -> int:
    manifest, by_id = _load_corpus(corpus_dir, cfg)
    train_records = _split_records(manifest, by_id, "train")
    val_records = _split_records(manifest, by_id, "validation")
    if not val_records:
        raise ValueError("ablation needs a nonempty validation split")
    out_dir = Path(out_dir)
    result = fit(train_records, cfg.train, out_dir=out_dir, val_records=val_records)

    rows = []
    for T in t_list:
        sched = make_linear_schedule(T, cfg.train.beta_start, cfg.train.beta_end)
        preds = []
        for idx, r in enumerate(val_records):
            sampled = sample_multistep(
                result.denoiser,
                r.image,
                sched,
                cfg.blur,
                np.random.default_rng([cfg.train.seed, 4, idx]),
            )
            preds.append(extract_landmarks(sampled.probs, cfg.spacing))
        report = evaluate(preds, [r.ground_truth for r in val_records])
        rows.append((T, report.mre_mm, report.sdr[2.0]))
        print(f"T={T}: MRE {report.mre_mm:.4f} mm, SDR@2mm {report.sdr[2.0]:.2f}%")

    sweep = out_dir / "sweep.csv"
    with open(sweep, "w") as fh:
        fh.write("T,mre_mm,sdr_2mm\n")
        for T, mre, sdr in rows:
            fh.write(f"{T},{mre!r},{sdr!r}\n")
    print(f"wrote {len(rows)}-row sweep to {sweep}")
    return 0


# ------------------------------------------------------------ arg plumbing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError([message])


def _build_parser() -> _Parser:
    parser = _Parser(prog="saltpepper", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="INI config file (defaults are built in)")
        return p

    p = add("synth", "write a synthetic corpus")
    p.add_argument("--out", required=True, help="corpus directory to create")

    p = add("train", "fit a model on a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="directory for checkpoint and loss log")

    p = add("sample", "run the reverse chain over a corpus split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="test", choices=["train", "validation", "test"])
    p.add_argument("--out", required=True)
    p.add_argument("--single-step", action="store_true", help="also emit one-call predictions")

    p = sub.add_parser("eval", help="score prediction CSVs against ground-truth CSVs")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--frame", default="1000000,1000000", help="landmark frame as w,h")
    p.add_argument("--spacing", default="1.0,1.0", help="mm per pixel as sx,sy")
    p.add_argument("--out", default=None, help="also write the JSON report here")

    p = add("ablate", "train once, then sweep the chain length at sampling time")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--T-list", required=True, dest="t_list", help="comma-separated chain lengths")

    return parser


def main(argv=None) -> int:
    try:
        args, extra = _build_parser().parse_known_args(argv)
        bad = [item for item in extra if not (item.startswith("--") and "=" in item)]
        if bad:
            raise ConfigError([f"unrecognized argument {item!r}" for item in bad])

        if args.command == "eval":
            if extra:
                raise ConfigError([f"eval takes no config overrides: {extra[0]!r}"])
            return cmd_eval(
                args.pred_dir,
                args.gt_dir,
                _to_float_pair(args.frame),
                _to_float_pair(args.spacing),
                args.out,
            )

        cfg = parse_config(args.config, extra)
        if args.command == "synth":
            return cmd_synth(cfg, args.out)
        if args.command == "train":
            return cmd_train(cfg, args.corpus, args.out)
        if args.command == "sample":
            return cmd_sample(
                cfg, args.checkpoint, args.corpus, args.split, args.out, args.single_step
            )
        if args.command == "ablate":
            t_list = _to_int_tuple(args.t_list)
            if not t_list:
                raise ConfigError(["--T-list must name at least one chain length"])
            return cmd_ablate(cfg, args.corpus, args.out, t_list)
        raise ConfigError([f"unknown command {args.command!r}"])
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"error: {problem}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - defensive
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
