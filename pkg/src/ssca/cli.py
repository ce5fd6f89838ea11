"""Command-line front end: gen-data, train, attribute, augment-preview, eval, report.

All commands read one JSON run configuration (strictly validated, unknown
keys rejected); a handful of flags override individual fields. Every JSON
output embeds the parsed config and the tool version, and no output embeds
timestamps or absolute paths, so reruns with equal seeds are byte-identical.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__, tinynet
from .attribution import (
    SearchConfig,
    UtilityWeights,
    build_curve_rows,
    greedy_counterfactual,
    select_counter_target,
    write_curve_csv,
    write_overlay_ppm,
)
from .augment import (
    GUIDANCE_KINDS,
    MiningConfig,
    build_donor_pool,
    counterfactual_augment,
    export_augmented_sample,
)
from .errors import ConfigError, DataError, FormatError, NumericError, SscaError
from .imaging import read_image_tensor, write_ppm
from .pipeline import (
    EvalReport,
    evaluate,
    evaluate_corruptions,
    flip_rate,
    train_erm,
    train_ssca,
    validate_eval_report,
)
from .scorer import score_batch
from .testbed import (
    CORRUPTION_KINDS,
    DEFAULT_CORRUPTIONS,
    CorruptionSpec,
    ShortcutDatasetConfig,
    SPLIT_NAMES,
    generate,
    load_dataset,
    save_dataset,
)
from .tinynet import Arch, DEFAULT_LAYERS, OptimizerSpec, TinyNetScorer, TrainConfig

CONFIG_VERSION = 1


@dataclass
class RunConfig:
    dataset: ShortcutDatasetConfig
    train: TrainConfig
    search: SearchConfig
    mining: MiningConfig
    aug_weight: float
    corruptions: tuple[CorruptionSpec, ...] | None
    arch_layers: tuple[str, ...]
    output_dir: str
    seed: int
    eval_seed: int
    flip_samples: int
    flip_split: str
    echo: dict  # the parsed config document, echoed into outputs


def _type_name(v) -> str:
    return type(v).__name__


def _want_int(d: dict, key: str, path: str, default=None):
    if key not in d:
        return default
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{path}.{key}: expected an integer, got {_type_name(v)}")
    return v


def _want_num(d: dict, key: str, path: str, default=None):
    if key not in d:
        return default
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{path}.{key}: expected a number, got {_type_name(v)}")
    return float(v)


def _want_str(d: dict, key: str, path: str, default=None):
    if key not in d:
        return default
    v = d[key]
    if not isinstance(v, str):
        raise ConfigError(f"{path}.{key}: expected a string, got {_type_name(v)}")
    return v


def _reject_unknown(d: dict, allowed: set[str], path: str) -> None:
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}")


def _build_dataset(d: dict, default_seed: int) -> ShortcutDatasetConfig:
    allowed = {
        "num_classes", "height", "width", "channels", "train_per_class", "test_per_class",
        "p_spurious", "cue_size", "parts_per_object", "part_presence", "noise_level",
        "donor_count", "rng_seed",
    }
    _reject_unknown(d, allowed, "dataset")
    try:
        return ShortcutDatasetConfig(
            num_classes=_want_int(d, "num_classes", "dataset", 4),
            height=_want_int(d, "height", "dataset", 32),
            width=_want_int(d, "width", "dataset", 32),
            channels=_want_int(d, "channels", "dataset", 3),
            train_per_class=_want_int(d, "train_per_class", "dataset", 500),
            test_per_class=_want_int(d, "test_per_class", "dataset", 125),
            p_spurious=_want_num(d, "p_spurious", "dataset", 0.95),
            cue_size=_want_int(d, "cue_size", "dataset", 4),
            parts_per_object=_want_int(d, "parts_per_object", "dataset", 3),
            part_presence=_want_num(d, "part_presence", "dataset", 0.85),
            noise_level=_want_num(d, "noise_level", "dataset", 0.02),
            donor_count=_want_int(d, "donor_count", "dataset", 200),
            rng_seed=_want_int(d, "rng_seed", "dataset", default_seed),
        )
    except (ValueError, SscaError) as e:
        raise ConfigError(f"dataset: {e}") from e


def _build_train(d: dict, default_seed: int) -> TrainConfig:
    allowed = {"learning_rate", "epochs", "batch_size", "optimizer", "weight_decay", "rng_seed"}
    _reject_unknown(d, allowed, "train")
    opt = d.get("optimizer", {})
    if not isinstance(opt, dict):
        raise ConfigError("train.optimizer: expected an object")
    _reject_unknown(opt, {"kind", "beta1", "beta2", "eps"}, "train.optimizer")
    kind = _want_str(opt, "kind", "train.optimizer", "adam")
    try:
        spec = OptimizerSpec(
            kind=kind,
            beta1=_want_num(opt, "beta1", "train.optimizer", 0.9),
            beta2=_want_num(opt, "beta2", "train.optimizer", 0.999),
            eps=_want_num(opt, "eps", "train.optimizer", 1e-8),
        )
        return TrainConfig(
            learning_rate=_want_num(d, "learning_rate", "train", 1e-3),
            epochs=_want_int(d, "epochs", "train", 15),
            batch_size=_want_int(d, "batch_size", "train", 32),
            optimizer=spec,
            weight_decay=_want_num(d, "weight_decay", "train", 0.0),
            rng_seed=_want_int(d, "rng_seed", "train", default_seed),
        )
    except (ValueError, SscaError) as e:
        raise ConfigError(f"train: {e}") from e


def _build_search(d: dict) -> SearchConfig:
    allowed = {"budget_k", "tau_cf", "lambda1", "lambda2", "baseline", "grid"}
    _reject_unknown(d, allowed, "search")
    grid = d.get("grid", [7, 7])
    if (
        not isinstance(grid, list)
        or len(grid) != 2
        or not all(isinstance(g, int) and not isinstance(g, bool) for g in grid)
    ):
        raise ConfigError("search.grid: expected [gh, gw] integers")
    try:
        return SearchConfig(
            budget_k=_want_int(d, "budget_k", "search", None),
            tau_cf=_want_num(d, "tau_cf", "search", 0.5),
            weights=UtilityWeights(
                lambda1=_want_num(d, "lambda1", "search", 1.0),
                lambda2=_want_num(d, "lambda2", "search", 1.0),
            ),
            baseline=_want_num(d, "baseline", "search", 0.0),
            grid_shape=(grid[0], grid[1]),
        )
    except (ValueError, SscaError) as e:
        raise ConfigError(f"search: {e}") from e


def _build_mining(d: dict, search: SearchConfig) -> MiningConfig:
    allowed = {"tau_aug", "candidate_fraction", "guidance", "refresh_interval", "warmup_epochs"}
    _reject_unknown(d, allowed, "mining")
    guidance = _want_str(d, "guidance", "mining", "counterfactual")
    if guidance not in GUIDANCE_KINDS:
        raise ConfigError(f"mining.guidance: must be one of {list(GUIDANCE_KINDS)}")
    try:
        return MiningConfig(
            search=search,
            tau_aug=_want_num(d, "tau_aug", "mining", 0.5),
            candidate_fraction=_want_num(d, "candidate_fraction", "mining", 0.5),
            guidance=guidance,
            refresh_interval=_want_int(d, "refresh_interval", "mining", 1),
            warmup_epochs=_want_int(d, "warmup_epochs", "mining", 0),
        )
    except (ValueError, SscaError) as e:
        raise ConfigError(f"mining: {e}") from e


def _build_corruptions(value) -> tuple[CorruptionSpec, ...] | None:
    if value is None or value == "default":
        return DEFAULT_CORRUPTIONS
    if value == "none":
        return None
    if not isinstance(value, list):
        raise ConfigError('corruptions: expected "default", "none", or a list')
    specs = []
    for i, item in enumerate(value):
        if not isinstance(item, dict):
            raise ConfigError(f"corruptions[{i}]: expected an object")
        _reject_unknown(item, {"kind", "param"}, f"corruptions[{i}]")
        kind = _want_str(item, "kind", f"corruptions[{i}]")
        if kind not in CORRUPTION_KINDS:
            raise ConfigError(f"corruptions[{i}].kind: unknown kind {kind!r}")
        try:
            specs.append(CorruptionSpec(kind=kind, param=_want_num(item, "param", f"corruptions[{i}]")))
        except ValueError as e:
            raise ConfigError(f"corruptions[{i}]: {e}") from e
    return tuple(specs)


def load_run_config(
    path: str | Path,
    seed_override: int | None = None,
    epochs_override: int | None = None,
    tau_aug_override: float | None = None,
) -> RunConfig:
    """Parse and strictly validate a run configuration file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path}: no such config file")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    allowed = {
        "version", "output_dir", "seed", "dataset", "arch", "train", "search",
        "mining", "aug_weight", "corruptions", "eval",
    }
    _reject_unknown(doc, allowed, "config")
    version = _want_int(doc, "version", "config")
    if version != CONFIG_VERSION:
        raise ConfigError(f"config.version: expected {CONFIG_VERSION}, got {version}")
    seed = _want_int(doc, "seed", "config", 0)
    if seed_override is not None:
        seed = seed_override
    for section in ("dataset", "arch", "train", "search", "mining", "eval"):
        if section in doc and not isinstance(doc[section], dict):
            raise ConfigError(f"config.{section}: expected an object")

    dataset_doc = dict(doc.get("dataset", {}))
    train_doc = dict(doc.get("train", {}))
    if seed_override is not None:
        dataset_doc["rng_seed"] = seed
        train_doc["rng_seed"] = seed
    dataset = _build_dataset(dataset_doc, seed)
    train = _build_train(train_doc, seed)
    if epochs_override is not None:
        train = replace(train, epochs=epochs_override)
    search = _build_search(doc.get("search", {}))
    mining = _build_mining(doc.get("mining", {}), search)
    if tau_aug_override is not None:
        mining = replace(mining, tau_aug=tau_aug_override)
    arch_doc = doc.get("arch", {})
    _reject_unknown(arch_doc, {"layers"}, "arch")
    layers = arch_doc.get("layers", list(DEFAULT_LAYERS))
    if not isinstance(layers, list) or not all(isinstance(s, str) for s in layers):
        raise ConfigError("arch.layers: expected a list of layer strings")
    eval_doc = doc.get("eval", {})
    _reject_unknown(eval_doc, {"flip_samples", "flip_split", "seed"}, "eval")
    flip_split = _want_str(eval_doc, "flip_split", "eval", "test_id")
    if flip_split not in SPLIT_NAMES:
        raise ConfigError(f"eval.flip_split: must be one of {list(SPLIT_NAMES)}")
    aug_weight = _want_num(doc, "aug_weight", "config", 1.0)
    if aug_weight < 0:
        raise ConfigError("config.aug_weight: must be nonnegative")
    return RunConfig(
        dataset=dataset,
        train=train,
        search=search,
        mining=mining,
        aug_weight=aug_weight,
        corruptions=_build_corruptions(doc.get("corruptions")),
        arch_layers=tuple(layers),
        output_dir=_want_str(doc, "output_dir", "config", "runs/ssca"),
        seed=seed,
        eval_seed=_want_int(eval_doc, "seed", "eval", seed),
        flip_samples=_want_int(eval_doc, "flip_samples", "eval", 200),
        flip_split=flip_split,
        echo=doc,
    )


def _build_arch(rc: RunConfig, dataset_cfg: ShortcutDatasetConfig) -> Arch:
    try:
        return Arch(
            input_height=dataset_cfg.height,
            input_width=dataset_cfg.width,
            input_channels=dataset_cfg.channels,
            num_classes=dataset_cfg.num_classes,
            layers=rc.arch_layers,
        )
    except SscaError as e:
        raise ConfigError(f"arch: {e}") from e


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _envelope(rc: RunConfig) -> dict:
    return {"tool_version": __version__, "config": rc.echo}


def _resolve_threads(args) -> int:
    value = args.threads
    if value is None:
        env = os.environ.get("SSCA_THREADS")
        if env is not None:
            try:
                value = int(env)
            except ValueError:
                raise ConfigError(f"SSCA_THREADS: expected an integer, got {env!r}") from None
    if value is None:
        value = 1
    if value < 1:
        raise ConfigError("--threads must be >= 1")
    return value


def _load_split(data, name: str):
    if name not in data.splits:
        raise DataError(f"dataset has no split {name!r}")
    return data.splits[name]


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _cmd_gen_data(args) -> int:
    rc = load_run_config(args.config, seed_override=args.seed)
    out_dir = Path(args.out) if args.out else Path(rc.output_dir) / "data"
    data = generate(rc.dataset)
    meta = save_dataset(data, out_dir)
    _write_json(out_dir / "gen_echo.json", {**_envelope(rc), "content_hash": meta["content_hash"]})
    print(f"dataset: {out_dir}  content_hash={meta['content_hash']}")
    return 0


def _cmd_train(args) -> int:
    rc = load_run_config(
        args.config,
        seed_override=args.seed,
        epochs_override=args.epochs,
        tau_aug_override=args.tau_aug,
    )
    data = load_dataset(args.data)
    arch = _build_arch(rc, data.config)
    out_dir = Path(args.out) if args.out else Path(rc.output_dir) / f"train_{args.mode}"
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.mode == "erm":
        result = train_erm(data, arch, rc.train)
    else:
        result = train_ssca(data, arch, rc.train, rc.mining, rc.aug_weight)
    params_path = out_dir / "model.sscap"
    tinynet.save(result.params, params_path)
    loss_path = out_dir / "loss.csv"
    with open(loss_path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh,
            fieldnames=["step", "epoch", "loss_joint", "loss_orig", "loss_aug", "n_candidates", "n_mined"],
        )
        writer.writeheader()
        for row in result.loss_rows:
            writer.writerow(row)
    params_sha = _sha256_file(params_path)
    data_meta = json.loads((Path(args.data) / "meta.json").read_text())
    _write_json(
        out_dir / "train_echo.json",
        {
            **_envelope(rc),
            "mode": args.mode,
            "params_sha256": params_sha,
            "data_content_hash": data_meta["content_hash"],
        },
    )
    print(f"params: {params_path}  sha256={params_sha}")
    return 0


def _cmd_attribute(args) -> int:
    rc = load_run_config(args.config, seed_override=args.seed)
    params = tinynet.load(args.params)
    scorer = TinyNetScorer(params)
    if args.image is not None:
        if args.gt is None:
            raise ConfigError("--gt is required when attributing a raw --image file")
        image = read_image_tensor(args.image)
        y_gt = args.gt
    else:
        if args.data is None:
            raise ConfigError("either --image or --data with --index is required")
        data = load_dataset(args.data)
        split = _load_split(data, args.split)
        if not 0 <= args.index < len(split):
            raise DataError(f"index {args.index} out of range for split of {len(split)}")
        sample = split.sample(args.index)
        image, y_gt = sample.image, sample.label
    scores = score_batch(scorer, [image])[0]
    y_counter = args.counter if args.counter is not None else select_counter_target(scores, y_gt)
    result = greedy_counterfactual(scorer, image, y_gt, y_counter, rc.search)
    out_dir = Path(args.out) if args.out else Path(rc.output_dir) / "attribution"
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / "result.json", {**_envelope(rc), "result": result.to_json_dict()})
    write_curve_csv(out_dir / "curve.csv", build_curve_rows(scorer, image, result))
    write_overlay_ppm(
        out_dir / "overlay.ppm", image, result.final_mask, comment=f"ssca {__version__}"
    )
    print(
        f"attribution: c_max={result.c_max:.4f} stop={result.stop_reason} "
        f"regions={list(result.ordered_regions)}"
    )
    return 0


def _cmd_augment_preview(args) -> int:
    rc = load_run_config(args.config, seed_override=args.seed)
    params = tinynet.load(args.params)
    scorer = TinyNetScorer(params)
    data = load_dataset(args.data)
    split = _load_split(data, args.split)
    if not 0 <= args.index < len(split):
        raise DataError(f"index {args.index} out of range for split of {len(split)}")
    sample = split.sample(args.index)
    pool = build_donor_pool(data.donors, seed=rc.seed, expected_shape=sample.image.shape)
    rng = np.random.default_rng((rc.seed, 31, args.index))
    aug = counterfactual_augment(sample, scorer, pool, rc.mining, source_index=args.index, rng=rng)
    out_dir = Path(args.out) if args.out else Path(rc.output_dir) / "augment_preview"
    out_dir.mkdir(parents=True, exist_ok=True)
    export_augmented_sample(aug, out_dir / "augmented.ssca", out_dir / "augmented.json")
    write_ppm(out_dir / "original.ppm", sample.image, comment=f"ssca {__version__}")
    write_ppm(out_dir / "augmented.ppm", aug.image, comment=f"ssca {__version__}")
    write_overlay_ppm(
        out_dir / "overlay.ppm", sample.image, aug.mask, comment=f"ssca {__version__}"
    )
    print(
        f"augment-preview: label={aug.label} c_max={aug.c_max:.4f} "
        f"donor={aug.donor_index} regions={sorted(aug.mask.selected)}"
    )
    return 0


def _cmd_eval(args) -> int:
    rc = load_run_config(args.config, seed_override=args.seed)
    params = tinynet.load(args.params)
    data = load_dataset(args.data)
    splits = {name: evaluate(params, split) for name, split in sorted(data.splits.items())}
    if args.corruptions == "none":
        specs = None
    elif args.corruptions == "default":
        specs = DEFAULT_CORRUPTIONS
    else:
        specs = rc.corruptions
    corr = None
    if specs is not None:
        corr = evaluate_corruptions(params, _load_split(data, "test_id"), specs, seed=rc.eval_seed)
    flip = None
    if rc.flip_samples > 0 and not args.no_flip:
        flip = flip_rate(
            params,
            _load_split(data, rc.flip_split),
            rc.search,
            sample_count=rc.flip_samples,
            seed=rc.eval_seed,
        )
    report = EvalReport(
        tool_version=__version__,
        config_echo=rc.echo,
        seeds=[rc.seed, rc.train.rng_seed, rc.dataset.rng_seed, rc.eval_seed],
        splits=splits,
        corruptions=corr,
        flip=flip,
        per_step_loss=args.loss_csv,
    )
    payload = report.to_json_dict()
    problems = validate_eval_report(payload)
    if problems:
        raise NumericError(f"internal: emitted report fails schema: {problems}")
    out_path = Path(args.out) if args.out else Path(rc.output_dir) / "report.json"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    _write_json(out_path, payload)
    for name, acc in splits.items():
        print(f"eval {name}: {acc:.2f}%")
    if corr is not None:
        for kind, acc in corr.items():
            print(f"eval corruption {kind}: {acc:.2f}%")
    if flip is not None and flip.rate is not None:
        lo, hi = flip.ci95
        print(f"flip rate ({flip.strategy}): {flip.rate:.3f} ci95=[{lo:.3f}, {hi:.3f}] n={flip.n}")
    print(f"report: {out_path}")
    return 0


def _cmd_report(args) -> int:
    for path in args.inputs:
        doc = json.loads(Path(path).read_text())
        problems = validate_eval_report(doc)
        if problems:
            raise FormatError(f"{path}: invalid report: {problems}")
        print(f"== {path} (tool {doc['tool_version']}) ==")
        for name, acc in doc["splits"].items():
            print(f"  split {name:<24} {acc:6.2f}%")
        if doc["corruptions"]:
            for kind, acc in doc["corruptions"].items():
                print(f"  corruption {kind:<19} {acc:6.2f}%")
        flip = doc["flip_rate"]
        if flip and flip.get("rate") is not None:
            print(
                f"  flip rate ({flip['strategy']}): {flip['rate']:.3f} "
                f"ci95={flip['ci95']} n={flip['n']}"
            )
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssca", description=__doc__)
    parser.add_argument("--threads", type=int, default=None, help="worker cap (env: SSCA_THREADS)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset directory")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train a model (erm or ssca mode)")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=["erm", "ssca"], required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--tau-aug", dest="tau_aug", type=float, default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("attribute", help="run the counterfactual search on one image")
    p.add_argument("--config", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--split", default="test_id")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--image", default=None, help="SSCA-TENSOR image file instead of --data")
    p.add_argument("--gt", type=int, default=None)
    p.add_argument("--counter", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_attribute)

    p = sub.add_parser("augment-preview", help="attribute + refill one sample and export it")
    p.add_argument("--config", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_augment_preview)

    p = sub.add_parser("eval", help="evaluate a model over splits and corruptions")
    p.add_argument("--config", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--corruptions", choices=["default", "none", "config"], default="config")
    p.add_argument("--no-flip", action="store_true")
    p.add_argument("--loss-csv", default=None, help="relative path recorded as per_step_loss")
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("report", help="summarize one or more eval reports")
    p.add_argument("inputs", nargs="+")
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _resolve_threads(args)
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (DataError, FormatError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    raise SystemExit(main())
