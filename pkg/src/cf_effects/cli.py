"""Command-line entry point for reproducible counterfactual-effect experiments.

Subcommands: ``gen-data``, ``train``, ``eval``, ``sweep-c``, ``compare``.
Each command validates its configuration before doing any work, writes its
artifact set into one output directory (refusing to overwrite existing
files unless ``--force`` is given), renders matplotlib figures next to the
delimited reports, and exits 0 only when the full artifact set was written.
Config precedence is flags > config file > defaults.  Reports embed the
config hash and seed for provenance; nothing embeds timestamps, so reruns
with identical inputs are byte-identical.

The ``CF_EFFECTS_THREADS`` environment variable caps internal parallelism
(it bounds the numeric libraries' thread pools; the toolkit itself is
single-threaded).  Heavy imports happen lazily so the cap is applied before
the numeric libraries initialize.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2

MODEL_DEFAULTS = {
    "strategy": "SUM",
    "mode": "FULL",
    "cf_mode": "UNIFORM",
    "hidden_size": 32,
    "seed": 2,
    "share_question_embedding": False,
    "embed_size": 16,
}
TRAIN_DEFAULTS = {
    "epochs": 30,
    "batch_size": 64,
    "lr": 1e-3,
    "seed": 2,
    "detach_mask_gradient": False,
}


class ConfigError(ValueError):
    """Configuration or schema violation; maps to exit code 2."""


class ArtifactError(RuntimeError):
    """Filesystem-state problem (missing input, refusing to overwrite)."""


def config_hash(payload: dict) -> str:
    """Hash of the experiment inputs; the output location is excluded."""
    payload = {k: v for k, v in payload.items() if k != "out_dir"}
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True).encode()
    ).hexdigest()[:16]


def _load_json(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"config file not found: {path}")
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(payload, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return payload


def _check_section(section: dict, defaults: dict, name: str) -> dict:
    unknown = set(section) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown {name} fields: {sorted(unknown)}")
    merged = dict(defaults)
    merged.update(section)
    return merged


def resolve_experiment_config(payload: dict, args) -> dict:
    """Validated, fully defaulted experiment config (flags already win)."""
    known_top = {"task", "data_dir", "model", "train", "out_dir"}
    unknown = set(payload) - known_top
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    if ("task" in payload) == ("data_dir" in payload):
        raise ConfigError("config needs exactly one of 'task' or 'data_dir'")
    resolved = {
        "model": _check_section(payload.get("model", {}), MODEL_DEFAULTS, "model"),
        "train": _check_section(payload.get("train", {}), TRAIN_DEFAULTS, "train"),
    }
    if "task" in payload:
        if not isinstance(payload["task"], dict):
            raise ConfigError("'task' must be an object with the task spec fields")
        resolved["task"] = payload["task"]
    else:
        resolved["data_dir"] = payload["data_dir"]
    out_dir = getattr(args, "out", None) or payload.get("out_dir")
    if not out_dir:
        raise ConfigError("no output directory: set 'out_dir' in the config or pass --out")
    resolved["out_dir"] = str(out_dir)
    if getattr(args, "seed", None) is not None:
        resolved["model"]["seed"] = args.seed
        resolved["train"]["seed"] = args.seed
        if "task" in resolved:
            resolved["task"] = dict(resolved["task"], seed=args.seed)
    return resolved


def _prepare_out_dir(out_dir: str | Path, filenames: list[str], force: bool) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not force:
        existing = [name for name in filenames if (out / name).exists()]
        if existing:
            raise ArtifactError(
                f"refusing to overwrite {existing} in {out}; pass --force"
            )
    return out


def _sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    digest.update(path.read_bytes())
    return digest.hexdigest()


def _write_csv_with_provenance(path: Path, header_comment: str, render) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(header_comment + "\n")
        render(fh)


# ----------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .data import SyntheticTaskSpec, generate, save_split

    payload = _load_json(args.config)
    try:
        spec = SyntheticTaskSpec.from_dict(payload)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid task spec: {exc}") from exc
    if args.seed is not None:
        spec = SyntheticTaskSpec.from_dict(dict(spec.to_dict(), seed=args.seed))
    filenames = ["train.jsonl", "val.jsonl", "test.jsonl", "manifest.json"]
    out = _prepare_out_dir(args.out, filenames, args.force)
    splits = generate(spec)
    checksums = {}
    for name in ("train", "val", "test"):
        path = out / f"{name}.jsonl"
        save_split(splits[name], path)
        checksums[path.name] = _sha256_file(path)
    manifest = {
        "spec": spec.to_dict(),
        "checksums": checksums,
        "config_hash": config_hash(spec.to_dict()),
        "seed": spec.seed,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    print(f"wrote {', '.join(filenames)} to {out}")
    return EXIT_OK


def _load_splits_for(resolved: dict):
    from .data import SyntheticTaskSpec, generate, load_split

    if "task" in resolved:
        try:
            spec = SyntheticTaskSpec.from_dict(resolved["task"])
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"invalid task spec: {exc}") from exc
        return spec, generate(spec)
    data_dir = Path(resolved["data_dir"])
    splits = {}
    for name in ("train", "val", "test"):
        path = data_dir / f"{name}.jsonl"
        if not path.exists():
            raise ArtifactError(f"missing split file: {path}")
        splits[name] = load_split(path)
    manifest_path = data_dir / "manifest.json"
    if not manifest_path.exists():
        raise ArtifactError(f"missing manifest: {manifest_path}")
    from .data import SyntheticTaskSpec as Spec

    spec = Spec.from_dict(json.loads(manifest_path.read_text())["spec"])
    return spec, splits


def _build_model(resolved: dict, spec, splits, strategy=None, mode=None):
    from .data import empirical_answer_prior
    from .effects import CfMode, Fusion, GraphMode
    from .model import EnsembleModel, ModelConfig

    m = resolved["model"]
    try:
        fusion = Fusion(strategy or m["strategy"])
        graph = GraphMode(mode or m["mode"])
        cf_mode = CfMode(m["cf_mode"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if fusion in (Fusion.RUBI, Fusion.LM):
        graph = GraphMode.SIMPLIFIED
    config = ModelConfig(
        num_answers=spec.num_answers,
        num_qtypes=spec.num_qtypes,
        strategy=fusion,
        mode=graph,
        cf_mode=cf_mode,
        hidden_size=int(m["hidden_size"]),
        seed=int(m["seed"]),
        share_question_embedding=bool(m["share_question_embedding"]),
        embed_size=int(m["embed_size"]),
    )
    prior = None
    if cf_mode is CfMode.PRIOR:
        prior = empirical_answer_prior(splits["train"], spec.num_answers)
    return EnsembleModel(config, train_prior=prior)


def _run_experiment(resolved: dict):
    """Train one model per the resolved config; shared by train and the tests."""
    from .train import TrainConfig, fit

    spec, splits = _load_splits_for(resolved)
    model = _build_model(resolved, spec, splits)
    t = resolved["train"]
    try:
        train_config = TrainConfig(
            epochs=int(t["epochs"]), batch_size=int(t["batch_size"]),
            lr=float(t["lr"]), seed=int(t["seed"]),
            detach_mask_gradient=bool(t["detach_mask_gradient"]),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    result = fit(model, splits["train"], splits["val"], train_config)
    return spec, splits, model, result


TRAIN_ARTIFACTS = [
    "checkpoint.json", "training_log.csv", "training_curves.png",
    "eval_report.csv", "eval_report.json", "config_resolved.json",
]


def cmd_train(args) -> int:
    from .evaluate import DEFAULT_MODES, evaluate, write_eval_csv
    from .figures import plot_training_curves
    from .model import save_model
    from .train import write_training_log

    resolved = resolve_experiment_config(_load_json(args.config), args)
    out = _prepare_out_dir(resolved["out_dir"], TRAIN_ARTIFACTS, args.force)
    spec, splits, model, result = _run_experiment(resolved)
    run_hash = config_hash(resolved)

    save_model(model, out / "checkpoint.json")
    write_training_log(result, out / "training_log.csv")
    plot_training_curves(result, out / "training_curves.png")

    test_report = evaluate(model, splits["test"], DEFAULT_MODES)
    val_report = evaluate(model, splits["val"], DEFAULT_MODES)
    write_eval_csv(test_report, out / "eval_report.csv")
    summary = {
        "config_hash": run_hash,
        "seed": resolved["train"]["seed"],
        "test": test_report.summary(),
        "val": val_report.summary(),
        "learned_cf_values": model.cf.values.tolist(),
    }
    (out / "eval_report.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    (out / "config_resolved.json").write_text(
        json.dumps({"config": resolved, "config_hash": run_hash}, indent=2, sort_keys=True)
    )
    print(f"trained model and reports written to {out}")
    return EXIT_OK


def _parse_modes(modes_arg: str):
    from .effects import InferenceMode

    try:
        return tuple(InferenceMode(m.strip()) for m in modes_arg.split(",") if m.strip())
    except ValueError as exc:
        raise ConfigError(
            f"unknown inference mode in --modes ({exc}); "
            f"valid: {', '.join(m.value for m in InferenceMode)}"
        ) from exc


def cmd_eval(args) -> int:
    from .data import load_split
    from .evaluate import evaluate, write_distribution_csv, write_eval_csv
    from .evaluate import distribution_report
    from .figures import plot_answer_distribution
    from .model import load_model

    checkpoint = Path(args.checkpoint)
    if not checkpoint.exists():
        raise ArtifactError(f"checkpoint not found: {checkpoint}")
    split_path = Path(args.data_dir) / f"{args.split}.jsonl"
    if not split_path.exists():
        raise ArtifactError(f"missing split file: {split_path}")
    modes = _parse_modes(args.modes)
    filenames = ["eval_report.csv", "eval_report.json"] + [
        f"answer_distribution_{m.value}.csv" for m in modes
    ] + [f"answer_distribution_{m.value}.png" for m in modes]
    out = _prepare_out_dir(args.out, filenames, args.force)

    model = load_model(checkpoint)
    split = load_split(split_path)
    report = evaluate(model, split, modes)
    write_eval_csv(report, out / "eval_report.csv")
    provenance = {
        "config_hash": config_hash(
            {"checkpoint": model.config.to_dict(), "split": args.split,
             "modes": [m.value for m in modes]}
        ),
        "seed": model.config.seed,
        "split": args.split,
        "report": report.summary(),
    }
    (out / "eval_report.json").write_text(json.dumps(provenance, indent=2, sort_keys=True))
    for mode in modes:
        rows = distribution_report(model, split, mode)
        write_distribution_csv(rows, out / f"answer_distribution_{mode.value}.csv")
        plot_answer_distribution(report, mode.value, out / f"answer_distribution_{mode.value}.png")
    print(f"evaluation reports written to {out}")
    return EXIT_OK


def cmd_sweep_c(args) -> int:
    from .data import load_split
    from .effects import CfMode
    from .evaluate import sweep_c, write_sweep_csv
    from .figures import plot_sweep
    from .model import load_model

    checkpoint = Path(args.checkpoint)
    if not checkpoint.exists():
        raise ArtifactError(f"checkpoint not found: {checkpoint}")
    split_path = Path(args.data_dir) / f"{args.split}.jsonl"
    if not split_path.exists():
        raise ArtifactError(f"missing split file: {split_path}")
    try:
        c_values = [float(x) for x in args.c_values.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"--c-values must be a comma-separated float list: {exc}") from exc
    if not c_values:
        raise ConfigError("--c-values is empty")
    model = load_model(checkpoint)
    if model.cf.mode is not CfMode.UNIFORM:
        raise ConfigError("sweep-c requires a UNIFORM counterfactual checkpoint")
    filenames = ["sweep_c.csv", "sweep_c.json", "sweep_c.png"]
    out = _prepare_out_dir(args.out, filenames, args.force)
    split = load_split(split_path)
    points = sweep_c(model, split, c_values)
    write_sweep_csv(points, out / "sweep_c.csv")
    payload = {
        "config_hash": config_hash(
            {"checkpoint": model.config.to_dict(), "c_values": c_values}
        ),
        "seed": model.config.seed,
        "learned_c": float(model.cf.values[0]),
        "points": [vars(p) for p in points],
    }
    (out / "sweep_c.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
    plot_sweep(points, out / "sweep_c.png")
    print(f"sweep reports written to {out}")
    return EXIT_OK


COMPARE_STRATEGIES = ("HM", "SUM", "RUBI", "LM")


def cmd_compare(args) -> int:
    import csv

    from .effects import InferenceMode
    from .evaluate import evaluate
    from .figures import plot_compare_grid
    from .train import TrainConfig, fit

    resolved = resolve_experiment_config(_load_json(args.config), args)
    filenames = ["compare_grid.csv", "compare_grid.json", "compare_grid.png"]
    out = _prepare_out_dir(resolved["out_dir"], filenames, args.force)
    spec, splits = _load_splits_for(resolved)
    t = resolved["train"]
    train_config = TrainConfig(
        epochs=int(t["epochs"]), batch_size=int(t["batch_size"]),
        lr=float(t["lr"]), seed=int(t["seed"]),
        detach_mask_gradient=bool(t["detach_mask_gradient"]),
    )
    modes = (InferenceMode.POSTERIOR, InferenceMode.NIE, InferenceMode.TIE)
    rows = []
    for strategy in COMPARE_STRATEGIES:
        model = _build_model(resolved, spec, splits, strategy=strategy)
        fit(model, splits["train"], splits["val"], train_config)
        report = evaluate(model, splits["test"], modes)
        rows.append({
            "strategy": strategy,
            "posterior": report.overall["POSTERIOR"],
            "nie": report.overall["NIE"],
            "tie": report.overall["TIE"],
        })
    run_hash = config_hash(resolved)

    def render(fh):
        writer = csv.writer(fh)
        writer.writerow(["strategy", "posterior", "nie", "tie"])
        for row in rows:
            writer.writerow([row["strategy"], repr(row["posterior"]),
                             repr(row["nie"]), repr(row["tie"])])

    _write_csv_with_provenance(
        out / "compare_grid.csv",
        f"# config_hash={run_hash} seed={train_config.seed}",
        render,
    )
    (out / "compare_grid.json").write_text(json.dumps(
        {"config_hash": run_hash, "seed": train_config.seed, "grid": rows},
        indent=2, sort_keys=True,
    ))
    plot_compare_grid(rows, out / "compare_grid.png")
    print(f"comparison grid written to {out}")
    return EXIT_OK


# ----------------------------------------------------------------------
# entry point
# ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cf-effects",
        description="Counterfactual-effect experiments on a synthetic changing-priors task.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate train/val/test splits from a task spec")
    p.add_argument("--config", required=True, help="task spec JSON file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one ensemble and write its reports")
    p.add_argument("--config", required=True, help="experiment config JSON file")
    p.add_argument("--out", default=None, help="output directory (overrides config)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a data directory")
    p.add_argument("checkpoint")
    p.add_argument("data_dir")
    p.add_argument("--modes", default="POSTERIOR,TE,TIE,NIE,BRANCH_K")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-c", help="evaluate TIE across forced counterfactual constants")
    p.add_argument("checkpoint")
    p.add_argument("data_dir")
    p.add_argument("--c-values", required=True,
               help="comma-separated constants; use --c-values=-30,0,30 for negatives")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_sweep_c)

    p = sub.add_parser("compare", help="train each fusion strategy and tabulate inference modes")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_compare)
    return parser


def _apply_thread_cap() -> None:
    raw = os.environ.get("CF_EFFECTS_THREADS")
    if raw is None:
        return
    try:
        threads = int(raw)
        if threads < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(
            f"CF_EFFECTS_THREADS must be a positive integer, got {raw!r}"
        ) from None
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(threads))


def main(argv=None) -> int:
    try:
        _apply_thread_cap()
        args = build_parser().parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
