"""Command-line entry point.

Every command works in one run directory::

    <run>/config.resolved     fully defaulted config of the latest command
    <run>/dataset.npz         written by generate-data (optional for later stages)
    <run>/checkpoints/        last.npz plus one epoch_NNN.npz per search epoch
    <run>/metrics.jsonl       one line per search epoch
    <run>/genotype.json       written by derive
    <run>/policy.json         written by derive
    <run>/eval/<mode>-s<seed>/{metrics.jsonl,result.json}
    <run>/report.json         one section per command
    <run>/log                 appended by every command

Exit codes: 0 success, 2 invalid config, 3 missing or unreadable input,
4 dataset error, 5 diverged, 6 verification failed, 1 anything else.
Failures print one JSON object to stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__, artifacts
from .artifacts import ArtifactError
from .augmentation import AugParams, apply_policy
from .config import ConfigError, RunConfig, load_config, read_resolved, write_resolved
from .data import Dataset, DatasetError, generate_synthetic, load_binary_batches, load_dataset, save_dataset
from .derivation import (
    derive_architecture,
    derive_policy_distribution,
    load_genotype,
    load_policy,
    sample_final_policy,
    save_genotype,
    save_policy,
)
from .evaluation import AUGMENTATION_MODES, EvalDiverged, build_network, train_and_test
from .search import SearchDiverged, load_checkpoint, run_search, search_data

log = logging.getLogger("jointsearch")

REPORT_SCHEMA = "jointsearch.report"
REPORT_VERSION = "1.0"
DATASET_INFO_SCHEMA = "jointsearch.dataset-info"
DATASET_INFO_VERSION = "1.0"

EXIT_OK, EXIT_UNEXPECTED, EXIT_CONFIG, EXIT_MISSING, EXIT_DATA, EXIT_DIVERGED, EXIT_VERIFY = 0, 1, 2, 3, 4, 5, 6


class MissingInput(FileNotFoundError):
    pass


class VerificationFailed(RuntimeError):
    pass


# ----------------------------------------------------------------------------- run directory


class Run:
    def __init__(self, args: argparse.Namespace):
        explicit = Path(args.run_dir) if args.run_dir else None
        resolved = explicit / "config.resolved" if explicit else None
        if args.config is None and resolved is not None and resolved.exists():
            # later stages inherit what the earlier ones used
            self.config = read_resolved(resolved, args.overrides)
        else:
            self.config = load_config(args.config, args.overrides)
        self.dir = explicit or self.config.run_dir()
        self.dir.mkdir(parents=True, exist_ok=True)

    def path(self, *parts: str) -> Path:
        return self.dir.joinpath(*parts)

    def save_config(self, config: RunConfig | None = None) -> None:
        write_resolved(self.path("config.resolved"), config or self.config)

    def update_report(self, section: str, body: dict) -> None:
        path = self.path("report.json")
        doc = artifacts.read_json(path, REPORT_SCHEMA, REPORT_VERSION) if path.exists() else {}
        doc.pop("header", None)
        doc[section] = body
        artifacts.write_json(path, REPORT_SCHEMA, REPORT_VERSION, doc)

    def require(self, name: str, hint: str) -> Path:
        path = self.path(name)
        if not path.exists():
            raise MissingInput(f"{path} not found; {hint}")
        return path


def build_dataset(config: RunConfig) -> Dataset:
    d = config.dataset
    if d.kind == "binary":
        return load_binary_batches(d.binary.directory, d.binary.classes, d.binary.cap)
    return generate_synthetic(d.synthetic, config.seed)


def _dataset_key(config: RunConfig) -> dict:
    return {"seed": config.seed, "dataset": config.to_dict()["dataset"]}


def obtain_dataset(run: Run) -> Dataset:
    """The run's stored dataset if generate-data wrote one, else a fresh build from the config."""
    stored = run.path("dataset.npz")
    if not stored.exists():
        return build_dataset(run.config)
    info = artifacts.read_json(run.path("dataset.json"), DATASET_INFO_SCHEMA, DATASET_INFO_VERSION)
    if info["source"] != _dataset_key(run.config):
        raise ConfigError(f"{stored} was generated from a different dataset config; rerun generate-data")
    return load_dataset(stored)


# ----------------------------------------------------------------------------- commands


def cmd_generate_data(run: Run, args) -> dict:
    ds = build_dataset(run.config)
    save_dataset(run.path("dataset.npz"), ds)
    stats = ds.stats()
    artifacts.write_json(run.path("dataset.json"), DATASET_INFO_SCHEMA, DATASET_INFO_VERSION, {"source": _dataset_key(run.config), "stats": stats})
    run.save_config()
    run.update_report("dataset", stats)
    return stats


def cmd_search(run: Run, args) -> dict:
    cfg = run.config.search
    last = run.path("checkpoints", "last.npz")
    if args.resume:
        if not last.exists():
            raise MissingInput(f"{last} not found; nothing to resume")
        _, saved = load_checkpoint(last)
        if saved != cfg:
            raise ConfigError("search config differs from the checkpoint being resumed")
    ds = obtain_dataset(run)
    run.save_config()
    state = run_search(cfg, search_data(ds, run.config.seed), run.dir, resume=args.resume, stop_after=args.stop_after)
    h = state.history
    body = {
        "epochs_completed": state.epoch,
        "epochs_planned": cfg.optim.epochs,
        "complete": state.epoch >= cfg.optim.epochs,
        "first_val_loss": h[0]["val_loss"] if h else None,
        "last_val_loss": h[-1]["val_loss"] if h else None,
    }
    run.update_report("search", body)
    return body


def cmd_derive(run: Run, args) -> dict:
    ckpt = Path(args.checkpoint) if args.checkpoint else run.require("checkpoints/last.npz", "run `search` first")
    if not ckpt.exists():
        raise MissingInput(f"{ckpt} not found")
    state, _ = load_checkpoint(ckpt)
    genotype = derive_architecture(state.arch)
    dist = derive_policy_distribution(state.aug)
    save_genotype(run.path("genotype.json"), genotype)
    save_policy(run.path("policy.json"), dist)
    entries = dist.to_dict()["entries"]
    top = sorted(entries, key=lambda e: -e["prob"])[:5]
    body = {
        "checkpoint_epoch": state.epoch,
        "genotype": genotype.to_dict(),
        "policy_entries": len(dist.entries),
        "policy_prob_sum": float(dist.probs.sum()),
        "top_policies": top,
    }
    run.update_report("derive", body)
    return body


def cmd_evaluate(run: Run, args) -> dict:
    overrides = {}
    if args.augmentation is not None:
        overrides["augmentation"] = args.augmentation
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.seed is not None:
        overrides["seed"] = args.seed
    try:
        ecfg = dataclasses.replace(run.config.eval, **overrides)
    except ValueError as exc:
        raise ConfigError(f"eval: {exc}") from None
    genotype = load_genotype(run.require("genotype.json", "run `derive` first"))
    dist = None
    if ecfg.augmentation == "derived-policy":
        dist = load_policy(run.require("policy.json", "run `derive` first"))
    ds = obtain_dataset(run)
    out_dir = run.path("eval", f"{ecfg.augmentation}-s{ecfg.seed}")
    out_dir.mkdir(parents=True, exist_ok=True)
    net = build_network(genotype, ecfg, ds.classes, ds.train_x.shape[1])
    result = train_and_test(net, ds, dist, ecfg, out_dir / "metrics.jsonl")
    log.info("evaluation took %.1fs", result.pop("wall_time_s"))
    result["config"] = ecfg.to_dict()
    artifacts.write_json(out_dir / "result.json", REPORT_SCHEMA, REPORT_VERSION, result)
    summary = {k: result[k] for k in ("augmentation", "seed", "epochs", "test_accuracy", "test_loss", "parameter_count")}
    run.update_report(f"evaluate/{ecfg.augmentation}-s{ecfg.seed}", summary)
    return summary


def cmd_verify(run: Run, args) -> dict:
    from .oracle import run_verification

    if args.draws < 10**4:
        raise ConfigError(f"--draws must be at least 10000, got {args.draws}")

    def show(check):
        print(check.line(), flush=True)

    result = run_verification(draws=args.draws, seed=args.seed if args.seed is not None else run.config.seed, progress=show)
    for row in result.info["curved_validation_bias"]:
        print(f"INFO curved validation loss bias on {row['toy']}: |bias|={row['bias_norm']:.3g}, |exact|={row['exact_norm']:.3g} (eta={row['eta']}, M={row['m']})")
    doc = result.to_dict()
    artifacts.write_json(run.path("verify.json"), REPORT_SCHEMA, REPORT_VERSION, doc)
    run.update_report("verify", {"passed": result.passed, "checks": len(result.checks), "failed": [c.name for c in result.checks if not c.passed]})
    if not result.passed:
        raise VerificationFailed(f"{sum(not c.passed for c in result.checks)} verification check(s) failed")
    return {"passed": True, "checks": len(result.checks)}


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return (np.clip(img.transpose(1, 2, 0), 0, 1) * 255 + 0.5).astype(np.uint8)


def cmd_preview(run: Run, args) -> dict:
    from PIL import Image

    policy_path = Path(args.policy) if args.policy else run.path("policy.json")
    dist = load_policy(policy_path) if policy_path.exists() else derive_policy_distribution(AugParams.initial(k=run.config.search.policy_slots))
    ds = obtain_dataset(run)
    rng = np.random.default_rng(args.seed)
    pick = rng.choice(len(ds.train_x), size=min(args.images, len(ds.train_x)), replace=False)
    rows = []
    for i in pick:
        img = ds.train_x[i : i + 1]
        cells = [img[0]] + [apply_policy(sample_final_policy(dist, rng), img, rng, n_bins=dist.n_bins)[0] for _ in range(args.variants)]
        rows.append(np.concatenate([_to_uint8(c) for c in cells], axis=1))
    grid = np.concatenate(rows, axis=0)
    out = Path(args.output) if args.output else run.path("preview.png")
    image = Image.fromarray(grid)
    image = image.resize((grid.shape[1] * args.scale, grid.shape[0] * args.scale), Image.NEAREST)
    out.parent.mkdir(parents=True, exist_ok=True)
    image.save(out)
    return {"output": str(out), "images": len(pick), "variants": args.variants, "policy": str(policy_path) if policy_path.exists() else "uniform"}


COMMANDS = {
    "generate-data": cmd_generate_data,
    "search": cmd_search,
    "derive": cmd_derive,
    "evaluate": cmd_evaluate,
    "verify": cmd_verify,
    "preview-augment": cmd_preview,
}


# ----------------------------------------------------------------------------- plumbing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON run config (default: the run directory's config.resolved, else built-in defaults)")
    common.add_argument("--run-dir", help="run directory (default: <run_root>/<output.name or 'run'>)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="override a config field, e.g. search.batch_size=16")
    common.add_argument("-q", "--quiet", action="store_true", help="log to the run directory only")

    parser = argparse.ArgumentParser(prog="jointsearch", description="Joint architecture and augmentation-policy search.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate-data", parents=[common], help="build the dataset and store it in the run directory")
    p = sub.add_parser("search", parents=[common], help="run the joint search")
    p.add_argument("--resume", action="store_true", help="continue from checkpoints/last.npz")
    p.add_argument("--stop-after", type=int, metavar="EPOCHS", help="stop once this many epochs are complete")
    p = sub.add_parser("derive", parents=[common], help="extract genotype.json and policy.json from a checkpoint")
    p.add_argument("--checkpoint", help="checkpoint to derive from (default: checkpoints/last.npz)")
    p = sub.add_parser("evaluate", parents=[common], help="train the derived network from scratch and test it")
    p.add_argument("--augmentation", choices=AUGMENTATION_MODES)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p = sub.add_parser("verify", parents=[common], help="run the oracle suite")
    p.add_argument("--draws", type=int, default=10**5, help="Monte-Carlo draws per estimator test (>= 10000)")
    p.add_argument("--seed", type=int)
    p = sub.add_parser("preview-augment", parents=[common], help="write a PNG grid of images under sampled policies")
    p.add_argument("--policy", help="policy.json to sample from (default: the run's, else uniform)")
    p.add_argument("--images", type=int, default=6)
    p.add_argument("--variants", type=int, default=7)
    p.add_argument("--scale", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output")
    return parser


def _configure_logging(run: Run, quiet: bool) -> list[logging.Handler]:
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
    handlers: list[logging.Handler] = [logging.FileHandler(run.path("log"))]
    if not quiet:
        handlers.append(logging.StreamHandler(sys.stderr))
    root = logging.getLogger("jointsearch")
    root.setLevel(logging.INFO)
    for h in handlers:
        h.setFormatter(fmt)
        root.addHandler(h)
    return handlers


def _fail(code: int, kind: str, message: str) -> int:
    print(json.dumps({"error": kind, "message": message, "exit_code": code}), file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    handlers: list[logging.Handler] = []
    try:
        run = Run(args)
        handlers = _configure_logging(run, args.quiet)
        log.info("%s in %s", args.command, run.dir)
        start = time.perf_counter()
        body = COMMANDS[args.command](run, args)
        log.info("%s finished in %.1fs", args.command, time.perf_counter() - start)
        print(json.dumps({"command": args.command, "run_dir": str(run.dir), **body}, indent=2))
        return EXIT_OK
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc))
    except (MissingInput, ArtifactError) as exc:
        return _fail(EXIT_MISSING, "input", str(exc))
    except DatasetError as exc:
        return _fail(EXIT_DATA, "dataset", str(exc))
    except (SearchDiverged, EvalDiverged) as exc:
        return _fail(EXIT_DIVERGED, "diverged", str(exc))
    except VerificationFailed as exc:
        return _fail(EXIT_VERIFY, "verify", str(exc))
    except Exception as exc:  # noqa: BLE001 - last-resort structured report
        log.exception("unexpected failure")
        return _fail(EXIT_UNEXPECTED, type(exc).__name__, str(exc))
    finally:
        root = logging.getLogger("jointsearch")
        for h in handlers:
            root.removeHandler(h)
            h.close()


if __name__ == "__main__":
    sys.exit(main())
