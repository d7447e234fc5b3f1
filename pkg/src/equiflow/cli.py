"""``equiflow`` command-line entry point.

Exit codes: 0 success, 1 validation failure, 2 runtime error.  Human-readable
messages go to standard error; machine-readable results go to files only.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from equiflow.errors import EquiflowError, InvalidConfig, UnknownSubcommand, ValidationError

SEED_ENV = "EQUIFLOW_SEED"
MANIFEST_NAME = "run_manifest.json"


def log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


class _Parser(argparse.ArgumentParser):
    """Raises instead of exiting so usage errors map to exit code 1."""

    def error(self, message):
        if "invalid choice" in message and "command" in message:
            raise UnknownSubcommand(message)
        raise InvalidConfig(message)


# --- shared helpers -----------------------------------------------------------------------


def resolve_seed(value: int | None) -> int:
    if value is not None:
        return value
    env = os.environ.get(SEED_ENV)
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise InvalidConfig(f"{SEED_ENV} must be an integer, got {env!r}") from None


def load_json_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise InvalidConfig(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"config file {path} is not valid JSON: {exc}") from None
    unknown = set(cfg) - {"train", "model"}
    if unknown:
        raise InvalidConfig(f"unknown config section {sorted(unknown)[0]!r} (expected 'train' and 'model')")
    return cfg


def code_hash() -> str:
    h = hashlib.sha256()
    for f in sorted(Path(__file__).parent.glob("*.py")):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()[:16]


class RunManifest:
    """Written before a run starts and updated with its status on exit."""

    def __init__(self, path, command: str, argv: list[str], config: dict, seeds: list[int]):
        self.path = Path(path)
        blob = json.dumps(config, sort_keys=True, default=str).encode()
        self.data = {
            "command": command,
            "argv": argv,
            "config": config,
            "seeds": seeds,
            "content_hash": hashlib.sha256(code_hash().encode() + blob).hexdigest()[:16],
            "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "outputs": [],
            "status": "running",
        }
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._write()

    def _write(self) -> None:
        self.path.write_text(json.dumps(self.data, indent=2, default=str))

    def finish(self, status: str, outputs=()) -> None:
        self.data.update(status=status, finished=time.strftime("%Y-%m-%dT%H:%M:%S%z"), outputs=[str(o) for o in outputs])
        self._write()


def _set_workers(n: int) -> None:
    import torch

    if n < 1:
        raise InvalidConfig("--workers must be >= 1")
    torch.set_num_threads(n)


def _train_config(args, file_cfg: dict):
    from equiflow.training import TrainConfig

    d = dict(file_cfg.get("train", {}))
    for flag, key in (("epochs", "epochs"), ("lr", "peak_lr"), ("augmentation", "augmentation"), ("precision", "precision")):
        v = getattr(args, flag, None)
        if v is not None:
            d[key] = v
    d["seed"] = resolve_seed(args.seed if args.seed is not None else d.get("seed"))
    return TrainConfig.from_dict(d)


def _model_config(kind: str, fast: bool, file_cfg: dict):
    from equiflow.training import default_model_config, model_config_from_dict

    base = default_model_config(kind, fast).to_dict()
    base.update(file_cfg.get("model", {}))
    return model_config_from_dict(kind, base)


# --- subcommands --------------------------------------------------------------------------


def cmd_gen_data(args) -> list[Path]:
    from equiflow.datasets import alignment_label, generate_dataset, write_dataset

    if args.count < 1:
        raise InvalidConfig(f"count must be >= 1, got {args.count}")
    n_eval = args.eval_count if args.eval_count is not None else max(1, args.count // 5)
    seed = resolve_seed(args.seed)
    counts = {"train": args.count, "val": n_eval, "test": n_eval}
    data = generate_dataset(args.kind, counts, args.alignment, seed, args.n_surface, args.n_volume)
    write_dataset(args.out, data, {"kind": args.kind, "alignment": alignment_label(args.alignment), "seed": seed})
    log(f"wrote {sum(counts.values())} {args.kind} samples to {args.out}")
    return [Path(args.out) / "manifest.json"]


def cmd_train(args) -> list[Path]:
    from equiflow.datasets import load_dataset, read_manifest
    from equiflow.preprocess import PositionScaling
    from equiflow.training import train

    file_cfg = load_json_config(args.config)
    tcfg = _train_config(args, file_cfg)
    mcfg = _model_config(args.model, args.fast, file_cfg)
    data = load_dataset(args.data)
    scaling = PositionScaling.from_dict(read_manifest(args.data)["scaling"])
    record, _, _ = train(tcfg, args.model, data, mcfg, args.out, scaling=scaling, log=log)
    for target in record.test_rel_l2:
        log(f"test {target} rel-L2 {record.test_score(target):.3f}%")
    return [Path(args.out) / "checkpoint.nsf", Path(args.out) / "metrics.json"]


def cmd_eval(args) -> list[Path]:
    from equiflow.datasets import load_split
    from equiflow.training import TrainConfig, evaluate, load_checkpoint, model_config_from_dict

    model, norm, meta = load_checkpoint(args.checkpoint)
    mcfg = model_config_from_dict(meta["model_kind"], meta["model_config"])
    tcfg = TrainConfig.from_dict(meta.get("train_config", {}))
    samples = load_split(args.data, args.split)
    res = evaluate(model.to(tcfg.dtype), norm, samples, mcfg, args.rotation, resolve_seed(args.seed) if args.seed is not None else tcfg.eval_seed, tcfg.dtype)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report = {
        "checkpoint": str(args.checkpoint),
        "split": args.split,
        "rotation": args.rotation,
        "model_kind": meta["model_kind"],
        "test_rel_l2": res,
        "mean_rel_l2": {k: float(np.mean(v)) for k, v in res.items()},
    }
    out.write_text(json.dumps(report, indent=2))
    for k, v in report["mean_rel_l2"].items():
        log(f"{args.split} {k} rel-L2 {v:.3f}% (rotation {args.rotation})")
    return [out]


def cmd_equi_check(args) -> list[Path]:
    from equiflow.equicheck import equivariance_report

    report = equivariance_report(
        args.model, args.precision, args.motions, resolve_seed(args.seed), args.kind, args.checkpoint
    )
    log(f"max relative deviation {report['max_rel_dev']:.3e} over {report['n_motions']} motions ({args.precision})")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(report, indent=2))
    if report["max_rel_dev"] > args.tolerance:
        raise ValidationError(f"deviation {report['max_rel_dev']:.3e} exceeds tolerance {args.tolerance:g}")
    return [Path(args.out)] if args.out else []


def _degrees(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise InvalidConfig(f"cannot parse degree list {text!r}") from None


def cmd_sweep_rotation(args) -> list[Path]:
    from equiflow.datasets import load_dataset
    from equiflow.training import rotation_sweep

    file_cfg = load_json_config(args.config)
    tcfg = _train_config(args, file_cfg)
    mcfg = _model_config(args.model, args.fast, file_cfg)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [tcfg.seed]
    rotation_sweep(_degrees(args.train_degrees), _degrees(args.test_degrees), tcfg, load_dataset(args.data), args.model, mcfg, seeds, args.out, log)
    return [Path(args.out) / "heatmap.csv"]


def cmd_diagnose(args) -> list[Path]:
    from equiflow.datasets import load_dataset, read_manifest
    from equiflow.diagnostics import diagnose
    from equiflow.preprocess import PositionScaling

    data = load_dataset(args.data)
    samples = [s for split in data.values() for s in split]
    scaling = PositionScaling.from_dict(read_manifest(args.data)["scaling"])
    report = diagnose(samples, args.out, args.bins, args.k, scaling)
    log(f"alignment variability {report['alignment_variability']:.4f}, shape variability {report['shape_variability']:.4f}")
    return [Path(args.out) / "variability.json"] + [Path(args.out) / f"occupancy_{a}.csv" for a in "xyz"]


def cmd_compare(args) -> list[Path]:
    from equiflow.diagnostics import compare_runs

    report = compare_runs(args.a, args.b, args.target, args.pairing)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(report, indent=2))
    log(f"{args.target}: median A {report['median_a']:.3f}% vs B {report['median_b']:.3f}%, Wilcoxon p = {report['p_value']:.4g} (n={report['n_pairs']})")
    return [Path(args.out)]


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "equi-check": cmd_equi_check,
    "sweep-rotation": cmd_sweep_rotation,
    "diagnose": cmd_diagnose,
    "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="equiflow", description="Equivariant flow surrogates on toy CFD data.")
    p.add_argument("--workers", type=int, default=1, help="threads for internal worker pools (default 1, deterministic)")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    def seed_arg(sp):
        sp.add_argument("--seed", type=int, default=None, help=f"random seed (falls back to ${SEED_ENV}, then 0)")

    g = sub.add_parser("gen-data", help="generate a toy dataset", description="Generate a toy CFD dataset as NSF files.")
    g.add_argument("--kind", choices=["aero", "hemo"], required=True, help="external flow past a sphere or pipe flow")
    g.add_argument("--count", type=int, required=True, help="number of training samples")
    g.add_argument("--eval-count", type=int, default=None, help="samples in each of val and test (default count // 5, at least 1)")
    g.add_argument("--alignment", default="canonical", help="canonical, haar, bounded:X or per_axis_bounded:X")
    g.add_argument("--n-surface", type=int, default=512, help="surface points per sample")
    g.add_argument("--n-volume", type=int, default=2048, help="volume points per sample")
    g.add_argument("--out", required=True, help="output dataset directory")
    seed_arg(g)

    def train_args(sp):
        sp.add_argument("--model", choices=["abgatr", "baseline"], default="abgatr", help="model family")
        sp.add_argument("--config", default=None, help="JSON file with optional 'train' and 'model' sections")
        sp.add_argument("--data", required=True, help="dataset directory written by gen-data")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--fast", action="store_true", help="small toy model (fewer channels and shared blocks)")
        sp.add_argument("--epochs", type=int, default=None, help="override training epochs")
        sp.add_argument("--lr", type=float, default=None, help="override peak learning rate")
        sp.add_argument("--augmentation", default=None, help="none, haar, bounded:X or per_axis_bounded:X")
        sp.add_argument("--precision", choices=["single", "double"], default=None, help="floating-point precision")
        seed_arg(sp)

    t = sub.add_parser("train", help="train a model", description="Train a model; writes checkpoint.nsf and metrics.json.")
    train_args(t)

    e = sub.add_parser("eval", help="evaluate a checkpoint", description="Score a checkpoint on a dataset split.")
    e.add_argument("--checkpoint", required=True, help="checkpoint.nsf written by train")
    e.add_argument("--data", required=True, help="dataset directory")
    e.add_argument("--split", default="test", help="split to evaluate (default test)")
    e.add_argument("--rotation", default="none", help="test-time rotation: none, haar, bounded:X or per_axis_bounded:X")
    e.add_argument("--out", required=True, help="output JSON path")
    seed_arg(e)

    q = sub.add_parser("equi-check", help="measure equivariance", description="Measure f(gX) against g f(X) over random rigid motions.")
    q.add_argument("--model", choices=["abgatr", "baseline"], default="abgatr", help="model family (ignored with --checkpoint)")
    q.add_argument("--checkpoint", default=None, help="checkpoint to test instead of a random initialisation")
    q.add_argument("--precision", choices=["single", "double"], default="double", help="floating-point precision")
    q.add_argument("--tolerance", type=float, default=1e-9, help="maximum allowed relative deviation")
    q.add_argument("--motions", type=int, default=20, help="number of random motions (includes reflections and translations)")
    q.add_argument("--kind", choices=["aero", "hemo"], default="aero", help="toy sample family to test on")
    q.add_argument("--out", default=None, help="optional JSON report path")
    seed_arg(q)

    s = sub.add_parser("sweep-rotation", help="train/test rotation-rate sweep", description="Train per training rotation rate and test on every test rate; writes heatmap.csv.")
    train_args(s)
    s.add_argument("--train-degrees", default="0,5,15,30,60,90,180", help="comma-separated training rotation bounds")
    s.add_argument("--test-degrees", default="0,5,15,30,60,90,180", help="comma-separated test rotation bounds")
    s.add_argument("--seeds", default=None, help="comma-separated seeds; each cell is the median over seeds")
    s.set_defaults(model="baseline")

    d = sub.add_parser("diagnose", help="dataset diagnostics", description="Alignment and shape variability plus occupancy histograms.")
    d.add_argument("--data", required=True, help="dataset directory")
    d.add_argument("--out", required=True, help="output directory")
    d.add_argument("--bins", type=int, default=50, help="histogram bins over [0, 1000]")
    d.add_argument("--k", type=int, default=32, help="number of non-trivial Laplace-Beltrami eigenvalues")

    c = sub.add_parser("compare", help="Wilcoxon comparison of two run sets", description="Compare two sets of metrics.json files with a Wilcoxon signed-rank test.")
    c.add_argument("--a", nargs="+", required=True, help="metrics.json files of the first model")
    c.add_argument("--b", nargs="+", required=True, help="metrics.json files of the second model")
    c.add_argument("--target", choices=["surface", "volume"], default="volume", help="which field to compare")
    c.add_argument("--pairing", choices=["sample", "run"], default="sample", help="pair per test sample (cross-seed median) or per run")
    c.add_argument("--out", required=True, help="output JSON path")
    return p


def _manifest_path(args) -> Path | None:
    """Directory outputs hold ``run_manifest.json``; a file output gets ``<file>.manifest.json``."""
    out = getattr(args, "out", None)
    if out is None:
        return None
    out = Path(out)
    if args.command in ("gen-data", "train", "sweep-rotation", "diagnose"):
        return out / MANIFEST_NAME
    return out.with_name(out.name + ".manifest.json")


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    manifest = None
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        if args.command is None:
            raise UnknownSubcommand("no command given; see equiflow --help")
        _set_workers(args.workers)
        manifest_path = _manifest_path(args)
        if manifest_path is not None:
            config = {k: v for k, v in vars(args).items()}
            manifest = RunManifest(manifest_path, args.command, argv, config, [resolve_seed(getattr(args, "seed", None))])
        outputs = COMMANDS[args.command](args)
        if manifest:
            manifest.finish("ok", outputs)
        return 0
    except ValidationError as exc:
        log(f"error: {exc}")
        if manifest:
            manifest.finish(f"invalid: {exc}")
        return 1
    except (EquiflowError, Exception) as exc:  # noqa: BLE001
        log(f"runtime error: {type(exc).__name__}: {exc}")
        if manifest:
            manifest.finish(f"failed: {type(exc).__name__}: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
