"""Command-line entry point: ``advrep <command> [options]``.

Commands: synth, featurize, train, evaluate, gridsearch, gradcheck.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import __version__

log = logging.getLogger("advrep")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class InvariantError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------------------
# configuration


def load_config(path) -> dict:
    """Read the JSON config file (sections: synth, featurize, train, head, protocol)."""
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{p}: invalid JSON ({exc})") from exc
    if not isinstance(cfg, dict):
        raise UsageError(f"{p}: top level must be an object")
    unknown = sorted(set(cfg) - {"synth", "featurize", "train", "head", "protocol"})
    if unknown:
        raise UsageError(f"{p}: unknown section(s) {unknown}")
    return cfg


def config_hash(effective: dict) -> str:
    blob = json.dumps(effective, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def write_manifest(out_dir, command: str, effective: dict, inputs: list, started: float) -> Path:
    """RunManifest: everything that identifies the run; timestamps live only here."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": effective,
        "config_hash": config_hash(effective),
        "inputs": [str(i) for i in inputs],
        "output": str(out),
        "version": __version__,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
    }
    path = out / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def _train_overrides(args) -> dict:
    out = {}
    for flag, key in (("regime", "regime"), ("alpha", "alpha"), ("lam", "lam"), ("seed", "seed"),
                      ("max_epochs", "max_epochs"), ("batch_size", "batch_size")):
        v = getattr(args, flag, None)
        if v is not None:
            out[key] = v
    return out


def _protocol(cfg: dict, args):
    from .evaluation import ProtocolConfig
    from .training import TrainConfig

    section = dict(cfg.get("protocol", {}))
    if getattr(args, "folds", None) is not None:
        section["n_folds"] = args.folds
    if getattr(args, "seeds", None) is not None:
        section["seeds"] = list(range(args.seeds))
    train = dict(cfg.get("train", {}))
    train.update({k: v for k, v in _train_overrides(args).items() if k not in ("regime", "seed")})
    section["base"] = train
    section["head"] = dict(cfg.get("head", {}))
    if getattr(args, "regime", None) is not None:
        section["regimes"] = [args.regime]
    pc = ProtocolConfig.from_dict(section)
    TrainConfig.from_dict(train)  # validate early
    return pc


def _load_store(path):
    from .dsp import FeatureStore

    p = Path(path)
    if not p.exists():
        raise DataError(f"feature store not found: {p}")
    try:
        return FeatureStore.load(p)
    except (ValueError, OSError, KeyError) as exc:
        raise DataError(f"cannot read feature store {p}: {exc}") from exc


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args, cfg) -> int:
    from .synth import SynthSpec, generate_corpus

    section = dict(cfg.get("synth", {}))
    if args.seed is not None:
        section["seed"] = args.seed
    try:
        spec = SynthSpec.from_dict(section)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid synth spec: {exc}") from exc
    started = time.time()
    try:
        manifest = generate_corpus(spec, args.out)
    except OSError as exc:
        raise DataError(f"cannot write corpus to {args.out}: {exc}") from exc
    write_manifest(args.out, "synth", {"synth": spec.to_dict()}, [], started)
    print(manifest)
    return EXIT_OK


def cmd_featurize(args, cfg) -> int:
    from .dsp import VadConfig, featurize_manifest

    section = dict(cfg.get("featurize", {}))
    vad = VadConfig(**section.pop("vad", {}))
    normalization = args.normalization or section.pop("normalization", "chunk")
    if section:
        raise UsageError(f"unknown featurize option(s): {sorted(section)}")
    if not Path(args.manifest).exists():
        raise DataError(f"manifest not found: {args.manifest}")
    started = time.time()
    try:
        store, report = featurize_manifest(args.manifest, vad, normalization)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    if len(store) == 0:
        log.warning("no chunks produced from %s", args.manifest)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    store.save(out)
    effective = {"featurize": {"vad": vars(vad), "normalization": normalization}}
    write_manifest(out.parent, "featurize", effective, [args.manifest], started)
    for path, msg in report.errors:
        print(f"error: {path}: {msg}", file=sys.stderr)
    print(f"{report.n_chunks} chunks from {report.n_utterances} utterances "
          f"({len(report.errors)} unreadable, {len(report.skipped_silent)} silent, "
          f"{report.flagged_chunks} constant chunks)")
    if report.errors and args.strict:
        return EXIT_DATA
    return EXIT_OK


def _cells(pc, fold: int | None):
    from .evaluation import Cell

    folds = range(pc.n_folds) if fold is None else [fold]
    return [Cell(r, k, s) for r in pc.regimes for k in folds for s in pc.seeds]


def cmd_train(args, cfg) -> int:
    from .evaluation import make_folds
    from .evaluation.protocol import run_cells

    store = _load_store(args.features)
    pc = _protocol(cfg, args)
    if args.seed is not None:
        pc = replace(pc, seeds=(args.seed,))
    if args.fold is not None and not 0 <= args.fold < pc.n_folds:
        raise UsageError(f"--fold must lie in [0, {pc.n_folds})")
    started = time.time()
    out = Path(args.out)
    plan = make_folds(store.speaker_labels, pc.n_folds, pc.plan_seed)
    out.mkdir(parents=True, exist_ok=True)
    plan.save(out / "folds.json")
    jobs = [(c, pc.train_config(c), out / "cells" / c.name, pc.head_config(c)) for c in _cells(pc, args.fold)]
    for rec in run_cells(store, plan, jobs, args.jobs):
        print(f"{rec['regime']}_f{rec['fold']}_s{rec['seed']}\tpd_acc {rec['pd_acc']:.2f}\tprobe_acc {rec['probe_acc']:.2f}\tbest_epoch {rec['best_epoch']}")
    write_manifest(out, "train", pc.to_dict(), [args.features], started)
    return EXIT_OK


def cmd_evaluate(args, cfg) -> int:
    from .evaluation import FoldPlan, evaluate_cell, make_folds, write_results

    store = _load_store(args.features)
    pc = _protocol(cfg, args)
    runs = Path(args.runs)
    plan_path = runs / "folds.json"
    plan = FoldPlan.load(plan_path) if plan_path.exists() else make_folds(store.speaker_labels, pc.n_folds, pc.plan_seed)
    pc = replace(pc, n_folds=plan.n_folds)
    started = time.time()
    records = []
    for cell in _cells(pc, None):
        ckpt = runs / "cells" / cell.name / "best.ckpt"
        if not ckpt.exists():
            raise DataError(f"missing checkpoint for fold {cell.fold} ({cell.name}): {ckpt}")
        records.append(evaluate_cell(store, plan, cell, pc.train_config(cell), ckpt, pc.head_config(cell)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = write_results(out / "results.tsv", records)
    write_manifest(out, "evaluate", pc.to_dict(), [args.features, str(runs)], started)
    print(path.read_text(), end="")
    return EXIT_OK


def cmd_gridsearch(args, cfg) -> int:
    from .evaluation import grid_search_protocol
    from .evaluation.protocol import grid_parameter

    if args.regime is None:
        raise UsageError("gridsearch needs --regime adversarial or --regime discriminative")
    grid_parameter(args.regime)  # rejects fusion before any work
    store = _load_store(args.features)
    pc = _protocol(cfg, args)
    started = time.time()
    report = grid_search_protocol(store, args.regime, pc, args.out, n_workers=args.jobs)
    write_manifest(args.out, "gridsearch", dict(pc.to_dict(), grid_regime=args.regime), [args.features], started)
    print(report.text(), end="")
    return EXIT_OK


def cmd_gradcheck(args, cfg) -> int:
    from .numerics.verify import GRAD_TOLERANCE, run_suite

    rep = run_suite(layer_trials=args.trials, seed=args.seed or 0)
    for name, err in rep.errors.items():
        print(f"{name}\t{rep.trials[name]} trials\tmax rel error {err:.3e}")
    print(f"adjoint\t{rep.adjoint_trials} trials\tmax abs error {rep.adjoint_error:.3e}")
    if not rep.passed():
        raise InvariantError(f"gradient verification failed (max error {rep.max_error:.3e}, tolerance {GRAD_TOLERANCE})")
    print("all checks passed")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int, default=1, help="worker processes for independent runs")

    def training_flags(p):
        p.add_argument("--regime", choices=("baseline", "adversarial", "discriminative", "fusion"))
        p.add_argument("--alpha", type=float)
        p.add_argument("--lambda", dest="lam", type=float)
        p.add_argument("--folds", type=int)
        p.add_argument("--seeds", type=int, help="number of seeds (0..n-1)")
        p.add_argument("--max-epochs", type=int)
        p.add_argument("--batch-size", type=int)

    parser = _Parser(prog="advrep", description="Adversarial speaker-invariant representation learning.")
    parser.add_argument("--version", action="version", version=f"advrep {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("featurize", parents=[common], help="WAV manifest -> feature store")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--normalization", choices=("chunk", "utterance", "none"))
    p.add_argument("--strict", action="store_true", help="exit 2 when any file could not be read")
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", parents=[common], help="train (regime x fold x seed) cells")
    p.add_argument("features")
    p.add_argument("--out", required=True)
    p.add_argument("--fold", type=int, help="train only this fold")
    training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="score trained cells and write results.tsv")
    p.add_argument("features")
    p.add_argument("--runs", required=True, help="output directory of 'train'")
    p.add_argument("--out", required=True)
    training_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gridsearch", parents=[common], help="grid over lambda or alpha")
    p.add_argument("features")
    p.add_argument("--out", required=True)
    training_flags(p)
    p.set_defaults(func=cmd_gridsearch)

    p = sub.add_parser("gradcheck", parents=[common], help="run the gradient verification suite")
    p.add_argument("--trials", type=int, default=100)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("ADVREP_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    from .evaluation import LeakageError
    from .numerics.ops import ConfigurationError

    try:
        args = build_parser().parse_args(argv)
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"advrep: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigurationError as exc:
        print(f"advrep: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"advrep: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (InvariantError, LeakageError, AssertionError) as exc:
        print(f"advrep: invariant violated: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except ValueError as exc:
        print(f"advrep: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # pragma: no cover - last resort
        log.debug("unhandled exception", exc_info=True)
        print(f"advrep: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
