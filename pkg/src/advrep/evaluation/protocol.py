"""Cross-validated evaluation: train each (regime, fold, seed) cell, then score
PD classification on unseen speakers and speaker ID on unseen utterances."""

from __future__ import annotations

import json
import logging
import multiprocessing as mp
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from ..dsp.features import FeatureStore
from ..numerics.checkpoint import load_checkpoint
from ..numerics.ops import ConfigurationError
from ..training import GRID, REGIMES, TrainConfig, TrainData, build_model, embed, fit_head, train
from .folds import Fold, FoldPlan, ProbeSplit, make_folds, probe_split
from .metrics import accuracy, aggregate_seeds, format_mean_std, multiclass_auc, roc_auc_binary, soft_vote

log = logging.getLogger(__name__)

RESULT_COLUMNS = ("regime", "fold", "seed", "pd_acc", "pd_auc", "probe_acc", "probe_auc")
NEUROTYPICAL = "neurotypical"


class LeakageError(AssertionError):
    """A training step saw chunks of a test-fold speaker."""


@dataclass(frozen=True)
class Cell:
    regime: str
    fold: int
    seed: int

    @property
    def name(self) -> str:
        return f"{self.regime}_f{self.fold}_s{self.seed}"


@dataclass
class FoldData:
    """Index sets of one fold, all expressed as chunk indices into the store."""

    fold: Fold
    train: np.ndarray
    dev: np.ndarray
    test: np.ndarray
    probe: ProbeSplit
    probe_train: np.ndarray
    probe_dev: np.ndarray
    probe_test: np.ndarray
    probe_labels: np.ndarray  # per chunk of the store; -1 outside the probe speakers

    def roles(self) -> dict[str, np.ndarray]:
        return {
            "ae_train": self.train,
            "dev": self.dev,
            "id_stream": self.probe_train,
            "probe_train": self.probe_train,
            "probe_dev": self.probe_dev,
            "probe_test": self.probe_test,
        }


def fold_data(store: FeatureStore, plan: FoldPlan, k: int) -> FoldData:
    fold = plan.fold(k)
    by_name = {s: i for i, s in enumerate(store.speakers)}

    def chunks_of(speakers) -> np.ndarray:
        return np.flatnonzero(np.isin(store.speaker, [by_name[s] for s in speakers if s in by_name]))

    nt_train = sorted(s for s in fold.train if plan.labels[s] == NEUROTYPICAL and s in by_name)
    utts: dict[str, list[str]] = {}
    for s in nt_train:
        mask = store.speaker == by_name[s]
        utts[s] = sorted({store.utterances[u] for u in np.unique(store.utterance[mask])})
    split = probe_split(utts, seed=plan.seed * 1000 + k)
    utt_name = np.array(store.utterances, dtype=object)[store.utterance] if len(store) else np.array([], dtype=object)
    labels = np.full(len(store), -1, dtype=np.int64)
    parts = {}
    for part in ("train", "dev", "test"):
        wanted = {u for s in split.speakers for u in split.part(part)[s]}
        parts[part] = np.flatnonzero(np.isin(utt_name, sorted(wanted)))
    for ci, s in enumerate(split.speakers):
        labels[store.speaker == by_name[s]] = ci
    return FoldData(fold, chunks_of(fold.train), chunks_of(fold.dev), chunks_of(fold.test), split,
                    parts["train"], parts["dev"], parts["test"], labels)


def audit_leakage(store: FeatureStore, fd: FoldData) -> dict[str, int]:
    """Check by chunk provenance that no training role touches a test speaker.

    Returns the chunk count per role; raises :class:`LeakageError` otherwise.
    """
    test_spk = {store.speakers[i] for i in np.unique(store.speaker[fd.test])} | set(fd.fold.test)
    counts = {}
    for role, idx in fd.roles().items():
        seen = {store.speakers[i] for i in np.unique(store.speaker[idx])}
        bad = sorted(seen & test_spk)
        if bad:
            raise LeakageError(f"fold {fd.fold.index}: {role} uses test speaker(s) {bad}")
        counts[role] = int(len(idx))
    if set(np.unique(store.utterance[fd.probe_test])) & set(np.unique(store.utterance[fd.probe_train])):
        raise LeakageError(f"fold {fd.fold.index}: probe test utterances also used for training")
    return counts


def train_data(store: FeatureStore, fd: FoldData) -> TrainData:
    return TrainData(
        x=store.values[fd.train],
        pd=store.label[fd.train],
        dev_x=store.values[fd.dev],
        dev_pd=store.label[fd.dev],
        id_x=store.values[fd.probe_train],
        id_y=fd.probe_labels[fd.probe_train],
        n_speakers=len(fd.probe.speakers),
    )


def _speaker_level(store: FeatureStore, idx: np.ndarray, probs: np.ndarray) -> tuple[float, float]:
    """Soft-vote each speaker's chunks; returns (accuracy %, AUC)."""
    preds, scores, labels = [], [], []
    for s in np.unique(store.speaker[idx]):
        rows = store.speaker[idx] == s
        c, score = soft_vote(probs[rows])
        preds.append(c)
        scores.append(score)
        labels.append(int(store.label[idx][rows][0]))
    acc = accuracy(preds, labels)
    auc = roc_auc_binary(scores, labels) if len(set(labels)) == 2 else float("nan")
    return acc, auc


def standardize(z: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Scale codes per dimension by the mean and std of the reference rows."""
    mu = ref.mean(axis=0)
    sd = ref.std(axis=0)
    return ((z - mu) / np.where(sd > 1e-8, sd, 1.0)).astype(np.float32)


def score_cell(store: FeatureStore, fd: FoldData, model, config: TrainConfig) -> dict:
    """Downstream PD classifier and speaker-ID probe on the frozen encoder.

    ``config`` supplies the head schedule (batch size, rates, epochs, seed).
    Codes are standardised with the statistics of each head's training rows.
    """
    need = np.unique(np.concatenate([fd.train, fd.dev, fd.test, fd.probe_train, fd.probe_dev, fd.probe_test]))
    z = np.zeros((len(store), model.encoder.spec.bottleneck), dtype=np.float32)
    z[need] = embed(model, store.values[need])

    zp = standardize(z, z[fd.train])
    pd_head = fit_head(zp[fd.train], store.label[fd.train], zp[fd.dev], store.label[fd.dev], 2, config,
                       stream="downstream")
    pd_acc, pd_auc = _speaker_level(store, fd.test, pd_head.head.predict_proba(zp[fd.test]))
    dev_acc, _ = _speaker_level(store, fd.dev, pd_head.head.predict_proba(zp[fd.dev]))

    k = len(fd.probe.speakers)
    y = fd.probe_labels
    zi = standardize(z, z[fd.probe_train])
    probe = fit_head(zi[fd.probe_train], y[fd.probe_train], zi[fd.probe_dev], y[fd.probe_dev], k, config,
                     stream="probe", group="theta_id")
    p = probe.head.predict_proba(zi[fd.probe_test])
    probe_acc = accuracy(np.argmax(p, axis=1), y[fd.probe_test])
    probe_auc = multiclass_auc(p, y[fd.probe_test])
    return {
        "pd_acc": pd_acc,
        "pd_auc": pd_auc,
        "dev_pd_acc": dev_acc,
        "probe_acc": probe_acc,
        "probe_auc": probe_auc,
        "probe_chance": 100.0 / k,
    }


@dataclass(frozen=True)
class ProtocolConfig:
    n_folds: int = 10
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    plan_seed: int = 0
    regimes: tuple[str, ...] = REGIMES
    base: TrainConfig = TrainConfig()
    head: TrainConfig = TrainConfig()  # schedule of the downstream classifier and the probe

    def __post_init__(self):
        unknown = [r for r in self.regimes if r not in REGIMES]
        if unknown:
            raise ConfigurationError(f"unknown regime(s) {unknown}")
        if not self.seeds:
            raise ConfigurationError("at least one seed is needed")

    def train_config(self, cell: Cell) -> TrainConfig:
        return replace(self.base, regime=cell.regime, seed=cell.seed)

    def head_config(self, cell: Cell) -> TrainConfig:
        return replace(self.head, seed=cell.seed)

    def cells(self) -> list[Cell]:
        return [Cell(r, k, s) for r in self.regimes for k in range(self.n_folds) for s in self.seeds]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        d["regimes"] = list(self.regimes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ProtocolConfig":
        d = dict(d)
        base = TrainConfig.from_dict(d.pop("base", {}))
        head = TrainConfig.from_dict(d.pop("head", {}))
        return cls(base=base, head=head, seeds=tuple(d.pop("seeds", (0, 1, 2, 3, 4))),
                   regimes=tuple(d.pop("regimes", REGIMES)), **d)


def train_cell(store: FeatureStore, plan: FoldPlan, cell: Cell, config: TrainConfig, run_dir=None):
    fd = fold_data(store, plan, cell.fold)
    audit = audit_leakage(store, fd)
    result = train(config, train_data(store, fd), run_dir=run_dir)
    return fd, audit, result


def run_cell(store: FeatureStore, plan: FoldPlan, cell: Cell, config: TrainConfig, run_dir=None,
             head_config: TrainConfig | None = None) -> dict:
    """Train one cell and score it; the returned record is deterministic."""
    fd, audit, result = train_cell(store, plan, cell, config, run_dir)
    scores = score_cell(store, fd, result.model, head_config or replace(TrainConfig(), seed=cell.seed))
    rec = {"regime": cell.regime, "fold": cell.fold, "seed": cell.seed, **scores,
           "best_epoch": result.best_epoch, "epochs": result.reports[-1].epoch, "chunks": audit}
    if run_dir is not None:
        Path(run_dir, "cell.json").write_text(json.dumps(rec, indent=1, sort_keys=True) + "\n")
    return rec


def evaluate_cell(store: FeatureStore, plan: FoldPlan, cell: Cell, config: TrainConfig, ckpt_path,
                  head_config: TrainConfig | None = None) -> dict:
    """Score a cell from its saved best checkpoint."""
    path = Path(ckpt_path)
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint for fold {cell.fold} ({cell.name}): {path}")
    fd = fold_data(store, plan, cell.fold)
    audit = audit_leakage(store, fd)
    model = build_model(config, len(fd.probe.speakers))
    load_checkpoint(path).apply(model.paramsets())
    scores = score_cell(store, fd, model, head_config or replace(TrainConfig(), seed=cell.seed))
    return {"regime": cell.regime, "fold": cell.fold, "seed": cell.seed, **scores, "chunks": audit}


# worker state for process pools (fork start method shares the store read-only)
_WORKER: dict = {}


def _worker(args):
    cell, config, run_dir, head = args
    return run_cell(_WORKER["store"], _WORKER["plan"], cell, config, run_dir, head)


def run_cells(store: FeatureStore, plan: FoldPlan, jobs: list[tuple], n_workers: int = 1) -> list[dict]:
    """Run independent cells, optionally on a process pool; output is in job order.

    Each job is (cell, train config, run directory or None, head config).
    """
    if n_workers <= 1 or len(jobs) <= 1:
        return [run_cell(store, plan, *job) for job in jobs]
    _WORKER.update(store=store, plan=plan)
    ctx = mp.get_context("fork")
    with ctx.Pool(min(n_workers, len(jobs))) as pool:
        return pool.map(_worker, jobs, chunksize=1)


@dataclass
class ProtocolResult:
    plan: FoldPlan
    records: list[dict] = field(default_factory=list)

    def mean_by_regime(self, key: str) -> dict[str, float]:
        out = {}
        for r in dict.fromkeys(rec["regime"] for rec in self.records):
            per_seed = _per_seed(self.records, r, key)
            out[r] = aggregate_seeds(list(per_seed.values()))[0]
        return out


def _per_seed(records: list[dict], regime: str, key: str) -> dict[int, float]:
    vals: dict[int, list[float]] = {}
    for rec in records:
        if rec["regime"] == regime:
            vals.setdefault(rec["seed"], []).append(rec[key])
    return {s: float(np.nanmean(v)) for s, v in sorted(vals.items())}


def run_protocol(store: FeatureStore, pconfig: ProtocolConfig, out_dir=None, n_workers: int = 1) -> ProtocolResult:
    """All regimes x folds x seeds; writes plan, cell runs and results when ``out_dir`` is given."""
    plan = make_folds(store.speaker_labels, pconfig.n_folds, pconfig.plan_seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        plan.save(out / "folds.json")
    jobs = [(c, pconfig.train_config(c), out / "cells" / c.name if out is not None else None,
             pconfig.head_config(c)) for c in pconfig.cells()]
    records = run_cells(store, plan, jobs, n_workers)
    result = ProtocolResult(plan, records)
    if out is not None:
        write_results(out / "results.tsv", records)
    return result


def _cell_value(v: float) -> str:
    return "nan" if v != v else f"{v:.4f}"


def results_text(records: list[dict]) -> str:
    """Per-cell rows, then one aggregate row per regime (mean ± std over seeds)."""
    order = {r: i for i, r in enumerate(REGIMES)}
    recs = sorted(records, key=lambda r: (order[r["regime"]], r["fold"], r["seed"]))
    lines = ["\t".join(RESULT_COLUMNS)]
    for r in recs:
        lines.append("\t".join([r["regime"], str(r["fold"]), str(r["seed"])]
                               + [_cell_value(r[k]) for k in RESULT_COLUMNS[3:]]))
    for regime in sorted({r["regime"] for r in recs}, key=order.get):
        row = [regime, "all", "mean±std"]
        for k in RESULT_COLUMNS[3:]:
            m, s = aggregate_seeds(list(_per_seed(recs, regime, k).values()))
            row.append(format_mean_std(m, s, 2 if k.endswith("acc") else 4))
        lines.append("\t".join(row))
    return "\n".join(lines) + "\n"


def write_results(path, records: list[dict]) -> Path:
    path = Path(path)
    path.write_text(results_text(records), encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# grid search


@dataclass
class GridReport:
    regime: str
    parameter: str
    rows: list[tuple[float, float, int]]  # (value, mean dev accuracy, cells)
    best: float
    tie: bool

    def text(self) -> str:
        lines = ["\t".join(("regime", "parameter", "value", "mean_dev_pd_acc", "cells"))]
        for v, m, n in self.rows:
            lines.append("\t".join((self.regime, self.parameter, f"{v:g}", f"{m:.4f}", str(n))))
        note = " (tie broken toward the smaller value)" if self.tie else ""
        lines.append(f"# best {self.parameter} = {self.best:g}{note}")
        return "\n".join(lines) + "\n"


def grid_parameter(regime: str) -> str:
    if regime == "adversarial":
        return "lam"
    if regime == "discriminative":
        return "alpha"
    if regime == "fusion":
        raise ConfigurationError(
            "fusion is not grid-searched: its lambda and alpha are taken from the adversarial and "
            "discriminative optima (0.01 each by default)"
        )
    raise ConfigurationError(f"grid search applies to adversarial or discriminative, not {regime!r}")


def grid_search(regime: str, score_fn, grid=GRID) -> GridReport:
    """Pick the grid value with the highest mean dev PD accuracy.

    ``score_fn(value)`` returns the dev accuracies of all (fold, seed) cells
    for that value. Ties go to the smaller value.
    """
    param = grid_parameter(regime)
    rows = []
    for v in sorted(grid):
        accs = list(score_fn(v))
        rows.append((float(v), float(np.mean(accs)), len(accs)))
    best_v, best_m = rows[0][0], rows[0][1]
    for v, m, _ in rows[1:]:
        if m > best_m:
            best_v, best_m = v, m
    tie = sum(1 for _, m, _ in rows if m == best_m) > 1
    return GridReport(regime, param, rows, best_v, tie)


def grid_search_protocol(store: FeatureStore, regime: str, pconfig: ProtocolConfig, out_dir=None,
                         n_workers: int = 1, grid=GRID) -> GridReport:
    param = grid_parameter(regime)
    plan = make_folds(store.speaker_labels, pconfig.n_folds, pconfig.plan_seed)
    out = Path(out_dir) if out_dir is not None else None

    def score(v: float) -> list[float]:
        jobs = []
        for k in range(pconfig.n_folds):
            for s in pconfig.seeds:
                cell = Cell(regime, k, s)
                cfg = replace(pconfig.base, regime=regime, seed=s, **{param: v})
                d = out / f"{param}_{v:g}" / cell.name if out is not None else None
                jobs.append((cell, cfg, d, pconfig.head_config(cell)))
        return [rec["dev_pd_acc"] for rec in run_cells(store, plan, jobs, n_workers)]

    report = grid_search(regime, score, grid)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "grid.tsv").write_text(report.text(), encoding="utf-8")
    return report
