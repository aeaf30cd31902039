"""Acceptance criteria 1-11.

Each test carries a ``criterion`` marker; the session ends with one
PASS/FAIL line per criterion (see conftest). Criteria 3, 5, 6, 7, 9 and 11
share the CI pipeline run, executed through the command-line entry point
with ``configs/ci.json``.
"""

import json
import math
import os
import time
from dataclasses import replace
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from advrep.cli import main
from advrep.dsp import FeatureStore, featurize_clip
from advrep.dsp.audio import load_clip, read_manifest
from advrep.evaluation import (
    FoldPlan,
    accuracy,
    audit_leakage,
    check_plan,
    check_probe_split,
    fold_data,
    make_folds,
    probe_split,
    roc_auc_binary,
    soft_vote,
)
from advrep.evaluation.protocol import train_data
from advrep.numerics import load_checkpoint
from advrep.numerics.tensor import no_grad
from advrep.numerics.verify import adjoint_error, run_suite
from advrep.training import (
    LrSchedule,
    Rngs,
    TrainConfig,
    TrainData,
    adversarial_epoch,
    baseline_epoch,
    build_model,
    train,
)
from advrep.training import _Cycle

CI_CONFIG = Path(os.environ.get("ADVREP_CI_CONFIG", Path(__file__).resolve().parents[1] / "configs" / "ci.json"))
SUPERVISED = ("adversarial", "discriminative", "fusion")


def run_pipeline(root: Path) -> Path:
    """synth -> featurize -> train -> evaluate; returns the results directory."""
    cfg = str(CI_CONFIG)
    assert main(["synth", "--config", cfg, "--out", str(root / "corpus")]) == 0
    assert main(["featurize", str(root / "corpus" / "manifest.tsv"), "--config", cfg,
                 "--out", str(root / "features" / "store.bin")]) == 0
    assert main(["train", str(root / "features" / "store.bin"), "--config", cfg, "--out", str(root / "runs")]) == 0
    assert main(["evaluate", str(root / "features" / "store.bin"), "--config", cfg,
                 "--runs", str(root / "runs"), "--out", str(root / "results")]) == 0
    return root


def cell_rows(results: Path) -> list[dict]:
    lines = (results / "results.tsv").read_text().splitlines()
    head = lines[0].split("\t")
    rows = []
    for line in lines[1:]:
        rec = dict(zip(head, line.split("\t")))
        if rec["fold"] == "all":
            continue
        rows.append({k: (v if k == "regime" else float(v)) for k, v in rec.items()})
    return rows


def regime_means(rows: list[dict], key: str) -> dict[str, float]:
    """Mean over seeds of the per-seed fold means, as in the results file."""
    out = {}
    for regime in dict.fromkeys(r["regime"] for r in rows):
        seeds = sorted({r["seed"] for r in rows if r["regime"] == regime})
        out[regime] = float(np.mean([np.mean([r[key] for r in rows if r["regime"] == regime and r["seed"] == s])
                                     for s in seeds]))
    return out


@pytest.fixture(scope="session")
def ci_run(tmp_path_factory):
    t0 = time.perf_counter()
    root = run_pipeline(tmp_path_factory.mktemp("ci_a"))
    return root, time.perf_counter() - t0


@pytest.fixture(scope="session")
def ci_store(ci_run):
    return FeatureStore.load(ci_run[0] / "features" / "store.bin")


@pytest.fixture(scope="session")
def ci_plan(ci_run):
    return FoldPlan.load(ci_run[0] / "runs" / "folds.json")


# -- 1, 2: numerics ---------------------------------------------------------


@pytest.mark.criterion(1, "gradient correctness (100 trials per layer type, 20 per full graph, < 1e-4, < 2 min)")
def test_gradient_suite(detail):
    t0 = time.perf_counter()
    rep = run_suite(layer_trials=100, graph_trials=20, adjoint_trials=0, seed=11)
    dt = time.perf_counter() - t0
    detail.append(f"max rel err {rep.max_error:.2e} over {sum(rep.trials.values())} checks, {dt:.0f} s")
    assert rep.max_error < 1e-4, rep.errors
    assert dt < 120


@pytest.mark.criterion(2, "conv / conv-transpose adjoint identity to 1e-10 (50 cases)")
def test_adjoint_identity(detail):
    rng = np.random.default_rng(2)
    worst = max(adjoint_error(rng) for _ in range(50))
    detail.append(f"max |<Ax,y>-<x,A'y>| {worst:.2e}")
    assert worst <= 1e-10


# -- 3: shapes ----------------------------------------------------------------


@pytest.mark.criterion(3, "shape contract on every chunk of the CI run (126x125 -> 128 -> 126x125)")
def test_shape_contract(ci_run, ci_store, detail):
    root = ci_run[0]
    n_chunks = 0
    for row in read_manifest(root / "corpus" / "manifest.tsv"):
        clip = load_clip(row.wav_path, row.speaker_id, row.label, row.utterance_id)
        chunks, _ = featurize_clip(clip)
        for c in chunks:
            assert c.values.shape == (126, 125)
        n_chunks += len(chunks)
    assert n_chunks == len(ci_store)
    assert ci_store.values.shape[1:] == (126, 125)

    config = TrainConfig()
    model = build_model(config)
    load_checkpoint(root / "runs" / "cells" / "baseline_f0_s0" / "best.ckpt").apply(model.paramsets())
    with no_grad():
        for i in range(0, len(ci_store), 64):
            x = ci_store.values[i : i + 64]
            z = model.encode(x, training=False)
            assert z.shape == (len(x), 128)
            y = model.decode(z, training=False)
            assert tuple(y.shape[-2:]) == (126, 125) and y.data.size == x.size
    detail.append(f"{n_chunks} chunks")


# -- 4: regime collapse -------------------------------------------------------


def _checksum(model) -> dict:
    out = {}
    for ps in (model.encoder.params, model.decoder.params):
        for name, t in ps.params.items():
            out[f"{ps.group}.{name}"] = t.data.tobytes()
        for name, b in ps.buffers.items():
            out[f"{ps.group}.{name}"] = b.tobytes()
    return out


@pytest.mark.criterion(4, "adversarial with lambda=0 is bit-identical to baseline for 5 epochs")
def test_lambda_zero_trajectory(ci_store, ci_plan, detail):
    full = train_data(ci_store, fold_data(ci_store, ci_plan, 0))
    data = TrainData(full.x[:96], full.pd[:96], full.dev_x[:16], full.dev_pd[:16],
                     full.id_x[:48], full.id_y[:48], full.n_speakers)
    base_cfg = TrainConfig(batch_size=16, seed=4)
    adv_cfg = replace(base_cfg, regime="adversarial", lam=0.0)
    base, adv = build_model(base_cfg), build_model(adv_cfg, data.n_speakers)
    r_base, r_adv = Rngs.for_seed(4), Rngs.for_seed(4)
    cycle = _Cycle(len(data.id_x), adv_cfg.batch_size, r_adv.shuffle_id)
    assert _checksum(base) == _checksum(adv)
    for epoch in range(1, 6):
        baseline_epoch(base, data, base_cfg, 0.02, r_base, epoch)
        adversarial_epoch(adv, data, adv_cfg, 0.02, r_adv, epoch, cycle)
        assert _checksum(base) == _checksum(adv), f"diverged at epoch {epoch}"
    detail.append("theta_e/theta_d identical after each of 5 epochs")


# -- 5: reconstruction learning ---------------------------------------------


@pytest.mark.criterion(5, "baseline reduces dev L_ae >= 3x within 30 epochs on the CI corpus, < 10 min")
def test_reconstruction_learning(ci_store, ci_plan, detail):
    cfg = json.loads(CI_CONFIG.read_text())["train"]
    config = TrainConfig(batch_size=cfg["batch_size"], max_epochs=30)
    t0 = time.perf_counter()
    res = train(config, train_data(ci_store, fold_data(ci_store, ci_plan, 0)))
    dt = time.perf_counter() - t0
    first, best = res.reports[0].dev_monitor, res.reports[res.best_epoch].dev_monitor
    detail.append(f"dev L_ae {first:.3f} -> {best:.3f} (x{first / best:.1f}) at epoch {res.best_epoch}, {dt:.0f} s")
    assert res.best_epoch <= 30
    assert first / best >= 3.0
    assert dt < 600


# -- 6, 7: directional findings ----------------------------------------------


@pytest.mark.criterion(6, "speaker-ID probe: adversarial < discriminative/fusion < baseline, adv <= 2x, base >= 3x chance")
def test_speaker_identity_suppression(ci_run, ci_store, ci_plan, detail):
    probe = regime_means(cell_rows(ci_run[0] / "results"), "probe_acc")
    chance = float(np.mean([100.0 / len(fold_data(ci_store, ci_plan, k).probe.speakers)
                            for k in range(ci_plan.n_folds)]))
    detail.append(", ".join(f"{r} {v:.1f}" for r, v in probe.items()) + f" (chance {chance:.1f})")
    middle = min(probe["discriminative"], probe["fusion"])
    assert probe["adversarial"] < middle
    assert max(probe["discriminative"], probe["fusion"]) < probe["baseline"]
    assert probe["adversarial"] <= 2 * chance
    assert probe["baseline"] >= 3 * chance


@pytest.mark.criterion(7, "PD accuracy of each supervised regime >= baseline + 3 points, baseline in 60-80%")
def test_classification_benefit(ci_run, detail):
    pd = regime_means(cell_rows(ci_run[0] / "results"), "pd_acc")
    detail.append(", ".join(f"{r} {v:.1f}" for r, v in pd.items()))
    assert 60.0 <= pd["baseline"] <= 80.0
    for r in SUPERVISED:
        assert pd[r] >= pd["baseline"] + 3.0, r


# -- 8: schedule --------------------------------------------------------------


@pytest.mark.criterion(8, "lr halves at epochs 5/10/15/20 on a flat monitor; never on an improving one")
def test_schedule_conformance(detail):
    sched = LrSchedule()
    lr, halvings, epoch, stop = 0.02, [], 0, False
    while not stop:
        new, _, stop = sched.update(epoch, 1.0)
        if new < lr:
            halvings.append(epoch)
        lr = new
        epoch += 1
    assert halvings == [5, 10, 15, 20]
    assert epoch - 1 == 20 and lr < 0.002

    sched = LrSchedule()
    lrs = []
    for e in range(101):
        lr, improved, stop = sched.update(e, 10.0 - 0.01 * e)
        lrs.append(lr)
        assert improved
        if stop:
            break
    assert e == 100 and set(lrs) == {0.02}
    detail.append(f"flat: halvings {halvings}, stop at epoch 20 (lr {0.02 / 16:g}); improving: stop at epoch 100")


# -- 9: protocol audit ------------------------------------------------------


@pytest.mark.criterion(9, "fold plans valid for 100 seeds, probe splits 60/20/20, no leakage in the CI run")
def test_protocol_audit(ci_run, ci_store, ci_plan, detail):
    labels = {f"nt{i:02d}": "neurotypical" for i in range(10)}
    labels.update({f"pd{i:02d}": "pathological" for i in range(10)})
    for seed in range(100):
        for n_folds in (5, 10):
            check_plan(make_folds(labels, n_folds, seed))
    rng = np.random.default_rng(9)
    for seed in range(100):
        utts = {f"s{i}": [f"u{j}" for j in range(int(rng.integers(3, 15)))] for i in range(6)}
        split = probe_split(utts, seed)
        check_probe_split(split, utts)
    check_plan(ci_plan)
    n_audited = 0
    for cell in sorted((ci_run[0] / "runs" / "cells").iterdir()):
        rec = json.loads((cell / "cell.json").read_text())
        fd = fold_data(ci_store, ci_plan, rec["fold"])
        assert audit_leakage(ci_store, fd) == rec["chunks"]
        utts = {s: sorted(set(fd.probe.train[s]) | set(fd.probe.dev[s]) | set(fd.probe.test[s]))
                for s in fd.probe.speakers}
        check_probe_split(fd.probe, utts)
        n_audited += 1
    proto = json.loads(CI_CONFIG.read_text())["protocol"]
    assert n_audited == 4 * proto["n_folds"] * len(proto["seeds"])
    detail.append(f"200 plans, 100 probe splits, {n_audited} CI cells audited")


# -- 10: metric oracles -------------------------------------------------------


def pairwise_auc(scores, labels) -> Fraction:
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y != 1]
    total = Fraction(0)
    for p in pos:
        for n in neg:
            total += 1 if p > n else Fraction(1, 2) if p == n else 0
    return total / (len(pos) * len(neg))


@pytest.mark.criterion(10, "AUC equals the pairwise oracle on 1000 sets; accuracy and soft vote by hand")
def test_metric_oracles(detail):
    rng = np.random.default_rng(10)
    for _ in range(1000):
        n = int(rng.integers(2, 30))
        labels = rng.integers(0, 2, size=n)
        labels[0], labels[1] = 0, 1
        # coarse scores so ties are common
        scores = rng.integers(0, 6, size=n) / 5.0 if rng.random() < 0.5 else rng.random(n)
        assert roc_auc_binary(scores, labels) == float(pairwise_auc(scores, labels))
    assert accuracy([1, 0, 1, 1], [1, 1, 1, 0]) == 50.0
    assert accuracy([2, 2, 0], [2, 2, 0]) == 100.0
    assert soft_vote([[0.8, 0.2], [0.4, 0.6], [0.2, 0.8]]) == (1, pytest.approx(1.6 / 3))
    assert soft_vote([[0.8, 0.2], [0.4, 0.6], [0.3, 0.7]]) == (0, pytest.approx(0.5))  # tie -> lowest class
    assert soft_vote([[0.9, 0.1], [0.2, 0.8]]) == (0, pytest.approx(0.45))
    assert soft_vote([[0.5, 0.5]])[0] == 0
    detail.append("1000/1000 exact")


# -- 11: determinism ----------------------------------------------------------


@pytest.mark.criterion(11, "two full CI pipeline runs give byte-identical results files")
def test_pipeline_determinism(ci_run, tmp_path_factory, detail):
    a = ci_run[0]
    t0 = time.perf_counter()
    b = run_pipeline(tmp_path_factory.mktemp("ci_b"))
    detail.append(f"run times {ci_run[1]:.0f} s and {time.perf_counter() - t0:.0f} s")
    assert (a / "results" / "results.tsv").read_bytes() == (b / "results" / "results.tsv").read_bytes()
    assert (a / "runs" / "folds.json").read_bytes() == (b / "runs" / "folds.json").read_bytes()
    for cell in sorted((a / "runs" / "cells").iterdir()):
        assert (cell / "best.ckpt").read_bytes() == (b / "runs" / "cells" / cell.name / "best.ckpt").read_bytes()
    assert not math.isnan(float(cell_rows(a / "results")[0]["pd_acc"]))
