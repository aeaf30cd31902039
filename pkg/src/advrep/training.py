"""Training regimes: plain auto-encoder, adversarial speaker-invariant,
PD-discriminative and fusion, plus the downstream classifier.

All regimes share one loop: mini-batches of the full training set drive the
reconstruction step, and regimes with a speaker-ID adversary pair every such
batch with one batch of the speaker-ID stream (neurotypical utterances only),
cycling that stream when it runs out. Per pair:

1. descend E over theta_e, theta_d (and theta_pc) with theta_id frozen;
2. descend L_id over theta_id alone, on codes from the now-frozen encoder.

Step 2 runs once per pair by default; ``adv_steps`` > 1 adds further step-2
updates on the next speaker-ID batches, and ``adv_lr_scale`` scales its rate.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .models import AutoEncoder, EncoderSpec, Head, HeadSpec
from .numerics import ops
from .numerics.checkpoint import Checkpoint, save_checkpoint
from .numerics.ops import ConfigurationError
from .numerics.optim import SgdState, sgd_step
from .numerics.tensor import Tensor, no_grad
from .rng import generator_state, substream

log = logging.getLogger(__name__)

REGIMES = ("baseline", "adversarial", "discriminative", "fusion")
GRID = (0.01, 0.03, 0.05, 0.07)


@dataclass(frozen=True)
class TrainConfig:
    regime: str = "baseline"
    lam: float = 0.01  # weight of the adversarial speaker-ID loss
    alpha: float = 0.01  # weight of the PD classification loss
    batch_size: int = 128
    lr0: float = 0.02
    lr_halve_patience: int = 5
    lr_floor: float = 0.002
    max_epochs: int = 100
    seed: int = 0
    adv_steps: int = 1  # speaker-ID updates (step 2) per encoder update (step 1)
    adv_lr_scale: float = 1.0  # step-2 learning rate relative to the shared rate

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigurationError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        for name in ("lam", "alpha"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1), got {v}")
        if self.regime == "fusion" and self.alpha + self.lam >= 1.0:
            raise ConfigurationError(
                f"fusion needs alpha + lambda < 1 so the reconstruction weight stays positive "
                f"(alpha={self.alpha}, lambda={self.lam})"
            )
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be at least 2 (batch-norm needs two samples)")
        if not self.lr0 > 0 or not self.lr_floor > 0:
            raise ConfigurationError("learning rates must be positive")
        if self.adv_steps < 1 or not self.adv_lr_scale > 0:
            raise ConfigurationError("adv_steps must be >= 1 and adv_lr_scale positive")
        if self.lr_halve_patience < 1 or self.max_epochs < 0:
            raise ConfigurationError("patience must be >= 1 and max_epochs >= 0")

    @property
    def uses_id(self) -> bool:
        return self.regime in ("adversarial", "fusion")

    @property
    def uses_pc(self) -> bool:
        return self.regime in ("discriminative", "fusion")

    def weights(self) -> dict[str, float]:
        """Coefficient of each loss component in the regime's objective E."""
        if self.regime == "baseline":
            return {"ae": 1.0}
        if self.regime == "adversarial":
            return {"ae": 1.0 - self.lam, "id": -self.lam}
        if self.regime == "discriminative":
            return {"ae": 1.0 - self.alpha, "pc": self.alpha}
        return {"ae": 1.0 - self.alpha - self.lam, "pc": self.alpha, "id": -self.lam}

    def monitor_weights(self) -> dict[str, float]:
        """Dev-set monitor: the objective without the adversarial term."""
        return {k: v for k, v in self.weights().items() if k != "id"}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"unknown training option(s): {', '.join(unknown)}")
        return cls(**d)


def composite_loss(components: dict, config: TrainConfig):
    """Weighted objective E from raw components (Tensors or plain numbers).

    ``components`` maps "ae", "id" and "pc" to L_ae, L_id and L_pc; the ones
    the regime needs must be present.
    """
    weights = config.weights()
    missing = sorted(k for k in weights if k not in components)
    if missing:
        raise ConfigurationError(f"regime {config.regime} needs loss component(s) {missing}")
    total = None
    for key in ("ae", "pc", "id"):
        if key not in weights:
            continue
        c, w = components[key], weights[key]
        term = ops.scale(c, w) if isinstance(c, Tensor) else w * c
        total = term if total is None else total + term
    return total


# ---------------------------------------------------------------------------
# learning-rate schedule


class LrSchedule:
    """Halve the rate after ``patience`` epochs without a new dev minimum.

    Epoch 0 is the evaluation before any update; it sets the first reference
    minimum. The patience counter resets on improvement and on halving.
    Training stops once the rate falls below ``floor`` or ``max_epochs`` is
    reached.
    """

    def __init__(self, lr0: float = 0.02, patience: int = 5, floor: float = 0.002, max_epochs: int = 100):
        self.lr = lr0
        self.patience = patience
        self.floor = floor
        self.max_epochs = max_epochs
        self.best = math.inf
        self.stale = 0

    @classmethod
    def from_config(cls, config: TrainConfig) -> "LrSchedule":
        return cls(config.lr0, config.lr_halve_patience, config.lr_floor, config.max_epochs)

    def update(self, epoch: int, monitor: float) -> tuple[float, bool, bool]:
        """Feed the monitor of ``epoch``; returns (lr for next epoch, improved, stop)."""
        improved = monitor < self.best
        if improved:
            self.best = monitor
            self.stale = 0
        else:
            self.stale += 1
            if self.stale >= self.patience:
                self.lr /= 2.0
                self.stale = 0
        stop = epoch >= self.max_epochs or self.lr < self.floor
        return self.lr, improved, stop


# ---------------------------------------------------------------------------
# data and per-step updates


@dataclass
class TrainData:
    """Arrays for one training run; chunks are (N, 126, 125) float32."""

    x: np.ndarray
    pd: np.ndarray
    dev_x: np.ndarray
    dev_pd: np.ndarray
    id_x: np.ndarray | None = None
    id_y: np.ndarray | None = None  # speaker index in [0, n_speakers)
    n_speakers: int = 0

    def __post_init__(self):
        if len(self.x) != len(self.pd) or len(self.dev_x) != len(self.dev_pd):
            raise ValueError("chunk and label counts differ")
        if self.id_x is not None:
            if self.id_y is None or len(self.id_x) != len(self.id_y):
                raise ValueError("speaker-ID chunks need one speaker label each")
            if self.n_speakers <= 0:
                self.n_speakers = int(np.max(self.id_y)) + 1 if len(self.id_y) else 0


@dataclass
class Rngs:
    shuffle: np.random.Generator
    shuffle_id: np.random.Generator
    dropout_id: np.random.Generator
    dropout_pc: np.random.Generator

    @classmethod
    def for_seed(cls, seed: int) -> "Rngs":
        return cls(
            substream(seed, "shuffle"),
            substream(seed, "shuffle_id"),
            substream(seed, "dropout", 0),
            substream(seed, "dropout", 1),
        )

    def state(self) -> dict:
        return {k: generator_state(getattr(self, k)) for k in ("shuffle", "shuffle_id", "dropout_id", "dropout_pc")}


def _batch(x: np.ndarray, idx: np.ndarray) -> Tensor:
    b = x[idx]
    return Tensor(b.reshape(len(idx), 1, *b.shape[1:]))


def batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled index batches covering ``range(n)``; the last one may be short."""
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


class _Cycle:
    """Endless batches over a stream, reshuffled at every pass."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n, self.batch_size, self.rng = n, batch_size, rng
        self.queue: list[np.ndarray] = []

    def next(self) -> np.ndarray:
        if not self.queue:
            self.queue = batches(self.n, self.batch_size, self.rng)
            # a lone leftover sample cannot be batch-normalised; fold it into the previous batch
            if len(self.queue) > 1 and len(self.queue[-1]) < 2:
                tail = self.queue.pop()
                self.queue[-1] = np.concatenate([self.queue[-1], tail])
        return self.queue.pop(0)


def _accuracy(logits: Tensor, y: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits.data, axis=1) == y))


def step_encoder(model: AutoEncoder, config: TrainConfig, lr: float, xb: Tensor, pdb: np.ndarray | None,
                 id_xb: Tensor | None, id_yb: np.ndarray | None, rngs: Rngs) -> dict[str, float]:
    """Step 1: descend E over theta_e, theta_d (and theta_pc); theta_id is frozen."""
    z = model.encode(xb, training=True)
    comps = {"ae": ops.mse_loss(model.decode(z, training=True), xb)}
    if config.uses_pc:
        comps["pc"] = ops.softmax_cross_entropy(model.pc_head(z, True, rngs.dropout_pc), pdb)
    if config.uses_id:
        # the speaker-ID stream must not move the running statistics
        z_id = model.encode(id_xb, training=True, track_stats=False)
        comps["id"] = ops.softmax_cross_entropy(model.id_head(z_id, True, rngs.dropout_id), id_yb)
    e = composite_loss(comps, config)
    e.backward()
    groups = ("theta_e", "theta_d", "theta_pc") if config.uses_pc else ("theta_e", "theta_d")
    sgd_step(model.paramsets(), SgdState(lr).only(*groups))
    out = {k: float(v.item()) for k, v in comps.items()}
    out["E"] = float(e.item())
    return out


def step_adversary(model: AutoEncoder, lr: float, id_xb: Tensor, id_yb: np.ndarray, rngs: Rngs) -> tuple[float, float]:
    """Step 2: descend L_id over theta_id alone; returns (L_id, batch accuracy)."""
    with no_grad():
        z_id = model.encode(id_xb, training=True, track_stats=False)
    logits = model.id_head(Tensor(z_id.data), True, rngs.dropout_id)
    loss = ops.softmax_cross_entropy(logits, id_yb)
    loss.backward()
    sgd_step(model.paramsets(), SgdState(lr).only("theta_id"))
    return float(loss.item()), _accuracy(logits, id_yb)


# ---------------------------------------------------------------------------
# epochs


@dataclass
class EpochReport:
    epoch: int
    l_ae: float = float("nan")
    l_id: float = float("nan")
    l_pc: float = float("nan")
    e: float = float("nan")
    dev_monitor: float = float("nan")
    lr: float = float("nan")
    stop: bool = False
    id_acc: float = float("nan")  # adversary accuracy on its own step-2 batches


def _run_epoch(model: AutoEncoder, data: TrainData, config: TrainConfig, lr: float, rngs: Rngs,
               epoch: int, id_cycle: _Cycle | None = None) -> EpochReport:
    if config.uses_id:
        if data.id_x is None or len(data.id_x) == 0:
            raise ConfigurationError(f"regime {config.regime} needs a non-empty speaker-ID stream")
        if id_cycle is None:
            id_cycle = _Cycle(len(data.id_x), config.batch_size, rngs.shuffle_id)
    sums: dict[str, float] = {}
    n_seen = 0
    id_losses, id_accs = [], []
    batch_list = batches(len(data.x), config.batch_size, rngs.shuffle)
    if len(batch_list) > 1 and len(batch_list[-1]) < 2:
        tail = batch_list.pop()
        batch_list[-1] = np.concatenate([batch_list[-1], tail])
    for idx in batch_list:
        xb = _batch(data.x, idx)
        id_xb = id_yb = None
        if config.uses_id:
            j = id_cycle.next()
            id_xb, id_yb = _batch(data.id_x, j), data.id_y[j]
        comps = step_encoder(model, config, lr, xb, data.pd[idx], id_xb, id_yb, rngs)
        for k, v in comps.items():
            sums[k] = sums.get(k, 0.0) + v * len(idx)
        n_seen += len(idx)
        if config.uses_id:
            for k in range(config.adv_steps):
                if k:
                    j = id_cycle.next()
                    id_xb, id_yb = _batch(data.id_x, j), data.id_y[j]
                l_id, acc = step_adversary(model, lr * config.adv_lr_scale, id_xb, id_yb, rngs)
                id_losses.append(l_id)
                id_accs.append(acc)
    mean = {k: v / max(n_seen, 1) for k, v in sums.items()}
    return EpochReport(
        epoch=epoch,
        l_ae=mean.get("ae", float("nan")),
        l_id=mean.get("id", float("nan")),
        l_pc=mean.get("pc", float("nan")),
        e=mean.get("E", float("nan")),
        lr=lr,
        id_acc=float(np.mean(id_accs)) if id_accs else float("nan"),
    )


def baseline_epoch(model, data, config, lr, rngs, epoch=1) -> EpochReport:
    return _run_epoch(model, data, config, lr, rngs, epoch)


def adversarial_epoch(model, data, config, lr, rngs, epoch=1, id_cycle=None) -> EpochReport:
    """Alternating min-max over paired mini-batches (reconstruction vs speaker ID)."""
    if config.regime != "adversarial":
        raise ConfigurationError("adversarial_epoch needs an adversarial config")
    return _run_epoch(model, data, config, lr, rngs, epoch, id_cycle)


def joint_epoch(model, data, config, lr, rngs, epoch=1) -> EpochReport:
    """One SGD step per batch on (1-alpha) L_ae + alpha L_pc."""
    if config.regime != "discriminative":
        raise ConfigurationError("joint_epoch needs a discriminative config")
    return _run_epoch(model, data, config, lr, rngs, epoch)


def fusion_epoch(model, data, config, lr, rngs, epoch=1, id_cycle=None) -> EpochReport:
    """Alternating procedure with theta_pc joining the encoder step."""
    if config.regime != "fusion":
        raise ConfigurationError("fusion_epoch needs a fusion config")
    return _run_epoch(model, data, config, lr, rngs, epoch, id_cycle)


# ---------------------------------------------------------------------------
# evaluation helpers


def embed(model: AutoEncoder, x: np.ndarray, batch_size: int = 128) -> np.ndarray:
    """Eval-mode bottleneck codes of chunks ``x``; parameters are not touched."""
    out = np.zeros((len(x), model.encoder.spec.bottleneck), dtype=np.float32)
    with no_grad():
        for i in range(0, len(x), batch_size):
            idx = np.arange(i, min(i + batch_size, len(x)))
            out[idx] = model.encode(_batch(x, idx), training=False).data
    return out


def dev_losses(model: AutoEncoder, data: TrainData, batch_size: int = 128) -> dict[str, float]:
    """Chunk-weighted mean dev L_ae (and L_pc when a PD head exists), eval mode."""
    tot = {"ae": 0.0}
    if model.pc_head is not None:
        tot["pc"] = 0.0
    n = len(data.dev_x)
    with no_grad():
        for i in range(0, n, batch_size):
            idx = np.arange(i, min(i + batch_size, n))
            xb = _batch(data.dev_x, idx)
            z = model.encode(xb, training=False)
            tot["ae"] += float(ops.mse_loss(model.decode(z, training=False), xb).item()) * len(idx)
            if model.pc_head is not None:
                tot["pc"] += float(ops.softmax_cross_entropy(model.pc_head(z, False), data.dev_pd[idx]).item()) * len(idx)
    return {k: v / max(n, 1) for k, v in tot.items()}


def dev_monitor(model: AutoEncoder, data: TrainData, config: TrainConfig) -> tuple[float, dict]:
    losses = dev_losses(model, data, config.batch_size)
    w = config.monitor_weights()
    return float(sum(w[k] * losses[k] for k in w)), losses


# ---------------------------------------------------------------------------
# full runs


@dataclass
class TrainResult:
    model: AutoEncoder
    reports: list[EpochReport]
    best_epoch: int
    best: Checkpoint
    final: Checkpoint
    history: list[dict] = field(default_factory=list)


METRIC_COLUMNS = ("epoch", "L_ae", "L_id", "L_pc", "E", "dev_monitor", "lr")


def _fmt(v: float) -> str:
    return "nan" if v != v else repr(float(v))


def build_model(config: TrainConfig, n_speakers: int = 0, spec: EncoderSpec = EncoderSpec()) -> AutoEncoder:
    """Fresh model for ``config``; theta_e and theta_d do not depend on the regime."""
    return AutoEncoder.build(
        substream(config.seed, "init"),
        n_speakers=n_speakers if config.uses_id else 0,
        with_pc=config.uses_pc,
        spec=spec,
    )


def train(config: TrainConfig, data: TrainData, run_dir=None, spec: EncoderSpec = EncoderSpec(),
          model: AutoEncoder | None = None) -> TrainResult:
    """Train one model to early stopping and reload the best-monitor state.

    A non-finite dev monitor ends the run early; the best finite state is kept.
    """
    if config.uses_id and (data.id_x is None or len(data.id_x) == 0):
        raise ConfigurationError(f"regime {config.regime} needs a non-empty speaker-ID stream")
    if model is None:
        model = build_model(config, data.n_speakers, spec)
    rngs = Rngs.for_seed(config.seed)
    sched = LrSchedule.from_config(config)
    id_cycle = _Cycle(len(data.id_x), config.batch_size, rngs.shuffle_id) if config.uses_id else None

    meta = {"config": config.to_dict()}
    reports: list[EpochReport] = []
    monitor, _ = dev_monitor(model, data, config)
    lr, _, stop = sched.update(0, monitor)
    reports.append(EpochReport(epoch=0, dev_monitor=monitor, lr=config.lr0, stop=stop))
    best_epoch = 0
    best = Checkpoint.from_paramsets(model.paramsets(), meta=dict(meta, epoch=0))
    epoch = 0
    while not stop:
        epoch += 1
        rep = _run_epoch(model, data, config, lr, rngs, epoch, id_cycle)
        monitor, _ = dev_monitor(model, data, config)
        rep.dev_monitor = monitor
        lr, improved, stop = sched.update(epoch, monitor)
        if not math.isfinite(monitor):
            # diverged (e.g. the adversarial term ran away); keep the best state so far
            log.warning("epoch %d: non-finite dev monitor, stopping", epoch)
            stop = True
        rep.stop = stop
        reports.append(rep)
        log.info("epoch %d lr %.5g L_ae %.4f dev %.4f", epoch, rep.lr, rep.l_ae, monitor)
        if improved:
            best_epoch = epoch
            best = Checkpoint.from_paramsets(model.paramsets(), meta=dict(meta, epoch=epoch))
    final = Checkpoint.from_paramsets(
        model.paramsets(), rng=rngs.state(), optimizer={"lr": lr, "stale": sched.stale, "best": sched.best},
        meta=dict(meta, epoch=epoch),
    )
    best.apply(model.paramsets())
    if run_dir is not None:
        write_run(run_dir, config, reports, best, final)
    return TrainResult(model, reports, best_epoch, best, final)


def write_run(run_dir, config: TrainConfig, reports: list[EpochReport], best: Checkpoint, final: Checkpoint) -> Path:
    out = Path(run_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=1, sort_keys=True) + "\n")
    lines = ["\t".join(METRIC_COLUMNS)]
    for r in reports:
        lines.append("\t".join([str(r.epoch), _fmt(r.l_ae), _fmt(r.l_id), _fmt(r.l_pc), _fmt(r.e),
                                _fmt(r.dev_monitor), _fmt(r.lr)]))
    (out / "metrics.tsv").write_text("\n".join(lines) + "\n")
    save_checkpoint(out / "best.ckpt", best)
    save_checkpoint(out / "final.ckpt", final)
    return out


# ---------------------------------------------------------------------------
# classifiers on frozen codes


@dataclass
class HeadResult:
    head: Head
    best_epoch: int
    dev_losses: list[float]
    train_accuracy: float


def fit_head(z_train: np.ndarray, y_train: np.ndarray, z_dev: np.ndarray, y_dev: np.ndarray, n_classes: int,
             config: TrainConfig, stream: str = "downstream", group: str = "theta_pc") -> HeadResult:
    """Train a dropout -> 64 -> K head on fixed codes with the shared schedule.

    The dev cross-entropy is the monitor; the best-monitor parameters are
    returned, not the last ones.
    """
    rng_init = substream(config.seed, stream, 0)
    rng_shuffle = substream(config.seed, stream, 1)
    rng_drop = substream(config.seed, stream, 2)
    head = Head(rng_init, HeadSpec(n_classes, inputs=z_train.shape[1]), group)
    sched = LrSchedule.from_config(config)

    def dev_loss() -> float:
        with no_grad():
            return float(ops.softmax_cross_entropy(head(Tensor(z_dev), False), y_dev).item())

    losses = [dev_loss()]
    lr, _, stop = sched.update(0, losses[0])
    best_epoch, best = 0, head.params.snapshot()
    epoch = 0
    while not stop:
        epoch += 1
        for idx in batches(len(z_train), config.batch_size, rng_shuffle):
            loss = ops.softmax_cross_entropy(head(Tensor(z_train[idx]), True, rng_drop), y_train[idx])
            loss.backward()
            sgd_step([head.params], SgdState(lr))
        losses.append(dev_loss())
        lr, improved, stop = sched.update(epoch, losses[-1])
        stop = stop or not math.isfinite(losses[-1])
        if improved:
            best_epoch, best = epoch, head.params.snapshot()
    head.params.load(best)
    train_acc = float(np.mean(np.argmax(head.predict_proba(z_train), axis=1) == y_train))
    return HeadResult(head, best_epoch, losses, train_acc)


def train_downstream_classifier(model: AutoEncoder, train_x: np.ndarray, train_y: np.ndarray,
                                dev_x: np.ndarray, dev_y: np.ndarray, config: TrainConfig) -> HeadResult:
    """PD classifier on codes of the frozen encoder (no gradient reaches theta_e)."""
    z_train = embed(model, train_x, config.batch_size)
    z_dev = embed(model, dev_x, config.batch_size)
    return fit_head(z_train, train_y, z_dev, dev_y, 2, config, stream="downstream", group="theta_pc")
