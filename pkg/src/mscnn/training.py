"""RMSProp training, loss, LR schedule and the validation protocols."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import SampleSet, augment_image, sample_rng, split_train_val
from .layers import Linear, log_softmax
from .model import ConfigError, Network
from .tensor import Tape, Tensor, backward, mul, no_grad, sum_

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    initial_lr: float = 0.001
    decay: float = 0.993
    lr_floor: float = 0.00003
    dropout: float = 0.5
    batch_size: int = 500
    max_epochs: int = 500
    beta: float = 0.9
    eps: float = 1e-8
    seed: int = 0
    augment: str = "none"
    # stop once train loss has improved by less than this for `patience` epochs
    converge_tol: float = 1e-5
    converge_patience: int = 20

    def validate(self) -> None:
        for name in ("initial_lr", "lr_floor", "batch_size", "max_epochs", "eps"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0 < self.decay < 1 or not 0 < self.beta < 1:
            raise ConfigError("decay and beta must lie in (0, 1)")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")


@dataclass
class OptimState:
    """Moving averages of squared gradients, keyed like the parameters."""

    beta: float = 0.9
    eps: float = 1e-8
    mean_square: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def crossentropy(logits: Tensor, labels) -> Tensor:
    """Batch mean of -log softmax(logits)[label]."""
    labels = np.asarray(labels, dtype=np.int64)
    b, k = logits.shape
    if labels.shape != (b,):
        raise ValueError(f"expected {b} labels, got shape {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError(f"labels must lie in 0..{k - 1}")
    onehot = np.zeros((b, k), dtype=logits.dtype)
    onehot[np.arange(b), labels] = -1.0 / b
    return sum_(mul(log_softmax(logits), onehot))


def rmsprop_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimState, lr: float) -> bool:
    """In-place update; returns False (and leaves everything untouched) on a non-finite gradient."""
    for name, g in grads.items():
        if name not in params or params[name].shape != g.shape:
            raise ValueError(f"gradient {name!r} does not match a parameter")
        if not np.all(np.isfinite(g)):
            logger.warning("non-finite gradient for %s; skipping step %d", name, state.step)
            return False
    beta, eps = state.beta, state.eps
    for name, g in grads.items():
        ms = state.mean_square.get(name)
        if ms is None:
            ms = state.mean_square[name] = np.zeros_like(g)
        ms *= beta
        ms += (1.0 - beta) * g * g
        params[name] -= lr * g / np.sqrt(ms + eps)
    state.step += 1
    return True


def lr_at(epoch: int, cfg: TrainConfig | None = None) -> float:
    """Learning rate for 0-based ``epoch``: exponential decay with a floor."""
    cfg = cfg or TrainConfig()
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return max(cfg.initial_lr * cfg.decay**epoch, cfg.lr_floor)


def shuffle_indices(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_slices(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    """Consecutive mini-batches; a lone trailing sample joins the previous batch."""
    batches = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    val_loss: float = math.nan
    val_acc: float = math.nan


@dataclass
class TrainResult:
    history: list[EpochMetrics]
    best_epoch: int | None = None
    best_val_acc: float = math.nan

    @property
    def losses(self) -> list[float]:
        return [m.train_loss for m in self.history]


def _images(samples: SampleSet) -> np.ndarray:
    return np.asarray(samples.images, dtype=np.float64)


def predict_logits(fn: Callable[[Tensor], Tensor], images: np.ndarray, batch_size: int = 500, dtype=np.float64) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            x = Tensor(images[i : i + batch_size, None], dtype=dtype)
            out.append(fn(x).data)
    return np.concatenate(out) if out else np.zeros((0, 0))


def evaluate_logits(logits: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """Mean cross-entropy and accuracy of precomputed logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-logp[np.arange(len(labels)), labels].mean())
    return loss, float((logits.argmax(axis=1) == labels).mean())


def _snapshot(named: Sequence[tuple[str, Tensor]], buffers: Sequence[tuple[str, np.ndarray]]):
    return [p.data.copy() for _, p in named], [b.copy() for _, b in buffers]


def _restore(named, buffers, snap) -> None:
    for (_, p), saved in zip(named, snap[0]):
        p.data[...] = saved
    for (_, b), saved in zip(buffers, snap[1]):
        b[...] = saved


def _fit(
    named: list[tuple[str, Tensor]],
    buffers: list[tuple[str, np.ndarray]],
    logits_fn: Callable[[Tensor, bool, np.random.Generator | None], Tensor],
    train_set: SampleSet,
    cfg: TrainConfig,
    *,
    val_set: SampleSet | None = None,
    epochs: int | None = None,
    early_stop: bool = True,
    keep_best: str | None = None,
    on_epoch: Callable[[EpochMetrics, bool], None] | None = None,
    dtype=np.float64,
) -> TrainResult:
    cfg.validate()
    n = len(train_set)
    if n == 0:
        raise ValueError("empty training set")
    batch_size = cfg.batch_size
    if batch_size > n:
        logger.warning("batch size %d exceeds dataset size %d; clamping", batch_size, n)
        batch_size = n
    images = _images(train_set)
    labels = train_set.labels
    val_images = _images(val_set) if val_set is not None and len(val_set) else None
    params = {name: p.data for name, p in named}
    state = OptimState(cfg.beta, cfg.eps)
    history: list[EpochMetrics] = []
    best_loss = math.inf
    stale = 0
    best_score = -math.inf
    best_epoch = None
    best_snap = None
    total_epochs = cfg.max_epochs if epochs is None else epochs

    for epoch in range(total_epochs):
        lr = lr_at(epoch, cfg)
        order = shuffle_indices(n, cfg.seed, epoch)
        loss_sum = 0.0
        correct = 0
        for b, idx in enumerate(batch_slices(order, batch_size)):
            batch = images[idx]
            if cfg.augment != "none":
                batch = np.stack(
                    [augment_image(batch[k], cfg.augment, sample_rng(cfg.seed, epoch, int(i))) for k, i in enumerate(idx)]
                )
            x = Tensor(batch[:, None], dtype=dtype)
            rng = np.random.default_rng([cfg.seed, epoch, b, 1])
            for _, p in named:
                p.grad = None
            with Tape() as tape:
                logits = logits_fn(x, True, rng)
                loss = crossentropy(logits, labels[idx])
            backward(tape, loss)
            del tape
            grads = {name: p.grad for name, p in named if p.grad is not None}
            rmsprop_step(params, grads, state, lr)
            loss_sum += loss.item() * len(idx)
            correct += int((logits.data.argmax(axis=1) == labels[idx]).sum())
        m = EpochMetrics(epoch + 1, lr, loss_sum / n, correct / n)
        if val_images is not None:
            vlogits = predict_logits(lambda t: logits_fn(t, False, None), val_images, dtype=dtype)
            m.val_loss, m.val_acc = evaluate_logits(vlogits, val_set.labels)
        history.append(m)
        improved = False
        if val_images is not None:
            score = -m.val_loss if keep_best == "loss" else m.val_acc
            if score > best_score:
                best_score, best_epoch, improved = score, m.epoch, True
                if keep_best is not None:
                    best_snap = _snapshot(named, buffers)
        logger.info(
            "epoch %d lr %.6g loss %.5f acc %.4f val_acc %.4f", m.epoch, lr, m.train_loss, m.train_acc, m.val_acc
        )
        if on_epoch is not None:
            on_epoch(m, improved)
        if early_stop:
            if best_loss - m.train_loss < cfg.converge_tol:
                stale += 1
            else:
                stale = 0
            best_loss = min(best_loss, m.train_loss)
            if stale >= cfg.converge_patience:
                logger.info("train loss converged after %d epochs", m.epoch)
                break

    result = TrainResult(history)
    if val_images is not None:
        accs = [h.val_acc for h in history]
        result.best_epoch = int(np.argmax(accs)) + 1
        result.best_val_acc = float(max(accs))
    if best_snap is not None:
        _restore(named, buffers, best_snap)
        result.best_epoch = best_epoch
    return result


def _trainable(net: Network) -> list[tuple[str, Tensor]]:
    return [(n, p) for n, p in net.named_parameters() if p.requires_grad]


def write_metrics_csv(path, history: Sequence[EpochMetrics]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "lr", "train_loss", "train_acc", "val_acc"])
        for m in history:
            w.writerow([m.epoch, f"{m.lr:.8g}", f"{m.train_loss:.8f}", f"{m.train_acc:.6f}", f"{m.val_acc:.6f}"])


def train(
    net: Network,
    train_set: SampleSet,
    cfg: TrainConfig,
    *,
    val_set: SampleSet | None = None,
    epochs: int | None = None,
    early_stop: bool = True,
    metrics_path=None,
    checkpoint_path=None,
) -> TrainResult:
    """Shuffled mini-batch RMSProp on all three columns against one loss.

    Appends a CSV row per epoch to ``metrics_path`` and saves a checkpoint
    whenever validation accuracy reaches a new best.
    """
    if metrics_path is not None:
        Path(metrics_path).parent.mkdir(parents=True, exist_ok=True)
        with open(metrics_path, "w", newline="") as f:
            csv.writer(f).writerow(["epoch", "lr", "train_loss", "train_acc", "val_acc"])

    def on_epoch(m: EpochMetrics, improved: bool) -> None:
        if metrics_path is not None:
            with open(metrics_path, "a", newline="") as f:
                csv.writer(f).writerow(
                    [m.epoch, f"{m.lr:.8g}", f"{m.train_loss:.8f}", f"{m.train_acc:.6f}", f"{m.val_acc:.6f}"]
                )
        if improved and checkpoint_path is not None:
            from .checkpoint import save_checkpoint

            save_checkpoint(checkpoint_path, net, epoch=m.epoch)

    # the returned net keeps the final-epoch weights; the checkpoint file holds the best ones
    return _fit(
        _trainable(net),
        list(net.named_buffers()),
        lambda x, tr, rng: net.forward(x, tr, rng).logits,
        train_set,
        cfg,
        val_set=val_set,
        epochs=epochs,
        early_stop=early_stop,
        on_epoch=on_epoch,
        dtype=np.dtype(net.cfg.dtype),
    )


@dataclass
class ReplayResult:
    net: Network
    best_epoch: int
    search: TrainResult
    replay: TrainResult


def epoch_replay_fit(
    net_factory: Callable[[], Network],
    full_train: SampleSet,
    val_size,
    cfg: TrainConfig,
) -> ReplayResult:
    """Find the best-validation epoch on a split, then retrain on everything for that many epochs."""
    train_part, val_part = split_train_val(full_train, val_size, cfg.seed)
    if len(val_part) == 0:
        raise ValueError("empty validation split")
    search = train(net_factory(), train_part, cfg, val_set=val_part)
    best = search.best_epoch
    net = net_factory()
    replay = train(net, full_train, cfg, epochs=best, early_stop=False)
    assert len(replay.history) == best
    return ReplayResult(net, best, search, replay)


def kfold_split(n_or_samples, k: int, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Seeded k-fold partition; fold sizes differ by at most one."""
    n = n_or_samples if isinstance(n_or_samples, (int, np.integer)) else len(n_or_samples)
    if k < 2:
        raise ValueError("k must be at least 2")
    if k > n:
        raise ValueError(f"k={k} exceeds dataset size {n}")
    folds = np.array_split(np.random.default_rng(seed).permutation(n), k)
    out = []
    for i, val in enumerate(folds):
        rest = np.concatenate([f for j, f in enumerate(folds) if j != i])
        out.append((np.sort(rest), np.sort(val)))
    return out


@dataclass
class SeparateResult:
    column_results: list[TrainResult]
    fusion_result: TrainResult


def train_columns_separately(
    net: Network,
    train_set: SampleSet,
    cfg: TrainConfig,
    *,
    val_set: SampleSet | None = None,
    column_epochs: int | None = None,
    fusion_epochs: int | None = None,
) -> SeparateResult:
    """Two-stage alternative to joint training.

    Stage 1 trains each column alone through a temporary softmax head on its
    level-3 local FC output. Stage 2 freezes all conv levels and trains every
    FC layer against the network loss. With ``val_set`` each stage keeps its
    best weights (column accuracy, then fusion loss). Heads are discarded.
    """
    if net.variant != "proposed":
        raise ConfigError("separate column training needs the proposed variant")
    dtype = np.dtype(net.cfg.dtype)
    results = []
    for j, col in enumerate(net.columns):
        head = Linear(col.local[2].fc.out_features, net.cfg.num_classes, np.random.default_rng([cfg.seed, j]), dtype)
        named = [(f"col{j}.{n}", p) for n, p in col.levels[0].named_parameters("l0.")]
        named += [(f"col{j}.{n}", p) for lv in (1, 2) for n, p in col.levels[lv].named_parameters(f"l{lv}.")]
        named += [(f"col{j}.local2.{n}", p) for n, p in col.local[2].named_parameters()]
        named += [(f"head{j}.{n}", p) for n, p in head.named_parameters()]
        buffers = list(col.named_buffers())

        def logits_fn(x, tr, rng, j=j, head=head):
            return head(net.forward_column(x, j, tr, rng))

        results.append(
            _fit(named, buffers, logits_fn, train_set, replace(cfg, seed=cfg.seed + j + 1), val_set=val_set,
                 epochs=column_epochs, keep_best="acc", dtype=dtype)
        )
    net.freeze_convs(True)
    try:
        fusion = _fit(
            _trainable(net),
            list(net.named_buffers()),
            lambda x, tr, rng: net.forward(x, tr, rng).logits,
            train_set,
            cfg,
            val_set=val_set,
            epochs=fusion_epochs,
            keep_best="loss",
            dtype=dtype,
        )
    finally:
        net.freeze_convs(False)
    return SeparateResult(results, fusion)


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
