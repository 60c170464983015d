"""Deterministic training loops with per-token loss weights and full checkpoint capture."""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .data import DecodeConfig, Example, train_accuracy
from .model import (ARModel, ArchConfig, DenoiserModel, ar_batch, denoiser_batch,
                    load_checkpoint, save_checkpoint, scatter_weights)

log = logging.getLogger(__name__)

WeightProvider = Callable[[int, Example], np.ndarray]
MaskProvider = Callable[[int, Example, np.random.Generator], np.ndarray]


class EmptyObjectiveError(ValueError):
    """Every position in the batch carries zero weight."""


class NumericalFailure(FloatingPointError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-3
    batch_size: int = 32
    num_steps: int = 150
    optimizer: str = "adam"
    seed: int = 0
    checkpoint_every: int = 1
    loss_reduction: str = "mean"
    track_accuracy: bool = True
    decode_steps: int = 0

    def validate(self, dataset_size: int | None = None) -> None:
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1 or (dataset_size is not None and self.batch_size > dataset_size):
            raise ValueError(f"batch_size {self.batch_size} must be in [1, dataset size {dataset_size}]")
        if self.num_steps < 0:
            raise ValueError("num_steps must be >= 0")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be sgd or adam, got {self.optimizer!r}")
        if self.loss_reduction not in ("mean", "sum"):
            raise ValueError(f"loss_reduction must be mean or sum, got {self.loss_reduction!r}")

    def to_lines(self) -> list[str]:
        return [f"{k}={v}" for k, v in asdict(self).items()]

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.to_lines()).encode()).hexdigest()

    @classmethod
    def from_mapping(cls, kv: dict[str, str]) -> "TrainConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        unknown = set(kv) - set(kinds)
        if unknown:
            raise ValueError(f"unknown train keys: {sorted(unknown)}")
        conv = {"float": float, "int": int, "str": str,
                "bool": lambda s: s.strip().lower() in ("1", "true", "yes")}
        return cls(**{k: conv[kinds[k]](v) for k, v in kv.items()})


class Adam:
    beta1, beta2, eps = 0.9, 0.999, 1e-8

    def __init__(self, n: int, lr: float):
        self.lr = lr
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        return theta - self.lr * mhat / (np.sqrt(vhat) + self.eps)


class SGD:
    def __init__(self, n: int, lr: float):
        self.lr = lr

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        return theta - self.lr * grad


def make_optimizer(cfg: TrainConfig, n: int):
    return (Adam if cfg.optimizer == "adam" else SGD)(n, cfg.learning_rate)


# ---------------------------------------------------------------------------
# objectives
# ---------------------------------------------------------------------------


def check_weight_vector(w, T: int) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (T,):
        raise nx.ShapeError(f"weight vector of shape {w.shape} does not match target length {T}")
    if np.any(w < 0) or np.any(w > 1):
        raise ValueError("weights must lie in [0, 1]")
    return w


def weighted_ar_loss(model: ARModel, batch: Sequence[Example], weights: Sequence[np.ndarray] | None = None,
                     reduction: str = "mean", tensors=None) -> nx.Tensor:
    """sum_t w_t * -log p(y_t | y_<t, x) over the batch, divided by sum w (``mean``).

    ``weights=None`` means all-ones (plain token NLL). Pass ``tensors`` (from
    ``model.params.tensors()``) to get gradients on them.
    """
    if weights is None:
        weights = [np.ones(ex.T) for ex in batch]
    if len(weights) != len(batch):
        raise ValueError(f"{len(weights)} weight vectors for {len(batch)} examples")
    ws = [check_weight_vector(w, ex.T) for w, ex in zip(weights, batch)]
    ids, targets, _, spans = ar_batch(model.cfg, batch)
    W = scatter_weights(ids.shape, spans, ws)
    denom = W.sum()
    if denom <= 0:
        raise EmptyObjectiveError("empty objective: every position has zero weight")
    lp = nx.pick(model.forward(ids, tensors=tensors), targets)
    coef = -W / denom if reduction == "mean" else -W
    return nx.weighted_sum(lp, coef)


def masked_denoiser_loss(model: DenoiserModel, batch: Sequence[Example], masks: Sequence[np.ndarray],
                         tensors=None) -> nx.Tensor:
    """Mean over masked target positions of -log p(y_t | visible, x, m)."""
    for i, (ex, m) in enumerate(zip(batch, masks)):
        if not np.asarray(m).astype(bool).any():
            raise EmptyObjectiveError(f"mask for batch item {i} covers no target position")
    ids, targets, scored, valid, _ = denoiser_batch(model, batch, masks)
    lp = nx.pick(model.forward(ids, key_valid=valid, tensors=tensors), targets)
    w = scored.astype(np.float64)
    return nx.weighted_sum(lp, -w / w.sum())


def loss_and_grad(model, loss_builder: Callable) -> tuple[float, np.ndarray]:
    tensors = model.params.tensors()
    loss = loss_builder(tensors)
    nx.backward(loss)
    grad = np.concatenate([
        (t.grad if t.grad is not None else np.zeros(t.shape)).reshape(-1) for t in tensors.values()
    ])
    return loss.item(), grad


# ---------------------------------------------------------------------------
# checkpoint store
# ---------------------------------------------------------------------------


@dataclass
class CheckpointStore:
    arch: ArchConfig
    kind: str
    layout_template: nx.ParamVector
    steps: list[int] = field(default_factory=list)
    snapshots: list[np.ndarray] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    accuracies: list[float] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.snapshots)

    def record(self, step: int, theta: np.ndarray, loss: float, acc: float) -> None:
        if self.steps and step <= self.steps[-1]:
            raise ValueError(f"checkpoint step {step} is not after {self.steps[-1]}")
        self.steps.append(step)
        self.snapshots.append(theta.copy())
        self.losses.append(float(loss))
        self.accuracies.append(float(acc))

    def model(self, k: int):
        cls = DenoiserModel if self.kind == "denoiser" else ARModel
        return cls(self.arch, self.layout_template.unflatten(self.snapshots[k]))

    @property
    def final(self):
        return self.model(len(self) - 1)

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "loss", "train_acc"])
        for s, l, a in zip(self.steps, self.losses, self.accuracies):
            w.writerow([s, repr(l), repr(a)])
        return buf.getvalue()

    def save(self, directory: str | Path, config: TrainConfig | None = None, which: Sequence[int] | None = None) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for k in (range(len(self)) if which is None else which):
            save_checkpoint(d / f"ckpt_{k:05d}.bin", self.arch, self.snapshots[k], self.kind)
        (d / "metrics.csv").write_text(self.metrics_csv(), encoding="utf-8")
        lines = [] if config is None else config.to_lines()
        lines += [f"{k}={v}" for k, v in sorted(self.provenance.items())]
        (d / "config.txt").write_text("".join(f"{l}\n" for l in lines), encoding="utf-8")

    @classmethod
    def load(cls, directory: str | Path) -> "CheckpointStore":
        from .model import init_params

        d = Path(directory)
        rows = list(csv.DictReader(io.StringIO((d / "metrics.csv").read_text(encoding="utf-8"))))
        store = None
        for k, row in enumerate(rows):
            path = d / f"ckpt_{k:05d}.bin"
            if not path.exists():
                raise FileNotFoundError(f"{path} missing; store was saved without all snapshots")
            arch, kind, flat = load_checkpoint(path)
            if store is None:
                store = cls(arch, kind, init_params(arch, denoiser=kind == "denoiser"))
            store.record(int(row["step"]), flat, float(row["loss"]), float(row["train_acc"]))
        if store is None:
            raise ValueError(f"{d}: empty metrics.csv")
        return store


def dataset_digest(dataset: Sequence[Example]) -> str:
    from .data import format_traces

    return hashlib.sha256(format_traces(list(dataset)).encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# loops
# ---------------------------------------------------------------------------


def batch_schedule(n: int, batch_size: int, num_steps: int, seed: int) -> list[np.ndarray]:
    """Index batches from per-epoch shuffles of a seeded generator; no partial batches."""
    rng = np.random.default_rng(seed)
    out: list[np.ndarray] = []
    while len(out) < num_steps:
        perm = rng.permutation(n)
        for i in range(0, n - batch_size + 1, batch_size):
            out.append(perm[i:i + batch_size])
            if len(out) == num_steps:
                break
    return out


def _weights_for(dataset, idx, provider):
    if provider is None:
        return [np.ones(dataset[i].T) for i in idx]
    return [check_weight_vector(provider(int(i), dataset[i]), dataset[i].T) for i in idx]


def full_weighted_loss(model: ARModel, dataset, provider: WeightProvider | None, reduction: str = "mean",
                       chunk: int = 256) -> float:
    """Objective over the whole dataset with batch-global normalization."""
    num, den = 0.0, 0.0
    for s in range(0, len(dataset), chunk):
        idx = range(s, min(s + chunk, len(dataset)))
        batch = [dataset[i] for i in idx]
        ws = _weights_for(dataset, idx, provider)
        part = sum(float(w.sum()) for w in ws)
        if part > 0:
            num += weighted_ar_loss(model, batch, ws, reduction="sum").item()
            den += part
    if den <= 0:
        raise EmptyObjectiveError("empty objective: every position has zero weight")
    return num / den if reduction == "mean" else num


def train_run(model_init: ARModel, dataset, cfg: TrainConfig, weight_provider: WeightProvider | None = None,
              accuracy_set=None) -> CheckpointStore:
    """Run ``cfg.num_steps`` updates; checkpoint 0 is the untouched initialization.

    Each checkpoint records the full-dataset weighted objective and (optionally)
    the greedy-decode answer accuracy on ``accuracy_set`` (the training set by default).
    """
    dataset = list(dataset)
    cfg.validate(len(dataset))
    acc_set = dataset if accuracy_set is None else list(accuracy_set)
    decode = DecodeConfig(steps=cfg.decode_steps)
    store = CheckpointStore(model_init.cfg, "ar", model_init.params.copy(), provenance={
        "config_hash": cfg.digest(), "dataset_hash": dataset_digest(dataset)})
    theta = model_init.params.flatten()
    opt = make_optimizer(cfg, theta.size)
    model = model_init

    def checkpoint(step):
        loss = full_weighted_loss(model, dataset, weight_provider, cfg.loss_reduction)
        if not math.isfinite(loss):
            raise NumericalFailure(f"non-finite loss at step {step}", step)
        acc = train_accuracy(model, acc_set, decode) if cfg.track_accuracy else float("nan")
        store.record(step, theta, loss, acc)
        log.debug("checkpoint", extra={"step": step, "loss": loss, "train_acc": acc})

    checkpoint(0)
    for step, idx in enumerate(batch_schedule(len(dataset), cfg.batch_size, cfg.num_steps, cfg.seed), 1):
        batch = [dataset[i] for i in idx]
        ws = _weights_for(dataset, idx, weight_provider)
        if sum(float(w.sum()) for w in ws) <= 0:
            # nothing to learn from this batch; parameters stay put
            loss_val, grad = 0.0, np.zeros_like(theta)
        else:
            loss_val, grad = loss_and_grad(model, lambda t: weighted_ar_loss(model, batch, ws, cfg.loss_reduction, t))
        if not (math.isfinite(loss_val) and np.all(np.isfinite(grad))):
            raise NumericalFailure(f"non-finite loss at step {step}", step)
        theta = opt.step(theta, grad)
        model = model_init.with_params(theta)
        if step % cfg.checkpoint_every == 0 or step == cfg.num_steps:
            checkpoint(step)
    return store


def dllm_train_step(model: DenoiserModel, batch: Sequence[Example], masks: Sequence[np.ndarray], optimizer,
                    theta: np.ndarray | None = None) -> tuple[DenoiserModel, float]:
    """One update on the masked reconstruction objective; returns (new model, loss)."""
    theta = model.params.flatten() if theta is None else theta
    loss, grad = loss_and_grad(model, lambda t: masked_denoiser_loss(model, batch, masks, t))
    if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
        raise NumericalFailure("non-finite denoiser loss")
    return model.with_params(optimizer.step(theta, grad)), loss


def full_denoiser_loss(model: DenoiserModel, dataset, masks: Sequence[np.ndarray]) -> float:
    return masked_denoiser_loss(model, list(dataset), list(masks)).item()


def dllm_train_run(model_init: DenoiserModel, dataset, cfg: TrainConfig, mask_provider: MaskProvider,
                   eval_masks: Sequence[np.ndarray] | None = None) -> CheckpointStore:
    """Denoiser counterpart of :func:`train_run`.

    Masks are drawn from a generator seeded with ``cfg.seed + 1`` so batch order
    and mask draws are independent streams. The recorded loss is full
    reconstruction NLL (every target position masked) unless ``eval_masks`` is given.
    """
    dataset = list(dataset)
    cfg.validate(len(dataset))
    decode = DecodeConfig(steps=cfg.decode_steps)
    eval_masks = list(eval_masks) if eval_masks is not None else [np.ones(ex.T, dtype=bool) for ex in dataset]
    store = CheckpointStore(model_init.cfg, "denoiser", model_init.params.copy(), provenance={
        "config_hash": cfg.digest(), "dataset_hash": dataset_digest(dataset)})
    mask_rng = np.random.default_rng(cfg.seed + 1)
    theta = model_init.params.flatten()
    opt = make_optimizer(cfg, theta.size)
    model = model_init

    def checkpoint(step):
        loss = full_denoiser_loss(model, dataset, eval_masks)
        if not math.isfinite(loss):
            raise NumericalFailure(f"non-finite loss at step {step}", step)
        acc = train_accuracy(model, dataset, decode) if cfg.track_accuracy else float("nan")
        store.record(step, theta, loss, acc)

    checkpoint(0)
    for step, idx in enumerate(batch_schedule(len(dataset), cfg.batch_size, cfg.num_steps, cfg.seed), 1):
        batch = [dataset[i] for i in idx]
        masks = [np.asarray(mask_provider(int(i), dataset[i], mask_rng)).astype(bool) for i in idx]
        try:
            model, _ = dllm_train_step(model, batch, masks, opt, theta)
        except NumericalFailure as exc:
            raise NumericalFailure(f"non-finite denoiser loss at step {step}", step) from exc
        theta = model.params.flatten()
        if step % cfg.checkpoint_every == 0 or step == cfg.num_steps:
            checkpoint(step)
    return store


def one_gradient_step_on_subset(model: ARModel, dataset, subset: Sequence[np.ndarray], lr: float,
                                reduction: str = "mean") -> ARModel:
    """Single plain gradient step on the indicator-weighted loss; ``model`` is not modified.

    ``subset[i]`` is a 0/1 vector over example ``i``'s target positions.
    """
    dataset = list(dataset)
    ws = [check_weight_vector(s, ex.T) for s, ex in zip(subset, dataset)]
    if len(ws) != len(dataset):
        raise ValueError(f"{len(ws)} subset vectors for {len(dataset)} examples")
    if sum(float(w.sum()) for w in ws) <= 0:
        raise EmptyObjectiveError("empty subset")
    _, grad = loss_and_grad(model, lambda t: weighted_ar_loss(model, dataset, ws, reduction, t))
    return model.with_params(model.params.flatten() - lr * grad)
