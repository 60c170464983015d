"""Diagnostic protocols run on top of a training trajectory."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .model import ARModel, ar_batch, save_checkpoint, load_checkpoint
from .trainer import (CheckpointStore, EmptyObjectiveError, NumericalFailure, TrainConfig,
                      one_gradient_step_on_subset, train_run, weighted_ar_loss)
from .trajectory import ConfidenceProfile, SelectionSets

log = logging.getLogger(__name__)

GROUPS = ("Anchor-Easy", "Anchor-Hard", "Other-Easy", "Other-Hard")


# ---------------------------------------------------------------------------
# recovering residual transfer
# ---------------------------------------------------------------------------


@dataclass
class RRTResult:
    theta: np.ndarray
    delta_norm: float
    discarded_norm: float
    indices: tuple[int, int, int]


def rrt(theta0, theta_b, theta_f, indices: tuple[int, int, int] = (0, -1, -1)) -> RRTResult:
    """theta0 + (theta_f - theta_b): keep only the post-bottleneck updates.

    Each coordinate is the correctly rounded value of the exact three-term sum, so
    theta_b == theta0 gives theta_f back bit for bit and theta_f == theta_b gives theta0.
    """
    arrs = [np.asarray(t.flatten() if isinstance(t, nx.ParamVector) else t, dtype=np.float64)
            for t in (theta0, theta_b, theta_f)]
    if not (arrs[0].shape == arrs[1].shape == arrs[2].shape):
        raise nx.ShapeError(f"layout mismatch: {[a.shape for a in arrs]}")
    t0, tb, tf = arrs
    delta = tf - tb
    theta = np.fromiter((math.fsum(v) for v in zip(t0.tolist(), tf.tolist(), (-tb).tolist())),
                        dtype=np.float64, count=t0.size)
    return RRTResult(theta, float(np.linalg.norm(delta)), float(np.linalg.norm(tb - t0)), indices)


# ---------------------------------------------------------------------------
# losses restricted to position groups
# ---------------------------------------------------------------------------


def group_loss(model: ARModel, dataset, positions: Sequence[np.ndarray]) -> float:
    """Mean NLL over the listed target positions (examples with none are skipped)."""
    idx = [i for i, p in enumerate(positions) if len(p)]
    if not idx:
        raise EmptyObjectiveError("group has no positions")
    batch = [dataset[i] for i in idx]
    ws = []
    for i in idx:
        w = np.zeros(dataset[i].T)
        w[np.asarray(positions[i], dtype=np.int64)] = 1.0
        ws.append(w)
    return weighted_ar_loss(model, batch, ws).item()


def _indicators(dataset, positions) -> list[np.ndarray]:
    out = []
    for ex, p in zip(dataset, positions):
        w = np.zeros(ex.T)
        w[np.asarray(p, dtype=np.int64)] = 1.0
        out.append(w)
    return out


def complement(sets_positions: Sequence[np.ndarray], lengths: Sequence[int]) -> list[np.ndarray]:
    return [np.setdiff1d(np.arange(T), p) for p, T in zip(sets_positions, lengths)]


# ---------------------------------------------------------------------------
# one-step anchor intervention
# ---------------------------------------------------------------------------


@dataclass
class SweepResult:
    steps: list[int]
    delta_other: list[float]
    anchor_loss: list[float]
    other_before: list[float]
    other_after: list[float]
    skipped_examples: int

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["checkpoint", "step", "delta_other", "anchor_loss", "other_before", "other_after"])
        for k, row in enumerate(zip(self.steps, self.delta_other, self.anchor_loss, self.other_before, self.other_after)):
            w.writerow([k, row[0], *(repr(float(v)) for v in row[1:])])
        return buf.getvalue()


def anchor_one_step_sweep(store: CheckpointStore, sets: SelectionSets, dataset, lr: float,
                          checkpoints: Sequence[int] | None = None) -> SweepResult:
    """At each checkpoint: one anchor-only gradient step, then the change in non-anchor loss."""
    dataset = list(dataset)
    keep = [i for i, a in enumerate(sets.anchors) if len(a)]
    skipped = len(dataset) - len(keep)
    if skipped:
        log.info("one-step sweep skipping examples without anchors", extra={"skipped": skipped})
    if not keep:
        raise EmptyObjectiveError("no example has anchors")
    sub = [dataset[i] for i in keep]
    anchors = [sets.anchors[i] for i in keep]
    others = complement(anchors, [sets.lengths[i] for i in keep])
    anchor_w = _indicators(sub, anchors)
    res = SweepResult([], [], [], [], [], skipped)
    for k in (range(len(store)) if checkpoints is None else checkpoints):
        model = store.model(k)
        before = group_loss(model, sub, others)
        stepped = one_gradient_step_on_subset(model, sub, anchor_w, lr)
        after = group_loss(stepped, sub, others)
        res.steps.append(store.steps[k])
        res.other_before.append(before)
        res.other_after.append(after)
        res.delta_other.append(after - before)
        res.anchor_loss.append(group_loss(model, sub, anchors))
    return res


# ---------------------------------------------------------------------------
# easy / hard split and loss-transfer matrix
# ---------------------------------------------------------------------------


def split_easy_hard(sets: SelectionSets, base_profile: ConfidenceProfile) -> dict[str, list[np.ndarray]]:
    """Split anchors and non-anchors into halves by base confidence c_t(theta0).

    Higher confidence is Easy; odd counts give Easy the extra element. Ties are
    ordered by (example index, position).
    """
    n = len(sets)
    anchor_mask = [np.zeros(T, dtype=bool) for T in sets.lengths]
    for i, a in enumerate(sets.anchors):
        anchor_mask[i][a] = True
    out: dict[str, list[np.ndarray]] = {}
    for label, want in (("Anchor", True), ("Other", False)):
        items = [(-float(base_profile.c0[i][t]), i, t)
                 for i in range(n) for t in range(sets.lengths[i]) if anchor_mask[i][t] == want]
        if len(items) < 2:
            raise ValueError(f"group {label} has {len(items)} positions; need at least 2")
        items.sort()
        n_easy = (len(items) + 1) // 2
        for suffix, part in (("Easy", items[:n_easy]), ("Hard", items[n_easy:])):
            pos: list[list[int]] = [[] for _ in range(n)]
            for _, i, t in part:
                pos[i].append(t)
            out[f"{label}-{suffix}"] = [np.array(sorted(p), dtype=np.int64) for p in pos]
    return out


@dataclass
class TransferMatrix:
    values: np.ndarray
    labels: tuple[str, ...]
    baseline: dict[str, float]
    after: dict[str, dict[str, float]] = field(default_factory=dict)
    runs: dict[str, np.ndarray] = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["source", "target", "value"])
        for i, s in enumerate(self.labels):
            for j, t in enumerate(self.labels):
                w.writerow([s, t, repr(float(self.values[i, j]))])
        return buf.getvalue()


def percent_change(after: float, before: float) -> float:
    return 100.0 * (after - before) / before


def transfer_values(theta0: ARModel, subset_models: dict, groups: dict, dataset) -> tuple[np.ndarray, dict, dict]:
    labels = tuple(groups)
    base = {t: group_loss(theta0, dataset, groups[t]) for t in labels}
    after = {s: {t: group_loss(subset_models[s], dataset, groups[t]) for t in labels} for s in labels}
    vals = np.array([[percent_change(after[s][t], base[t]) for t in labels] for s in labels])
    return vals, base, after


def loss_transfer_matrix(theta0: ARModel, groups: dict[str, list[np.ndarray]], dataset,
                         cfg: TrainConfig) -> TransferMatrix:
    """Four subset-only runs from the same start, cross-evaluated on every subset."""
    dataset = list(dataset)
    cfg = replace(cfg, track_accuracy=False, checkpoint_every=max(cfg.num_steps, 1))
    models, runs = {}, {}
    for s, positions in groups.items():
        ws = _indicators(dataset, positions)
        try:
            store = train_run(theta0, dataset, cfg, lambda i, ex, ws=ws: ws[i])
        except NumericalFailure as exc:
            raise NumericalFailure(f"subset run {s}: {exc}", exc.step) from exc
        runs[s] = store.snapshots[-1]
        models[s] = store.final
    vals, base, after = transfer_values(theta0, models, groups, dataset)
    if not np.all(np.isfinite(vals)):
        raise NumericalFailure("non-finite transfer-matrix entry")
    return TransferMatrix(vals, tuple(groups), base, after, runs)


def save_groups(path: str | Path, groups: dict[str, list[np.ndarray]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for label, pos in groups.items():
            for i, p in enumerate(pos):
                fh.write(f"{label}\t{i}\t{' '.join(map(str, np.asarray(p).tolist()))}\n")


def load_groups(path: str | Path) -> dict[str, list[np.ndarray]]:
    raw: dict[str, dict[int, np.ndarray]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            label, i, pos = line.rstrip("\n").split("\t")
            raw.setdefault(label, {})[int(i)] = np.array([int(v) for v in pos.split()], dtype=np.int64)
    return {label: [d[i] for i in range(len(d))] for label, d in raw.items()}


def recompute_transfer(directory: str | Path, dataset) -> np.ndarray:
    """Rebuild the matrix from persisted theta0, subset checkpoints and group file."""
    from .model import load_model

    d = Path(directory)
    groups = load_groups(d / "groups.tsv")
    theta0 = load_model(d / "theta0.bin")
    models = {s: load_model(d / f"subset_{s}.bin") for s in groups}
    vals, _, _ = transfer_values(theta0, models, groups, list(dataset))
    return vals


def save_transfer(directory: str | Path, theta0: ARModel, tm: TransferMatrix, groups) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_checkpoint(d / "theta0.bin", theta0.cfg, theta0.params)
    for s, theta in tm.runs.items():
        save_checkpoint(d / f"subset_{s}.bin", theta0.cfg, theta)
    save_groups(d / "groups.tsv", groups)
    (d / "transfer_matrix.csv").write_text(tm.to_csv(), encoding="utf-8")


# ---------------------------------------------------------------------------
# static (initial-confidence) baselines
# ---------------------------------------------------------------------------


def budget_count(p: float, n: int) -> int:
    # tolerate float noise in p = |A| / N so the companion count is hit exactly
    return int(math.ceil(p * n - 1e-9))


def static_confidence_weights(base_profile: ConfidenceProfile, p: float, direction: str = "highest") -> list[np.ndarray]:
    """Zero weight on the global top-p fraction of positions by c_t(theta0)."""
    if direction not in ("highest", "lowest"):
        raise ValueError(f"direction must be highest or lowest, got {direction!r}")
    if not 0 <= p < 1:
        raise ValueError(f"p must be in [0, 1), got {p}")
    n = base_profile.num_positions
    count = budget_count(p, n)
    if count >= n:
        raise EmptyObjectiveError("budget leaves no trainable position")
    sign = -1.0 if direction == "highest" else 1.0
    items = sorted((sign * float(c), i, t) for i, c0 in enumerate(base_profile.c0) for t, c in enumerate(c0))
    weights = [np.ones(c0.size) for c0 in base_profile.c0]
    for _, i, t in items[:count]:
        weights[i][t] = 0.0
    return weights


# ---------------------------------------------------------------------------
# gradient sketches
# ---------------------------------------------------------------------------


@dataclass
class SketchTable:
    sketches: np.ndarray  # (N, k)
    labels: np.ndarray  # (N,) 1 = anchor
    example: np.ndarray
    position: np.ndarray
    directions: np.ndarray  # (k, P)
    epsilon: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        k = self.sketches.shape[1]
        w.writerow(["example", "position", "group", *[f"s{j}" for j in range(k)]])
        for row, lab, e, p in zip(self.sketches, self.labels, self.example, self.position):
            w.writerow([int(e), int(p), "anchor" if lab else "other", *(repr(float(v)) for v in row)])
        return buf.getvalue()


def position_nll(model: ARModel, dataset) -> np.ndarray:
    """Flat vector of per-position NLL over all target positions, example-major."""
    ids, targets, valid, spans = ar_batch(model.cfg, dataset)
    lp = model.forward(ids).data
    picked = np.take_along_axis(lp, targets[..., None], axis=-1)[..., 0]
    return np.concatenate([-picked[i, s:s + T] for i, (s, T) in enumerate(spans)])


def gradient_sketch_table(model: ARModel, dataset, k: int, seed: int, sets: SelectionSets | None = None,
                          epsilon: float = 1e-4) -> SketchTable:
    """Directional derivatives of every position's NLL along k shared random unit directions.

    One symmetric pair of forward passes per direction yields the whole column of
    sketches, because each position's loss is a separate output of the same pass.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    dataset = list(dataset)
    rng = np.random.default_rng(seed)
    dirs = nx.random_unit_vectors(k, model.params.size, rng)
    cols = [nx.directional_derivative(lambda pv: position_nll(model.with_params(pv), dataset), model.params, d, epsilon)
            for d in dirs]
    sketches = np.stack(cols, axis=1)
    ex_idx = np.concatenate([np.full(ex.T, i) for i, ex in enumerate(dataset)])
    pos = np.concatenate([np.arange(ex.T) for ex in dataset])
    labels = np.zeros(len(pos), dtype=np.int64)
    if sets is not None:
        off = np.cumsum([0] + [ex.T for ex in dataset[:-1]])
        for i, a in enumerate(sets.anchors):
            labels[off[i] + np.asarray(a, dtype=np.int64)] = 1
    return SketchTable(sketches, labels, ex_idx, pos, dirs, epsilon)


def pca_2d(x: np.ndarray, iters: int = 200, seed: int = 0) -> np.ndarray:
    """Top-two principal-component scores by power iteration with deflation."""
    x = np.asarray(x, dtype=np.float64)
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / max(len(xc) - 1, 1)
    rng = np.random.default_rng(seed)
    comps = []
    for _ in range(min(2, cov.shape[0])):
        v = rng.standard_normal(cov.shape[0])
        for c in comps:
            v -= (v @ c) * c
        for _ in range(iters):
            w = cov @ v
            for c in comps:
                w -= (w @ c) * c
            nrm = np.linalg.norm(w)
            if nrm == 0:
                break
            v = w / nrm
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        comps.append(v)
    return xc @ np.stack(comps, axis=1)


def separability(scores: np.ndarray, labels: np.ndarray) -> float:
    """Leave-nothing-out nearest-centroid accuracy in the given coordinates (0.5 ~ no separation)."""
    labels = np.asarray(labels)
    if labels.min() == labels.max():
        return float("nan")
    ca, co = scores[labels == 1].mean(axis=0), scores[labels == 0].mean(axis=0)
    pred = np.linalg.norm(scores - ca, axis=1) < np.linalg.norm(scores - co, axis=1)
    acc = float((pred == (labels == 1)).mean())
    return max(acc, 1.0 - acc)
