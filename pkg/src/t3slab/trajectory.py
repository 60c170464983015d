"""Bottleneck detection, confidence profiling and token selection."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .model import ARModel, ar_batch_logprobs
from .trainer import CheckpointStore, EmptyObjectiveError

DEFAULT_TAU = 0.2


def find_bottleneck(store_or_accuracies) -> int:
    """Index of the lowest training accuracy; the earliest index wins ties."""
    accs = store_or_accuracies.accuracies if isinstance(store_or_accuracies, CheckpointStore) else store_or_accuracies
    accs = [float(a) for a in accs]
    if not accs:
        raise ValueError("no checkpoints with recorded accuracy")
    if any(math.isnan(a) for a in accs):
        raise ValueError("checkpoint store is missing training-accuracy metrics")
    best = 0
    for k, a in enumerate(accs):
        if a < accs[best]:
            best = k
    return best


class OnlineBottleneckMonitor:
    """Streaming bottleneck tracker with a patience rule.

    The valley is declared once ``patience`` consecutive checkpoints fail to go
    below the running minimum. This stopping rule is a heuristic of this library;
    the offline argmin (:func:`find_bottleneck`) is the reference definition.
    """

    def __init__(self, patience: int = 10):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.best_index: int | None = None
        self.best_acc = math.inf
        self.count = 0
        self._since = 0

    def update(self, acc: float) -> bool:
        """Feed the next checkpoint's accuracy; returns True once the valley is confirmed."""
        if acc < self.best_acc:
            self.best_acc, self.best_index, self._since = acc, self.count, 0
        else:
            self._since += 1
        self.count += 1
        return self.confirmed

    @property
    def confirmed(self) -> bool:
        return self.best_index is not None and self._since >= self.patience


@dataclass
class ConfidenceProfile:
    c0: list[np.ndarray]
    cb: list[np.ndarray]
    delta: list[np.ndarray]
    tokens: list[np.ndarray]
    selector: str = "self"

    def __len__(self) -> int:
        return len(self.delta)

    @property
    def num_positions(self) -> int:
        return int(sum(d.size for d in self.delta))

    @classmethod
    def from_arrays(cls, c0, cb, tokens=None, selector: str = "self") -> "ConfidenceProfile":
        c0 = [np.asarray(v, dtype=np.float64) for v in c0]
        cb = [np.asarray(v, dtype=np.float64) for v in cb]
        if tokens is None:
            tokens = [np.zeros(v.size, dtype=np.int64) for v in c0]
        return cls(c0, cb, [b - a for a, b in zip(c0, cb)], [np.asarray(t) for t in tokens], selector)

    @classmethod
    def from_delta(cls, delta, tokens=None) -> "ConfidenceProfile":
        """Profile with c0 = 0 and cb = delta, handy when only the change matters."""
        return cls.from_arrays([np.zeros(len(d)) for d in delta], delta, tokens)


def profile_confidence(theta0: ARModel, theta_b: ARModel, dataset, selector: str = "self",
                       chunk: int = 256) -> ConfidenceProfile:
    """c_t under both checkpoints and their difference, per example."""
    if theta0.cfg != theta_b.cfg and not _same_arch(theta0, theta_b):
        raise ValueError("selector checkpoints have different architectures")
    examples = list(dataset)
    c0, cb = [], []
    for s in range(0, len(examples), chunk):
        part = examples[s:s + chunk]
        c0 += ar_batch_logprobs(theta0, part)
        cb += ar_batch_logprobs(theta_b, part)
    tokens = [np.asarray(ex.target, dtype=np.int64) for ex in examples]
    return ConfidenceProfile(c0, cb, [b - a for a, b in zip(c0, cb)], tokens, selector)


def _same_arch(a: ARModel, b: ARModel) -> bool:
    return a.params.layout == b.params.layout and a.cfg.vocab_size == b.cfg.vocab_size


@dataclass
class SelectionSets:
    anchors: list[np.ndarray] = field(default_factory=list)
    yet_to_learn: list[np.ndarray] = field(default_factory=list)
    lengths: list[int] = field(default_factory=list)
    tau: float | None = None

    def __len__(self) -> int:
        return len(self.lengths)

    def anchor_fraction(self) -> float:
        n = sum(self.lengths)
        return sum(a.size for a in self.anchors) / n if n else 0.0

    def yet_to_learn_fraction(self) -> float:
        n = sum(self.lengths)
        return sum(b.size for b in self.yet_to_learn) / n if n else 0.0

    def indicator(self, which: str, i: int) -> np.ndarray:
        pos = self.anchors[i] if which == "A" else self.yet_to_learn[i]
        v = np.zeros(self.lengths[i])
        v[pos] = 1.0
        return v


def anchor_set(profile: ConfidenceProfile, sets: SelectionSets | None = None) -> SelectionSets:
    """A = {t : delta_t > 0}, strictly."""
    anchors = [np.flatnonzero(d > 0) for d in profile.delta]
    lengths = [d.size for d in profile.delta]
    if sets is None:
        return SelectionSets(anchors, [np.zeros(0, dtype=np.int64) for _ in anchors], lengths)
    return SelectionSets(anchors, sets.yet_to_learn, lengths, sets.tau)


def yet_to_learn_set(profile: ConfidenceProfile, tau: float = DEFAULT_TAU,
                     sets: SelectionSets | None = None) -> SelectionSets:
    """B = {t : delta_t < -tau}."""
    if not tau >= 0:
        raise ValueError(f"tau must be non-negative, got {tau}")
    ytl = [np.flatnonzero(d < -tau) for d in profile.delta]
    lengths = [d.size for d in profile.delta]
    anchors = sets.anchors if sets is not None else [np.zeros(0, dtype=np.int64) for _ in ytl]
    return SelectionSets(anchors, ytl, lengths, float(tau))


def select(profile: ConfidenceProfile, tau: float = DEFAULT_TAU) -> SelectionSets:
    return yet_to_learn_set(profile, tau, anchor_set(profile))


def t3s_ar_weights(T: int, sets: SelectionSets, i: int) -> np.ndarray:
    """Weight 0 on anchors, 1 on every other target position of example ``i``."""
    _covers(sets, i, T)
    w = np.ones(T)
    w[sets.anchors[i]] = 0.0
    if not w.any():
        raise EmptyObjectiveError(f"empty objective: anchors cover every target position of example {i}")
    return w


def inverse_t3s_weights(T: int, sets: SelectionSets, i: int) -> np.ndarray:
    """Weight 1 on anchors only (the inverted ablation)."""
    _covers(sets, i, T)
    w = np.zeros(T)
    w[sets.anchors[i]] = 1.0
    if not w.any():
        raise EmptyObjectiveError(f"empty objective: example {i} has no anchors")
    return w


def _covers(sets: SelectionSets, i: int, T: int) -> None:
    if i >= len(sets) or sets.lengths[i] != T:
        raise ValueError(f"selection sets do not cover example {i} with target length {T}")


def weight_provider(sets: SelectionSets, rule: Callable[[int, SelectionSets, int], np.ndarray]):
    """Trainer-facing provider; examples whose rule yields an empty objective get all-zero weights.

    The skipped indices are collected on the returned function's ``skipped`` attribute.
    """
    skipped: set[int] = set()

    def provide(i, example):
        try:
            return rule(example.T, sets, i)
        except EmptyObjectiveError:
            skipped.add(i)
            return np.zeros(example.T)

    provide.skipped = skipped
    return provide


# ---------------------------------------------------------------------------
# dLLM masks
# ---------------------------------------------------------------------------


def uniform_rate(low: float = 0.1, high: float = 0.9):
    return lambda rng: float(rng.uniform(low, high))


def fixed_rate(r: float):
    return lambda rng: float(r)


def sample_random_mask(rate_distribution: Callable, T: int, prompt_len: int, rng: np.random.Generator,
                       include_prompt: bool = False) -> np.ndarray:
    """Draw r, then mask each target position independently with probability r.

    Redraws until at least one target position is masked. With
    ``include_prompt`` the result covers prompt+target (prompt entries always 0);
    otherwise it covers the T target positions only.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    while True:
        r = rate_distribution(rng)
        m = rng.random(T) < r
        if m.any():
            break
    if include_prompt:
        return np.concatenate([np.zeros(prompt_len, dtype=bool), m])
    return m


def union_mask(m, sets_or_positions, i: int | None = None) -> np.ndarray:
    """m OR 1_B, elementwise."""
    m = np.asarray(m).astype(bool)
    pos = sets_or_positions.yet_to_learn[i] if isinstance(sets_or_positions, SelectionSets) else sets_or_positions
    out = m.copy()
    out[np.asarray(pos, dtype=np.int64)] = True
    return out


def random_mask_provider(rate_distribution=None):
    rate_distribution = rate_distribution or uniform_rate()
    return lambda i, ex, rng: sample_random_mask(rate_distribution, ex.T, len(ex.prompt), rng)


def union_mask_provider(sets: SelectionSets, rate_distribution=None):
    rate_distribution = rate_distribution or uniform_rate()
    return lambda i, ex, rng: union_mask(sample_random_mask(rate_distribution, ex.T, len(ex.prompt), rng), sets, i)


# ---------------------------------------------------------------------------
# summaries
# ---------------------------------------------------------------------------


@dataclass
class ProfileStats:
    drop_fraction: float
    anchor_fraction: float
    yet_to_learn_fraction: float
    num_positions: int
    top_increase: list[tuple[int, float, int]]
    top_drop: list[tuple[int, float, int]]
    group_counts: dict[str, int]


def profile_stats(profile: ConfidenceProfile, sets: SelectionSets, k: int = 10) -> ProfileStats:
    """Drop fraction plus top-k token ids by aggregate increase and aggregate drop.

    Ranked entries are ``(token_id, aggregate, occurrences)``; only tokens with a
    strictly positive aggregate increase (resp. negative aggregate change) rank.
    """
    n = profile.num_positions
    drops = sum(int((d < 0).sum()) for d in profile.delta)
    agg: dict[int, float] = defaultdict(float)
    cnt: dict[int, int] = defaultdict(int)
    for d, toks in zip(profile.delta, profile.tokens):
        for v, tok in zip(d, toks):
            agg[int(tok)] += float(v)
            cnt[int(tok)] += 1
    inc = sorted(((t, s, cnt[t]) for t, s in agg.items() if s > 0), key=lambda r: (-r[1], r[0]))[:k]
    dec = sorted(((t, s, cnt[t]) for t, s in agg.items() if s < 0), key=lambda r: (r[1], r[0]))[:k]
    n_a = sum(a.size for a in sets.anchors)
    n_b = sum(b.size for b in sets.yet_to_learn)
    groups = {"anchor": n_a, "non_anchor": n - n_a, "yet_to_learn": n_b,
              "zero_change": sum(int((d == 0).sum()) for d in profile.delta)}
    return ProfileStats(drops / n if n else 0.0, n_a / n if n else 0.0, n_b / n if n else 0.0, n, inc, dec, groups)


# ---------------------------------------------------------------------------
# selection files
# ---------------------------------------------------------------------------


def format_selection(sets: SelectionSets) -> str:
    tau = "" if sets.tau is None else repr(float(sets.tau))
    lines = []
    for i, (a, b) in enumerate(zip(sets.anchors, sets.yet_to_learn)):
        lines.append(f"{i}\tA: {' '.join(map(str, a.tolist()))}\tB: {' '.join(map(str, b.tolist()))}"
                     f"\ttau={tau}\tT={sets.lengths[i]}")
    return "".join(l + "\n" for l in lines)


def write_selection(path: str | Path, sets: SelectionSets) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_selection(sets))


def read_selection(path: str | Path) -> SelectionSets:
    """Parse a selection file; the trailing ``T=`` field is optional for external producers."""
    anchors, ytl, lengths, tau = [], [], [], None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields_ = line.split("\t")
            if len(fields_) < 4 or not fields_[1].startswith("A:") or not fields_[2].startswith("B:") \
                    or not fields_[3].startswith("tau="):
                raise ValueError(f"{path}:{lineno}: malformed selection line")
            idx = int(fields_[0])
            if idx != len(anchors):
                raise ValueError(f"{path}:{lineno}: example index {idx} out of order")
            a = np.array([int(v) for v in fields_[1][2:].split()], dtype=np.int64)
            b = np.array([int(v) for v in fields_[2][2:].split()], dtype=np.int64)
            t = fields_[3][4:]
            tau = float(t) if t else None
            T = int(fields_[4][2:]) if len(fields_) > 4 and fields_[4].startswith("T=") else \
                int(max([*a.tolist(), *b.tolist(), -1]) + 1)
            anchors.append(a)
            ytl.append(b)
            lengths.append(T)
    return SelectionSets(anchors, ytl, lengths, tau)


def check_sets(sets: SelectionSets) -> list[str]:
    """Structural problems in a selection (empty list when valid)."""
    problems = []
    for i, (a, b, T) in enumerate(zip(sets.anchors, sets.yet_to_learn, sets.lengths)):
        for name, s in (("A", a), ("B", b)):
            if s.size and (s.min() < 0 or s.max() >= T):
                problems.append(f"example {i}: {name} position outside [0, {T})")
            if np.unique(s).size != s.size:
                problems.append(f"example {i}: duplicate {name} positions")
        if sets.tau is not None and sets.tau >= 0 and np.intersect1d(a, b).size:
            problems.append(f"example {i}: A and B overlap")
    return problems


def compatible_with(sets: SelectionSets, dataset) -> bool:
    """Selector transfer needs only matching target lengths (shared tokenizer)."""
    return len(sets) == len(dataset) and all(T == ex.T for T, ex in zip(sets.lengths, dataset))
