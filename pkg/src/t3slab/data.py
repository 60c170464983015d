"""Synthetic teacher traces for modular-arithmetic chains.

A prompt states the operands and operators; a target walks through the chain
one step at a time in one of two teacher styles and closes with the answer in
an ANSWER-OPEN/ANSWER-CLOSE span. The two styles share task content and differ
only in their connective vocabulary and step template.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

PAD, BOS, EOS, MASK, ANS_OPEN, ANS_CLOSE, SEP, EQ = range(8)
DIGIT0 = 8
OPERATORS = ("+", "-", "*")
OP0 = DIGIT0 + 10
STYLE_BANK_SIZE = 6
STYLE_BANKS = (
    ("so", "then", "next", "now", "thus", "after"),
    ("hence", "giving", "which", "yields", "therefore", "making"),
)
SPACE = OP0 + len(OPERATORS) + STYLE_BANK_SIZE * len(STYLE_BANKS)


class Vocab:
    """Token strings <-> ids. Reserved ids are fixed module constants."""

    def __init__(self):
        names = ["<pad>", "<bos>", "<eos>", "<mask>", "<ans>", "</ans>", "<sep>", "="]
        names += [str(d) for d in range(10)]
        names += list(OPERATORS)
        for bank in STYLE_BANKS:
            names += list(bank)
        names.append("<sp>")
        self.itos: list[str] = names
        self.stoi: dict[str, int] = {s: i for i, s in enumerate(names)}

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, words: Sequence[str]) -> list[int]:
        return [self.stoi[w] for w in words]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.itos[i] if 0 <= i < len(self.itos) else f"<{i}>" for i in ids]

    def style_bank(self, style_id: int) -> list[int]:
        return self.encode(STYLE_BANKS[style_id])

    def op_id(self, op: str) -> int:
        return OP0 + OPERATORS.index(op)


VOCAB = Vocab()


def digits(n: int) -> list[int]:
    return [DIGIT0 + int(c) for c in str(n)]


def apply_op(a: int, op: str, b: int, modulus: int) -> int:
    if op == "+":
        return (a + b) % modulus
    if op == "-":
        return (a - b) % modulus
    if op == "*":
        return (a * b) % modulus
    raise ValueError(f"unknown operator {op!r}")


@dataclass(frozen=True)
class Example:
    prompt: tuple[int, ...]
    target: tuple[int, ...]
    answer_span: tuple[int, int]
    style_id: int
    task_seed: int

    @property
    def T(self) -> int:
        return len(self.target)

    @property
    def answer(self) -> tuple[int, ...]:
        a, b = self.answer_span
        return self.target[a:b]


@dataclass(frozen=True)
class DataConfig:
    num_examples: int = 200
    chain_length: int = 3
    modulus: int = 10
    operators: str = "+-"
    styles: tuple[int, ...] = (0,)

    def validate(self) -> None:
        if not 7 <= self.modulus <= 97:
            raise ValueError(f"modulus must be in [7, 97], got {self.modulus}")
        if not 2 <= self.chain_length <= 12:
            raise ValueError(f"chain_length must be in [2, 12], got {self.chain_length}")
        if self.num_examples < 1:
            raise ValueError("num_examples must be >= 1")
        if not self.operators or any(op not in OPERATORS for op in self.operators):
            raise ValueError(f"operators must be drawn from {''.join(OPERATORS)!r}, got {self.operators!r}")
        if not self.styles or any(s not in range(len(STYLE_BANKS)) for s in self.styles):
            raise ValueError(f"styles must be drawn from {list(range(len(STYLE_BANKS)))}, got {self.styles}")


@dataclass
class Dataset:
    examples: list[Example]
    config: DataConfig | None = None
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.examples)

    def __getitem__(self, i):
        return self.examples[i]

    def __iter__(self):
        return iter(self.examples)

    def digest(self) -> str:
        return hashlib.sha256(format_traces(self.examples).encode("utf-8")).hexdigest()


def parse_prompt(prompt: Sequence[int]) -> tuple[list[int], list[str]]:
    """Recover operands and operators from ``BOS a op b op c ... SEP``."""
    toks = list(prompt)
    if not toks or toks[0] != BOS or toks[-1] != SEP:
        raise ValueError("prompt must be BOS ... SEP")
    operands, ops, cur = [], [], []
    for t in toks[1:-1]:
        if DIGIT0 <= t < DIGIT0 + 10:
            cur.append(str(t - DIGIT0))
        elif OP0 <= t < OP0 + len(OPERATORS):
            operands.append(int("".join(cur)))
            ops.append(OPERATORS[t - OP0])
            cur = []
        else:
            raise ValueError(f"unexpected token id {t} in prompt")
    operands.append(int("".join(cur)))
    return operands, ops


def evaluate_chain(operands: Sequence[int], ops: Sequence[str], modulus: int) -> list[int]:
    """Running results r_1..r_n of the left-to-right chain."""
    acc = operands[0] % modulus
    out = []
    for op, b in zip(ops, operands[1:]):
        acc = apply_op(acc, op, b, modulus)
        out.append(acc)
    return out


def render_target(operands: Sequence[int], ops: Sequence[str], results: Sequence[int], style_id: int) -> tuple[list[int], tuple[int, int]]:
    """Teacher trace in the given style; returns tokens and the answer span.

    Style 0 restates each step in full (``conn a op b = r``); style 1 carries the
    running value implicitly (``conn op b = r``) and closes with a connective.
    """
    bank = VOCAB.style_bank(style_id)
    out: list[int] = []
    prev = operands[0]
    for i, (op, b, r) in enumerate(zip(ops, operands[1:], results)):
        conn = bank[i % (STYLE_BANK_SIZE - 1)]
        if style_id == 0:
            out += [conn, *digits(prev), VOCAB.op_id(op), *digits(b), EQ, *digits(r)]
        else:
            out += [conn, VOCAB.op_id(op), *digits(b), EQ, *digits(r)]
        prev = r
    if style_id == 1:
        out.append(bank[STYLE_BANK_SIZE - 1])
    out.append(ANS_OPEN)
    start = len(out)
    out += digits(results[-1])
    end = len(out)
    out += [ANS_CLOSE, EOS]
    return out, (start, end)


def make_example(operands: Sequence[int], ops: Sequence[str], modulus: int, style_id: int, task_seed: int = 0) -> Example:
    prompt = [BOS]
    for i, a in enumerate(operands):
        if i:
            prompt.append(VOCAB.op_id(ops[i - 1]))
        prompt += digits(a)
    prompt.append(SEP)
    results = evaluate_chain(operands, ops, modulus)
    target, span = render_target(operands, ops, results, style_id)
    return Example(tuple(prompt), tuple(target), span, style_id, task_seed)


def gen_dataset(config: DataConfig, seed: int) -> Dataset:
    """Deterministic dataset; example ``i`` uses task seed ``seed * 1_000_003 + i``.

    Styles cycle through ``config.styles`` so a two-style config alternates teachers
    on identical task distributions.
    """
    config.validate()
    examples = []
    for i in range(config.num_examples):
        task_seed = seed * 1_000_003 + i
        rng = np.random.default_rng(task_seed)
        operands = [int(v) for v in rng.integers(0, config.modulus, size=config.chain_length)]
        ops = [config.operators[int(j)] for j in rng.integers(0, len(config.operators), size=config.chain_length - 1)]
        style = config.styles[i % len(config.styles)]
        examples.append(make_example(operands, ops, config.modulus, style, task_seed))
    return Dataset(examples, config, seed)


def restyle(dataset: Dataset, style_id: int) -> Dataset:
    """Same tasks, traces rewritten in another teacher style."""
    cfg = dataset.config
    out = []
    for ex in dataset.examples:
        operands, ops = parse_prompt(ex.prompt)
        out.append(make_example(operands, ops, cfg.modulus, style_id, ex.task_seed))
    new_cfg = DataConfig(cfg.num_examples, cfg.chain_length, cfg.modulus, cfg.operators, (style_id,)) if cfg else None
    return Dataset(out, new_cfg, dataset.seed)


def verify_answer(decoded: Sequence[int], example: Example) -> bool:
    """Exact match of the first answer span in ``decoded`` against the gold answer."""
    toks = list(decoded)
    try:
        a = toks.index(ANS_OPEN)
        b = toks.index(ANS_CLOSE, a + 1)
    except ValueError:
        return False
    return tuple(toks[a + 1:b]) == example.answer


@dataclass(frozen=True)
class DecodeConfig:
    steps: int = 0  # denoiser only; 0 means one step per target position
    slack: int = 4  # AR only; extra tokens beyond the longest target


def decode_all(model, examples: Sequence[Example], cfg: DecodeConfig | None = None) -> list[list[int]]:
    from .model import ARModel, DenoiserModel, ar_greedy_decode_batch, denoiser_iterative_decode_batch

    cfg = cfg or DecodeConfig()
    if isinstance(model, DenoiserModel):
        lengths = [ex.T for ex in examples]
        steps = cfg.steps if cfg.steps > 0 else max(lengths)
        return denoiser_iterative_decode_batch(model, [ex.prompt for ex in examples], lengths, steps)
    if isinstance(model, ARModel):
        max_new = max(ex.T for ex in examples) + cfg.slack
        return ar_greedy_decode_batch(model, [ex.prompt for ex in examples], max_new, EOS)
    raise TypeError(f"unsupported model type {type(model).__name__}")


def train_accuracy(model, dataset: Sequence[Example], decode_cfg: DecodeConfig | None = None) -> float:
    examples = list(dataset)
    if not examples:
        raise ValueError("dataset is empty")
    decoded = decode_all(model, examples, decode_cfg)
    return sum(verify_answer(d, ex) for d, ex in zip(decoded, examples)) / len(examples)


# ---------------------------------------------------------------------------
# trace files
# ---------------------------------------------------------------------------


def format_traces(examples: Sequence[Example]) -> str:
    lines = []
    for ex in examples:
        lines.append("\t".join([
            str(ex.style_id), str(ex.task_seed),
            " ".join(map(str, ex.prompt)), " ".join(map(str, ex.target)),
            f"{ex.answer_span[0]}:{ex.answer_span[1]}",
        ]))
    return "".join(line + "\n" for line in lines)


def write_traces(path: str | Path, examples: Sequence[Example]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_traces(examples))


def read_traces(path: str | Path) -> list[Example]:
    out = []
    with open(path, encoding="utf-8", newline="\n") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise ValueError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(parts)}")
            style, seed, prompt, target, span = parts
            a, b = (int(v) for v in span.split(":"))
            tgt = tuple(int(v) for v in target.split())
            if not 0 <= a < b <= len(tgt):
                raise ValueError(f"{path}:{lineno}: answer span {a}:{b} outside target of length {len(tgt)}")
            out.append(Example(tuple(int(v) for v in prompt.split()), tgt, (a, b), int(style), int(seed)))
    return out
