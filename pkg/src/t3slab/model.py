"""Tiny causal AR transformer and bidirectional masked denoiser.

Both share one parameter layout (token + position embeddings, pre-norm blocks,
unembedding); the denoiser adds one embedding row for the MASK input token and
drops the causal mask. Heads are kept as separate weight matrices so every
intermediate stays within rank 3 (batch x sequence x feature).
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import ParamVector, Tensor

CKPT_MAGIC = b"T3SCKPT1"
NEG_INF = -1e9


@dataclass(frozen=True)
class ArchConfig:
    vocab_size: int = 64
    embed_dim: int = 32
    num_layers: int = 2
    num_heads: int = 2
    max_seq_len: int = 128
    mlp_ratio: int = 2
    seed: int = 0
    zero_head: bool = False

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.embed_dim < 1 or self.num_heads < 1 or self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.num_layers < 0 or self.max_seq_len < 2 or self.mlp_ratio < 1:
            raise ValueError("num_layers >= 0, max_seq_len >= 2 and mlp_ratio >= 1 required")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    def to_lines(self) -> list[str]:
        return [f"{k}={v}" for k, v in asdict(self).items()]

    @classmethod
    def from_mapping(cls, kv: dict[str, str]) -> "ArchConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        unknown = set(kv) - set(kinds)
        if unknown:
            raise ValueError(f"unknown arch keys: {sorted(unknown)}")
        out = {}
        for k, v in kv.items():
            out[k] = v.strip().lower() in ("1", "true", "yes") if kinds[k] in (bool, "bool") else int(v)
        return cls(**out)


def init_params(cfg: ArchConfig, denoiser: bool = False) -> ParamVector:
    """Scaled-uniform initialization, reproducible from ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    D, V, H, dh = cfg.embed_dim, cfg.vocab_size, cfg.num_heads, cfg.head_dim
    hidden = cfg.mlp_ratio * D

    def u(shape, fan_in):
        s = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-s, s, size=shape)

    p: OrderedDict[str, np.ndarray] = OrderedDict()
    p["tok_emb"] = rng.uniform(-0.5, 0.5, size=(V + (1 if denoiser else 0), D))
    p["pos_emb"] = rng.uniform(-0.1, 0.1, size=(cfg.max_seq_len, D))
    for layer in range(cfg.num_layers):
        pre = f"l{layer}."
        p[pre + "ln1"] = np.ones(D)
        for h in range(H):
            p[pre + f"wq{h}"] = u((D, dh), D)
            p[pre + f"wk{h}"] = u((D, dh), D)
            p[pre + f"wv{h}"] = u((D, dh), D)
            p[pre + f"wo{h}"] = u((dh, D), D)
        p[pre + "ln2"] = np.ones(D)
        p[pre + "w1"] = u((D, hidden), D)
        p[pre + "b1"] = np.zeros(hidden)
        p[pre + "w2"] = u((hidden, D), hidden)
        p[pre + "b2"] = np.zeros(D)
    p["ln_f"] = np.ones(D)
    p["unembed"] = np.zeros((D, V)) if cfg.zero_head else u((D, V), D)
    return ParamVector(p)


class _Transformer:
    causal: bool

    def __init__(self, cfg: ArchConfig, params: ParamVector | None = None):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, denoiser=not self.causal)
        expected = init_params_layout(cfg, denoiser=not self.causal)
        if self.params.layout != expected:
            raise ValueError("parameter layout does not match the architecture config")

    def with_params(self, params) -> "_Transformer":
        if isinstance(params, np.ndarray):
            params = self.params.unflatten(params)
        return type(self)(self.cfg, params)

    def forward(self, ids: np.ndarray, key_valid: np.ndarray | None = None,
                tensors: "OrderedDict[str, Tensor] | None" = None) -> Tensor:
        """Log-probabilities (B, L, V) for integer ``ids`` of shape (B, L).

        ``key_valid`` (B, L) marks attendable positions (False for padding).
        ``tensors`` supplies leaf tensors when gradients are wanted.
        """
        cfg = self.cfg
        ids = np.asarray(ids)
        if ids.ndim != 2:
            raise nx.ShapeError(f"ids must be (batch, length), got {ids.shape}")
        B, L = ids.shape
        if L > cfg.max_seq_len:
            raise ValueError(f"sequence length {L} exceeds max_seq_len {cfg.max_seq_len}")
        t = tensors if tensors is not None else OrderedDict(
            (k, Tensor(v)) for k, v in self.params.arrays.items())

        bias = np.zeros((1, L, L))
        if self.causal:
            bias = bias + np.triu(np.full((L, L), NEG_INF), k=1)
        if key_valid is not None:
            bias = bias + np.where(np.asarray(key_valid, bool)[:, None, :], 0.0, NEG_INF)
        bias_t = Tensor(bias)
        inv_sqrt = 1.0 / math.sqrt(cfg.head_dim)

        x = nx.add(nx.embed(t["tok_emb"], ids), nx.embed(t["pos_emb"], np.arange(L)))
        for layer in range(cfg.num_layers):
            pre = f"l{layer}."
            h = nx.mul(nx.rmsnorm(x), t[pre + "ln1"])
            attn = None
            for j in range(cfg.num_heads):
                q = nx.matmul(h, t[pre + f"wq{j}"])
                k = nx.matmul(h, t[pre + f"wk{j}"])
                v = nx.matmul(h, t[pre + f"wv{j}"])
                scores = nx.add(nx.scale(nx.matmul(q, nx.transpose(k)), inv_sqrt), bias_t)
                head = nx.matmul(nx.matmul(nx.softmax(scores), v), t[pre + f"wo{j}"])
                attn = head if attn is None else nx.add(attn, head)
            x = nx.add(x, attn)
            h = nx.mul(nx.rmsnorm(x), t[pre + "ln2"])
            h = nx.gelu(nx.add(nx.matmul(h, t[pre + "w1"]), t[pre + "b1"]))
            x = nx.add(x, nx.add(nx.matmul(h, t[pre + "w2"]), t[pre + "b2"]))
        x = nx.mul(nx.rmsnorm(x), t["ln_f"])
        return nx.log_softmax(nx.matmul(x, t["unembed"]))


def init_params_layout(cfg: ArchConfig, denoiser: bool) -> list[tuple[str, tuple[int, ...]]]:
    D, V, dh, hidden = cfg.embed_dim, cfg.vocab_size, cfg.head_dim, cfg.mlp_ratio * cfg.embed_dim
    out = [("tok_emb", (V + (1 if denoiser else 0), D)), ("pos_emb", (cfg.max_seq_len, D))]
    for layer in range(cfg.num_layers):
        pre = f"l{layer}."
        out.append((pre + "ln1", (D,)))
        for h in range(cfg.num_heads):
            out += [(pre + f"wq{h}", (D, dh)), (pre + f"wk{h}", (D, dh)),
                    (pre + f"wv{h}", (D, dh)), (pre + f"wo{h}", (dh, D))]
        out += [(pre + "ln2", (D,)), (pre + "w1", (D, hidden)), (pre + "b1", (hidden,)),
                (pre + "w2", (hidden, D)), (pre + "b2", (D,))]
    out += [("ln_f", (D,)), ("unembed", (D, V))]
    return out


class ARModel(_Transformer):
    causal = True


class DenoiserModel(_Transformer):
    causal = False

    @property
    def mask_id(self) -> int:
        return self.cfg.vocab_size


# ---------------------------------------------------------------------------
# batching helpers
# ---------------------------------------------------------------------------


def _check_tokens(cfg: ArchConfig, tokens: Sequence[int], what: str) -> None:
    arr = np.asarray(tokens)
    if arr.size and (arr.min() < 0 or arr.max() >= cfg.vocab_size):
        raise ValueError(f"{what} contains a token outside the vocabulary of size {cfg.vocab_size}")


def ar_batch(cfg: ArchConfig, examples: Sequence) -> tuple[np.ndarray, np.ndarray, np.ndarray, list[tuple[int, int]]]:
    """Right-padded inputs for teacher-forced AR scoring.

    Returns ``ids`` (B, L), ``targets`` (B, L) and ``valid`` (B, L) where the
    log-prob of target token ``y_t`` of example ``i`` sits at column
    ``len(prompt_i) - 1 + t``; ``spans[i]`` gives that (start, T) pair.
    """
    seqs, spans = [], []
    for ex in examples:
        _check_tokens(cfg, ex.prompt, "prompt")
        _check_tokens(cfg, ex.target, "target")
        if len(ex.prompt) < 1:
            raise ValueError("prompt must be non-empty")
        s = list(ex.prompt) + list(ex.target)
        if len(s) > cfg.max_seq_len + 1:
            raise ValueError(f"example of length {len(s)} does not fit max_seq_len {cfg.max_seq_len}")
        seqs.append(s)
        spans.append((len(ex.prompt) - 1, len(ex.target)))
    L = max(len(s) for s in seqs) - 1
    B = len(seqs)
    ids = np.zeros((B, L), dtype=np.int64)
    targets = np.zeros((B, L), dtype=np.int64)
    valid = np.zeros((B, L), dtype=bool)
    for i, s in enumerate(seqs):
        n = len(s) - 1
        ids[i, :n] = s[:-1]
        targets[i, :n] = s[1:]
        start, T = spans[i]
        valid[i, start:start + T] = True
    return ids, targets, valid, spans


def scatter_weights(shape: tuple[int, int], spans, weights: Sequence[np.ndarray]) -> np.ndarray:
    """Place per-example target weight vectors into the padded (B, L) grid."""
    W = np.zeros(shape)
    for i, ((start, T), w) in enumerate(zip(spans, weights)):
        w = np.asarray(w, dtype=np.float64)
        if w.shape != (T,):
            raise nx.ShapeError(f"weight vector of shape {w.shape} does not match target length {T}")
        W[i, start:start + T] = w
    return W


def ar_batch_logprobs(model: ARModel, examples: Sequence) -> list[np.ndarray]:
    """Per-example vectors of log p(y_t | y_<t, x); no graph is kept."""
    ids, targets, _, spans = ar_batch(model.cfg, examples)
    lp = model.forward(ids).data
    picked = np.take_along_axis(lp, targets[..., None], axis=-1)[..., 0]
    return [picked[i, s:s + T].copy() for i, (s, T) in enumerate(spans)]


def ar_token_logprobs(model: ARModel, example) -> np.ndarray:
    return ar_batch_logprobs(model, [example])[0]


def _argmax_lowest(row: np.ndarray) -> int:
    # np.argmax already returns the first (lowest) index among ties
    return int(np.argmax(row))


def ar_greedy_decode_batch(model: ARModel, prompts: Sequence[Sequence[int]], max_new: int,
                           eos_id: int) -> list[list[int]]:
    """Greedy decoding for many prompts; prompts of equal length advance in lockstep."""
    out: list[list[int] | None] = [None] * len(prompts)
    groups: dict[int, list[int]] = {}
    for i, p in enumerate(prompts):
        if len(p) == 0:
            raise ValueError("prompt must be non-empty")
        _check_tokens(model.cfg, p, "prompt")
        groups.setdefault(len(p), []).append(i)
    for plen, idx in sorted(groups.items()):
        seq = np.array([list(prompts[i]) for i in idx], dtype=np.int64)
        done = np.zeros(len(idx), dtype=bool)
        gen = [[] for _ in idx]
        steps = min(max_new, model.cfg.max_seq_len - plen + 1)
        for _ in range(max(steps, 0)):
            if done.all():
                break
            lp = model.forward(seq[:, -model.cfg.max_seq_len:]).data[:, -1, :]
            nxt = lp.argmax(axis=-1)
            for r, tok in enumerate(nxt):
                if not done[r]:
                    if tok == eos_id:
                        done[r] = True
                    else:
                        gen[r].append(int(tok))
            seq = np.concatenate([seq, nxt[:, None]], axis=1)
            if seq.shape[1] > model.cfg.max_seq_len:
                break
        for r, i in enumerate(idx):
            out[i] = gen[r]
    return out  # type: ignore[return-value]


def ar_greedy_decode(model: ARModel, prompt: Sequence[int], max_new: int, eos_id: int) -> list[int]:
    return ar_greedy_decode_batch(model, [prompt], max_new, eos_id)[0]


def denoiser_batch(model: DenoiserModel, examples: Sequence, masks: Sequence[np.ndarray]):
    """Inputs with masked target positions replaced by the MASK embedding row.

    Returns ``ids`` (B, L), ``targets`` (B, L), ``scored`` (B, L) bool, ``valid``
    key mask (B, L), and ``spans`` of (prompt_len, T).
    """
    cfg = model.cfg
    B = len(examples)
    L = max(len(ex.prompt) + len(ex.target) for ex in examples)
    if L > cfg.max_seq_len:
        raise ValueError(f"example of length {L} does not fit max_seq_len {cfg.max_seq_len}")
    ids = np.zeros((B, L), dtype=np.int64)
    targets = np.zeros((B, L), dtype=np.int64)
    scored = np.zeros((B, L), dtype=bool)
    valid = np.zeros((B, L), dtype=bool)
    spans = []
    for i, (ex, m) in enumerate(zip(examples, masks)):
        _check_tokens(cfg, ex.prompt, "prompt")
        _check_tokens(cfg, ex.target, "target")
        P, T = len(ex.prompt), len(ex.target)
        m = np.asarray(m).astype(bool)
        if m.shape != (T,):
            raise nx.ShapeError(f"mask of shape {m.shape} does not match target length {T}")
        y = np.asarray(ex.target, dtype=np.int64)
        ids[i, :P] = ex.prompt
        ids[i, P:P + T] = np.where(m, model.mask_id, y)
        targets[i, P:P + T] = y
        scored[i, P:P + T] = m
        valid[i, :P + T] = True
        spans.append((P, T))
    return ids, targets, scored, valid, spans


def denoiser_logprobs(model: DenoiserModel, example, mask) -> np.ndarray:
    """log p(y_t | visible, x, m) at each masked target position, in position order."""
    m = np.asarray(mask).astype(bool)
    if not m.any():
        if m.shape != (len(example.target),):
            raise nx.ShapeError(f"mask of shape {m.shape} does not match target length {len(example.target)}")
        return np.zeros(0)
    ids, targets, scored, valid, _ = denoiser_batch(model, [example], [m])
    lp = model.forward(ids, key_valid=valid).data
    picked = np.take_along_axis(lp, targets[..., None], axis=-1)[..., 0]
    return picked[0][scored[0]]


def denoiser_iterative_decode_batch(model: DenoiserModel, prompts: Sequence[Sequence[int]],
                                    lengths: Sequence[int], steps: int) -> list[list[int]]:
    """Confidence-ordered unmasking; each step reveals up to ceil(T/steps) positions.

    Among still-masked positions the most confident (max log-prob) are filled
    first, ties going to the lower position.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    out: list[list[int] | None] = [None] * len(prompts)
    groups: dict[tuple[int, int], list[int]] = {}
    for i, (p, T) in enumerate(zip(prompts, lengths)):
        _check_tokens(model.cfg, p, "prompt")
        groups.setdefault((len(p), int(T)), []).append(i)
    for (P, T), idx in sorted(groups.items()):
        if P + T > model.cfg.max_seq_len:
            raise ValueError(f"prompt+length {P + T} exceeds max_seq_len {model.cfg.max_seq_len}")
        n = len(idx)
        ids = np.full((n, P + T), model.mask_id, dtype=np.int64)
        ids[:, :P] = [list(prompts[i]) for i in idx]
        masked = np.ones((n, T), dtype=bool)
        per_step = math.ceil(T / steps)
        while masked.any():
            lp = model.forward(ids).data[:, P:, :]
            best = lp.argmax(axis=-1)
            conf = lp.max(axis=-1)
            for r in range(n):
                cand = np.flatnonzero(masked[r])
                if cand.size == 0:
                    continue
                order = cand[np.lexsort((cand, -conf[r, cand]))]
                for pos in order[:per_step]:
                    ids[r, P + pos] = best[r, pos]
                    masked[r, pos] = False
        for r, i in enumerate(idx):
            out[i] = [int(v) for v in ids[r, P:]]
    return out  # type: ignore[return-value]


def denoiser_iterative_decode(model: DenoiserModel, prompt: Sequence[int], length: int, steps: int) -> list[int]:
    return denoiser_iterative_decode_batch(model, [prompt], [length], steps)[0]


# ---------------------------------------------------------------------------
# checkpoint files
# ---------------------------------------------------------------------------


def save_checkpoint(path: str | Path, cfg: ArchConfig, params: ParamVector | np.ndarray, kind: str = "ar") -> None:
    """Header (magic, key=value lines, blank line) then little-endian float64 values."""
    flat = params.flatten() if isinstance(params, ParamVector) else np.asarray(params, dtype=np.float64)
    header = [*cfg.to_lines(), f"kind={kind}", f"count={flat.size}"]
    blob = CKPT_MAGIC + b"\n" + ("\n".join(header) + "\n\n").encode("utf-8")
    Path(path).write_bytes(blob + flat.astype("<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[ArchConfig, str, np.ndarray]:
    raw = Path(path).read_bytes()
    if not raw.startswith(CKPT_MAGIC + b"\n"):
        raise ValueError(f"{path}: not a T3SCKPT1 checkpoint")
    end = raw.index(b"\n\n", len(CKPT_MAGIC))
    kv = dict(line.split("=", 1) for line in raw[len(CKPT_MAGIC) + 1:end].decode("utf-8").splitlines())
    kind = kv.pop("kind")
    count = int(kv.pop("count"))
    cfg = ArchConfig.from_mapping(kv)
    flat = np.frombuffer(raw[end + 2:], dtype="<f8").astype(np.float64)
    if flat.size != count:
        raise ValueError(f"{path}: expected {count} values, found {flat.size}")
    return cfg, kind, flat


def load_model(path: str | Path) -> ARModel | DenoiserModel:
    cfg, kind, flat = load_checkpoint(path)
    cls = DenoiserModel if kind == "denoiser" else ARModel
    template = cls(cfg)
    return template.with_params(flat)
