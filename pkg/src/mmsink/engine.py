"""Deterministic decoder-only transformer over a retained KV cache.

The model is intentionally small: pre-norm blocks, learned absolute position
embeddings indexed by cache position, float64 arithmetic throughout. One
forward step attends only over the entries a retention policy kept, so the
same weights can be driven under dense, window, sink, or mmsink caching and
compared step for step.

Positions are cache-relative: a token entering a cache that currently holds
``c`` entries is embedded at position index ``c``. While nothing has been
evicted this equals the token's original position, which is what makes
pruned-cache runs bitwise identical to dense runs inside the window.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, asdict
from typing import Callable, Iterable, Sequence

import json

import numpy as np

from .cachepolicy import CachePolicy, KvCache
from .errors import ConfigError, SequenceGrammarError, StateError
from .seqmodel import (
    N_PUNCT,
    N_SPECIALS,
    MultimodalSequence,
    Token,
    TokenKind,
    token_from_vocab_id,
    token_label,
    vocab_id,
    vocab_size,
)

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


# -- numeric primitives (float64, shared with the training code) -------------

def gelu(x: np.ndarray) -> np.ndarray:
    u = _GELU_C * (x + 0.044715 * x**3)
    return 0.5 * x * (1.0 + np.tanh(u))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    u = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(u)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * _GELU_C * (1.0 + 3 * 0.044715 * x**2)


def layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    """Normalize over the last axis. Returns (y, cache) for the backward pass."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def layer_norm_grad(dy: np.ndarray, cache, g: np.ndarray):
    xhat, inv = cache
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    mean1 = dxhat.mean(axis=-1, keepdims=True)
    mean2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - mean1 - xhat * mean2)
    return dx, dg, db


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    s = x - x.max(axis=axis, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    s = x - x.max(axis=axis, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=axis, keepdims=True))


# -- model --------------------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    heads: int = 2
    d_model: int = 64
    d_ff: int = 256
    v_text: int = 256
    m: int = 8
    q_queries: int = 4
    d_feat: int = 16
    max_positions: int = 4096
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("layers", "heads", "d_model", "d_ff", "v_text", "m",
                     "q_queries", "d_feat", "max_positions"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.d_model % self.heads:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by heads {self.heads}"
            )

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads

    @property
    def vocab(self) -> int:
        return vocab_size(self.m, self.v_text)


def _layer_param_names(l: int) -> list[str]:
    return [
        f"l{l}.ln1_g", f"l{l}.ln1_b",
        f"l{l}.wq", f"l{l}.wk", f"l{l}.wv", f"l{l}.wo",
        f"l{l}.ln2_g", f"l{l}.ln2_b",
        f"l{l}.w1", f"l{l}.w2",
    ]


def param_names(config: ModelConfig) -> list[str]:
    names = ["tok_emb", "pos_emb", "queries"]
    for l in range(config.layers):
        names.extend(_layer_param_names(l))
    names.extend(["lnf_g", "lnf_b", "w_out", "w_feat"])
    return names


class Model:
    """Immutable-by-convention weight container. Training makes a copy."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.p = params

    @staticmethod
    def init(config: ModelConfig) -> "Model":
        rng = np.random.default_rng(config.seed)
        d, ff = config.d_model, config.d_ff
        scale = 0.02

        def w(*shape):
            return rng.standard_normal(shape) * scale

        p: dict[str, np.ndarray] = {
            "tok_emb": w(config.vocab, d),
            "pos_emb": w(config.max_positions, d),
            "queries": w(config.q_queries, d),
        }
        for l in range(config.layers):
            p[f"l{l}.ln1_g"] = np.ones(d)
            p[f"l{l}.ln1_b"] = np.zeros(d)
            p[f"l{l}.wq"] = w(d, d)
            p[f"l{l}.wk"] = w(d, d)
            p[f"l{l}.wv"] = w(d, d)
            p[f"l{l}.wo"] = w(d, d)
            p[f"l{l}.ln2_g"] = np.ones(d)
            p[f"l{l}.ln2_b"] = np.zeros(d)
            p[f"l{l}.w1"] = w(d, ff)
            p[f"l{l}.w2"] = w(ff, d)
        p["lnf_g"] = np.ones(d)
        p["lnf_b"] = np.zeros(d)
        p["w_out"] = w(d, config.vocab)
        p["w_feat"] = w(d, config.d_feat)
        return Model(config, p)

    def copy(self) -> "Model":
        return Model(self.config, {k: v.copy() for k, v in self.p.items()})


def make_cache(model: Model, policy: CachePolicy, strict: bool = True) -> KvCache:
    c = model.config
    return KvCache(policy, c.layers, c.heads, c.d_head, c.m, strict=strict)


def save_model(model: Model, path) -> None:
    """Serialize config plus flat row-major weight arrays to JSON."""
    payload = {
        "format": "mmsink-model-v1",
        "config": asdict(model.config),
        "weights": {
            name: {
                "shape": list(model.p[name].shape),
                "data": [float(x) for x in model.p[name].ravel()],
            }
            for name in param_names(model.config)
        },
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def load_model(path) -> Model:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != "mmsink-model-v1":
        raise ConfigError(f"{path}: not a model file")
    config = ModelConfig(**payload["config"])
    params: dict[str, np.ndarray] = {}
    for name in param_names(config):
        if name not in payload["weights"]:
            raise ConfigError(f"{path}: missing weight {name}")
        entry = payload["weights"][name]
        arr = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        if not np.all(np.isfinite(arr)):
            raise ConfigError(f"{path}: non-finite values in {name}")
        params[name] = arr
    return Model(config, params)


# -- single-step forward -------------------------------------------------------

@dataclass
class StepResult:
    logits: np.ndarray                  # (vocab,)
    hidden: np.ndarray                  # (d_model,)
    attention: list[np.ndarray]         # per layer: (heads, retained + 1)


def forward_step(model: Model, cache: KvCache, token: Token) -> StepResult:
    """Run one token through the stack, attending over the retained entries
    plus itself, then push its per-layer keys/values into the cache.

    Every attention row is a softmax over (cache entries, self), so it is
    non-negative and sums to one; causality holds because every cache entry
    is strictly older than the incoming token.
    """
    cfg = model.config
    p = model.p
    H, dh = cfg.heads, cfg.d_head
    if (cache.layers, cache.heads, cache.d_head, cache.m) != (cfg.layers, H, dh, cfg.m):
        raise ValueError(
            f"cache dimensions (L={cache.layers}, H={cache.heads}, d_head={cache.d_head}, "
            f"m={cache.m}) do not match the model"
        )
    c = cache.size
    if c >= cfg.max_positions:
        raise StateError(
            f"cache position {c} exceeds the position table ({cfg.max_positions})"
        )
    scale = math.sqrt(dh)

    x = p["tok_emb"][vocab_id(token, cfg.m, cfg.v_text)] + p["pos_emb"][c]
    k_new = np.empty((cfg.layers, H, dh))
    v_new = np.empty((cfg.layers, H, dh))
    rows: list[np.ndarray] = []
    for l in range(cfg.layers):
        a, _ = layer_norm(x, p[f"l{l}.ln1_g"], p[f"l{l}.ln1_b"])
        q = (a @ p[f"l{l}.wq"]).reshape(H, dh)
        k = (a @ p[f"l{l}.wk"]).reshape(H, dh)
        v = (a @ p[f"l{l}.wv"]).reshape(H, dh)
        keys = np.concatenate([cache.keys(l), k[:, None, :]], axis=1)
        vals = np.concatenate([cache.values(l), v[:, None, :]], axis=1)
        s = np.einsum("hd,hkd->hk", q, keys) / scale
        row = softmax(s, axis=1)
        ctx = np.einsum("hk,hkd->hd", row, vals).reshape(cfg.d_model)
        x = x + ctx @ p[f"l{l}.wo"]
        b, _ = layer_norm(x, p[f"l{l}.ln2_g"], p[f"l{l}.ln2_b"])
        x = x + gelu(b @ p[f"l{l}.w1"]) @ p[f"l{l}.w2"]
        k_new[l], v_new[l] = k, v
        rows.append(row)
    hf, _ = layer_norm(x, p["lnf_g"], p["lnf_b"])
    logits = hf @ p["w_out"]
    cache.push(token, k_new, v_new)
    return StepResult(logits, hf, rows)


def predict_image_features(model: Model, cache: KvCache) -> np.ndarray:
    """Run the learnable queries over the retained entries and map each
    output latent to feature space. Shape (q_queries, d_feat).

    Legal only when the cache ends right after a begin-of-image marker.
    The queries read the cache but never enter it.
    """
    if not (cache.in_block and cache.next_slot == 0):
        raise StateError("image feature prediction requires a freshly opened image block")
    cfg = model.config
    p = model.p
    H, dh, Q = cfg.heads, cfg.d_head, cfg.q_queries
    c = cache.size
    if c + Q > cfg.max_positions:
        raise StateError(
            f"query positions {c}..{c + Q - 1} exceed the position table"
        )
    scale = math.sqrt(dh)

    x = p["queries"] + p["pos_emb"][c : c + Q]
    for l in range(cfg.layers):
        a, _ = layer_norm(x, p[f"l{l}.ln1_g"], p[f"l{l}.ln1_b"])
        q = (a @ p[f"l{l}.wq"]).reshape(Q, H, dh).transpose(1, 0, 2)
        s = np.einsum("hqd,hkd->hqk", q, cache.keys(l)) / scale
        row = softmax(s, axis=2)
        ctx = np.einsum("hqk,hkd->hqd", row, cache.values(l))
        ctx = ctx.transpose(1, 0, 2).reshape(Q, cfg.d_model)
        x = x + ctx @ p[f"l{l}.wo"]
        b, _ = layer_norm(x, p[f"l{l}.ln2_g"], p[f"l{l}.ln2_b"])
        x = x + gelu(b @ p[f"l{l}.w1"]) @ p[f"l{l}.w2"]
    hf, _ = layer_norm(x, p["lnf_g"], p["lnf_b"])
    return hf @ p["w_feat"]


# -- generation ----------------------------------------------------------------

@dataclass
class GenerationTrace:
    entry_counts: list[int] = field(default_factory=list)
    step_seconds: list[float] = field(default_factory=list)
    violations: list[str] = field(default_factory=list)
    attention_dumps: list[dict] = field(default_factory=list)
    predicted_features: list[tuple[int, np.ndarray]] = field(default_factory=list)
    forced_completion_steps: int = 0


@dataclass
class GenerationResult:
    tokens: list[Token]
    generated: list[Token]
    sequence: MultimodalSequence | None
    trace: GenerationTrace
    captured_logits: dict[int, np.ndarray]
    peak_entries: int


def _legal_vocab_ids(cache: KvCache, cfg: ModelConfig, force_boi: bool) -> list[int]:
    if cache.in_block:
        s = cache.next_slot
        if s < cfg.m:
            return [N_SPECIALS + s]
        return [3]  # end-of-image marker
    if force_boi:
        return [2]
    word_base = N_SPECIALS + cfg.m + N_PUNCT
    return [2] + list(range(N_SPECIALS + cfg.m, word_base + cfg.v_text))


def _sample(
    logits: np.ndarray,
    legal: list[int] | None,
    temperature: float | None,
    rng: np.random.Generator,
) -> int:
    if legal is not None:
        masked = np.full_like(logits, -np.inf)
        masked[legal] = logits[legal]
    else:
        masked = logits
    if temperature is None:
        return int(np.argmax(masked))
    probs = softmax(masked / temperature)
    return int(rng.choice(len(probs), p=probs))


def _dump_rows(step: StepResult, labels: list[str], positions: list[int], t_after: int) -> list[dict]:
    records = []
    for l, rows in enumerate(step.attention):
        for h in range(rows.shape[0]):
            records.append(
                {
                    "t": t_after,
                    "layer": l,
                    "head": h,
                    "labels": labels,
                    "positions": positions,
                    "row": [float(x) for x in rows[h]],
                }
            )
    return records


def generate(
    model: Model,
    prompt: MultimodalSequence,
    policy: CachePolicy,
    steps: int,
    mode: str = "constrained",
    seed: int = 0,
    temperature: float | None = None,
    attn_dump: bool = False,
    predict_features: bool = False,
    boi_every: int | None = None,
    capture_at: Iterable[int] = (),
    on_step: Callable[[KvCache], None] | None = None,
) -> GenerationResult:
    """Autoregressive generation under a retention policy.

    In constrained mode a grammar mask keeps the output structurally valid:
    image blocks, once opened, always run through their slots to the end
    marker, and begin/end-of-sequence tokens are never sampled (the harness
    targets fixed-length runs). If the step budget ends mid-block the block
    is completed anyway and the extra steps are reported on the trace.
    ``boi_every`` forces a block start every so many steps, which gives
    benchmarks a guaranteed block cadence.

    In free mode tokens are sampled from the unmasked distribution and
    structural violations are recorded, never repaired.
    """
    if mode not in ("constrained", "free"):
        raise ConfigError(f"unknown generation mode {mode!r}")
    if steps < 0:
        raise ConfigError("steps must be non-negative")
    if prompt.m != model.config.m:
        raise ConfigError(
            f"prompt block length {prompt.m} differs from model block length {model.config.m}"
        )
    cfg = model.config
    constrained = mode == "constrained"
    cache = make_cache(model, policy, strict=constrained)
    rng = np.random.default_rng(seed)
    trace = GenerationTrace()
    capture = set(capture_at)
    captured: dict[int, np.ndarray] = {}
    last: StepResult | None = None

    def feed(token: Token) -> StepResult:
        # Dump metadata snapshots the pre-push keys (retained entries + the
        # incoming token); eviction may remove some of them right after.
        if attn_dump:
            labels = [token_label(tk) for tk in cache.tokens()] + [token_label(token)]
            positions = cache.positions() + [cache.t]
        step = forward_step(model, cache, token)
        if attn_dump:
            trace.attention_dumps.extend(_dump_rows(step, labels, positions, cache.t))
        if cache.t in capture:
            captured[cache.t] = step.logits.copy()
        if on_step is not None:
            on_step(cache)
        return step

    for token in prompt.tokens:
        last = feed(token)

    tokens = list(prompt.tokens)
    generated: list[Token] = []

    def one_step(force_boi: bool, forced_only: bool) -> Token:
        nonlocal last
        t0 = time.perf_counter()
        legal = _legal_vocab_ids(cache, cfg, force_boi) if (constrained or forced_only) else None
        vid = _sample(last.logits, legal, temperature, rng)
        token = token_from_vocab_id(vid, cfg.m, cfg.v_text)
        was_boi = token.kind is TokenKind.BOI
        last = feed(token)
        trace.step_seconds.append(time.perf_counter() - t0)
        trace.entry_counts.append(cache.size)
        if predict_features and was_boi and cache.in_block:
            feats = predict_image_features(model, cache)
            trace.predicted_features.append((cache.t - 1, feats))
        return token

    for i in range(steps):
        force = bool(constrained and boi_every and not cache.in_block and i % boi_every == 0)
        token = one_step(force, forced_only=False)
        generated.append(token)
        tokens.append(token)

    if constrained:
        while cache.in_block:
            token = one_step(False, forced_only=True)
            generated.append(token)
            tokens.append(token)
            trace.forced_completion_steps += 1

    trace.violations = list(cache.violations)
    try:
        sequence = MultimodalSequence.from_tokens(tokens, cfg.m)
    except SequenceGrammarError:
        sequence = None
    return GenerationResult(tokens, generated, sequence, trace, captured, cache.peak_entries)


def block_validity(tokens: Sequence[Token], m: int) -> tuple[int, int]:
    """Count attempted and grammatically valid image blocks in a raw stream.

    A block attempt starts at each begin-of-image marker; it is valid when
    followed by slots 0..m-1 in order and the end marker.
    """
    attempted = valid = 0
    i = 0
    n = len(tokens)
    while i < n:
        if tokens[i].kind is TokenKind.BOI:
            attempted += 1
            ok = True
            j = i + 1
            for s in range(m):
                if j >= n or tokens[j].kind is not TokenKind.IMG or tokens[j].value != s:
                    ok = False
                    break
                j += 1
            if ok and (j >= n or tokens[j].kind is not TokenKind.EOI):
                ok = False
            if ok:
                valid += 1
                i = j + 1
                continue
        i += 1
    return attempted, valid


@dataclass
class CheckpointDivergence:
    t: int
    max_abs_logit_diff: float
    kl: float


def teacher_forced_logits(
    model: Model,
    tokens: Sequence[Token],
    policy: CachePolicy,
    checkpoints: Iterable[int],
    strict: bool = True,
) -> tuple[dict[int, np.ndarray], int]:
    """Replay a fixed token stream under a policy.

    Returns logits keyed by prefix length for each requested checkpoint,
    plus the peak retained-entry count of the replay.
    """
    wanted = set(checkpoints)
    bad = [t for t in wanted if t < 1 or t > len(tokens)]
    if bad:
        raise ValueError(f"checkpoints {sorted(bad)} outside 1..{len(tokens)}")
    cache = make_cache(model, policy, strict=strict)
    out: dict[int, np.ndarray] = {}
    for token in tokens:
        step = forward_step(model, cache, token)
        if cache.t in wanted:
            out[cache.t] = step.logits.copy()
    return out, cache.peak_entries


def dense_oracle_divergence(
    model: Model,
    prompt: MultimodalSequence,
    policy: CachePolicy,
    checkpoints: Sequence[int],
    steps: int | None = None,
    seed: int = 0,
) -> list[CheckpointDivergence]:
    """Logit divergence of a pruned-cache replay against the dense run.

    The dense run generates the trajectory (constrained, argmax); the policy
    then replays the identical tokens. Checkpoints are prefix lengths,
    prompt included. KL is taken between the post-softmax distributions,
    dense against policy.
    """
    if not checkpoints:
        raise ValueError("at least one checkpoint required")
    if steps is None:
        steps = max(checkpoints) - len(prompt)
    if steps < 0 or max(checkpoints) > len(prompt) + steps:
        raise ValueError("checkpoints exceed the total run length")
    dense_run = generate(
        model, prompt, CachePolicy.dense(), steps,
        mode="constrained", seed=seed, capture_at=checkpoints,
    )
    trajectory = dense_run.tokens
    policy_logits, _ = teacher_forced_logits(model, trajectory, policy, checkpoints)
    results = []
    for t in sorted(set(checkpoints)):
        a = dense_run.captured_logits[t]
        b = policy_logits[t]
        diff = float(np.max(np.abs(a - b)))
        pa = softmax(a)
        kl = float(np.sum(pa * (log_softmax(a) - log_softmax(b))))
        results.append(CheckpointDivergence(t, diff, kl))
    return results
