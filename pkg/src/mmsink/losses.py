"""Dual training objective: next-token cross entropy plus cosine feature
regression, with analytic gradients and a toy gradient-descent loop.

The forward pass mirrors the engine's step-by-step arithmetic as a full
teacher-forced sequence pass (dense attention, causal mask). Text targets
are the loss-masked tokens, each predicted from the hidden state one
position earlier. For every loss-masked image block the learnable queries
attend over the prefix ending at the block's begin marker and their output
latents are regressed onto the block's target feature vector, one cosine
term per query row, averaged.

The backward pass is written by hand; the query branches feed gradient back
into the main stream through the keys and values they attended to.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .engine import (
    Model,
    gelu,
    gelu_grad,
    layer_norm,
    layer_norm_grad,
    log_softmax,
    param_names,
    softmax,
)
from .errors import StateError, TrainingDiverged
from .seqmodel import Story, TrainingSample, assemble_training_sequence, vocab_id

_ZERO_NORM_TOL = 1e-300


@dataclass(frozen=True)
class LossReport:
    ce: float
    img: float
    combined: float
    n_text_targets: int
    n_image_blocks: int
    n_zero_pred_rows: int = 0


def text_ce_loss(logits: np.ndarray, targets: np.ndarray) -> float:
    """Mean negative log-likelihood over rows of ``logits``.

    ``logits`` has one row per loss-masked position; ``targets`` the matching
    vocabulary indices.
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets)
    if logits.ndim != 2 or len(targets) != logits.shape[0]:
        raise ValueError("logits must be (positions, vocab) matching targets")
    if logits.shape[0] == 0:
        raise ValueError("no masked positions")
    if targets.min() < 0 or targets.max() >= logits.shape[1]:
        raise ValueError("target id outside the vocabulary")
    lsm = log_softmax(logits, axis=1)
    return float(-lsm[np.arange(len(targets)), targets].mean())


def _cosine_rows(pred: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row (1 - cosine) losses and the zero-norm-prediction row mask."""
    pn = np.linalg.norm(pred, axis=1)
    tn = np.linalg.norm(target, axis=1)
    if np.any(tn <= _ZERO_NORM_TOL):
        raise ValueError("target rows must have nonzero norm")
    zero = pn <= _ZERO_NORM_TOL
    safe_pn = np.where(zero, 1.0, pn)
    cos = (pred * target).sum(axis=1) / (safe_pn * tn)
    cos = np.where(zero, 0.0, cos)
    return 1.0 - cos, zero


def image_regression_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean over rows of one minus the cosine between prediction and target.

    Zero-norm prediction rows contribute loss 1 (their cosine is defined as
    zero); zero-norm target rows are a contract violation.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.ndim != 2:
        raise ValueError(f"shape mismatch: pred {pred.shape}, target {target.shape}")
    row_losses, _ = _cosine_rows(pred, target)
    return float(row_losses.mean())


def combined_loss(ce: float, img: float, lam: float) -> float:
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return ce + lam * img


# -- full-sequence forward/backward ---------------------------------------------

def _main_forward(model: Model, ids: np.ndarray):
    """Teacher-forced pass over the whole sequence. Returns logits plus the
    intermediate activations the backward pass needs."""
    cfg = model.config
    p = model.p
    T = len(ids)
    if T > cfg.max_positions:
        raise StateError(f"sequence length {T} exceeds the position table")
    H, dh, d = cfg.heads, cfg.d_head, cfg.d_model
    scale = math.sqrt(dh)
    causal = np.tril(np.ones((T, T), dtype=bool))

    x = p["tok_emb"][ids] + p["pos_emb"][:T]
    layers = []
    for l in range(cfg.layers):
        a, lnc1 = layer_norm(x, p[f"l{l}.ln1_g"], p[f"l{l}.ln1_b"])
        qh = (a @ p[f"l{l}.wq"]).reshape(T, H, dh).transpose(1, 0, 2)
        kh = (a @ p[f"l{l}.wk"]).reshape(T, H, dh).transpose(1, 0, 2)
        vh = (a @ p[f"l{l}.wv"]).reshape(T, H, dh).transpose(1, 0, 2)
        s = np.where(causal, qh @ kh.transpose(0, 2, 1) / scale, -np.inf)
        pr = softmax(s, axis=2)
        ctx = (pr @ vh).transpose(1, 0, 2).reshape(T, d)
        x_attn = x + ctx @ p[f"l{l}.wo"]
        b, lnc2 = layer_norm(x_attn, p[f"l{l}.ln2_g"], p[f"l{l}.ln2_b"])
        f1 = b @ p[f"l{l}.w1"]
        gact = gelu(f1)
        x_out = x_attn + gact @ p[f"l{l}.w2"]
        layers.append(
            dict(x_in=x, a=a, lnc1=lnc1, qh=qh, kh=kh, vh=vh, pr=pr,
                 ctx=ctx, x_attn=x_attn, b=b, lnc2=lnc2, f1=f1, gact=gact)
        )
        x = x_out
    hf, lncf = layer_norm(x, p["lnf_g"], p["lnf_b"])
    logits = hf @ p["w_out"]
    return logits, hf, lncf, layers


def sequence_logits(model: Model, tokens) -> np.ndarray:
    """Per-position next-token logits for a full teacher-forced sequence."""
    cfg = model.config
    ids = np.array([vocab_id(tok, cfg.m, cfg.v_text) for tok in tokens])
    logits, _, _, _ = _main_forward(model, ids)
    return logits


def _query_forward(model: Model, layers, ctx_len: int):
    """Run the learnable queries against the main stream's keys/values up to
    ``ctx_len``. Mirrors the engine's feature prediction."""
    cfg = model.config
    p = model.p
    H, dh, d, Q = cfg.heads, cfg.d_head, cfg.d_model, cfg.q_queries
    scale = math.sqrt(dh)
    if ctx_len + Q > cfg.max_positions:
        raise StateError("query positions exceed the position table")

    x = p["queries"] + p["pos_emb"][ctx_len : ctx_len + Q]
    qlayers = []
    for l in range(cfg.layers):
        a, lnc1 = layer_norm(x, p[f"l{l}.ln1_g"], p[f"l{l}.ln1_b"])
        qh = (a @ p[f"l{l}.wq"]).reshape(Q, H, dh).transpose(1, 0, 2)
        keys = layers[l]["kh"][:, :ctx_len]
        vals = layers[l]["vh"][:, :ctx_len]
        s = qh @ keys.transpose(0, 2, 1) / scale
        pr = softmax(s, axis=2)
        ctx = (pr @ vals).transpose(1, 0, 2).reshape(Q, d)
        x_attn = x + ctx @ p[f"l{l}.wo"]
        b, lnc2 = layer_norm(x_attn, p[f"l{l}.ln2_g"], p[f"l{l}.ln2_b"])
        f1 = b @ p[f"l{l}.w1"]
        gact = gelu(f1)
        x_out = x_attn + gact @ p[f"l{l}.w2"]
        qlayers.append(
            dict(x_in=x, a=a, lnc1=lnc1, qh=qh, pr=pr, ctx=ctx,
                 x_attn=x_attn, b=b, lnc2=lnc2, f1=f1, gact=gact)
        )
        x = x_out
    hq, lnqf = layer_norm(x, p["lnf_g"], p["lnf_b"])
    pred = hq @ p["w_feat"]
    return pred, hq, lnqf, qlayers


def _ce_inputs(sample: TrainingSample, ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mask = np.array(sample.loss_mask, dtype=bool)
    mpos = np.nonzero(mask)[0]
    if mpos.size == 0:
        raise ValueError("sample has an empty loss mask")
    if mpos[0] == 0:
        raise ValueError("the initial token cannot be a prediction target")
    return mpos, ids[mpos]


def sample_loss(model: Model, sample: TrainingSample, lam: float = 1.0) -> LossReport:
    report, _ = _loss_impl(model, sample, lam, want_grads=False)
    return report


def sample_loss_and_grads(
    model: Model, sample: TrainingSample, lam: float = 1.0
) -> tuple[LossReport, dict[str, np.ndarray]]:
    """Combined loss and its gradient with respect to every parameter."""
    return _loss_impl(model, sample, lam, want_grads=True)


def _loss_impl(model: Model, sample: TrainingSample, lam: float, want_grads: bool):
    cfg = model.config
    p = model.p
    H, dh, d, Q = cfg.heads, cfg.d_head, cfg.d_model, cfg.q_queries
    L = cfg.layers
    scale = math.sqrt(dh)
    tokens = sample.sequence.tokens
    T = len(tokens)
    ids = np.array([vocab_id(tok, cfg.m, cfg.v_text) for tok in tokens])

    logits, hf, lncf, layers = _main_forward(model, ids)
    mpos, targets = _ce_inputs(sample, ids)
    rows = logits[mpos - 1]
    lsm = log_softmax(rows, axis=1)
    n_ce = len(mpos)
    ce = float(-lsm[np.arange(n_ce), targets].mean())

    blocks = sample.masked_blocks()
    if len(blocks) != len(sample.target_features):
        raise ValueError(
            f"{len(sample.target_features)} target features for {len(blocks)} masked blocks"
        )
    branches = []
    img_terms = []
    n_zero = 0
    for bi, (bpos, _e) in enumerate(blocks):
        ctx_len = bpos + 1
        pred, hq, lnqf, qlayers = _query_forward(model, layers, ctx_len)
        tgt = np.tile(np.asarray(sample.target_features[bi], dtype=np.float64), (Q, 1))
        row_losses, zero = _cosine_rows(pred, tgt)
        n_zero += int(zero.sum())
        img_terms.append(float(row_losses.mean()))
        branches.append((ctx_len, pred, hq, lnqf, qlayers, tgt, zero))
    img = float(np.mean(img_terms)) if img_terms else 0.0
    combined = combined_loss(ce, img, lam)
    report = LossReport(ce, img, combined, n_ce, len(blocks), n_zero)
    if not want_grads:
        return report, None

    grads = {name: np.zeros_like(p[name]) for name in param_names(cfg)}

    # cross-entropy head
    dlogits = np.zeros_like(logits)
    sm = np.exp(lsm)
    sm[np.arange(n_ce), targets] -= 1.0
    np.add.at(dlogits, mpos - 1, sm / n_ce)
    grads["w_out"] += hf.T @ dlogits
    dhf = dlogits @ p["w_out"].T
    dx_main, dg, db = layer_norm_grad(dhf, lncf, p["lnf_g"])
    grads["lnf_g"] += dg
    grads["lnf_b"] += db

    # query branches: accumulate gradient into the main stream's keys/values
    dkh_extra = [np.zeros((H, T, dh)) for _ in range(L)]
    dvh_extra = [np.zeros((H, T, dh)) for _ in range(L)]
    n_blocks = max(len(blocks), 1)
    for ctx_len, pred, hq, lnqf, qlayers, tgt, zero in branches:
        pn = np.linalg.norm(pred, axis=1)
        tn = np.linalg.norm(tgt, axis=1)
        safe_pn = np.where(zero, 1.0, pn)
        cos = np.where(zero, 0.0, (pred * tgt).sum(axis=1) / (safe_pn * tn))
        # d(1 - cos)/dpred, zero for zero-norm prediction rows
        dpred = cos[:, None] * pred / (safe_pn**2)[:, None] - tgt / (safe_pn * tn)[:, None]
        dpred = np.where(zero[:, None], 0.0, dpred)
        dpred *= lam / (n_blocks * Q)

        grads["w_feat"] += hq.T @ dpred
        dhq = dpred @ p["w_feat"].T
        dxq, dg, db = layer_norm_grad(dhq, lnqf, p["lnf_g"])
        grads["lnf_g"] += dg
        grads["lnf_b"] += db
        for l in reversed(range(L)):
            qc = qlayers[l]
            keys = layers[l]["kh"][:, :ctx_len]
            vals = layers[l]["vh"][:, :ctx_len]
            # feed-forward
            dgact = dxq @ p[f"l{l}.w2"].T
            grads[f"l{l}.w2"] += qc["gact"].T @ dxq
            df1 = dgact * gelu_grad(qc["f1"])
            grads[f"l{l}.w1"] += qc["b"].T @ df1
            db_ln = df1 @ p[f"l{l}.w1"].T
            dx_attn, dg, db = layer_norm_grad(db_ln, qc["lnc2"], p[f"l{l}.ln2_g"])
            grads[f"l{l}.ln2_g"] += dg
            grads[f"l{l}.ln2_b"] += db
            dx_attn = dx_attn + dxq
            # attention
            grads[f"l{l}.wo"] += qc["ctx"].T @ dx_attn
            dctx = dx_attn @ p[f"l{l}.wo"].T
            dch = dctx.reshape(Q, H, dh).transpose(1, 0, 2)
            dpr = np.einsum("hqd,hkd->hqk", dch, vals)
            dvh_extra[l][:, :ctx_len] += np.einsum("hqk,hqd->hkd", qc["pr"], dch)
            ds = qc["pr"] * (dpr - (dpr * qc["pr"]).sum(axis=2, keepdims=True))
            dqh = np.einsum("hqk,hkd->hqd", ds, keys) / scale
            dkh_extra[l][:, :ctx_len] += np.einsum("hqk,hqd->hkd", ds, qc["qh"]) / scale
            dqm = dqh.transpose(1, 0, 2).reshape(Q, d)
            grads[f"l{l}.wq"] += qc["a"].T @ dqm
            da = dqm @ p[f"l{l}.wq"].T
            dx_ln, dg, db = layer_norm_grad(da, qc["lnc1"], p[f"l{l}.ln1_g"])
            grads[f"l{l}.ln1_g"] += dg
            grads[f"l{l}.ln1_b"] += db
            dxq = dx_attn + dx_ln
        grads["queries"] += dxq
        grads["pos_emb"][ctx_len : ctx_len + Q] += dxq

    # main stream
    dx = dx_main
    for l in reversed(range(L)):
        c = layers[l]
        dgact = dx @ p[f"l{l}.w2"].T
        grads[f"l{l}.w2"] += c["gact"].T @ dx
        df1 = dgact * gelu_grad(c["f1"])
        grads[f"l{l}.w1"] += c["b"].T @ df1
        db_ln = df1 @ p[f"l{l}.w1"].T
        dx_attn, dg, db = layer_norm_grad(db_ln, c["lnc2"], p[f"l{l}.ln2_g"])
        grads[f"l{l}.ln2_g"] += dg
        grads[f"l{l}.ln2_b"] += db
        dx_attn = dx_attn + dx

        grads[f"l{l}.wo"] += c["ctx"].T @ dx_attn
        dctx = dx_attn @ p[f"l{l}.wo"].T
        dch = dctx.reshape(T, H, dh).transpose(1, 0, 2)
        dpr = np.einsum("hid,hjd->hij", dch, c["vh"])
        dvh = np.einsum("hij,hid->hjd", c["pr"], dch) + dvh_extra[l]
        ds = c["pr"] * (dpr - (dpr * c["pr"]).sum(axis=2, keepdims=True))
        dqh = np.einsum("hij,hjd->hid", ds, c["kh"]) / scale
        dkh = np.einsum("hij,hid->hjd", ds, c["qh"]) / scale + dkh_extra[l]
        dqm = dqh.transpose(1, 0, 2).reshape(T, d)
        dkm = dkh.transpose(1, 0, 2).reshape(T, d)
        dvm = dvh.transpose(1, 0, 2).reshape(T, d)
        grads[f"l{l}.wq"] += c["a"].T @ dqm
        grads[f"l{l}.wk"] += c["a"].T @ dkm
        grads[f"l{l}.wv"] += c["a"].T @ dvm
        da = dqm @ p[f"l{l}.wq"].T + dkm @ p[f"l{l}.wk"].T + dvm @ p[f"l{l}.wv"].T
        dx_ln, dg, db = layer_norm_grad(da, c["lnc1"], p[f"l{l}.ln1_g"])
        grads[f"l{l}.ln1_g"] += dg
        grads[f"l{l}.ln1_b"] += db
        dx = dx_attn + dx_ln

    np.add.at(grads["tok_emb"], ids, dx)
    grads["pos_emb"][:T] += dx
    return report, grads


# -- toy training -----------------------------------------------------------------

@dataclass
class TrainResult:
    model: Model
    curve: list[tuple[int, float, float, float]]  # (step, ce, img, combined)
    eval_initial: float
    eval_final: float


def dataset_loss(model: Model, samples, lam: float = 1.0) -> float:
    """Mean combined loss over a sample list."""
    return float(np.mean([sample_loss(model, s, lam).combined for s in samples]))


def build_samples(
    stories: list[Story],
    seed: int,
    m: int,
    v_text: int,
) -> list[TrainingSample]:
    """One training sample per story, with a seeded random assembled length."""
    rng = np.random.default_rng(seed)
    samples = []
    for story in stories:
        sampled_len = int(rng.integers(1, len(story.items) + 1))
        samples.append(assemble_training_sequence(story, sampled_len, m=m, v_text=v_text))
    return samples


def train_toy(
    model: Model,
    samples,
    steps: int,
    lr: float,
    seed: int = 0,
    lam: float = 1.0,
) -> TrainResult:
    """Plain stochastic gradient descent over the combined objective.

    One seeded-random sample per step; the recorded curve holds each step's
    pre-update loss. Aborts on the first non-finite loss.
    """
    if not samples:
        raise ValueError("samples must be non-empty")
    if steps < 1:
        raise ValueError("steps must be at least 1")
    trained = model.copy()
    rng = np.random.default_rng(seed)
    eval_initial = dataset_loss(trained, samples, lam)
    curve = []
    for step in range(steps):
        sample = samples[int(rng.integers(len(samples)))]
        report, grads = sample_loss_and_grads(trained, sample, lam)
        if not math.isfinite(report.combined):
            raise TrainingDiverged(
                f"non-finite loss at step {step}: ce={report.ce}, img={report.img}"
            )
        curve.append((step, report.ce, report.img, report.combined))
        if lr:
            for name, g in grads.items():
                trained.p[name] -= lr * g
    eval_final = dataset_loss(trained, samples, lam)
    return TrainResult(trained, curve, eval_initial, eval_final)
