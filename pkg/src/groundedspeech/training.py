"""Margin-based contrastive training with Adam and best-epoch selection.

The loss pushes the cosine distance of each matched utterance/image pair
below the distance to every mismatched within-batch utterance and image by
a margin; hinge terms are summed, not averaged. Training keeps the
parameters of the epoch with the best validation recall@10 (earliest epoch
on ties).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .evaluation import gold_index_map, rank_images, summarize
from .model import SpeechModel, TextModel
from .numcore import NumericFaultError, Tensor
from .seeding import substream


class NoNegativesError(ValueError):
    """Contrastive loss needs at least two pairs to form negatives."""


class TrainingConfigError(ValueError):
    """Unusable training setup (empty split, bad sizes)."""


# learning rates that go with the retrieval presets
DEFAULT_LR = {"speech": 2e-4, "text": 1e-3}


@dataclass
class LossConfig:
    margin: float = 0.2

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError(f"margin must be positive, got {self.margin}")


@dataclass
class TrainConfig:
    lr: float = 2e-4
    batch_size: int = 32
    max_epochs: int = 25
    seed: int = 0
    margin: float = 0.2
    clip_norm: float | None = None    # off unless set
    stop_loss: float | None = None    # optional early exit once epoch loss drops below


def cosine_distance(u: Tensor, v: Tensor) -> Tensor:
    """1 - u.v for unit-norm embeddings; ranges over [0, 2]."""
    return 1.0 - nc.dot(u, v)


def contrastive_loss(utt_embs, img_embs, margin: float = 0.2) -> Tensor:
    """Sum of hinge terms over all mismatched pairs within the batch.

    Row j of both inputs is a matched pair; every other row supplies the
    contrastive utterance and image negatives.
    """
    u = nc.stack_rows(utt_embs) if isinstance(utt_embs, (list, tuple)) else utt_embs
    i = nc.stack_rows(img_embs) if isinstance(img_embs, (list, tuple)) else img_embs
    n = u.data.shape[0]
    if i.data.shape[0] != n:
        raise nc.ShapeMismatchError(f"batch sizes differ: {u.data.shape} vs {i.data.shape}")
    if n < 2:
        raise NoNegativesError(f"need at least 2 pairs for within-batch negatives, got {n}")
    dist = 1.0 - nc.matmul(u, nc.transpose(i))      # dist[a, b] = d(u_a, i_b)
    matched = nc.reshape(nc.diag_part(dist), (n, 1))
    off_diagonal = Tensor(1.0 - np.eye(n, dtype=u.data.dtype))
    utt_negs = nc.relu(margin + matched - nc.transpose(dist))
    img_negs = nc.relu(margin + matched - dist)
    return nc.add(nc.tsum(nc.mul(utt_negs, off_diagonal)),
                  nc.tsum(nc.mul(img_negs, off_diagonal)))


@dataclass
class AdamState:
    """First/second moment accumulators plus the shared step counter."""
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict) -> "AdamState":
        state = cls()
        state.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        state.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        return state


def adam_step(params: dict, state: AdamState, lr: float,
              clip_norm: float | None = None) -> None:
    """One bias-corrected Adam update in place; missing grads count as zero."""
    grads = {}
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise NumericFaultError(f"non-finite gradient for parameter {name!r}")
        grads[name] = g
    if clip_norm is not None:
        total = np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
        if total > clip_norm:
            scale = clip_norm / total
            grads = {k: g * scale for k, g in grads.items()}
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = state.m[name] / c1
        v_hat = state.v[name] / c2
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# the training loop


@dataclass
class PairedExample:
    utt_id: str
    utt_input: object          # feature matrix (speech) or token id array (text)
    image_id: str
    image_vec: np.ndarray


@dataclass
class EpochLog:
    epoch: int
    loss: float
    r1: float
    r5: float
    r10: float
    medr: float


@dataclass
class FitResult:
    best_params: dict          # plain arrays of the best-epoch snapshot
    best_epoch: int
    log: list


def _encode_example(model, ex: PairedExample) -> Tensor:
    if isinstance(model, SpeechModel):
        return model.encode_utterance(ex.utt_input).embedding
    return model.encode_text(ex.utt_input).embedding


def evaluate_retrieval(model, examples) -> tuple:
    """(EpochLog-style metrics tuple, ranks) for a split, without gradients."""
    with nc.no_grad():
        utt = np.stack([_encode_example(model, ex).data for ex in examples])
        unique_ids, gold = gold_index_map([ex.image_id for ex in examples])
        by_id = {ex.image_id: ex.image_vec for ex in examples}
        img = np.stack([model.encode_image(by_id[i]).data for i in unique_ids])
    ranks = rank_images(utt, img, gold)
    res = summarize(ranks)
    return res, ranks


def fit(model, train, val, cfg: TrainConfig) -> FitResult:
    """Optimize in place; returns the best-epoch snapshot and the epoch log.

    Shuffling, batching and evaluation all derive from cfg.seed, so two runs
    with the same inputs produce identical logs and parameters.
    """
    if cfg.max_epochs < 0 or cfg.batch_size < 2:
        raise TrainingConfigError("need max_epochs >= 0 and batch_size >= 2")
    if cfg.max_epochs > 0 and (not train or not val):
        raise TrainingConfigError("training requires non-empty train and validation splits")
    params = model.params
    state = AdamState.for_params(params)
    shuffle_rng = substream(cfg.seed, "shuffle")
    log = []
    best_epoch = -1
    best_r10 = -1.0
    best_params = {k: p.data.copy() for k, p in params.items()}
    for epoch in range(1, cfg.max_epochs + 1):
        order = shuffle_rng.permutation(len(train))
        epoch_loss = 0.0
        for start in range(0, len(train), cfg.batch_size):
            batch = [train[j] for j in order[start:start + cfg.batch_size]]
            if len(batch) < 2:
                continue  # a trailing singleton has no negatives
            nc.zero_grads(params)
            utt_embs = [_encode_example(model, ex) for ex in batch]
            img_embs = [model.encode_image(ex.image_vec) for ex in batch]
            loss = contrastive_loss(utt_embs, img_embs, cfg.margin)
            loss.backward()
            adam_step(params, state, cfg.lr, cfg.clip_norm)
            epoch_loss += float(loss.data)
        res, _ = evaluate_retrieval(model, val)
        row = EpochLog(epoch, epoch_loss, res.recall_at[1], res.recall_at[5],
                       res.recall_at[10], res.median_rank)
        log.append(row)
        if row.r10 > best_r10:
            best_r10 = row.r10
            best_epoch = epoch
            best_params = {k: p.data.copy() for k, p in params.items()}
        if cfg.stop_loss is not None and epoch_loss < cfg.stop_loss:
            break
    return FitResult(best_params=best_params, best_epoch=best_epoch, log=log)


TRAIN_LOG_HEADER = "epoch,loss,R@1,R@5,R@10,medr"


def format_training_log(log) -> str:
    lines = [TRAIN_LOG_HEADER]
    for row in log:
        lines.append(f"{row.epoch},{row.loss:.6f},{row.r1:.4f},{row.r5:.4f},{row.r10:.4f},{row.medr:g}")
    return "\n".join(lines) + "\n"
