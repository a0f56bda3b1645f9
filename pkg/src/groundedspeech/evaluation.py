"""Image retrieval metrics: per-query gold ranks, recall@N, median rank."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class RetrievalResult:
    recall_at: dict
    median_rank: float
    per_query_rank: np.ndarray

    def __post_init__(self):
        assert all(0.0 <= v <= 1.0 for v in self.recall_at.values())


def gold_index_map(image_ids) -> tuple:
    """Dedupe image ids preserving first appearance; map each query to its gold index."""
    unique = []
    index = {}
    for i in image_ids:
        if i not in index:
            index[i] = len(unique)
            unique.append(i)
    return unique, np.array([index[i] for i in image_ids], dtype=np.intp)


def rank_images(utt_embs: np.ndarray, img_embs: np.ndarray, gold) -> np.ndarray:
    """Rank of each query's gold image under cosine distance.

    Rank = 1 + number of images strictly closer than the gold one + number
    of equidistant images with a smaller index (a deterministic tie rule).
    """
    utt = np.asarray(utt_embs)
    img = np.asarray(img_embs)
    gold = np.asarray(gold, dtype=np.intp)
    if utt.ndim != 2 or img.ndim != 2 or utt.shape[1] != img.shape[1]:
        raise ValueError(f"embedding shapes disagree: {utt.shape} vs {img.shape}")
    if gold.shape != (utt.shape[0],):
        raise ValueError(f"need one gold index per query: {gold.shape} vs {utt.shape[0]} queries")
    m = img.shape[0]
    if (gold < 0).any() or (gold >= m).any():
        raise ValueError(f"gold index out of range for {m} images")
    dist = 1.0 - utt @ img.T
    dist_gold = dist[np.arange(len(gold)), gold][:, None]
    closer = (dist < dist_gold).sum(axis=1)
    tied_before = ((dist == dist_gold) & (np.arange(m)[None, :] < gold[:, None])).sum(axis=1)
    return (1 + closer + tied_before).astype(np.intp)


def summarize(ranks) -> RetrievalResult:
    """Recall at 1/5/10 and the median gold rank (mean of middles for even n)."""
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise ValueError("cannot summarize an empty rank list")
    srt = np.sort(ranks)
    n = srt.size
    median = float(srt[n // 2]) if n % 2 else (float(srt[n // 2 - 1]) + float(srt[n // 2])) / 2.0
    recall = {k: float((ranks <= k).mean()) for k in (1, 5, 10)}
    return RetrievalResult(recall_at=recall, median_rank=median, per_query_rank=ranks.copy())


RETRIEVAL_HEADER = "R@1,R@5,R@10,medr"


def format_retrieval(result: RetrievalResult) -> str:
    r = result.recall_at
    return f"{RETRIEVAL_HEADER}\n{r[1]:.4f},{r[5]:.4f},{r[10]:.4f},{result.median_rank:g}\n"


def format_per_query(ids, ranks) -> str:
    lines = ["id,rank"]
    for i, r in zip(ids, ranks):
        lines.append(f"{i},{int(r)}")
    return "\n".join(lines) + "\n"
