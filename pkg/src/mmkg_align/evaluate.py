"""Retrieval metrics for entity alignment.

Ranks use cosine similarity against an explicit candidate pool. Ties
resolve in favour of the candidate with the smaller entity id, so a
correct prediction tied with k earlier candidates ranks k+1.
"""

from __future__ import annotations

import numpy as np

DIRECTIONS = ("1to2", "2to1", "both")


def normalize_rows(x: np.ndarray) -> np.ndarray:
    """L2-normalize rows; rows below 1e-12 pass through unscaled."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(norms < 1e-12, 1.0, norms)


def rank_one_direction(query_emb: np.ndarray, gold_ids: np.ndarray,
                       cand_ids: np.ndarray, cand_emb: np.ndarray,
                       chunk: int = 512) -> np.ndarray:
    """Rank of each query's gold candidate under cosine similarity.

    cand_ids must be sorted ascending and contain every gold id.
    """
    gold_ids = np.asarray(gold_ids, dtype=np.int64)
    cand_ids = np.asarray(cand_ids, dtype=np.int64)
    if cand_ids.size == 0:
        raise ValueError("empty candidate pool")
    if np.any(np.diff(cand_ids) <= 0):
        raise ValueError("candidate ids must be sorted and unique")
    gold_col = np.searchsorted(cand_ids, gold_ids)
    bad = (gold_col >= len(cand_ids)) | (cand_ids[np.minimum(gold_col, len(cand_ids) - 1)]
                                         != gold_ids)
    if bad.any():
        raise ValueError(f"{int(bad.sum())} gold ids missing from the candidate pool")

    qn = normalize_rows(query_emb)
    cn = normalize_rows(cand_emb)
    ranks = np.empty(len(qn), dtype=np.int64)
    for start in range(0, len(qn), chunk):
        stop = min(start + chunk, len(qn))
        scores = qn[start:stop] @ cn.T
        cols = gold_col[start:stop]
        true = scores[np.arange(stop - start), cols]
        greater = (scores > true[:, None]).sum(axis=1)
        tied_before = ((scores == true[:, None])
                       & (np.arange(len(cand_ids)) < cols[:, None])).sum(axis=1)
        ranks[start:stop] = 1 + greater + tied_before
    return ranks


def alignment_ranks(emb: np.ndarray, n1: int, pairs: np.ndarray,
                    cand_left: np.ndarray, cand_right: np.ndarray,
                    direction: str = "both") -> np.ndarray:
    """Ranks for side-local alignment pairs over a merged embedding.

    KG2 rows sit at offset n1. "both" concatenates the 1to2 and 2to1
    rank vectors.
    """
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    pairs = np.asarray(pairs, dtype=np.int64)
    cand_left = np.unique(np.asarray(cand_left, dtype=np.int64))
    cand_right = np.unique(np.asarray(cand_right, dtype=np.int64))
    out = []
    if direction in ("1to2", "both"):
        out.append(rank_one_direction(emb[pairs[:, 0]], pairs[:, 1],
                                      cand_right, emb[cand_right + n1]))
    if direction in ("2to1", "both"):
        out.append(rank_one_direction(emb[pairs[:, 1] + n1], pairs[:, 0],
                                      cand_left, emb[cand_left]))
    return np.concatenate(out)


def hits_mrr(ranks: np.ndarray, ks=(1, 10)) -> dict:
    ranks = np.asarray(ranks, dtype=np.int64)
    if ranks.size == 0:
        raise ValueError("no ranks to aggregate")
    out = {f"hits@{k}": float((ranks <= k).mean()) for k in ks}
    out["mrr"] = float((1.0 / ranks).mean())
    out["n"] = int(ranks.size)
    return out


def similarity_profile(embs: dict[str, np.ndarray], n1: int, pairs: np.ndarray,
                       cand_right: np.ndarray, top: int = 10) -> dict[str, list[float]]:
    """Mean cosine similarity at each of the top positions, per embedding.

    For every left entity in pairs, scores against the right candidate
    pool are sorted descending; position p averages the p-th best score
    over queries. Shows how sharply each modality separates its best
    match from the runners-up.
    """
    pairs = np.asarray(pairs, dtype=np.int64)
    cand_right = np.unique(np.asarray(cand_right, dtype=np.int64))
    top = min(top, len(cand_right))
    out = {}
    for name, emb in embs.items():
        qn = normalize_rows(emb[pairs[:, 0]])
        cn = normalize_rows(emb[cand_right + n1])
        scores = qn @ cn.T
        scores.sort(axis=1)
        out[name] = [float(v) for v in scores[:, ::-1][:, :top].mean(axis=0)]
    return out


def evaluation_report(emb: np.ndarray, n1: int, pairs: np.ndarray,
                      cand_left: np.ndarray, cand_right: np.ndarray,
                      direction: str = "both", ks=(1, 10)) -> dict:
    """Metrics for the requested direction plus both single directions."""
    report = {
        "direction": direction,
        "n_pairs": int(len(pairs)),
        "metrics": hits_mrr(
            alignment_ranks(emb, n1, pairs, cand_left, cand_right, direction), ks),
    }
    if direction == "both":
        report["per_direction"] = {
            d: hits_mrr(alignment_ranks(emb, n1, pairs, cand_left, cand_right, d), ks)
            for d in ("1to2", "2to1")
        }
    return report
