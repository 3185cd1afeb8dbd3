"""Nearest-neighbour probe over the final first-layer memory state of each video."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .models import Captioner, forward_paragraph


class RetrievalError(ValueError):
    pass


def memory_vectors(model: Captioner, examples, batch_size: int = 64) -> dict[str, np.ndarray]:
    """Flattened ``T_m * d`` first-layer memory after each video's last segment."""
    if model.cfg.model_kind != "mart":
        raise RetrievalError(f"retrieval needs a mart model, got {model.cfg.model_kind!r}")
    was = model.training
    model.eval()
    out = {}
    with T.no_grad():
        for i in range(0, len(examples), batch_size):
            chunk = examples[i:i + batch_size]
            # inactive videos carry their memory forward, so the final state holds
            # every video's last-step memory
            mem = forward_paragraph(model, chunk).state.states[0].data
            for j, ex in enumerate(chunk):
                out[ex.video_id] = mem[j].astype(np.float64).ravel()
    model.train(was)
    return out


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def similarity_matrix(vectors: Mapping[str, np.ndarray]) -> tuple[list[str], np.ndarray]:
    ids = list(vectors)
    x = np.stack([vectors[i] for i in ids])
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    x = x / np.where(norms == 0, 1.0, norms)
    return ids, x @ x.T


def rank(vectors: Mapping[str, np.ndarray], query_id: str, k: int, include_self: bool = True) -> list[tuple[str, float]]:
    """Top-``k`` ids by cosine similarity to ``query_id``; ties broken by id."""
    if query_id not in vectors:
        raise RetrievalError(f"unknown query id {query_id!r}")
    if k < 1:
        raise RetrievalError(f"k must be positive, got {k}")
    q = vectors[query_id]
    scored = [(vid, cosine(q, v)) for vid, v in vectors.items() if include_self or vid != query_id]
    scored.sort(key=lambda p: (-p[1], p[0]))
    return scored[:k]


def class_similarity(vectors: Mapping[str, np.ndarray], classes: Mapping[str, object]) -> tuple[float, float]:
    """Mean cosine similarity over same-class and cross-class pairs (self pairs excluded)."""
    ids, sim = similarity_matrix({i: vectors[i] for i in vectors if i in classes})
    labels = [classes[i] for i in ids]
    same = np.array([[a == b for b in labels] for a in labels])
    off = ~np.eye(len(ids), dtype=bool)
    if not (same & off).any() or not (~same).any():
        raise RetrievalError("need at least one same-class and one cross-class pair")
    return float(sim[same & off].mean()), float(sim[~same].mean())


def synthetic_classes(meta: Mapping[str, dict]) -> dict[str, tuple[str, str]]:
    """Class of a synthetic video: its actor and its final event."""
    return {vid: (m["actor"], m["events"][-1]) for vid, m in meta.items()}


def format_ranking(rows: Sequence[tuple[str, float]]) -> str:
    return "\n".join(f"{i}\t{vid}\t{score:.6f}" for i, (vid, score) in enumerate(rows, 1))
