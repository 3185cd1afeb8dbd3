"""Paragraph-level BLEU@4, CIDEr-D and R@4 repetition.

Every video contributes one hypothesis paragraph (its sentences joined) and one or
more reference paragraphs. Inputs are ``{video_id: paragraph}`` for predictions and
``{video_id: [paragraph, ...]}`` for references; paragraphs are strings and are
tokenized with :func:`mart.data.tokenize`.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from pathlib import Path
from typing import Mapping, Sequence

from .data import tokenize

BLEU_FLOOR = 1e-9
CIDER_SIGMA = 6.0


class MetricError(ValueError):
    pass


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _align(predictions: Mapping[str, str], references: Mapping[str, Sequence[str]]):
    missing = [vid for vid in predictions if vid not in references]
    if missing:
        raise MetricError(f"no reference for video {missing[0]!r}")
    extra = [vid for vid in references if vid not in predictions]
    if extra:
        raise MetricError(f"no prediction for video {extra[0]!r}")
    for vid, refs in references.items():
        if not refs:
            raise MetricError(f"empty reference list for video {vid!r}")
    return sorted(predictions)


def bleu4(predictions: Mapping[str, str], references: Mapping[str, Sequence[str]]) -> float:
    """Corpus BLEU with clipped 1..4-gram precisions and a brevity penalty.

    Zero precision buckets are floored at 1e-9 before the log; the hypothesis
    length in the brevity penalty is floored the same way.
    """
    ids = _align(predictions, references)
    clipped = [0] * 4
    total = [0] * 4
    hyp_len = ref_len = 0
    for vid in ids:
        hyp = tokenize(predictions[vid])
        refs = [tokenize(r) for r in references[vid]]
        hyp_len += len(hyp)
        # closest reference length, ties to the shorter
        ref_len += min((abs(len(r) - len(hyp)), len(r)) for r in refs)[1]
        for n in range(1, 5):
            h = ngrams(hyp, n)
            max_ref = Counter()
            for r in refs:
                for g, c in ngrams(r, n).items():
                    max_ref[g] = max(max_ref[g], c)
            clipped[n - 1] += sum(min(c, max_ref[g]) for g, c in h.items())
            total[n - 1] += max(len(hyp) - n + 1, 0)
    log_p = 0.0
    for n in range(4):
        p = clipped[n] / total[n] if clipped[n] > 0 else 0.0
        log_p += math.log(max(p, BLEU_FLOOR))
    c = max(hyp_len, BLEU_FLOOR)
    bp = 1.0 if c > ref_len else math.exp(1.0 - ref_len / c)
    return bp * math.exp(log_p / 4)


def _cider_counts(tokens):
    return {n: ngrams(tokens, n) for n in range(1, 5)}


def cider_d(predictions: Mapping[str, str], references: Mapping[str, Sequence[str]],
            sigma: float = CIDER_SIGMA) -> float:
    """CIDEr-D: tf-idf n-gram cosine with clipping and a gaussian length penalty, x10.

    Document frequencies come from the reference corpus; a video's references
    count once per n-gram.
    """
    ids = _align(predictions, references)
    if not ids:
        raise MetricError("empty reference corpus")
    refs_tok = {vid: [tokenize(r) for r in references[vid]] for vid in ids}
    df = Counter()
    for vid in ids:
        seen = set()
        for r in refs_tok[vid]:
            for n in range(1, 5):
                seen.update(ngrams(r, n))
        df.update(seen)
    log_n = math.log(len(ids))

    def vec(tokens):
        out, norms = {}, {}
        for n, counts in _cider_counts(tokens).items():
            v = {g: tf * (log_n - math.log(max(1.0, df[g]))) for g, tf in counts.items()}
            out[n] = v
            norms[n] = math.sqrt(sum(x * x for x in v.values()))
        return out, norms, len(tokens)

    scores = []
    for vid in ids:
        hv, hn, hl = vec(tokenize(predictions[vid]))
        total = 0.0
        for r in refs_tok[vid]:
            rv, rn, rl = vec(r)
            penalty = math.exp(-((hl - rl) ** 2) / (2 * sigma ** 2))
            per_n = 0.0
            for n in range(1, 5):
                dot = sum(min(x, rv[n].get(g, 0.0)) * rv[n].get(g, 0.0) for g, x in hv[n].items())
                if hn[n] != 0 and rn[n] != 0:
                    dot /= hn[n] * rn[n]
                per_n += dot * penalty
            total += per_n / 4
        scores.append(10.0 * total / len(refs_tok[vid]))
    return sum(scores) / len(scores)


def repetition_at_4(paragraph: str | Sequence[str]) -> float:
    tokens = tokenize(paragraph) if isinstance(paragraph, str) else list(paragraph)
    grams = ngrams(tokens, 4)
    occ = sum(grams.values())
    if occ == 0:
        return 0.0
    return (occ - len(grams)) / occ


def r4_repetition(predictions: Mapping[str, str]) -> float:
    """Mean over paragraphs of (4-gram occurrences - distinct 4-grams) / occurrences."""
    if not predictions:
        return 0.0
    return sum(repetition_at_4(p) for p in predictions.values()) / len(predictions)


# ---------------------------------------------------------------------------
# files


def read_paragraph_file(path) -> dict[str, list[str]]:
    """``video_id<TAB>sent_1<TAB>...`` lines -> ``{video_id: [paragraph, ...]}``."""
    out: dict[str, list[str]] = defaultdict(list)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if not parts[0]:
                raise MetricError(f"{path}:{lineno}: missing video id")
            out[parts[0]].append(" ".join(parts[1:]))
    return dict(out)


def write_paragraph_file(path, rows: Mapping[str, Sequence[str]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for vid, sents in rows.items():
            fh.write("\t".join([vid, *sents]) + "\n")


def score_all(predictions: Mapping[str, str], references: Mapping[str, Sequence[str]]) -> dict[str, float]:
    return {
        "bleu4": bleu4(predictions, references),
        "cider": cider_d(predictions, references),
        "r4": r4_repetition(predictions),
    }


def format_report(scores: Mapping[str, float]) -> str:
    return " ".join(f"{k}={scores[k]:.6f}" for k in ("bleu4", "cider", "r4"))


def evaluate(predictions_path, references_path) -> dict[str, float]:
    preds = read_paragraph_file(predictions_path)
    dup = [vid for vid, p in preds.items() if len(p) > 1]
    if dup:
        raise MetricError(f"video {dup[0]!r} has more than one prediction line")
    refs = read_paragraph_file(references_path)
    return score_all({vid: p[0] for vid, p in preds.items()}, refs)
