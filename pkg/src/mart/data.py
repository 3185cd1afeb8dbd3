"""Dataset records, vocabulary, truncation rules and the synthetic coherence corpus.

Dataset files hold one JSON object per line::

    {"video_id": str, "segments": [{"features": [[float, ...], ...], "sentence": str}, ...]}

The synthetic generator additionally writes a ``*.meta.jsonl`` sidecar with the
latent actor/events of every video and, per sentence word, whether that word can
only be predicted from earlier segments.
"""

from __future__ import annotations

import json
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .config import BOS, EOS, PAD, UNK, ConfigError, ModelConfig
from .rng import stream

SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")

_PUNCT = str.maketrans({c: " " for c in string.punctuation})


class DataError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    """Lowercase, punctuation to spaces, split on whitespace."""
    return text.lower().translate(_PUNCT).split()


@dataclass
class Vocabulary:
    itos: list[str]
    min_count: int = 1
    stoi: dict[str, int] = field(init=False)

    def __post_init__(self):
        if tuple(self.itos[:4]) != SPECIALS:
            raise DataError("vocabulary must start with <pad>, <bos>, <eos>, <unk>")
        self.stoi = {w: i for i, w in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise DataError("duplicate token in vocabulary")

    def __len__(self):
        return len(self.itos)

    def encode(self, words: Iterable[str]) -> list[int]:
        return [self.stoi.get(w, UNK) for w in words]

    def decode(self, ids: Iterable[int]) -> list[str]:
        out = []
        for i in ids:
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            out.append(self.itos[i])
        return out


def build_vocab(sentences: Iterable[str], min_count: int = 1) -> Vocabulary:
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts = Counter()
    n = 0
    for s in sentences:
        counts.update(tokenize(s))
        n += 1
    if n == 0 or not counts:
        raise DataError("cannot build a vocabulary from an empty corpus")
    kept = sorted((w for w, c in counts.items() if c >= min_count and w not in SPECIALS),
                  key=lambda w: (-counts[w], w))
    return Vocabulary(list(SPECIALS) + kept, min_count=min_count)


@dataclass
class Segment:
    features: np.ndarray  # (T_video, d_feat) float32
    tokens: list[int]  # BOS ... EOS
    sentence: str


@dataclass
class VideoExample:
    video_id: str
    segments: list[Segment]

    def __len__(self):
        return len(self.segments)


def truncate_tokens(tokens: Sequence[int], max_len: int) -> list[int]:
    """Cut to ``max_len`` keeping EOS as the final token."""
    tokens = list(tokens)
    if len(tokens) <= max_len:
        return tokens
    return tokens[: max_len - 1] + [EOS]


def encode_example(raw: dict, vocab: Vocabulary, cfg: ModelConfig) -> VideoExample:
    segs = []
    for seg in raw["segments"][: cfg.max_segments]:
        feats = np.asarray(seg["features"], dtype=np.float32)
        if feats.ndim != 2 or feats.shape[0] < 1:
            raise DataError(f"{raw['video_id']}: features must be a non-empty matrix")
        if feats.shape[1] != cfg.d_feat:
            raise ConfigError(f"{raw['video_id']}: feature width {feats.shape[1]} != d_feat {cfg.d_feat}")
        feats = feats[: cfg.max_video_len]
        ids = [BOS] + vocab.encode(tokenize(seg["sentence"])) + [EOS]
        segs.append(Segment(feats, truncate_tokens(ids, cfg.max_text_len), seg["sentence"]))
    if not segs:
        raise DataError(f"{raw['video_id']}: no segments")
    return VideoExample(str(raw["video_id"]), segs)


def _f32(x: float) -> float:
    # shortest decimal that reproduces the float32 value exactly
    return float(str(np.float32(x)))


def record_to_line(video_id: str, segments: Sequence[tuple[np.ndarray, str]]) -> str:
    rec = {
        "video_id": video_id,
        "segments": [
            {"features": [[_f32(v) for v in row] for row in np.asarray(f, dtype=np.float32)], "sentence": s}
            for f, s in segments
        ],
    }
    return json.dumps(rec, separators=(",", ":"))


def parse_line(line: str, lineno: int) -> dict:
    try:
        rec = json.loads(line)
        if not isinstance(rec, dict) or set(rec) != {"video_id", "segments"}:
            raise ValueError("expected keys video_id and segments")
        if not isinstance(rec["segments"], list):
            raise ValueError("segments must be a list")
        for seg in rec["segments"]:
            if set(seg) != {"features", "sentence"} or not isinstance(seg["sentence"], str):
                raise ValueError("segment needs features and sentence")
    except (ValueError, TypeError) as e:
        raise DataError(f"line {lineno}: malformed record ({e})") from None
    return rec


def read_records(path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                out.append(parse_line(line, lineno))
    return out


def load_dataset(path, vocab: Vocabulary, cfg: ModelConfig) -> list[VideoExample]:
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = parse_line(line, lineno)
            try:
                examples.append(encode_example(rec, vocab, cfg))
            except DataError as e:
                raise DataError(f"line {lineno}: {e}") from None
    return examples


def write_dataset(path, records: Iterable[tuple[str, Sequence[tuple[np.ndarray, str]]]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for vid, segs in records:
            fh.write(record_to_line(vid, segs) + "\n")


def read_meta(path) -> dict[str, dict]:
    with open(path, encoding="utf-8") as fh:
        return {m["video_id"]: m for m in map(json.loads, filter(str.strip, fh))}


# ---------------------------------------------------------------------------
# synthetic coherence corpus

ACTORS = (("man", "he"), ("woman", "she"), ("group", "they"))
EVENTS = (
    ("washed", "washing", "car"),
    ("cut", "cutting", "bread"),
    ("painted", "painting", "fence"),
    ("threw", "throwing", "ball"),
    ("played", "playing", "guitar"),
    ("climbed", "climbing", "wall"),
    ("rode", "riding", "horse"),
    ("opened", "opening", "door"),
    ("kicked", "kicking", "bucket"),
    ("cleaned", "cleaning", "window"),
    ("lifted", "lifting", "box"),
    ("fed", "feeding", "dog"),
)
MANNERS = ("slowly", "quickly", "carefully")


@dataclass
class SynthConfig:
    d_feat: int = 32
    min_frames: int = 4
    max_frames: int = 8
    max_segments: int = 6
    segment_p: float = 0.53  # segments = 1 + Binomial(max_segments - 1, p); mean 3.65 at defaults
    noise: float = 0.5
    val_fraction: float = 1 / 6


def _sentence(actor: int, event: int, manner: int, prev_event: int | None) -> tuple[list[str], list[int]]:
    noun, pronoun = ACTORS[actor]
    past, _, obj = EVENTS[event]
    if prev_event is None:
        words = ["the", noun, past, "the", obj, MANNERS[manner]]
        return words, [0] * len(words)
    _, prev_ing, prev_obj = EVENTS[prev_event]
    words = ["after", prev_ing, "the", prev_obj, pronoun, past, "the", obj, MANNERS[manner]]
    # previous verb and the pronoun are recoverable only from earlier segments
    flags = [0, 1, 0, 0, 1, 0, 0, 0, 0]
    return words, flags


def _video(rng: np.random.Generator, vid: str, event_codes, manner_codes, cfg: SynthConfig):
    n_seg = 1 + int(rng.binomial(cfg.max_segments - 1, cfg.segment_p))
    actor = int(rng.integers(len(ACTORS)))
    events = [int(e) for e in rng.permutation(len(EVENTS))[:n_seg]]
    manners = [int(rng.integers(len(MANNERS))) for _ in range(n_seg)]
    segs, flags = [], []
    for t in range(n_seg):
        frames = int(rng.integers(cfg.min_frames, cfg.max_frames + 1))
        base = event_codes[events[t]] + manner_codes[manners[t]]
        feats = (base[None, :] + cfg.noise * rng.standard_normal((frames, cfg.d_feat))).astype(np.float32)
        words, f = _sentence(actor, events[t], manners[t], events[t - 1] if t else None)
        segs.append((feats, " ".join(words)))
        flags.append(f)
    meta = {"video_id": vid, "actor": ACTORS[actor][0], "events": [EVENTS[e][0] for e in events],
            "manners": [MANNERS[m] for m in manners], "history_flags": flags}
    return segs, meta


def generate_synthetic_corpus(seed: int, n_videos: int, cfg: SynthConfig | None = None, n_val: int | None = None):
    """Return ``(train, val)``; each a list of ``(video_id, segments, meta)``.

    Segment features are a per-event code plus a per-manner code plus noise. The
    actor appears only in the first sentence's text; later sentences refer back to
    it by pronoun and restate the previous event.
    """
    cfg = cfg or SynthConfig()
    if n_videos < 2:
        raise ValueError("need at least 2 videos")
    codes = stream(seed, "synth/codebook")
    event_codes = codes.standard_normal((len(EVENTS), cfg.d_feat))
    manner_codes = codes.standard_normal((len(MANNERS), cfg.d_feat))
    if n_val is None:
        n_val = max(1, int(round(n_videos * cfg.val_fraction)))
    if not 0 < n_val < n_videos:
        raise ValueError(f"n_val={n_val} must leave at least one training video")
    n_train = n_videos - n_val
    train_rng = stream(seed, "synth/train")
    val_rng = stream(seed, "synth/val")
    train = [(vid, *_video(train_rng, vid, event_codes, manner_codes, cfg))
             for vid in (f"train{i:05d}" for i in range(n_train))]
    val = [(vid, *_video(val_rng, vid, event_codes, manner_codes, cfg))
           for vid in (f"val{i:05d}" for i in range(n_val))]
    return train, val


def write_synthetic(out_dir, seed: int, n_train: int, n_val: int, cfg: SynthConfig | None = None) -> dict[str, Path]:
    """Write ``train.jsonl``, ``val.jsonl`` and their ``.meta.jsonl`` sidecars."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, val = generate_synthetic_corpus(seed, n_train + n_val, cfg, n_val=n_val)
    paths = {}
    for name, rows in (("train", train), ("val", val)):
        data_path = out / f"{name}.jsonl"
        write_dataset(data_path, ((vid, segs) for vid, segs, _ in rows))
        meta_path = out / f"{name}.meta.jsonl"
        with open(meta_path, "w", encoding="utf-8") as fh:
            for _, _, meta in rows:
                fh.write(json.dumps(meta, separators=(",", ":")) + "\n")
        paths[name] = data_path
        paths[name + "_meta"] = meta_path
    return paths
