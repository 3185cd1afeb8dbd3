"""Greedy paragraph decoding with the recurrent state carried across segments."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import BOS, EOS, DecodeConfig
from .models import Captioner, MemoryBank, make_step_batch


@dataclass
class ParagraphPrediction:
    video_id: str
    sentences: list[list[str]]

    @property
    def paragraph(self) -> str:
        return " ".join(" ".join(s) for s in self.sentences)

    @property
    def tokens(self) -> list[str]:
        return [w for s in self.sentences for w in s]


def _argmax_lowest(logits: np.ndarray) -> np.ndarray:
    # np.argmax already returns the first (lowest-id) maximum
    return np.argmax(logits, axis=-1)


def greedy_decode_segment(model: Captioner, features, state_in=None, cfg: DecodeConfig | None = None):
    """Decode one segment for a batch of videos.

    ``features`` is a list of ``(T_video, d_feat)`` arrays. Returns ``(tokens, state_out)``
    with ``tokens[i]`` the generated ids (ending in EOS unless the length cap hit).
    The state update runs once, on the completed window ``BOS + generated`` minus its
    last token, which is exactly the teacher-forced input layout.
    """
    cfg = cfg or DecodeConfig(max_text_len=model.cfg.max_text_len)
    b = len(features)
    seqs = [[BOS] for _ in range(b)]
    done = np.zeros(b, dtype=bool)
    max_new = max(1, cfg.max_text_len - 1)
    with T.no_grad():
        for _ in range(max_new):
            batch = make_step_batch(features, seqs, d_feat=model.cfg.d_feat)
            logits, _ = model.step(batch, state_in, update=False)
            last = np.array([len(s) - 1 for s in seqs])
            nxt = _argmax_lowest(logits.data[np.arange(b), last])
            for i in range(b):
                if not done[i]:
                    seqs[i].append(int(nxt[i]))
                    done[i] = nxt[i] == cfg.eos
            if done.all():
                break
        window = [s[:-1] if len(s) > 1 else s for s in seqs]
        batch = make_step_batch(features, window, d_feat=model.cfg.d_feat)
        _, state_out = model.step(batch, state_in, update=True)
    return [s[1:] for s in seqs], state_out


def decode_batch(model: Captioner, examples, cfg: DecodeConfig | None = None) -> list[list[list[int]]]:
    """Token ids per video per segment; videos in the batch share each segment step."""
    if not examples or any(len(ex.segments) == 0 for ex in examples):
        raise ValueError("nothing to decode: empty batch or an example with zero segments")
    was = model.training
    model.eval()
    n_steps = max(len(ex.segments) for ex in examples)
    out = [[] for _ in examples]
    d_feat = model.cfg.d_feat
    try:
        with T.no_grad():
            state = model.init_state(len(examples))
            for t in range(n_steps):
                feats = [ex.segments[t].features if t < len(ex.segments) else np.zeros((1, d_feat), np.float32)
                         for ex in examples]
                toks, new_state = greedy_decode_segment(model, feats, state, cfg)
                state = _keep_finished(state, new_state, [t < len(ex.segments) for ex in examples])
                for i, ex in enumerate(examples):
                    if t < len(ex.segments):
                        out[i].append(toks[i])
    finally:
        model.train(was)
    return out


def _keep_finished(old, new, active):
    # videos without a segment at this step keep their state (only matters for MART memory)
    if isinstance(new, MemoryBank) and isinstance(old, MemoryBank):
        act = np.asarray(active)[:, None, None]
        return MemoryBank([T.where(act, n, o) for n, o in zip(new.states, old.states)], new.step)
    return new


def decode_paragraph(model: Captioner, example, vocab, cfg: DecodeConfig | None = None) -> ParagraphPrediction:
    ids = decode_batch(model, [example], cfg)[0]
    return ParagraphPrediction(example.video_id, [vocab.decode(s) for s in ids])


def decode_corpus(model: Captioner, examples, vocab, cfg: DecodeConfig | None = None,
                  batch_size: int = 64) -> dict[str, list[str]]:
    """``{video_id: [sentence, ...]}`` for every example, in input order."""
    out = {}
    for i in range(0, len(examples), batch_size):
        chunk = examples[i:i + batch_size]
        for ex, ids in zip(chunk, decode_batch(model, chunk, cfg)):
            out[ex.video_id] = [" ".join(vocab.decode(s)) for s in ids]
    return out
