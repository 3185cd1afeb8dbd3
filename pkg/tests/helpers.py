"""Shared fixtures-as-functions for model-level tests and the acceptance suite."""

import numpy as np

from mart import tensor as T
from mart.config import ModelConfig
from mart.data import Segment, VideoExample
from mart.models import Captioner, forward_paragraph, teacher_forced_steps
from mart.tensor import Tensor

KINDS = ("vanilla", "mart", "xl", "xlrg")


def small_config(kind, **kw):
    base = dict(d=8, n_layers=2, heads=2, mem_len=1, vocab_size=13, d_feat=5, max_video_len=6,
                max_text_len=8, max_segments=4, model_kind=kind, dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


def random_examples(cfg, rng, n_videos=2, n_segments=3, ragged=True):
    out = []
    for v in range(n_videos):
        n = int(rng.integers(1, n_segments + 1)) if ragged and v else n_segments
        segs = []
        for _ in range(n):
            tv = int(rng.integers(1, cfg.max_video_len + 1))
            tt = int(rng.integers(1, cfg.max_text_len - 1))
            toks = [1] + [int(x) for x in rng.integers(3, cfg.vocab_size, size=tt)] + [2]
            segs.append(Segment(rng.standard_normal((tv, cfg.d_feat)), toks, ""))
        out.append(VideoExample(f"v{v}", segs))
    return out


def jittered_model(cfg, seed, scale=0.3):
    """A float64 model moved off its near-symmetric init."""
    rng = np.random.default_rng(seed + 1000)
    m = Captioner(cfg, seed=seed).astype(np.float64)
    for p in m.params.values():
        p.data = p.data + scale * rng.standard_normal(p.shape)
    return m.eval()


def step_logits(model, examples):
    with T.no_grad():
        return [l.data.copy() for l in forward_paragraph(model, examples).logits]


def perturb_after(examples, t, rng, vocab_size):
    """Copy with every segment index > t replaced by fresh random content."""
    out = []
    for ex in examples:
        segs = list(ex.segments[: t + 1])
        for s in ex.segments[t + 1:]:
            tv = s.features.shape[0]
            toks = [1] + [int(x) for x in rng.integers(3, vocab_size, size=len(s.tokens) - 2)] + [2]
            segs.append(Segment(rng.standard_normal((tv, s.features.shape[1])) * 3, toks, ""))
        out.append(VideoExample(ex.video_id, segs))
    return out


def cross_segment_causal(kind, seed):
    """True when step-t logits are bit-identical after perturbing every later segment, for all t."""
    with T.precision(np.float64):
        cfg = small_config(kind)
        rng = np.random.default_rng(seed)
        model = jittered_model(cfg, seed)
        ex = random_examples(cfg, rng, n_segments=3, ragged=False)
        base = step_logits(model, ex)
        for t in range(len(base) - 1):
            other = step_logits(model, perturb_after(ex, t, rng, cfg.vocab_size))
            for s in range(t + 1):
                if not np.array_equal(base[s], other[s]):
                    return False
    return True


def within_sentence_causal(kind, seed):
    """True when position-i logits ignore tokens after i, at every step and position."""
    with T.precision(np.float64):
        cfg = small_config(kind)
        rng = np.random.default_rng(seed)
        model = jittered_model(cfg, seed)
        ex = random_examples(cfg, rng, n_segments=2, ragged=False)
        steps = teacher_forced_steps(ex)
        with T.no_grad():
            base = [l.data.copy() for l in forward_paragraph(model, ex, steps=steps).logits]
            for t, batch in enumerate(steps):
                tt = batch.text_in.shape[1]
                for j in range(1, tt):
                    orig = batch.text_in.copy()
                    batch.text_in[:, j:] = rng.integers(3, cfg.vocab_size, size=batch.text_in[:, j:].shape)
                    out = [l.data for l in forward_paragraph(model, ex, steps=steps).logits]
                    batch.text_in[:] = orig
                    if not np.array_equal(out[t][:, :j], base[t][:, :j]):
                        return False
                    for s in range(t):
                        if not np.array_equal(out[s], base[s]):
                            return False
    return True


def cross_step_feature_grad(kind, seed):
    """Gradient of the step-1 loss w.r.t. step-0 video features (zeros if disconnected)."""
    with T.precision(np.float64):
        cfg = small_config(kind)
        rng = np.random.default_rng(seed)
        model = jittered_model(cfg, seed)
        ex = random_examples(cfg, rng, n_segments=2, ragged=False)
        steps = teacher_forced_steps(ex)
        feats = Tensor(steps[0].features.astype(np.float64), requires_grad=True)
        steps[0].feature_tensor = feats
        T.new_tape()
        out = forward_paragraph(model, ex, steps=steps)
        b = steps[1]
        loss = T.cross_entropy(out.logits[1], b.targets, b.loss_mask)
        T.backward(loss)
        return np.zeros(feats.shape) if feats.grad is None else feats.grad


def synthetic_sets(seed, n_videos, n_val, **model_kw):
    """Encode an in-memory synthetic corpus: (vocab, model config, train, val, train flags, val flags)."""
    from mart.data import build_vocab, encode_example, generate_synthetic_corpus

    train_raw, val_raw = generate_synthetic_corpus(seed, n_videos, n_val=n_val)
    vocab = build_vocab(s for _, segs, _ in train_raw for _, s in segs)
    kw = dict(d=16, n_layers=1, heads=2, vocab_size=len(vocab), d_feat=32, max_video_len=100,
              max_text_len=20, max_segments=6, model_kind="mart")
    kw.update(model_kw)
    cfg = ModelConfig(**kw)

    def enc(rows):
        return [encode_example({"video_id": vid, "segments": [{"features": f, "sentence": s} for f, s in segs]},
                               vocab, cfg) for vid, segs, _ in rows]

    flags = lambda rows: [meta["history_flags"] for _, _, meta in rows]
    return vocab, cfg, enc(train_raw), enc(val_raw), flags(train_raw), flags(val_raw)
