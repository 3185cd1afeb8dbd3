"""Shared training runs for the acceptance suite (recurrence benefit and overfit)."""

import time

import numpy as np

from mart.config import TrainConfig
from mart.decoding import decode_corpus
from mart.metrics import r4_repetition
from mart.models import Captioner
from mart.training import OptimizerState, teacher_forced_accuracy, train, train_one_epoch
from mart.rng import stream

from helpers import synthetic_sets

BENEFIT_MODEL = dict(d=64, n_layers=2, heads=4, dropout=0.1)


def recurrence_run(kind, seed, n_train=500, n_val=100, epochs=20, lr=2e-3, verbose=False, keep_model=False):
    """Train one model on the synthetic corpus; report val history accuracy and decoded R@4."""
    vocab, cfg, tr, va, _, vflags = synthetic_sets(seed, n_train + n_val, n_val, model_kind=kind, **BENEFIT_MODEL)
    tcfg = TrainConfig(base_lr=lr, warmup_epochs=2, max_epochs=epochs, batch_size=16, patience=epochs, seed=seed)
    model = Captioner(cfg, seed=seed)
    start = time.perf_counter()
    res = train(model, tr, va, tcfg, vocab,
                on_epoch=(lambda r: print(kind, seed, r.line(), f"t={time.perf_counter() - start:.0f}", flush=True))
                if verbose else None)
    acc = teacher_forced_accuracy(model, va, vflags)
    preds = decode_corpus(model, va, vocab)
    r4 = r4_repetition({vid: " ".join(s) for vid, s in preds.items()})
    out = {"history": acc["history"], "all": acc["all"], "r4": r4, "best_epoch": res.best_epoch,
           "seconds": time.perf_counter() - start}
    if keep_model:
        out.update(model=model, vocab=vocab, val_examples=va)
    return out


def overfit_run(seed=0, n_videos=8, max_epochs=300, lr=1e-3, target=0.99):
    """Epochs MART d=64 needs to fit a handful of videos; returns (accuracy, epochs used)."""
    vocab, cfg, tr, _, _, _ = synthetic_sets(seed, n_videos + 1, 1, d=64, n_layers=2, heads=4, dropout=0.0)
    tr = tr[:n_videos]
    tcfg = TrainConfig(base_lr=lr, warmup_epochs=0, max_epochs=max_epochs, batch_size=n_videos,
                       weight_decay=0.0, seed=seed)
    model = Captioner(cfg, seed=seed)
    opt = OptimizerState()
    rng = stream(seed, "shuffle")
    acc = 0.0
    for epoch in range(max_epochs):
        train_one_epoch(model, tr, tcfg, opt, epoch, rng)
        if epoch % 5 == 4 or epoch == max_epochs - 1:
            acc = teacher_forced_accuracy(model, tr)["all"]
            if acc > target:
                return acc, epoch + 1
    return acc, max_epochs
