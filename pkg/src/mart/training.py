"""Loss, Adam with decoupled weight decay, warmup schedule and the training loop."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .models import Captioner, ParagraphOutput, forward_paragraph, teacher_forced_steps
from .rng import stream
from .tensor import Tensor

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def masked_cross_entropy(logits: Tensor, targets, pad_mask) -> Tensor:
    """Mean NLL over positions where ``pad_mask`` is true (text positions only)."""
    return T.cross_entropy(logits, targets, pad_mask)


def paragraph_loss(out: ParagraphOutput) -> Tensor:
    """Token-mean NLL over every valid text position of every segment step."""
    total = None
    count = 0
    for logits, batch in zip(out.logits, out.steps):
        mask = batch.loss_mask
        k = int(mask.sum())
        if k == 0:
            continue
        term = T.scale(T.cross_entropy(logits, batch.targets, mask), float(k))
        total = term if total is None else T.add(total, term)
        count += k
    if total is None:
        raise TrainingError("batch has no text positions")
    return T.scale(total, 1.0 / count)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def decays(name: str) -> bool:
    """Weight decay skips biases and layer-norm gains/shifts."""
    leaf = name.rsplit(".", 1)[-1]
    # ".g"/".b" are norm gain/shift; "b*" are biases; XL's u/v are attention biases
    return not (leaf.startswith("b") or leaf in ("g", "u", "v"))


def adam_step(params: dict[str, Tensor], state: OptimizerState, cfg: TrainConfig, lr_mult: float = 1.0) -> None:
    """In-place Adam update with decoupled decay:
    p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)."""
    state.step += 1
    lr = cfg.base_lr * lr_mult
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        if cfg.weight_decay and decays(name):
            update = update + cfg.weight_decay * p.data
        p.data = (p.data - lr * update).astype(p.data.dtype)


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup ``(epoch + 1) / warmup`` capped at 1, then constant (or linear decay)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    warm = min(1.0, (epoch + 1) / cfg.warmup_epochs) if cfg.warmup_epochs > 0 else 1.0
    if cfg.schedule == "linear" and epoch >= cfg.warmup_epochs:
        span = max(1, cfg.max_epochs - cfg.warmup_epochs)
        return max(0.0, 1.0 - (epoch - cfg.warmup_epochs) / span)
    return warm


def clip_grad_norm(params, max_norm: float) -> float:
    norm = T.parameters_grad_norm(params)
    if max_norm > 0 and norm > max_norm:
        f = max_norm / (norm + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * f
    return norm


# ---------------------------------------------------------------------------
# accuracy


def teacher_forced_accuracy(model: Captioner, examples, history_flags=None, batch_size: int = 32) -> dict[str, float]:
    """Argmax accuracy of next-token predictions under teacher forcing.

    Returns ``all`` over every target token and, when flags are given, ``history``
    over targets whose correct value depends on earlier segments.
    """
    was = model.training
    model.eval()
    hit = tot = hhit = htot = 0
    with T.no_grad():
        for i in range(0, len(examples), batch_size):
            chunk = examples[i:i + batch_size]
            flags = history_flags[i:i + batch_size] if history_flags is not None else None
            out = forward_paragraph(model, chunk, flags)
            for logits, b in zip(out.logits, out.steps):
                pred = logits.data.argmax(axis=-1)
                ok = (pred == b.targets) & b.loss_mask
                hit += int(ok.sum())
                tot += int(b.loss_mask.sum())
                if b.history is not None:
                    hm = b.history & b.loss_mask
                    hhit += int((ok & hm).sum())
                    htot += int(hm.sum())
    model.train(was)
    res = {"all": hit / max(tot, 1)}
    if history_flags is not None:
        res["history"] = hhit / max(htot, 1)
    return res


# ---------------------------------------------------------------------------
# loop


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    cider: float
    bleu4: float
    r4: float
    lr: float

    def line(self) -> str:
        return (f"epoch={self.epoch} loss={self.loss:.6f} cider={self.cider:.6f} "
                f"bleu4={self.bleu4:.6f} r4={self.r4:.6f} lr={self.lr:.8f}")


@dataclass
class TrainResult:
    best_params: dict[str, np.ndarray]
    best_epoch: int
    best_cider: float
    log: list[EpochRecord]
    optimizer: OptimizerState


def train_one_epoch(model: Captioner, examples, cfg: TrainConfig, opt: OptimizerState, epoch: int,
                    rng: np.random.Generator, history_flags=None) -> float:
    model.train()
    order = rng.permutation(len(examples))
    mult = lr_schedule(epoch, cfg)
    params = model.params
    plist = list(params.values())
    losses = []
    for start in range(0, len(order), cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        T.new_tape()
        out = forward_paragraph(model, [examples[i] for i in idx])
        loss = paragraph_loss(out)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch starting {start}")
        model.zero_grad()
        T.backward(loss)
        clip_grad_norm(plist, cfg.clip_norm)
        adam_step(params, opt, cfg, mult)
        losses.append(value)
    model.eval()
    return float(np.mean(losses))


def train(model: Captioner, train_set, val_set, cfg: TrainConfig, vocab, *,
          log_path=None, on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> TrainResult:
    """Train with early stopping on validation CIDEr-D; restores the best parameters."""
    from .decoding import decode_corpus
    from .metrics import score_all

    rng = stream(cfg.seed, "shuffle")
    opt = OptimizerState()
    best = None
    best_cider = -math.inf
    best_epoch = -1
    since_best = 0
    records = []
    refs = {ex.video_id: [" ".join(s.sentence for s in ex.segments)] for ex in val_set}
    logfh = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        for epoch in range(cfg.max_epochs):
            loss = train_one_epoch(model, train_set, cfg, opt, epoch, rng)
            preds = decode_corpus(model, val_set, vocab)
            scores = score_all({vid: " ".join(s) for vid, s in preds.items()}, refs)
            rec = EpochRecord(epoch, loss, scores["cider"], scores["bleu4"], scores["r4"],
                              cfg.base_lr * lr_schedule(epoch, cfg))
            records.append(rec)
            log.info(rec.line())
            if logfh:
                logfh.write(rec.line() + "\n")
                logfh.flush()
            if on_epoch:
                on_epoch(rec)
            if rec.cider > best_cider:
                best_cider, best_epoch = rec.cider, epoch
                best = {k: p.data.copy() for k, p in model.params.items()}
                since_best = 0
            else:
                since_best += 1
                if since_best > cfg.patience:
                    break
    finally:
        if logfh:
            logfh.close()
    for k, p in model.params.items():
        p.data = best[k]
    return TrainResult(best, best_epoch, best_cider, records, copy.deepcopy(opt))
