"""Finite-difference verification of every primitive and of whole-model losses.

All checks run in float64 with central differences. The relative error of an
entry is ``|a - n| / max(|a|, |n|, 1e-8)`` for analytic ``a`` and numeric ``n``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .data import Segment, VideoExample
from .models import Captioner, ParagraphOutput, forward_paragraph
from .tensor import Tensor
from .training import paragraph_loss

FLOOR = 1e-8


def rel_error(a, n) -> np.ndarray:
    a, n = np.asarray(a, dtype=np.float64), np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), FLOOR)


def numeric_grad(f: Callable[[], float], arr: np.ndarray, coords, h: float) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``arr`` (mutated in place) at ``coords``."""
    out = np.empty(len(coords))
    for i, c in enumerate(coords):
        old = arr[c]
        arr[c] = old + h
        fp = f()
        arr[c] = old - h
        fm = f()
        arr[c] = old
        out[i] = (fp - fm) / (2 * h)
    return out


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    n_checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tol)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name:<40s} max_rel_err={self.max_rel_error:.3e} n={self.n_checked}"


@dataclass
class Report:
    results: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def lines(self) -> list[str]:
        return [r.line() for r in self.results]


def check_function(name: str, fn: Callable[..., Tensor], inputs: list[np.ndarray], h: float = 1e-6,
                   tol: float = 1e-5, seed: int = 0) -> CheckResult:
    """Compare autodiff and finite differences for ``sum(fn(*inputs) * R)``, R random."""
    rng = np.random.default_rng(seed)
    with T.precision(np.float64):
        tensors = [Tensor(x.copy(), requires_grad=True) for x in inputs]
        out = fn(*tensors)
        weights = rng.standard_normal(out.shape)

        def loss_value():
            with T.no_grad():
                return float((fn(*tensors).data * weights).sum())

        T.new_tape()
        out = fn(*tensors)
        loss = T.sum_all(T.mul(out, Tensor(weights)))
        T.backward(loss)
        errs = []
        for t in tensors:
            coords = list(np.ndindex(t.shape))
            num = numeric_grad(loss_value, t.data, coords, h)
            ana = np.array([t.grad[c] for c in coords]) if t.grad is not None else np.zeros(len(coords))
            errs.append(rel_error(ana, num))
    err = np.concatenate(errs) if errs else np.zeros(1)
    return CheckResult(name, float(err.max()), int(err.size), tol)


def primitive_suite(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    r = rng.standard_normal
    ids = np.array([[1, 3, 0], [2, 2, 4]])
    targets = np.array([[1, 0, 2], [3, 3, 1]])
    mask = np.array([[True, True, False], [True, False, True]])
    sel = np.array([[True, False, True, False], [False, True, True, True], [True, True, False, False]])
    gather = np.array([[0, 2], [3, 1], [2, 2]])
    gather_b = np.stack([gather, gather[::-1]])[:, None]  # per-example, shared over heads
    checks = [
        ("matmul", lambda a, b: T.matmul(a, b), [r((3, 4)), r((4, 2))]),
        ("matmul_batched", lambda a, b: T.matmul(a, b), [r((2, 3, 4)), r((2, 4, 2))]),
        ("linear", lambda x, w, b: T.linear(x, w, b), [r((2, 3, 4)), r((5, 4)), r(5)]),
        ("softmax_rows", lambda x: T.softmax_rows(x), [r((3, 5))]),
        ("layer_norm", lambda x, g, b: T.layer_norm(x, g, b, 1e-5), [r((3, 4)), r(4), r(4)]),
        ("tanh", T.tanh, [r((3, 4))]),
        ("sigmoid", T.sigmoid, [3 * r((3, 4))]),
        ("gelu", T.gelu, [r((3, 4))]),
        ("add", T.add, [r((3, 4)), r((3, 4))]),
        ("add_bias", T.add, [r((2, 3, 4)), r(4)]),
        ("sub", T.sub, [r((3, 4)), r((3, 4))]),
        ("hadamard", T.mul, [r((3, 4)), r((3, 4))]),
        ("gain", T.mul, [r((3, 4)), r(4)]),
        ("scale", lambda x: T.scale(x, -1.7), [r((3, 4))]),
        ("concat_axis0", lambda a, b: T.concat([a, b], axis=0), [r((2, 3)), r((1, 3))]),
        ("concat_axis1", lambda a, b: T.concat([a, b], axis=1), [r((2, 3)), r((2, 2))]),
        ("embedding", lambda w: T.embedding(w, ids), [r((5, 3))]),
        ("transpose", lambda x: T.transpose(x, (2, 0, 1)), [r((2, 3, 4))]),
        ("reshape", lambda x: T.reshape(x, (4, 6)), [r((2, 3, 4))]),
        ("index", lambda x: T.index(x, (slice(None), slice(1, 3))), [r((3, 4))]),
        ("where", lambda a, b: T.where(sel, a, b), [r((3, 4)), r((3, 4))]),
        ("take_last", lambda x: T.take_last(x, gather), [r((2, 3, 4))]),
        ("take_last_batched", lambda x: T.take_last(x, gather_b), [r((2, 2, 3, 4))]),
        ("broadcast_leading", lambda x: T.broadcast_leading(x, (3,)), [r((2, 4))]),
        ("cross_entropy", lambda x: T.cross_entropy(x, targets, mask), [r((2, 3, 5))]),
    ]
    return [check_function(name, fn, inputs, seed=seed + i) for i, (name, fn, inputs) in enumerate(checks)]


# ---------------------------------------------------------------------------
# whole-model checks


def tiny_config(kind: str, **kw) -> ModelConfig:
    base = dict(d=8, n_layers=2, heads=2, mem_len=1, vocab_size=11, d_feat=6, max_video_len=6,
                max_text_len=8, max_segments=4, model_kind=kind, dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


def tiny_examples(cfg: ModelConfig, n_videos: int = 2, n_segments: int = 2, seed: int = 0) -> list[VideoExample]:
    rng = np.random.default_rng(seed)
    out = []
    for v in range(n_videos):
        segs = []
        for _ in range(n_segments):
            tv = int(rng.integers(2, cfg.max_video_len + 1))
            tt = int(rng.integers(2, cfg.max_text_len - 1))
            words = [int(x) for x in rng.integers(4, cfg.vocab_size, size=tt)]
            segs.append(Segment(rng.standard_normal((tv, cfg.d_feat)).astype(np.float32), [1] + words + [2], ""))
        out.append(VideoExample(f"v{v}", segs))
    return out


def model_loss(model: Captioner, examples) -> Tensor:
    return paragraph_loss(forward_paragraph(model, examples))


def frozen_state_loss(model: Captioner, ref: ParagraphOutput) -> Tensor:
    """Paragraph loss with every step fed the recorded state of a reference pass.

    This is the function whose gradient truncated backprop computes: the xl cache
    is detached, so the numeric side must hold it fixed too.
    """
    out = ParagraphOutput([], ref.steps)
    state = None
    for batch, next_state in zip(ref.steps, ref.states):
        logits, _ = model.step(batch, state)
        out.logits.append(logits)
        state = next_state
    return paragraph_loss(out)


def check_model(kind: str, h: float = 1e-3, tol: float = 1e-3, per_tensor: int = 4, seed: int = 0,
                cfg: ModelConfig | None = None, examples=None, jitter: float = 0.15) -> list[CheckResult]:
    """Finite-difference check of the paragraph loss w.r.t. every parameter tensor.

    Up to ``per_tensor`` entries per tensor (chosen at random) are perturbed; one
    result per parameter group (the name up to its last component).
    """
    cfg = cfg or tiny_config(kind)
    rng = np.random.default_rng(seed)
    with T.precision(np.float64):
        model = Captioner(cfg, seed=seed).astype(np.float64)
        # move off the symmetric init (zero biases, unit gains) to a generic point
        for name, p in model.params.items():
            p.data = p.data + jitter * rng.standard_normal(p.shape)
        examples = examples or tiny_examples(cfg, seed=seed)
        model.eval()
        T.new_tape()
        model.zero_grad()
        if cfg.model_kind == "xl":
            with T.no_grad():
                ref = forward_paragraph(model, examples)
            T.backward(frozen_state_loss(model, ref))
        else:
            T.backward(model_loss(model, examples))

        def value():
            with T.no_grad():
                if cfg.model_kind == "xl":
                    return frozen_state_loss(model, ref).item()
                return model_loss(model, examples).item()

        groups: dict[str, list[np.ndarray]] = {}
        for name, p in model.params.items():
            flat = list(np.ndindex(p.shape))
            pick = rng.choice(len(flat), size=min(per_tensor, len(flat)), replace=False)
            coords = [flat[i] for i in pick]
            num = numeric_grad(value, p.data, coords, h)
            ana = np.array([p.grad[c] for c in coords])
            groups.setdefault(f"{kind}:{name.rsplit('.', 1)[0]}", []).append(rel_error(ana, num))
    return [CheckResult(g, float(np.concatenate(e).max()), int(sum(x.size for x in e)), tol)
            for g, e in groups.items()]


def run_all(kinds=("vanilla", "mart", "xl", "xlrg"), seed: int = 0, per_tensor: int = 4) -> Report:
    report = Report(primitive_suite(seed))
    for kind in kinds:
        report.results.extend(check_model(kind, seed=seed, per_tensor=per_tensor))
    return report
