"""Vanilla transformer, MART and Transformer-XL(-RG) captioners.

All three consume a video one event segment at a time. A :class:`StepBatch` holds
segment ``t`` for a batch of videos (padded); ``Captioner.step`` maps it plus the
carried state (memory bank, hidden-state cache, or nothing) to text logits and the
next state.

Linear maps store weights as ``(out, in)`` and act on row vectors, ``y = x W^T + b``;
so a weight written as ``W M`` on column-stacked memory becomes ``M W^T`` here.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .attention import (
    MultiHeadParams,
    RelativeAttentionParams,
    build_unified_mask,
    causal_mask,
    multi_head_attention,
    relative_multi_head_attention,
    sinusoidal_positional_encoding,
)
from .config import BOS, EOS, PAD, ModelConfig
from .rng import stream
from .tensor import ShapeError, Tensor


# ---------------------------------------------------------------------------
# batches


@dataclass
class StepBatch:
    """Segment ``t`` of every video in a batch, padded to common lengths."""

    features: np.ndarray  # (B, T_video, d_feat)
    video_mask: np.ndarray  # (B, T_video) bool
    text_in: np.ndarray  # (B, T_text) int: BOS w1 .. wn
    text_mask: np.ndarray  # (B, T_text) bool
    targets: np.ndarray  # (B, T_text) int: w1 .. wn EOS
    active: np.ndarray  # (B,) bool, False once a video has run out of segments
    history: Optional[np.ndarray] = None  # (B, T_text) bool: target is history-dependent
    feature_tensor: Optional[Tensor] = None  # lets tests take gradients w.r.t. inputs

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @property
    def loss_mask(self) -> np.ndarray:
        return self.text_mask & self.active[:, None]

    def key_valid(self) -> np.ndarray:
        return np.concatenate([self.video_mask, self.text_mask], axis=1)


def make_step_batch(features, texts, active=None, history=None, d_feat=None) -> StepBatch:
    """Pad one segment per video. ``texts`` are full ``BOS .. EOS`` sequences
    (teacher forcing) or bare prefixes starting with BOS (decoding, no targets)."""
    b = len(features)
    if b != len(texts):
        raise ValueError("features and texts differ in batch size")
    d_feat = d_feat or features[0].shape[1]
    tv = max(f.shape[0] for f in features)
    tt = max(len(t) for t in texts)
    feats = np.zeros((b, tv, d_feat), dtype=np.float32)
    vmask = np.zeros((b, tv), dtype=bool)
    text_in = np.full((b, tt), PAD, dtype=np.int64)
    tmask = np.zeros((b, tt), dtype=bool)
    for i, (f, t) in enumerate(zip(features, texts)):
        feats[i, : f.shape[0]] = f
        vmask[i, : f.shape[0]] = True
        text_in[i, : len(t)] = t
        tmask[i, : len(t)] = True
    targets = np.full((b, tt), PAD, dtype=np.int64)
    targets[:, :-1] = text_in[:, 1:]
    act = np.ones(b, dtype=bool) if active is None else np.asarray(active, dtype=bool)
    return StepBatch(feats, vmask, text_in, tmask, targets, act, history)


def teacher_forced_steps(examples, history_flags=None) -> list[StepBatch]:
    """One :class:`StepBatch` per segment index, inputs ``seq[:-1]`` and targets ``seq[1:]``.

    ``history_flags[i][t]`` lists per-word flags for video ``i`` segment ``t``; the flag of
    word ``k`` lands on the target position predicting it.
    """
    if not examples:
        raise ValueError("empty batch")
    n_steps = max(len(ex.segments) for ex in examples)
    d_feat = examples[0].segments[0].features.shape[1]
    steps = []
    for t in range(n_steps):
        feats, ins, tgts, act = [], [], [], []
        for ex in examples:
            if t < len(ex.segments):
                seg = ex.segments[t]
                feats.append(seg.features)
                ins.append(seg.tokens[:-1])
                tgts.append(seg.tokens[1:])
                act.append(True)
            else:
                feats.append(np.zeros((1, d_feat), dtype=np.float32))
                ins.append([BOS])
                tgts.append([EOS])
                act.append(False)
        batch = make_step_batch(feats, ins, act, d_feat=d_feat)
        batch.targets[:] = PAD
        for i, tg in enumerate(tgts):
            batch.targets[i, : len(tg)] = tg
        if history_flags is not None:
            hist = np.zeros(batch.text_in.shape, dtype=bool)
            for i, ex in enumerate(examples):
                if t < len(ex.segments) and history_flags[i] is not None:
                    flags = history_flags[i][t][: len(tgts[i]) - 1]
                    hist[i, : len(flags)] = np.asarray(flags, dtype=bool)
            batch.history = hist
        steps.append(batch)
    return steps


# ---------------------------------------------------------------------------
# recurrent state


@dataclass
class MemoryBank:
    states: list[Tensor]  # per layer, (B, T_m, d)
    step: int = 0


@dataclass
class XLCache:
    hidden: list[Tensor]  # per layer: input hidden states of the previous step, (B, T_c, d)
    valid: Optional[np.ndarray]  # (B, T_c) key validity of the cached window
    keep_gradient: bool = False
    step: int = 0
    positions: Optional[np.ndarray] = None  # (B, T_c) cached slot positions relative to the next window


# ---------------------------------------------------------------------------
# parameters


class Captioner:
    """Parameter store plus forward passes for one of the four model kinds."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        self.training = False
        self._init_rng = stream(seed, "init")
        self.dropout_rng = stream(seed, "dropout")
        self._build()

    # -- construction -----------------------------------------------------

    def _weight(self, name, shape):
        self.params[name] = Tensor(self._init_rng.normal(0.0, self.cfg.init_std, shape), requires_grad=True)

    def _bias(self, name, n):
        self.params[name] = Tensor(np.zeros(n), requires_grad=True)

    def _norm(self, name):
        d = self.cfg.d
        self.params[name + ".g"] = Tensor(np.ones(d), requires_grad=True)
        self.params[name + ".b"] = Tensor(np.zeros(d), requires_grad=True)

    def _linear(self, name, n_out, n_in):
        self._weight(name + ".w", (n_out, n_in))
        self._bias(name + ".b", n_out)

    def _mha(self, name):
        d = self.cfg.d
        for part in ("q", "k", "v", "o"):
            self._weight(f"{name}.w{part}", (d, d))
            self._bias(f"{name}.b{part}", d)

    def _ffn(self, name):
        self._linear(name + ".fc1", self.cfg.ffn, self.cfg.d)
        self._linear(name + ".fc2", self.cfg.d, self.cfg.ffn)

    def _build(self):
        c = self.cfg
        d = c.d
        self._weight("emb.word", (c.vocab_size, d))
        self._linear("emb.video", d, c.d_feat)
        self._norm("emb.video_ln")
        self._norm("emb.text_ln")
        self._weight("emb.type", (2, d))
        if c.model_kind == "vanilla":
            for l in range(c.n_layers):
                self._mha(f"enc.{l}.self")
                self._norm(f"enc.{l}.ln1")
                self._ffn(f"enc.{l}.ffn")
                self._norm(f"enc.{l}.ln2")
            for l in range(c.n_layers):
                self._mha(f"dec.{l}.self")
                self._norm(f"dec.{l}.ln1")
                self._mha(f"dec.{l}.cross")
                self._norm(f"dec.{l}.ln2")
                self._ffn(f"dec.{l}.ffn")
                self._norm(f"dec.{l}.ln3")
        else:
            for l in range(c.n_layers):
                p = f"layers.{l}"
                self._mha(p + ".self")
                self._norm(p + ".ln1")
                if c.model_kind == "mart":
                    self._mha(p + ".mem_attn")
                    if c.memory_init == "zeros":
                        self.params[p + ".mem0"] = Tensor(np.zeros((c.mem_len, d)), requires_grad=True)
                    else:
                        self._weight(p + ".mem0", (c.mem_len, d))
                    self._mha(p + ".upd.attn")
                    for w in ("w_mc", "w_sc", "w_mz", "w_sz"):
                        self._weight(f"{p}.upd.{w}", (d, d))
                    self._bias(p + ".upd.b_c", d)
                    self._bias(p + ".upd.b_z", d)
                else:
                    self._weight(p + ".rel.w_r", (d, d))
                    self._bias(p + ".rel.u", d)
                    self._bias(p + ".rel.v", d)
                self._ffn(p + ".ffn")
                self._norm(p + ".ln2")
        if not c.tie_embeddings:
            self._weight("head.w", (c.vocab_size, d))
        self._bias("head.b", c.vocab_size)
        if c.model_kind in ("xl", "xlrg"):
            # offsets run from -(T_c - 1) (video looking ahead) to 2 T_c - 1 (across one cached step)
            t_c = c.max_video_len + c.max_text_len
            self._rel_center = t_c - 1
            offsets = np.arange(-(t_c - 1), 2 * t_c)
            self.rel_table = Tensor(sinusoidal_positional_encoding(len(offsets), d, positions=offsets))

    # -- parameter utilities ----------------------------------------------

    def named_parameters(self):
        return list(self.params.items())

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def train(self, mode: bool = True):
        self.training = mode
        return self

    def eval(self):
        return self.train(False)

    def astype(self, dtype):
        for p in self.params.values():
            p.data = p.data.astype(dtype)
            p.grad = None
        if hasattr(self, "rel_table"):
            self.rel_table = Tensor(self.rel_table.data.astype(dtype))
        return self

    def mha(self, name) -> MultiHeadParams:
        P = self.params
        return MultiHeadParams(P[name + ".wq"], P[name + ".wk"], P[name + ".wv"], P[name + ".wo"], self.cfg.heads,
                               P[name + ".bq"], P[name + ".bk"], P[name + ".bv"], P[name + ".bo"])

    def rel(self, layer) -> RelativeAttentionParams:
        P = self.params
        p = f"layers.{layer}.rel"
        return RelativeAttentionParams(self.rel_table, P[p + ".w_r"], P[p + ".u"], P[p + ".v"], self._rel_center)

    def updater(self, layer) -> "MemoryUpdaterParams":
        P = self.params
        p = f"layers.{layer}.upd"
        return MemoryUpdaterParams(self.mha(p + ".attn"), P[p + ".w_mc"], P[p + ".w_sc"], P[p + ".w_mz"],
                                   P[p + ".w_sz"], P[p + ".b_c"], P[p + ".b_z"])

    # -- small blocks -----------------------------------------------------

    def _drop(self, x: Tensor) -> Tensor:
        return T.dropout(x, self.cfg.dropout, self.dropout_rng, self.training)

    def _ln(self, x, name):
        return T.layer_norm(x, self.params[name + ".g"], self.params[name + ".b"], self.cfg.layer_norm_eps)

    def _lin(self, x, name):
        return T.linear(x, self.params[name + ".w"], self.params[name + ".b"])

    def _ffn_apply(self, x, name):
        return self._lin(T.gelu(self._lin(x, name + ".fc1")), name + ".fc2")

    def logits(self, h_text: Tensor) -> Tensor:
        w = self.params["emb.word"] if self.cfg.tie_embeddings else self.params["head.w"]
        return T.linear(h_text, w, self.params["head.b"])

    # -- state ------------------------------------------------------------

    def init_state(self, batch_size: int):
        kind = self.cfg.model_kind
        if kind == "mart":
            return MemoryBank([T.broadcast_leading(self.params[f"layers.{l}.mem0"], (batch_size,))
                               for l in range(self.cfg.n_layers)])
        if kind in ("xl", "xlrg"):
            return XLCache([], None, keep_gradient=(kind == "xlrg"))
        return None

    # -- forward ----------------------------------------------------------

    def step(self, batch: StepBatch, state=None, update: bool = True):
        """Logits ``(B, T_text, V)`` for one segment step and the next state."""
        kind = self.cfg.model_kind
        if state is None and kind != "vanilla":
            state = self.init_state(batch.size)
        if kind == "vanilla":
            return vanilla_forward(self, batch), None
        if kind == "mart":
            return mart_step(self, batch, state, update)
        return xl_step(self, batch, state, update)


@dataclass
class MemoryUpdaterParams:
    attn: MultiHeadParams
    w_mc: Tensor
    w_sc: Tensor
    w_mz: Tensor
    w_sz: Tensor
    b_c: Tensor
    b_z: Tensor


# ---------------------------------------------------------------------------
# embeddings


def embed_inputs(model: Captioner, batch: StepBatch, positional: bool = True) -> Tensor:
    """``[LN(video proj) + PE + type_0 ; LN(word emb * sqrt(d)) + PE + type_1]`` -> (B, T_c, d)."""
    c = model.cfg
    P = model.params
    if batch.text_in.size and batch.text_in.max() >= c.vocab_size:
        raise IndexError(f"token id {batch.text_in.max()} >= vocab_size {c.vocab_size}")
    tv, tt = batch.features.shape[1], batch.text_in.shape[1]
    if tv > c.max_video_len or tt > c.max_text_len:
        raise ShapeError(f"window ({tv} video, {tt} text) exceeds configured maxima")
    feats = batch.feature_tensor if batch.feature_tensor is not None else Tensor(batch.features)
    video = model._ln(model._lin(feats, "emb.video"), "emb.video_ln")
    text = model._ln(T.scale(T.embedding(P["emb.word"], batch.text_in), np.sqrt(c.d)), "emb.text_ln")
    dtype = video.data.dtype
    if positional:
        video = T.add_const(video, sinusoidal_positional_encoding(tv, c.d).astype(dtype))
        text = T.add_const(text, sinusoidal_positional_encoding(tt, c.d).astype(dtype))
    video = T.add(video, T.index(P["emb.type"], 0))
    text = T.add(text, T.index(P["emb.type"], 1))
    return model._drop(T.concat([video, text], axis=1))


def unified_batch_mask(batch: StepBatch) -> np.ndarray:
    tv, tt = batch.features.shape[1], batch.text_in.shape[1]
    return build_unified_mask(tv, tt)[None] & batch.key_valid()[:, None, :]


# ---------------------------------------------------------------------------
# vanilla


def vanilla_forward(model: Captioner, batch: StepBatch) -> Tensor:
    """Separate N-layer encoder over video and N-layer decoder over text."""
    if batch.text_in.shape[1] < 1:
        raise ValueError("empty text window")
    c = model.cfg
    tv = batch.features.shape[1]
    h = embed_inputs(model, batch)
    hv = T.index(h, (slice(None), slice(0, tv)))
    ht = T.index(h, (slice(None), slice(tv, None)))
    vmask = batch.video_mask[:, None, :]
    enc_mask = np.broadcast_to(vmask, (batch.size, tv, tv))
    for l in range(c.n_layers):
        p = f"enc.{l}"
        hv = model._ln(T.add(hv, model._drop(multi_head_attention(model.mha(p + ".self"), hv, hv, hv, enc_mask))), p + ".ln1")
        hv = model._ln(T.add(hv, model._drop(model._ffn_apply(hv, p + ".ffn"))), p + ".ln2")
    tt = batch.text_in.shape[1]
    self_mask = causal_mask(tt)[None] & batch.text_mask[:, None, :]
    cross_mask = np.broadcast_to(vmask, (batch.size, tt, tv))
    for l in range(c.n_layers):
        p = f"dec.{l}"
        ht = model._ln(T.add(ht, model._drop(multi_head_attention(model.mha(p + ".self"), ht, ht, ht, self_mask))), p + ".ln1")
        ht = model._ln(T.add(ht, model._drop(multi_head_attention(model.mha(p + ".cross"), ht, hv, hv, cross_mask))), p + ".ln2")
        ht = model._ln(T.add(ht, model._drop(model._ffn_apply(ht, p + ".ffn"))), p + ".ln3")
    return model.logits(ht)


# ---------------------------------------------------------------------------
# MART


def memory_update(p: MemoryUpdaterParams, m_prev: Tensor, h_bar: Tensor, mask=None) -> Tensor:
    """Gated update of the memory slots from the current intermediate hidden states.

    S = MHA(M, H, H);  C = tanh(M W_mc^T + S W_sc^T + b_c);
    Z = sigmoid(M W_mz^T + S W_sz^T + b_z);  M' = (1 - Z) * C + Z * M
    """
    if m_prev.shape[-1] != h_bar.shape[-1]:
        raise ShapeError(f"memory {m_prev.shape} and hidden {h_bar.shape} widths differ")
    s = multi_head_attention(p.attn, m_prev, h_bar, h_bar, mask)

    c = T.tanh(T.add(T.linear(m_prev, p.w_mc, p.b_c), T.linear(s, p.w_sc)))
    z = T.sigmoid(T.add(T.linear(m_prev, p.w_mz, p.b_z), T.linear(s, p.w_sz)))
    one_minus_z = T.add_scalar(T.scale(z, -1.0), 1.0)
    return T.add(T.mul(one_minus_z, c), T.mul(z, m_prev))


def mart_layer_forward(model: Captioner, layer: int, h_prev: Tensor, m_prev: Optional[Tensor], mask: np.ndarray):
    """One shared encoder-decoder layer. Returns ``(H_bar, H)``.

    ``H_bar`` = LN(H + SelfAttn(H)); the memory-augmented attention then queries with
    ``H_bar`` over keys/values ``[M_prev; H_bar]`` (memory visible to every position);
    feed-forward, residual onto ``H_bar``, layer norm.
    """
    p = f"layers.{layer}"
    h_bar = model._ln(T.add(h_prev, model._drop(multi_head_attention(model.mha(p + ".self"), h_prev, h_prev, h_prev, mask))), p + ".ln1")
    if m_prev is not None:
        if m_prev.shape[-2] < 1:
            raise ShapeError("memory length must be >= 1")
        kv = T.concat([m_prev, h_bar], axis=-2)
        mem_cols = np.ones(mask.shape[:-1] + (m_prev.shape[-2],), dtype=bool)
        kv_mask = np.concatenate([mem_cols, mask], axis=-1)
    else:
        kv, kv_mask = h_bar, mask
    a = multi_head_attention(model.mha(p + ".mem_attn"), h_bar, kv, kv, kv_mask)
    h = model._ln(T.add(h_bar, model._drop(model._ffn_apply(a, p + ".ffn"))), p + ".ln2")
    return h_bar, h


def mart_step(model: Captioner, batch: StepBatch, bank: MemoryBank, update: bool = True):
    c = model.cfg
    h = embed_inputs(model, batch)
    mask = unified_batch_mask(batch)
    tv = batch.features.shape[1]
    recur = c.recurrence
    new_states = []
    upd_mask = batch.key_valid()[:, None, :]
    for l in range(c.n_layers):
        m_prev = bank.states[l] if recur else None
        h_bar, h = mart_layer_forward(model, l, h, m_prev, mask)
        if update and recur:
            m_next = memory_update(model.updater(l), m_prev,
                                   h_bar, np.broadcast_to(upd_mask, (batch.size, c.mem_len, upd_mask.shape[-1])))
            m_next = T.where(batch.active[:, None, None], m_next, m_prev)
            if not c.cross_step_gradients:
                m_next = m_next.detach()
            new_states.append(m_next)
    logits = model.logits(T.index(h, (slice(None), slice(tv, None))))
    if update and recur:
        return logits, MemoryBank(new_states, bank.step + 1)
    return logits, bank


# ---------------------------------------------------------------------------
# Transformer-XL


def xl_layer_forward(model: Captioner, layer: int, h_prev: Tensor, cache: Optional[Tensor],
                     mask: np.ndarray, keep_gradient: bool, offsets=None) -> Tensor:
    """Relative attention over ``[SG(cache); H]`` then feed-forward, each with residual + LN."""
    p = f"layers.{layer}"
    if cache is not None:
        if cache.shape[0] != h_prev.shape[0] or cache.shape[-1] != h_prev.shape[-1]:
            raise ShapeError(f"cache {cache.shape} does not match hidden {h_prev.shape}")
        mem = cache if keep_gradient else cache.detach()
        kv = T.concat([mem, h_prev], axis=-2)
    else:
        kv = h_prev
    a = relative_multi_head_attention(model.mha(p + ".self"), model.rel(layer), h_prev, kv, mask, offsets)
    h = model._ln(T.add(h_prev, model._drop(a)), p + ".ln1")
    return model._ln(T.add(h, model._drop(model._ffn_apply(h, p + ".ffn"))), p + ".ln2")


def window_positions(batch: StepBatch) -> np.ndarray:
    """Unpadded position of every window slot: video frames, then text, per example.

    Padding slots get position 0; they are masked, so their value only has to stay
    inside the relative table.
    """
    n_video = batch.video_mask.sum(axis=1)
    tv, tt = batch.video_mask.shape[1], batch.text_mask.shape[1]
    pos = np.zeros((batch.size, tv + tt), dtype=np.int64)
    pos[:, :tv] = np.where(batch.video_mask, np.arange(tv)[None], 0)
    pos[:, tv:] = np.where(batch.text_mask, n_video[:, None] + np.arange(tt)[None], 0)
    return pos


def xl_step(model: Captioner, batch: StepBatch, cache: XLCache, update: bool = True):
    c = model.cfg
    h = embed_inputs(model, batch, positional=False)
    mask = unified_batch_mask(batch)
    q_pos = window_positions(batch)
    k_pos = q_pos
    if cache.hidden:
        cached = np.broadcast_to(cache.valid[:, None, :], (batch.size, mask.shape[1], cache.valid.shape[1]))
        mask = np.concatenate([cached, mask], axis=-1)
        k_pos = np.concatenate([cache.positions, q_pos], axis=1)
    offsets = q_pos[:, :, None] - k_pos[:, None, :]
    tv = batch.features.shape[1]
    inputs = []
    for l in range(c.n_layers):
        inputs.append(h)
        h = xl_layer_forward(model, l, h, cache.hidden[l] if cache.hidden else None, mask, cache.keep_gradient,
                             offsets)
    logits = model.logits(T.index(h, (slice(None), slice(tv, None))))
    if not update:
        return logits, cache
    hidden = inputs if cache.keep_gradient else [x.detach() for x in inputs]
    valid = batch.key_valid()
    # seen from the next window, this one ends just before position 0
    length = valid.sum(axis=1, keepdims=True)
    next_pos = np.where(valid, q_pos - length, 0)
    return logits, XLCache(hidden, valid, cache.keep_gradient, cache.step + 1, next_pos)


# ---------------------------------------------------------------------------
# paragraphs


@dataclass
class ParagraphOutput:
    logits: list[Tensor]
    steps: list[StepBatch]
    state: object = None
    states: list = field(default_factory=list)


def forward_paragraph(model: Captioner, examples, history_flags=None, steps=None) -> ParagraphOutput:
    """Teacher-forced pass over every segment, threading the recurrent state."""
    if not examples and steps is None:
        raise ValueError("no examples")
    if steps is None:
        if any(len(ex.segments) == 0 for ex in examples):
            raise ValueError("example with zero segments")
        steps = teacher_forced_steps(examples, history_flags)
    state = None
    out = ParagraphOutput([], steps)
    for batch in steps:
        logits, state = model.step(batch, state)
        out.logits.append(logits)
        out.states.append(state)
    out.state = state
    return out
