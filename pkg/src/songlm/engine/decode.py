"""Autoregressive decoding for :class:`~songlm.lm.HierLM`.

Three interchangeable step implementations share one sampling loop:

``recompute``
    every step rebuilds the condition embedding, positional tables and
    masks, then runs both sub-models over their whole prefix.
``kv``
    the global model keeps per-layer caches across frames; the local model
    keeps caches within a frame. Masks and position tensors for the local
    bucket are built once per session.
``fixed_shape``
    the global step, the frame embedding and each local position are
    captured once into op lists over preallocated buffers. Attention spans
    the full cache capacity under an additive mask, and every per-step value
    (tokens, positions) is written into an input buffer before replay.

Sampling happens on the host with per-item ``numpy`` generators; each step
draws ``K`` uniforms per batch item before any sampling happens.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch

from ..errors import EmptyBatch, SessionExhausted, TooLong
from ..lm import HierLM
from ..lyrics import CondSequence
from ..nn import DTYPE
from .cache import KVCacheSet
from .ops import Dispatcher, Recorder, StepMetrics
from .sampling import SamplerConfig, cfg_logits, top_k_sample

MODES = ("recompute", "kv", "fixed_shape")

StreamSink = Callable[[int, np.ndarray], None]


class SlotCache:
    """Full-capacity cache for captured steps: writes go to the slots held in
    ``slot`` (an injected index tensor) and attention always reads every slot."""

    def __init__(self, batch: int, n_heads: int, capacity: int, head_dim: int):
        self.k = torch.zeros(batch, n_heads, capacity, head_dim, dtype=DTYPE)
        self.v = torch.zeros(batch, n_heads, capacity, head_dim, dtype=DTYPE)
        self.slot: torch.Tensor | None = None

    def append(self, k_t, v_t, ops: Dispatcher) -> None:
        ops.index_copy_(self.k, 2, self.slot, k_t)
        ops.index_copy_(self.v, 2, self.slot, v_t)

    def keys(self):
        return self.k

    def values(self):
        return self.v


def _additive_causal(t: int, s: int) -> torch.Tensor:
    """Host-built mask: query i sits at key s - t + i and sees keys <= itself."""
    q = torch.arange(t)[:, None] + (s - t)
    k = torch.arange(s)[None, :]
    return torch.where(k <= q, torch.tensor(0.0, dtype=DTYPE), torch.tensor(float("-inf"), dtype=DTYPE))


def _slot_mask(query_pos: list[int], s: int) -> torch.Tensor:
    """Rows for queries at absolute slots ``query_pos`` over ``s`` key slots."""
    q = torch.tensor(query_pos)[:, None]
    k = torch.arange(s)[None, :]
    return torch.where(k <= q, torch.tensor(0.0, dtype=DTYPE), torch.tensor(float("-inf"), dtype=DTYPE))


class _Branch:
    """State for one condition: the real one, or the empty one used by CFG."""

    def __init__(self, model: HierLM, cond: CondSequence, batch: int, mode: str, capacity: int, ops: Dispatcher):
        cfg = model.cfg
        self.cond = cond
        self.P = len(cond)
        self.pos = 0
        self.gcaches = self.lcaches = None
        if mode == "recompute":
            return
        hg = cfg.d_global // cfg.heads_global
        hl = cfg.d_local // cfg.heads_local
        if mode == "kv":
            self.gcaches = KVCacheSet(cfg.n_global, batch, cfg.heads_global, capacity, hg)
            self.lcaches = KVCacheSet(cfg.n_local, batch, cfg.heads_local, cfg.K, hl)
        else:
            self.gcaches = [SlotCache(batch, cfg.heads_global, capacity, hg) for _ in range(cfg.n_global)]
            self.lcaches = [SlotCache(batch, cfg.heads_local, cfg.K, hl) for _ in range(cfg.n_local)]
            self.mask = torch.full((1, capacity), float("-inf"), dtype=DTYPE)
            self.pos_buf = torch.zeros(1, dtype=torch.long)
        c = model.embed_condition(ops, cond)
        if c is None:
            return
        x = c.expand(batch, -1, -1)
        if mode == "kv":
            model.global_hidden(ops, x, ops.arange(self.P), ops.causal_mask(self.P, self.P, DTYPE), self.gcaches)
        else:
            # prefill through ordinary caches, then copy into the full-capacity buffers
            tmp = KVCacheSet(cfg.n_global, batch, cfg.heads_global, self.P, hg)
            model.global_hidden(ops, x, ops.arange(self.P), ops.causal_mask(self.P, self.P, DTYPE), tmp)
            for dst, src in zip(self.gcaches, tmp.layers):
                ops.copy_(dst.k[:, :, : self.P], src.k)
                ops.copy_(dst.v[:, :, : self.P], src.v)
            ops.fill_(self.mask[:, : self.P], 0.0)
        self.pos = self.P

    @property
    def valid_len(self) -> int:
        if isinstance(self.gcaches, KVCacheSet):
            return self.gcaches.valid_len
        return self.pos


@dataclass
class DecodeSession:
    model: HierLM
    cond: CondSequence
    mode: str
    batch: int
    sampler: SamplerConfig
    ops: Dispatcher
    capacity: int
    branches: list
    rngs: list
    frames: list = field(default_factory=list)
    frames_emitted: int = 0
    pos_local: int = 0
    sampler_calls: int = 0
    # fixed_shape / kv session-constant tensors
    consts: dict = field(default_factory=dict)

    @property
    def pos_global(self) -> int:
        return self.branches[0].pos

    @property
    def caches(self):
        return self.branches[0].gcaches

    @property
    def guided(self) -> bool:
        return len(self.branches) == 2


def prefill(
    model: HierLM,
    cond: CondSequence,
    sampler: SamplerConfig | None = None,
    mode: str = "kv",
    batch: int = 1,
    seed: int = 0,
    rng_keys=None,
    ops: Dispatcher | None = None,
) -> DecodeSession:
    """Process the condition prefix and return a session ready for stepping.

    The unconditional CFG branch exists only when ``cfg_scale != 1``; the
    choice is fixed here and never revisited per step.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if batch < 1:
        raise EmptyBatch("batch must be >= 1")
    sampler = sampler or SamplerConfig()
    cfg = model.cfg
    P = len(cond)
    if P > cfg.max_cond:
        raise TooLong(f"condition of {P} positions exceeds max_cond={cfg.max_cond}")
    ops = ops or Dispatcher()
    keys = list(rng_keys) if rng_keys is not None else [(seed, i) for i in range(batch)]
    if len(keys) != batch:
        raise ValueError("need one rng key per batch item")
    rngs = [np.random.default_rng(list(np.atleast_1d(k))) for k in keys]
    conds = [cond] + ([CondSequence.empty()] if sampler.cfg_scale != 1.0 else [])
    with torch.no_grad():
        branches = [_Branch(model, c, batch, mode, len(c) + cfg.L_max, ops) for c in conds]
        s = DecodeSession(model, cond, mode, batch, sampler, ops, P + cfg.L_max, branches, rngs)
        if mode == "kv":
            s.consts["pos01"] = torch.arange(2)
            s.consts["mask2"] = _additive_causal(2, 2)
            s.consts["pos_k"] = [torch.tensor([k]) for k in range(cfg.K)]
        elif mode == "fixed_shape":
            _capture(s)
    return s


# -- fixed_shape capture -----------------------------------------------------------

def _capture(s: DecodeSession) -> None:
    model, cfg, B = s.model, s.model.cfg, s.batch
    K, dg = cfg.K, cfg.d_global
    valid_before = [br.valid_len for br in s.branches]
    c = s.consts
    c["tok_frame"] = torch.zeros(B, 1, K, dtype=torch.long)
    c["tok_layers"] = torch.zeros(K, B, dtype=torch.long)
    rec = Recorder()
    h = model.frame_embed(rec, c["tok_frame"])                   # (B, 1, dg)
    c["embed_prog"], c["h_buf"] = rec.program, h
    c["pos01"], c["slot01"] = torch.arange(2), torch.arange(2)
    c["pos_k"] = [torch.tensor([k]) for k in range(K)]
    c["mask_first"] = _slot_mask([0, 1], K)
    c["mask_k"] = [_slot_mask([k], K) for k in range(K)]
    # warm-up input is BOS, exactly what step 0 feeds; the slot it writes is rewritten before it is read
    h.copy_(model.bos.view(1, 1, dg).expand(B, 1, dg))
    for bi, br in enumerate(s.branches):
        br.pos_buf.fill_(br.pos)
        for cache in br.gcaches:
            cache.slot = br.pos_buf
        rec = Recorder()
        rec.index_fill_(br.mask, 1, br.pos_buf, 0.0)
        g = model.global_hidden(rec, h, br.pos_buf, br.mask, br.gcaches)
        br.logits0 = model.head0_logits(rec, g)
        br.g_buf, br.global_prog = g, rec.program
        br.local_progs = None
        if bi == 0 or s.sampler.cfg_local:
            br.local_progs, br.local_logits = _capture_local(s, br)
        # restore the mask slot opened by the warm-up so the prefix view stays exact
        br.mask[:, br.pos:] = float("-inf")
    after = [br.valid_len for br in s.branches]
    assert after == valid_before, "fixed-shape preparation changed cache lengths"


def _capture_local(s: DecodeSession, br: _Branch):
    model, cfg, B = s.model, s.model.cfg, s.batch
    K, dg = cfg.K, cfg.d_global
    c = s.consts
    progs, outs = [], []
    rec = Recorder()
    for cache in br.lcaches:
        cache.slot = c["slot01"]
    pg = model.local_project(rec, br.g_buf)
    e0 = rec.index_select(model.frame_tables[0], 0, c["tok_layers"][0])
    x = rec.cat([pg, model.local_project(rec, e0.view(B, 1, dg))], 1)
    hid = model.local_hidden(rec, x, c["pos01"], c["mask_first"], br.lcaches)
    outs.append(model.local_logits(rec, hid[:, 1:2], 1))
    progs.append(rec.program)
    for k in range(2, K):
        rec = Recorder()
        for cache in br.lcaches:
            cache.slot = c["pos_k"][k]
        e = rec.index_select(model.frame_tables[k - 1], 0, c["tok_layers"][k - 1])
        hid = model.local_hidden(rec, model.local_project(rec, e.view(B, 1, dg)),
                                 c["pos_k"][k], c["mask_k"][k], br.lcaches)
        outs.append(model.local_logits(rec, hid, k))
        progs.append(rec.program)
    return progs, outs


# -- per-mode global / local computations ------------------------------------------------

def _global_recompute(s: DecodeSession, br: _Branch) -> torch.Tensor:
    model, ops, B = s.model, s.ops, s.batch
    pieces = []
    c = model.embed_condition(ops, br.cond)
    if c is not None:
        pieces.append(c.expand(B, -1, -1))
    pieces.append(model.bos.view(1, 1, -1).expand(B, 1, -1))
    if s.frames:
        hist = torch.from_numpy(np.stack(s.frames, 1))            # (B, l, K)
        pieces.append(model.frame_embed(ops, hist))
    x = ops.cat(pieces, 1)
    T = x.shape[1]
    g = model.global_hidden(ops, x, ops.arange(T), ops.causal_mask(T, T, DTYPE))
    return g[:, -1:]


def _global_kv(s: DecodeSession, br: _Branch, h) -> torch.Tensor:
    return s.model.global_hidden(s.ops, h, s.ops.arange(br.pos, br.pos + 1), None, br.gcaches)


def _local_recompute(s: DecodeSession, g, toks: list, k: int) -> torch.Tensor:
    model, ops, B = s.model, s.ops, s.batch
    parts = [model.local_project(ops, g)]
    for j in range(k):
        e = ops.index_select(model.frame_tables[j], 0, torch.from_numpy(toks[j]))
        parts.append(model.local_project(ops, e.view(B, 1, -1)))
    x = ops.cat(parts, 1)
    T = x.shape[1]
    hid = model.local_hidden(ops, x, ops.arange(T), ops.causal_mask(T, T, DTYPE))
    return model.local_logits(ops, hid[:, -1:], k)


def _local_kv(s: DecodeSession, br: _Branch, g, toks: list, k: int) -> torch.Tensor:
    model, ops, B, c = s.model, s.ops, s.batch, s.consts
    e = ops.index_select(model.frame_tables[k - 1], 0, torch.from_numpy(toks[k - 1]))
    pe = model.local_project(ops, e.view(B, 1, -1))
    if k == 1:
        br.lcaches.reset()
        x = ops.cat([model.local_project(ops, g), pe], 1)
        hid = model.local_hidden(ops, x, c["pos01"], c["mask2"], br.lcaches)[:, 1:2]
    else:
        hid = model.local_hidden(ops, pe, c["pos_k"][k], None, br.lcaches)
    return model.local_logits(ops, hid, k)


# -- the step -------------------------------------------------------------------------------

def _sample_layer(s: DecodeSession, logits: list, u: np.ndarray, k: int, guided: bool) -> np.ndarray:
    lc = logits[0]
    if guided:
        lc = cfg_logits(lc, logits[1], s.sampler.cfg_scale)
    out = np.empty(s.batch, dtype=np.int64)
    for b in range(s.batch):
        out[b] = top_k_sample(lc[b], s.sampler, u[b, k])
        s.sampler_calls += 1
    return out


def decode_step(model: HierLM, session: DecodeSession, sampler: SamplerConfig | None = None,
                mode: str | None = None) -> np.ndarray:
    """Produce one frame for every batch item, shape (B, K)."""
    s = session
    if model is not s.model:
        raise ValueError("session was prefilled with a different model")
    if mode is not None and mode != s.mode:
        raise ValueError(f"session runs in {s.mode!r} mode, not {mode!r}")
    if sampler is not None and sampler != s.sampler:
        raise ValueError("sampler is fixed at prefill")
    if s.frames_emitted >= model.cfg.L_max:
        raise SessionExhausted(f"L_max={model.cfg.L_max} frames already emitted")
    with torch.no_grad():
        frame = _STEPS[s.mode](s)
    s.frames.append(frame)
    s.frames_emitted += 1
    return frame


def _draw(s: DecodeSession) -> np.ndarray:
    K = s.model.cfg.K
    return np.stack([r.random(K) for r in s.rngs])


def _step_recompute(s: DecodeSession) -> np.ndarray:
    model, K = s.model, s.model.cfg.K
    u = _draw(s)
    gs = [_global_recompute(s, br) for br in s.branches]
    l0 = [model.head0_logits(s.ops, g)[:, 0].numpy() for g in gs]
    toks = [_sample_layer(s, l0, u, 0, s.guided)]
    local_br = range(len(s.branches)) if s.sampler.cfg_local else range(1)
    for k in range(1, K):
        s.pos_local = k
        lk = [_local_recompute(s, gs[i], toks, k)[:, 0].numpy() for i in local_br]
        toks.append(_sample_layer(s, lk, u, k, s.guided and s.sampler.cfg_local))
    for br in s.branches:
        br.pos += 1
    return np.stack(toks, 1)


def _step_kv(s: DecodeSession) -> np.ndarray:
    model, ops, K, B = s.model, s.ops, s.model.cfg.K, s.batch
    u = _draw(s)
    if s.frames:
        h = model.frame_embed(ops, torch.from_numpy(s.frames[-1][:, None, :]))
    else:
        h = model.bos.view(1, 1, -1).expand(B, 1, -1)
    gs = []
    for br in s.branches:
        gs.append(_global_kv(s, br, h))
        br.pos += 1
    l0 = [model.head0_logits(ops, g)[:, 0].numpy() for g in gs]
    toks = [_sample_layer(s, l0, u, 0, s.guided)]
    local_br = range(len(s.branches)) if s.sampler.cfg_local else range(1)
    for k in range(1, K):
        s.pos_local = k
        lk = [_local_kv(s, s.branches[i], gs[i], toks, k)[:, 0].numpy() for i in local_br]
        toks.append(_sample_layer(s, lk, u, k, s.guided and s.sampler.cfg_local))
    return np.stack(toks, 1)


def _step_fixed(s: DecodeSession) -> np.ndarray:
    ops, c, K = s.ops, s.consts, s.model.cfg.K
    u = _draw(s)
    tok_frame = c["tok_frame"].numpy()
    tok_layers = c["tok_layers"].numpy()
    if s.frames:
        tok_frame[:, 0, :] = s.frames[-1]
        ops.replay(c["embed_prog"])
    else:
        ops.copy_(c["h_buf"], s.model.bos.view(1, 1, -1).expand_as(c["h_buf"]))
    for br in s.branches:
        br.pos_buf.numpy()[0] = br.pos
        ops.replay(br.global_prog)
        br.pos += 1
    l0 = [br.logits0[:, 0].numpy() for br in s.branches]
    a = _sample_layer(s, l0, u, 0, s.guided)
    toks = [a]
    tok_layers[0] = a
    local_br = [br for br in s.branches if br.local_progs is not None]
    for k in range(1, K):
        s.pos_local = k
        for br in local_br:
            ops.replay(br.local_progs[k - 1])
        lk = [br.local_logits[k - 1][:, 0].numpy() for br in local_br]
        a = _sample_layer(s, lk, u, k, s.guided and s.sampler.cfg_local)
        toks.append(a)
        tok_layers[k] = a
    return np.stack(toks, 1)


_STEPS = {"recompute": _step_recompute, "kv": _step_kv, "fixed_shape": _step_fixed}


def generate(
    model: HierLM,
    cond: CondSequence,
    n_frames: int,
    sampler: SamplerConfig | None = None,
    mode: str = "kv",
    batch: int = 1,
    sink: Optional[StreamSink] = None,
    seed: int = 0,
    rng_keys=None,
    eos_id: int | None = None,
    ops: Dispatcher | None = None,
) -> tuple[list[np.ndarray], StepMetrics]:
    """Prefill plus ``n_frames`` steps; returns one (L, K) array per item.

    ``sink(frame_index, frames)`` receives the (B, K) frame right after it is
    sampled and before the next step starts. With ``eos_id`` an item stops
    after emitting a frame whose layer-0 token equals it; decoding ends once
    every item has stopped. ``alloc_count`` covers steps from index 2 on.
    """
    if batch < 1:
        raise EmptyBatch("batch must be >= 1")
    if n_frames > model.cfg.L_max:
        raise SessionExhausted(f"{n_frames} frames exceed L_max={model.cfg.L_max}")
    ops = ops or Dispatcher()
    d0, _ = ops.snapshot()
    t0 = time.perf_counter()
    s = prefill(model, cond, sampler, mode, batch, seed, rng_keys, ops)
    ends = [None] * batch
    steady_alloc = 0
    for i in range(n_frames):
        _, a_before = ops.snapshot()
        frame = decode_step(model, s)
        _, a_after = ops.snapshot()
        if i >= 2:
            steady_alloc += a_after - a_before
        if sink is not None:
            sink(i, frame.copy())
        if eos_id is not None:
            for b in range(batch):
                if ends[b] is None and frame[b, 0] == eos_id:
                    ends[b] = i + 1
            if all(e is not None for e in ends):
                break
    wall = time.perf_counter() - t0
    d1, _ = ops.snapshot()
    stacked = np.stack(s.frames, 1) if s.frames else np.zeros((batch, 0, model.cfg.K), dtype=np.int64)
    out = [stacked[b, : ends[b]] if ends[b] is not None else stacked[b] for b in range(batch)]
    return out, StepMetrics(d1 - d0, steady_alloc, wall, s.sampler_calls)
