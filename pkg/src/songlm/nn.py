"""Small pre-norm transformer written against :class:`~songlm.engine.ops.Dispatcher`.

The same functions serve teacher-forced training (autograd), full-sequence
recompute decoding and cache-backed incremental decoding, so every path runs
an identical primitive sequence.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .engine.ops import Dispatcher

DTYPE = torch.float64


class Block(nn.Module):
    def __init__(self, d: int, n_heads: int, mlp_ratio: int = 4, init_std: float = 0.02):
        super().__init__()
        assert d % n_heads == 0
        self.d, self.n_heads, self.head_dim = d, n_heads, d // n_heads
        hidden = mlp_ratio * d
        self.norm1 = nn.Parameter(torch.ones(d, dtype=DTYPE))
        self.wqkv = nn.Parameter(torch.randn(3 * d, d, dtype=DTYPE) * init_std)
        self.wo = nn.Parameter(torch.randn(d, d, dtype=DTYPE) * init_std)
        self.norm2 = nn.Parameter(torch.ones(d, dtype=DTYPE))
        self.w1 = nn.Parameter(torch.randn(hidden, d, dtype=DTYPE) * init_std)
        self.w2 = nn.Parameter(torch.randn(d, hidden, dtype=DTYPE) * init_std)


class Rope(nn.Module):
    """Rotate-half rotary tables; rotation is a signed permutation matmul so the
    fixed-shape path can express it with ``out=`` buffers."""

    def __init__(self, head_dim: int, max_pos: int, base: float = 10000.0):
        super().__init__()
        half = head_dim // 2
        inv = 1.0 / base ** (torch.arange(half, dtype=DTYPE) / half)
        ang = torch.outer(torch.arange(max_pos, dtype=DTYPE), inv)
        ang = torch.cat([ang, ang], dim=-1)
        rot = torch.zeros(head_dim, head_dim, dtype=DTYPE)
        for j in range(half):
            rot[j + half, j] = -1.0
            rot[j, j + half] = 1.0
        self.register_buffer("cos", torch.cos(ang), persistent=False)
        self.register_buffer("sin", torch.sin(ang), persistent=False)
        self.register_buffer("rot", rot, persistent=False)
        self.max_pos = max_pos

    def tables(self, ops: Dispatcher, positions: torch.Tensor):
        return ops.index_select(self.cos, 0, positions), ops.index_select(self.sin, 0, positions)


def rms_norm(ops: Dispatcher, x, w, eps: float = 1e-6):
    ms = ops.mean(ops.mul(x, x), -1, keepdim=True)
    r = ops.rsqrt(ops.add(ms, eps))
    return ops.mul(ops.mul(x, r), w)


def apply_rope(ops: Dispatcher, x, cos, sin, rot):
    return ops.add(ops.mul(x, cos), ops.mul(ops.matmul(x, rot), sin))


def attend(ops: Dispatcher, q, k, v, mask):
    scale = 1.0 / math.sqrt(q.shape[-1])
    s = ops.mul(ops.matmul(q, k.transpose(-1, -2)), scale)
    if mask is not None:
        s = ops.add(s, mask)
    return ops.matmul(ops.softmax(s, -1), v)


def block_forward(ops: Dispatcher, blk: Block, x, cos, sin, rot, mask, cache=None, collect=None):
    """One block over ``x`` (B, T, d).

    With ``cache`` the new keys/values are appended first and attention runs
    over the cache's valid prefix. ``collect`` (a list) receives the rotated
    keys and values of this call, for inspection.
    """
    B, T, d = x.shape
    H, hd = blk.n_heads, blk.head_dim
    h = rms_norm(ops, x, blk.norm1)
    qkv = ops.matmul(h, blk.wqkv.T).view(B, T, 3, H, hd)
    q = apply_rope(ops, qkv[:, :, 0].transpose(1, 2), cos, sin, rot)
    k = apply_rope(ops, qkv[:, :, 1].transpose(1, 2), cos, sin, rot)
    v = qkv[:, :, 2].transpose(1, 2)
    if collect is not None:
        collect.append((k, v))
    if cache is not None:
        cache.append(k, v, ops)
        k, v = cache.keys(), cache.values()
    a = attend(ops, q, k, v, mask)
    a = ops.contiguous(a.transpose(1, 2)).view(B, T, d)
    x = ops.add(x, ops.matmul(a, blk.wo.T))
    h = rms_norm(ops, x, blk.norm2)
    u = ops.matmul(h, blk.w1.T)
    u = ops.mul(u, ops.sigmoid(u))
    return ops.add(x, ops.matmul(u, blk.w2.T))


def stack_forward(ops, blocks, x, positions, rope: Rope, mask, caches=None, collect=None):
    cos, sin = rope.tables(ops, positions)
    for i, blk in enumerate(blocks):
        x = block_forward(ops, blk, x, cos, sin, rope.rot, mask,
                          None if caches is None else caches[i], collect)
    return x
