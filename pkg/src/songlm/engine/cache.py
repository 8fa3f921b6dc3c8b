"""Preallocated append-only key/value caches."""

from __future__ import annotations

import torch

from ..errors import CapacityExceeded
from .ops import Dispatcher


class KVCache:
    """One attention layer's keys and values, shape (B, H, capacity, head_dim).

    Slots ``[0, valid_len)`` hold the processed tokens in order. Appending
    writes at ``valid_len`` and never touches earlier slots.
    """

    def __init__(self, batch: int, n_heads: int, capacity: int, head_dim: int, dtype=torch.float64):
        self.k = torch.zeros(batch, n_heads, capacity, head_dim, dtype=dtype)
        self.v = torch.zeros(batch, n_heads, capacity, head_dim, dtype=dtype)
        self.capacity = capacity
        self.valid_len = 0

    def append(self, k_t: torch.Tensor, v_t: torch.Tensor, ops: Dispatcher | None = None) -> None:
        n = k_t.shape[2]
        if self.valid_len + n > self.capacity:
            raise CapacityExceeded(f"cache full: {self.valid_len} + {n} > {self.capacity}")
        ops = ops or Dispatcher()
        idx = ops.arange(self.valid_len, self.valid_len + n)
        ops.index_copy_(self.k, 2, idx, k_t)
        ops.index_copy_(self.v, 2, idx, v_t)
        self.valid_len += n

    def keys(self) -> torch.Tensor:
        return self.k[:, :, : self.valid_len]

    def values(self) -> torch.Tensor:
        return self.v[:, :, : self.valid_len]

    def reset(self) -> None:
        self.valid_len = 0


def append_kv(cache: KVCache, k_t, v_t, ops: Dispatcher | None = None) -> None:
    cache.append(k_t, v_t, ops)


class KVCacheSet:
    def __init__(self, n_layers: int, batch: int, n_heads: int, capacity: int, head_dim: int, dtype=torch.float64):
        self.layers = [KVCache(batch, n_heads, capacity, head_dim, dtype) for _ in range(n_layers)]
        self.capacity = capacity

    def __getitem__(self, i: int) -> KVCache:
        return self.layers[i]

    def __len__(self):
        return len(self.layers)

    @property
    def valid_len(self) -> int:
        lens = {c.valid_len for c in self.layers}
        assert len(lens) == 1, f"layer caches out of sync: {lens}"
        return lens.pop()

    def reset(self) -> None:
        for c in self.layers:
            c.reset()
