"""Classifier-free guidance and top-k sampling with injected uniforms.

Sampling runs on host-side numpy arrays outside the captured op graph; the
only randomness is the uniform passed in by the caller.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ShapeMismatch


@dataclass(frozen=True)
class SamplerConfig:
    temperature: float = 1.0
    top_k: int = 50
    cfg_scale: float = 1.5
    cfg_local: bool = False

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")


def cfg_logits(l_cond, l_uncond, scale: float):
    """``l_uncond + scale * (l_cond - l_uncond)``."""
    if np.shape(l_cond) != np.shape(l_uncond):
        raise ShapeMismatch(f"{np.shape(l_cond)} vs {np.shape(l_uncond)}")
    return l_uncond + scale * (l_cond - l_uncond)


def top_k_sample(logits, cfg: SamplerConfig, rand_uniform: float) -> int:
    """Pick one index from the ``top_k`` largest logits by inverse CDF.

    Kept candidates are laid out in ascending index order, and the result is
    the first index whose cumulative probability exceeds ``rand_uniform``.
    Ties at the top-k boundary keep the lower index. Temperature 0 and
    ``top_k == 1`` both reduce to argmax (lowest index among equal maxima).
    """
    x = np.asarray(logits, dtype=np.float64).reshape(-1)
    k = min(cfg.top_k, x.size)
    if cfg.temperature == 0.0 or k == 1:
        return int(np.argmax(x))
    order = np.argsort(-x, kind="stable")[:k]
    kept = np.sort(order)
    z = x[kept] / cfg.temperature
    p = np.exp(z - z.max())
    cdf = np.cumsum(p / p.sum())
    i = int(np.searchsorted(cdf, rand_uniform, side="right"))
    return int(kept[min(i, k - 1)])
