"""Linear auto-encoding pair over the toy signal family (25 Hz, D latent dims)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyCorpus
from .features import SR


@dataclass
class LatentCodec:
    basis: np.ndarray  # (hop, D), orthonormal columns
    mean: np.ndarray   # (hop,)

    @property
    def hop(self) -> int:
        return self.basis.shape[0]

    @property
    def D(self) -> int:
        return self.basis.shape[1]

    def _frames(self, x: np.ndarray) -> np.ndarray:
        n = -(-len(x) // self.hop)
        pad = np.zeros(n * self.hop)
        pad[: len(x)] = x
        return pad.reshape(n, self.hop)

    def encode(self, x: np.ndarray) -> np.ndarray:
        return (self._frames(np.asarray(x, dtype=np.float64)) - self.mean) @ self.basis

    def decode(self, z: np.ndarray, length: int | None = None) -> np.ndarray:
        x = (np.asarray(z) @ self.basis.T + self.mean).reshape(-1)
        return x if length is None else x[:length]

    @classmethod
    def fit(cls, signals: list[np.ndarray], D: int = 16, hop: int = SR // 25) -> "LatentCodec":
        """PCA over non-overlapping hop-sized frames."""
        stub = cls(np.zeros((hop, D)), np.zeros(hop))
        frames = [stub._frames(np.asarray(x, dtype=np.float64)) for x in signals if len(x)]
        if not frames:
            raise EmptyCorpus("no signal to fit the codec on")
        X = np.concatenate(frames, 0)
        mean = X.mean(0)
        _, _, vt = np.linalg.svd(X - mean, full_matrices=False)
        basis = vt[:D].T
        if basis.shape[1] < D:
            basis = np.pad(basis, ((0, 0), (0, D - basis.shape[1])))
        return cls(basis, mean)


def relative_error(x_hat: np.ndarray, x: np.ndarray) -> float:
    return float(np.linalg.norm(x_hat - x) / max(np.linalg.norm(x), 1e-12))
