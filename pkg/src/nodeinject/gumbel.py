"""Gumbel-Softmax with an exploration coefficient, masked Gumbel-Top-k, and hardening."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MASK_SCORE = -1e30
TAU_GRID = (0.01, 0.1, 1.0, 10.0, 100.0)


@dataclass
class GumbelConfig:
    tau: float = 1.0
    eps: float = 1.0
    k: int = 1
    seed: int = 0
    decay: float = 0.99

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("temperature must be positive")
        if self.eps < 0:
            raise ValueError("exploration coefficient must be >= 0")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")

    def decayed(self, epochs: int) -> float:
        return self.eps * self.decay**epochs


def sample_gumbel(size, rng: np.random.Generator) -> np.ndarray:
    """Standard Gumbel draws via -log(-log(U))."""
    u = rng.random(size)
    # keep U strictly inside (0, 1)
    u = np.clip(u, np.finfo(float).tiny, 1.0 - np.finfo(float).epsneg)
    return -np.log(-np.log(u))


def _row(z) -> Tensor:
    t = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=np.float64).reshape(1, -1))
    if t.shape[0] != 1:
        raise ValueError("scores must be a single row")
    return t


def gumbel_softmax(z, tau: float = 1.0, eps: float = 1.0, rng: np.random.Generator | None = None,
                   noise: np.ndarray | None = None) -> Tensor:
    """softmax((z + eps * G) / tau); the noise is a constant for differentiation."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    z = _row(z)
    if not np.all(np.isfinite(z.data)):
        raise ValueError("scores must be finite")
    if eps == 0:
        return ad.row_softmax(ad.scale(z, 1.0 / tau))
    if noise is None:
        if rng is None:
            raise ValueError("need an rng or explicit noise when eps > 0")
        noise = sample_gumbel(z.shape[1], rng)
    shifted = ad.add(z, Tensor(eps * np.asarray(noise, dtype=np.float64).reshape(1, -1)))
    return ad.row_softmax(ad.scale(shifted, 1.0 / tau))


def topk_noise(k: int, length: int, rng: np.random.Generator) -> np.ndarray:
    """One row of Gumbel noise per selection round."""
    return sample_gumbel((k, length), rng)


def gumbel_topk(z, k: int, tau: float = 1.0, eps: float = 1.0, rng: np.random.Generator | None = None,
                noise: np.ndarray | None = None) -> Tensor:
    """Sum of ``k`` masked Gumbel-Softmax rounds: a relaxed k-hot row.

    After each round the entry with the largest relaxed weight is masked so no
    later round can pick it again.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    z = _row(z)
    length = z.shape[1]
    if k > length:
        raise ValueError(f"cannot select k={k} of {length} entries")
    if k < 1:
        raise ValueError("k must be >= 1")
    if eps != 0 and noise is None:
        if rng is None:
            raise ValueError("need an rng or explicit noise when eps > 0")
        noise = topk_noise(k, length, rng)
    mask = np.zeros((1, length))
    total = None
    for j in range(k):
        scores = z if j == 0 else ad.add(z, Tensor(mask.copy()))
        draw = gumbel_softmax(scores, tau, eps, noise=None if eps == 0 else noise[j])
        total = draw if total is None else ad.add(total, draw)
        pick = _select(draw.data[0], mask[0])
        mask[0, pick] = MASK_SCORE
    return total


def _select(draw: np.ndarray, mask: np.ndarray) -> int:
    """Round winner: argmax of the relaxed draw among unmasked entries."""
    v = np.where(mask < 0, -np.inf, draw)
    return int(np.argmax(v))


def harden(relaxed, k: int) -> np.ndarray:
    """0/1 vector with ones at the ``k`` largest entries; ties go to lower indices."""
    v = relaxed.data[0] if isinstance(relaxed, Tensor) else np.asarray(relaxed, dtype=np.float64).ravel()
    k = min(k, len(v))
    out = np.zeros(len(v))
    out[np.argsort(-v, kind="stable")[:k]] = 1.0
    return out
