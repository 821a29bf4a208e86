"""Independent reference computations used by the tests."""
import itertools

import numpy as np


def all_labellings(t: int, k: int) -> np.ndarray:
    """Every assignment of t points to k non-empty clusters, first point fixed to 0."""
    tails = np.array(list(itertools.product(range(k), repeat=t - 1)), dtype=np.int8).reshape(-1, t - 1)
    labels = np.concatenate([np.zeros((len(tails), 1), dtype=np.int8), tails], axis=1)
    full = np.all([(labels == c).any(axis=1) for c in range(k)], axis=0)
    return labels[full]


def brute_force_partition(x: np.ndarray, k: int) -> np.ndarray:
    """Globally optimal k-means labelling by exhaustive enumeration (small t only)."""
    x = np.asarray(x, dtype=float)
    labels = all_labellings(len(x), k)
    sq = (x**2).sum(axis=1)
    cost = np.zeros(len(labels))
    for c in range(k):
        mask = (labels == c).astype(float)
        counts = mask.sum(axis=1)
        sums = mask @ x
        cost += mask @ sq - (sums**2).sum(axis=1) / counts
    return labels[int(np.argmin(cost))]


def canonical(labels) -> tuple[int, ...]:
    """Relabel clusters in order of first appearance."""
    seen: dict[int, int] = {}
    return tuple(seen.setdefault(int(v), len(seen)) for v in labels)


def plateau_frames(rng: np.random.Generator, sizes, dim: int = 5, noise: float = 0.01, spread: float = 3.0):
    """Piecewise-constant trajectory with Gaussian jitter; returns (frames, plateau labels)."""
    levels = rng.normal(0.0, 1.0, size=(len(sizes), dim)) * spread
    frames = np.concatenate([levels[i] + rng.normal(0.0, noise, size=(n, dim)) for i, n in enumerate(sizes)])
    labels = np.concatenate([np.full(n, i) for i, n in enumerate(sizes)])
    return frames, labels
