"""Keyframe selection for rollout summaries: PCA projection, then k-means."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from sklearn.cluster import KMeans
from sklearn.exceptions import ConvergenceWarning


class EmptyTrajectory(ValueError):
    pass


@dataclass(frozen=True)
class KeyframeSet:
    indices: tuple[int, ...]
    k: int
    p: int
    seed: int
    labels: tuple[int, ...] = ()

    def __len__(self) -> int:
        return len(self.indices)


def pca_project(frames: np.ndarray, p: int) -> np.ndarray:
    """Centre and project onto the top ``p`` principal components.

    Component signs follow the sample-side singular vectors, so permuting
    feature columns leaves the projection unchanged.
    """
    x = frames - frames.mean(axis=0)
    u, s, _ = np.linalg.svd(x, full_matrices=False)
    p = min(p, u.shape[1])
    u = u[:, :p]
    signs = np.sign(u[np.argmax(np.abs(u), axis=0), np.arange(p)])
    signs[signs == 0] = 1.0
    return u * signs * s[:p]


def extract_keyframes(frames: Sequence[Sequence[float]], k: int = 6, p: int = 8, seed: int = 0) -> KeyframeSet:
    x = np.asarray(frames, dtype=float)
    if x.size == 0 or x.ndim != 2 or x.shape[0] == 0:
        raise EmptyTrajectory("need at least one frame of features")
    if k < 1 or p < 1:
        raise ValueError("k and p must be >= 1")
    t, d = x.shape
    k_eff = min(k, t)
    p_eff = min(p, d, t)
    z = pca_project(x, p_eff)
    if k_eff == t:
        labels = np.arange(t)
        return KeyframeSet(tuple(range(t)), k_eff, p_eff, seed, tuple(int(v) for v in labels))

    with warnings.catch_warnings():
        # repeated frames leave fewer distinct points than clusters
        warnings.simplefilter("ignore", ConvergenceWarning)
        km = KMeans(n_clusters=k_eff, init="k-means++", n_init=10, max_iter=100, tol=1e-9, random_state=seed)
        labels = km.fit_predict(z)
    centres = km.cluster_centers_

    chosen: list[int] = []
    taken: set[int] = set()
    for c in range(k_eff):
        d2 = np.sum((z - centres[c]) ** 2, axis=1)
        # own members first, then nearest overall; stable sort breaks ties by index
        order = np.lexsort((np.arange(t), d2, labels != c))
        for i in order:
            if int(i) not in taken:
                chosen.append(int(i))
                taken.add(int(i))
                break
    return KeyframeSet(tuple(sorted(chosen)), k_eff, p_eff, seed, tuple(int(v) for v in labels))
