"""Lloyd's k-means with farthest-point re-seeding of empty clusters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class KMeansResult:
    centers: np.ndarray
    labels: np.ndarray
    objective: float
    n_iter: int
    history: list[float] = field(default_factory=list)


def sq_dists(x: np.ndarray, centers: np.ndarray, chunk: int = 4096) -> np.ndarray:
    out = np.empty((len(x), len(centers)))
    for i in range(0, len(x), chunk):
        diff = x[i : i + chunk, None, :] - centers[None, :, :]
        out[i : i + chunk] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def assign(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return sq_dists(x, centers).argmin(axis=1)


def _init_centers(x, k, rng):
    # k-means++ seeding
    n = len(x)
    centers = [x[rng.integers(n)]]
    d2 = sq_dists(x, np.asarray(centers))[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, sq_dists(x, x[idx][None])[:, 0])
    return np.array(centers, dtype=np.float64)


def kmeans(x, k: int, seed: int = 0, max_iters: int = 100, tol: float = 1e-8) -> KMeansResult:
    """Cluster rows of ``x`` into ``k`` groups.

    Each iteration assigns points to their nearest center, then recomputes
    centers; a cluster left empty takes the point currently farthest from its
    own center. Stops after ``max_iters`` or when no center moves more than
    ``tol``. ``history`` holds the objective (sum of squared distances) after
    each assignment step and is non-increasing.
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must be in [1, {n}]")
    rng = np.random.default_rng(seed)
    centers = _init_centers(x, k, rng)
    history: list[float] = []
    labels = np.zeros(n, dtype=np.int64)
    it = 0
    for it in range(1, max_iters + 1):
        d = sq_dists(x, centers)
        labels = d.argmin(axis=1)
        point_d = d[np.arange(n), labels]
        history.append(float(point_d.sum()))

        new = np.zeros_like(centers)
        counts = np.bincount(labels, minlength=k)
        np.add.at(new, labels, x)
        taken: set[int] = set()
        for j in range(k):
            if counts[j] > 0:
                new[j] /= counts[j]
        for j in np.flatnonzero(counts == 0):
            order = np.argsort(-point_d, kind="stable")
            far = next(i for i in order if i not in taken)
            taken.add(int(far))
            new[j] = x[far]
            labels[far] = j
            point_d[far] = 0.0
        shift = np.sqrt(((new - centers) ** 2).sum(axis=1)).max()
        centers = new
        if shift < tol:
            break
    d = sq_dists(x, centers)
    labels = d.argmin(axis=1)
    objective = float(d[np.arange(n), labels].sum())
    history.append(objective)
    return KMeansResult(centers, labels, objective, it, history)
