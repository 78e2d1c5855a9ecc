"""Semantic-distilled speech-token embeddings.

Per-code feature centroids are projected by a small linear map into the LM
embedding space; the same map is reused, trainable, for the stop-gradient
alignment between hidden states and frame features.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .kmeans import kmeans


class DistillError(ValueError):
    pass


@dataclass
class Centroids:
    mu: np.ndarray      # (n_codes, d_ssl)
    counts: np.ndarray  # (n_codes,)

    @property
    def populated(self) -> np.ndarray:
        return self.counts > 0

    @property
    def global_mean(self) -> np.ndarray:
        w = self.counts / self.counts.sum()
        return (w[:, None] * self.mu).sum(axis=0)


class CentroidAccumulator:
    """Streaming per-code sums; ``update`` order does not change the result beyond float rounding."""

    def __init__(self, n_codes: int, dim: int):
        self.sums = np.zeros((n_codes, dim))
        self.counts = np.zeros(n_codes, dtype=np.int64)

    def update(self, codes, features) -> None:
        codes = np.asarray(codes)
        np.add.at(self.sums, codes, np.asarray(features, dtype=np.float64))
        self.counts += np.bincount(codes, minlength=len(self.counts))

    def result(self) -> Centroids:
        mu = np.zeros_like(self.sums)
        ok = self.counts > 0
        mu[ok] = self.sums[ok] / self.counts[ok, None]
        return Centroids(mu, self.counts.copy())


def fit_centroids(corpus, n_codes: int | None = None) -> Centroids:
    corpus = list(corpus)
    if not corpus or sum(len(s) for s in corpus) == 0:
        raise DistillError("cannot fit centroids on an empty corpus")
    if n_codes is None:
        n_codes = int(max(s.codes.max() for s in corpus if len(s))) + 1
    dim = corpus[0].features.shape[1]
    acc = CentroidAccumulator(n_codes, dim)
    for s in corpus:
        acc.update(s.codes, s.features)
    return acc.result()


class Projection(nn.Module):
    """Linear map from feature space (d_ssl) to model space (d_model)."""

    def __init__(self, d_ssl: int, d_model: int, trainable: bool = True):
        super().__init__()
        self.linear = nn.Linear(d_ssl, d_model)
        self.trainable = trainable
        self.requires_grad_(trainable)

    @property
    def d_ssl(self) -> int:
        return self.linear.in_features

    @property
    def d_model(self) -> int:
        return self.linear.out_features

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.linear(x)

    @torch.no_grad()
    def apply_np(self, x: np.ndarray) -> np.ndarray:
        w = self.linear.weight.detach().double().numpy()
        b = self.linear.bias.detach().double().numpy()
        return np.asarray(x, dtype=np.float64) @ w.T + b


@torch.no_grad()
def fit_projection(proj: Projection, centroids: Centroids, target_std: float, seed: int,
                   ridge: float = 1e-3) -> Projection:
    """Ridge least-squares fit of ``proj`` from centroids to a Gaussian target.

    The targets are i.i.d. N(0, target_std^2) rows, one per populated code.
    The fitted weight is rescaled so the projected centroids have RMS
    ``target_std`` per coordinate, i.e. the scale of an ordinary embedding init.
    """
    mu = centroids.mu[centroids.populated]
    if len(mu) == 0:
        raise DistillError("no populated codes to fit the projection on")
    rng = np.random.default_rng(seed)
    target = rng.normal(0.0, target_std, size=(len(mu), proj.d_model))
    mean = mu.mean(axis=0)
    xc = mu - mean
    a = xc.T @ xc + ridge * len(mu) * np.eye(xc.shape[1])
    w = np.linalg.solve(a, xc.T @ (target - target.mean(axis=0)))  # (d_ssl, d_model)
    out = xc @ w
    rms = np.sqrt((out ** 2).mean())
    if rms > 0:
        w *= target_std / rms
    b = -mean @ w
    proj.linear.weight.copy_(torch.from_numpy(w.T.copy()))
    proj.linear.bias.copy_(torch.from_numpy(b.copy()))
    return proj


def default_sigma(centroids: Centroids, proj: Projection) -> float:
    """0.01 x RMS of the projected centroid rows."""
    p = proj.apply_np(centroids.mu[centroids.populated])
    return 0.01 * float(np.sqrt((p ** 2).sum(axis=1).mean()))


def init_embeddings(centroids: Centroids, proj: Projection, sigma: float, seed: int) -> np.ndarray:
    """Speech-block embedding rows ``P(mu_k) + eps``, eps ~ N(0, sigma^2 I).

    Codes never seen in the fitting corpus start from the projection of the
    count-weighted global mean plus noise.
    """
    if sigma < 0:
        raise DistillError("sigma must be nonnegative")
    if centroids.mu.shape[1] != proj.d_ssl:
        raise DistillError(f"centroid dim {centroids.mu.shape[1]} != projection input {proj.d_ssl}")
    base = proj.apply_np(centroids.mu)
    unseen = ~centroids.populated
    if unseen.any():
        base[unseen] = proj.apply_np(centroids.global_mean[None])[0]
    if sigma == 0:
        return base
    rng = np.random.default_rng(seed)
    return base + rng.normal(0.0, 1.0, size=base.shape) * sigma


@dataclass
class CoarseMap:
    bucket_of: np.ndarray       # (n_codes,) zero-based bucket index
    bucket_centers: np.ndarray  # (K, d_ssl)
    history: list

    @property
    def K(self) -> int:
        return len(self.bucket_centers)


def fit_coarse(centroids: Centroids, K: int = 64, seed: int = 0, max_iters: int = 100,
               tol: float = 1e-8) -> CoarseMap:
    """Cluster populated centroids into ``K`` buckets; unseen codes join the nearest bucket.

    Buckets are stored zero-based; bucket ``j`` here is bucket ``j + 1`` in
    one-based notation.
    """
    pop = centroids.populated
    n_pop = int(pop.sum())
    if K < 1 or K > n_pop:
        raise DistillError(f"K={K} must be in [1, {n_pop}] (number of populated codes)")
    res = kmeans(centroids.mu[pop], K, seed=seed, max_iters=max_iters, tol=tol)
    if len(np.unique(res.labels)) != K:
        raise DistillError("k-means left an empty bucket; centroids contain duplicates")
    bucket_of = np.empty(len(pop), dtype=np.int64)
    bucket_of[pop] = res.labels
    if (~pop).any():
        d = ((centroids.mu[~pop][:, None, :] - res.centers[None]) ** 2).sum(-1)
        bucket_of[~pop] = d.argmin(axis=1)
    return CoarseMap(bucket_of, res.centers, res.history)


def alignment_loss(hidden: torch.Tensor, features: torch.Tensor, proj: Projection,
                   audio_mask: torch.Tensor) -> torch.Tensor:
    """Mean over audio positions of ``||h_t - P(feature_t)||^2``.

    ``features`` are detached, so no gradient reaches the feature source.
    Leading batch dimensions are allowed. With no audio positions the loss is
    an exact zero that still backpropagates (zero gradients).
    """
    if hidden.shape[:-1] != audio_mask.shape or features.shape[:-1] != audio_mask.shape:
        raise DistillError("hidden, features and audio_mask lengths disagree")
    mask = audio_mask.to(hidden.dtype)
    n = mask.sum()
    target = proj(features.detach().to(hidden.dtype))
    sq = ((hidden - target) ** 2).sum(-1) * mask
    if n.item() == 0:
        return sq.sum() * 0.0
    return sq.sum() / n


# Standalone binary export: magic, version, n arrays, then per array
# (name, dtype, ndim, shape, raw little-endian bytes).
_BLOB_MAGIC = b"ULMDST\x00\x01"


def export_arrays(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(_BLOB_MAGIC)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr)
            arr = arr.astype(arr.dtype.newbyteorder("<"))
            nb = name.encode()
            dt = arr.dtype.str.encode()
            fh.write(struct.pack("<H", len(nb)) + nb + struct.pack("<H", len(dt)) + dt)
            fh.write(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def import_arrays(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if not data.startswith(_BLOB_MAGIC):
        raise DistillError(f"{path}: not a distill blob")
    pos = len(_BLOB_MAGIC)
    (n,) = struct.unpack_from("<I", data, pos)
    pos += 4
    out = {}
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", data, pos)
        name = data[pos + 2 : pos + 2 + ln].decode()
        pos += 2 + ln
        (ld,) = struct.unpack_from("<H", data, pos)
        dt = np.dtype(data[pos + 2 : pos + 2 + ld].decode())
        pos += 2 + ld
        (ndim,) = struct.unpack_from("<I", data, pos)
        shape = struct.unpack_from(f"<{ndim}Q", data, pos + 4)
        pos += 4 + 8 * ndim
        size = int(np.prod(shape)) * dt.itemsize
        if pos + size > len(data):
            raise DistillError(f"{path}: truncated")
        out[name] = np.frombuffer(data[pos : pos + size], dtype=dt).reshape(shape).copy()
        pos += size
    return out


def save_distill(path, centroids: Centroids, coarse: CoarseMap | None = None) -> None:
    arrays = {"mu": centroids.mu, "counts": centroids.counts}
    if coarse is not None:
        arrays["bucket_of"] = coarse.bucket_of
        arrays["bucket_centers"] = coarse.bucket_centers
    export_arrays(path, arrays)


def load_distill(path) -> tuple[Centroids, CoarseMap | None]:
    a = import_arrays(path)
    c = Centroids(a["mu"], a["counts"])
    coarse = CoarseMap(a["bucket_of"], a["bucket_centers"], []) if "bucket_of" in a else None
    return c, coarse
