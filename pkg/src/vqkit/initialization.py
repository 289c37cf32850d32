"""Codebook initialization strategies: random draws, data-subset selection,
and k-means++ seeded Lloyd iterations."""
from __future__ import annotations

import numpy as np

from .errors import ContractViolation

LLOYD_TOL = 1e-9


def lloyd_step(centers: np.ndarray, sample: np.ndarray):
    """One Lloyd iteration.

    Returns (new_centers, assignment, inertia) where inertia is the mean
    min squared distance of the sample to the *input* centers. Centers that end
    up with no members are re-seeded to the sample point farthest from its
    nearest center."""
    centers = np.asarray(centers, dtype=np.float64)
    sample = np.asarray(sample, dtype=np.float64)
    if centers.shape[0] < 1:
        raise ContractViolation("lloyd_step requires at least one center")

    d2 = _sq_dists(sample, centers)
    assignment = d2.argmin(axis=1)
    min_d2 = d2[np.arange(sample.shape[0]), assignment]
    inertia = float(min_d2.mean())

    new_centers = centers.copy()
    empty = []
    for j in range(centers.shape[0]):
        members = sample[assignment == j]
        if members.shape[0] > 0:
            new_centers[j] = members.mean(axis=0)
        else:
            empty.append(j)
    if empty:
        # re-seed empty centers to successive farthest points
        order = np.argsort(min_d2)[::-1]
        for j, point_idx in zip(empty, order):
            new_centers[j] = sample[point_idx]
    return new_centers, assignment, inertia


def kmeans_pp_seed(sample: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    """Standard k-means++ seeding over the sample rows."""
    n = sample.shape[0]
    centers = np.empty((m, sample.shape[1]))
    first = int(rng.integers(n))
    centers[0] = sample[first]
    closest = _sq_dists(sample, centers[:1]).ravel()
    for j in range(1, m):
        total = closest.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            probs = closest / total
            idx = int(rng.choice(n, p=probs))
        centers[j] = sample[idx]
        closest = np.minimum(closest, _sq_dists(sample, centers[j:j + 1]).ravel())
    return centers


def kmeans(sample: np.ndarray, m: int, rng: np.random.Generator,
           iters: int = 50) -> np.ndarray:
    """k-means++ seeding followed by Lloyd iterations until the max center
    displacement drops below LLOYD_TOL or the iteration budget runs out."""
    if iters < 1:
        raise ContractViolation("kmeans requires iters >= 1")
    sample = np.asarray(sample, dtype=np.float64)
    if sample.shape[0] < m:
        raise ContractViolation(f"kmeans needs a sample with >= {m} rows")
    centers = kmeans_pp_seed(sample, m, rng)
    for _ in range(iters):
        new_centers, _, _ = lloyd_step(centers, sample)
        shift = np.abs(new_centers - centers).max()
        centers = new_centers
        if shift < LLOYD_TOL:
            break
    return centers


def init_codebook(method: str, m: int, d: int, sample=None, *,
                  rng: np.random.Generator | None = None, seed: int | None = None,
                  fan: int | None = None, low: float = -1.0, high: float = 1.0,
                  iters: int = 50) -> np.ndarray:
    """Produce an m x d code matrix. Same seed -> bit-identical output.

    methods: normal_kaiming (N(0, 2/fan)), uniform(low, high),
    data_subset (m distinct sample rows), kmeans (k-means++ + Lloyd)."""
    if rng is None:
        rng = np.random.default_rng(seed)
    if method == "normal_kaiming":
        std = np.sqrt(2.0 / (fan if fan is not None else d))
        return rng.normal(0.0, std, size=(m, d))
    if method == "uniform":
        return rng.uniform(low, high, size=(m, d))
    if method == "data_subset":
        sample = _require_sample(sample, 1, method)
        if sample.shape[0] < m:
            raise ContractViolation(
                f"data_subset needs a sample with >= {m} rows, got {sample.shape[0]}")
        idx = rng.choice(sample.shape[0], size=m, replace=False)
        return sample[idx].astype(np.float64).copy()
    if method == "kmeans":
        sample = _require_sample(sample, m, method)
        return kmeans(sample, m, rng, iters=iters)
    raise ContractViolation(f"unknown init method {method!r}")


def _require_sample(sample, min_rows: int, method: str) -> np.ndarray:
    if sample is None:
        raise ContractViolation(f"init method {method!r} requires a data sample")
    sample = np.asarray(sample, dtype=np.float64)
    if sample.shape[0] < min_rows:
        raise ContractViolation(
            f"init method {method!r} needs a sample with >= {min_rows} rows")
    return sample


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a_sq = (a * a).sum(axis=1)
    b_sq = (b * b).sum(axis=1)
    return np.maximum(a_sq[:, None] - 2.0 * a @ b.T + b_sq[None, :], 0.0)
