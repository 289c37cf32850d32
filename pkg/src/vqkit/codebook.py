"""Codebook storage and query layer: distances, nearest-code search, stochastic
sampling, grouped views, and binary serialization."""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ContractViolation, DegenerateInput

DISTANCE_KINDS = ("euclidean", "cosine_unit_norm", "cosine_renorm")
DEFAULT_CHUNK_SIZE = 4096

_MAGIC = b"VQKB"
_VERSION = 1


class Codebook:
    """m code-vectors of dimension d, shared affine parameters, usage counters,
    and running embedding/code statistics.

    The raw affine parameters start at zero so the effective codes equal the
    raw codes at initialization (identity reparameterization)."""

    def __init__(self, codes):
        codes = np.array(codes, dtype=np.float64)
        if codes.ndim != 2 or codes.shape[0] < 1 or codes.shape[1] < 1:
            raise ContractViolation(f"codebook must be m x d with m,d >= 1, got {codes.shape}")
        self.codes = codes
        d = codes.shape[1]
        self.affine_scale = np.zeros(d)
        self.affine_bias = np.zeros(d)
        self.last_used = np.zeros(codes.shape[0], dtype=np.int64)
        self.counts = np.zeros(codes.shape[0], dtype=np.int64)
        # running moments of z_e and z_q for the EMA affine variant
        self.ema_mean_e = np.zeros(d)
        self.ema_var_e = np.ones(d)
        self.ema_mean_q = np.zeros(d)
        self.ema_var_q = np.ones(d)

    @property
    def m(self) -> int:
        return self.codes.shape[0]

    @property
    def d(self) -> int:
        return self.codes.shape[1]

    def ema_transform(self, eps: float = 1e-8):
        """Per-dimension (a, b) such that effective codes = a * codes + b,
        matching codebook moments to the embedding moments."""
        sigma_e = np.maximum(np.sqrt(self.ema_var_e), eps)
        sigma_q = np.maximum(np.sqrt(self.ema_var_q), eps)
        a = sigma_e / sigma_q
        b = self.ema_mean_e - a * self.ema_mean_q
        return a, b

    def effective_codes(self, affine_mode: str = "off", lr_scale: float = 1.0) -> np.ndarray:
        if affine_mode == "off":
            return self.codes.copy()
        if affine_mode == "learnable":
            scale = 1.0 + lr_scale * self.affine_scale
            return scale * self.codes + lr_scale * self.affine_bias
        if affine_mode == "ema":
            a, b = self.ema_transform()
            return a * self.codes + b
        raise ContractViolation(f"unknown affine mode {affine_mode!r}")

    def mark_used(self, indices, step: int) -> None:
        idx = np.asarray(indices, dtype=np.int64)
        self.last_used[idx] = step
        np.add.at(self.counts, idx, 1)

    # -- serialization -------------------------------------------------------

    def save(self, path) -> None:
        path = Path(path)
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<I", _VERSION))
            fh.write(struct.pack("<QQ", self.m, self.d))
            fh.write(np.ascontiguousarray(self.codes, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.affine_scale, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.affine_bias, dtype="<f8").tobytes())
        sidecar = {
            "last_used": self.last_used.tolist(),
            "counts": self.counts.tolist(),
            "ema_mean_e": self.ema_mean_e.tolist(),
            "ema_var_e": self.ema_var_e.tolist(),
            "ema_mean_q": self.ema_mean_q.tolist(),
            "ema_var_q": self.ema_var_q.tolist(),
        }
        with open(Path(str(path) + ".json"), "w") as fh:
            json.dump(sidecar, fh, sort_keys=True)

    @classmethod
    def load(cls, path) -> "Codebook":
        path = Path(path)
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != _MAGIC:
                raise ContractViolation(f"bad codebook magic {magic!r}")
            (version,) = struct.unpack("<I", fh.read(4))
            if version != _VERSION:
                raise ContractViolation(f"unsupported codebook version {version}")
            m, d = struct.unpack("<QQ", fh.read(16))
            codes = np.frombuffer(fh.read(8 * m * d), dtype="<f8").reshape(m, d)
            scale = np.frombuffer(fh.read(8 * d), dtype="<f8")
            bias = np.frombuffer(fh.read(8 * d), dtype="<f8")
        cb = cls(codes)
        cb.affine_scale = scale.astype(np.float64)
        cb.affine_bias = bias.astype(np.float64)
        sidecar_path = Path(str(path) + ".json")
        if sidecar_path.exists():
            with open(sidecar_path) as fh:
                sidecar = json.load(fh)
            cb.last_used = np.asarray(sidecar["last_used"], dtype=np.int64)
            cb.counts = np.asarray(sidecar["counts"], dtype=np.int64)
            cb.ema_mean_e = np.asarray(sidecar["ema_mean_e"], dtype=np.float64)
            cb.ema_var_e = np.asarray(sidecar["ema_var_e"], dtype=np.float64)
            cb.ema_mean_q = np.asarray(sidecar["ema_mean_q"], dtype=np.float64)
            cb.ema_var_q = np.asarray(sidecar["ema_var_q"], dtype=np.float64)
        return cb


def normalize_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (unit rows, norms). Zero-norm rows are degenerate under cosine."""
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0.0):
        raise DegenerateInput("zero-norm vector under cosine distance")
    return x / norms[:, None], norms


def pairwise_distances_chunked(queries, codes, kind: str = "euclidean",
                               chunk_size: int = DEFAULT_CHUNK_SIZE) -> np.ndarray:
    """n x m matrix of half squared distances, computed in row chunks.

    euclidean: (i,j) = 0.5 * ||q_i - c_j||^2
    cosine:    (i,j) = 0.5 * ||q_i/||q_i|| - c_j/||c_j||||^2
    """
    if chunk_size < 1:
        raise ContractViolation("chunk_size must be >= 1")
    if kind not in DISTANCE_KINDS:
        raise ContractViolation(f"unknown distance kind {kind!r}")
    queries = np.asarray(queries, dtype=np.float64)
    codes = np.asarray(codes, dtype=np.float64)
    if queries.shape[1] != codes.shape[1]:
        raise ContractViolation(
            f"dimension mismatch: queries d={queries.shape[1]}, codes d={codes.shape[1]}")
    if kind != "euclidean":
        queries, _ = normalize_rows(queries)
        codes, _ = normalize_rows(codes)

    code_sq = (codes * codes).sum(axis=1)
    n = queries.shape[0]
    out = np.empty((n, codes.shape[0]))
    for start in range(0, n, chunk_size):
        chunk = queries[start:start + chunk_size]
        q_sq = (chunk * chunk).sum(axis=1)
        dist = 0.5 * (q_sq[:, None] - 2.0 * chunk @ codes.T + code_sq[None, :])
        out[start:start + chunk.shape[0]] = np.maximum(dist, 0.0)
    return out


def nearest_code(queries, codes, kind: str = "euclidean",
                 chunk_size: int = DEFAULT_CHUNK_SIZE):
    """Per-query (index, quantized row, half squared distance).

    Ties break toward the lowest index. Under cosine_renorm the returned row is
    rescaled to the query norm; under cosine_unit_norm it has unit norm."""
    queries = np.asarray(queries, dtype=np.float64)
    codes = np.asarray(codes, dtype=np.float64)
    dists = pairwise_distances_chunked(queries, codes, kind, chunk_size)
    indices = dists.argmin(axis=1)
    z_q = gather_quantized(queries, codes, indices, kind)
    return indices, z_q, dists[np.arange(queries.shape[0]), indices]


def gather_quantized(queries, codes, indices, kind: str = "euclidean") -> np.ndarray:
    """Effective quantized rows for given assignments, applying the cosine
    re-norm conventions."""
    selected = codes[np.asarray(indices, dtype=np.int64)]
    if kind == "euclidean":
        return selected.copy()
    unit, _ = normalize_rows(selected)
    if kind == "cosine_unit_norm":
        return unit
    if kind == "cosine_renorm":
        _, q_norms = normalize_rows(np.asarray(queries, dtype=np.float64))
        return unit * q_norms[:, None]
    raise ContractViolation(f"unknown distance kind {kind!r}")


def quantize_row_factors(queries, codes, indices, kind: str) -> np.ndarray:
    """Per-row multiplier turning raw selected codes into the returned z_q rows."""
    selected = codes[np.asarray(indices, dtype=np.int64)]
    if kind == "euclidean":
        return np.ones(selected.shape[0])
    norms = np.linalg.norm(selected, axis=1)
    if np.any(norms == 0.0):
        raise DegenerateInput("zero-norm code under cosine distance")
    if kind == "cosine_unit_norm":
        return 1.0 / norms
    if kind == "cosine_renorm":
        q_norms = np.linalg.norm(np.asarray(queries, dtype=np.float64), axis=1)
        return q_norms / norms
    raise ContractViolation(f"unknown distance kind {kind!r}")


def sample_code_stochastic(queries, codes, kind: str, tau: float,
                           rng: np.random.Generator,
                           chunk_size: int = DEFAULT_CHUNK_SIZE) -> np.ndarray:
    """Draw code indices from softmax(-d / tau), row by row, with
    max-subtraction for stability. Requires tau > 0."""
    if tau <= 0.0:
        raise ContractViolation("stochastic sampling requires tau > 0; "
                                "use nearest_code for the deterministic limit")
    dists = pairwise_distances_chunked(queries, codes, kind, chunk_size)
    logits = -(dists - dists.min(axis=1, keepdims=True)) / tau
    probs = np.exp(logits)
    probs /= probs.sum(axis=1, keepdims=True)
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(dists.shape[0])
    indices = (u[:, None] > cdf).sum(axis=1)
    return np.minimum(indices, codes.shape[0] - 1).astype(np.int64)


def group_split(z, n_group: int) -> np.ndarray:
    """Split n x d rows into (n * n_group) x (d / n_group) contiguous sub-vectors."""
    z = np.asarray(z, dtype=np.float64)
    n, d = z.shape
    if n_group < 1 or d % n_group != 0:
        raise ContractViolation(f"n_group={n_group} must divide d={d}")
    return z.reshape(n * n_group, d // n_group).copy()


def group_concat(rows, n_group: int) -> np.ndarray:
    """Inverse of group_split with the 1/sqrt(n_group) normalization applied."""
    rows = np.asarray(rows, dtype=np.float64)
    total, sub = rows.shape
    if n_group < 1 or total % n_group != 0:
        raise ContractViolation(f"n_group={n_group} must divide the row count {total}")
    return rows.reshape(total // n_group, sub * n_group) / np.sqrt(n_group)
