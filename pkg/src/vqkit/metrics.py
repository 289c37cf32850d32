"""Training-health diagnostics: perplexity, divergence, gradient gap,
activation probability, active ratio, and the metrics CSV format."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from . import codebook as cbk
from .autodiff import Tape
from .errors import ContractViolation
from .vqlayer import VQConfig, quantize

METRICS_HEADER = ("step", "task_loss", "commit_loss", "perplexity", "active_ratio",
                  "quant_error", "grad_gap", "divergence_cq")


@dataclass
class MetricsRecord:
    step: int
    task_loss: float
    commit_loss: float
    perplexity: float
    active_ratio: float
    quant_error: float
    grad_gap: float
    divergence_cq: float

    def row(self) -> str:
        vals = [format(getattr(self, name), ".17g") for name in METRICS_HEADER[1:]]
        return ",".join([str(self.step)] + vals)


def write_metrics_csv(records, path) -> None:
    lines = [",".join(METRICS_HEADER)]
    lines.extend(r.row() for r in records)
    Path(path).write_text("\n".join(lines) + "\n")


def perplexity(usage_counts) -> float:
    """2^H(p) of the usage histogram, with 0 * log 0 := 0."""
    counts = np.asarray(usage_counts, dtype=np.float64)
    if counts.size == 0 or counts.sum() <= 0.0:
        raise ContractViolation("perplexity requires counts with positive sum")
    if np.any(counts < 0.0):
        raise ContractViolation("perplexity requires nonnegative counts")
    p = counts / counts.sum()
    nz = p[p > 0.0]
    entropy = -(nz * np.log2(nz)).sum()
    return float(2.0 ** entropy)


def divergence(sample, codes) -> float:
    """Mean over the sample of the min half squared distance to any code."""
    sample = np.asarray(sample, dtype=np.float64)
    codes = np.asarray(codes, dtype=np.float64)
    if sample.shape[0] == 0 or codes.shape[0] == 0:
        raise ContractViolation("divergence requires nonempty sample and codes")
    dists = cbk.pairwise_distances_chunked(sample, codes, "euclidean")
    return float(dists.min(axis=1).mean())


def active_ratio(usage_counts) -> float:
    """Fraction of codes used at least once within the window the counts cover."""
    counts = np.asarray(usage_counts)
    if counts.size == 0:
        raise ContractViolation("active_ratio requires at least one code")
    return float((counts > 0).mean())


@dataclass
class ActivationProbability:
    binomial: float
    linear: float


def activation_probability(h: int, w: int, b: int, m_codes: int, n_pool: int,
                           n_groups: int, k: int) -> ActivationProbability:
    """Probability a given code activates at least k times in one batch, under
    i.i.d. uniform selection over N = b*h*w*n_groups / 2^n_pool trials.

    Also reports the linear approximation N / m (clipped to 1)."""
    if m_codes < 1:
        raise ContractViolation("m_codes must be >= 1")
    if min(h, w, b, n_pool, n_groups, k) < 0:
        raise ContractViolation("counts must be nonnegative")
    raw = b * h * w * n_groups / (2 ** n_pool)
    if raw != int(raw):
        raise ContractViolation(
            f"trial count {raw} is not an integer; pooling inconsistent with image size")
    n_trials = int(raw)
    linear = min(n_trials / m_codes, 1.0)
    if k == 0:
        return ActivationProbability(binomial=1.0, linear=linear)
    # log-space binomial survival function, safe for N ~ 1e6
    binom = float(stats.binom.sf(k - 1, n_trials, 1.0 / m_codes))
    return ActivationProbability(binomial=binom, linear=linear)


def gradient_gap(model, cb, config: VQConfig, batch, targets=None) -> float:
    """Sum over encoder parameters of ||g - g_hat||^2 where g is the task-loss
    gradient with quantization bypassed (z_q := z_e) and g_hat the gradient
    through the straight-through quantizer. Two forward/backward passes."""
    batch = np.asarray(batch, dtype=np.float64)
    if targets is None:
        targets = batch

    def encoder_grads(bypass: bool) -> dict[str, np.ndarray]:
        tape = Tape()
        nodes = model.make_nodes(tape, trainable=set(model.encoder_param_names))
        x = tape.leaf(batch)
        t = tape.leaf(targets)
        z_e = model.encode(tape, x, nodes)
        if bypass:
            z = z_e
        else:
            out = quantize(tape, z_e, cb, config, mark_usage=False)
            z = out.z_q
        y = model.decode(tape, z, nodes)
        loss = tape.mse(y, t)
        tape.backward(loss)
        return {name: nodes[name].grad for name in model.encoder_param_names}

    clean = encoder_grads(bypass=True)
    quantized = encoder_grads(bypass=False)
    gap = 0.0
    for name in model.encoder_param_names:
        g = clean[name] if clean[name] is not None else 0.0
        g_hat = quantized[name] if quantized[name] is not None else 0.0
        gap += float(((g - g_hat) ** 2).sum())
    return gap
