"""Scenario definitions, JSON config parsing, synthetic data generation, and
artifact emission for the desk-scale experiments."""
from __future__ import annotations

import copy
import itertools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import initialization, metrics as mtr, vqlayer as vql
from .autodiff import Tape
from .codebook import Codebook, group_split, nearest_code
from .errors import ConfigError, ContractViolation
from .models import MLPAutoencoder
from .training import SGD, Schedule, TrainResult, train_alternating, train_joint

TOY_MODES = ("no_vq", "joint", "alternated", "lookahead")
SCENARIOS = ("train", "toy-trajectory", "affine-toy", "ablation", "init-study")


# ---------------------------------------------------------------------------
# synthetic data

@dataclass
class MixtureSpec:
    dim: int
    n: int
    means: list
    cov_scales: list
    weights: list

    def __post_init__(self):
        means = np.asarray(self.means, dtype=np.float64)
        if means.ndim != 2 or means.shape[1] != self.dim:
            raise ContractViolation("mixture means must be k x dim")
        k = means.shape[0]
        if len(self.cov_scales) != k or len(self.weights) != k:
            raise ContractViolation("cov_scales and weights must have one entry per component")
        if any(s < 0.0 for s in self.cov_scales):
            raise ContractViolation("covariance scales must be >= 0")
        if abs(sum(self.weights) - 1.0) > 1e-9:
            raise ContractViolation("mixture weights must sum to 1")

    @classmethod
    def from_dict(cls, raw: dict) -> "MixtureSpec":
        _strict(raw, {"dim", "n", "means", "cov_scales", "weights"}, "data")
        return cls(**raw)


def gen_mixture(spec: MixtureSpec, rng: np.random.Generator) -> np.ndarray:
    """Seeded draws from an isotropic Gaussian mixture; covariance of component
    i is cov_scales[i] * I."""
    means = np.asarray(spec.means, dtype=np.float64)
    comps = rng.choice(means.shape[0], size=spec.n, p=np.asarray(spec.weights))
    noise = rng.standard_normal((spec.n, spec.dim))
    stds = np.sqrt(np.asarray(spec.cov_scales, dtype=np.float64))
    return means[comps] + stds[comps, None] * noise


def _default_mixture(dim: int = 16, n: int = 1024) -> dict:
    half = dim // 2
    base = np.full(dim, 0.8)
    split = np.concatenate([np.full(half, 0.8), np.full(dim - half, -0.8)])
    means = [base.tolist(), (-base).tolist(), split.tolist(), (-split).tolist()]
    return {"dim": dim, "n": n, "means": means,
            "cov_scales": [0.1, 0.1, 0.1, 0.1], "weights": [0.25, 0.25, 0.25, 0.25]}


# ---------------------------------------------------------------------------
# config handling

_DEFAULTS = {
    "steps": 300,
    "batch_size": 64,
    "train_mode": "joint",
    "inner_k": 1,
    "outer_k": 1,
    "fused": False,
    "track_grad_gap": True,
    "smooth_gamma": 0.0,
    "vq": {},
    "optimizer": {"lr": 0.05, "momentum": 0.0, "weight_decay": 0.0},
    "schedule": None,
    "model": {"d_in": 16, "hidden": 32, "d_code": 8},
    "codebook": {"m": 32, "init": "normal_kaiming"},
    "data": None,
    "mode": "joint",
    "toy": {"steps": 500, "lr": 0.1, "alpha": 1.0, "beta": 0.95, "nu": 0.5,
            "target": [2.0, 1.0], "tol": 1e-3},
    "affine_toy": {"n_points": 512, "m": 128, "updates": 20, "lr": 0.1,
                   "momentum": 0.1, "point_cov": 0.1, "code_cov": 0.05},
    "grid": {"affine_mode": ["off", "learnable"], "replacement": ["off", "lru"]},
    "seeds_per_cell": 5,
    "init_study": {"n": 2048, "d": 8, "m": 64, "n_seeds": 5,
                   "methods": ["kmeans", "data_subset", "normal_kaiming"]},
}

_TOP_LEVEL_KEYS = {"scenario", "seed"} | set(_DEFAULTS)

_GRID_FIELDS = {"init", "affine_mode", "nu", "inner_k", "replacement",
                "distance", "n_group"}


def _strict(raw: dict, allowed: set, ctx: str) -> None:
    if not isinstance(raw, dict):
        raise ConfigError(f"{ctx} section must be an object")
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown {ctx} keys: {sorted(unknown)}")


def resolve_config(raw: dict) -> dict:
    """Validate a raw config dict and fill in defaults. Unknown keys anywhere
    are rejected; seed and scenario are mandatory."""
    _strict(raw, _TOP_LEVEL_KEYS, "config")
    if "scenario" not in raw or raw["scenario"] not in SCENARIOS:
        raise ConfigError(f"scenario must be one of {SCENARIOS}")
    if "seed" not in raw or not isinstance(raw["seed"], int):
        raise ConfigError("an integer seed is mandatory")

    cfg = copy.deepcopy(_DEFAULTS)
    for key, value in raw.items():
        if isinstance(value, dict) and isinstance(cfg.get(key), dict):
            merged = dict(cfg[key])
            merged.update(value)
            cfg[key] = merged
        else:
            cfg[key] = copy.deepcopy(value)
    cfg["scenario"] = raw["scenario"]
    cfg["seed"] = raw["seed"]

    _strict(cfg["optimizer"], {"lr", "momentum", "weight_decay"}, "optimizer")
    _strict(cfg["model"], {"d_in", "hidden", "d_code"}, "model")
    _strict(cfg["codebook"], {"m", "init", "fan", "low", "high", "iters"}, "codebook")
    _strict(cfg["toy"], set(_DEFAULTS["toy"]), "toy")
    _strict(cfg["affine_toy"], set(_DEFAULTS["affine_toy"]), "affine_toy")
    _strict(cfg["init_study"], set(_DEFAULTS["init_study"]), "init_study")
    bad = set(cfg["grid"]) - _GRID_FIELDS
    if bad:
        raise ConfigError(f"unknown grid fields: {sorted(bad)}")
    if cfg["data"] is None:
        cfg["data"] = _default_mixture(dim=cfg["model"]["d_in"])
    try:
        cfg["vq"] = vql.VQConfig.from_dict(cfg["vq"]).to_dict()
        MixtureSpec.from_dict(cfg["data"])
        if cfg["schedule"] is not None:
            Schedule.from_dict(cfg["schedule"])
    except ContractViolation as exc:
        raise ConfigError(str(exc)) from exc
    if cfg["mode"] not in TOY_MODES:
        raise ConfigError(f"mode must be one of {TOY_MODES}")
    return cfg


def load_config(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return resolve_config(raw)


# ---------------------------------------------------------------------------
# scenario building blocks

def _cell_rng(base_seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([base_seed, *keys]))


def build_codebook(cfg: dict, data: np.ndarray, model: MLPAutoencoder,
                   rng: np.random.Generator, init_override: str | None = None) -> Codebook:
    cb_cfg = cfg["codebook"]
    vq = vql.VQConfig.from_dict(cfg["vq"])
    method = init_override or cb_cfg["init"]
    d_code = cfg["model"]["d_code"] // vq.n_group
    sample = None
    if method in ("data_subset", "kmeans"):
        tape = Tape()
        nodes = model.make_nodes(tape, trainable=set())
        z_e = model.encode(tape, tape.leaf(data), nodes).value
        sample = group_split(z_e, vq.n_group)
    kwargs = {k: cb_cfg[k] for k in ("fan", "low", "high", "iters") if k in cb_cfg}
    codes = initialization.init_codebook(method, cb_cfg["m"], d_code,
                                         sample=sample, rng=rng, **kwargs)
    return Codebook(codes)


def run_training(cfg: dict, seed: int | None = None) -> TrainResult:
    """Train the default toy autoencoder under the resolved config."""
    seed = cfg["seed"] if seed is None else seed
    data = gen_mixture(MixtureSpec.from_dict(cfg["data"]), _cell_rng(seed, 10))
    model = MLPAutoencoder(rng=_cell_rng(seed, 11), **cfg["model"])
    cb = build_codebook(cfg, data, model, _cell_rng(seed, 12))
    vq = vql.VQConfig.from_dict(cfg["vq"])
    opt = SGD(**cfg["optimizer"])
    schedule = Schedule.from_dict(cfg["schedule"]) if cfg["schedule"] else None
    common = dict(steps=cfg["steps"], batch_size=cfg["batch_size"], optimizer=opt,
                  schedule=schedule, seed=seed, track_grad_gap=cfg["track_grad_gap"])
    if cfg["train_mode"] == "alternating":
        return train_alternating(model, cb, vq, data, inner_k=cfg["inner_k"],
                                 outer_k=cfg["outer_k"], fused=cfg["fused"], **common)
    if cfg["train_mode"] != "joint":
        raise ConfigError(f"unknown train_mode {cfg['train_mode']!r}")
    return train_joint(model, cb, vq, data, smooth_gamma=cfg["smooth_gamma"], **common)


def collapse_config(seed: int, **overrides) -> dict:
    """Resolved config for the mismatched-initialization scenario: the codebook
    starts far from the encoder output distribution (uniform in [2.5, 3.5] per
    coordinate versus near-zero embeddings), so without mitigation nearly all
    probability mass lands on a handful of codes."""
    raw = {
        "scenario": "train",
        "seed": seed,
        "steps": 150,
        "batch_size": 64,
        "codebook": {"m": 32, "init": "uniform", "low": 2.5, "high": 3.5},
        "optimizer": {"lr": 0.05, "momentum": 0.0, "weight_decay": 0.0},
    }
    raw.update(overrides)
    return resolve_config(raw)


# ---------------------------------------------------------------------------
# two-dimensional toy trajectory

@dataclass
class ToyTrajectory:
    mode: str
    rows: list            # per step: (z_e_x, z_e_y, z_q_x, z_q_y, task_loss)
    path_length: float
    steps_to_tol: int     # first step after which task loss stays <= tol


def run_toy_trajectory(mode: str, seed: int, *, steps: int = 500, lr: float = 0.1,
                       alpha: float = 1.0, beta: float = 0.95, nu: float = 0.5,
                       target=(2.0, 1.0), tol: float = 1e-3) -> ToyTrajectory:
    """Single 2-D embedding chasing a stationary target through one code-vector,
    SGD with a fixed learning rate. Modes: no_vq bypasses quantization; joint
    optimizes task + commitment together; alternated takes a codebook-only
    commitment step then a task-only embedding step; lookahead is the joint
    update with the synchronized (nu) codebook term."""
    if mode not in TOY_MODES:
        raise ContractViolation(f"unknown toy mode {mode!r}")
    rng = _cell_rng(seed, 3)
    z_e = rng.normal(0.0, 1.0, size=(1, 2))
    z_q = rng.normal(0.0, 1.0, size=(1, 2))
    tgt = np.asarray(target, dtype=np.float64).reshape(1, 2)

    rows = []
    path_length = 0.0
    for t in range(steps):
        if mode == "no_vq":
            task_val = 0.5 * float(((z_e - tgt) ** 2).sum())
            z_e_new = z_e - lr * (z_e - tgt)
            z_q_new = z_e_new.copy()
        elif mode == "alternated":
            # inner: codebook-facing commitment step on the code
            z_q_new = z_q - lr * alpha * beta * (z_q - z_e)
            # outer: task-only step on the embedding through straight-through
            task_val = 0.5 * float(((z_q_new - tgt) ** 2).sum())
            z_e_new = z_e - lr * (z_q_new - tgt)
        else:  # joint / lookahead share one loss; lookahead adds the nu path
            nu_eff = nu if mode == "lookahead" else 0.0
            tape = Tape()
            ze_node = tape.leaf(z_e, param=True)
            zq_node = tape.leaf(z_q, param=True)
            st = tape.straight_through(ze_node, zq_node, nu_eff)
            task = tape.mse(st, tape.leaf(tgt))
            commit = vql.commitment_loss(tape, ze_node, zq_node, alpha, beta)
            tape.backward(tape.add(task, commit))
            task_val = float(task.value[0, 0])
            z_e_new = z_e - lr * ze_node.grad
            z_q_new = z_q - lr * (zq_node.grad if zq_node.grad is not None else 0.0)

        rows.append((float(z_e[0, 0]), float(z_e[0, 1]),
                     float(z_q[0, 0]), float(z_q[0, 1]), task_val))
        path_length += float(np.linalg.norm(z_e_new - z_e))
        z_e, z_q = z_e_new, z_q_new

    steps_to_tol = steps
    for t in range(steps - 1, -1, -1):
        if rows[t][4] > tol:
            steps_to_tol = t + 1
            break
    else:
        steps_to_tol = 0
    return ToyTrajectory(mode, rows, path_length, steps_to_tol)


# ---------------------------------------------------------------------------
# distribution-mismatch toy for the affine reparameterization

def run_affine_toy(seed: int, *, n_points: int = 512, m: int = 128,
                   updates: int = 20, lr: float = 0.1, momentum: float = 0.1,
                   point_cov: float = 0.1, code_cov: float = 0.05) -> dict:
    """2-D moment-matching toy: embeddings around the origin, codes around
    (-1, -1) (mean gap sqrt(2)). Runs the standard EMA codebook update and the
    affine-EMA variant side by side for `updates` steps.

    The affine variant accumulates moments of the embedding batch and of the
    codebook itself, so the shared transform re-centers every code even though
    only the selected few receive the sparse EMA update."""
    rng = _cell_rng(seed, 4)
    points = rng.normal(0.0, np.sqrt(point_cov), size=(n_points, 2))
    init_codes = rng.normal(-1.0, np.sqrt(code_cov), size=(m, 2))

    def run(affine: bool):
        cb = Codebook(init_codes.copy())
        affine_mode = "ema" if affine else "off"
        gap_history = []
        for _ in range(updates):
            eff = cb.effective_codes(affine_mode)
            gap_history.append(float(np.linalg.norm(eff.mean(axis=0) - points.mean(axis=0))))
            indices = nearest_code(points, eff, "euclidean")[0]
            vql.ema_update(cb, points, indices, lr)
            if affine:
                vql.affine_update_ema(cb, points, cb.codes, momentum)
        eff_final = cb.effective_codes(affine_mode)
        # initial effective codes equal the raw init codes (identity transform)
        displacement = np.linalg.norm(eff_final - init_codes, axis=1)
        gap_history.append(float(np.linalg.norm(eff_final.mean(axis=0) - points.mean(axis=0))))
        return {
            "fraction_moved": float((displacement > 0.0).mean()),
            "fraction_static": float((displacement == 0.0).mean()),
            "initial_gap": gap_history[0],
            "final_gap": gap_history[-1],
            "gap_history": gap_history,
            "divergence": float(mtr.divergence(points, eff_final)),
        }

    return {"standard": run(affine=False), "affine": run(affine=True)}


# ---------------------------------------------------------------------------
# ablation grid

def run_ablation(cfg: dict) -> list[dict]:
    """Cartesian product over the grid; each cell trains the toy autoencoder
    with `seeds_per_cell` seeds and reports mean/sd of the final task loss,
    perplexity, and active ratio."""
    grid = cfg["grid"]
    if not grid:
        raise ConfigError("ablation grid must be nonempty")
    fields = sorted(grid)
    results = []
    for cell_id, combo in enumerate(itertools.product(*(grid[f] for f in fields))):
        cell = dict(zip(fields, combo))
        finals = {"task_loss": [], "perplexity": [], "active_ratio": []}
        for s in range(cfg["seeds_per_cell"]):
            cell_cfg = copy.deepcopy(cfg)
            for f, v in cell.items():
                if f == "init":
                    cell_cfg["codebook"]["init"] = v
                elif f == "inner_k":
                    cell_cfg["inner_k"] = v
                    cell_cfg["train_mode"] = "alternating" if v >= 1 else "joint"
                else:
                    cell_cfg["vq"][f] = v
            cell_cfg["track_grad_gap"] = False
            seed = int(np.random.SeedSequence([cfg["seed"], cell_id, s]).generate_state(1)[0])
            result = run_training(cell_cfg, seed=seed)
            last = result.records[-1]
            finals["task_loss"].append(last.task_loss)
            finals["perplexity"].append(last.perplexity)
            finals["active_ratio"].append(last.active_ratio)
        row = dict(cell)
        for key, vals in finals.items():
            row[f"{key}_mean"] = float(np.mean(vals))
            row[f"{key}_sd"] = float(np.std(vals))
        results.append(row)
    return results


# ---------------------------------------------------------------------------
# initialization divergence study

def run_init_study(cfg: dict) -> list[dict]:
    """Divergence between a post-ReLU Gaussian embedding sample and codebooks
    produced by each initialization method, per seed."""
    study = cfg["init_study"]
    rows = []
    for s in range(study["n_seeds"]):
        rng = _cell_rng(cfg["seed"], 5, s)
        sample = np.maximum(rng.standard_normal((study["n"], study["d"])), 0.0)
        row = {"seed": s}
        for i, method in enumerate(study["methods"]):
            codes = initialization.init_codebook(
                method, study["m"], study["d"], sample=sample,
                rng=_cell_rng(cfg["seed"], 6, s, i))
            row[method] = mtr.divergence(sample, codes)
        rows.append(row)
    return rows
