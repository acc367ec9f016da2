"""Gradient-matching reconstruction attacks on FedSGD gradients and
FedAvg deltas (strong / weak / no simulation)."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .. import models, rng
from .. import tensor as T
from ..adam import adam_init, adam_step
from ..fl import Update
from ..metrics import evaluate_batch
from ..tensor import Graph

MAX_UNROLL_STEPS = 64


class AttackDiverged(RuntimeError):
    """Objective became non-finite; carries the iteration and lr."""

    def __init__(self, iteration: int, lr: float):
        self.iteration = iteration
        self.lr = lr
        super().__init__(
            f"attack objective is non-finite at iteration {iteration} (lr={lr:g})"
        )


class LabelInferenceError(ValueError):
    pass


@dataclass
class OpGiaConfig:
    distance: str = "cosine"  # l2 | cosine
    tv_weight: float = 1e-2
    iterations: int = 2000
    lr: float = 0.1
    milestones: tuple = (0.375, 0.625, 0.875)
    decay: float = 0.1
    init: str = "gaussian"  # gaussian | uniform
    seed: int = 0
    label_source: str = "ground-truth"  # ground-truth | inferred
    restarts: int = 1  # independent inits; best objective wins

    def validate(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        ms = tuple(self.milestones)
        if any(not 0 < m < 1 for m in ms) or list(ms) != sorted(set(ms)):
            raise ValueError(f"milestones must be strictly increasing in (0,1): {ms}")
        if self.distance not in ("l2", "cosine"):
            raise ValueError(f"unknown distance {self.distance!r}")
        if self.init not in ("gaussian", "uniform"):
            raise ValueError(f"unknown init {self.init!r}")


@dataclass
class AttackResult:
    x_hat: np.ndarray  # de-normalized, clamped to [0, 1]
    labels: np.ndarray
    final_objective: float
    trajectory: list
    metrics: dict | None
    seed: int
    config: dict
    flags: dict = field(default_factory=dict)


def infer_label_single(update: Update, spec: models.ModelSpec) -> int:
    """iDLG-style label recovery from the classifier-bias gradient.

    For softmax cross entropy and a batch of one, the bias gradient is
    negative exactly at the true class.
    """
    if update.kind != "fedsgd-gradient" or update.meta.get("B") != 1:
        raise LabelInferenceError(
            "label inference needs a FedSGD gradient of a single sample; "
            "use ground-truth label mode instead"
        )
    bias_name = f"L{models.head_index(spec)}.bias"
    if bias_name not in update.tensors:
        raise LabelInferenceError("model has no classifier bias gradient")
    negatives = np.flatnonzero(update.tensors[bias_name] < 0)
    if negatives.size != 1:
        raise LabelInferenceError(
            f"expected exactly one negative bias-gradient entry, found "
            f"{negatives.size}; use ground-truth label mode instead"
        )
    return int(negatives[0])


def _normalize_leaked(tensors: dict) -> tuple:
    flat_sq = sum(float((v * v).sum()) for v in tensors.values())
    norm = np.sqrt(flat_sq)
    if norm == 0:
        raise ValueError("leaked gradients have zero norm")
    return {k: v / norm for k, v in tensors.items()}, norm


def _distance_graph(g: Graph, cfg_distance: str, leaked: dict, leaked_unit: dict, grad_vars: dict):
    """Distance between leaked tensors and candidate gradient vars."""
    if cfg_distance == "l2":
        total = None
        for name in sorted(grad_vars):
            d = T.sub(grad_vars[name], g.leaf(leaked[name], grad=False))
            s = T.tsum(T.mul(d, d))
            total = s if total is None else T.add(total, s)
        return total
    # cosine: 1 - <leaked, cand> / (||leaked|| * ||cand||), computed against
    # the unit-normalized leaked tensors so the objective is scale-blind.
    dot = None
    sq = None
    for name in sorted(grad_vars):
        gv = grad_vars[name]
        d = T.tsum(T.mul(gv, g.leaf(leaked_unit[name], grad=False)))
        s = T.tsum(T.mul(gv, gv))
        dot = d if dot is None else T.add(dot, d)
        sq = s if sq is None else T.add(sq, s)
    cos = T.divide(dot, T.sqrt(sq))
    return T.shift(T.scale(cos, -1.0), 1.0)


def _init_candidate(shape, mean, std, cfg: OpGiaConfig, restart: int = 0) -> np.ndarray:
    """Starting images drawn in de-normalized space, then normalized."""
    g = rng.stream(cfg.seed, 307, restart)
    if cfg.init == "gaussian":
        raw = np.clip(0.5 + 0.1 * g.standard_normal(shape), 0.0, 1.0)
    else:
        raw = g.uniform(0.0, 1.0, size=shape)
    return (raw - mean[None, :, None, None]) / std[None, :, None, None]


def _lr_at(cfg: OpGiaConfig, i: int) -> float:
    passed = sum(i >= int(np.floor(m * cfg.iterations)) for m in cfg.milestones)
    return cfg.lr * (cfg.decay**passed)


def _tv_term(x_var, weight: float):
    """TV regularizer, normalized per interior anchor so the weight means
    the same thing at any batch size or resolution."""
    b, c, h, w = x_var.value.shape
    anchors = b * c * (h - 1) * (w - 1)
    return T.scale(T.total_variation(x_var), weight / anchors)


def _denorm(x: np.ndarray, mean, std) -> np.ndarray:
    return np.clip(x * std[None, :, None, None] + mean[None, :, None, None], 0.0, 1.0)


def _run_matching_once(objective_fn, x0: np.ndarray, cfg: OpGiaConfig):
    """Adam loop minimizing objective_fn over the candidate tensor; returns
    the best-objective iterate and the trajectory."""
    x = x0.copy()
    state = adam_init({"x": x})
    best_obj = np.inf
    best_x = x.copy()
    trajectory = []
    for i in range(cfg.iterations):
        obj, gx = objective_fn(x)
        if not np.isfinite(obj):
            raise AttackDiverged(i, _lr_at(cfg, i))
        trajectory.append(obj)
        if obj < best_obj:
            best_obj = obj
            best_x = x.copy()
        new = adam_step(state, {"x": x}, {"x": gx}, _lr_at(cfg, i))
        x = new["x"]
    return best_x, best_obj, trajectory


def _run_matching(objective_fn, init_fn, cfg: OpGiaConfig):
    """Run cfg.restarts independent inits; keep the best-objective run.
    Returns (best x, best objective, best run's trajectory, its init)."""
    best = None
    for r in range(cfg.restarts):
        x0 = init_fn(r)
        bx, bo, traj = _run_matching_once(objective_fn, x0, cfg)
        if best is None or bo < best[1]:
            best = (bx, bo, traj, x0)
    return best


def op_gia_attack(
    update: Update,
    spec: models.ModelSpec,
    params: dict,
    cfg: OpGiaConfig,
    labels=None,
    ground_truth=None,
    x_override=None,
) -> AttackResult:
    """Gradient matching against a FedSGD gradient.

    Minimizes distance(leaked, grads(x_hat, labels)) + tv_weight * TV(x_hat)
    with Adam and the milestone lr schedule; returns the best-objective
    iterate. ``x_override`` replaces the random init (normalized space).
    """
    cfg.validate()
    if update.kind != "fedsgd-gradient":
        raise ValueError(f"op_gia_attack needs a fedsgd-gradient update, got {update.kind}")
    meta = update.meta
    batch = int(meta["B"])
    if labels is None:
        if cfg.label_source == "inferred":
            labels = np.asarray([infer_label_single(update, spec)], dtype=np.int64)
        else:
            raise ValueError("labels required in ground-truth label mode")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape[0] != batch:
        raise ValueError(
            f"label count {labels.shape[0]} does not match update batch size {batch}"
        )
    mean = np.asarray(meta["mean"])
    std = np.asarray(meta["std"])
    shape = (batch,) + tuple(meta["input_shape"])
    leaked_unit, _ = _normalize_leaked(update.tensors)

    def objective(xv):
        g = Graph()
        x_var = g.leaf(xv, "x")
        pvars = {n: g.leaf(v, n, grad=False) for n, v in params.items()}
        _, grad_vars = models.grads_graph(g, spec, pvars, x_var, labels)
        obj = _distance_graph(g, cfg.distance, update.tensors, leaked_unit, grad_vars)
        if cfg.tv_weight > 0:
            obj = T.add(obj, _tv_term(x_var, cfg.tv_weight))
        back = g.backward(obj)
        return float(obj.value), back["x"]

    if x_override is not None:
        init_fn = lambda r: x_override
    else:
        init_fn = lambda r: _init_candidate(shape, mean, std, cfg, r)
    best_x, best_obj, trajectory, x0 = _run_matching(objective, init_fn, cfg)

    x_hat = _denorm(best_x, mean, std)
    result = AttackResult(
        x_hat=x_hat,
        labels=labels,
        final_objective=best_obj,
        trajectory=trajectory,
        metrics=None,
        seed=cfg.seed,
        config=asdict(cfg),
    )
    if ground_truth is not None:
        x0_img = _denorm(x0, mean, std)
        result.metrics = evaluate_batch(ground_truth, x_hat, x0_img)
    return result


def _unroll_delta(g, spec, pvars0, x_var, labels, step_indices, lr):
    """Simulate the local SGD run inside the graph; returns delta vars."""
    pvars = dict(pvars0)
    for idx in step_indices:
        idx = np.asarray(idx, dtype=np.int64)
        xb = T.take_rows(x_var, idx)
        yb = labels[idx]
        _, grads = models.grads_graph(g, spec, pvars, xb, yb)
        pvars = {k: T.sub(pvars[k], T.scale(grads[k], lr)) for k in pvars}
    return {k: T.sub(pvars[k], pvars0[k]) for k in pvars}


def _guess_step_indices(n_local, batch_size, epochs, seed):
    """A plausible batch order for an attacker without the true trace."""
    steps = []
    for epoch in range(epochs):
        g = rng.stream(seed, 331, epoch)
        perm = g.permutation(n_local)
        for start in range(0, n_local, batch_size):
            steps.append(perm[start : start + batch_size].tolist())
    return steps


def fedavg_attack(
    update: Update,
    spec: models.ModelSpec,
    params: dict,
    cfg: OpGiaConfig,
    mode: str,
    labels=None,
    client_info: dict | None = None,
    ground_truth=None,
) -> AttackResult:
    """Reconstruction from a FedAvg delta.

    strong: replays the true local run (lr, batch order) inside autodiff.
    weak:   simulates with the attacker's wrong hyperparameter guesses.
    none:   treats delta / (-lr_guess) as a FedSGD gradient.
    """
    cfg.validate()
    if update.kind != "fedavg-delta":
        raise ValueError(f"fedavg_attack needs a fedavg-delta update, got {update.kind}")
    if mode not in ("strong", "weak", "none"):
        raise ValueError(f"unknown mode {mode!r}")
    meta = update.meta
    n_local = int(meta["n_local"])
    if labels is None:
        raise ValueError("fedavg_attack requires ground-truth labels")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape[0] != n_local:
        raise ValueError(
            f"label count {labels.shape[0]} does not match client data size {n_local}"
        )
    client_info = dict(client_info or {})
    mean = np.asarray(meta["mean"])
    std = np.asarray(meta["std"])

    if mode == "none":
        lr_guess = float(client_info.get("lr_guess", 0.1))
        pseudo = Update(
            kind="fedsgd-gradient",
            tensors={k: v / (-lr_guess) for k, v in update.tensors.items()},
            meta={**meta, "B": n_local},
        )
        result = op_gia_attack(
            pseudo, spec, params, cfg, labels=labels, ground_truth=ground_truth
        )
        result.flags["mode"] = "none"
        return result

    if mode == "strong":
        if not {"step_indices", "lr"} <= set(client_info):
            raise ValueError("strong mode needs the true client trace (step_indices, lr)")
        step_indices = client_info["step_indices"]
        lr_local = float(client_info["lr"])
    else:  # weak
        lr_local = float(client_info.get("lr_guess", 2.0 * float(meta["eta"])))
        epochs_guess = int(client_info.get("epochs_guess", meta["E"]))
        bs_guess = int(client_info.get("batch_size_guess", meta["B"]))
        step_indices = _guess_step_indices(n_local, bs_guess, epochs_guess, cfg.seed)
    if len(step_indices) > MAX_UNROLL_STEPS:
        raise ValueError(
            f"local run of {len(step_indices)} steps exceeds the unroll limit "
            f"({MAX_UNROLL_STEPS})"
        )

    leaked_unit, _ = _normalize_leaked(update.tensors)
    shape = (n_local,) + tuple(meta["input_shape"])

    def objective(xv):
        g = Graph()
        x_var = g.leaf(xv, "x")
        pvars0 = {n: g.leaf(v, n, grad=False) for n, v in params.items()}
        delta_vars = _unroll_delta(g, spec, pvars0, x_var, labels, step_indices, lr_local)
        obj = _distance_graph(g, cfg.distance, update.tensors, leaked_unit, delta_vars)
        if cfg.tv_weight > 0:
            obj = T.add(obj, _tv_term(x_var, cfg.tv_weight))
        back = g.backward(obj)
        return float(obj.value), back["x"]

    best_x, best_obj, trajectory, x0 = _run_matching(
        objective, lambda r: _init_candidate(shape, mean, std, cfg, r), cfg
    )
    x_hat = _denorm(best_x, mean, std)
    result = AttackResult(
        x_hat=x_hat,
        labels=labels,
        final_objective=best_obj,
        trajectory=trajectory,
        metrics=None,
        seed=cfg.seed,
        config=asdict(cfg),
        flags={"mode": mode},
    )
    if ground_truth is not None:
        x0_img = _denorm(x0, mean, std)
        result.metrics = evaluate_batch(ground_truth, x_hat, x0_img)
    return result
