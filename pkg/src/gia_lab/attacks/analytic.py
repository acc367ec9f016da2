"""Closed-form reconstruction attacks and the malicious-server constructions
that enable them: linear-layer inversion, the imprint (binning) module, and
fishing-style parameter manipulation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .. import io as gio
from .. import models, rng
from ..fl import Update
from ..metrics import cosine_flat
from .optim import OpGiaConfig, op_gia_attack

ACTIVATION_TAU = 1e-9  # |bias gradient| below this marks a neuron inactive


# ---------------------------------------------------------------------------
# closed-form inversion of a leading linear layer
# ---------------------------------------------------------------------------


def first_parameterized_layer(spec: models.ModelSpec) -> int:
    for idx, layer in enumerate(spec.layers):
        if isinstance(layer, (models.Linear, models.Conv, models.Head)):
            return idx
    raise models.SpecError("model has no parameterized layer")


def closed_form_linear_invert(update: Update, spec: models.ModelSpec, layer: str | None = None):
    """Per-neuron input reconstruction: weight gradient / bias gradient.

    Only valid for a linear-with-bias layer that sees the raw (flattened)
    input, i.e. the first parameterized layer. Neurons whose bias gradient
    is within ACTIVATION_TAU of zero are reported inactive.

    Returns {neuron index: reconstruction (input-dim vector)} in the model's
    normalized input space.
    """
    if update.kind != "fedsgd-gradient":
        raise ValueError("closed-form inversion needs a fedsgd-gradient update")
    idx = first_parameterized_layer(spec)
    name = layer if layer is not None else f"L{idx}"
    if name != f"L{idx}":
        raise ValueError(f"layer {name} is not the first parameterized layer (L{idx})")
    lyr = spec.layers[idx]
    if not isinstance(lyr, models.Linear) or not lyr.bias:
        raise ValueError(
            "closed-form inversion needs a leading linear layer with bias, "
            f"found {type(lyr).__name__}"
        )
    dw = update.tensors[f"L{idx}.weight"]
    db = update.tensors[f"L{idx}.bias"]
    out = {}
    for neuron in range(db.shape[0]):
        if abs(db[neuron]) > ACTIVATION_TAU:
            out[neuron] = dw[neuron] / db[neuron]
    return out


# ---------------------------------------------------------------------------
# imprint (binning) module
# ---------------------------------------------------------------------------


@dataclass
class ImprintModule:
    bins: int
    measurement: np.ndarray  # h, length = flattened input dim
    cutoffs: np.ndarray  # ascending quantiles q_i; bias ladder is -q
    layer_index: int  # index of the imprint linear layer in the modified spec
    input_shape: tuple
    mean: np.ndarray
    std: np.ndarray


def brightness_values(module: ImprintModule, images: np.ndarray) -> np.ndarray:
    """Measurement h(x) on raw [0,1] images (normalized internally)."""
    norm = (images - module.mean[None, :, None, None]) / module.std[None, :, None, None]
    return norm.reshape(norm.shape[0], -1) @ module.measurement


def bin_of(module: ImprintModule, values: np.ndarray) -> np.ndarray:
    """Bin index per measurement value: the largest i with value > q_i,
    or -1 when no neuron activates."""
    return np.searchsorted(module.cutoffs, values, side="left") - 1


def build_imprint(
    spec: models.ModelSpec,
    params: dict,
    k: int,
    calibration: np.ndarray,
    mean: np.ndarray,
    std: np.ndarray,
    measurement: str = "mean-brightness",
):
    """Prepend the binning layer: k rows of a brightness probe with a
    descending bias ladder, a ReLU, and a fixed rank-one projection back to
    the input shape so the host model still runs.

    The projection's columns are identical by construction; that is what
    makes the adjacent-row gradient differences isolate single bins.
    Returns (modified spec, modified params, ImprintModule).
    """
    if k < 2:
        raise ValueError(f"imprint needs k >= 2 bins, got {k}")
    if measurement != "mean-brightness":
        raise ValueError(f"unknown measurement {measurement!r}")
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    c, h, w = spec.input_shape
    m = c * h * w
    probe = np.full(m, 1.0 / m)

    calib_norm = (calibration - mean[None, :, None, None]) / std[None, :, None, None]
    values = calib_norm.reshape(calibration.shape[0], -1) @ probe
    cutoffs = np.quantile(values, np.arange(k) / k)
    cutoffs[0] -= 1e-9  # the minimum calibration sample still activates bin 0
    cutoffs = np.maximum.accumulate(cutoffs)

    mean_img = calib_norm.mean(axis=0).reshape(-1)
    passthrough = np.tile((mean_img / k)[:, None], (1, k))

    new_layers = (
        models.Flatten(),
        models.Linear(m, k),
        models.Activation("relu"),
        models.Linear(k, m, bias=False),
        models.Reshape(tuple(spec.input_shape)),
    ) + tuple(spec.layers)
    shift = 5
    new_spec = models.ModelSpec(
        layers=new_layers,
        input_shape=spec.input_shape,
        num_classes=spec.num_classes,
    )
    models.validate_spec(new_spec)
    new_params = {"L1.weight": np.tile(probe, (k, 1)), "L1.bias": -cutoffs.copy(),
                  "L3.weight": passthrough}
    for name, value in params.items():
        idx, kind = name.split(".")
        new_params[f"L{int(idx[1:]) + shift}.{kind}"] = value.copy()
    module = ImprintModule(
        bins=k,
        measurement=probe,
        cutoffs=cutoffs,
        layer_index=1,
        input_shape=tuple(spec.input_shape),
        mean=mean,
        std=std,
    )
    return new_spec, new_params, module


@dataclass
class ImprintRecovery:
    reconstructions: dict  # bin index -> raw-space image (C,H,W)
    active_bins: np.ndarray
    exact_flags: list | None = None  # per ground-truth sample
    exact_count: int | None = None
    sample_bins: np.ndarray | None = None


def imprint_reconstruct(update: Update, module: ImprintModule, ground_truth=None) -> ImprintRecovery:
    """Adjacent-bin gradient differences, entry-wise divided.

    With ground truth supplied, flags a sample exactly-recovered when its
    bin was hit by exactly one sample (and reports the count).
    """
    wname = f"L{module.layer_index}.weight"
    bname = f"L{module.layer_index}.bias"
    if wname not in update.tensors or bname not in update.tensors:
        raise ValueError("update does not carry imprint-layer gradients")
    dw = update.tensors[wname]
    db = update.tensors[bname]
    k = module.bins
    if dw.shape != (k, module.measurement.shape[0]) or db.shape != (k,):
        raise ValueError(
            f"gradient shapes {dw.shape}/{db.shape} do not match the imprint module"
        )
    dw_diff = dw - np.vstack([dw[1:], np.zeros_like(dw[:1])])
    db_diff = db - np.concatenate([db[1:], [0.0]])
    active = np.flatnonzero(np.abs(db_diff) > ACTIVATION_TAU)
    recon = {}
    c, h, w = module.input_shape
    for i in active:
        flat = dw_diff[i] / db_diff[i]
        img = flat.reshape(c, h, w)
        recon[int(i)] = img * module.std[:, None, None] + module.mean[:, None, None]
    result = ImprintRecovery(reconstructions=recon, active_bins=active)
    if ground_truth is not None:
        values = brightness_values(module, ground_truth)
        bins = bin_of(module, values)
        result.sample_bins = bins
        occupancy = {b: int((bins == b).sum()) for b in set(bins.tolist())}
        flags = []
        for b in bins:
            flags.append(bool(b >= 0 and occupancy[int(b)] == 1 and int(b) in recon))
        result.exact_flags = flags
        result.exact_count = int(sum(flags))
    return result


# ---------------------------------------------------------------------------
# expected-recovery combinatorics
# ---------------------------------------------------------------------------


@dataclass
class RecoveryEstimate:
    batch_size: int
    bins: int
    trials: int
    mc_estimate: float
    mc_se: float
    formula_main: float | None  # defined for k > B > 2


def _formula_main_sum(batch: int, k: int) -> float:
    total = 0
    for i in range(1, batch - 1):
        inner = 0
        for j in range(1, (batch - i) // 2 + 1):
            inner += math.comb(k - i, j) * math.comb(batch - i - j - 1, j - 1)
        total += i * math.comb(k, i) * inner
    return total / math.comb(k + batch - 1, k - 1)


def _mc_singletons(batch: int, k: int, trials: int, seed: int, key: int) -> np.ndarray:
    g = rng.stream(seed, 401, key)
    balls = np.sort(g.integers(0, k, size=(trials, batch)), axis=1)
    if batch == 1:
        return np.ones(trials)
    left = np.ones((trials, batch), dtype=bool)
    right = np.ones((trials, batch), dtype=bool)
    left[:, 1:] = balls[:, 1:] != balls[:, :-1]
    right[:, :-1] = balls[:, :-1] != balls[:, 1:]
    return (left & right).sum(axis=1).astype(np.float64)


def expected_recovery_count(batch: int, k: int, trials: int = 100_000, seed: int = 0) -> RecoveryEstimate:
    """Expected number of singly-occupied bins for a batch thrown uniformly
    into k bins: Monte-Carlo estimate plus the closed-form main sum (the
    latter only on its k > B > 2 domain)."""
    if batch < 1 or k < 1:
        raise ValueError("batch and k must be >= 1")
    singles = _mc_singletons(batch, k, trials, seed, key=0)
    est = float(singles.mean())
    se = float(singles.std(ddof=1) / np.sqrt(trials)) if trials > 1 else 0.0
    main = _formula_main_sum(batch, k) if k > batch > 2 else None
    return RecoveryEstimate(batch, k, trials, est, se, main)


def estimate_correction(batch: int, k: int, trials: int = 100_000, seed: int = 0) -> float:
    """Simulated correction term: independent Monte-Carlo run minus the
    closed-form main sum (separate stream from expected_recovery_count)."""
    if not (k > batch > 2):
        raise ValueError("correction is defined for k > B > 2")
    singles = _mc_singletons(batch, k, trials, seed, key=1)
    return float(singles.mean()) - _formula_main_sum(batch, k)


# ---------------------------------------------------------------------------
# fishing: parameter manipulation isolating one class
# ---------------------------------------------------------------------------


@dataclass
class FishingPlan:
    target_class: int
    beta: float
    head_index: int
    snapshot: dict = field(default_factory=dict)  # original head tensors


def fishing_manipulate(spec: models.ModelSpec, params: dict, target_class: int, beta: float):
    """Suppress the target class: head biases +beta for the other classes,
    -beta for the target. Non-target samples then sit at near-zero loss and
    contribute near-zero gradient. Only head tensors change; beta == 0 is a
    no-op. Returns (modified params, FishingPlan)."""
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    if not 0 <= target_class < spec.num_classes:
        raise ValueError(
            f"target class {target_class} outside [0, {spec.num_classes})"
        )
    hidx = models.head_index(spec)
    bname = f"L{hidx}.bias"
    wname = f"L{hidx}.weight"
    if bname not in params:
        raise ValueError("classifier head has no bias to manipulate")
    plan = FishingPlan(
        target_class=target_class,
        beta=float(beta),
        head_index=hidx,
        snapshot={wname: params[wname].copy(), bname: params[bname].copy()},
    )
    if beta == 0:
        return {k: v.copy() for k, v in params.items()}, plan
    modified = {k: v.copy() for k, v in params.items()}
    bias = np.full(spec.num_classes, float(beta))
    bias[target_class] = -float(beta)
    modified[bname] = bias
    return modified, plan


def isolation_score(update_batch: Update, update_single: Update) -> float:
    """Cosine similarity between a batch update and a single-sample update."""
    return cosine_flat(update_batch.tensors, update_single.tensors)


def fishing_then_invert(
    update: Update,
    spec: models.ModelSpec,
    manipulated_params: dict,
    plan: FishingPlan,
    cfg: OpGiaConfig,
    ground_truth_target=None,
):
    """Recover the isolated target sample: rescale the leaked batch gradient
    by B (it approximates target-gradient / B) and run gradient matching as
    a batch of one."""
    if update.kind != "fedsgd-gradient":
        raise ValueError("fishing_then_invert needs a fedsgd-gradient update")
    batch = int(update.meta["B"])
    pseudo = Update(
        kind="fedsgd-gradient",
        tensors={k: v * batch for k, v in update.tensors.items()},
        meta={**update.meta, "B": 1, "n_local": 1},
    )
    labels = np.asarray([plan.target_class], dtype=np.int64)
    result = op_gia_attack(
        pseudo,
        spec,
        manipulated_params,
        cfg,
        labels=labels,
        ground_truth=ground_truth_target,
    )
    result.flags["fishing"] = {"target_class": plan.target_class, "beta": plan.beta}
    return result


# ---------------------------------------------------------------------------
# artifact serialization (for the defense corpus)
# ---------------------------------------------------------------------------


def save_imprint_artifact(path, spec, params, module: ImprintModule):
    tensors = dict(params)
    tensors["imprint/measurement"] = module.measurement
    tensors["imprint/cutoffs"] = module.cutoffs
    tensors["imprint/mean"] = module.mean
    tensors["imprint/std"] = module.std
    meta = {
        "kind": "imprint",
        "spec": models.spec_to_json(spec),
        "bins": module.bins,
        "layer_index": module.layer_index,
        "input_shape": list(module.input_shape),
    }
    gio.write_tensors(path, tensors, gio.MAGIC_ARTIFACT, meta)


def save_fishing_artifact(path, spec, params, plan: FishingPlan):
    tensors = dict(params)
    for name, value in plan.snapshot.items():
        tensors[f"snapshot/{name}"] = value
    meta = {
        "kind": "fishing",
        "spec": models.spec_to_json(spec),
        "target_class": plan.target_class,
        "beta": plan.beta,
        "head_index": plan.head_index,
    }
    gio.write_tensors(path, tensors, gio.MAGIC_ARTIFACT, meta)


def load_artifact(path):
    """Returns (kind, spec, params, extras) for a GIAA file."""
    tensors, meta = gio.read_tensors(path, gio.MAGIC_ARTIFACT)
    if not meta or "kind" not in meta or "spec" not in meta:
        raise gio.FileFormatError(f"{path}: artifact metadata missing")
    spec = models.spec_from_json(meta["spec"])
    params = {k: v for k, v in tensors.items() if "/" not in k}
    extras = {k: v for k, v in tensors.items() if "/" in k}
    return meta["kind"], spec, params, {"meta": meta, "tensors": extras}
