"""Client-side defense pipeline: architecture validation, parameter-pattern
scanning, and training-protocol linting.

The scan rules are calibrated on the zoo's init distribution (documented in
RULES below); linting is advisory and never fails a report on its own.
"""

from __future__ import annotations

import difflib
from dataclasses import dataclass, field

import numpy as np

from . import models
from .fl import ClientConfig

RULES = {
    "duplicate_rows_cos": 0.999,  # colinearity threshold for weight rows
    "duplicate_rows_frac": 0.5,  # fraction of colinear row pairs that flags
    "bias_ladder_iqr_mult": 4.0,  # ladder span vs typical init-bias IQR
    "bias_iqr_floor": 1e-6,  # zoo biases init to zero; floor keeps the rule meaningful
    "head_skew_mult": 5.0,  # head bias spread vs weight scale
    "min_batch_size": 8,
    "fishing_beta_target": 5.0,  # manipulations at or above this must be caught
}


@dataclass(frozen=True)
class ReferenceSpec:
    structural_hash: str
    layer_list: tuple
    allowed_activations: tuple = ("relu", "tanh", "leaky_relu")


def make_reference(spec: models.ModelSpec, allowed_activations=("relu", "tanh", "leaky_relu")) -> ReferenceSpec:
    return ReferenceSpec(
        structural_hash=models.structural_hash(spec),
        layer_list=tuple(models.layer_descriptors(spec)),
        allowed_activations=tuple(allowed_activations),
    )


@dataclass
class ParameterFlag:
    layer: str
    rule: str
    score: float

    def __str__(self):
        return f"{self.layer}: {self.rule} (score={self.score:.4g})"


@dataclass
class ValidationReport:
    architecture_verdict: str  # "pass" | "mismatch"
    architecture_diff: list
    parameter_flags: list
    lint_findings: list
    overall: str  # "pass" | "fail"; lint findings are advisory

    def to_text(self) -> str:
        lines = [f"architecture: {self.architecture_verdict}"]
        lines += [f"  {d}" for d in self.architecture_diff]
        lines.append(f"parameter flags: {len(self.parameter_flags)}")
        lines += [f"  {f}" for f in self.parameter_flags]
        lines.append(f"lint findings: {len(self.lint_findings)}")
        lines += [f"  {f}" for f in self.lint_findings]
        lines.append(f"overall: {self.overall}")
        return "\n".join(lines)

    def to_csv_row(self) -> dict:
        return {
            "architecture": self.architecture_verdict,
            "parameter_flags": ";".join(f.rule for f in self.parameter_flags),
            "lint_findings": ";".join(f.split(":")[0] for f in self.lint_findings),
            "overall": self.overall,
        }


def validate_architecture(received: models.ModelSpec, ref: ReferenceSpec):
    """Pass iff the structural hash matches; otherwise a line diff of the
    layer descriptors naming inserted/removed/altered layers."""
    models.validate_spec(received)
    if models.structural_hash(received) == ref.structural_hash:
        return "pass", []
    got = models.layer_descriptors(received)
    diff = []
    matcher = difflib.SequenceMatcher(a=list(ref.layer_list), b=got)
    for tag, i1, i2, j1, j2 in matcher.get_opcodes():
        if tag == "equal":
            continue
        if tag in ("delete", "replace"):
            diff += [f"removed layer {i}: {ref.layer_list[i]}" for i in range(i1, i2)]
        if tag in ("insert", "replace"):
            diff += [f"inserted layer {j}: {got[j]}" for j in range(j1, j2)]
    if not diff:
        diff = ["input shape or class count changed"]
    return "mismatch", diff


def _colinear_fraction(weight: np.ndarray) -> float:
    rows = weight.reshape(weight.shape[0], -1)
    norms = np.linalg.norm(rows, axis=1)
    keep = norms > 0
    rows = rows[keep] / norms[keep][:, None]
    n = rows.shape[0]
    if n < 2:
        return 0.0
    cos = rows @ rows.T
    pairs = n * (n - 1) / 2
    hits = (np.abs(cos[np.triu_indices(n, k=1)]) > RULES["duplicate_rows_cos"]).sum()
    return float(hits / pairs)


def scan_parameters(params: dict, spec: models.ModelSpec) -> list:
    """Rule-based flags for imprint and fishing signatures."""
    flags = []
    hidx = models.head_index(spec)
    for idx, layer in enumerate(spec.layers):
        if not isinstance(layer, (models.Linear, models.Head)):
            continue
        wname, bname = f"L{idx}.weight", f"L{idx}.bias"
        weight = params.get(wname)
        if weight is None:
            continue
        # (a) duplicated-row rule: imprint rows all measure the same probe
        frac = _colinear_fraction(weight)
        if frac > RULES["duplicate_rows_frac"]:
            flags.append(ParameterFlag(f"L{idx}", "duplicated-rows", frac))
        # (b) bias-ladder rule: strictly monotone bias with a wide span
        bias = params.get(bname)
        if bias is not None and bias.size >= 2:
            diffs = np.diff(bias)
            monotone = np.all(diffs > 0) or np.all(diffs < 0)
            span = float(bias.max() - bias.min())
            threshold = RULES["bias_ladder_iqr_mult"] * RULES["bias_iqr_floor"]
            if monotone and span > threshold:
                flags.append(ParameterFlag(f"L{idx}", "bias-ladder", span))
        # (c) head-skew rule: fishing offsets dwarf the weight scale
        if idx == hidx and bias is not None:
            spread = float(bias.max() - bias.min())
            wscale = float(np.std(weight))
            if wscale > 0 and spread > RULES["head_skew_mult"] * wscale:
                flags.append(ParameterFlag(f"L{idx}", "head-skew", spread / wscale))
    return flags


def lint_protocol(cfg: ClientConfig | None, spec: models.ModelSpec) -> list:
    """Advisory findings on the training protocol and architecture."""
    findings = []
    for idx, layer in enumerate(spec.layers):
        if isinstance(layer, models.Activation) and layer.kind == "sigmoid":
            findings.append(
                f"sigmoid-activation: layer {idx} uses sigmoid; generator-based "
                "attacks exploit its near-linear range"
            )
            break
    if cfg is not None:
        if cfg.batch_size < RULES["min_batch_size"]:
            findings.append(
                f"small-batch: B={cfg.batch_size} < {RULES['min_batch_size']}; "
                "larger batches blunt gradient matching"
            )
        if cfg.epochs == 1:
            findings.append(
                "single-step: E=1 shares plain gradients; multi-step local "
                "training resists reconstruction"
            )
    first = None
    for layer in spec.layers:
        if isinstance(layer, (models.Linear, models.Conv, models.Head)):
            first = layer
            break
    if isinstance(first, (models.Linear, models.Head)):
        findings.append(
            "linear-first: a fully connected first layer exposes inputs to "
            "closed-form recovery"
        )
    return findings


def validate_update(received_spec: models.ModelSpec, params: dict, ref: ReferenceSpec,
                    client_cfg: ClientConfig | None = None) -> ValidationReport:
    """Full three-stage check; overall fails iff architecture mismatches or
    any parameter rule fires (lint is advisory)."""
    verdict, diff = validate_architecture(received_spec, ref)
    flags = scan_parameters(params, received_spec)
    lint = lint_protocol(client_cfg, received_spec)
    overall = "fail" if (verdict != "pass" or flags) else "pass"
    return ValidationReport(
        architecture_verdict=verdict,
        architecture_diff=diff,
        parameter_flags=flags,
        lint_findings=lint,
        overall=overall,
    )
