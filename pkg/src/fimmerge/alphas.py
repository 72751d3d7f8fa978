"""Layer-adaptive merge coefficients from per-layer importance scores.

The mapping runs in log space: scores are log-transformed, centered at
their median, and pushed through a sigmoid whose sharpness is set
adaptively to the reciprocal of the centered-score range, so no manual
tuning is needed and the result is invariant to rescaling all scores by a
positive constant. The most important layer always lands at alpha = 0.5
(conservative) and the least important at 1 - sigmoid(-1) ~ 0.731
(aggressive); everything else falls monotonically in between.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .archive import TensorArchive
from .topology import ModelTopology

SIGNAL_KINDS = ("fim_times_delta_sq", "fim_only", "delta_norm_only")

# positive floor applied before the log; dead layers otherwise produce -inf
SCORE_FLOOR = 1e-30

# range of centered log scores below which the mapping is degenerate
DEGENERATE_RANGE = 1e-12


def sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


ALPHA_MIN = 0.5
ALPHA_MAX = 1.0 - sigmoid(-1.0)


@dataclass
class ImportanceSignal:
    kind: str
    per_layer_raw: dict[int, float]

    def __post_init__(self) -> None:
        if self.kind not in SIGNAL_KINDS:
            raise ValueError(f"unknown signal kind {self.kind!r}; expected one of {SIGNAL_KINDS}")
        self.per_layer_raw = {
            int(l): max(float(v), SCORE_FLOOR) for l, v in self.per_layer_raw.items()
        }


@dataclass
class AlphaAssignment:
    per_layer: dict[int, float]
    fallback_alpha: float
    theta_adapt: float
    diagnostics: dict = field(default_factory=dict)

    def alpha_for(self, layer_index: int | None) -> float:
        if layer_index is not None and layer_index in self.per_layer:
            return self.per_layer[layer_index]
        return self.fallback_alpha

    def to_dict(self) -> dict:
        return {
            "per_layer": {str(l): v for l, v in sorted(self.per_layer.items())},
            "fallback_alpha": self.fallback_alpha,
            "theta_adapt": self.theta_adapt,
            "diagnostics": {
                k: {str(l): v for l, v in sorted(d.items())}
                for k, d in self.diagnostics.items()
            },
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n")

    @staticmethod
    def from_dict(doc: dict) -> "AlphaAssignment":
        return AlphaAssignment(
            per_layer={int(l): float(v) for l, v in doc["per_layer"].items()},
            fallback_alpha=float(doc["fallback_alpha"]),
            theta_adapt=float(doc["theta_adapt"]),
            diagnostics={
                k: {int(l): float(v) for l, v in d.items()}
                for k, d in doc.get("diagnostics", {}).items()
            },
        )


def delta_layer_norms(delta: TensorArchive, topology: ModelTopology) -> dict[int, float]:
    """Per-layer mean of squared task-vector entries (coefficient set only).

    Note the mean, not the sum: layer scores stay comparable across layers
    with different parameter counts.
    """
    sums: dict[int, float] = {}
    counts: dict[int, int] = {}
    for name in delta.names():
        rec = topology[name]
        if not rec.in_coefficient_set:
            continue
        arr = np.asarray(delta[name], dtype=np.float64)
        sums[rec.layer_index] = sums.get(rec.layer_index, 0.0) + float(np.sum(arr * arr))
        counts[rec.layer_index] = counts.get(rec.layer_index, 0) + arr.size
    return {l: sums[l] / counts[l] for l in sorted(sums)}


def build_signal(kind: str, fim_per_layer: dict[int, float] | None,
                 delta_norms: dict[int, float] | None) -> ImportanceSignal:
    """Combine the available statistics into the requested importance signal."""
    if kind == "fim_times_delta_sq":
        if fim_per_layer is None or delta_norms is None:
            raise ValueError("fim_times_delta_sq needs both FIM scores and delta norms")
        layers = sorted(set(fim_per_layer) & set(delta_norms))
        if not layers:
            raise ValueError("no layers shared between FIM scores and delta norms")
        raw = {l: fim_per_layer[l] * delta_norms[l] for l in layers}
    elif kind == "fim_only":
        if fim_per_layer is None:
            raise ValueError("fim_only needs FIM scores")
        raw = dict(fim_per_layer)
    elif kind == "delta_norm_only":
        if delta_norms is None:
            raise ValueError("delta_norm_only needs delta norms")
        raw = dict(delta_norms)
    else:
        raise ValueError(f"unknown signal kind {kind!r}")
    return ImportanceSignal(kind=kind, per_layer_raw=raw)


def assign_alphas(signal: ImportanceSignal, sigmoid_theta: float | None = None) -> AlphaAssignment:
    """Map importance scores to per-layer coefficients.

    s = log(raw); s~ = s - median(s); theta = 1 / range(s~) unless
    overridden; t = sigmoid(theta * (s~ - max s~)); alpha = 1 - t.
    A degenerate range (all scores equal in log space) yields alpha = 0.5
    everywhere with theta_adapt = 0, the continuous limit of the formula.
    """
    if not signal.per_layer_raw:
        raise ValueError("importance signal has no layers")
    layers = sorted(signal.per_layer_raw)
    s = {l: math.log(signal.per_layer_raw[l]) for l in layers}
    med = float(np.median([s[l] for l in layers]))
    s_tilde = {l: s[l] - med for l in layers}
    values = [s_tilde[l] for l in layers]
    rng = max(values) - min(values)
    if sigmoid_theta is not None:
        theta = float(sigmoid_theta)
        if theta < 0.0:
            raise ValueError("sigmoid_theta override must be nonnegative")
    elif rng > DEGENERATE_RANGE:
        theta = 1.0 / rng
    else:
        theta = 0.0
    top = max(values)
    t = {l: sigmoid(theta * (s_tilde[l] - top)) for l in layers}
    alpha = {l: 1.0 - t[l] for l in layers}
    fallback = float(np.mean([alpha[l] for l in layers]))
    return AlphaAssignment(
        per_layer=alpha,
        fallback_alpha=fallback,
        theta_adapt=theta,
        diagnostics={"s": s, "s_tilde": s_tilde, "t": t},
    )
