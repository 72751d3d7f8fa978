"""Merge execution: task vectors, Fisher-weighted trimming, gate protection,
coefficient application, and post-merge output-norm calibration.

Two methods are supported. ``fim_ta`` applies the per-layer coefficients to
the raw task vector; ``fim_ties`` first zeroes low-importance task-vector
entries, keeping the top ``trim_ratio`` fraction per tensor ranked by
elementwise FIM times |delta|. In both methods gate projections get the
reduced coefficient ``gate_factor * alpha`` and merged weight matrices
whose probe output norm drifts more than ``norm_threshold`` from the base
are rescaled back.

Merging arithmetic is float32 throughout (the archives' dtype); the
alpha = 0 and alpha = 1 endpoints short-circuit to exact copies of the
base/tuned tensors so the endpoint identities hold bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .alphas import AlphaAssignment
from .archive import TensorArchive, archive_digest
from .fim import FimScores
from .topology import ModelTopology

METHODS = ("fim_ta", "fim_ties")
GRANULARITIES = ("per_tensor", "pooled")


class MergeValidationError(ValueError):
    pass


@dataclass
class MergePlan:
    method: str
    alphas: AlphaAssignment
    trim_ratio: float = 0.2
    gate_factor: float = 0.7
    norm_threshold: float = 0.05
    probe_seed: int = 0
    probe_count: int = 8
    trim_granularity: str = "per_tensor"
    allow_trim_fallback: bool = False

    def validate(self) -> None:
        if self.method not in METHODS:
            raise MergeValidationError(f"unknown method {self.method!r}")
        if not (0.0 < self.trim_ratio <= 1.0):
            raise MergeValidationError(f"trim_ratio must be in (0, 1], got {self.trim_ratio}")
        if not (0.0 < self.gate_factor <= 1.0):
            raise MergeValidationError(f"gate_factor must be in (0, 1], got {self.gate_factor}")
        if not (self.norm_threshold >= 0.0):
            raise MergeValidationError(f"norm_threshold must be >= 0, got {self.norm_threshold}")
        if self.trim_granularity not in GRANULARITIES:
            raise MergeValidationError(f"unknown trim granularity {self.trim_granularity!r}")
        if self.probe_count < 1:
            raise MergeValidationError("probe_count must be >= 1")

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "alphas": self.alphas.to_dict(),
            "trim_ratio": self.trim_ratio,
            "gate_factor": self.gate_factor,
            "norm_threshold": self.norm_threshold,
            "probe_seed": self.probe_seed,
            "probe_count": self.probe_count,
            "trim_granularity": self.trim_granularity,
            "allow_trim_fallback": self.allow_trim_fallback,
        }

    def plan_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @staticmethod
    def from_dict(doc: dict) -> "MergePlan":
        return MergePlan(
            method=doc["method"],
            alphas=AlphaAssignment.from_dict(doc["alphas"]),
            trim_ratio=float(doc.get("trim_ratio", 0.2)),
            gate_factor=float(doc.get("gate_factor", 0.7)),
            norm_threshold=float(doc.get("norm_threshold", 0.05)),
            probe_seed=int(doc.get("probe_seed", 0)),
            probe_count=int(doc.get("probe_count", 8)),
            trim_granularity=doc.get("trim_granularity", "per_tensor"),
            allow_trim_fallback=bool(doc.get("allow_trim_fallback", False)),
        )


def task_vector(base: TensorArchive, tuned: TensorArchive) -> TensorArchive:
    """Elementwise tuned - base in f32; inputs must align exactly."""
    missing = sorted(set(base.names()) ^ set(tuned.names()))
    if missing:
        raise MergeValidationError(f"archives do not share the same names: {missing}")
    bad_shapes = [
        n for n in base.names() if base[n].shape != tuned[n].shape
    ]
    if bad_shapes:
        raise MergeValidationError(f"shape mismatch for: {bad_shapes}")
    return TensorArchive({n: tuned[n] - base[n] for n in base.names()})


def _keep_count(trim_ratio: float, n: int) -> int:
    # ceil(r * n) with a guard against float product noise pushing an
    # exact integer target (e.g. 0.07 * 100) up by one
    return max(1, min(n, math.ceil(trim_ratio * n - 1e-9)))


def _survivor_mask(w: np.ndarray, keep: int) -> np.ndarray:
    """Boolean keep-mask for the top ``keep`` entries of flat importance ``w``.

    Ties at the threshold break by ascending flat index: among equal
    importance the earlier entry survives, independent of sort algorithm.
    """
    n = w.size
    mask = np.zeros(n, dtype=bool)
    if keep >= n:
        mask[:] = True
        return mask
    order = np.lexsort((np.arange(n), -w))
    mask[order[:keep]] = True
    return mask


def trim_task_vector(delta: TensorArchive, fim: FimScores, topology: ModelTopology,
                     trim_ratio: float, granularity: str = "per_tensor",
                     allow_fallback: bool = False):
    """Zero task-vector entries below the (1 - trim_ratio) importance quantile.

    Importance is elementwise FIM * |delta|. Exactly ceil(trim_ratio * n)
    entries survive per tensor (or per pooled layer). Tensors outside the
    coefficient set pass through untouched. When only per-layer FIM scalars
    are available, importance degrades to per_layer * |delta| (within a
    tensor this ranks identically to |delta|); this fallback must be opted
    into and is flagged in the stats.

    Returns (trimmed archive, per-tensor stats dict).
    """
    if not (0.0 < trim_ratio <= 1.0):
        raise MergeValidationError(f"trim_ratio must be in (0, 1], got {trim_ratio}")
    fallback = fim.elementwise is None
    if fallback and not allow_fallback:
        raise MergeValidationError(
            "elementwise FIM is required for trimming (pass allow_fallback=True "
            "to rank by |delta| scaled by per-layer FIM)"
        )

    def importance(name: str) -> np.ndarray:
        d = np.abs(delta[name].astype(np.float64)).ravel()
        if fallback:
            per = fim.per_layer.get(topology[name].layer_index, 1.0)
            return max(per, 0.0) * d
        if name not in fim.elementwise:
            raise MergeValidationError(f"elementwise FIM missing tensor {name!r}")
        return fim.elementwise[name].ravel() * d

    out: dict[str, np.ndarray] = {}
    stats: dict[str, dict] = {}
    by_layer: dict[int, list[str]] = {}
    for name in delta.names():
        rec = topology[name]
        if rec.in_coefficient_set:
            by_layer.setdefault(rec.layer_index, []).append(name)
        else:
            out[name] = delta[name].copy()

    for layer in sorted(by_layer):
        names = sorted(by_layer[layer])
        if granularity == "pooled":
            w = np.concatenate([importance(n) for n in names])
            mask = _survivor_mask(w, _keep_count(trim_ratio, w.size))
            cursor = 0
            for n in names:
                size = delta[n].size
                m = mask[cursor : cursor + size].reshape(delta[n].shape)
                cursor += size
                out[n] = np.where(m, delta[n], np.float32(0.0))
                stats[n] = {"retained": int(m.sum()), "total": size, "fallback": fallback}
        else:
            for n in names:
                w = importance(n)
                keep = _keep_count(trim_ratio, w.size)
                mask = _survivor_mask(w, keep).reshape(delta[n].shape)
                out[n] = np.where(mask, delta[n], np.float32(0.0))
                stats[n] = {"retained": int(mask.sum()), "total": w.size, "fallback": fallback}

    return TensorArchive(out), stats


@dataclass
class CalibrationResult:
    weights: np.ndarray
    factor: float
    merged_norm: float
    base_norm: float
    skipped: bool = False


def probe_output_norm(weights: np.ndarray, probe_seed: int, probe_count: int) -> float:
    """RMS over standard-normal probes x of ||W x||_2, computed in f64."""
    rng = np.random.default_rng(probe_seed)
    probes = rng.standard_normal((probe_count, weights.shape[1]))
    y = probes @ weights.astype(np.float64).T
    return float(np.sqrt(np.mean(np.sum(y * y, axis=1))))


def norm_calibrate(merged: np.ndarray, base: np.ndarray, norm_threshold: float,
                   probe_seed: int, probe_count: int) -> CalibrationResult:
    """Rescale a merged weight matrix whose probe output norm drifted.

    If |merged_norm / base_norm - 1| > norm_threshold, the merged matrix is
    multiplied by base_norm / merged_norm; by linearity of ||W x|| in W this
    restores the base output norm. A zero base norm is degenerate: the
    tensor is left untouched and flagged.
    """
    if merged.ndim != 2:
        raise ValueError("norm calibration is defined for 2-D weight matrices")
    base_norm = probe_output_norm(base, probe_seed, probe_count)
    merged_norm = probe_output_norm(merged, probe_seed, probe_count)
    if base_norm == 0.0:
        return CalibrationResult(merged, 1.0, merged_norm, base_norm, skipped=True)
    deviation = abs(merged_norm / base_norm - 1.0)
    if not (deviation > norm_threshold):
        return CalibrationResult(merged, 1.0, merged_norm, base_norm)
    if merged_norm == 0.0:
        # a zero matrix cannot be rescaled to a nonzero norm
        return CalibrationResult(merged, 1.0, merged_norm, base_norm, skipped=True)
    factor = base_norm / merged_norm
    return CalibrationResult(merged * np.float32(factor), factor, merged_norm, base_norm)


def merge(base: TensorArchive, tuned: TensorArchive, plan: MergePlan,
          fim: FimScores | None, topology: ModelTopology):
    """Execute the merge plan; returns (merged archive, report dict).

    Per tensor: the layer's coefficient (gate projections scaled by
    gate_factor, non-layer tensors on the fallback coefficient) is applied
    to the (possibly trimmed) task vector, then 2-D weight matrices are
    norm-calibrated against the base.
    """
    plan.validate()
    delta = task_vector(base, tuned)
    trim_stats: dict[str, dict] = {}
    if plan.method == "fim_ties":
        if fim is None:
            raise MergeValidationError("fim_ties requires FIM scores")
        delta, trim_stats = trim_task_vector(
            delta, fim, topology, plan.trim_ratio,
            granularity=plan.trim_granularity, allow_fallback=plan.allow_trim_fallback,
        )

    merged: dict[str, np.ndarray] = {}
    tensor_records: list[dict] = []
    for name in base.names():
        rec = topology[name]
        alpha = plan.alphas.alpha_for(rec.layer_index)
        gate_scaled = rec.category == "gate_projection"
        if gate_scaled:
            alpha = plan.gate_factor * alpha
        trimmed = name in trim_stats and trim_stats[name]["retained"] < trim_stats[name]["total"]

        if alpha == 0.0:
            out = base[name].copy()
        elif alpha == 1.0 and not trimmed:
            out = tuned[name].copy()
        else:
            out = base[name] + np.float32(alpha) * delta[name]

        record = {
            "name": name,
            "layer_index": rec.layer_index,
            "category": rec.category,
            "alpha": alpha,
            "gate_scaled": gate_scaled,
            "retained": trim_stats.get(name, {}).get("retained"),
            "total": trim_stats.get(name, {}).get("total"),
            "trim_fallback": trim_stats.get(name, {}).get("fallback", False),
        }
        if out.ndim == 2:
            cal = norm_calibrate(out, base[name], plan.norm_threshold,
                                 plan.probe_seed, plan.probe_count)
            out = cal.weights
            record.update(
                pre_norm=cal.merged_norm,
                post_norm=probe_output_norm(out, plan.probe_seed, plan.probe_count)
                if cal.factor != 1.0 else cal.merged_norm,
                base_norm=cal.base_norm,
                rescale_factor=cal.factor,
                calibration_skipped=cal.skipped,
            )
        else:
            record.update(pre_norm=None, post_norm=None, base_norm=None,
                          rescale_factor=None, calibration_skipped=None)
        merged[name] = out
        tensor_records.append(record)

    layer_summary: dict[str, dict] = {}
    for r in tensor_records:
        key = str(r["layer_index"]) if r["layer_index"] is not None else "none"
        agg = layer_summary.setdefault(
            key, {"alpha": None, "retained": 0, "total": 0, "n_tensors": 0,
                  "n_rescaled": 0, "n_gate_scaled": 0}
        )
        if r["layer_index"] is not None and not r["gate_scaled"]:
            agg["alpha"] = r["alpha"]
        agg["n_tensors"] += 1
        if r["retained"] is not None:
            agg["retained"] += r["retained"]
            agg["total"] += r["total"]
        if r.get("rescale_factor") not in (None, 1.0):
            agg["n_rescaled"] += 1
        if r["gate_scaled"]:
            agg["n_gate_scaled"] += 1

    report = {
        "global": {
            "method": plan.method,
            "plan": plan.to_dict(),
            "plan_hash": plan.plan_hash(),
            "base_digest": archive_digest(base),
            "tuned_digest": archive_digest(tuned),
            "fallback_alpha": plan.alphas.fallback_alpha,
            "fim_elementwise_available": None if fim is None else fim.elementwise is not None,
        },
        "layers": layer_summary,
        "tensors": tensor_records,
    }
    return TensorArchive(merged), report


def write_report(report: dict, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    tmp.replace(path)
