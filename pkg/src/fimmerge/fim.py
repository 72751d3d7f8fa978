"""Data-free diagonal Fisher information estimation and interchange.

The estimate needs no calibration data: token sequences are drawn i.i.d.
uniformly over the vocabulary, the mean next-token NLL is backpropagated
per sample, and squared gradients are averaged. Per-layer scalars are the
mean of the elementwise estimates over each layer's coefficient-set
parameters (a sum reduction is available behind ``reduction="sum"``).

The JSON interchange format written by :func:`export_fim` is the contract
with out-of-tree extractors that compute the same quantity on full-scale
checkpoints::

    {
      "meta": {"n_samples": 8, "seq_len": 64, "seed": 42,
               "model_id": "...", "reduction": "mean"},
      "per_layer": {"0": 1.2e-4, ...},
      "elementwise_archive": "relative/path.safetensors" | null
    }

The token sampling rule is part of the contract: sequences are produced by
``numpy.random.default_rng(seed).integers(0, vocab_size, (n, seq_len))``
so that independent implementations agree sample-for-sample.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .archive import TensorArchive, load_archive, write_archive
from .micromodel import MicroModel, sample_uniform_tokens
from .topology import ModelTopology, NamingScheme, parse_topology

_REQUIRED_META = ("n_samples", "seq_len", "seed", "model_id")


class FimSchemaError(ValueError):
    """Interchange file violates the FIM schema or its invariants."""


@dataclass
class FimScores:
    """Diagonal Fisher estimates: elementwise squared-gradient averages plus
    per-layer scalar reductions. ``elementwise`` may be absent for huge
    models, in which case ``per_layer`` is authoritative."""

    elementwise: dict[str, np.ndarray] | None
    per_layer: dict[int, float] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def validate(self) -> None:
        for key in _REQUIRED_META:
            if key not in self.meta:
                raise FimSchemaError(f"meta is missing required key {key!r}")
        for layer, value in self.per_layer.items():
            if not np.isfinite(value) or value < 0:
                raise FimSchemaError(f"per_layer[{layer}] = {value} is not a finite nonnegative value")
        if self.elementwise is not None:
            for name, arr in self.elementwise.items():
                if not np.all(np.isfinite(arr)) or np.any(arr < 0):
                    raise FimSchemaError(f"elementwise[{name!r}] has negative or non-finite entries")

    def reduction(self) -> str:
        return str(self.meta.get("reduction", "mean"))


def estimate_fim(model: MicroModel, n_samples: int = 8, seq_len: int = 64,
                 seed: int = 42, model_id: str | None = None) -> FimScores:
    """Average of squared per-sample NLL gradients over uniform random inputs.

    Deterministic given (model, n_samples, seq_len, seed); samples are
    accumulated in index order with float64 arithmetic.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    seq_len = min(seq_len, model.config.seq_len)
    tokens = sample_uniform_tokens(model.config.vocab_size, n_samples, seq_len, seed)
    acc: dict[str, np.ndarray] = {n: np.zeros_like(a) for n, a in model.params.items()}
    for i in range(n_samples):
        grads = model.backward_nll(tokens[i])
        for name, g in grads.items():
            acc[name] += g * g
    elementwise = {n: a / n_samples for n, a in acc.items()}
    if model_id is None:
        from .archive import archive_digest

        model_id = archive_digest(model.to_archive())
    meta = {
        "n_samples": int(n_samples),
        "seq_len": int(seq_len),
        "seed": int(seed),
        "model_id": model_id,
        "reduction": "mean",
    }
    return FimScores(elementwise=elementwise, per_layer={}, meta=meta)


def reduce_per_layer(scores: FimScores, topology: ModelTopology,
                     reduction: str | None = None) -> FimScores:
    """Fill ``per_layer`` from ``elementwise`` over coefficient-set parameters."""
    if scores.elementwise is None:
        raise ValueError("cannot reduce: elementwise estimates are not present")
    reduction = reduction or scores.reduction()
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    per_layer = _reduce(scores.elementwise, topology, reduction)
    meta = dict(scores.meta)
    meta["reduction"] = reduction
    return FimScores(elementwise=scores.elementwise, per_layer=per_layer, meta=meta)


def _reduce(elementwise: dict[str, np.ndarray], topology: ModelTopology,
            reduction: str) -> dict[int, float]:
    sums: dict[int, float] = {}
    counts: dict[int, int] = {}
    for name in sorted(elementwise):
        if name not in topology.records:
            continue
        rec = topology[name]
        if not rec.in_coefficient_set:
            continue
        arr = np.asarray(elementwise[name], dtype=np.float64)
        sums[rec.layer_index] = sums.get(rec.layer_index, 0.0) + float(arr.sum(dtype=np.float64))
        counts[rec.layer_index] = counts.get(rec.layer_index, 0) + arr.size
    if reduction == "mean":
        return {l: sums[l] / counts[l] for l in sorted(sums)}
    return {l: sums[l] for l in sorted(sums)}


def verify_consistency(scores: FimScores, topology: ModelTopology, rtol: float = 1e-7) -> None:
    """Check stored per-layer values against recomputation from elementwise."""
    if scores.elementwise is None or not scores.per_layer:
        return
    recomputed = _reduce(scores.elementwise, topology, scores.reduction())
    if sorted(recomputed) != sorted(scores.per_layer):
        raise FimSchemaError(
            f"per_layer layer set {sorted(scores.per_layer)} does not match "
            f"elementwise reduction {sorted(recomputed)}"
        )
    for layer, value in recomputed.items():
        stored = scores.per_layer[layer]
        if abs(stored - value) > rtol * max(abs(value), 1e-300):
            raise FimSchemaError(
                f"per_layer[{layer}] = {stored} inconsistent with elementwise "
                f"recomputation {value}"
            )


def export_fim(scores: FimScores, path: str | Path,
               elementwise_path: str | Path | None = None) -> None:
    """Write the interchange JSON (and optionally the elementwise archive).

    When the elementwise archive is written, stored per-layer values are the
    ones recomputed from the f32-rounded archive so the file pair is
    self-consistent to float64 precision.
    """
    scores.validate()
    path = Path(path)
    per_layer = dict(scores.per_layer)
    rel: str | None = None
    if elementwise_path is not None:
        if scores.elementwise is None:
            raise ValueError("no elementwise estimates to export")
        elementwise_path = Path(elementwise_path)
        archive = TensorArchive({n: a.astype(np.float32) for n, a in scores.elementwise.items()})
        write_archive(archive, elementwise_path)
        rounded = FimScores(
            elementwise={n: a.astype(np.float64) for n, a in archive.items()},
            meta=dict(scores.meta),
        )
        topology = parse_topology(archive)
        per_layer = _reduce(rounded.elementwise, topology, scores.reduction())
        try:
            rel = str(elementwise_path.relative_to(path.parent))
        except ValueError:
            rel = str(elementwise_path)
    doc = {
        "meta": scores.meta,
        "per_layer": {str(l): per_layer[l] for l in sorted(per_layer)},
        "elementwise_archive": rel,
    }
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    tmp.replace(path)


def import_fim(path: str | Path, scheme: NamingScheme | None = None) -> FimScores:
    """Load and validate an interchange file (schema + consistency checks)."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FimSchemaError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or "meta" not in doc or "per_layer" not in doc:
        raise FimSchemaError(f"{path}: missing required top-level keys 'meta'/'per_layer'")
    meta = doc["meta"]
    if not isinstance(meta, dict):
        raise FimSchemaError(f"{path}: meta must be an object")
    per_layer_raw = doc["per_layer"]
    if not isinstance(per_layer_raw, dict):
        raise FimSchemaError(f"{path}: per_layer must be an object")
    try:
        per_layer = {int(k): float(v) for k, v in per_layer_raw.items()}
    except (TypeError, ValueError) as exc:
        raise FimSchemaError(f"{path}: per_layer keys/values malformed: {exc}") from exc

    elementwise = None
    topology = None
    rel = doc.get("elementwise_archive")
    if rel:
        archive_path = Path(rel)
        if not archive_path.is_absolute():
            archive_path = path.parent / archive_path
        archive = load_archive(archive_path)
        elementwise = {n: a.astype(np.float64) for n, a in archive.items()}
        topology = parse_topology(archive, scheme or NamingScheme())

    scores = FimScores(elementwise=elementwise, per_layer=per_layer, meta=meta)
    scores.validate()
    if topology is not None:
        verify_consistency(scores, topology)
    return scores
