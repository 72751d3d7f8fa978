"""Classify parameter names into transformer layers and categories.

The classifier drives two different decisions downstream:

* ``in_coefficient_set`` — whether a parameter's statistics feed the
  per-layer coefficient assignment. Only per-layer attention / mlp / gate
  tensors qualify; embeddings, the LM head, and every norm weight are
  excluded from the statistics set.
* ``layer_index`` — which per-layer coefficient a parameter receives at
  merge time. Per-layer norm weights keep their host layer's index (they
  are merged with the layer's coefficient even though they contribute no
  statistics); parameters with no layer index fall back to the policy's
  fallback coefficient.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

from .archive import TensorArchive

CATEGORIES = (
    "attention",
    "mlp",
    "gate_projection",
    "layernorm",
    "embedding",
    "lm_head",
    "other",
)

# Categories whose per-layer parameters enter the coefficient statistics set.
_COEFFICIENT_CATEGORIES = frozenset({"attention", "mlp", "gate_projection"})


@dataclass
class NamingScheme:
    """Keyword rules for the common decoder checkpoint naming convention.

    ``category_keywords`` is checked in the order given; the first category
    with a matching substring wins, so more specific keywords (gate_proj)
    must precede the broader ones (mlp).
    """

    layer_pattern: str = r"layers\.(\d+)\."
    category_keywords: dict[str, list[str]] = field(
        default_factory=lambda: {
            "embedding": ["embed"],
            "lm_head": ["lm_head"],
            "gate_projection": ["gate_proj"],
            # norms before attention/mlp: names like post_attention_layernorm
            # or q_norm are norm weights, not block weights
            "layernorm": ["layernorm", "layer_norm", "ln_", "norm"],
            "attention": ["self_attn", "attn", "attention"],
            "mlp": ["mlp", "fc", "feed_forward", "ffn"],
        }
    )

    def __post_init__(self) -> None:
        self._layer_re = re.compile(self.layer_pattern)

    def layer_index(self, name: str) -> int | None:
        m = self._layer_re.search(name)
        return int(m.group(1)) if m else None

    def category(self, name: str) -> str | None:
        lowered = name.lower()
        for category, keywords in self.category_keywords.items():
            if any(k in lowered for k in keywords):
                return category
        return None

    @staticmethod
    def from_file(path: str | Path) -> "NamingScheme":
        path = Path(path)
        if path.suffix == ".toml":
            try:
                import tomllib  # py311+
            except ModuleNotFoundError:
                import tomli as tomllib
            data = tomllib.loads(path.read_text())
        else:
            data = json.loads(path.read_text())
        kwargs = {}
        if "layer_pattern" in data:
            kwargs["layer_pattern"] = str(data["layer_pattern"])
        if "category_keywords" in data:
            kwargs["category_keywords"] = {
                str(cat): [str(k) for k in kws] for cat, kws in data["category_keywords"].items()
            }
        return NamingScheme(**kwargs)


@dataclass(frozen=True)
class ParameterRecord:
    name: str
    layer_index: int | None
    category: str
    in_coefficient_set: bool


@dataclass
class ModelTopology:
    records: dict[str, ParameterRecord]
    unmatched: list[str]

    def __getitem__(self, name: str) -> ParameterRecord:
        return self.records[name]

    def __len__(self) -> int:
        return len(self.records)

    def layers(self) -> list[int]:
        """Sorted indices of layers that own coefficient-set parameters."""
        return sorted({r.layer_index for r in self.records.values() if r.in_coefficient_set})

    def coefficient_names(self, layer: int | None = None) -> list[str]:
        return [
            r.name
            for r in self.records.values()
            if r.in_coefficient_set and (layer is None or r.layer_index == layer)
        ]

    def report(self) -> dict:
        return {
            "n_parameters": len(self.records),
            "n_coefficient_set": sum(r.in_coefficient_set for r in self.records.values()),
            "layers": self.layers(),
            "unmatched": list(self.unmatched),
        }


def parse_topology(archive: TensorArchive, scheme: NamingScheme | None = None) -> ModelTopology:
    """Classify every parameter of ``archive``; total by construction.

    Names matching no category rule default to category ``other`` with
    ``in_coefficient_set=False`` (never dropped); they are listed in
    ``topology.unmatched`` for reporting.
    """
    scheme = scheme or NamingScheme()
    records: dict[str, ParameterRecord] = {}
    unmatched: list[str] = []
    for name in archive.names():
        layer = scheme.layer_index(name)
        category = scheme.category(name)
        if category is None:
            category = "other"
            unmatched.append(name)
        in_set = layer is not None and category in _COEFFICIENT_CATEGORIES
        records[name] = ParameterRecord(name, layer, category, in_set)
    return ModelTopology(records=records, unmatched=unmatched)
