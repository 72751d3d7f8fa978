"""Diagonal Fisher extraction emitting the fimmerge interchange JSON.

The estimate is data-free: token sequences are sampled i.i.d. uniformly
over the vocabulary with ``numpy.random.default_rng(seed)`` (the sampling
rule is part of the interchange contract, so both implementations see the
same tokens for the same seed), the mean next-token NLL of each sequence
is backpropagated, and squared gradients are averaged over samples. The
per-layer scalar is the mean of the elementwise estimate over each layer's
attention/mlp/gate tensors, excluding embeddings, norms, and the LM head.

Two checkpoint kinds are supported:

* micro: a shared-format archive with its JSON config next to it,
  re-executed in torch (float64);
* hf: any causal LM directory loadable by ``transformers`` (float32,
  sequential samples to keep peak memory at one backward pass).
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .archive import load_tensors, save_tensors
from .micro import TorchMicroModel, load_micro_config

_LAYER_RE = re.compile(r"layers\.(\d+)\.")
_EXCLUDE = ("embed", "lm_head", "norm")


@dataclass
class ExtractorConfig:
    model: str
    n_samples: int = 8
    seq_len: int = 64
    seed: int = 42
    out: str = "fim.json"
    elementwise_out: str | None = None
    device: str = "cpu"
    model_kind: str = "auto"  # auto | micro | hf
    extra_meta: dict = field(default_factory=dict)

    def resolve_kind(self) -> str:
        if self.model_kind != "auto":
            return self.model_kind
        return "hf" if Path(self.model).is_dir() else "micro"


def sample_tokens(vocab_size: int, n: int, seq_len: int, seed: int) -> np.ndarray:
    # interchange contract: numpy PCG64 stream, uniform over the vocabulary
    rng = np.random.default_rng(seed)
    return rng.integers(0, vocab_size, size=(n, seq_len), dtype=np.int64)


def layer_index(name: str) -> int | None:
    m = _LAYER_RE.search(name)
    return int(m.group(1)) if m else None


def in_coefficient_set(name: str) -> bool:
    if layer_index(name) is None:
        return False
    return not any(k in name.lower() for k in _EXCLUDE)


def reduce_per_layer(elementwise: dict[str, np.ndarray]) -> dict[int, float]:
    sums: dict[int, float] = {}
    counts: dict[int, int] = {}
    for name in sorted(elementwise):
        if not in_coefficient_set(name):
            continue
        layer = layer_index(name)
        arr = np.asarray(elementwise[name], dtype=np.float64)
        sums[layer] = sums.get(layer, 0.0) + float(arr.sum(dtype=np.float64))
        counts[layer] = counts.get(layer, 0) + arr.size
    return {l: sums[l] / counts[l] for l in sorted(sums)}


def _accumulate_micro(config: ExtractorConfig) -> tuple[dict[str, np.ndarray], int]:
    tensors = load_tensors(config.model)
    micro = TorchMicroModel(load_micro_config(config.model), tensors, device=config.device)
    seq_len = min(config.seq_len, int(micro.config["seq_len"]))
    tokens = sample_tokens(micro.vocab_size, config.n_samples, seq_len, config.seed)
    acc = {n: np.zeros(np.asarray(t).shape) for n, t in tensors.items()}
    for i in range(config.n_samples):
        for name, sq in micro.squared_gradients(tokens[i]).items():
            acc[name] += sq
    return {n: a / config.n_samples for n, a in acc.items()}, seq_len


def _accumulate_hf(config: ExtractorConfig) -> tuple[dict[str, np.ndarray], int]:
    from transformers import AutoModelForCausalLM

    model = AutoModelForCausalLM.from_pretrained(config.model)
    model.to(config.device)
    model.eval()
    vocab_size = int(model.config.vocab_size)
    max_pos = int(getattr(model.config, "max_position_embeddings", config.seq_len))
    seq_len = min(config.seq_len, max_pos)
    tokens = sample_tokens(vocab_size, config.n_samples, seq_len, config.seed)

    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    acc = {n: np.zeros(tuple(p.shape)) for n, p in named}
    for i in range(config.n_samples):
        model.zero_grad(set_to_none=True)
        ids = torch.tensor(tokens[i : i + 1], device=config.device)
        out = model(input_ids=ids, labels=ids)
        out.loss.backward()
        for name, p in named:
            if p.grad is not None:
                acc[name] += p.grad.detach().cpu().numpy().astype(np.float64) ** 2
    model.zero_grad(set_to_none=True)
    return {n: a / config.n_samples for n, a in acc.items()}, seq_len


def extract(config: ExtractorConfig) -> dict:
    """Run the extraction and write the interchange JSON (and optionally the
    elementwise archive). Returns the written document."""
    kind = config.resolve_kind()
    if kind == "micro":
        elementwise, seq_len = _accumulate_micro(config)
    elif kind == "hf":
        elementwise, seq_len = _accumulate_hf(config)
    else:
        raise ValueError(f"unknown model kind {kind!r}")

    rel: str | None = None
    out_path = Path(config.out)
    if config.elementwise_out:
        ew_path = Path(config.elementwise_out)
        save_tensors(elementwise, ew_path)
        # make the file pair self-consistent: per-layer values are computed
        # from the f32-rounded archive that readers will actually see
        elementwise = {n: a.astype(np.float32).astype(np.float64)
                       for n, a in elementwise.items()}
        try:
            rel = str(ew_path.relative_to(out_path.parent))
        except ValueError:
            rel = str(ew_path)

    per_layer = reduce_per_layer(elementwise)
    doc = {
        "meta": {
            "n_samples": int(config.n_samples),
            "seq_len": int(seq_len),
            "seed": int(config.seed),
            "model_id": str(config.model),
            "reduction": "mean",
            "extractor": "fim-extractor/torch",
            **config.extra_meta,
        },
        "per_layer": {str(l): per_layer[l] for l in sorted(per_layer)},
        "elementwise_archive": rel,
    }
    tmp = out_path.with_name(out_path.name + ".tmp")
    tmp.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    tmp.replace(out_path)
    return doc
