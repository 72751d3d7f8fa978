"""Torch re-implementation of the micro decoder checkpoint format.

Mirrors the reference architecture exactly: token + learned position
embeddings, per layer a pre-RMSNorm single-head causal attention block and
a pre-RMSNorm SiLU-gated MLP with residual connections, a final RMSNorm,
and an untied LM head. Computation runs in float64 so cross-implementation
comparisons are limited by the shared f32 checkpoint, not by arithmetic.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch


def load_micro_config(archive_path: str | Path) -> dict:
    cfg_path = Path(str(archive_path) + ".config.json")
    if not cfg_path.exists():
        raise FileNotFoundError(f"micro checkpoint config not found at {cfg_path}")
    return json.loads(cfg_path.read_text())


class TorchMicroModel:
    def __init__(self, config: dict, tensors: dict[str, np.ndarray], device: str = "cpu"):
        self.config = config
        self.device = torch.device(device)
        self.params: dict[str, torch.Tensor] = {
            name: torch.tensor(np.asarray(arr, dtype=np.float64), device=self.device,
                               requires_grad=True)
            for name, arr in tensors.items()
        }

    @property
    def vocab_size(self) -> int:
        return int(self.config["vocab_size"])

    def _rmsnorm(self, x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        eps = float(self.config.get("rms_norm_eps", 1e-6))
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + eps) * w

    def mean_nll(self, tokens: np.ndarray) -> torch.Tensor:
        """Mean next-token NLL of one sequence under teacher forcing."""
        p = self.params
        t = int(tokens.shape[0])
        ids = torch.tensor(np.asarray(tokens, dtype=np.int64), device=self.device)
        d = int(self.config["hidden_dim"])
        scale = d ** -0.5

        x = p["model.embed_tokens.weight"][ids] + p["model.embed_positions.weight"][:t]
        mask = torch.triu(torch.full((t, t), float("-inf"), dtype=torch.float64,
                                     device=self.device), diagonal=1)
        for i in range(int(self.config["n_layers"])):
            pre = f"model.layers.{i}."
            a = self._rmsnorm(x, p[pre + "input_layernorm.weight"])
            q = a @ p[pre + "self_attn.q_proj.weight"].T
            k = a @ p[pre + "self_attn.k_proj.weight"].T
            v = a @ p[pre + "self_attn.v_proj.weight"].T
            attn = torch.softmax(q @ k.T * scale + mask, dim=-1)
            x = x + (attn @ v) @ p[pre + "self_attn.o_proj.weight"].T

            b = self._rmsnorm(x, p[pre + "post_attention_layernorm.weight"])
            g = b @ p[pre + "mlp.gate_proj.weight"].T
            u = b @ p[pre + "mlp.up_proj.weight"].T
            x = x + (torch.nn.functional.silu(g) * u) @ p[pre + "mlp.down_proj.weight"].T

        y = self._rmsnorm(x, p["model.norm.weight"])
        logits = y @ p["lm_head.weight"].T
        return torch.nn.functional.cross_entropy(logits[:-1], ids[1:])

    def squared_gradients(self, tokens: np.ndarray) -> dict[str, np.ndarray]:
        loss = self.mean_nll(tokens)
        names = sorted(self.params)
        grads = torch.autograd.grad(loss, [self.params[n] for n in names],
                                    allow_unused=True)
        out = {}
        for name, g in zip(names, grads):
            if g is None:
                out[name] = np.zeros(tuple(self.params[name].shape))
            else:
                out[name] = g.detach().cpu().numpy().astype(np.float64) ** 2
        return out
