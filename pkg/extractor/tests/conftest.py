import subprocess
import sys

import pytest


def run_primary(*args) -> None:
    """Invoke the merging toolkit through its CLI (the external interface)."""
    proc = subprocess.run(
        [sys.executable, "-m", "fimmerge", *map(str, args)],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr


@pytest.fixture(scope="session")
def micro_checkpoint(tmp_path_factory):
    """A micro checkpoint produced by the primary toolkit."""
    root = tmp_path_factory.mktemp("shared")
    path = root / "micro.safetensors"
    run_primary("make-micro", "--preset", "init", "--out", path)
    return path


@pytest.fixture(scope="session")
def primary_fim(micro_checkpoint):
    """The primary toolkit's own Fisher scores for the shared checkpoint."""
    out = micro_checkpoint.parent / "fim_primary.json"
    run_primary("fim", "--model", micro_checkpoint, "--out", out)
    return out


@pytest.fixture(scope="session")
def tiny_hf_model(tmp_path_factory):
    """A tiny randomly initialized causal LM saved in the HF layout."""
    transformers = pytest.importorskip("transformers")
    import torch

    torch.manual_seed(0)
    config = transformers.LlamaConfig(
        vocab_size=128, hidden_size=32, intermediate_size=64,
        num_hidden_layers=2, num_attention_heads=2, num_key_value_heads=2,
        max_position_embeddings=64,
    )
    model = transformers.LlamaForCausalLM(config)
    path = tmp_path_factory.mktemp("hf") / "tiny-llama"
    model.save_pretrained(path)
    return path
