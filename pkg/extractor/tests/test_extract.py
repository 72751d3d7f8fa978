import json

import numpy as np
import pytest

from fim_extractor.archive import load_tensors, save_tensors
from fim_extractor.cli import main
from fim_extractor.extract import (
    ExtractorConfig,
    extract,
    in_coefficient_set,
    layer_index,
    reduce_per_layer,
    sample_tokens,
)


class TestSharedRules:
    def test_token_stream_matches_contract(self):
        # the documented sampling rule: numpy PCG64, uniform over vocab
        want = np.random.default_rng(42).integers(0, 64, size=(8, 64), dtype=np.int64)
        got = sample_tokens(64, 8, 64, 42)
        assert np.array_equal(got, want)

    def test_coefficient_set_rules(self):
        assert in_coefficient_set("model.layers.3.mlp.gate_proj.weight")
        assert in_coefficient_set("model.layers.0.self_attn.q_proj.weight")
        assert not in_coefficient_set("model.embed_tokens.weight")
        assert not in_coefficient_set("lm_head.weight")
        assert not in_coefficient_set("model.norm.weight")
        assert not in_coefficient_set("model.layers.0.input_layernorm.weight")
        assert not in_coefficient_set("model.layers.0.post_attention_layernorm.weight")
        assert layer_index("model.layers.17.mlp.up_proj.weight") == 17
        assert layer_index("model.embed_tokens.weight") is None

    def test_reduce_is_elementwise_mean(self):
        per_layer = reduce_per_layer({
            "model.layers.0.mlp.up_proj.weight": np.array([1.0, 3.0]),
            "model.layers.0.self_attn.q_proj.weight": np.array([5.0, 7.0]),
            "model.layers.0.input_layernorm.weight": np.array([100.0]),
        })
        assert per_layer == {0: 4.0}


class TestArchiveIo:
    def test_round_trip(self, tmp_path):
        tensors = {"a.weight": np.arange(6, dtype=np.float32).reshape(2, 3)}
        path = tmp_path / "t.safetensors"
        save_tensors(tensors, path)
        back = load_tensors(path)
        assert np.array_equal(back["a.weight"], tensors["a.weight"])

    def test_reads_primary_archives(self, micro_checkpoint):
        tensors = load_tensors(micro_checkpoint)
        assert "model.embed_tokens.weight" in tensors
        assert all(a.dtype == np.float32 for a in tensors.values())


class TestMicroExtraction:
    def test_emits_valid_interchange(self, micro_checkpoint, tmp_path):
        out = tmp_path / "fim.json"
        doc = extract(ExtractorConfig(model=str(micro_checkpoint), n_samples=2,
                                      seq_len=16, out=str(out)))
        assert out.exists()
        assert doc["meta"]["n_samples"] == 2
        assert doc["meta"]["seed"] == 42
        assert sorted(doc["per_layer"]) == ["0", "1", "2", "3"]
        assert all(v >= 0.0 for v in doc["per_layer"].values())

    def test_deterministic_given_seed(self, micro_checkpoint, tmp_path):
        docs = []
        for d in ("a", "b"):
            out = tmp_path / d
            out.mkdir()
            extract(ExtractorConfig(model=str(micro_checkpoint), n_samples=2,
                                    seq_len=16, out=str(out / "fim.json"),
                                    elementwise_out=str(out / "ew.st")))
            docs.append(((out / "fim.json").read_bytes(), (out / "ew.st").read_bytes()))
        assert docs[0] == docs[1]

    def test_elementwise_consistent_with_per_layer(self, micro_checkpoint, tmp_path):
        out = tmp_path / "fim.json"
        ew = tmp_path / "ew.st"
        doc = extract(ExtractorConfig(model=str(micro_checkpoint), n_samples=2,
                                      seq_len=16, out=str(out),
                                      elementwise_out=str(ew)))
        stored = load_tensors(ew)
        recomputed = reduce_per_layer({n: a.astype(np.float64) for n, a in stored.items()})
        for layer, value in recomputed.items():
            assert doc["per_layer"][str(layer)] == pytest.approx(value, rel=1e-12)

    def test_cli_smoke(self, micro_checkpoint, tmp_path):
        out = tmp_path / "fim.json"
        assert main(["--model", str(micro_checkpoint), "--n", "2",
                     "--seq-len", "16", "--out", str(out)]) == 0
        assert json.loads(out.read_text())["meta"]["n_samples"] == 2

    def test_cli_missing_model(self, tmp_path):
        assert main(["--model", str(tmp_path / "nope.st"),
                     "--out", str(tmp_path / "fim.json")]) == 2


class TestHfExtraction:
    def test_tiny_model_end_to_end(self, tiny_hf_model, tmp_path):
        out = tmp_path / "fim.json"
        doc = extract(ExtractorConfig(model=str(tiny_hf_model), n_samples=2,
                                      seq_len=24, out=str(out)))
        assert doc["per_layer"].keys() == {"0", "1"}
        assert all(v > 0.0 for v in doc["per_layer"].values())

    def test_hf_deterministic(self, tiny_hf_model, tmp_path):
        docs = []
        for d in ("a", "b"):
            out = tmp_path / d
            out.mkdir()
            docs.append(extract(ExtractorConfig(model=str(tiny_hf_model), n_samples=2,
                                                seq_len=16, out=str(out / "fim.json"))))
        assert docs[0]["per_layer"] == docs[1]["per_layer"]
