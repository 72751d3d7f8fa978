import json

import numpy as np

from fimmerge.archive import TensorArchive
from fimmerge.topology import NamingScheme, parse_topology


def _archive_of(*names):
    return TensorArchive({n: np.zeros(2, np.float32) for n in names})


class TestClassification:
    def test_gate_projection(self):
        topo = parse_topology(_archive_of("model.layers.3.mlp.gate_proj.weight"))
        rec = topo["model.layers.3.mlp.gate_proj.weight"]
        assert rec.layer_index == 3
        assert rec.category == "gate_projection"
        assert rec.in_coefficient_set

    def test_embedding_excluded(self):
        rec = parse_topology(_archive_of("model.embed_tokens.weight"))["model.embed_tokens.weight"]
        assert rec.layer_index is None
        assert rec.category == "embedding"
        assert not rec.in_coefficient_set

    def test_lm_head_excluded(self):
        rec = parse_topology(_archive_of("lm_head.weight"))["lm_head.weight"]
        assert not rec.in_coefficient_set

    def test_final_norm_excluded_without_layer(self):
        rec = parse_topology(_archive_of("model.norm.weight"))["model.norm.weight"]
        assert rec.category == "layernorm"
        assert rec.layer_index is None
        assert not rec.in_coefficient_set

    def test_per_layer_norm_keeps_layer_but_not_in_set(self):
        # merged with the host layer's coefficient, excluded from statistics
        name = "model.layers.1.input_layernorm.weight"
        rec = parse_topology(_archive_of(name))[name]
        assert rec.layer_index == 1
        assert rec.category == "layernorm"
        assert not rec.in_coefficient_set

    def test_norm_keywords_beat_block_keywords(self):
        # "post_attention_layernorm" contains an attention keyword but is a norm
        for name in ("model.layers.0.post_attention_layernorm.weight",
                     "model.layers.0.self_attn.q_norm.weight"):
            rec = parse_topology(_archive_of(name))[name]
            assert rec.category == "layernorm", name
            assert not rec.in_coefficient_set

    def test_attention_and_mlp_in_set(self):
        topo = parse_topology(_archive_of(
            "model.layers.0.self_attn.q_proj.weight",
            "model.layers.0.mlp.up_proj.weight",
        ))
        assert all(topo[n].in_coefficient_set for n in topo.records)

    def test_unmatched_defaults_to_other(self):
        topo = parse_topology(_archive_of("mystery.weight"))
        rec = topo["mystery.weight"]
        assert rec.category == "other"
        assert not rec.in_coefficient_set
        assert "mystery.weight" in topo.unmatched


class TestTotality:
    def test_every_parameter_classified(self, default_model):
        archive = default_model.to_archive()
        topo = parse_topology(archive)
        assert len(topo) == len(archive)
        assert topo.unmatched == []
        assert topo.layers() == [0, 1, 2, 3]
        # per layer: q/k/v/o projections plus gate/up/down, norms excluded
        assert len(topo.coefficient_names(0)) == 7
        assert not any("norm" in n for n in topo.coefficient_names())

    def test_report_shape(self, default_model):
        topo = parse_topology(default_model.to_archive())
        rep = topo.report()
        assert rep["n_parameters"] == len(default_model.params)
        assert rep["n_coefficient_set"] == len(topo.coefficient_names())


class TestSchemeConfig:
    def test_from_json_file(self, tmp_path):
        cfg = tmp_path / "scheme.json"
        cfg.write_text(json.dumps({
            "layer_pattern": r"blk\.(\d+)\.",
            "category_keywords": {"attention": ["attn"], "mlp": ["ffn"]},
        }))
        scheme = NamingScheme.from_file(cfg)
        topo = parse_topology(_archive_of("blk.7.ffn.w1"), scheme)
        rec = topo["blk.7.ffn.w1"]
        assert rec.layer_index == 7
        assert rec.category == "mlp"
        assert rec.in_coefficient_set

    def test_from_toml_file(self, tmp_path):
        cfg = tmp_path / "scheme.toml"
        cfg.write_text(
            'layer_pattern = "h\\\\.(\\\\d+)\\\\."\n'
            "[category_keywords]\n"
            'attention = ["attn"]\n'
            'embedding = ["wte"]\n'
        )
        scheme = NamingScheme.from_file(cfg)
        topo = parse_topology(_archive_of("h.2.attn.c_attn.weight", "wte.weight"), scheme)
        assert topo["h.2.attn.c_attn.weight"].layer_index == 2
        assert topo["wte.weight"].category == "embedding"

    def test_keyword_precedence_gate_before_mlp(self):
        name = "model.layers.0.mlp.gate_proj.weight"
        assert parse_topology(_archive_of(name))[name].category == "gate_projection"
