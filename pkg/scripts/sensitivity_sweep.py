#!/usr/bin/env python3
"""Sensitivity sweeps: fixed sigmoid sharpness and sample-count stability.

Two experiments, reported (not asserted):

* Sharpness: merge quality when the adaptive sharpness is replaced by
  fixed values {0.1, 0.2, 0.3}. Quality is the merged model's mean NLL on
  the two training corpora (desk-scale stand-in for benchmark accuracy).
* Sample count: dispersion of per-layer Fisher scores across seeds at
  N in {1, 4, 8}, showing diminishing returns as N grows.

Usage:
    python scripts/sensitivity_sweep.py [--out sweep.json]
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from fimmerge.alphas import assign_alphas, build_signal, delta_layer_norms
from fimmerge.fim import estimate_fim, reduce_per_layer
from fimmerge.merge import MergePlan, merge, task_vector
from fimmerge.micromodel import MicroModel, make_micro_pair
from fimmerge.topology import parse_topology


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", default="sweep.json")
    parser.add_argument("--seed", type=int, default=42)
    parser.add_argument("--thetas", type=float, nargs="*", default=[0.1, 0.2, 0.3])
    parser.add_argument("--n-values", type=int, nargs="*", default=[1, 4, 8])
    parser.add_argument("--n-seeds", type=int, default=16)
    args = parser.parse_args()

    pair = make_micro_pair(seed=args.seed)
    base_arch, tuned_arch = pair.base.to_archive(), pair.tuned.to_archive()
    topology = parse_topology(base_arch)
    fim = reduce_per_layer(estimate_fim(pair.base, seed=args.seed), topology)
    delta = task_vector(base_arch, tuned_arch)
    norms = delta_layer_norms(delta, topology)

    def quality(theta):
        alphas = assign_alphas(
            build_signal("fim_times_delta_sq", fim.per_layer, norms), sigmoid_theta=theta
        )
        plan = MergePlan(method="fim_ties", alphas=alphas, trim_ratio=0.2,
                         probe_seed=args.seed)
        merged_arch, _ = merge(base_arch, tuned_arch, plan, fim, topology)
        merged = MicroModel.from_archive(pair.base.config, merged_arch)
        return {
            "alphas": {str(l): a for l, a in alphas.per_layer.items()},
            "theta_effective": alphas.theta_adapt,
            "nll_base_corpus": merged.forward_nll(pair.corpus_base),
            "nll_tuned_corpus": merged.forward_nll(pair.corpus_tuned),
            "nll_mean": 0.5 * (merged.forward_nll(pair.corpus_base)
                               + merged.forward_nll(pair.corpus_tuned)),
        }

    sharpness = {"adaptive": quality(None)}
    for theta in args.thetas:
        sharpness[str(theta)] = quality(theta)
    means = [row["nll_mean"] for row in sharpness.values()]
    print("sharpness sweep (merged mean NLL across corpora):")
    for name, row in sharpness.items():
        print(f"  theta={name:<9} nll_mean={row['nll_mean']:.4f}")
    print(f"  max - min = {max(means) - min(means):.4f} nats (report only)")

    stability = {}
    for n in args.n_values:
        runs = []
        for s in range(args.n_seeds):
            scores = reduce_per_layer(
                estimate_fim(pair.base, n_samples=n, seq_len=32, seed=1000 + s), topology
            )
            runs.append(scores.per_layer)
        layers = sorted(runs[0])
        rel = []
        for l in layers:
            vals = np.array([r[l] for r in runs])
            rel.append(float(vals.var() / vals.mean() ** 2))
        stability[str(n)] = {"relative_variance_per_layer": dict(zip(map(str, layers), rel)),
                             "relative_variance_mean": float(np.mean(rel))}
        print(f"sample-count N={n}: mean relative variance {np.mean(rel):.4f}")

    Path(args.out).write_text(json.dumps(
        {"sharpness": sharpness, "sample_count_stability": stability},
        indent=2, sort_keys=True) + "\n")
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
