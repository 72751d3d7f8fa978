"""Command-line entry point.

Subcommands:

* ``fim``         estimate diagonal Fisher scores for a checkpoint
* ``merge``       merge a base/tuned checkpoint pair under a plan
* ``verify``      run the numerical verification suites (bound / fisher / quadratic)
* ``analyze-nl``  per-layer nonlinearity scores for a checkpoint pair
* ``make-micro``  generate micro-model fixtures (demo / interchange testing)

Machine-readable results go to files; human-readable summaries go to
stderr. Every run writes a manifest JSON capturing the effective
parameters and input/output digests; rerunning with the same parameters
reproduces the primary outputs byte for byte. Exit codes: 0 success,
1 validation or assertion failure, 2 I/O or format error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .alphas import assign_alphas, build_signal, delta_layer_norms
from .archive import ArchiveError, load_archive
from .fim import FimSchemaError, estimate_fim, export_fim, import_fim, reduce_per_layer
from .merge import MergePlan, MergeValidationError, merge, task_vector, write_report
from .micromodel import MicroModel, MicroModelConfig, make_micro_pair
from .theory import (
    fisher_hessian_check,
    nl_analysis,
    quadratic_coefficient_check,
    quadratic_coefficient_check_micro,
    softmax_toy_check,
    verify_bound,
)
from .numerics import QuadraticScalarFunction
from .topology import NamingScheme, parse_topology

logger = logging.getLogger("fimmerge")

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2


class ValidationFailure(RuntimeError):
    """A check or input validation failed; maps to exit code 1."""


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _write_json(path: Path, doc) -> None:
    _atomic_write_text(Path(path), json.dumps(doc, sort_keys=True, indent=2) + "\n")


def write_manifest(report_dir: Path, command: str, params: dict,
                   inputs: dict[str, Path], outputs: dict[str, Path]) -> Path:
    report_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "package_version": __version__,
        "parameters": params,
        "threads": os.environ.get("FIMMERGE_THREADS", "0"),
        "inputs": {k: {"path": str(p), "sha256": _sha256_file(p)} for k, p in inputs.items()},
        "outputs": {k: {"path": str(p), "sha256": _sha256_file(p)} for k, p in outputs.items()},
    }
    path = report_dir / f"{command.replace('-', '_')}_manifest.json"
    _write_json(path, manifest)
    return path


def _load_model(path: str) -> MicroModel:
    return MicroModel.load(path)


def _load_scheme(path: str | None) -> NamingScheme:
    return NamingScheme.from_file(path) if path else NamingScheme()


def _report_dir(args, default_parent: Path) -> Path:
    return Path(args.report_dir) if args.report_dir else default_parent


# -- subcommands ---------------------------------------------------------------


def cmd_fim(args) -> int:
    model = _load_model(args.model)
    scheme = _load_scheme(args.arch_config)
    topology = parse_topology(model.to_archive(), scheme)
    scores = estimate_fim(model, n_samples=args.n, seq_len=args.seq_len, seed=args.seed)
    scores = reduce_per_layer(scores, topology, reduction=args.reduction)
    out = Path(args.out)
    elementwise_path = None
    if not args.no_elementwise:
        elementwise_path = Path(args.elementwise) if args.elementwise else Path(
            str(out) + ".elementwise.safetensors"
        )
    export_fim(scores, out, elementwise_path)
    outputs = {"fim": out}
    if elementwise_path:
        outputs["elementwise"] = elementwise_path
    write_manifest(
        _report_dir(args, out.parent), "fim",
        {"model": args.model, "n": args.n, "seq_len": args.seq_len, "seed": args.seed,
         "reduction": args.reduction, "arch_config": args.arch_config},
        {"model": Path(args.model)}, outputs,
    )
    print(f"fim: {len(scores.per_layer)} layers -> {out}", file=sys.stderr)
    return EXIT_OK


def cmd_merge(args) -> int:
    base = load_archive(args.base)
    tuned = load_archive(args.tuned)
    scheme = _load_scheme(args.arch_config)
    topology = parse_topology(base, scheme)
    fim = import_fim(args.fim, scheme) if args.fim else None

    if args.plan:
        # a plan file fully determines the merge (schema: MergePlan.to_dict)
        plan = MergePlan.from_dict(json.loads(Path(args.plan).read_text()))
        signal_kind = "plan_file"
    else:
        method = {"ta": "fim_ta", "ties": "fim_ties"}[args.method]
        delta = task_vector(base, tuned)
        norms = delta_layer_norms(delta, topology)
        signal_kind = {
            "fim_x_delta": "fim_times_delta_sq",
            "fim_only": "fim_only",
            "delta_norm": "delta_norm_only",
        }[args.signal]
        signal = build_signal(signal_kind, fim.per_layer if fim else None, norms)
        alphas = assign_alphas(signal, sigmoid_theta=args.alpha_theta)
        plan = MergePlan(
            method=method,
            alphas=alphas,
            trim_ratio=args.trim_ratio,
            gate_factor=args.gate_factor,
            norm_threshold=args.norm_eps,
            probe_seed=args.seed,
            trim_granularity=args.trim_granularity,
            allow_trim_fallback=args.allow_trim_fallback,
        )
    merged, report = merge(base, tuned, plan, fim, topology)
    report["global"]["signal_kind"] = signal_kind
    report["global"]["topology"] = topology.report()

    out = Path(args.out)
    from .archive import write_archive

    write_archive(merged, out)
    report_path = Path(args.report) if args.report else out.with_suffix(out.suffix + ".report.json")
    write_report(report, report_path)
    inputs = {"base": Path(args.base), "tuned": Path(args.tuned)}
    if args.fim:
        inputs["fim"] = Path(args.fim)
    if args.plan:
        inputs["plan"] = Path(args.plan)
    write_manifest(
        _report_dir(args, out.parent), "merge",
        {"base": args.base, "tuned": args.tuned, "fim": args.fim, "plan": args.plan,
         "method": args.method,
         "trim_ratio": args.trim_ratio, "gate_factor": args.gate_factor,
         "norm_eps": args.norm_eps, "signal": args.signal, "alpha_theta": args.alpha_theta,
         "trim_granularity": args.trim_granularity, "seed": args.seed,
         "allow_trim_fallback": args.allow_trim_fallback, "arch_config": args.arch_config},
        inputs, {"merged": out, "report": report_path},
    )
    alpha_values = plan.alphas.per_layer.values()
    print(
        f"merge[{plan.method}]: {len(base)} tensors, alpha in [{min(alpha_values):.4f}, "
        f"{max(alpha_values):.4f}], fallback {plan.alphas.fallback_alpha:.4f} -> {out}",
        file=sys.stderr,
    )
    return EXIT_OK


def cmd_verify(args) -> int:
    report_path = Path(args.report) if args.report else Path(f"verify_{args.mode}.json")
    failures: list[str] = []

    if args.mode == "bound":
        results = verify_bound(trials=args.trials, delta_scale=args.delta_scale,
                               seed=args.seed)
        doc = {"mode": "bound", "trials": [r.to_dict() for r in results],
               "n_passed": sum(r.passed for r in results), "n_trials": len(results)}
        for r in results:
            status = "pass" if r.passed else "FAIL"
            print(
                f"trial seed={r.seed}: sup|H|={r.sup_hessian_norm:.4e} "
                f"slack={r.cubic_slack_estimate:.2e} max E/bound="
                f"{max(e / b if b else 0.0 for e, b in zip(r.measured_error, r.bound)):.3f} "
                f"[{status}]",
                file=sys.stderr,
            )
        if doc["n_passed"] != doc["n_trials"]:
            failures.append(f"bound held in {doc['n_passed']}/{doc['n_trials']} trials")
        if args.csv:
            _write_trials_csv(Path(args.csv), results)

    elif args.mode == "fisher":
        toy = softmax_toy_check()
        from .micromodel import make_fisher_corpus, train_to_convergence

        corpus = make_fisher_corpus(seed=args.seed + 1)
        model = MicroModel.initialize(MicroModelConfig(seed=args.seed))
        trained = train_to_convergence(model, corpus, steps=4000, lr=0.7)
        topology = parse_topology(trained.model.to_archive())
        check = fisher_hessian_check(trained.model, corpus, topology,
                                     coords_per_layer=args.coords_per_layer,
                                     seed=args.seed)
        doc = {
            "mode": "fisher",
            "softmax_toy_max_gap": toy["max_gap"],
            "micro": {k: v for k, v in check.items()
                      if not isinstance(v, dict)} | {
                "per_layer_fisher": {str(k): v for k, v in check["per_layer_fisher"].items()},
                "per_layer_hessian": {str(k): v for k, v in check["per_layer_hessian"].items()},
            },
        }
        print(f"softmax toy: max |F - H| gap = {toy['max_gap']:.3e}", file=sys.stderr)
        print(
            f"trained micro: rank corr = {check['per_layer_rank_correlation']:.4f}, "
            f"mean relative gap = {check['mean_relative_gap']:.4f}, "
            f"grad norm = {check['grad_norm']:.3e}",
            file=sys.stderr,
        )
        if toy["max_gap"] >= 1e-3:
            failures.append(f"softmax toy gap {toy['max_gap']:.3e} >= 1e-3")
        if check["per_layer_rank_correlation"] < 0.8:
            failures.append(
                f"micro rank correlation {check['per_layer_rank_correlation']:.3f} < 0.8"
            )

    elif args.mode == "quadratic":
        rng = np.random.default_rng(args.seed)
        dim = 12
        m = rng.standard_normal((dim, dim))
        fn = QuadraticScalarFunction(m + m.T)
        delta = rng.standard_normal(dim)
        dev_quad = quadratic_coefficient_check(fn, rng.standard_normal(dim), delta)
        model = MicroModel.initialize(MicroModelConfig(seed=args.seed))
        from .micromodel import sample_uniform_tokens

        probes = sample_uniform_tokens(model.config.vocab_size, 4, 24, args.seed + 1)
        drng = np.random.default_rng(args.seed + 2)
        dvec = drng.standard_normal(model.num_params())
        dvec *= args.delta_scale / np.linalg.norm(dvec)
        dev_micro = quadratic_coefficient_check_micro(model, _flat_to_delta(model, dvec), probes)
        doc = {"mode": "quadratic", "quadratic_fixture_deviation": dev_quad,
               "micro_small_delta_deviation": dev_micro,
               "delta_scale": args.delta_scale}
        print(
            f"alpha(1-alpha) profile deviation: quadratic fixture {dev_quad:.3e}, "
            f"micro (|delta|={args.delta_scale}) {dev_micro:.3e}",
            file=sys.stderr,
        )
        if dev_quad >= 1e-9:
            failures.append(f"quadratic fixture deviation {dev_quad:.3e} >= 1e-9")
        if dev_micro >= 0.05:
            failures.append(f"micro profile deviation {dev_micro:.3e} >= 0.05")

    else:  # pragma: no cover - argparse restricts choices
        raise ValidationFailure(f"unknown mode {args.mode}")

    doc["failures"] = failures
    _write_json(report_path, doc)
    write_manifest(
        _report_dir(args, report_path.parent), f"verify-{args.mode}",
        {"mode": args.mode, "trials": args.trials, "delta_scale": args.delta_scale,
         "seed": args.seed}, {}, {"report": report_path},
    )
    if failures:
        for f in failures:
            print(f"FAIL: {f}", file=sys.stderr)
        return EXIT_VALIDATION
    print(f"verify {args.mode}: all checks passed -> {report_path}", file=sys.stderr)
    return EXIT_OK


def _flat_to_delta(model: MicroModel, dvec: np.ndarray) -> dict:
    from .micromodel import unflatten_params

    return unflatten_params(model.params, dvec)


def _write_trials_csv(path: Path, results) -> None:
    rows = []
    for r in results:
        for a, e, b in zip(r.alpha_grid, r.measured_error, r.bound):
            rows.append({"seed": r.seed, "alpha": a, "error": e, "bound": b,
                         "slack": r.cubic_slack_estimate, "passed": r.passed})
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def cmd_analyze_nl(args) -> int:
    base = _load_model(args.base)
    tuned = _load_model(args.tuned)
    if base.config != tuned.config:
        raise ValidationFailure("base and tuned configs differ")
    topology = parse_topology(base.to_archive(), _load_scheme(args.arch_config))
    records, corr = nl_analysis(base, tuned, topology, alpha=args.alpha,
                                n_probes=args.probes, seed=args.seed)
    out = Path(args.out)
    with out.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "nl_score", "relative_error"])
        for r in records:
            writer.writerow([
                r.layer_index,
                "" if r.nl_score is None else repr(r.nl_score),
                "" if r.relative_merge_error is None else repr(r.relative_merge_error),
            ])
    if args.plot_data:
        lines = ["# layer nl_score relative_error"]
        for r in records:
            lines.append(
                f"{r.layer_index} {r.nl_score if r.nl_score is not None else 'nan'} "
                f"{r.relative_merge_error if r.relative_merge_error is not None else 'nan'}"
            )
        _atomic_write_text(Path(args.plot_data), "\n".join(lines) + "\n")
    write_manifest(
        _report_dir(args, out.parent), "analyze-nl",
        {"base": args.base, "tuned": args.tuned, "alpha": args.alpha,
         "probes": args.probes, "seed": args.seed,
         "pearson_r": corr},
        {"base": Path(args.base), "tuned": Path(args.tuned)}, {"nl_csv": out},
    )
    print(
        f"analyze-nl: {len(records)} layers, pearson(NL, rel. error) = "
        f"{'n/a' if corr is None else f'{corr:.4f}'} -> {out}",
        file=sys.stderr,
    )
    return EXIT_OK


def cmd_make_micro(args) -> int:
    config = MicroModelConfig(
        vocab_size=args.vocab_size, seq_len=args.seq_len, n_layers=args.layers,
        hidden_dim=args.hidden_dim, mlp_hidden_dim=args.mlp_hidden_dim, seed=args.seed,
    )
    outputs: dict[str, Path] = {}
    if args.preset == "init":
        model = MicroModel.initialize(config)
        model.save(args.out)
        outputs["model"] = Path(args.out)
    else:
        pair = make_micro_pair(config, seed=args.seed)
        base_path = Path(args.out)
        tuned_path = Path(args.tuned_out) if args.tuned_out else base_path.with_name(
            base_path.stem + ".tuned" + base_path.suffix
        )
        pair.base.save(base_path)
        pair.tuned.save(tuned_path)
        outputs["base"] = base_path
        outputs["tuned"] = tuned_path
        print(
            f"trained pair: base nll {pair.base_result.final_nll:.4f} "
            f"(|grad| {pair.base_result.final_grad_norm:.2e}), tuned nll "
            f"{pair.tuned_result.final_nll:.4f} "
            f"(|grad| {pair.tuned_result.final_grad_norm:.2e})",
            file=sys.stderr,
        )
    config_paths = {k + "_config": Path(str(p) + ".config.json") for k, p in outputs.items()}
    write_manifest(
        _report_dir(args, Path(args.out).parent), "make-micro",
        {"preset": args.preset, "vocab_size": args.vocab_size, "seq_len": args.seq_len,
         "layers": args.layers, "hidden_dim": args.hidden_dim,
         "mlp_hidden_dim": args.mlp_hidden_dim, "seed": args.seed},
        {}, outputs | config_paths,
    )
    print(f"make-micro[{args.preset}]: wrote {', '.join(str(p) for p in outputs.values())}",
          file=sys.stderr)
    return EXIT_OK


# -- argument parsing -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fimmerge",
        description="Fisher-guided layer-adaptive model merging and its verification lab",
    )
    parser.add_argument("--log-level", default="warning",
                        choices=["debug", "info", "warning", "error"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fim", help="estimate diagonal Fisher scores on random tokens")
    p.add_argument("--model", required=True, help="checkpoint archive (config JSON alongside)")
    p.add_argument("--arch-config", default=None, help="naming-scheme TOML/JSON")
    p.add_argument("--n", type=int, default=8, help="number of random input sequences")
    p.add_argument("--seq-len", type=int, default=64)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--reduction", default="mean", choices=["mean", "sum"])
    p.add_argument("--out", default="fim.json")
    p.add_argument("--elementwise", default=None,
                   help="path for the elementwise archive (default <out>.elementwise.safetensors)")
    p.add_argument("--no-elementwise", action="store_true",
                   help="emit per-layer scalars only")
    p.add_argument("--report-dir", default=None)
    p.set_defaults(func=cmd_fim)

    p = sub.add_parser("merge", help="merge a base/tuned pair")
    p.add_argument("--base", required=True)
    p.add_argument("--tuned", required=True)
    p.add_argument("--fim", default=None, help="FIM interchange JSON")
    p.add_argument("--plan", default=None,
                   help="JSON plan file (MergePlan schema); overrides the plan flags")
    p.add_argument("--method", default="ties", choices=["ta", "ties"])
    p.add_argument("--trim-ratio", type=float, default=0.2)
    p.add_argument("--gate-factor", type=float, default=0.7)
    p.add_argument("--norm-eps", type=float, default=0.05)
    p.add_argument("--signal", default="fim_x_delta",
                   choices=["fim_x_delta", "fim_only", "delta_norm"])
    p.add_argument("--alpha-theta", type=float, default=None,
                   help="override the adaptive sigmoid sharpness")
    p.add_argument("--trim-granularity", default="per_tensor",
                   choices=["per_tensor", "pooled"])
    p.add_argument("--allow-trim-fallback", action="store_true",
                   help="permit trimming from per-layer FIM scalars only")
    p.add_argument("--arch-config", default=None)
    p.add_argument("--seed", type=int, default=0, help="probe seed for norm calibration")
    p.add_argument("--out", required=True)
    p.add_argument("--report", default=None)
    p.add_argument("--report-dir", default=None)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("verify", help="run numerical verification suites")
    p.add_argument("--mode", required=True, choices=["bound", "fisher", "quadratic"])
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--delta-scale", type=float, default=0.05)
    p.add_argument("--coords-per-layer", type=int, default=200)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--report", default=None)
    p.add_argument("--csv", default=None, help="per-trial CSV (bound mode)")
    p.add_argument("--report-dir", default=None)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("analyze-nl", help="per-layer nonlinearity analysis")
    p.add_argument("--base", required=True)
    p.add_argument("--tuned", required=True)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--probes", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--arch-config", default=None)
    p.add_argument("--out", default="nl.csv")
    p.add_argument("--plot-data", default=None, help="gnuplot-style .dat output")
    p.add_argument("--report-dir", default=None)
    p.set_defaults(func=cmd_analyze_nl)

    p = sub.add_parser("make-micro", help="generate micro-model fixtures")
    p.add_argument("--preset", default="init", choices=["init", "pair"])
    p.add_argument("--vocab-size", type=int, default=64)
    p.add_argument("--seq-len", type=int, default=64)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--hidden-dim", type=int, default=16)
    p.add_argument("--mlp-hidden-dim", type=int, default=64)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", required=True)
    p.add_argument("--tuned-out", default=None)
    p.add_argument("--report-dir", default=None)
    p.set_defaults(func=cmd_make_micro)

    return parser


def _apply_thread_bound() -> None:
    """Honor FIMMERGE_THREADS (0 or unset = automatic) by capping the BLAS
    pools; everything else in the toolkit is single-threaded by design."""
    raw = os.environ.get("FIMMERGE_THREADS", "0")
    try:
        bound = int(raw)
    except ValueError:
        logger.warning("ignoring non-integer FIMMERGE_THREADS=%r", raw)
        return
    if bound > 0:
        try:
            import threadpoolctl

            threadpoolctl.threadpool_limits(limits=bound)
        except ImportError:
            logger.warning("threadpoolctl unavailable; FIMMERGE_THREADS not enforced")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    _apply_thread_bound()
    try:
        return args.func(args)
    except (ArchiveError, FimSchemaError, FileNotFoundError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (MergeValidationError, ValidationFailure, ValueError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
