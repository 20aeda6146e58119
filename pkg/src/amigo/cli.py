"""Command-line entry point.

Every subcommand that uses a run configuration accepts ``--config FILE``
plus ``--key value`` overrides for any config field (dotted, e.g.
``--model.hidden_dim 32``, or a unique bare name, e.g. ``--epochs 5``).
A flag given without a value is set to true. ``--seed`` may be repeated.

Exit codes: 0 success, 2 configuration or validation error, 3 data error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from .exceptions import AmigoError, ConfigError
from .pipeline import (
    BCP_ALPHAS,
    S_VALUES,
    RunConfig,
    build_graph,
    cross_validate,
    evaluate,
    generate_synthetic,
    load_cohort,
    parse_value,
    sweep_bcp,
    sweep_sparsity,
    train,
)
from .metrics import write_km_csv, write_metrics_json

logger = logging.getLogger("amigo")


def parse_overrides(tokens: list[str]) -> list[tuple[str, str]]:
    """``["--a", "1", "--b=2", "--flag"]`` -> ``[("a", "1"), ("b", "2"), ("flag", "true")]``."""
    out = []
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or len(tok) == 2:
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        elif i + 1 < len(tokens) and not tokens[i + 1].startswith("--"):
            value = tokens[i + 1]
            i += 2
        else:
            value = "true"
            i += 1
        out.append((key.replace("-", "_"), value))
    return out


def resolve_config(args, extra: list[str]) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    for key, value in parse_overrides(extra):
        cfg.set(key, value)
    if args.seed:
        cfg.seeds = list(args.seed)
    if args.out:
        cfg.output_dir = args.out
    return cfg.validate()


def _common(p: argparse.ArgumentParser, with_config: bool = True) -> None:
    p.add_argument("--out", help="output directory (default: config output_dir)")
    if with_config:
        p.add_argument("--config", help="key-value (YAML) run configuration file")
        p.add_argument("--seed", type=int, action="append", help="run seed; repeat for several")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="amigo", description=__doc__.split("\n\n")[0], allow_abbrev=False)
    parser.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-graph", allow_abbrev=False, help="build one graph file per image from a cell table")
    p.add_argument("--cells", required=True, help="cell table CSV")
    p.add_argument("--extents", required=True, help="image extent manifest CSV")
    p.add_argument("--out", required=True, help="directory for .graph files")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--max-edge-len", type=float, default=60.0)

    p = sub.add_parser("generate-synthetic", allow_abbrev=False, help="write a synthetic cohort as CSV files")
    _common(p)

    p = sub.add_parser("train", allow_abbrev=False, help="fit one model on the whole cohort")
    _common(p)

    p = sub.add_parser("cross-validate", allow_abbrev=False, help="k-fold x seeds cross-validation")
    _common(p)
    p.add_argument("--no-checkpoints", action="store_true", help="skip per-fold checkpoints")

    p = sub.add_parser("sweep-sparsity", allow_abbrev=False, help="cross-validate over sparsity ratios")
    _common(p)
    p.add_argument("--s-values", type=float, nargs="+", default=list(S_VALUES))

    p = sub.add_parser("sweep-bcp", allow_abbrev=False, help="cross-validate over batch censored portions")
    _common(p)
    p.add_argument("--alphas", nargs="+", default=[str(a) for a in BCP_ALPHAS], help='numbers or "uniform"')

    p = sub.add_parser("evaluate", allow_abbrev=False, help="score a checkpoint on a cohort")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    return parser


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")

    if args.command == "build-graph":
        if extra:
            raise ConfigError(f"unexpected arguments {extra}")
        paths = build_graph(args.cells, args.extents, args.out, args.k, args.max_edge_len)
        print(f"wrote {len(paths)} graphs to {args.out}")
        return 0

    cfg = resolve_config(args, extra)
    out = _out_dir(cfg)

    if args.command == "generate-synthetic":
        paths = generate_synthetic(cfg, out)
        print("\n".join(str(p) for p in paths.values()))
    elif args.command == "train":
        ckpt, report = train(cfg, out_dir=out)
        report.write(out)
        print(f"checkpoint {ckpt}")
    elif args.command == "cross-validate":
        ckpt_dir = None if args.no_checkpoints else out / "runs" / cfg.digest()
        report = cross_validate(cfg, checkpoint_dir=ckpt_dir)
        report.write(out)
        print(f"C-index {report.c_index_summary}  log-rank p {report.pooled['logrank_p']:.3g}")
    elif args.command == "sweep-sparsity":
        rows = sweep_sparsity(cfg, args.s_values, out_path=out / "sweep_sparsity.csv")
        for r in rows:
            print(f"s={r['s']:.2f}  C={r['c_index_mean']}  GFlops/patient={r['gflops_per_patient']:.4f}")
    elif args.command == "sweep-bcp":
        alphas = [parse_value(a) for a in args.alphas]
        rows = sweep_bcp(cfg, alphas, out_path=out / "sweep_bcp.csv")
        for r in rows:
            print(f"alpha={r['alpha']}  C={r['c_index_mean']}")
    elif args.command == "evaluate":
        cohort = load_cohort(cfg)
        metrics, curves, risks = evaluate(args.checkpoint, cohort)
        write_metrics_json(metrics, out / "metrics.json")
        write_km_csv(curves, out / "km_curves.csv")
        with (out / "risks.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["patient_id", "risk"])
            for pid, r in zip(cohort.patient_ids, risks):
                w.writerow([pid, repr(float(r))])
        print(f"C-index {metrics['c_index']}  log-rank p {metrics['logrank_p']:.3g}")
    return 0


def main(argv: list[str] | None = None) -> int:
    try:
        return run(argv)
    except AmigoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, ArithmeticError) as exc:
        # library-level validation outside the package hierarchy
        print(f"error: {exc}", file=sys.stderr)
        return 4 if isinstance(exc, ArithmeticError) else 2


if __name__ == "__main__":
    sys.exit(main())
