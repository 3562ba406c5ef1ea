"""Command-line surface: generate-and-train bundles, merge, and emit the
analysis CSVs (accuracy tables, conflict matrices, landscape grids,
per-layer sensitivity, hyper-parameter sweeps)."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .bundle import (
    BundleConfig,
    bundle_config_from_mapping,
    load_bundle,
    make_bundle,
    save_bundle,
    _parse_config_file,
)
from .errors import ConfigError, TrustMergeError
from .evaluation import (
    accuracy_table,
    knowledge_conflict,
    landscape,
    merge_bundle,
    write_accuracy_csv,
    write_conflict_csv,
    write_landscape_csv,
)
from .merging import METHODS, AdaConfig, MergeConfig, save_merge_result
from .params import load_checkpoint
from .trust_region import VARIANTS, compute_sensitivity, per_layer_sensitivity, write_per_layer_csv

TAU_GRID = (0.001, 0.002, 0.005, 0.01, 0.02, 0.05)
EXEMPLAR_GRID = (0, 1, 2, 4, 8, 16, 32, 64, 128)


def _merge_config_from_args(args) -> MergeConfig:
    ada = AdaConfig(
        steps=args.ada_steps, learning_rate=args.ada_lr, init_lambda=args.ada_init_lambda
    )
    return MergeConfig(
        method=args.method,
        lam=args.lam,
        tau=args.tau,
        ties_trim_keep=args.ties_trim_keep,
        ties_mask_from_trimmed=args.ties_mask_from_trimmed,
        sensitivity_variant=args.variant,
        ada=ada,
    )


def _add_merge_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--method", choices=METHODS, default="tatr")
    parser.add_argument("--lambda", dest="lam", type=float, default=0.3)
    parser.add_argument("--tau", type=float, default=0.01)
    parser.add_argument("--ties-trim-keep", type=float, default=0.2)
    parser.add_argument("--ties-mask-from-trimmed", action="store_true")
    parser.add_argument("--variant", choices=VARIANTS, default="standard")
    parser.add_argument("--exemplars", type=int, default=None,
                        help="exemplars per task; 0 switches to zero-shot gradients")
    parser.add_argument("--ada-steps", type=int, default=100)
    parser.add_argument("--ada-lr", type=float, default=0.01)
    parser.add_argument("--ada-init-lambda", type=float, default=0.3)


def _write_sidecar(path: Path, kv: dict) -> None:
    with open(path, "w") as fh:
        for k, v in kv.items():
            fh.write(f"{k}={v}\n")


def cmd_gen_train(args) -> int:
    kv: dict[str, str] = {}
    if args.config:
        kv.update(_parse_config_file(Path(args.config)))
    for override in args.set:
        key, sep, value = override.partition("=")
        if not sep:
            raise ConfigError(f"override {override!r} is not key=value")
        kv[key] = value
    if args.seed is not None:
        kv["seed"] = str(args.seed)
    try:
        cfg = bundle_config_from_mapping(kv)
    except (ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc
    bundle = make_bundle(cfg)
    save_bundle(bundle, args.out)
    print(f"bundle written to {args.out}")
    return 0


def cmd_merge(args) -> int:
    bundle = load_bundle(args.bundle)
    cfg = _merge_config_from_args(args)
    result = merge_bundle(bundle, cfg, args.exemplars)
    save_merge_result(result, args.out)
    _write_sidecar(Path(args.out) / "merge_config.txt", {
        "method": cfg.method, "lambda": cfg.lam, "tau": cfg.tau,
        "ties_trim_keep": cfg.ties_trim_keep,
        "ties_mask_from_trimmed": cfg.ties_mask_from_trimmed,
        "variant": cfg.sensitivity_variant, "exemplars": args.exemplars,
        "ada_steps": cfg.ada.steps, "ada_lr": cfg.ada.learning_rate,
        "ada_init_lambda": cfg.ada.init_lambda,
    })
    print(f"merged model written to {args.out}")
    return 0


def _load_merged_results(paths) -> list[tuple[str, object]]:
    from .merging import MergeResult

    out = []
    for p in paths:
        root = Path(p)
        merged_path = root / "merged.tmrg"
        if not merged_path.exists():
            raise TrustMergeError(f"missing artifact {merged_path}")
        prov_path = root / "provenance.txt"
        name = root.name
        if prov_path.exists():
            for line in prov_path.read_text().splitlines():
                if line.startswith("method="):
                    name = line.split("=", 1)[1]
        merged = load_checkpoint(merged_path)
        out.append((name, MergeResult(merged, None, [], {"method": name})))
    return out


def cmd_eval(args) -> int:
    bundle = load_bundle(args.bundle)
    results = _load_merged_results(args.merged)
    rows = accuracy_table(bundle, results)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_accuracy_csv(rows, bundle.num_tasks, out / "accuracy.csv")
    for name, _, avg in rows[2:]:
        print(f"avg_acc={avg}")
    return 0


def cmd_conflict(args) -> int:
    bundle = load_bundle(args.bundle)
    cfg = _merge_config_from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    # loss and accuracy bases are emitted as separate files, never mixed
    for basis in ("loss", "accuracy"):
        report = knowledge_conflict(bundle, cfg, basis, args.exemplars)
        write_conflict_csv(report, out / f"conflict_{basis}.csv")
    print(f"conflict matrices written to {out}")
    return 0


def cmd_landscape(args) -> int:
    bundle = load_bundle(args.bundle)
    task = None if args.task == "total" else int(args.task)
    grid = landscape(bundle, task, args.decomp_fraction)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_landscape_csv(grid, out / "landscape.csv")
    print(f"landscape grid written to {out / 'landscape.csv'}")
    return 0


def cmd_sensitivity(args) -> int:
    bundle = load_bundle(args.bundle)
    omega = compute_sensitivity(
        bundle.gradient_estimates(args.exemplars), bundle.task_vectors(), args.variant
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_per_layer_csv(per_layer_sensitivity(omega), out / "sensitivity_per_layer.csv")
    print(f"per-layer sensitivity written to {out}")
    return 0


def cmd_sweep(args) -> int:
    bundle = load_bundle(args.bundle)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def avg_acc(cfg: MergeConfig, exemplars=None) -> float:
        result = merge_bundle(bundle, cfg, exemplars)
        rows = accuracy_table(bundle, [(cfg.method, result)])
        return rows[-1][2]

    with open(out / "tau_sweep.csv", "w") as fh:
        fh.write("tau,avg_acc\n")
        for tau in TAU_GRID:
            cfg = MergeConfig(method="tatr", lam=args.lam, tau=tau)
            fh.write(f"{tau},{avg_acc(cfg, args.exemplars)!r}\n")

    with open(out / "exemplar_sweep.csv", "w") as fh:
        fh.write("exemplars,avg_acc\n")
        for count in EXEMPLAR_GRID:
            cfg = MergeConfig(method="tatr", lam=args.lam, tau=args.tau)
            fh.write(f"{count},{avg_acc(cfg, count)!r}\n")
    print(f"sweeps written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trustmerge")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-train", help="generate synthetic tasks and train the experts")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_train)

    p = sub.add_parser("merge", help="merge a bundle's experts")
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", required=True)
    _add_merge_flags(p)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("eval", help="accuracy table for merged models")
    p.add_argument("--bundle", required=True)
    p.add_argument("--merged", nargs="+", required=True, help="merge output directories")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("conflict", help="knowledge-conflict matrices")
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", required=True)
    _add_merge_flags(p)
    p.set_defaults(func=cmd_conflict)

    p = sub.add_parser("landscape", help="loss grid over the component plane")
    p.add_argument("--bundle", required=True)
    p.add_argument("--task", default="total", help="task index or 'total'")
    p.add_argument("--decomp-fraction", type=float, default=0.05,
                   help="fraction of lowest |grad*delta| products treated as orthogonal")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_landscape)

    p = sub.add_parser("sensitivity", help="per-layer mean sensitivity")
    p.add_argument("--bundle", required=True)
    p.add_argument("--variant", choices=VARIANTS, default="standard")
    p.add_argument("--exemplars", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("sweep", help="tau and exemplar-count grids")
    p.add_argument("--bundle", required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=0.3)
    p.add_argument("--tau", type=float, default=0.01)
    p.add_argument("--exemplars", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except TrustMergeError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"IoError: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
