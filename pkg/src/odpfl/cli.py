"""Command-line entry point: ``odpfl <command> [options]``.

Every command accepts ``--config FILE`` (flat ``key = value`` text) and any
number of ``--set key=value`` overrides, which win over the file. Failures
print one line ``error: <kind>: <message>`` to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

from .config import ExperimentConfig, load_config, parse_assignment
from .data import ConfigurationError

EXIT_USAGE = 2
EXIT_FAILURE = 1


def _floats(text: str) -> List[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> List[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _config(args) -> ExperimentConfig:
    return load_config(args.config, [parse_assignment(s) for s in args.set])


def _write(path: Optional[str], text: str) -> None:
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_run(args) -> int:
    from .harness import run_experiment

    cfg = _config(args)
    res = run_experiment(cfg, args.out or cfg.output_dir)
    print(f"method={cfg.train.method} novel_accuracy={res.novel_accuracy:.4f} dir={res.directory}")
    return 0


def cmd_rerun(args) -> int:
    from .harness import rerun_from_manifest

    ok, diff = rerun_from_manifest(args.results, args.out)
    for name, (want, got) in diff.items():
        print(f"mismatch {name} expected={want} got={got}")
    print("identical" if ok else "different")
    return 0 if ok else EXIT_FAILURE


def cmd_grid(args) -> int:
    from .config import config_text
    from .harness import hyperparameter_search

    cfg = _config(args)
    grid = None
    if args.grid:
        grid = {}
        for g in args.grid:
            k, v = parse_assignment(g)
            grid[k] = [x for x in v.split("|") if x]
    res = hyperparameter_search(cfg, grid)
    _write(args.report, res.csv_text())
    if args.best:
        _write(args.best, config_text(res.best))
    print("best " + " ".join(f"{k}={v}" for k, v in res.best_params.items()) + f" val_accuracy={res.best_score:.4f}")
    return 0


def cmd_dp_sweep(args) -> int:
    from .harness import dp_compatible, dp_sweep, sweep_csv

    cfg = _config(args)
    if not args.keep_encoder:
        cfg = dp_compatible(cfg)
    rows, _ = dp_sweep(cfg, _floats(args.epsilons), _ints(args.sizes), args.repeats, args.delta)
    _write(args.out, sweep_csv(rows))
    return 0


def cmd_kl_analysis(args) -> int:
    from .harness import kl_analysis, kl_points, read_manifest, read_metrics, run_kl_study

    if args.results:
        pts = []
        for d in args.results:
            cfg, _ = read_manifest(d)
            pts += kl_points(read_metrics(Path(d) / "metrics.csv"), cfg.federation.alpha, args.method)
        res = kl_analysis(pts)
    else:
        res = run_kl_study(_config(args), _floats(args.alphas), _ints(args.seeds), args.method)
    _write(args.out, res.csv_text())
    print("spearman=" + ("none" if res.correlation is None else f"{res.correlation:.6f}"), file=sys.stderr)
    return 0


def cmd_corrupt_sweep(args) -> int:
    from .harness import corrupt_sweep, corruption_csv

    cfg = _config(args)
    rows = corrupt_sweep(cfg, args.methods.split(","), args.kind, _floats(args.severities))
    _write(args.out, corruption_csv(rows))
    return 0


def cmd_export_embeddings(args) -> int:
    from .formats import read_bundle
    from .harness import export_embeddings, prepare, read_manifest, train_method
    from .protocol import ServerState

    cfg = _config(args)
    if args.results:
        cfg, _ = read_manifest(args.results)
    prep = prepare(cfg)
    if args.results:
        ck = Path(args.results) / "checkpoints"
        state = ServerState(prep.hypernet, prep.encoder, read_bundle(ck / "theta.bin"), read_bundle(ck / "gamma.bin"))
    else:
        if not cfg.train.method.startswith("odpfl_hn"):
            cfg = replace(cfg, train=replace(cfg.train, method="odpfl_hn"))
        trained, prep = train_method(cfg, prep)
        state = trained.state
    clients = prep.federation.train + (prep.novel if args.include_novel else [])
    _write(args.out, export_embeddings(state, clients))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import format_rows, run_all

    rows = run_all(args.instances, args.seed)
    _write(args.out, format_rows(rows))
    return 0 if all(r.passed for r in rows) else EXIT_FAILURE


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="odpfl", description="Personalized federated learning simulator for unlabeled novel clients.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default=None, help="flat key = value config file (default: built-in defaults)")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key; repeatable; wins over --config")

    sp = sub.add_parser("run", help="train one method and write a results directory")
    common(sp)
    sp.add_argument("--out", default=None, help="results directory (default: output_dir from the config)")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("rerun", help="re-run a results directory from its manifest and compare CSV checksums")
    sp.add_argument("results", help="existing results directory")
    sp.add_argument("--out", required=True, help="directory for the fresh run")
    sp.set_defaults(func=cmd_rerun)

    sp = sub.add_parser("grid", help="hyperparameter search on training-client validation accuracy")
    common(sp)
    sp.add_argument("--grid", action="append", default=[], metavar="KEY=V1|V2", help="grid axis; repeatable (default: grid.* keys of the config)")
    sp.add_argument("--report", default=None, help="CSV report path (default: stdout)")
    sp.add_argument("--best", default=None, help="write the winning config here")
    sp.set_defaults(func=cmd_grid)

    sp = sub.add_parser("dp-sweep", help="novel-client accuracy against epsilon and dataset size")
    common(sp)
    sp.add_argument("--epsilons", default="0.1,0.3,1.0", help="comma list (default: 0.1,0.3,1.0)")
    sp.add_argument("--sizes", default="100,300,1000,3000", help="comma list of m (default: 100,300,1000,3000)")
    sp.add_argument("--repeats", type=int, default=10, help="repeats per cell (default: 10)")
    sp.add_argument("--delta", type=float, default=0.01, help="delta (default: 0.01)")
    sp.add_argument("--keep-encoder", action="store_true", help="do not switch the encoder to its certifiable mode")
    sp.add_argument("--out", default=None, help="CSV path (default: stdout)")
    sp.set_defaults(func=cmd_dp_sweep)

    sp = sub.add_parser("kl-analysis", help="novel-client accuracy against label KL to the nearest training client")
    common(sp)
    sp.add_argument("--results", nargs="*", default=None, help="results directories to analyze instead of training")
    sp.add_argument("--alphas", default="0.1,1,10", help="comma list (default: 0.1,1,10)")
    sp.add_argument("--seeds", default="0,1,2", help="comma list (default: 0,1,2)")
    sp.add_argument("--method", default="odpfl_hn", help="method to analyze (default: odpfl_hn)")
    sp.add_argument("--out", default=None, help="CSV path (default: stdout)")
    sp.set_defaults(func=cmd_kl_analysis)

    sp = sub.add_parser("corrupt-sweep", help="novel-client accuracy under feature corruption")
    common(sp)
    sp.add_argument("--methods", default="odpfl_hn,fedavg", help="comma list (default: odpfl_hn,fedavg)")
    sp.add_argument("--kind", default="additive_noise", choices=["additive_noise", "rotation"], help="corruption (default: additive_noise)")
    sp.add_argument("--severities", default="0,0.25,0.5,1.0", help="comma list (default: 0,0.25,0.5,1.0)")
    sp.add_argument("--out", default=None, help="CSV path (default: stdout)")
    sp.set_defaults(func=cmd_corrupt_sweep)

    sp = sub.add_parser("export-embeddings", help="client descriptors as CSV")
    common(sp)
    sp.add_argument("--results", default=None, help="take theta and gamma from this results directory instead of training")
    sp.add_argument("--include-novel", action="store_true", help="append novel clients")
    sp.add_argument("--out", default=None, help="CSV path (default: stdout)")
    sp.set_defaults(func=cmd_export_embeddings)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every differentiable operation")
    sp.add_argument("--instances", type=int, default=20, help="random instances per op (default: 20)")
    sp.add_argument("--seed", type=int, default=0, help="seed (default: 0)")
    sp.add_argument("--out", default=None, help="CSV path (default: stdout)")
    sp.set_defaults(func=cmd_gradcheck)
    return p


def _one_line(exc: BaseException) -> str:
    msg = " ".join(str(exc).split()) or exc.__class__.__name__
    return f"error: {exc.__class__.__name__}: {msg}"


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return int(args.func(args))
    except (ConfigurationError, ValueError, KeyError, OSError, RuntimeError) as exc:
        print(_one_line(exc), file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
