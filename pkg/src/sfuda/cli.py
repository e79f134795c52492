"""Command-line entry point: ``sfuda <command> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 bad arguments or configuration.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from ._validation import ConfigError
from .data import load_dataset, make_synthetic_shift_suite, save_dataset
from .mia import MembershipConfig, run_membership_experiment
from .network import TrainConfig, configure_threads, save_model
from .oracle import Oracle, SourceEnsemble, train_source_ensemble
from .pipeline import (
    ABLATIONS,
    ExperimentConfig,
    PipelineConfig,
    RunReport,
    baseline_cp,
    baseline_gnp,
    evaluate,
    run_pipeline,
    run_synthetic_experiment,
)
from .service import OracleServer, RemoteOracle

log = logging.getLogger("sfuda")


class UsageError(Exception):
    pass


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None


def _experiment_config(args):
    raw = _read_json(args.config) if getattr(args, "config", None) else {}
    try:
        exp = ExperimentConfig.from_dict(raw)
        ablation = getattr(args, "ablation", None)
        if ablation:
            flags = dict(zip(("init_another", "dat_retrain", "target_finetune"), ABLATIONS[ablation]))
            exp.pipeline = PipelineConfig(**{**exp.pipeline.__dict__, **flags})
    except (TypeError, KeyError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from None
    return exp


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=list))


def _open_oracle(args, ensemble_dir=None):
    where = args.oracle or "inproc"
    if where.startswith("tcp://"):
        return RemoteOracle(where)
    if where != "inproc":
        raise ConfigError(f"--oracle must be 'inproc' or tcp://host:port, got {where!r}")
    if ensemble_dir is None:
        return None
    return Oracle(SourceEnsemble.load(ensemble_dir))


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args):
    exp = _experiment_config(args)
    sources, target, third = make_synthetic_shift_suite(args.seed, exp.suite)
    out = Path(args.out)
    for i, src in enumerate(sources):
        save_dataset(src, out / f"source_{i}", dtype=args.dtype)
    save_dataset(target, out / "target", dtype=args.dtype)
    save_dataset(third, out / "third_party", dtype=args.dtype)
    _write_json(out / "config.resolved.json", {"seed": args.seed, "suite": exp.suite.to_dict()})
    print(f"wrote {len(sources)} source domains, target and third-party set to {out}")


def _load_sources(data_dir):
    data_dir = Path(data_dir)
    sources = [load_dataset(p) for p in sorted(data_dir.glob("source_*"))]
    if not sources:
        raise ConfigError(f"{data_dir} holds no source_* datasets")
    return sources


def cmd_train_source(args):
    exp = _experiment_config(args)
    if not args.data:
        raise UsageError("train-source needs --data (output of gen-data)")
    sources = _load_sources(args.data)
    target = load_dataset(Path(args.data) / "target")
    cfg = TrainConfig(**{**exp.source_train.to_dict(), "seed": exp.source_train.seed + args.seed})
    ens = train_source_ensemble(sources, cfg, forbidden=[target], seed=args.seed,
                                feature_dim=exp.pipeline.feature_dim)
    ens.save(Path(args.out) / "ensemble")
    accs = {f"source_{i}": evaluate(m, s) for i, (m, s) in enumerate(zip(ens.models, sources))}
    _write_json(Path(args.out) / "config.resolved.json",
                {"seed": args.seed, "source_train": cfg.to_dict(), "train_accuracy": accs})
    print(f"saved {len(ens.models)} source models to {Path(args.out) / 'ensemble'}")


def cmd_serve_oracle(args):
    if not args.ensemble:
        raise UsageError("serve-oracle needs --ensemble")
    server = OracleServer(Oracle(SourceEnsemble.load(args.ensemble)), args.host, args.port)
    print(f"oracle listening on {server.address}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()


def _load_target_side(args):
    data = Path(args.data)
    target = load_dataset(data / "target")
    third = load_dataset(data / "third_party")
    return target, third


def _finish(args, report, exp):
    out = Path(args.out)
    report.write(out, timing=False)
    _write_json(out / "timing.json", {"wall_clock": report.wall_clock})
    _write_json(out / "config.resolved.json",
                {"seed": args.seed, "oracle": args.oracle or "inproc", "experiment": exp.to_dict()})
    print(render_report(report.to_dict()))


def _run(args, strategy):
    exp = _experiment_config(args)
    if args.data:
        target, third = _load_target_side(args)
        oracle = _open_oracle(args, args.ensemble)
        if oracle is None:
            raise UsageError("--data with --oracle inproc also needs --ensemble")
        k = oracle.num_classes
        if strategy == "sfuda":
            pcfg = PipelineConfig(**{**exp.pipeline.__dict__, "seed": exp.pipeline.seed + args.seed})
            model, report = run_pipeline(oracle, target.unlabeled(), third, pcfg, k, target_test=target)
        else:
            report = RunReport(seeds={"pipeline": args.seed})
            if strategy == "cp":
                model = baseline_cp(oracle, target.unlabeled(), k, exp.cp_train, args.seed,
                                    exp.pipeline.feature_dim, report)
            else:
                model = baseline_gnp(oracle, k, exp.gnp_samples, target.shape, args.seed, exp.gnp_train,
                                     exp.pipeline.feature_dim, report)
            report.add_stage(strategy, evaluate(model, target))
        report.extra["strategy"] = strategy
    else:
        remote = _open_oracle(args)
        model, report = run_synthetic_experiment(args.seed, exp, strategy, oracle=remote)
    if args.out:
        save_model(model, args.out, stem="final")
        _finish(args, report, exp)
    return report


def cmd_run_pipeline(args):
    _run(args, args.strategy or "sfuda")


def cmd_run_baseline(args):
    if not args.strategy:
        raise UsageError("run-baseline needs --strategy")
    _run(args, args.strategy)


def cmd_attack(args):
    raw = _read_json(args.config) if args.config else {}
    try:
        cfg = MembershipConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid attack config: {exc}") from None
    result = run_membership_experiment(args.seed, cfg)
    out = Path(args.out)
    report_path = out / "report.json"
    report = json.loads(report_path.read_text()) if report_path.exists() else {}
    report["mia"] = result
    _write_json(report_path, report)
    print(json.dumps(result, indent=2))


def render_report(d):
    lines = []
    if "strategy" in d.get("extra", {}):
        lines.append(f"strategy: {d['extra']['strategy']}")
    if "source_only" in d.get("extra", {}):
        lines.append(f"source only: {d['extra']['source_only']:.2f}%")
    for s in d.get("stages", []):
        acc = "n/a" if s["accuracy"] is None else f"{s['accuracy']:.2f}%"
        lines.append(f"{s['stage']:>20s}: {acc}")
    for q in d.get("queries", []):
        lines.append(f"  queried {q['count']} samples ({q['stage']})")
    if "mia" in d:
        for victim, acc in d["mia"]["acc_judge"].items():
            lines.append(f"  Acc_judge[{victim}] = {acc:.1f}%")
    return "\n".join(lines)


def cmd_report(args):
    path = Path(args.out) / "report.json"
    if not path.exists():
        raise UsageError(f"no report.json under {args.out}")
    print(render_report(json.loads(path.read_text())))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-source": cmd_train_source,
    "serve-oracle": cmd_serve_oracle,
    "run-pipeline": cmd_run_pipeline,
    "run-baseline": cmd_run_baseline,
    "attack": cmd_attack,
    "report": cmd_report,
}


def _seed(text):
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser():
    parser = argparse.ArgumentParser(prog="sfuda", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=_seed, default=0)
        p.add_argument("--out", default="runs/latest" if name != "serve-oracle" else None)
        if name in ("run-pipeline", "run-baseline"):
            p.add_argument("--oracle", default="inproc", help="inproc or tcp://host:port")
            p.add_argument("--strategy", choices=["cp", "gnp", "sfuda"])
            p.add_argument("--ablation", choices=sorted(ABLATIONS))
            p.add_argument("--data", help="gen-data output directory (default: regenerate from --seed)")
            p.add_argument("--ensemble", help="train-source ensemble directory (inproc with --data)")
        if name == "gen-data":
            p.add_argument("--dtype", choices=["u8", "f32"], default="f32")
        if name == "train-source":
            p.add_argument("--data")
        if name == "serve-oracle":
            p.add_argument("--ensemble")
            p.add_argument("--host", default="127.0.0.1")
            p.add_argument("--port", type=int, default=5555)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    configure_threads()
    try:
        COMMANDS[args.command](args)
    except (ConfigError, UsageError) as exc:
        print(f"sfuda: config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"sfuda: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
