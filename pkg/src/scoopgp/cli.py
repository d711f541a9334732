"""Command line entry point.

Subcommands cover the full workflow: generate a synthetic task family,
train a model, evaluate k-shot prediction error, run simulated
deployment, validate a dataset file, and render report tables.

Exit codes: 0 on success, 2 for usage errors (argparse handles these),
1 for runtime failures, which print a diagnostic to stderr.

SCOOPGP_THREADS caps the BLAS thread pools (set before numpy loads);
SCOOPGP_OUT_DIR prefixes every relative output path.
"""

from __future__ import annotations

import argparse
import os
import sys


def _apply_thread_env() -> None:
    n = os.environ.get("SCOOPGP_THREADS")
    if not n:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, n)


def _out_path(path: str) -> str:
    base = os.environ.get("SCOOPGP_OUT_DIR")
    if base and not os.path.isabs(path):
        os.makedirs(base, exist_ok=True)
        return os.path.join(base, path)
    return path


def _load_run_config(args):
    from .config import ConfigError, RunConfig, apply_overrides, load_config

    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if getattr(args, "config", None):
        if not os.path.exists(args.config):
            raise FileNotFoundError(f"config file not found: {args.config}")
        cfg = load_config(args.config)
    else:
        cfg = RunConfig()
    return apply_overrides(cfg, overrides)


def _cmd_gen(args) -> int:
    from .tasks import (generate_materials, sample_ood_test_family, sample_task_family,
                        save_terrains, write_database)

    cfg = _load_run_config(args)
    g = cfg.gen
    pool = generate_materials(g.n_train_materials, g.n_ood_materials, g.rho, args.seed,
                              g.appearance_dim)
    train_tasks, train_sets = sample_task_family(pool, g.n_train_tasks, g.train_records,
                                                 args.seed, g)
    test_tasks, test_sets = sample_ood_test_family(pool, g.n_test_tasks, g.test_records,
                                                   args.seed, g)
    prefix = _out_path(args.prefix)
    write_database(prefix + ".train", train_sets)
    write_database(prefix + ".test", test_sets)
    save_terrains(prefix + ".terrains.bin", train_tasks + test_tasks, g)
    print(f"wrote {prefix}.train.records.txt ({sum(len(ds) for ds in train_sets)} records, "
          f"{len(train_sets)} tasks)")
    print(f"wrote {prefix}.test.records.txt ({sum(len(ds) for ds in test_sets)} records, "
          f"{len(test_sets)} tasks)")
    print(f"wrote {prefix}.terrains.bin")
    return 0


def _train_mean_only_model(datasets, seed, model_cfg, train_cfg):
    import numpy as np

    from .gp import DeepGpModel
    from .meta import LOG_OS_MAX, LOG_OS_MIN, _median_embed_heuristic, train_mean
    from .nnet import forward_batch, init_params

    res = train_mean(datasets, seed, model_cfg, train_cfg, label="mean")
    in_dim = datasets[0].feature_dim + 2
    kspec = model_cfg.kernel_spec()
    krng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, 0x6E51]))
    kernel_params = init_params(kspec, krng)
    X = np.concatenate([ds.gp_inputs() for ds in datasets], axis=0)
    y = np.concatenate([ds.rewards() for ds in datasets], axis=0)
    fspec = model_cfg.feature_spec(in_dim)
    emb = forward_batch(kspec, kernel_params, forward_batch(fspec, res.feature_params, X[:256]))
    log_ls = float(np.log(_median_embed_heuristic(emb)))
    log_os = float(np.clip(np.log(max(float(np.var(y)), 1e-8)), LOG_OS_MIN, LOG_OS_MAX))
    log_noise = float(np.log(max(0.5 * float(np.std(y)), train_cfg.noise_floor)))
    return DeepGpModel(
        feature_spec=fspec, feature_params=res.feature_params,
        mean_spec=model_cfg.mean_spec(), mean_params=res.mean_params,
        kernel_spec=kspec, kernel_params=kernel_params,
        log_lengthscale=log_ls, log_outputscale=log_os, log_noise=log_noise,
    )


def _cmd_train(args) -> int:
    from .gp import checkpoint_id, save_model
    from .meta import train_codega, train_dkmt
    from .tasks import read_database

    cfg = _load_run_config(args)
    datasets = read_database(args.data)
    if args.folds is not None:
        import dataclasses

        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, folds=args.folds))
    if args.method == "codega":
        result = train_codega(datasets, seed=args.seed, model_cfg=cfg.model, train_cfg=cfg.train)
        model = result.model
    elif args.method == "dkmt":
        result = train_dkmt(datasets, seed=args.seed, model_cfg=cfg.model, train_cfg=cfg.train)
        model = result.model
    else:
        model = _train_mean_only_model(datasets, args.seed, cfg.model, cfg.train)
    out = _out_path(args.out)
    save_model(out, model)
    print(f"wrote {out} (checkpoint {checkpoint_id(model)})")
    return 0


def _cmd_eval_mae(args) -> int:
    from .bench import eval_kshot_mae, mean_model_mae, write_mae_report
    from .gp import load_model
    from .tasks import read_database

    cfg = _load_run_config(args)
    b = cfg.bench
    model = load_model(args.model)
    datasets = read_database(args.data)
    if args.mean_only:
        report = mean_model_mae(model, datasets, trials=b.mae_trials, seed=args.seed,
                                query_fraction=b.query_fraction, top_k=b.top_k)
    else:
        report = eval_kshot_mae(model, datasets, shots=b.shots, trials=b.mae_trials,
                                seed=args.seed, query_fraction=b.query_fraction, top_k=b.top_k)
    out = _out_path(args.out)
    write_mae_report(out, report)
    for shot in report.shots:
        mae, top = report.aggregate(shot)
        print(f"{shot}-shot: mae {mae:.3f}  top mae {top:.3f}")
    print(f"wrote {out}")
    return 0


def _cmd_deploy(args) -> int:
    from .bench import eval_simulated_deployment, write_deploy_report
    from .decide import LiveTarget, ScorerConfig, run_deployment
    from .gp import load_model
    from .tasks import read_database

    cfg = _load_run_config(args)
    b = cfg.bench
    model = load_model(args.model) if args.scorer != "random" else (
        load_model(args.model) if args.model else None)
    scorer = ScorerConfig(kind=args.scorer, gamma=b.gamma)
    if args.mode == "live":
        from .tasks import load_terrains

        tasks = load_terrains(args.terrains)
        by_id = {t.id: t for t in tasks}
        datasets = read_database(args.data)
        lines = []
        for ds in datasets:
            if ds.task_id not in by_id:
                raise ValueError(f"task {ds.task_id} missing from {args.terrains}")
            from .bench import deployment_threshold

            B = args.threshold if args.threshold is not None else deployment_threshold(ds)
            trace = run_deployment(model, scorer, LiveTarget(by_id[ds.task_id], cfg.gen), B,
                                   b.budget, args.seed)
            lines.append(trace.to_text())
        out = _out_path(args.out)
        with open(out, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
        print(f"wrote {out}")
        return 0
    datasets = read_database(args.data)
    reports = eval_simulated_deployment({args.scorer: (model, scorer)}, datasets,
                                        budget=b.budget, trials=b.deploy_trials, seed=args.seed,
                                        exclude_below=b.exclude_below)
    report = reports[args.scorer]
    out = _out_path(args.out)
    write_deploy_report(out, report)
    print(f"{args.scorer}: avg attempts {report.avg_attempts:.2f}  "
          f"success rate {report.success_rate:.2f}")
    if report.excluded:
        print(f"excluded below-threshold tasks: {', '.join(report.excluded)}")
    print(f"wrote {out}")
    return 0


def _cmd_ingest(args) -> int:
    from .tasks import ingest_released_dataset

    _, report = ingest_released_dataset(args.data)
    print(report.render(), end="")
    return 0


def _cmd_report(args) -> int:
    from .bench import read_deploy_report, read_mae_report, render_deploy_table, render_mae_table

    mae_reports = {}
    deploy_reports = {}
    for path in args.files:
        with open(path, "r", encoding="utf-8") as fh:
            head = fh.readline()
        if "mae-report" in head:
            rep = read_mae_report(path)
            mae_reports.setdefault(rep.label, []).append(rep)
        elif "deploy-report" in head:
            rep = read_deploy_report(path)
            deploy_reports[rep.method] = rep
        else:
            raise ValueError(f"{path} is not a recognized report file")
    if mae_reports:
        print(render_mae_table(mae_reports), end="")
    if deploy_reports:
        if mae_reports:
            print()
        print(render_deploy_table(deploy_reports), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scoopgp",
                                     description="few-shot scooping reward models")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", help="config text file (section.key = value)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config value (repeatable)")

    p = sub.add_parser("gen", help="generate a synthetic task family")
    common(p)
    p.add_argument("--prefix", required=True, help="output path prefix")
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("train", help="train a reward model")
    common(p)
    p.add_argument("--data", required=True, help="records file")
    p.add_argument("--method", choices=("codega", "dkmt", "mean-only"), default="codega")
    p.add_argument("--folds", type=int, default=None, help="material fold count override")
    p.add_argument("--out", required=True, help="model checkpoint path")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval-mae", help="k-shot prediction error")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mean-only", action="store_true",
                   help="score the prior mean without posterior updates")
    p.set_defaults(func=_cmd_eval_mae)

    p = sub.add_parser("deploy", help="run deployment episodes")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", help="model checkpoint (optional for --scorer random)")
    p.add_argument("--scorer", choices=("ucb", "greedy", "mean", "random"), default="ucb")
    p.add_argument("--mode", choices=("dataset", "live"), default="dataset")
    p.add_argument("--terrains", help="terrain container (required for --mode live)")
    p.add_argument("--threshold", type=float, default=None,
                   help="success threshold override (live mode)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_deploy)

    p = sub.add_parser("ingest", help="validate and summarize a records file")
    common(p)
    p.add_argument("--data", required=True)
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("report", help="render report files as tables")
    common(p)
    p.add_argument("files", nargs="+")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    _apply_thread_env()
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "deploy" and args.mode == "live" and not args.terrains:
        parser.error("--mode live requires --terrains")
    if args.command == "deploy" and args.scorer != "random" and not args.model:
        parser.error(f"--scorer {args.scorer} requires --model")
    try:
        return args.func(args)
    except Exception as exc:  # one diagnostic line, exit 1
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
