"""Command-line entry point: ``sarm <subcommand> [options]``.

Data goes to files (and ``report`` to stdout), logs to stderr. Every run
writes a reproducibility stamp next to its outputs. Exit codes: 0 ok,
2 usage, 3 validation, 4 numerical, 5 I/O.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import os
import platform
import sys
from pathlib import Path

from . import __version__

log = logging.getLogger("sarm")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO, EXIT_INTERNAL = 0, 2, 3, 4, 5, 1
SEED_ENV = "SARM_SEED"
THREAD_ENV = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")
# argument destinations that name outputs; kept out of stamps so reruns into
# different directories stamp identically
OUTPUT_KEYS = {"out"}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- helpers


def _csv_ints(s: str) -> list[int]:
    return [int(x) for x in s.split(",") if x.strip()]


def _csv(s: str) -> list[str]:
    return [x.strip() for x in s.split(",") if x.strip()]


def _write_stamp(target: Path, args) -> None:
    import numpy as np

    from .io import write_json

    config = {k: v for k, v in sorted(vars(args).items()) if k not in OUTPUT_KEYS and k != "func" and not k.startswith("_")}
    stamp = {
        "command": args.command,
        "seed": args.seed,
        "config": {k: (str(v) if isinstance(v, Path) else v) for k, v in config.items()},
        "versions": {"sarm": __version__, "numpy": np.__version__, "python": platform.python_version()},
    }
    path = target / "stamp.json" if target.suffix == "" else target.with_name(target.name + ".stamp.json")
    write_json(path, stamp)


def _sim_config(args):
    from .simulator import SimConfig

    kw = {"seed": args.seed, "fps": args.fps, "feature_dim": args.feature_dim, "obs_noise": args.obs_noise, "task_id": args.task_id}
    if args.failure_mix:
        mix = {}
        for part in _csv(args.failure_mix):
            name, _, p = part.partition("=")
            mix[name] = float(p)
        kw["failure_mix"] = mix
    return SimConfig(**kw)


def _sampler_config(args):
    from .sampler import SamplerConfig

    return SamplerConfig(
        N=args.n_frames, G=args.gap, R_max=args.r_max, p_rewind=args.p_rewind, p_perturb=args.p_perturb,
        seed=args.seed, min_length_policy=args.min_length_policy,
    )


def _labels(args, ds):
    """Labels from a ``label`` output directory, or computed in-process."""
    from .io import read_labels, read_priors
    from .labeling import prepare_labels

    if getattr(args, "labels", None):
        root = Path(args.labels)
        priors = read_priors(root / "priors.json")
        labels = {p.stem: read_labels(p, p.stem) for p in sorted((root / "labels").glob("*.jsonl"))}
        return priors, labels
    prep = prepare_labels(ds.annotations.values(), ds.protocol, ds.trajectories)
    return prep.priors, prep.labels


def _predictor(args, ds):
    from .predictors import OraclePredictor

    if args.predictor == "oracle":
        if not ds.ground_truth:
            raise UsageError("--predictor oracle needs ground-truth sidecars in the dataset")
        return OraclePredictor(ds.ground_truth)
    if not args.checkpoint:
        raise UsageError("--predictor estimator needs --checkpoint")
    from .estimator import LearnedPredictor, load_checkpoint

    return LearnedPredictor(load_checkpoint(args.checkpoint))


# ---------------------------------------------------------------- commands


def cmd_gen(args) -> int:
    from .io import gen_dataset

    kinds = _csv(args.kinds) or None
    manifest = gen_dataset(_sim_config(args), args.experts, args.suboptimal, args.seed, args.out, kinds=kinds, name=args.name)
    _write_stamp(Path(args.out), args)
    log.info("wrote %d trajectories to %s", len(manifest["trajectory_files"]), args.out)
    return EXIT_OK


def cmd_gen_rollouts(args) -> int:
    from .io import write_dataset, write_traces, write_truth
    from .simulator import gen_rollout_set

    cfg = _sim_config(args)
    sims = gen_rollout_set(cfg, {"SE": args.se, "PSE": args.pse, "FE": args.fe})
    truth = {s.id: s.quality.split("-", 1)[1] for s in sims}
    write_dataset(args.out, sims, cfg, args.seed, name=args.name)
    out = Path(args.out)
    write_truth(out / "truth.jsonl", truth)
    write_traces(out / "traces" / "oracle.jsonl", {s.id: s.y_true for s in sims})
    _write_stamp(out, args)
    log.info("wrote %d rollouts to %s", len(sims), out)
    return EXIT_OK


def cmd_label(args) -> int:
    from .io import load_dataset, write_json, write_labels, write_priors
    from .labeling import prepare_labels

    ds = load_dataset(args.data)
    prep = prepare_labels(ds.annotations.values(), ds.protocol, ds.trajectories)
    out = Path(args.out)
    for tid, lab in prep.labels.items():
        write_labels(out / "labels" / f"{tid}.jsonl", lab)
    write_priors(out / "priors.json", prep.priors)
    write_json(out / "filter_report.json", prep.filter_report.to_dict())
    write_json(out / "summary.json", prep.summary.to_dict())
    _write_stamp(out, args)
    log.info("kept %d, rejected %d; alpha=%s", len(prep.filter_report.kept), len(prep.filter_report.rejected), prep.priors.alpha.tolist())
    return EXIT_OK


def cmd_sample(args) -> int:
    from .io import load_dataset, write_samples
    from .sampler import draw_sample, sample_rng

    ds = load_dataset(args.data)
    _, labels = _labels(args, ds)
    sampler = _sampler_config(args)
    vocab = list(dict.fromkeys([ds.manifest.get("task_id", "task")] + _csv(args.task_vocabulary)))
    samples = []
    for tid in sorted(labels):
        for j in range(args.count):
            samples.append(draw_sample(ds.trajectories[tid], labels[tid], sampler, vocab, sample_rng(sampler.seed, tid, j)))
    write_samples(args.out, samples)
    _write_stamp(Path(args.out), args)
    return EXIT_OK


def cmd_train_reward(args) -> int:
    from .estimator import EstimatorConfig, init_model, save_checkpoint, train
    from .io import atomic_write, load_dataset, write_json
    from .trajectory import split_dataset

    ds = load_dataset(args.data)
    priors, labels = _labels(args, ds)
    train_ids, test_ids = split_dataset(sorted(labels), args.holdout, args.seed)
    task = ds.manifest.get("task_id", "task")
    vocab = tuple(dict.fromkeys([task] + _csv(args.task_vocabulary)))
    first = ds.trajectories[train_ids[0]]
    cfg = EstimatorConfig(
        K=priors.K, feature_dim=first.feature_dim,
        joint_dim=0 if first.joint_state is None else first.joint_state.shape[1],
        use_joint_state=args.use_joint_state, d_model=args.d_model, hidden=args.hidden,
        learning_rate=args.lr, momentum=args.momentum, batch_size=args.batch_size, epochs=args.epochs,
        samples_per_trajectory=args.samples_per_trajectory, loss_mix=args.loss_mix, seed=args.seed,
        scheme_id=priors.scheme_id, task_vocabulary=vocab,
    )
    model = init_model(cfg, priors={priors.scheme_id: priors})
    report = train(model, ds.trajectories, labels, train_ids, _sampler_config(args), val_ids=test_ids)
    out = Path(args.out)
    save_checkpoint(model, out / "checkpoint.json")
    atomic_write(out / "train_report.tsv", report.to_tsv())
    write_json(out / "split.json", {"train": train_ids, "test": test_ids})
    write_json(out / "metrics.json", {"holdout_demo_mse": report.records[-1].val_mse if report.records else None})
    _write_stamp(out, args)
    return EXIT_OK


def cmd_eval_demo(args) -> int:
    from .evaluation import demo_mse
    from .io import load_dataset, read_json, write_json

    ds = load_dataset(args.data)
    _, labels = _labels(args, ds)
    ids = sorted(labels)
    if args.split:
        ids = read_json(args.split)["test"]
    pred = _predictor(args, ds)
    mse = demo_mse(pred, ds.trajectories, labels, ids, args.n_frames, args.gap)
    write_json(args.out, {"demo_mse": mse, "n_trajectories": len(ids), "predictor": pred.name})
    _write_stamp(Path(args.out), args)
    print(f"demo_mse\t{mse!r}")
    return EXIT_OK


def cmd_eval_rollout(args) -> int:
    from .evaluation import RolloutTrace, classify_rollouts
    from .io import load_dataset, read_traces, read_truth, write_json, write_traces
    from .predictors import progress_trace

    if args.rollouts:
        ds = load_dataset(args.rollouts)
        pred = _predictor(args, ds)
        traces = {tid: progress_trace(pred, traj, args.n_frames, args.gap) for tid, traj in ds.trajectories.items()}
        if args.write_traces:
            write_traces(args.write_traces, traces)
        truth_path = args.truth or (Path(args.rollouts) / "truth.jsonl")
    elif args.traces:
        traces = read_traces(args.traces)
        truth_path = args.truth
    else:
        raise UsageError("eval-rollout needs --traces or --rollouts")
    truth = read_truth(truth_path) if truth_path else {}
    missing = set(truth) - set(traces)
    if missing:
        raise UsageError(f"truth file names rollouts without traces: {sorted(missing)[:5]}")
    report = classify_rollouts([RolloutTrace(rid, traces[rid], truth.get(rid)) for rid in sorted(traces)])
    write_json(args.out, report.to_dict())
    _write_stamp(Path(args.out), args)
    print(f"rho\t{report.rho!r}")
    return EXIT_OK


def cmd_weigh(args) -> int:
    from .io import load_dataset, write_weight_table
    from .rabc import WeightConfig, weight_dataset

    ds = load_dataset(args.data)
    pred = _predictor(args, ds)
    wcfg = WeightConfig(kappa=args.kappa, eps_div=args.eps_div, eps_var=args.eps_var, delta=args.delta)
    table = weight_dataset(pred, list(ds.trajectories.values()), wcfg, args.n_frames, args.gap)
    write_weight_table(args.out, table)
    _write_stamp(Path(args.out), args)
    log.info("weighted %d chunks (%d skipped); stats=%s", len(table.rows), len(table.skipped), table.stats.to_dict())
    return EXIT_OK


def cmd_train_bc(args) -> int:
    from .bc import BCConfig, eval_policy, train_bc
    from .io import atomic_write, load_dataset, write_json

    ds = load_dataset(args.data)
    holdout = load_dataset(args.holdout)
    hold = [t for tid, t in holdout.trajectories.items() if holdout.quality(tid) in ("", "expert")]
    if not hold:
        raise UsageError(f"{args.holdout} holds no expert trajectories")
    modes = ["uniform", "ra-bc"] if args.mode == "both" else [args.mode]
    pred = _predictor(args, ds) if "ra-bc" in modes else None
    trajs = list(ds.trajectories.values())
    out = Path(args.out)
    rows, reports = ["mode\tseed\tholdout_mse"], {}
    for seed in _csv_ints(args.seeds) if args.seeds else [args.seed]:
        for mode in modes:
            cfg = BCConfig(
                learning_rate=args.lr, momentum=args.momentum, batch_size=args.batch_size, epochs=args.epochs,
                delta=args.delta, mode=mode, weighting=args.weighting, width=args.width, seed=seed,
                kappa=args.kappa, n_frames=args.n_frames, gap=args.gap,
            )
            policy, report = train_bc(trajs, pred, cfg)
            mse = eval_policy(policy, hold)
            policy.save(out / f"policy_{mode}_seed{seed}.json")
            rows.append(f"{mode}\t{seed}\t{mse!r}")
            reports[f"{mode}/{seed}"] = {**report.to_dict(), "holdout_mse": mse}
    atomic_write(out / "comparison.tsv", "\n".join(rows) + "\n")
    write_json(out / "bc_report.json", reports)
    _write_stamp(out, args)
    sys.stdout.write("\n".join(rows) + "\n")
    return EXIT_OK


def cmd_report(args) -> int:
    from .io import read_json

    lines = ["method\tdemo_L\trho\tSE\tPSE\tFE"]
    demo = read_json(args.eval_demo) if args.eval_demo else {}
    roll = read_json(args.eval_rollout) if args.eval_rollout else {}
    pc = roll.get("per_class", {})
    fmt = lambda v: "-" if v is None else f"{v:.4f}"  # noqa: E731
    lines.append("\t".join([args.method, fmt(demo.get("demo_mse")), fmt(roll.get("rho")), pc.get("SE", "-"), pc.get("PSE", "-"), pc.get("FE", "-")]))
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        from .io import atomic_write

        atomic_write(args.out, text)
        _write_stamp(Path(args.out), args)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _add_sim(p):
    p.add_argument("--fps", type=int, default=30)
    p.add_argument("--feature-dim", type=int, default=16)
    p.add_argument("--obs-noise", type=float, default=0.05)
    p.add_argument("--task-id", default="fold_tshirt")
    p.add_argument("--failure-mix", default="", help="e.g. stall=0.5,regression=0.5")
    p.add_argument("--name", default="sim")


def _add_window(p):
    p.add_argument("--n-frames", type=int, default=9, help="frames per window (N)")
    p.add_argument("--gap", type=int, default=30, help="frame gap between window positions (G)")


def _add_sampler(p):
    _add_window(p)
    p.add_argument("--r-max", type=int, default=4)
    p.add_argument("--p-rewind", type=float, default=0.5)
    p.add_argument("--p-perturb", type=float, default=0.1)
    p.add_argument("--min-length-policy", choices=("error", "shrink-gap"), default="error")
    p.add_argument("--task-vocabulary", default="unload_dishes", help="extra task ids used for instruction perturbation")


def _add_predictor(p):
    p.add_argument("--predictor", choices=("oracle", "estimator"), default="oracle")
    p.add_argument("--checkpoint", type=Path)


def build_parser() -> argparse.ArgumentParser:
    default_seed = os.environ.get(SEED_ENV, "0")
    ap = argparse.ArgumentParser(prog="sarm", description="Stage-aware progress reward modeling and reward-weighted behavior cloning.")
    ap.add_argument("--version", action="version", version=f"sarm {__version__}")
    ap.add_argument("--config", type=Path, help="INI file; [global] and [<subcommand>] sections, keys are option names")
    ap.add_argument("--seed", type=int, default=int(default_seed), help=f"global seed (default ${SEED_ENV} or 0)")
    ap.add_argument("--threads", type=int, default=None, help="upper bound on BLAS threads")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("gen", help="generate a simulator dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--experts", type=int, default=180)
    p.add_argument("--suboptimal", type=int, default=20)
    p.add_argument("--kinds", default="", help="force these failure kinds on every suboptimal trajectory")
    _add_sim(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("gen-rollouts", help="generate an SE/PSE/FE rollout set with truth and oracle traces")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--se", type=int, default=12)
    p.add_argument("--pse", type=int, default=12)
    p.add_argument("--fe", type=int, default=12)
    _add_sim(p)
    p.set_defaults(func=cmd_gen_rollouts, name="rollouts")

    p = sub.add_parser("label", help="filter annotations, estimate priors, write progress labels")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("sample", help="dump augmented training windows")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--labels", type=Path, help="output directory of `label`")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--count", type=int, default=1, help="windows per trajectory")
    _add_sampler(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("train-reward", help="train the progress estimator")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--labels", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--holdout", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--d-model", type=int, default=32)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--samples-per-trajectory", type=int, default=4)
    p.add_argument("--loss-mix", type=float, default=1.0, help="weight of the subtask MSE against stage cross-entropy")
    p.add_argument("--use-joint-state", action="store_true")
    _add_sampler(p)
    p.set_defaults(func=cmd_train_reward)

    p = sub.add_parser("eval-demo", help="demo MSE of a predictor on labeled trajectories")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--labels", type=Path)
    p.add_argument("--split", type=Path, help="split.json from train-reward; evaluates its test ids")
    p.add_argument("--out", type=Path, required=True)
    _add_predictor(p)
    _add_window(p)
    p.set_defaults(func=cmd_eval_demo)

    p = sub.add_parser("eval-rollout", help="classify rollouts as SE/PSE/FE and score rho")
    p.add_argument("--traces", type=Path, help="trace file or directory of trace files")
    p.add_argument("--rollouts", type=Path, help="rollout dataset; traces are computed with --predictor")
    p.add_argument("--truth", type=Path)
    p.add_argument("--write-traces", type=Path)
    p.add_argument("--out", type=Path, required=True)
    _add_predictor(p)
    _add_window(p)
    p.set_defaults(func=cmd_eval_rollout)

    p = sub.add_parser("weigh", help="reward-aligned weight table over action chunks")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--kappa", type=float, default=0.01)
    p.add_argument("--delta", type=int, default=25)
    p.add_argument("--eps-div", type=float, default=1e-6)
    p.add_argument("--eps-var", type=float, default=1e-6)
    _add_predictor(p)
    _add_window(p)
    p.set_defaults(func=cmd_weigh)

    p = sub.add_parser("train-bc", help="behavior cloning, uniform or reward-aligned")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--holdout", type=Path, required=True, help="dataset whose expert trajectories score the policy")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--mode", choices=("uniform", "ra-bc", "both"), default="both")
    p.add_argument("--weighting", choices=("online", "offline"), default="online")
    p.add_argument("--seeds", default="", help="comma-separated seeds (default: --seed)")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--delta", type=int, default=25)
    p.add_argument("--kappa", type=float, default=0.01)
    _add_predictor(p)
    _add_window(p)
    p.set_defaults(func=cmd_train_bc)

    p = sub.add_parser("report", help="render stored eval artifacts as a results table")
    p.add_argument("--eval-demo", type=Path)
    p.add_argument("--eval-rollout", type=Path)
    p.add_argument("--method", default="sarm")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_report)
    return ap


def _apply_config(ap: argparse.ArgumentParser, argv: list[str]) -> None:
    """Install config-file values as parser defaults so explicit flags still win."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path)
    known, rest = pre.parse_known_args(argv)
    if known.config is None:
        return
    cp = configparser.ConfigParser()
    if not cp.read(known.config):
        raise FileNotFoundError(f"config file {known.config} not found")
    command = next((a for a in rest if not a.startswith("-") and a in _subparsers(ap)), None)
    subs = _subparsers(ap)
    for section in cp.sections():
        if section != "global" and section not in subs:
            raise UsageError(f"config section [{section}] is not a subcommand")
    targets = [("global", ap)] + ([(command, subs[command])] if command else [])
    for section, parser in targets:
        if not cp.has_section(section):
            continue
        actions = {a.dest: a for a in parser._actions}
        values = {}
        for key, raw in cp.items(section, raw=True):
            dest = key.replace("-", "_")
            if dest not in actions or dest in ("help", "config", "version"):
                raise UsageError(f"unknown option {key!r} in config section [{section}]")
            act = actions[dest]
            if isinstance(act, argparse._StoreTrueAction):
                values[dest] = cp.getboolean(section, key)
            elif act.type is not None:
                values[dest] = act.type(raw)
            else:
                values[dest] = raw
            if act.required:
                act.required = False
        parser.set_defaults(**values)


def _subparsers(ap) -> dict[str, argparse.ArgumentParser]:
    for a in ap._actions:
        if isinstance(a, argparse._SubParsersAction):
            return dict(a.choices)
    return {}


def _category(exc: BaseException) -> tuple[str, int]:
    from .errors import NumericalError, SchemaError, SimulationError, ValidationError

    if isinstance(exc, UsageError):
        return "usage", EXIT_USAGE
    if isinstance(exc, SchemaError):
        return "schema", EXIT_VALIDATION
    if isinstance(exc, (ValidationError, SimulationError)):
        return "validation", EXIT_VALIDATION
    if isinstance(exc, (NumericalError, FloatingPointError)):
        return "numerical", EXIT_NUMERICAL
    if isinstance(exc, OSError):
        return "io", EXIT_IO
    return "internal", EXIT_INTERNAL


def _threads_from_argv(argv: list[str]) -> str | None:
    for i, a in enumerate(argv):
        if a == "--threads" and i + 1 < len(argv):
            return argv[i + 1]
        if a.startswith("--threads="):
            return a.split("=", 1)[1]
    return None


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    threads = _threads_from_argv(argv)
    if threads is not None and threads.isdigit() and int(threads) > 0:
        # must happen before numpy is first imported to take effect
        for var in THREAD_ENV:
            os.environ[var] = threads
    ap = build_parser()
    try:
        _apply_config(ap, argv)
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001 - config problems are usage errors
        cat, code = _category(exc)
        cat, code = ("usage", EXIT_USAGE) if cat in ("internal", "validation") else (cat, code)
        print(f"error: category={cat} message={' '.join(str(exc).split())}", file=sys.stderr)
        return code
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes
        cat, code = _category(exc)
        if code == EXIT_INTERNAL:
            log.debug("unhandled error", exc_info=True)
        print(f"error: category={cat} message={' '.join(str(exc).split())}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
