"""Command-line entry point: ``codats {synth,train,eval,gradcheck,bench}``."""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from . import data as D
from . import experiment as E
from . import io as dio
from . import kernels
from .train import CODATS, CODATS_WS, METHODS, NONE, TrainConfig, bench_step_time, evaluate_accuracy


def _print(obj):
    print(json.dumps(obj, indent=1, sort_keys=True))


def cmd_synth(args):
    cfg = E.load_config(args.config)
    if cfg["synth"] is None:
        raise E.ConfigError("data.synth: the synth subcommand needs an embedded synthetic spec")
    seed = cfg["seed"] if args.seed is None else args.seed
    out = Path(args.output or E.default_output()) / cfg["name"] / "data"
    out.mkdir(parents=True, exist_ok=True)
    domains = E.load_domains(cfg, seed)
    written = {}
    for d, ds in domains.items():
        path = out / f"domain{d}.tsdb"
        dio.write_tsdb(path, ds)
        # read back so a bad write never goes unnoticed
        back = dio.read_tsdb(path)
        if not (np.array_equal(back.X, ds.X) and np.array_equal(back.y, ds.y)):
            raise OSError(f"{path}: round trip mismatch")
        written[d] = str(path)
    _print({"seed": seed, "files": written})


def cmd_train(args):
    summary = E.run_experiment(args.config, seed=args.seed, output=args.output, method=args.method)
    _print({"output": summary["output"],
            "methods": {m: v["best_target_test_accuracy"] for m, v in summary["methods"].items()}})


def cmd_eval(args):
    ck = ckpt.load_checkpoint(args.checkpoint)
    store = ck.best if (args.which == "best" and ck.best is not None) else ck.store
    ds = dio.read_tsdb(args.data) if not args.data.lower().endswith(".csv") else dio.read_csv(args.data, 0)[0]
    norm = ck.meta.get("norm")
    if norm is not None:
        ds = D.NormStats(np.asarray(norm["mean"]), np.asarray(norm["std"])).apply(ds)
    train_cfg = ck.meta.get("train", {})
    with ad.precision(train_cfg.get("precision", "float32")):
        acc, conf = evaluate_accuracy(store, ds)
    result = {"checkpoint": args.checkpoint, "which": args.which, "iteration": ck.iteration,
              "best_iteration": ck.best_iteration, "accuracy": acc, "confusion": conf.tolist()}
    if args.output:
        dio.atomic_write(args.output, (json.dumps(result, sort_keys=True) + "\n").encode())
    _print(result)


def cmd_gradcheck(args):
    from .verify import TOLERANCE, run_gradcheck

    seeds = range(5) if args.seed is None else [args.seed]
    worst = run_gradcheck(seeds, verbose=True)
    bad = {k: v for k, v in worst.items() if not v < TOLERANCE}
    if bad:
        raise RuntimeError(f"gradient check failed for {sorted(bad)}")


def _bench_data(cfg, seed):
    if cfg is None:
        spec = D.SynthSpec(domains={0: {"amplitude": 1.6, "phase": 0.8}})
        domains = {d: D.synth_generate(spec, d, seed) for d in (0, 1)}
        return domains, 0, [1], {}
    return E.load_domains(cfg, seed), cfg["target"], cfg["sources"], cfg["net"]


def cmd_bench(args):
    """Seconds per iteration for each method under each available kernel backend."""
    cfg = E.load_config(args.config) if args.config else None
    seed = args.seed if args.seed is not None else (cfg["seed"] if cfg else 0)
    domains, target, sources, net_kw = _bench_data(cfg, seed)
    methods = [args.method] if args.method else [NONE, CODATS, CODATS_WS]
    splits, _ = E.prepare_splits(domains, target, sources, seed, NONE)
    from .net import NetConfig

    t = splits[target]
    net_cfg = NetConfig(t.train.channels, t.train.n_labels, len(sources), **net_kw)
    backends = kernels.available() if args.backend == "all" else [args.backend]
    prev = kernels.backend
    rows = []
    try:
        for b in backends:
            kernels.use(b)
            for m in methods:
                tc = TrainConfig(method=m, seed=seed, **(cfg["train"] if cfg else {}))
                mean, std = bench_step_time(tc, [splits[s] for s in sources], t, net_cfg,
                                            args.warmup, args.measured)
                rows.append({"backend": b, "method": m, "step_time_mean_s": mean, "step_time_std_s": std})
                print(f"{b:8s} {m:12s} {mean * 1e3:9.2f} ms +- {std * 1e3:.2f}", file=sys.stderr)
    finally:
        kernels.backend = prev
    if args.output:
        dio.atomic_write(args.output, (json.dumps(rows, indent=1) + "\n").encode())
    _print(rows)


def build_parser():
    p = argparse.ArgumentParser(prog="codats", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=False):
        sp.add_argument("--config", required=config_required, help="YAML experiment config")
        sp.add_argument("--seed", type=int, help="base seed override")
        sp.add_argument("--output", help=f"output root (default ${E.OUTPUT_ENV} or ./runs)")
        sp.add_argument("--method", choices=METHODS, help="run only this method")
        return sp

    common(sub.add_parser("synth", help="write TSDB files from the config's synthetic spec"), True)
    common(sub.add_parser("train", help="run the configured experiment"), True)
    ev = sub.add_parser("eval", help="re-evaluate a checkpoint on a dataset file")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True, help="TSDB or CSV file (raw, unnormalized)")
    ev.add_argument("--which", choices=("best", "final"), default="best")
    ev.add_argument("--output", help="write the result JSON here")
    gc = sub.add_parser("gradcheck", help="64-bit finite-difference checks of every operator and loss")
    gc.add_argument("--seed", type=int)
    bn = common(sub.add_parser("bench", help="per-iteration timing per method and kernel backend"))
    bn.add_argument("--backend", default="all", help="numpy, cython or all")
    bn.add_argument("--warmup", type=int, default=20)
    bn.add_argument("--measured", type=int, default=100)
    return p


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck, "bench": cmd_bench}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except E.ConfigError as e:
        print(f"codats: config error: {e}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, OSError, RuntimeError, FloatingPointError) as e:
        print(f"codats: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
