"""Config-driven experiments: data, splits, training per method and seed, outputs.

A config is a YAML mapping::

    name: synth-single
    methods: [none, codats]      # or ``method: codats``
    repetitions: 3               # seeds are seed + 0, 1, 2
    seed: 0
    output: runs                 # optional; default $CODATS_OUTPUT or ./runs
    target: 0
    sources: [1]
    data:
      synth: {n_labels: 4, channels: 3, length: 64, noise: 1.0, n_examples: 400,
              frequencies: [2, 3, 4, 5],
              domains: {0: {amplitude: 1.6, phase: 0.8, channel_scale: [0.2, 0.5, 1.0]}}}
      # or  files: {0: target.tsdb, 1: source.csv}
      # data_seed: 7             # fixed data across repetitions (default: the run seed)
    train: {iterations: 4000, eval_interval: 1000, lr: 0.0001, ...}
    net: {filters: [16, 32, 16], domain_widths: [64, 64, 64]}
    checkpoint: true

Each (method, seed) run writes ``<method>/seed<k>/{metrics.jsonl, run.json,
checkpoint.ckpt}`` under ``<output>/<name>``; the experiment root gets
``summary.json`` and ``summary.csv``.
"""

import csv
import io as _io
import json
import os
import shutil
from dataclasses import fields
from pathlib import Path

import numpy as np
import yaml

from . import checkpoint as ckpt
from . import data as D
from . import io as dio
from .net import NetConfig
from .train import METHODS, TARGET_ONLY, DomainSplits, MetricsRecord, Trainer, TrainConfig, evaluate_accuracy

OUTPUT_ENV = "CODATS_OUTPUT"
METRIC_KEYS = ("iteration", "split", "domain", "accuracy", "task_loss", "domain_loss", "kl_term", "wall_time")
SUMMARY_COLUMNS = ("method", "n_sources", "seed", "best_target_test_accuracy", "step_time_mean_s")


class ConfigError(ValueError):
    """Malformed experiment config; the message starts with the field path."""


# ---------------------------------------------------------------- config

_TOP = {"name", "method", "methods", "repetitions", "seed", "output", "target", "sources",
        "data", "train", "net", "checkpoint"}
_TRAIN_FIELDS = {f.name for f in fields(TrainConfig)} - {"method", "seed"}
_NET_FIELDS = {"filters", "kernels", "domain_widths", "dropout", "bn_momentum", "bn_eps"}
_SYNTH_FIELDS = {"n_labels", "channels", "length", "frequencies", "noise", "n_examples", "proportions", "domains"}
_SHIFT_FIELDS = {"amplitude", "phase", "channel_scale", "proportions"}


def _need(cond, path, msg):
    if not cond:
        raise ConfigError(f"{path}: {msg}")


def _mapping(v, path):
    _need(isinstance(v, dict), path, "expected a mapping")
    return v


def _keys(d, allowed, path):
    for k in d:
        _need(k in allowed, f"{path}.{k}" if path else str(k), "unknown field")


def _int(v, path, lo=None):
    _need(isinstance(v, int) and not isinstance(v, bool), path, "expected an integer")
    if lo is not None:
        _need(v >= lo, path, f"must be >= {lo}")
    return v


def _num(v, path):
    _need(isinstance(v, (int, float)) and not isinstance(v, bool), path, "expected a number")
    return float(v)


def _num_list(v, path, length=None):
    _need(isinstance(v, (list, tuple)) and v, path, "expected a non-empty list")
    out = [_num(x, f"{path}[{i}]") for i, x in enumerate(v)]
    if length is not None:
        _need(len(out) == length, path, f"expected {length} entries")
    return out


def _domain_id(k, path):
    try:
        d = int(k)
    except (TypeError, ValueError):
        raise ConfigError(f"{path}: domain ids must be integers") from None
    _need(d >= 0, path, "domain ids must be non-negative")
    return d


def load_config(source):
    """Parse a YAML path, YAML text or mapping into a validated config dict."""
    if isinstance(source, dict):
        raw = source
    else:
        text = Path(source).read_text() if os.path.exists(str(source)) else str(source)
        try:
            raw = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise ConfigError(f"<root>: not valid YAML ({e})") from None
    return validate_config(raw)


def validate_config(raw):
    cfg = _mapping(raw, "<root>")
    _keys(cfg, _TOP, "")
    out = {}
    _need(isinstance(cfg.get("name"), str) and cfg["name"], "name", "required non-empty string")
    _need("/" not in cfg["name"] and cfg["name"] not in (".", ".."), "name", "must be a plain directory name")
    out["name"] = cfg["name"]
    _need(not ("method" in cfg and "methods" in cfg), "methods", "give either method or methods, not both")
    methods = cfg.get("methods", [cfg.get("method", "codats")])
    if isinstance(methods, str):
        methods = [methods]
    _need(isinstance(methods, list) and methods, "methods", "expected a non-empty list")
    for i, m in enumerate(methods):
        _need(m in METHODS, f"methods[{i}]", f"unknown method {m!r}; choose from {list(METHODS)}")
    _need(len(set(methods)) == len(methods), "methods", "duplicate method")
    out["methods"] = list(methods)
    out["repetitions"] = _int(cfg.get("repetitions", 3), "repetitions", lo=1)
    out["seed"] = _int(cfg.get("seed", 0), "seed", lo=0)
    out["output"] = cfg.get("output")
    _need(out["output"] is None or isinstance(out["output"], str), "output", "expected a path string")
    out["checkpoint"] = bool(cfg.get("checkpoint", True))

    out["target"] = _domain_id(cfg.get("target", 0), "target")
    sources = cfg.get("sources", [1])
    _need(isinstance(sources, list), "sources", "expected a list of domain ids")
    out["sources"] = [_domain_id(s, f"sources[{i}]") for i, s in enumerate(sources)]
    _need(len(set(out["sources"])) == len(out["sources"]), "sources", "domain-id collision: repeated source")
    _need(out["target"] not in out["sources"], "sources", "domain-id collision: target listed as a source")
    if not out["sources"]:
        _need(out["methods"] == [TARGET_ONLY], "sources", "at least one source is required unless method is target-only")

    data = _mapping(cfg.get("data"), "data")
    _keys(data, {"synth", "files", "data_seed"}, "data")
    _need(("synth" in data) != ("files" in data), "data", "give exactly one of synth or files")
    out["data_seed"] = None if data.get("data_seed") is None else _int(data["data_seed"], "data.data_seed", lo=0)
    wanted = [out["target"]] + out["sources"]
    if "synth" in data:
        s = _mapping(data["synth"], "data.synth")
        _keys(s, _SYNTH_FIELDS, "data.synth")
        spec = {}
        for k in ("n_labels", "channels", "length", "n_examples"):
            if k in s:
                spec[k] = _int(s[k], f"data.synth.{k}", lo=1)
        if "noise" in s:
            spec["noise"] = _num(s["noise"], "data.synth.noise")
            _need(spec["noise"] >= 0, "data.synth.noise", "must be >= 0")
        if "frequencies" in s:
            spec["frequencies"] = tuple(_num_list(s["frequencies"], "data.synth.frequencies"))
        if "proportions" in s:
            spec["proportions"] = tuple(_num_list(s["proportions"], "data.synth.proportions"))
        doms = _mapping(s.get("domains", {}), "data.synth.domains")
        shifts = {}
        for k, v in doms.items():
            path = f"data.synth.domains.{k}"
            d = _domain_id(k, path)
            v = _mapping(v, path)
            _keys(v, _SHIFT_FIELDS, path)
            sh = {}
            for f in ("amplitude", "phase"):
                if f in v:
                    sh[f] = _num(v[f], f"{path}.{f}")
            for f in ("channel_scale", "proportions"):
                if f in v:
                    sh[f] = tuple(_num_list(v[f], f"{path}.{f}"))
            shifts[d] = sh
        spec["domains"] = shifts
        try:
            out["synth"] = D.SynthSpec(**spec)
            for d in wanted:
                sh = out["synth"].shift(d)
                if sh.channel_scale is not None:
                    _need(len(sh.channel_scale) == out["synth"].channels, f"data.synth.domains.{d}.channel_scale",
                          "one entry per channel required")
                if sh.proportions is not None:
                    D.LabelDistribution(sh.proportions)
        except ConfigError:
            raise
        except (ValueError, TypeError) as e:
            raise ConfigError(f"data.synth: {e}") from None
        out["files"] = None
    else:
        files = _mapping(data["files"], "data.files")
        out["files"] = {}
        for k, v in files.items():
            _need(isinstance(v, str), f"data.files.{k}", "expected a path")
            out["files"][_domain_id(k, f"data.files.{k}")] = v
        for d in wanted:
            _need(d in out["files"], f"data.files.{d}", "missing file for a configured domain")
        out["synth"] = None

    train = _mapping(cfg.get("train", {}), "train")
    _keys(train, _TRAIN_FIELDS, "train")
    out["train"] = dict(train)
    for k, v in train.items():
        if k in ("iterations", "batch_size", "eval_interval"):
            _int(v, f"train.{k}", 0 if k == "iterations" else 1)
        elif k in ("lr", "gamma", "lambda_constant"):
            out["train"][k] = _num(v, f"train.{k}")
        elif v is not None:
            _need(isinstance(v, str), f"train.{k}", "expected a string")
    try:
        TrainConfig(**out["train"])
    except (ValueError, TypeError) as e:
        raise ConfigError(f"train: {e}") from None

    net = _mapping(cfg.get("net", {}), "net")
    _keys(net, _NET_FIELDS, "net")
    out["net"] = {k: tuple(v) if isinstance(v, list) else v for k, v in net.items()}
    try:
        NetConfig(1, 2, 1, **out["net"])
    except (ValueError, TypeError) as e:
        raise ConfigError(f"net: {e}") from None
    return out


# ------------------------------------------------------------------ data


def load_domains(cfg, seed):
    """{domain id: DomainDataset} for the target and the sources."""
    wanted = [cfg["target"]] + cfg["sources"]
    if cfg["synth"] is not None:
        data_seed = seed if cfg["data_seed"] is None else cfg["data_seed"]
        return {d: D.synth_generate(cfg["synth"], d, data_seed) for d in wanted}
    out, label_map = {}, None
    for d in wanted:
        path = cfg["files"][d]
        if path.lower().endswith(".csv"):
            ds, label_map = dio.read_csv(path, d, label_map)
        else:
            ds = dio.read_tsdb(path)
            if ds.domain_id != d:
                raise ValueError(f"{path}: file holds domain {ds.domain_id}, config expects {d}")
        out[d] = ds
    return out


def prepare_splits(domains, target, sources, seed, method):
    """Stratified splits per domain, normalized with training-split statistics.

    Statistics come from the pooled source training splits (the target
    training split for target-only) and are applied unchanged everywhere else.
    """
    ref = domains[target]
    for d, ds in domains.items():
        if ds.length != ref.length or ds.channels != ref.channels:
            raise ValueError(f"dataset shape mismatch: domain {d} has windows {ds.X.shape[1:]}, "
                             f"domain {target} has {ref.X.shape[1:]}")
        if ds.n_labels != ref.n_labels:
            raise ValueError(f"label-space mismatch: domain {d} has {ds.n_labels} labels, expected {ref.n_labels}")
    raw = {d: D.train_val_test(ds, seed) for d, ds in domains.items()}
    fit_on = [raw[target][0]] if method == TARGET_ONLY else [raw[s][0] for s in sources]
    stats = D.fit_normalizer(fit_on)
    splits = {d: DomainSplits(*[stats.apply(p) for p in parts]) for d, parts in raw.items()}
    return splits, stats


# -------------------------------------------------------------- running


def default_output():
    return os.environ.get(OUTPUT_ENV, "runs")


def _dump(obj):
    return json.dumps(obj, sort_keys=True, allow_nan=True)


def _write_text(path, text):
    dio.atomic_write(path, text.encode())


def run_one(cfg, method, seed, run_dir=None):
    """Train one (method, seed) pair; returns the per-run record."""
    domains = load_domains(cfg, seed)
    sources = [] if method == TARGET_ONLY else cfg["sources"]
    splits, stats = prepare_splits(domains, cfg["target"], sources, seed, method)
    tcfg = TrainConfig(method=method, seed=seed, **cfg["train"])
    target = splits[cfg["target"]]
    net_cfg = NetConfig(target.train.channels, target.train.n_labels, max(1, len(sources)), **cfg["net"])
    trainer = Trainer(tcfg, [splits[s] for s in sources], target, net_cfg).run()
    best = trainer.best()

    accuracy = {}
    for d, sp in splits.items():
        accuracy[str(d)] = {name: evaluate_accuracy(best, ds)[0] for name, ds in sp.splits().items() if len(ds)}
    steps = np.asarray(trainer.step_seconds) if trainer.step_seconds else np.zeros(1)
    final_acc = {}
    for r in trainer.metrics:
        if r.iteration == trainer.iteration:
            final_acc.setdefault(str(splits_key(r.domain, cfg, sources)), {})[r.split] = r.accuracy
    record = {
        "method": method,
        "seed": seed,
        "n_sources": len(sources),
        "target": cfg["target"],
        "sources": sources,
        "best_iteration": trainer.selection.best_iteration,
        "best_selection_metric": trainer.selection.best_metric,
        "best_accuracy": accuracy,
        "final_accuracy": final_acc,
        "best_target_test_accuracy": accuracy[str(cfg["target"])]["test"],
        "step_time_mean_s": float(steps.mean()),
        "step_time_std_s": float(steps.std()),
        "y_true": None if trainer.y_true is None else [float(p) for p in trainer.y_true.p],
        "norm": {"mean": [float(v) for v in stats.mean], "std": [float(v) for v in stats.std]},
    }
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        lines = []
        for r in trainer.metrics:
            d = r.to_dict()
            d["domain"] = splits_key(r.domain, cfg, sources)
            lines.append(_dump(d))
        _write_text(run_dir / "metrics.jsonl", "".join(line + "\n" for line in lines))
        if cfg["checkpoint"]:
            ck = ckpt.from_trainer(trainer)
            ck.meta["norm"] = record["norm"]
            ck.meta["domains"] = {"target": cfg["target"], "sources": sources}
            ckpt.save_checkpoint(run_dir / "checkpoint.ckpt", ck)
        _write_text(run_dir / "run.json", _dump(record) + "\n")
    return record


def splits_key(label, cfg, sources):
    """Map the trainer's domain label (0 target, i source i) back to the config's id."""
    return cfg["target"] if label == 0 else sources[label - 1]


def _aggregate(runs, cfg):
    methods = {}
    for m in cfg["methods"]:
        rs = [r for r in runs if r["method"] == m]
        acc = np.array([r["best_target_test_accuracy"] for r in rs])
        st = np.array([r["step_time_mean_s"] for r in rs])
        methods[m] = {
            "seeds": [r["seed"] for r in rs],
            "best_target_test_accuracy": {"mean": float(acc.mean()), "std": float(acc.std()), "values": acc.tolist()},
            "step_time_mean_s": {"mean": float(st.mean()), "std": float(st.std())},
        }
    return methods


def run_experiment(source, seed=None, output=None, method=None):
    """Run every (method, repetition) of a config; returns the summary dict.

    Outputs are written under a temporary directory and renamed into
    ``<output>/<name>`` only when everything succeeded.
    """
    cfg = load_config(source)
    if seed is not None:
        cfg["seed"] = int(seed)
    if method is not None:
        cfg = validate_config_override(cfg, method)
    root = Path(output or cfg["output"] or default_output())
    final = root / cfg["name"]
    tmp = root / f".{cfg['name']}.tmp{os.getpid()}"
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    try:
        runs = []
        for m in cfg["methods"]:
            for rep in range(cfg["repetitions"]):
                s = cfg["seed"] + rep
                runs.append(run_one(cfg, m, s, tmp / m / f"seed{s}"))
        summary = {
            "name": cfg["name"],
            "target": cfg["target"],
            "sources": cfg["sources"],
            "base_seed": cfg["seed"],
            "repetitions": cfg["repetitions"],
            "methods": _aggregate(runs, cfg),
            "runs": runs,
        }
        _write_text(tmp / "summary.json", json.dumps(summary, sort_keys=True, indent=1) + "\n")
        emit_metrics(tmp)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if final.exists():
        shutil.rmtree(final)
    os.replace(tmp, final)
    summary["output"] = str(final)
    return summary


def validate_config_override(cfg, method):
    if method not in METHODS:
        raise ConfigError(f"--method: unknown method {method!r}; choose from {list(METHODS)}")
    cfg = dict(cfg)
    cfg["methods"] = [method]
    if not cfg["sources"] and method != TARGET_ONLY:
        raise ConfigError("sources: at least one source is required unless method is target-only")
    return cfg


# ------------------------------------------------------------ emission


def read_metrics(path):
    """Parse a metrics.jsonl stream, rejecting truncated or incomplete records."""
    text = Path(path).read_text()
    if text and not text.endswith("\n"):
        raise ValueError(f"{path}: truncated final record")
    out = []
    for i, line in enumerate(text.splitlines(), start=1):
        try:
            d = json.loads(line)
        except json.JSONDecodeError:
            raise ValueError(f"{path}:{i}: unparseable record") from None
        missing = [k for k in METRIC_KEYS if k not in d]
        if missing:
            raise ValueError(f"{path}:{i}: record missing {missing}")
        out.append(MetricsRecord(**{k: d[k] for k in METRIC_KEYS}))
    return out


def emit_metrics(run_root):
    """Validate every run's metrics stream and write ``summary.csv``; returns the rows."""
    run_root = Path(run_root)
    run_files = sorted(run_root.glob("*/seed*/run.json"))
    if not run_files:
        raise FileNotFoundError(f"{run_root}: no run records found")
    rows = []
    for rf in run_files:
        metrics = rf.parent / "metrics.jsonl"
        if not metrics.exists():
            raise FileNotFoundError(f"{metrics}: missing metrics records")
        read_metrics(metrics)
        try:
            rec = json.loads(rf.read_text())
        except json.JSONDecodeError:
            raise ValueError(f"{rf}: truncated run record") from None
        rows.append({k: rec[k] for k in SUMMARY_COLUMNS})
    rows.sort(key=lambda r: (r["method"], r["seed"]))
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in (r[k] for k in SUMMARY_COLUMNS)])
    _write_text(run_root / "summary.csv", buf.getvalue())
    return rows
