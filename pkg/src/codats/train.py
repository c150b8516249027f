"""Adam, the GRL schedule, the four training methods, evaluation and selection."""

import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import data as D
from .net import (
    DOMAIN, FEATURE, TASK, NetConfig, domain_classifier, feature_extractor,
    init_params, predict_logits, task_classifier,
)

NONE = "none"
CODATS = "codats"
CODATS_WS = "codats-ws"
TARGET_ONLY = "target-only"
METHODS = (NONE, CODATS, CODATS_WS, TARGET_ONLY)

MIN_TARGET_FOR_WS = 16


@dataclass
class TrainConfig:
    method: str = CODATS
    iterations: int = 30000
    lr: float = 1e-4
    batch_size: int = 128
    eval_interval: int = 4000
    gamma: float = 10.0
    lambda_schedule: str = "dann"  # or "constant"
    lambda_constant: float = 1.0
    seed: int = 0
    selection: str = "target-val"  # or "source-val"
    policy: str = None  # derived from method and source count when None
    precision: str = "float32"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.iterations < 0 or self.eval_interval < 1 or self.batch_size < 1:
            raise ValueError("iterations >= 0, eval_interval >= 1 and batch_size >= 1 required")
        if self.selection not in ("target-val", "source-val"):
            raise ValueError(f"unknown selection mode {self.selection!r}")
        if self.lambda_schedule not in ("dann", "constant"):
            raise ValueError(f"unknown lambda schedule {self.lambda_schedule!r}")

    def resolved_policy(self, n_sources):
        if self.policy is not None:
            return self.policy
        if self.method == NONE:
            return D.SOURCE_ONLY
        if self.method == TARGET_ONLY:
            return D.TARGET_ONLY
        if n_sources == 1:
            return D.SINGLE_SOURCE
        return D.MULTI_SOURCE_EVEN if self.method == CODATS else D.DAWS_HALF_TARGET

    def to_dict(self):
        return asdict(self)


def eval_points(iterations, interval):
    """0, every ``interval`` steps, and the final iteration."""
    pts = list(range(0, iterations + 1, interval))
    if pts[-1] != iterations:
        pts.append(iterations)
    return pts


def grl_lambda(iteration, total, gamma=10.0):
    if total <= 0:
        raise ValueError("total iterations must be positive")
    if not 0 <= iteration <= total:
        raise ValueError("iteration outside [0, total]")
    p = iteration / total
    return 2.0 / (1.0 + math.exp(-gamma * p)) - 1.0


# -------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls({k: np.zeros_like(a) for k, a in params.items()},
                   {k: np.zeros_like(a) for k, a in params.items()}, 0)


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8, names=None):
    """Bias-corrected Adam update in place; ``names`` limits the parameters touched."""
    names = list(params.keys()) if names is None else names
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for k in names:
        g = grads[k]
        p = params[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {k!r} {p.shape}")
        m = state.m.setdefault(k, np.zeros_like(p))
        v = state.v.setdefault(k, np.zeros_like(p))
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        p -= (lr / bc1) * m / (np.sqrt(v / bc2) + eps)


# ------------------------------------------------------------------ losses


def method_groups(method):
    if method in (CODATS, CODATS_WS):
        return (FEATURE, TASK, DOMAIN)
    return (FEATURE, TASK)


def compute_losses(params, batch, method, lam=0.0, rng=None, y_true=None, reverse=True,
                   min_target=MIN_TARGET_FOR_WS):
    """Training objective for one batch; returns (total, {part: Tensor}).

    task is the mean cross entropy over labelled rows, domain the mean over
    all rows through the GRL, kl the label-proportion term on target rows.
    """
    feats = feature_extractor(batch.x, params, "train")
    logits = task_classifier(feats, params)
    lab = batch.labeled
    if lab.size == 0:
        raise ValueError("batch has no labelled examples")
    lab_logits = logits if lab.size == len(batch.task) else ad.take(logits, lab)
    parts = {"task": ad.softmax_xent(lab_logits, batch.task[lab])}
    if method in (CODATS, CODATS_WS):
        dlogits = domain_classifier(feats, params, lam, rng, "train", reverse=reverse)
        parts["domain"] = ad.softmax_xent(dlogits, batch.domain)
    if method == CODATS_WS:
        if y_true is None:
            raise ValueError("codats-ws needs target label proportions")
        rows = batch.rows_of(D.TARGET_DOMAIN)
        if rows.size < min_target:
            raise ValueError(f"target portion of {rows.size} rows is too small to estimate proportions")
        q = ad.mean_over_batch(ad.softmax(ad.take(logits, rows)))
        parts["kl"] = ad.kl_true_vs_pred(y_true.p, q)
    total = parts["task"]
    for k in ("domain", "kl"):
        if k in parts:
            total = total + parts[k]
    return total, parts


def _check_labels(batch):
    src = batch.domain != D.TARGET_DOMAIN
    if np.any(batch.task[src] < 0):
        raise ValueError("source examples are missing task labels")


def codats_step(store, batch, lam, opt, lr, rng, method=CODATS):
    """One combined update of all three networks (task + reversed domain loss)."""
    _check_labels(batch)
    tape = ad.Tape()
    total, parts = compute_losses(store.bind(tape), batch, method, lam, rng)
    grads = ad.backward(total, tape)
    names = [k for g in method_groups(method) for k in store.group(g)]
    adam_step(store.params, grads, opt, lr, names=names)
    return {k: float(v.values) for k, v in parts.items()} | {"total": float(total.values)}


def daws_step(store, batch, lam, y_true, opt, lr, rng):
    """codats_step plus the KL(Y_true || mean target prediction) regularizer."""
    _check_labels(batch)
    tape = ad.Tape()
    total, parts = compute_losses(store.bind(tape), batch, CODATS_WS, lam, rng, y_true)
    grads = ad.backward(total, tape)
    names = [k for g in method_groups(CODATS_WS) for k in store.group(g)]
    adam_step(store.params, grads, opt, lr, names=names)
    return {k: float(v.values) for k, v in parts.items()} | {"total": float(total.values)}


# -------------------------------------------------------------- evaluation


def evaluate_accuracy(params, ds):
    """Accuracy and an (L, L) confusion matrix (rows true, columns predicted)."""
    if len(ds) == 0:
        raise ValueError("cannot evaluate an empty split")
    x = ds.X.astype(ad.get_dtype(), copy=False)
    pred = predict_logits(x, params).argmax(axis=1)
    conf = np.zeros((ds.n_labels, ds.n_labels), np.int64)
    np.add.at(conf, (ds.y, pred), 1)
    return float(np.mean(pred == ds.y)), conf


def evaluate_losses(params, ds, domain_label, y_true=None, batch_size=512):
    """Inference-mode task/domain cross entropy and KL term over a split."""
    x = ds.X.astype(ad.get_dtype(), copy=False)
    n = len(ds)
    task = dom = 0.0
    probs = []
    correct = 0
    for lo in range(0, n, batch_size):
        xb = x[lo:lo + batch_size]
        yb = ds.y[lo:lo + batch_size]
        feats = feature_extractor(xb, params, "inference")
        logits = task_classifier(feats, params)
        t, p = ad.softmax_xent(logits, yb, return_probs=True)
        task += float(t.values) * len(yb)
        correct += int(np.sum(p.argmax(axis=1) == yb))
        probs.append(p)
        dl = domain_classifier(feats, params, 0.0, None, "inference")
        dom += float(ad.softmax_xent(dl, np.full(len(yb), domain_label)).values) * len(yb)
    kl = None
    if y_true is not None:
        q = np.concatenate(probs).mean(axis=0)
        kl = float(ad.kl_true_vs_pred(y_true.p, q).values)
    return {"accuracy": correct / n, "task_loss": task / n, "domain_loss": dom / n, "kl_term": kl}


# ----------------------------------------------------------------- training


@dataclass
class DomainSplits:
    train: D.DomainDataset
    val: D.DomainDataset
    test: D.DomainDataset

    @property
    def domain_id(self):
        return self.train.domain_id

    def splits(self):
        return {"train": self.train, "val": self.val, "test": self.test}


@dataclass
class MetricsRecord:
    iteration: int
    split: str
    domain: int
    accuracy: float
    task_loss: float
    domain_loss: float
    kl_term: float
    wall_time: float

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError("accuracy outside [0, 1]")

    def to_dict(self):
        return asdict(self)


@dataclass
class Selection:
    best_metric: float = -math.inf
    best_iteration: int = -1
    best: object = None  # ParamStore snapshot


class Trainer:
    """Owns the parameters, optimizer state and generator of one run.

    ``sources`` and ``target`` are :class:`DomainSplits`; sources are domain
    labels 1..n in list order and the target is domain 0.
    """

    def __init__(self, cfg, sources, target, net_cfg=None, y_true=None, store=None):
        self.cfg = cfg
        self.sources = list(sources)
        self.target = target
        _check_domains(self.sources, target, cfg.method)
        n_labels = target.train.n_labels
        if net_cfg is None:
            net_cfg = NetConfig(target.train.channels, n_labels, max(1, len(self.sources)))
        self.net_cfg = net_cfg
        self.policy = cfg.resolved_policy(len(self.sources))
        if cfg.method == CODATS_WS and y_true is None:
            y_true = D.estimate_label_proportions(target.train.y, n_labels)
        self.y_true = y_true
        self.dtype = ad._PRECISIONS[cfg.precision]
        with ad.precision(cfg.precision):
            self.store = store if store is not None else init_params(net_cfg, np.random.default_rng([cfg.seed, 1]))
            self.opt = AdamState.zeros_like(self.store.params)
        self.rng = np.random.default_rng([cfg.seed, 2])
        self.iteration = 0
        self.selection = Selection()
        self.metrics = []
        self.loss_trace = []
        self.step_seconds = []
        self.last_eval = -1
        self._pools = (
            [self._cast(s.train) for s in self.sources],
            self._cast(target.train),
        )
        self._t0 = time.perf_counter()

    def _cast(self, ds):
        return replace(ds, X=ds.X.astype(self.dtype))

    @property
    def eval_points(self):
        return eval_points(self.cfg.iterations, self.cfg.eval_interval)

    def lam(self, iteration):
        if self.cfg.method not in (CODATS, CODATS_WS):
            return 0.0
        if self.cfg.lambda_schedule == "constant":
            return self.cfg.lambda_constant
        return grl_lambda(iteration, max(self.cfg.iterations, 1), self.cfg.gamma)

    def step(self):
        cfg = self.cfg
        src, tgt = self._pools
        t0 = time.perf_counter()
        with ad.precision(cfg.precision):
            batch = D.compose_batch(src, tgt, cfg.batch_size, self.policy, self.rng)
            lam = self.lam(self.iteration)
            if cfg.method == CODATS_WS:
                losses = daws_step(self.store, batch, lam, self.y_true, self.opt, cfg.lr, self.rng)
            else:
                losses = codats_step(self.store, batch, lam, self.opt, cfg.lr, self.rng, cfg.method)
        self.step_seconds.append(time.perf_counter() - t0)
        self.iteration += 1
        self.loss_trace.append(losses["total"])
        return losses

    def evaluate(self):
        """Record metrics for every split of every domain and update selection."""
        wall = time.perf_counter() - self._t0
        recs = []
        with ad.precision(self.cfg.precision):
            domains = [(D.TARGET_DOMAIN, self.target)] + [(i + 1, s) for i, s in enumerate(self.sources)]
            for label, splits in domains:
                y_true = self.y_true if label == D.TARGET_DOMAIN else None
                for name, ds in splits.splits().items():
                    if len(ds) == 0:
                        continue
                    m = evaluate_losses(self.store, ds, label, y_true)
                    recs.append(MetricsRecord(self.iteration, name, label, m["accuracy"],
                                              m["task_loss"], m["domain_loss"], m["kl_term"], wall))
        self.metrics.extend(recs)
        self.last_eval = self.iteration
        metric = self._selection_metric(recs)
        if metric > self.selection.best_metric:
            self.selection = Selection(metric, self.iteration, self.store.copy())
        return recs

    def _selection_metric(self, recs):
        if self.cfg.selection == "target-val":
            vals = [r.accuracy for r in recs if r.domain == D.TARGET_DOMAIN and r.split == "val"]
        else:
            vals = [r.accuracy for r in recs if r.domain != D.TARGET_DOMAIN and r.split == "val"]
        if not vals:
            raise ValueError(f"no validation split available for selection mode {self.cfg.selection}")
        return float(np.mean(vals))

    def run(self, until=None, on_eval=None):
        """Train up to ``until`` iterations (default: the full budget)."""
        until = self.cfg.iterations if until is None else min(until, self.cfg.iterations)
        points = set(self.eval_points)
        if self.iteration in points and self.last_eval != self.iteration:
            self.evaluate()
            if on_eval:
                on_eval(self)
        while self.iteration < until:
            self.step()
            if self.iteration in points:
                self.evaluate()
                if on_eval:
                    on_eval(self)
        return self

    @property
    def done(self):
        return self.iteration >= self.cfg.iterations

    def best(self):
        return self.selection.best if self.selection.best is not None else self.store


def _check_domains(sources, target, method):
    if method != TARGET_ONLY and not sources:
        raise ValueError(f"method {method!r} needs at least one source domain")
    ref = target.train
    ids = [ref.domain_id]
    for s in sources:
        if s.train.n_labels != ref.n_labels:
            raise ValueError("label-space mismatch across domains")
        if s.train.channels != ref.channels:
            raise ValueError("channel-count mismatch across domains")
        ids.append(s.train.domain_id)
    if len(set(ids)) != len(ids):
        raise ValueError("domain-id collision between target and sources")


def train_loop(cfg, sources, target, net_cfg=None, y_true=None):
    """Run a full training and return (best ParamStore, metrics, trainer)."""
    trainer = Trainer(cfg, sources, target, net_cfg, y_true).run()
    return trainer.best(), trainer.metrics, trainer


def bench_step_time(cfg, sources, target, net_cfg=None, warmup=20, measured=100):
    """Mean and standard deviation of seconds per training iteration."""
    if measured < 10:
        raise ValueError("measure at least 10 iterations")
    trainer = Trainer(cfg, sources, target, net_cfg)
    for _ in range(warmup):
        trainer.step()
    times = []
    for _ in range(measured):
        t = time.perf_counter()
        trainer.step()
        times.append(time.perf_counter() - t)
    times = np.asarray(times)
    return float(times.mean()), float(times.std(ddof=1))
