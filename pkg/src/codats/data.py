"""Domain datasets, preprocessing, synthetic generation and batch plans."""

import math
from dataclasses import dataclass, field, replace

import numpy as np

TARGET_DOMAIN = 0

SINGLE_SOURCE = "single-source"
MULTI_SOURCE_EVEN = "multi-source-even"
DAWS_HALF_TARGET = "daws-half-target"
SOURCE_ONLY = "source-only"
TARGET_ONLY = "target-only"
POLICIES = (SINGLE_SOURCE, MULTI_SOURCE_EVEN, DAWS_HALF_TARGET, SOURCE_ONLY, TARGET_ONLY)


@dataclass
class DomainDataset:
    """Windows X (N, H, K), integer labels y (N,), and the owning domain id."""

    X: np.ndarray
    y: np.ndarray
    domain_id: int
    n_labels: int
    split: str = "all"

    def __post_init__(self):
        self.X = np.asarray(self.X)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 3:
            raise ValueError(f"X must be (N, H, K), got shape {self.X.shape}")
        if self.y.shape != (self.X.shape[0],):
            raise ValueError("one label per window required")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.n_labels):
            raise ValueError("label outside [0, n_labels)")
        if self.domain_id < 0:
            raise ValueError("domain id must be non-negative")

    def __len__(self):
        return self.X.shape[0]

    @property
    def length(self):
        return self.X.shape[1]

    @property
    def channels(self):
        return self.X.shape[2]

    def subset(self, idx, split):
        return replace(self, X=self.X[idx], y=self.y[idx], split=split)


@dataclass
class LabelDistribution:
    p: np.ndarray

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64)
        if self.p.ndim != 1 or self.p.size < 1:
            raise ValueError("label distribution must be a non-empty vector")
        if np.any(self.p < 0) or abs(self.p.sum() - 1.0) > 1e-9:
            raise ValueError("label proportions must be non-negative and sum to 1")

    def __len__(self):
        return self.p.size


# ---------------------------------------------------------------- windowing


def window_stream(series, labels, width=128, step=None):
    """Cut a (T, K) stream into fixed windows labelled by majority vote.

    The trailing remainder shorter than ``width`` is dropped; vote ties go to
    the smaller label.
    """
    step = width if step is None else step
    if width < 1 or step < 1:
        raise ValueError("width and step must be >= 1")
    series = np.asarray(series)
    labels = np.asarray(labels, dtype=np.int64)
    if series.shape[0] != labels.shape[0]:
        raise ValueError("one label per time step required")
    out = []
    for start in range(0, series.shape[0] - width + 1, step):
        counts = np.bincount(labels[start:start + width])
        out.append((series[start:start + width], int(np.argmax(counts))))
    return out


def pad_right(series, target_len):
    series = np.asarray(series)
    h = series.shape[0]
    if h > target_len:
        raise ValueError(f"series of length {h} exceeds target length {target_len}")
    pad = [(0, target_len - h)] + [(0, 0)] * (series.ndim - 1)
    return np.pad(series, pad)


# ------------------------------------------------------------------- splits


def stratified_split(ds, fraction=0.8, seed=0):
    """Per-label seeded split; the first side gets round(fraction * count_y)."""
    rng = np.random.default_rng(seed)
    train_idx, hold_idx = [], []
    for c in range(ds.n_labels):
        idx = np.flatnonzero(ds.y == c)
        if idx.size == 0:
            continue
        if idx.size < 2:
            raise ValueError(f"label {c} has fewer than 2 examples; cannot stratify")
        idx = rng.permutation(idx)
        # round half toward the train side
        n_train = int(math.floor(fraction * idx.size + 0.5 + 1e-9))
        train_idx.append(idx[:n_train])
        hold_idx.append(idx[n_train:])
    train = np.sort(np.concatenate(train_idx)) if train_idx else np.zeros(0, np.int64)
    hold = np.sort(np.concatenate(hold_idx)) if hold_idx else np.zeros(0, np.int64)
    return ds.subset(train, "train"), ds.subset(hold, "holdout")


def train_val_test(ds, seed=0, fraction=0.8):
    """80/20 train/test, then 80/20 train/validation, all stratified."""
    rest, test = stratified_split(ds, fraction, seed)
    train, val = stratified_split(rest, fraction, seed + 1)
    return replace(train, split="train"), replace(val, split="val"), replace(test, split="test")


# ------------------------------------------------------------ normalization


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, ds):
        X = ((ds.X - self.mean) / self.std).astype(ds.X.dtype)
        return replace(ds, X=X)


STD_FLOOR = 1e-8


def fit_normalizer(train):
    """Per-channel statistics over every window and step of the given split(s)."""
    parts = train if isinstance(train, (list, tuple)) else [train]
    X = np.concatenate([p.X.reshape(-1, p.channels) for p in parts]).astype(np.float64)
    if X.shape[0] == 0:
        raise ValueError("cannot fit normalization on an empty training split")
    mean = X.mean(axis=0)
    std = np.maximum(X.std(axis=0), STD_FLOOR)
    return NormStats(mean, std)


def fit_apply_normalizer(train, others=()):
    stats = fit_normalizer(train)
    parts = train if isinstance(train, (list, tuple)) else [train]
    return stats, [stats.apply(p) for p in parts] + [stats.apply(o) for o in others]


def estimate_label_proportions(labels, n_labels):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("cannot estimate proportions of an empty label list")
    counts = np.bincount(labels, minlength=n_labels)[:n_labels]
    return LabelDistribution(counts / counts.sum())


def largest_remainder(total, proportions):
    """Integer counts summing to ``total`` closest to total * proportions."""
    p = np.asarray(proportions, dtype=np.float64)
    raw = total * p
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short:
        # stable sort keeps ties on the lower label
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


# ---------------------------------------------------------------- synthetic


@dataclass
class DomainShift:
    amplitude: float = 1.0
    phase: float = 0.0
    channel_scale: tuple = None
    proportions: tuple = None


@dataclass
class SynthSpec:
    """Sinusoid-per-label generator with per-domain amplitude/phase/scaling."""

    n_labels: int = 4
    channels: int = 3
    length: int = 64
    frequencies: tuple = (2.0, 3.0, 4.0, 5.0)
    noise: float = 0.5
    n_examples: int = 400
    proportions: tuple = None
    domains: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frequencies = tuple(float(f) for f in self.frequencies)
        if len(self.frequencies) != self.n_labels:
            raise ValueError("one frequency per label required")
        if len(set(self.frequencies)) != len(self.frequencies):
            raise ValueError("label frequencies must be distinct")
        if self.proportions is None:
            self.proportions = tuple([1.0 / self.n_labels] * self.n_labels)
        LabelDistribution(self.proportions)
        self.domains = {int(k): v if isinstance(v, DomainShift) else DomainShift(**v)
                        for k, v in self.domains.items()}

    def shift(self, domain_id):
        return self.domains.get(domain_id, DomainShift())


def synth_generate(spec, domain_id, seed):
    """value[c, j, t] = A_d * scale_j * sin(2 pi f_c t / H + phi_d) + noise."""
    rng = np.random.default_rng([seed, domain_id])
    sh = spec.shift(domain_id)
    props = sh.proportions if sh.proportions is not None else spec.proportions
    counts = largest_remainder(spec.n_examples, LabelDistribution(props).p)
    scale = np.ones(spec.channels) if sh.channel_scale is None else np.asarray(sh.channel_scale, float)
    if scale.shape != (spec.channels,):
        raise ValueError("channel_scale needs one entry per channel")
    y = np.repeat(np.arange(spec.n_labels), counts)
    y = y[rng.permutation(y.size)]
    t = np.arange(spec.length)
    f = np.asarray(spec.frequencies)[y]
    wave = np.sin(2 * np.pi * f[:, None] * t[None, :] / spec.length + sh.phase)
    X = sh.amplitude * wave[:, :, None] * scale[None, None, :]
    if spec.noise > 0:
        X = X + rng.normal(0.0, spec.noise, size=X.shape)
    return DomainDataset(X.astype(np.float32), y, domain_id, spec.n_labels)


# ----------------------------------------------------------- batch planning


@dataclass
class MixedBatch:
    """Training batch; task labels are -1 where unknown (target examples)."""

    x: np.ndarray
    task: np.ndarray
    domain: np.ndarray
    counts: dict

    @property
    def labeled(self):
        return np.flatnonzero(self.task >= 0)

    def rows_of(self, domain_id):
        return np.flatnonzero(self.domain == domain_id)


def _spread(total, parts):
    base, extra = divmod(total, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


def batch_plan(n_sources, batch_size, policy):
    """Per-domain example counts {domain_id: count}; target is domain 0."""
    if batch_size < 1:
        raise ValueError("batch size must be positive")
    n = n_sources
    if policy == SINGLE_SOURCE:
        if n != 1:
            raise ValueError("single-source policy needs exactly one source")
        return dict(enumerate(_spread(batch_size, 2)))
    if policy == MULTI_SOURCE_EVEN:
        return dict(enumerate(_spread(batch_size, n + 1)))
    if policy == DAWS_HALF_TARGET:
        tgt = _spread(batch_size, 2)[0]
        plan = {0: tgt}
        plan.update({i + 1: c for i, c in enumerate(_spread(batch_size - tgt, n))})
        return plan
    if policy == SOURCE_ONLY:
        return {i + 1: c for i, c in enumerate(_spread(batch_size, n))}
    if policy == TARGET_ONLY:
        return {0: batch_size}
    raise ValueError(f"unknown batch policy {policy!r}")


def compose_batch(sources, target, batch_size, policy, rng):
    """Sample a batch (with replacement within each domain) per the policy.

    ``sources[i]`` is labelled domain i+1; ``target`` is domain 0 and only
    carries task labels under the target-only policy.
    """
    plan = batch_plan(len(sources), batch_size, policy)
    pools = {0: target}
    pools.update({i + 1: s for i, s in enumerate(sources)})
    xs, tasks, doms = [], [], []
    for d in sorted(plan):
        k = plan[d]
        if k == 0:
            continue
        ds = pools[d]
        if ds is None or len(ds) == 0:
            raise ValueError(f"domain {d} has no training examples")
        idx = rng.integers(0, len(ds), size=k)
        xs.append(ds.X[idx])
        labeled = d != 0 or policy == TARGET_ONLY
        tasks.append(ds.y[idx] if labeled else np.full(k, -1, np.int64))
        doms.append(np.full(k, d, np.int64))
    return MixedBatch(np.concatenate(xs), np.concatenate(tasks), np.concatenate(doms), plan)
