"""The CoDATS feature extractor, task classifier and domain classifier."""

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState

FEATURE = "feature"
TASK = "task"
DOMAIN = "domain"


@dataclass(frozen=True)
class NetConfig:
    """Network shape. The defaults are the full-size architecture.

    ``filters``, ``kernels`` and ``domain_widths`` may be shrunk for
    verification and desk-scale runs.
    """

    in_channels: int
    n_labels: int
    n_sources: int = 1
    filters: tuple = (128, 256, 128)
    kernels: tuple = (8, 5, 3)
    domain_widths: tuple = (500, 500, 500)
    dropout: float = 0.3
    bn_momentum: float = 0.99
    bn_eps: float = 1e-3

    def __post_init__(self):
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")
        if self.n_labels < 2:
            raise ValueError("n_labels must be >= 2")
        if self.n_sources < 1:
            raise ValueError("n_sources must be >= 1")
        if len(self.filters) != len(self.kernels):
            raise ValueError("filters and kernels must have equal length")
        object.__setattr__(self, "filters", tuple(int(f) for f in self.filters))
        object.__setattr__(self, "kernels", tuple(int(k) for k in self.kernels))
        object.__setattr__(self, "domain_widths", tuple(int(w) for w in self.domain_widths))

    @property
    def n_domains(self):
        return self.n_sources + 1

    @property
    def feature_width(self):
        return self.filters[-1]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def param_shapes(cfg):
    """Ordered {name: (shape, group)} for every trainable parameter."""
    shapes = {}
    cin = cfg.in_channels
    for i, (f, k) in enumerate(zip(cfg.filters, cfg.kernels)):
        shapes[f"feature.conv{i}.w"] = ((k, cin, f), FEATURE)
        shapes[f"feature.bn{i}.gamma"] = ((f,), FEATURE)
        shapes[f"feature.bn{i}.beta"] = ((f,), FEATURE)
        cin = f
    shapes["task.dense.w"] = ((cfg.feature_width, cfg.n_labels), TASK)
    shapes["task.dense.b"] = ((cfg.n_labels,), TASK)
    widths = (cfg.feature_width,) + cfg.domain_widths + (cfg.n_domains,)
    for i in range(len(widths) - 1):
        shapes[f"domain.dense{i}.w"] = ((widths[i], widths[i + 1]), DOMAIN)
        shapes[f"domain.dense{i}.b"] = ((widths[i + 1],), DOMAIN)
    return shapes


def count_params(cfg):
    """Closed-form trainable parameter count."""
    n = 0
    cin = cfg.in_channels
    for f, k in zip(cfg.filters, cfg.kernels):
        n += k * cin * f + 2 * f
        cin = f
    n += (cfg.feature_width + 1) * cfg.n_labels
    widths = (cfg.feature_width,) + cfg.domain_widths + (cfg.n_domains,)
    n += sum((a + 1) * b for a, b in zip(widths[:-1], widths[1:]))
    return n


class ParamStore:
    """Named trainable arrays plus non-trainable batch-norm state."""

    def __init__(self, cfg, params, groups, bn):
        self.cfg = cfg
        self.params = params
        self.groups = groups
        self.bn = bn

    def __getitem__(self, name):
        return self.params[name]

    def __setitem__(self, name, value):
        self.params[name] = value

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def keys(self):
        return self.params.keys()

    def items(self):
        return self.params.items()

    def group(self, group):
        return [k for k, g in self.groups.items() if g == group]

    def n_trainable(self):
        return int(sum(v.size for v in self.params.values()))

    def bind(self, tape):
        return BoundParams(self, {k: tape.watch(k, v) for k, v in self.params.items()})

    def copy(self):
        return ParamStore(
            self.cfg,
            {k: v.copy() for k, v in self.params.items()},
            dict(self.groups),
            {k: s.copy() for k, s in self.bn.items()},
        )

    def astype(self, dtype):
        out = self.copy()
        out.params = {k: v.astype(dtype) for k, v in out.params.items()}
        for s in out.bn.values():
            s.mean = s.mean.astype(dtype)
            s.var = s.var.astype(dtype)
        return out


class BoundParams:
    """A ParamStore view whose parameters are leaves on a tape."""

    def __init__(self, store, tensors):
        self.store = store
        self.tensors = tensors
        self.cfg = store.cfg
        self.bn = store.bn

    def __getitem__(self, name):
        return self.tensors[name]

    def keys(self):
        return self.tensors.keys()


def init_params(cfg, rng):
    """Glorot-uniform weights, zero biases, unit gamma, zero beta."""
    dtype = ad.get_dtype()
    params, groups = {}, {}
    for name, (shape, group) in param_shapes(cfg).items():
        kind = name.rsplit(".", 1)[1]
        if kind == "w":
            if len(shape) == 3:
                k, cin, f = shape
                fan_in, fan_out = k * cin, k * f
            else:
                fan_in, fan_out = shape
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            arr = rng.uniform(-bound, bound, size=shape).astype(dtype)
        elif kind == "gamma":
            arr = np.ones(shape, dtype)
        else:
            arr = np.zeros(shape, dtype)
        params[name] = arr
        groups[name] = group
    bn = {
        f"feature.bn{i}": BatchNormState.fresh(f, cfg.bn_momentum, cfg.bn_eps, dtype)
        for i, f in enumerate(cfg.filters)
    }
    return ParamStore(cfg, params, groups, bn)


def _width(x, expected, what):
    if ad._values(x).shape[-1] != expected:
        raise ValueError(f"{what} expects width {expected}, got {ad._values(x).shape[-1]}")


def _dense(x, params, prefix):
    return ad.add_bias(ad.matmul(x, params[prefix + ".w"]), params[prefix + ".b"])


def feature_extractor(x, params, mode="train"):
    """conv -> BN -> ReLU, three times, then global average pooling."""
    cfg = params.cfg
    _width(x, cfg.in_channels, "feature_extractor")
    h = x
    for i in range(len(cfg.filters)):
        h = ad.conv1d_same(h, params[f"feature.conv{i}.w"])
        h = ad.batchnorm1d(
            h, params[f"feature.bn{i}.gamma"], params[f"feature.bn{i}.beta"],
            params.bn[f"feature.bn{i}"], mode,
        )
        h = ad.relu(h)
    return ad.global_avg_pool(h)


def task_classifier(features, params):
    _width(features, params.cfg.feature_width, "task_classifier")
    return _dense(features, params, "task.dense")


def domain_classifier(features, params, lam=1.0, rng=None, mode="train", reverse=True):
    """GRL, hidden dense+ReLU+dropout layers, then n+1 domain logits.

    ``reverse=False`` drops the gradient reversal (used to check the GRL).
    """
    cfg = params.cfg
    _width(features, cfg.feature_width, "domain_classifier")
    h = ad.grl(features, lam) if reverse else features
    for i in range(len(cfg.domain_widths)):
        h = ad.relu(_dense(h, params, f"domain.dense{i}"))
        h = ad.dropout(h, cfg.dropout, rng, mode)
    return _dense(h, params, f"domain.dense{len(cfg.domain_widths)}")


def predict_logits(x, params, batch_size=512):
    """Task logits in inference mode, evaluated in chunks."""
    out = []
    for lo in range(0, len(x), batch_size):
        feats = feature_extractor(x[lo:lo + batch_size], params, "inference")
        out.append(task_classifier(feats, params).values)
    return np.concatenate(out) if out else np.zeros((0, params.cfg.n_labels))
