"""Binary checkpoints of a training run.

Layout (all integers little-endian)::

    "CKPT"  u16 version
    u32 n, then n bytes of UTF-8 JSON: network and training configs, dtype,
        label proportions, metrics history, last evaluation point
    tensor block: parameters, then batch-norm running mean/var
    u64 Adam timestep, tensor block of first moments, tensor block of second moments
    u64 iteration
    u32 n, then n bytes of UTF-8 JSON generator state
    f64 best metric, i64 best iteration, u8 has snapshot, [tensor block]

A tensor block is a u32 count of records; a record is a u32-length UTF-8 name,
u32 rank, rank u32 extents and the values as f64.
"""

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import BatchNormState
from .io import FormatError, atomic_write
from .net import NetConfig, ParamStore, param_shapes

MAGIC = b"CKPT"
VERSION = 1

_RUNNING = (".running_mean", ".running_var")


class VersionError(FormatError):
    pass


@dataclass
class Checkpoint:
    iteration: int
    store: ParamStore
    adam_t: int
    adam_m: dict
    adam_v: dict
    rng_state: dict
    best_metric: float = -math.inf
    best_iteration: int = -1
    best: ParamStore = None
    meta: dict = field(default_factory=dict)
    version: int = VERSION


# -------------------------------------------------------------- encoding


def _tensors_of(store):
    out = dict(store.params)
    for name, st in store.bn.items():
        out[name + _RUNNING[0]] = st.mean
        out[name + _RUNNING[1]] = st.var
    return out


def _block(tensors):
    parts = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode()
        arr = np.asarray(arr)
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, "<f8").tobytes())
    return b"".join(parts)


def _json(obj):
    raw = json.dumps(obj, sort_keys=True).encode()
    return struct.pack("<I", len(raw)) + raw


def checkpoint_bytes(ck):
    parts = [MAGIC, struct.pack("<H", ck.version), _json(ck.meta), _block(_tensors_of(ck.store))]
    parts += [struct.pack("<Q", ck.adam_t), _block(ck.adam_m), _block(ck.adam_v)]
    parts += [struct.pack("<Q", ck.iteration), _json(ck.rng_state)]
    parts.append(struct.pack("<dqB", ck.best_metric, ck.best_iteration, ck.best is not None))
    if ck.best is not None:
        parts.append(_block(_tensors_of(ck.best)))
    return b"".join(parts)


def save_checkpoint(path, ck):
    atomic_write(path, checkpoint_bytes(ck))


# -------------------------------------------------------------- decoding


class _Reader:
    def __init__(self, buf):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise FormatError("truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def json(self):
        (n,) = self.unpack("<I")
        try:
            return json.loads(bytes(self.take(n)).decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"corrupt checkpoint metadata: {e}") from None

    def block(self):
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            (n,) = self.unpack("<I")
            name = bytes(self.take(n)).decode()
            (rank,) = self.unpack("<I")
            shape = self.unpack(f"<{rank}I") if rank else ()
            size = int(np.prod(shape, dtype=np.int64))
            out[name] = np.frombuffer(self.take(8 * size), "<f8").reshape(shape).copy()
        return out


def _store_from(tensors, net_cfg, dtype):
    shapes = param_shapes(net_cfg)
    bn_names = [f"feature.bn{i}" for i in range(len(net_cfg.filters))]
    expected = set(shapes) | {b + r for b in bn_names for r in _RUNNING}
    if set(tensors) != expected:
        missing = sorted(expected - set(tensors))
        extra = sorted(set(tensors) - expected)
        raise KeyError(f"checkpoint names do not match the network config (missing {missing}, unexpected {extra})")
    params, groups = {}, {}
    for name, (shape, group) in shapes.items():
        if tensors[name].shape != tuple(shape):
            raise ValueError(f"{name}: checkpoint shape {tensors[name].shape}, network expects {shape}")
        params[name] = tensors[name].astype(dtype)
        groups[name] = group
    bn = {
        b: BatchNormState(tensors[b + _RUNNING[0]].astype(dtype), tensors[b + _RUNNING[1]].astype(dtype),
                          net_cfg.bn_momentum, net_cfg.bn_eps)
        for b in bn_names
    }
    return ParamStore(net_cfg, params, groups, bn)


def parse_checkpoint(buf, net_cfg=None):
    """Decode checkpoint bytes.

    ``net_cfg`` (the caller's current network config) is checked against the
    stored one by parameter name and shape; by default the stored config is used.
    """
    r = _Reader(buf)
    if bytes(r.take(4)) != MAGIC:
        raise FormatError("not a checkpoint file")
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise VersionError(f"checkpoint version {version} is not supported (expected {VERSION})")
    meta = r.json()
    stored_cfg = NetConfig.from_dict(meta["net"])
    cfg = net_cfg if net_cfg is not None else stored_cfg
    dtype = np.dtype(meta.get("dtype", "float32"))
    store = _store_from(r.block(), cfg, dtype)
    (t,) = r.unpack("<Q")
    m = {k: v.astype(dtype) for k, v in r.block().items()}
    v = {k: a.astype(dtype) for k, a in r.block().items()}
    (iteration,) = r.unpack("<Q")
    rng_state = r.json()
    best_metric, best_iteration, has_best = r.unpack("<dqB")
    best = _store_from(r.block(), cfg, dtype) if has_best else None
    if r.pos != len(r.buf):
        raise FormatError("trailing bytes after checkpoint")
    for moments in (m, v):
        if t and set(moments) != set(store.params):
            raise KeyError("optimizer state names do not match the parameters")
    return Checkpoint(iteration, store, t, m, v, rng_state, best_metric, best_iteration, best, meta, version)


def load_checkpoint(path, net_cfg=None):
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read(), net_cfg)


# ----------------------------------------------------- trainer round trip


def from_trainer(trainer):
    meta = {
        "net": trainer.net_cfg.to_dict(),
        "train": trainer.cfg.to_dict(),
        "dtype": np.dtype(trainer.dtype).name,
        "y_true": None if trainer.y_true is None else [float(p) for p in np.asarray(getattr(trainer.y_true, "p", trainer.y_true))],
        "last_eval": trainer.last_eval,
        "metrics": [r.to_dict() for r in trainer.metrics],
        "loss_trace": [float(x) for x in trainer.loss_trace],
    }
    sel = trainer.selection
    return Checkpoint(
        trainer.iteration, trainer.store.copy(), trainer.opt.t,
        {k: a.copy() for k, a in trainer.opt.m.items()},
        {k: a.copy() for k, a in trainer.opt.v.items()},
        trainer.rng.bit_generator.state,
        sel.best_metric, sel.best_iteration,
        None if sel.best is None else sel.best.copy(), meta,
    )


def restore_trainer(trainer, ck):
    """Load checkpoint state into a trainer built with the same config and data."""
    from .train import AdamState, MetricsRecord, Selection

    if ck.store.cfg != trainer.net_cfg:
        raise ValueError("checkpoint network config differs from the trainer's")
    trainer.store = ck.store.copy()
    trainer.opt = AdamState({k: a.copy() for k, a in ck.adam_m.items()},
                            {k: a.copy() for k, a in ck.adam_v.items()}, ck.adam_t)
    trainer.rng.bit_generator.state = ck.rng_state
    trainer.iteration = ck.iteration
    trainer.selection = Selection(ck.best_metric, ck.best_iteration,
                                  None if ck.best is None else ck.best.copy())
    trainer.last_eval = ck.meta.get("last_eval", -1)
    trainer.metrics = [MetricsRecord(**d) for d in ck.meta.get("metrics", [])]
    trainer.loss_trace = list(ck.meta.get("loss_trace", []))
    return trainer
