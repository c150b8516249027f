"""Dataset files: the TSDB binary container and the per-domain CSV import."""

import csv
import os
import struct

import numpy as np

from .data import DomainDataset

TSDB_MAGIC = b"TSDB"
TSDB_VERSION = 1
_HEAD = struct.Struct("<4sHIIII")


class FormatError(ValueError):
    pass


def atomic_write(path, data):
    """Write bytes under a temporary name, then rename into place."""
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def tsdb_bytes(ds):
    N, H, K = ds.X.shape
    parts = [
        _HEAD.pack(TSDB_MAGIC, TSDB_VERSION, N, H, K, ds.n_labels),
        np.ascontiguousarray(ds.X, "<f4").tobytes(),
        np.ascontiguousarray(ds.y, "<i4").tobytes(),
        struct.pack("<I", ds.domain_id),
    ]
    return b"".join(parts)


def write_tsdb(path, ds):
    atomic_write(path, tsdb_bytes(ds))


def parse_tsdb(buf):
    if len(buf) < _HEAD.size:
        raise FormatError("truncated TSDB header")
    magic, version, N, H, K, L = _HEAD.unpack_from(buf)
    if magic != TSDB_MAGIC:
        raise FormatError(f"not a TSDB file (magic {magic!r})")
    if version != TSDB_VERSION:
        raise FormatError(f"unsupported TSDB version {version}")
    nv = N * H * K
    need = _HEAD.size + 4 * nv + 4 * N + 4
    if len(buf) != need:
        raise FormatError(f"TSDB size {len(buf)} does not match header (expected {need})")
    off = _HEAD.size
    X = np.frombuffer(buf, "<f4", nv, off).reshape(N, H, K).astype(np.float32)
    off += 4 * nv
    y = np.frombuffer(buf, "<i4", N, off).astype(np.int64)
    (domain,) = struct.unpack_from("<I", buf, off + 4 * N)
    return DomainDataset(X, y, domain, L)


def read_tsdb(path):
    with open(path, "rb") as fh:
        return parse_tsdb(fh.read())


def _label_key(sym):
    # numeric symbols sort numerically, everything else lexically after them
    try:
        return (0, float(sym), "")
    except ValueError:
        return (1, 0.0, sym)


def read_csv(path, domain_id, label_map=None):
    """Import one domain from ``window_id,step,feature_0..,label`` rows.

    Returns the dataset and the symbol -> index map. Pass ``label_map`` to
    share one label space across domains.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        K = len(header) - 3
        want = ["window_id", "step"] + [f"feature_{i}" for i in range(K)] + ["label"]
        if K < 1 or header != want:
            raise FormatError(f"{path}: bad header {header}")
        windows, order = {}, []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != K + 3:
                raise FormatError(f"{path}:{lineno}: expected {K + 3} fields, got {len(row)}")
            wid = row[0]
            if wid not in windows:
                windows[wid] = []
                order.append(wid)
            elif order[-1] != wid:
                raise FormatError(f"{path}:{lineno}: window {wid} is not contiguous")
            steps = windows[wid]
            try:
                step = int(row[1])
                feats = [float(v) for v in row[2:-1]]
            except ValueError as e:
                raise FormatError(f"{path}:{lineno}: {e}") from None
            if step != len(steps):
                raise FormatError(f"{path}:{lineno}: window {wid} step {step} out of sequence")
            steps.append((feats, row[-1].strip()))
    if not order:
        raise FormatError(f"{path}: no rows")
    H = len(windows[order[0]])
    X = np.empty((len(order), H, K), np.float32)
    syms = []
    for i, wid in enumerate(order):
        steps = windows[wid]
        if len(steps) != H:
            raise FormatError(f"{path}: window {wid} has {len(steps)} steps, expected {H}")
        labels = {s for _, s in steps}
        if len(labels) != 1:
            raise FormatError(f"{path}: window {wid} mixes labels {sorted(labels)}")
        X[i] = [f for f, _ in steps]
        syms.append(steps[0][1])
    if label_map is None:
        label_map = {s: i for i, s in enumerate(sorted(set(syms), key=_label_key))}
    missing = set(syms) - set(label_map)
    if missing:
        raise FormatError(f"{path}: labels {sorted(missing)} not in the label map")
    y = np.array([label_map[s] for s in syms], np.int64)
    return DomainDataset(X, y, domain_id, len(label_map)), label_map
