import struct

import numpy as np
import pytest

from codats import checkpoint as C
from codats import data as D
from codats import train as T
from codats.io import FormatError
from codats.net import NetConfig


def trainer(method=T.CODATS_WS, iterations=20, precision="float32"):
    spec = D.SynthSpec(n_labels=2, channels=2, length=16, frequencies=(1, 4), n_examples=60,
                       domains={0: {"amplitude": 1.5}})
    splits = [T.DomainSplits(*D.train_val_test(D.synth_generate(spec, d, 0), 0)) for d in (0, 1)]
    cfg = T.TrainConfig(method=method, iterations=iterations, eval_interval=5, batch_size=40,
                        precision=precision, lr=1e-3)
    return T.Trainer(cfg, [splits[1]], splits[0], NetConfig(2, 2, 1, filters=(4, 8, 4), domain_widths=(8, 8, 8)))


def same_store(a, b):
    assert a.keys() == b.keys()
    for k in a.keys():
        assert a[k].dtype == b[k].dtype and a[k].tobytes() == b[k].tobytes(), k
    for k in a.bn:
        assert a.bn[k].mean.tobytes() == b.bn[k].mean.tobytes()
        assert a.bn[k].var.tobytes() == b.bn[k].var.tobytes()


@pytest.mark.parametrize("precision", ["float32", "float64"])
def test_round_trip_bit_identical(tmp_path, precision):
    tr = trainer(precision=precision).run(until=7)
    ck = C.from_trainer(tr)
    p = tmp_path / "run.ckpt"
    C.save_checkpoint(p, ck)
    back = C.load_checkpoint(p)
    same_store(ck.store, back.store)
    same_store(ck.best, back.best)
    assert back.iteration == 7 and back.adam_t == 7
    assert back.best_iteration == ck.best_iteration and back.best_metric == ck.best_metric
    assert back.rng_state == ck.rng_state
    for k in ck.adam_m:
        assert back.adam_m[k].tobytes() == ck.adam_m[k].tobytes()
        assert back.adam_v[k].tobytes() == ck.adam_v[k].tobytes()
    assert C.checkpoint_bytes(back) == C.checkpoint_bytes(ck)


def test_resume_reproduces_trajectory():
    full = trainer().run()
    part = trainer().run(until=8)
    buf = C.checkpoint_bytes(C.from_trainer(part))
    resumed = C.restore_trainer(trainer(), C.parse_checkpoint(buf)).run()
    assert resumed.loss_trace == full.loss_trace
    same_store(resumed.store, full.store)
    assert resumed.selection.best_iteration == full.selection.best_iteration
    key = lambda t: [(r.iteration, r.split, r.domain, r.accuracy, r.task_loss) for r in t.metrics]
    assert key(resumed) == key(full)


def test_header_layout():
    buf = C.checkpoint_bytes(C.from_trainer(trainer(iterations=1)))
    assert buf[:4] == b"CKPT" and struct.unpack_from("<H", buf, 4) == (C.VERSION,)


def test_version_error():
    buf = bytearray(C.checkpoint_bytes(C.from_trainer(trainer(iterations=1))))
    buf[4] = 9
    with pytest.raises(C.VersionError, match="version 9"):
        C.parse_checkpoint(bytes(buf))


def test_truncated_and_garbage():
    buf = C.checkpoint_bytes(C.from_trainer(trainer(iterations=1).run()))
    for cut in (3, 10, len(buf) // 2, len(buf) - 1):
        with pytest.raises(FormatError):
            C.parse_checkpoint(buf[:cut])
    with pytest.raises(FormatError, match="trailing"):
        C.parse_checkpoint(buf + b"\0")
    with pytest.raises(FormatError):
        C.parse_checkpoint(b"JUNK" + buf[4:])


def test_name_and_shape_mismatch():
    buf = C.checkpoint_bytes(C.from_trainer(trainer(iterations=1)))
    wider = NetConfig(2, 2, 1, filters=(4, 8, 6), domain_widths=(8, 8, 8))
    with pytest.raises(ValueError):
        C.parse_checkpoint(buf, wider)
    renamed = buf.replace(b"task.dense.w", b"task.dense.q")
    with pytest.raises(KeyError):
        C.parse_checkpoint(renamed)


def test_restore_rejects_other_network():
    ck = C.from_trainer(trainer(iterations=1))
    other = trainer(iterations=1)
    other.net_cfg = NetConfig(2, 2, 1, filters=(4, 4, 4), domain_widths=(8, 8, 8))
    with pytest.raises(ValueError):
        C.restore_trainer(other, ck)
