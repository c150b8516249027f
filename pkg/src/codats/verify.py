"""64-bit finite-difference checks for every operator and the full losses.

Shared by the ``gradcheck`` subcommand and the test suite.
"""

import time

import numpy as np

from . import autodiff as ad
from . import data as D
from .net import FEATURE, NetConfig, init_params
from .train import CODATS, CODATS_WS, compute_losses

TOLERANCE = 1e-4


def project(out, r):
    """Random linear functional, so one scalar check covers the whole Jacobian."""
    return ad.total(ad.mul(out, r))


def operator_cases(rng):
    """(name, params, f, reference) on random shapes no larger than 4x8x4."""
    B, H, C = (int(v) for v in (rng.integers(2, 5), rng.integers(3, 9), rng.integers(2, 5)))
    F, k = int(rng.integers(2, 5)), int(rng.choice([1, 2, 3, 5, 8]))
    m, n = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    x = rng.normal(size=(B, H, C))
    z = rng.normal(size=(B, C))
    r3 = rng.normal(size=(B, H, F))
    rx = rng.normal(size=x.shape)
    rb = rng.normal(size=(B, C))
    r_mm = rng.normal(size=(B, n))
    cases = [
        ("matmul", {"a": rng.normal(size=(B, m)), "b": rng.normal(size=(m, n))},
         lambda p: project(ad.matmul(p["a"], p["b"]), r_mm), None),
        ("add_bias", {"x": z.copy(), "b": rng.normal(size=C)},
         lambda p: project(ad.add_bias(p["x"], p["b"]), rb), None),
        ("conv1d_same", {"x": x.copy(), "w": rng.normal(size=(k, C, F))},
         lambda p: project(ad.conv1d_same(p["x"], p["w"]), r3), None),
        # inputs kept away from the kink
        ("relu", {"x": np.where(np.abs(x) < 0.05, 0.5, x)}, lambda p: project(ad.relu(p["x"]), rx), None),
    ]
    st_train = ad.BatchNormState.fresh(C, dtype=np.float64)
    st_inf = ad.BatchNormState(rng.normal(size=C), rng.uniform(0.5, 2, size=C))
    cases.append(("batchnorm1d.train", {"x": x.copy(), "g": rng.normal(size=C), "b": rng.normal(size=C)},
                  lambda p: project(ad.batchnorm1d(p["x"], p["g"], p["b"], st_train, "train"), rx), None))
    cases.append(("batchnorm1d.inference", {"x": x.copy(), "g": rng.normal(size=C), "b": rng.normal(size=C)},
                  lambda p: project(ad.batchnorm1d(p["x"], p["g"], p["b"], st_inf, "inference"), rx), None))
    cases.append(("global_avg_pool", {"x": x.copy()}, lambda p: project(ad.global_avg_pool(p["x"]), rb), None))
    seed = int(rng.integers(1 << 30))
    cases.append(("dropout", {"x": x.copy()},
                  lambda p: project(ad.dropout(p["x"], 0.3, np.random.default_rng(seed), "train"), rx), None))
    lab = rng.integers(0, C, size=B)
    cases.append(("softmax_xent", {"z": z.copy()}, lambda p: ad.softmax_xent(p["z"], lab), None))
    cases.append(("softmax", {"z": z.copy()}, lambda p: project(ad.softmax(p["z"]), rb), None))
    lam = float(rng.uniform(0.1, 3))
    # the reversal layer's tape gradient is -lam times the identity's derivative
    cases.append(("grl", {"x": x.copy()}, lambda p: project(ad.grl(p["x"], lam), rx),
                  lambda p, _: ad.scale(project(p["x"], rx), -lam)))
    rows = rng.integers(0, B, size=B + 1)
    rt = rng.normal(size=(B + 1, C))
    cases.append(("take", {"z": z.copy()}, lambda p: project(ad.take(p["z"], rows), rt), None))
    rm = rng.normal(size=C)
    cases.append(("mean_over_batch", {"z": z.copy()}, lambda p: project(ad.mean_over_batch(p["z"]), rm), None))
    p_true = rng.dirichlet(np.ones(C))
    q = rng.dirichlet(np.ones(C)) * 0.9 + 0.1 / C
    cases.append(("kl_true_vs_pred", {"q": q}, lambda p: ad.kl_true_vs_pred(p_true, p["q"]), None))
    cases.append(("mul", {"a": x.copy(), "b": rx.copy()}, lambda p: ad.total(ad.mul(p["a"], p["b"])), None))
    cases.append(("scale", {"x": x.copy()}, lambda p: project(ad.scale(p["x"], 1.7), rx), None))
    return cases


def reduced_net(channels=3, n_labels=3, n_sources=1):
    return NetConfig(channels, n_labels, n_sources, filters=(4, 8, 4), domain_widths=(8, 8, 8))


def mixed_batch(rng, cfg, size=4, length=8):
    """``size`` examples: half target (domain 0, unlabeled), the rest spread over sources."""
    n_target = size // 2
    dom = np.concatenate([np.zeros(n_target, np.int64),
                          1 + np.arange(size - n_target) % cfg.n_sources])
    task = np.where(dom == 0, -1, rng.integers(0, cfg.n_labels, size))
    x = rng.normal(size=(size, length, cfg.in_channels))
    return D.MixedBatch(x, task, dom, {int(d): int(np.sum(dom == d)) for d in np.unique(dom)})


def loss_case(method, seed, n_sources=1, lam=0.7):
    """(f, store, reference) for the full training loss of ``method``."""
    rng = np.random.default_rng(seed)
    cfg = reduced_net(n_sources=n_sources)
    with ad.precision("float64"):
        store = init_params(cfg, rng)
    # perturb gamma/beta/biases off their initial values
    for k in store.keys():
        if not k.endswith(".w"):
            store[k] = store[k] + rng.normal(0, 0.3, store[k].shape)
    batch = mixed_batch(rng, cfg)
    y_true = D.LabelDistribution(rng.dirichlet(np.ones(cfg.n_labels))) if method == CODATS_WS else None
    drop_seed = int(rng.integers(1 << 30))

    def parts(p):
        return compute_losses(p, batch, method, lam, np.random.default_rng(drop_seed), y_true, min_target=1)

    def f(p):
        return parts(p)[0]

    def reference(p, name):
        _, pt = parts(p)
        sign = -lam if store.groups[name] == FEATURE else 1.0
        val = pt["task"].values + sign * pt["domain"].values
        if "kl" in pt:
            val = val + pt["kl"].values
        return val

    return f, store, reference


def run_gradcheck(seeds=range(5), verbose=False):
    """Max relative error per case; everything runs in 64-bit verification mode."""
    worst = {}
    t0 = time.perf_counter()
    with ad.verification():
        for seed in seeds:
            for name, params, f, ref in operator_cases(np.random.default_rng(seed)):
                err = ad.grad_check(f, params, reference=ref)
                worst[name] = max(worst.get(name, 0.0), err)
            for method in (CODATS, CODATS_WS):
                f, store, ref = loss_case(method, seed)
                err = ad.grad_check(f, store, reference=ref)
                key = f"loss.{method}"
                worst[key] = max(worst.get(key, 0.0), err)
    if verbose:
        for k, v in worst.items():
            print(f"{k:24s} {v:.3e} {'ok' if v < TOLERANCE else 'FAIL'}")
        print(f"elapsed {time.perf_counter() - t0:.1f}s")
    return worst
