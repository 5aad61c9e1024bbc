"""End-to-end acceptance suite. Each criterion logs one PASS/FAIL line to the terminal summary.

The two trend criteria run full 2000-round federations on the 8x8 digits
written as MNIST-format IDX files; together they take roughly half an hour
on one CPU core.
"""
import time

import numpy as np
import pytest
from scipy.stats import norm

from flsnn.attacks import BenignView, alie_attack, alie_z_max, ipm_attack, minmax_gamma
from flsnn.compression import (HEADER_BYTES, CompressionConfig, dense_payload_bytes, retained_count,
                               sparse_payload_bytes, topk_compress)
from flsnn.data_io import prepare_digits_idx
from flsnn.fl_engine import client_stream
from flsnn.harness import ExperimentConfig, SweepSpec, build_federation, load_heatmap, run_experiment, run_sweep
from flsnn.nn_models import (LifParams, MlpTopology, ParameterVector, ann_backward, ann_forward, lif_step,
                             loss_and_grad, sgd_step, snn_backward_bptt, snn_forward)

from oracles import (alie_quantile_oracle, brute_topk, central_difference, minmax_grid_oracle,
                     naive_ann_loss, naive_snn)


def record(log, n, title, ok, detail):
    log.append(f"[{'PASS' if ok else 'FAIL'}] {n:>2}. {title}: {detail}")
    print(log[-1])
    assert ok, detail


def rel_err(a, b):
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-12))


def blobs_cfg(**kw):
    base = dict(hidden=[16], num_clients=6, batch_size=8, eval_every=10,
                data=dict(source="blobs", num_classes=4, dim=12, n_per_class=40, spread=0.08))
    base.update(kw)
    return ExperimentConfig.from_dict(base)


# -- 1-3: models ----------------------------------------------------------------

def test_c01_bptt_matches_unrolled_adjoint(acceptance_log):
    t0 = time.perf_counter()
    worst = 0.0
    counts_ok = True
    for i in range(50):
        rng = np.random.default_rng([1, i])
        n_layers = int(rng.integers(1, 4))
        sizes = tuple(int(v) for v in rng.integers(1, 9, size=n_layers + 1))
        sizes = sizes[:-1] + (max(2, sizes[-1]),)
        T, B = int(rng.integers(1, 6)), int(rng.integers(1, 3))
        topo = MlpTopology(sizes, "snn")
        p = LifParams(beta=float(rng.uniform(0.3, 0.99)), u_thr=1.0, timesteps=T,
                      surrogate_slope=float(rng.uniform(2.0, 25.0)))
        params = ParameterVector(rng.uniform(-1, 1, topo.num_params) * rng.uniform(1.0, 4.0), topo.layout())
        frames = rng.random((T, B, sizes[0]))
        labels = rng.integers(0, sizes[-1], size=B)
        counts, trace = snn_forward(params, frames, topo, p)
        grad = snn_backward_bptt(trace, params, labels, p)
        ref_counts, _, ref = naive_snn(params.weights(), frames, labels, p.beta, p.u_thr, p.surrogate_slope)
        counts_ok &= bool(np.array_equal(counts, ref_counts))
        worst = max(worst, rel_err(grad, np.concatenate([g.ravel() for g in ref])))
    dt = time.perf_counter() - t0
    record(acceptance_log, 1, "BPTT vs unrolled adjoint", counts_ok and worst < 1e-6 and dt < 60,
           f"50 instances, max rel err {worst:.2e} (tol 1e-6), counts equal={counts_ok}, {dt:.1f}s")


def test_c02_ann_gradient_check(acceptance_log):
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(100):
        rng = np.random.default_rng([2, i])
        sizes = tuple(int(v) for v in rng.integers(2, 7, size=int(rng.integers(2, 4))))
        topo = MlpTopology(sizes, "ann")
        params = ParameterVector(rng.standard_normal(topo.num_params), topo.layout())
        x = rng.standard_normal((int(rng.integers(1, 4)), sizes[0]))
        labels = rng.integers(0, sizes[-1], size=len(x))
        logits, acts = ann_forward(params, x, topo)
        grad = ann_backward(acts, logits, params, labels)

        def f(v):
            return naive_ann_loss(ParameterVector(v, topo.layout()).weights(), x, labels)

        fd = central_difference(f, params.values.copy(), h=1e-5)
        worst = max(worst, rel_err(grad, fd))
    dt = time.perf_counter() - t0
    record(acceptance_log, 2, "ANN gradients vs central differences", worst < 1e-4 and dt < 60,
           f"100 instances, max rel err {worst:.2e} (tol 1e-4), {dt:.1f}s")


def test_c03_lif_hand_trace(acceptance_log):
    p = LifParams(beta=0.5, u_thr=1.0, timesteps=4)
    u, s = 0.0, 0
    us, ss = [], []
    for _ in range(4):
        u, s = lif_step(u, 0.6, s, p)
        us.append(u)
        ss.append(s)
    # the same recurrence written out step by step
    e1 = 0.6
    e2 = 0.6 + 0.5 * e1
    e3 = 0.6 + 0.5 * e2
    e4 = 0.6 + 0.5 * e3 - 1.0
    bit_exact = us == [e1, e2, e3, e4] and ss == [0, 0, 1, 0]
    hand = np.allclose(us, [0.6, 0.9, 1.05, 0.125], rtol=0, atol=1e-12)
    topo = MlpTopology((1, 1), "snn")
    _, trace = snn_forward(ParameterVector(np.array([1.0]), topo.layout()), np.full((4, 1, 1), 0.6), topo, p)
    vec_ok = trace.potentials[0].ravel().tolist() == us and trace.spikes[0].ravel().tolist() == ss
    record(acceptance_log, 3, "LIF 4-step trace", bit_exact and hand and vec_ok,
           f"U={[round(v, 12) for v in us]} S={ss}, vectorised forward identical={vec_ok}")


# -- 4-5: codec and attacks ----------------------------------------------------------------

def test_c04_topk_vs_brute_force(acceptance_log):
    mismatches = 0
    for i in range(1000):
        rng = np.random.default_rng([4, i])
        d = int(rng.integers(1, 513))
        kappa = (0.06, 0.1, 0.2, 1.0)[i % 4]
        v = rng.standard_normal(d)
        if i % 3 == 0:
            v = np.round(v, 1)  # plenty of ties, including +-x pairs
        sp = topk_compress(v.astype(np.float32), CompressionConfig(kappa))
        idx, k = brute_topk(v.astype(np.float32), kappa)
        ok = (sp.k == k == max(1, int(np.floor(kappa * d))) and sp.indices.tolist() == idx
              and np.array_equal(sp.values, v.astype(np.float32)[idx]))
        mismatches += not ok
    record(acceptance_log, 4, "Top-k vs brute-force sort", mismatches == 0,
           f"1000 vectors, d<=512, kappa in {{0.06,0.1,0.2,1}}, mismatches={mismatches}")


def test_c05_attack_postconditions(acceptance_log):
    t0 = time.perf_counter()
    ipm_bad = alie_bad = mm_bad = 0
    worst_gap = 0.0
    for i in range(200):
        rng = np.random.default_rng([5, i])
        n = int(rng.integers(4, 25))
        m = int(rng.integers(1, (n - 1) // 2 + 1))
        d = int(rng.integers(1, 40))
        ups = rng.standard_normal((n - m, d)) * rng.uniform(0.1, 3) + rng.uniform(-1, 1, d)
        view = BenignView(ups, n, m)
        mu, sd = ups.mean(0), ups.std(0)

        eps = float(rng.uniform(0, 3))
        ipm_bad += not np.array_equal(ipm_attack(view, eps), -eps * mu)

        if n - m - (n // 2 + 1 - m) > 0:
            z = alie_z_max(n, m)
            out = alie_attack(view)
            in_band = np.all(np.abs(out - mu) <= abs(z) * sd + 1e-12)
            alie_bad += not (abs(z - alie_quantile_oracle(n, m)) <= 1e-6 and in_band
                             and np.allclose(out, mu - z * sd, rtol=0, atol=1e-12))

        if n - m >= 2:
            p = -mu / np.linalg.norm(mu)
            g = minmax_gamma(mu, p, ups)
            ref = minmax_grid_oracle(mu, p, ups)
            bound = max(np.linalg.norm(a - b) for a in ups for b in ups)
            crafted = mu + g * p
            worst_gap = max(worst_gap, abs(g - ref))
            mm_bad += not (abs(g - ref) <= 1e-4 and np.linalg.norm(crafted - ups, axis=1).max() <= bound)
    z_20_5 = alie_z_max(20, 5)
    z_ok = abs(z_20_5 - norm.ppf(9 / 15)) <= 1e-6
    dt = time.perf_counter() - t0
    ok = ipm_bad == alie_bad == mm_bad == 0 and z_ok and dt < 120
    record(acceptance_log, 5, "attack post-conditions", ok,
           f"200 instances each; IPM/ALIE/MinMax failures={ipm_bad}/{alie_bad}/{mm_bad}, "
           f"z_max(20,5)={z_20_5:.9f}, max |gamma - grid|={worst_gap:.1e}, {dt:.1f}s")


# -- 6-9: pipeline ----------------------------------------------------------------

def _reference_fedavg(cfg, rounds):
    """Plain FedAvg: every client takes one SGD step, the server adds the float64 mean delta."""
    fed = build_federation(cfg.with_overrides({"kappa": None}))
    W = fed.server.global_params
    for r in range(1, rounds + 1):
        acc = np.zeros(len(W), dtype=np.float64)
        for c in fed.clients:
            idx = c.shard.next_batch(cfg.batch_size)
            x = fed.model.encode(fed.train.samples[idx], client_stream(cfg.seed, c.id, r, 1))
            _, grad = loss_and_grad(W, fed.model.topology, x, fed.train.labels[idx], fed.model.lif)
            acc += sgd_step(W, grad, c.optimizer).values - W.values
        W = ParameterVector(W.values + (acc / len(fed.clients)).astype(W.values.dtype), W.layout)
    return W.values


def test_c06_kappa_one_is_plain_fedavg(acceptance_log):
    details = []
    ok = True
    for model, lr in (("snn", 0.1), ("ann", 0.05)):
        cfg = blobs_cfg(model=model, kappa=1.0, optimizer=dict(lr=lr))
        fed = build_federation(cfg)
        for _ in range(50):
            fed.run_round()
        same = fed.server.global_params.values.tobytes() == _reference_fedavg(cfg, 50).tobytes()
        ok &= same
        details.append(f"{model} bit-identical={same}")
    record(acceptance_log, 6, "kappa=1 pipeline vs codec-free FedAvg", ok, "50 rounds, " + ", ".join(details))


def test_c07_bandwidth_exactness(acceptance_log):
    R, C = 10, 6
    dense = run_experiment(blobs_cfg(model="ann", rounds=R, attack=dict(kind="noise"))).summary
    d = dense["num_params"]
    ok = dense["uplink_bytes"] == R * C * dense_payload_bytes(d)
    details = []
    for kappa in (0.06, 0.1, 0.2):
        s = run_experiment(blobs_cfg(model="ann", rounds=R, kappa=kappa, attack=dict(kind="noise"))).summary
        k = retained_count(kappa, d)
        formula = R * C * (8 * k + HEADER_BYTES)
        ratio = s["uplink_bytes"] / dense["uplink_bytes"]
        target = (8 * k + HEADER_BYTES) / (4 * d + HEADER_BYTES)
        exact = s["uplink_bytes"] == formula == R * C * sparse_payload_bytes(k)
        close = abs(ratio - target) <= HEADER_BYTES / (4 * d + HEADER_BYTES)
        ok &= exact and close
        details.append(f"kappa={kappa} k={k} bytes={s['uplink_bytes']} ratio={ratio:.6f}")
    record(acceptance_log, 7, "uplink bytes vs analytic formula", ok, f"d={d}; " + "; ".join(details))


def test_c08_retention_accounting(acceptance_log, tmp_path):
    R, C, kappa = 25, 6, 0.1
    cfg = blobs_cfg(model="snn", rounds=R, kappa=kappa, attack=dict(kind="minmax"), out_dir=str(tmp_path))
    res = run_experiment(cfg)
    d = res.summary["num_params"]
    k = retained_count(kappa, d)
    freq = np.concatenate([layer.ravel() for layer in load_heatmap(tmp_path)])
    counters = np.load(tmp_path / "retention_counts.npy")
    mean_err = abs(freq.mean() - k / d)
    ok = mean_err <= 1e-12 and int(counters.sum()) == k * R * C and freq.size == d
    record(acceptance_log, 8, "retention accounting", ok,
           f"mean freq {freq.mean():.15f} vs k/d {k / d:.15f}, sum counters {counters.sum()} vs {k * R * C}")


def test_c09_determinism(acceptance_log, tmp_path):
    variants = [
        dict(model="snn", kappa=0.1, attack=dict(kind="alie")),
        dict(model="snn", lif=dict(encoding="poisson"), attack=dict(kind="noise", sigma=0.05)),
        dict(model="ann", attack=dict(kind="minmax"), optimizer=dict(lr=0.05)),
        dict(model="ann", kappa=0.2, attack=dict(kind="ipm")),
    ]
    ok = True
    for i, v in enumerate(variants):
        blobs = []
        for j, workers in enumerate((1, 1, 4)):
            out = tmp_path / f"v{i}_{j}"
            run_experiment(blobs_cfg(rounds=30, workers=workers, out_dir=str(out), **v))
            blobs.append((out / "metrics.csv").read_bytes())
        ok &= blobs[0] == blobs[1] == blobs[2]
    record(acceptance_log, 9, "determinism", ok,
           f"{len(variants)} configs x (serial, serial, 4 workers): metrics.csv byte-identical={ok}")


# -- 10-11: desk-scale trends ----------------------------------------------------------------

SEEDS = 3
ANN_LR = 1e-3  # calibrated so the clean ANN roughly matches the clean SNN


@pytest.fixture(scope="session")
def trend_rows(tmp_path_factory):
    root = prepare_digits_idx(tmp_path_factory.mktemp("mnist_format"))
    base = ExperimentConfig.from_dict(dict(hidden=[128], num_clients=20, rounds=2000,
                                           data=dict(source="idx", root=str(root)),
                                           attack=dict(malicious_fraction=0.25)))
    deltas = []
    for model in ("snn", "ann"):
        extra = {"model": model}
        if model == "ann":
            extra["optimizer.lr"] = ANN_LR
        deltas += [
            {**extra, "attack.kind": "minmax", "kappa": None},
            {**extra, "attack.kind": "minmax", "kappa": 0.1},
            {**extra, "attack.kind": "ipm", "attack.epsilon": 1.0},
            {**extra, "attack.kind": "noise", "attack.sigma": 0.1},
        ]
    out = tmp_path_factory.mktemp("trend")
    rows = run_sweep(SweepSpec(base, deltas, repeats=SEEDS), out)
    return rows, out


def _table(rows):
    lines = ["model,attack,intensity,kappa,seed,clean_acc,attacked_acc,accuracy_loss,status"]
    for r in rows:
        lines.append(f"{r['model']},{r['attack']},{r['intensity']},{r['kappa']},{r['seed']},"
                     f"{r['clean_acc']:.4f},{r['attacked_acc']:.4f},{r['accuracy_loss']:.4f},{r['status']}")
    return lines


def _pick(rows, **kw):
    return sorted((r for r in rows if all(r[k] == v for k, v in kw.items())), key=lambda r: r["seed"])


@pytest.mark.slow
def test_c10_minmax_compression_trend(acceptance_log, trend_rows):
    rows, out = trend_rows
    acceptance_log.extend("    " + line for line in _table(rows))
    acceptance_log.append(f"    (sweep directory: {out})")
    gains = {}
    for model in ("snn", "ann"):
        sparse = _pick(rows, model=model, attack="minmax", kappa=0.1)
        dense = _pick(rows, model=model, attack="minmax", kappa=None)
        gains[model] = float(np.median([s["attacked_acc"] - d["attacked_acc"] for s, d in zip(sparse, dense)]))
    ok = all(r["status"] == "ok" for r in rows) and gains["snn"] > 0 and gains["snn"] > gains["ann"]
    record(acceptance_log, 10, "MinMax: Top-k gain, SNN positive and above ANN", ok,
           f"median gain over {SEEDS} seeds: SNN {gains['snn']:+.4f}, ANN {gains['ann']:+.4f}")


@pytest.mark.slow
def test_c11_snn_loses_no_more_than_ann(acceptance_log, trend_rows):
    rows, _ = trend_rows
    parts = []
    ok = True
    for attack in ("ipm", "noise"):
        med = {m: float(np.median([r["accuracy_loss"] for r in _pick(rows, model=m, attack=attack)]))
               for m in ("snn", "ann")}
        ok &= med["snn"] <= med["ann"]
        parts.append(f"{attack}: SNN {med['snn']:+.4f} vs ANN {med['ann']:+.4f}")
    record(acceptance_log, 11, "IPM eps=1 and noise sigma=0.1: SNN loss <= ANN loss", ok,
           f"median accuracy loss over {SEEDS} seeds, dense; " + "; ".join(parts))
