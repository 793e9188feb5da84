"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``[PASS]``/``[FAIL]`` line, repeated in the
terminal summary.  Numeric tolerances are the stated ones.
"""
import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, make_arch, mlp_layers
from fedfreeze.aggregator import aggregate
from fedfreeze.client import ClientConfig, ClientRuntime, PartialUpdate, client_rng, select_layers
from fedfreeze.datasets import Partition, generate_blobs
from fedfreeze.experiment import RunConfig, run_experiment
from fedfreeze.metrics import cross_entropy, one_hot, selection_uniformity
from fedfreeze.nn import Network, make_optimizer
from fedfreeze.registry import ArchitectureDescriptor, count_parameters

from test_registry import VGG16_TABLE


def report(n, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:>2}: {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# --- 1, 2: parameter counts ------------------------------------------------------------


def test_c01_vgg16_parameter_counts():
    t0 = time.perf_counter()
    res = subprocess.run([sys.executable, "-m", "fedfreeze", "count-params", "vgg16", "--json"],
                         capture_output=True, text=True, check=True)
    elapsed = time.perf_counter() - t0
    doc = json.loads(res.stdout)
    cells = {row["name"]: row["params"] for row in doc["layers"] if row["params"]}
    ok = doc["total"] == 14_736_714 and cells == VGG16_TABLE and elapsed < 1.0
    report(1, "VGG16 count-params", ok,
           f"total {doc['total']:,}, {sum(cells[k] == v for k, v in VGG16_TABLE.items())}/"
           f"{len(VGG16_TABLE)} table cells match, {elapsed:.2f}s")


def test_c02_casa_parameter_count():
    pc = count_parameters(ArchitectureDescriptor.load("casa_mlp"))
    report(2, "CASA model count", pc.total == 68_884 and pc.trainable_units == 6,
           f"total {pc.total:,}, {pc.trainable_units} trainable units")


# --- 3: gradients -------------------------------------------------------------------------


def _random_stack(r):
    conv = r.random() < 0.7
    if conv:
        size = int(r.integers(5, 9))
        layers = [{"kind": "conv2d", "filters": int(r.integers(2, 5)), "kernel_size": int(r.choice([1, 3])),
                   "strides": int(r.choice([1, 2])), "padding": str(r.choice(["same", "valid"]))},
                  {"kind": "batch_normalization"}, {"kind": "relu"}]
        layers.append({"kind": str(r.choice(["max_pooling2d", "average_pooling2d"])), "pool_size": 2,
                       "strides": int(r.choice([1, 2]))})
        layers += [{"kind": "flatten"}]
        shape = (size, size, int(r.integers(1, 3)))
    else:
        layers, shape = [], (int(r.integers(3, 8)),)
    layers += [{"kind": "dense", "units": int(r.integers(3, 7))}, {"kind": "batch_normalization"},
               {"kind": "relu"}, {"kind": "dense", "units": 3}, {"kind": "softmax"}]
    return make_arch(layers, shape)


def test_c03_gradient_correctness():
    from test_nn import fd_check

    t0 = time.perf_counter()
    r = np.random.default_rng(2024)
    errs = []
    while len(errs) < 1200:
        arch = _random_stack(r)
        net = Network(arch, dtype=np.float64, seed=int(r.integers(1 << 30)))
        x = r.normal(size=(4,) + tuple(arch.input_shape))
        y = one_hot(r.integers(0, 3, 4), 3)
        errs.extend(fd_check(net, x, y, r, max_per_tensor=40))
    errs = np.array(errs)
    elapsed = time.perf_counter() - t0
    report(3, "finite-difference gradients", errs.max() < 1e-4 and elapsed < 120,
           f"max rel err {errs.max():.2e} over {errs.size} params, {elapsed:.1f}s")


# --- 4: full-mask oracle -------------------------------------------------------------------


def test_c04_full_mask_equals_centralized():
    arch = ArchitectureDescriptor.load("toy_mlp")
    ds = generate_blobs(4, 20, 500, seed=7)
    part = Partition(0, ds.features, ds.labels, np.arange(500))
    g = Network(arch, dtype=np.float64, seed=3).state()
    rt = ClientRuntime(arch, ClientConfig(0, part, 6, seed=11), dtype=np.float64)
    upd = rt.client_update(g, t=1)
    fed = aggregate([upd], g)

    # centralized training with the same batch order
    ref = Network(arch, dtype=np.float64)
    ref.load_state(g)
    rng = client_rng(11, 0, 1)
    select_layers(6, 6, rng)
    order = rng.permutation(500)
    x, y = ds.features.astype(np.float64)[order], one_hot(ds.labels[order], 4)
    opt = make_optimizer("adam", 0.01)
    for s in range(0, 500, 32):
        _, _, gr = ref.loss_and_grads(x[s:s + 32], y[s:s + 32], range(6))
        opt.step(ref, gr, range(6))
    a, b = fed.flat(), ref.state().flat()
    rel = float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-300)))
    report(4, "full-mask federated = centralized", rel <= 1e-9, f"max rel diff {rel:.2e}")


# --- 5: aggregation properties ---------------------------------------------------------------


def test_c05_partial_aggregation_properties():
    import test_aggregator as ta

    r = np.random.default_rng(5)
    t0 = time.perf_counter()
    hand = aggregate([ta.up(0, 1, {0: [0.0]}), ta.up(1, 3, {0: [4.0]})], ta.st_({0: [9.0]})).units[0][0]
    ok = hand == 3.0
    for _ in range(300):
        n = int(r.integers(1, 7))
        prev = ta.st_({u: r.normal(size=ta.SIZES[u]) for u in range(ta.N_UNITS)})
        ups = []
        for k in range(n):
            mask = [u for u in range(ta.N_UNITS) if r.random() < 0.5] or [int(r.integers(ta.N_UNITS))]
            ups.append(PartialUpdate(1, k, frozenset(mask),
                                     ta.st_({u: r.normal(size=ta.SIZES[u]) for u in mask}),
                                     int(r.integers(1, 1000))))
        out = aggregate(ups, prev)
        ok &= aggregate([ups[i] for i in r.permutation(n)], prev).equals(out)
        trained = set().union(*(u.trained_layers for u in ups))
        ok &= all(out.units[u].tobytes() == prev.units[u].tobytes()
                  for u in range(ta.N_UNITS) if u not in trained)
        ok &= all(abs(sum(w.values()) - 1) <= 1e-9
                  for w in ta.aggregation_coefficients(ups).values())
        same = [PartialUpdate(1, k, frozenset(range(ta.N_UNITS)), prev.copy(), int(r.integers(1, 50)))
                for k in range(n)]
        idem = aggregate(same, prev)
        ok &= all(np.allclose(idem.units[u], prev.units[u], rtol=1e-6, atol=0) for u in prev.units)
    elapsed = time.perf_counter() - t0
    report(5, "partial aggregation properties", bool(ok) and elapsed < 60,
           f"hand case {hand}, 300 randomized cases (order, carry-forward, weights, idempotence), "
           f"{elapsed:.1f}s")


# --- 6: communication reduction --------------------------------------------------------------


def test_c06_communication_reduction():
    t0 = time.perf_counter()
    results = {}
    for n in (7, 4):
        res = subprocess.run([sys.executable, "-m", "fedfreeze", "estimate-traffic", "vgg16",
                              "--layers", str(n), "--clients", "10", "--rounds", "100",
                              "--trials", "10000"], capture_output=True, text=True, check=True)
        text = res.stdout
        frac = float(text.split("expected uplink fraction: ")[1].split()[0])
        results[n] = (frac, "published reference" in text)
    elapsed = time.perf_counter() - t0
    ok = (abs(results[7][0] - 0.50) <= 0.02 and abs(results[4][0] - 0.286) <= 0.02
          and results[7][1] and results[4][1] and elapsed < 30)
    report(6, "expected uplink fraction", ok,
           f"N_l=7 {results[7][0]:.4f} (published run 0.461, claim 53% reduction), "
           f"N_l=4 {results[4][0]:.4f} (published run 0.237, claim 75% reduction), {elapsed:.1f}s")


# --- 7: selection uniformity ------------------------------------------------------------------


def test_c07_selection_uniformity(tmp_path):
    # 14 tiny dense units so the whole federated loop runs quickly
    arch_path = tmp_path / "mlp14.json"
    layers = []
    for _ in range(13):
        layers += [{"kind": "dense", "units": 4}, {"kind": "relu"}]
    layers += [{"kind": "dense", "units": 2}, {"kind": "softmax"}]
    arch_path.write_text(json.dumps({"name": "mlp14", "input_shape": [4], "layers": layers}))
    t0 = time.perf_counter()
    parts = []
    ok = True
    for n in (4, 7, 10):
        cfg = RunConfig(architecture=str(arch_path), n_clients=10, rounds=100, layers=n,
                        dataset={"kind": "blobs", "classes": 2, "dims": 4, "samples": 200},
                        test_fraction=0.1, seed=0, output_dir=str(tmp_path / f"n{n}"))
        res = run_experiment(cfg, write=False)
        u = selection_uniformity(res.histogram)
        ok &= u.max_abs_deviation <= 0.08 and u.passes
        parts.append(f"N_l={n} dev {u.max_abs_deviation:.3f} chi2 {u.chi_square_stat:.1f}<"
                     f"{u.critical_99:.1f}")
    elapsed = time.perf_counter() - t0
    report(7, "selection uniformity", bool(ok) and elapsed < 30, "; ".join(parts) + f", {elapsed:.1f}s")


# --- 8-10: desk-scale convergence -------------------------------------------------------------

BLOBS = {"kind": "blobs", "classes": 4, "dims": 20, "samples": 20000, "class_sep": 1.0, "std": 1.0}


def _desk_run(out, n_clients, layers):
    cfg = RunConfig(architecture="toy_mlp", dataset=dict(BLOBS), n_clients=n_clients, rounds=100,
                    layers=layers, seed=0, model_seed=0, data_seed=0, output_dir=str(out))
    t0 = time.perf_counter()
    res = run_experiment(cfg)
    return res, time.perf_counter() - t0


@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    return {
        "full": _desk_run(root / "full", 10, 6),
        "half": _desk_run(root / "half", 10, 3),
        "root": root,
    }


def test_c08_desk_scale_convergence(desk_runs):
    (full, t_full), (half, t_half) = desk_runs["full"], desk_runs["half"]
    a0, a_full, a_half = full.records[0].accuracy, full.records[-1].accuracy, half.records[-1].accuracy
    ok = abs(a_full - a_half) <= 3.0 and a_full - a0 >= 30.0 and t_full + t_half < 600
    report(8, "desk-scale convergence", ok,
           f"round 0 {a0:.2f}%, N_l=6 {a_full:.2f}%, N_l=3 {a_half:.2f}% "
           f"(gap {abs(a_full - a_half):.2f} pp), {t_full + t_half:.0f}s")


def test_c09_client_scaling(desk_runs):
    full = desk_runs["full"][0]
    many, elapsed = _desk_run(desk_runs["root"] / "twenty", 20, 3)
    a_full, a_many = full.records[-1].accuracy, many.records[-1].accuracy
    ok = abs(a_full - a_many) <= 2.0 and elapsed < 900
    report(9, "client scaling", ok,
           f"10 clients N_l=6 {a_full:.2f}%, 20 clients N_l=3 {a_many:.2f}% "
           f"(gap {abs(a_full - a_many):.2f} pp), {elapsed:.0f}s")


def test_c10_determinism(desk_runs):
    again, _ = _desk_run(desk_runs["root"] / "full_again", 10, 6)
    a = (desk_runs["root"] / "full" / "metrics.csv").read_bytes()
    b = (again.output_dir / "metrics.csv").read_bytes()
    report(10, "determinism", a == b, f"metrics.csv {len(a)} bytes, identical={a == b}")


# --- 11: TCP parity ------------------------------------------------------------------------------


def test_c11_tcp_parity(tmp_path):
    common = dict(architecture="toy_mlp", n_clients=3, rounds=5, layers=3,
                  dataset={"kind": "blobs", "classes": 4, "dims": 20, "samples": 3000},
                  round_timeout=120.0)
    lb = run_experiment(RunConfig(**common, output_dir=str(tmp_path / "loop")), keep_history=True)
    tcp = run_experiment(RunConfig(**common, transport="tcp:127.0.0.1:0",
                                   output_dir=str(tmp_path / "tcp")), keep_history=True)
    same = [a.equals(b) for a, b in zip(lb.history, tcp.history)]
    worst = max(float(np.max(np.abs(a.flat() - b.flat()) / np.maximum(np.abs(a.flat()), 1e-30)))
                for a, b in zip(lb.history, tcp.history))
    ok = all(same) and len(same) == 6 and worst <= 1e-6
    report(11, "TCP parity", ok,
           f"{sum(same)}/{len(same)} per-round global models bit-identical (max rel diff {worst:.1e}), "
           f"3 client processes")
