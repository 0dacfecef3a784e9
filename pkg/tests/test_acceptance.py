"""Acceptance gate: one PASS/FAIL line per criterion, at the stated tolerances.

The protocol replication trains 40 models twice (about two to three minutes on
one core); everything else finishes in seconds.
"""

import json
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from gradcheck import max_rel_err, numeric_grad
from oracles import enumeration_p, oracle_table, pooled_t_by_hand, t_cdf_by_quadrature
from dgcf import cli
from dgcf.dynamic import DgcfLayer, FilterGeneratingNetwork, dgcf_backward, dgcf_forward
from dgcf.graph import Graph, build_neighborhood_table
from dgcf.layers import (
    Activation,
    dense_backward,
    dense_forward,
    global_mean_pool,
    global_mean_pool_backward,
    graph_conv_backward,
    graph_conv_forward,
    softmax_cross_entropy,
)
from dgcf.stats import mann_whitney_u, shapiro_wilk, student_t_test

PROTOCOL = Path(__file__).resolve().parent.parent / "configs" / "protocol.json"
GRAD_TOL = 1e-5
INSTANCES = 20


@pytest.fixture
def report(capsys):
    def emit(name, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        assert ok, f"{name}: {detail}"
    return emit


def random_graph(rng, n, p):
    ii, jj = np.nonzero(np.triu(rng.random((n, n)) < p, k=1))
    return Graph.from_edges(n, zip(ii.tolist(), jj.tolist()))


def random_instance(rng):
    """N <= 10 and J, K, M <= 4, as the gradient criterion prescribes."""
    n = int(rng.integers(2, 11))
    J, M = (int(v) for v in rng.integers(1, 5, size=2))
    K = int(rng.integers(1, min(n, 4) + 1))
    table = build_neighborhood_table(random_graph(rng, n, 0.4), K)
    return n, J, K, M, table


# --- gradient suite ------------------------------------------------------------------


def _dense_err(rng):
    x, W, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 3)), rng.normal(size=3)
    w = rng.normal(size=(3, 3))
    y, cache = dense_forward(x, W, b, Activation.TANH)
    dW, db, dx = dense_backward(w, cache)
    f = lambda: float(np.sum(dense_forward(x, W, b, Activation.TANH)[0] * w))  # noqa: E731
    return max(max_rel_err(dW, numeric_grad(f, W)), max_rel_err(db, numeric_grad(f, b)),
               max_rel_err(dx, numeric_grad(f, x)))


def _conv_err(rng):
    n, J, K, M, table = random_instance(rng)
    X, F, bias = rng.normal(size=(n, J)), rng.normal(size=(J, K, M)), rng.normal(size=M)
    w = rng.normal(size=(n, M))
    _, cache = graph_conv_forward(X, table, F, Activation.TANH, bias)
    dF, dX, db = graph_conv_backward(w, cache)
    f = lambda: float(np.sum(graph_conv_forward(X, table, F, Activation.TANH, bias)[0] * w))  # noqa: E731
    return max(max_rel_err(dF, numeric_grad(f, F)), max_rel_err(dX, numeric_grad(f, X)),
               max_rel_err(db, numeric_grad(f, bias)))


def _dgcf_errs(rng):
    n, J, K, M, table = random_instance(rng)
    hidden = tuple(int(h) for h in rng.integers(1, 6, size=int(rng.integers(0, 3))))
    fgn = FilterGeneratingNetwork.create(n, J, K, M, hidden, Activation.TANH, rng)
    for name in fgn.params:
        if name.startswith("b"):
            fgn.params[name] = rng.normal(size=fgn.params[name].shape) * 0.5
    layer = DgcfLayer(fgn, Activation.TANH)
    X = rng.normal(size=(n, J))
    f = lambda: float(np.sum(dgcf_forward(layer, X, table)[0] ** 2))  # noqa: E731
    Y, cache = dgcf_forward(layer, X, table)
    grads, dX = dgcf_backward(2 * Y, layer, cache)
    err = max(max_rel_err(grads[k], numeric_grad(f, p)) for k, p in fgn.params.items())
    num_dX = numeric_grad(f, X)
    err = max(err, max_rel_err(dX, num_dX))
    _, dX_conv_only = graph_conv_backward(2 * Y, cache.conv)
    return err, max_rel_err(dX_conv_only, num_dX)


def _pool_err(rng):
    Y, w = rng.normal(size=(int(rng.integers(1, 11)), 4)), rng.normal(size=4)
    f = lambda: float(global_mean_pool(Y) @ w)  # noqa: E731
    return max_rel_err(global_mean_pool_backward(w, Y.shape[0]), numeric_grad(f, Y))


def _loss_err(rng):
    logits, label = rng.normal(size=5) * 3, int(rng.integers(0, 5))
    _, g = softmax_cross_entropy(logits, label)
    return max_rel_err(g, numeric_grad(lambda: softmax_cross_entropy(logits, label)[0], logits))


def test_gradient_suite(report):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = {}
    ablated = []
    for _ in range(INSTANCES):
        worst["dense"] = max(worst.get("dense", 0.0), _dense_err(rng))
        worst["graph_conv"] = max(worst.get("graph_conv", 0.0), _conv_err(rng))
        err, ablated_err = _dgcf_errs(rng)
        worst["dgcf+generator"] = max(worst.get("dgcf+generator", 0.0), err)
        ablated.append(ablated_err)
        worst["mean_pool"] = max(worst.get("mean_pool", 0.0), _pool_err(rng))
        worst["softmax_xent"] = max(worst.get("softmax_xent", 0.0), _loss_err(rng))
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) <= GRAD_TOL and min(ablated) >= 1e-2 and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report("gradient suite", ok, f"{INSTANCES} instances/layer, max rel err {detail}; "
                                 f"negative control min err {min(ablated):.2e} (>= 1e-2); {elapsed:.1f}s")


# --- reduction equivalence ------------------------------------------------------------


def test_reduction_equivalence(report):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        n, J, K, M, table = random_instance(rng)
        F0 = rng.normal(size=(J, K, M))
        hidden = tuple(int(h) for h in rng.integers(1, 6, size=int(rng.integers(0, 3))))
        act = [Activation.RELU, Activation.TANH, Activation.IDENTITY][int(rng.integers(3))]
        layer = DgcfLayer(FilterGeneratingNetwork.constant(F0, n, hidden), act)
        X, dY = rng.normal(size=(n, J)), rng.normal(size=(n, M))
        Yd, dcache = dgcf_forward(layer, X, table)
        Ys, scache = graph_conv_forward(X, table, F0, act)
        grads, dXd = dgcf_backward(dY, layer, dcache)
        dF, dXs = graph_conv_backward(dY, scache)
        last_bias = grads[f"b{layer.fgn.n_dense - 1}"].reshape(J, K, M)
        worst = max(worst, np.abs(Yd - Ys).max(), np.abs(dXd - dXs).max(), np.abs(last_bias - dF).max())
    report("reduction equivalence", worst <= 1e-12,
           f"100 instances, max |dynamic - static| over Y, dX, dF = {worst:.1e} (<= 1e-12)")


# --- neighbourhood oracle -------------------------------------------------------------


def test_neighborhood_oracle(report):
    rng = np.random.default_rng(11)
    start = time.perf_counter()
    mismatches, tables = 0, 0
    for _ in range(200):
        n = int(rng.integers(1, 51))
        g = random_graph(rng, n, float(rng.uniform(0, 0.3)))
        for k in range(1, n + 1):
            tables += 1
            if not np.array_equal(build_neighborhood_table(g, k).table, oracle_table(g, k)):
                mismatches += 1
    elapsed = time.perf_counter() - start
    report("neighbourhood oracle", mismatches == 0 and elapsed < 60,
           f"200 graphs, {tables} (graph, k) tables, {mismatches} mismatches vs all-pairs BFS; {elapsed:.1f}s")


# --- statistics exactness -------------------------------------------------------------


def test_statistics_exactness(report):
    start = time.perf_counter()
    worst_u, cases = 0.0, 0
    for na in range(1, 7):
        for nb in range(1, 7):
            for seed in range(100):
                rng = np.random.default_rng([na, nb, seed])
                pooled = rng.integers(0, 6 if seed % 2 else 10**6, size=na + nb).astype(float)
                a, b = pooled[:na], pooled[na:]
                worst_u = max(worst_u, abs(mann_whitney_u(a, b).p_value - enumeration_p(a, b)))
                cases += 1

    a, b = [1, 2, 3, 4], [2, 3, 4, 5]
    t_ref = pooled_t_by_hand(a, b)
    p_ref = t_cdf_by_quadrature(t_ref, 6)
    r = student_t_test(a, b)
    t_err = max(abs(r.statistic - t_ref), abs(r.p_value - p_ref))

    exp_rej = sum(shapiro_wilk(np.random.default_rng(s).exponential(size=50)).reject_null for s in range(100))
    norm_rej = sum(shapiro_wilk(np.random.default_rng(10**4 + s).normal(size=50)).reject_null for s in range(100))
    elapsed = time.perf_counter() - start
    ok = worst_u <= 1e-12 and t_err <= 1e-6 and exp_rej >= 95 and norm_rej <= 10 and elapsed < 120
    report("statistics exactness", ok,
           f"U exact vs enumeration over {cases} datasets max |dp| {worst_u:.1e}; "
           f"t={r.statistic:.10f} p={r.p_value:.10f} err {t_err:.1e} (<= 1e-6); "
           f"Shapiro-Wilk rejects exponential {exp_rej}/100 (>= 95), normal {norm_rej}/100 (<= 10); {elapsed:.1f}s")


# --- protocol replication, determinism, filter analysis --------------------------------


@pytest.fixture(scope="module")
def protocol_runs(tmp_path_factory):
    spec = cli.load_spec(PROTOCOL, {})
    root = tmp_path_factory.mktemp("protocol")
    timings = []
    for name in ("first", "second"):
        start = time.perf_counter()
        code = cli.cmd_run(spec, root / name)
        timings.append(time.perf_counter() - start)
        assert code == cli.EXIT_OK
    # snapshot now: later tests add comparison and analysis files to the first run
    produced = sorted(p.relative_to(root / "first") for p in (root / "first").rglob("*") if p.is_file())
    return spec, root, timings, produced


def test_protocol_replication(protocol_runs, report):
    spec, root, timings, _ = protocol_runs
    rows = cli.cmd_compare(root / "first", spec.alpha)
    summary = {(r["t"], r["side"]): r for r in json.loads((root / "first" / "summary" / "summary.json").read_text())}
    parts, acc_ok, ep_ok = [], True, True
    for row in rows:
        t = row["t"]
        s, d = summary[(t, "static")], summary[(t, "dynamic")]
        acc_ok &= d["accuracy_mean"] >= s["accuracy_mean"]
        ep_ok &= d["epochs_mean"] <= s["epochs_mean"]
        parts.append(f"t={t}: acc C {s['accuracy_mean']:.3f} / DC {d['accuracy_mean']:.3f}, "
                     f"epochs C {s['epochs_mean']:.1f} / DC {d['epochs_mean']:.1f}, "
                     f"{row['chosen_test']} p={row['main']['p_value']:.2e} {row['conclusion']}")
    any_better = any(r["conclusion"] == "DynamicBetter" for r in rows)
    ok = acc_ok and ep_ok and any_better and timings[0] < 15 * 60
    report("protocol replication", ok, "; ".join(parts) + f"; run time {timings[0]:.0f}s")


def test_determinism(protocol_runs, report):
    _, root, _, produced = protocol_runs
    second = sorted(p.relative_to(root / "second") for p in (root / "second").rglob("*") if p.is_file())
    unmatched = sorted(str(f) for f in set(second) ^ set(produced))
    files = [f for f in produced if f.name != "metadata.json" and f not in unmatched]
    different = [str(f) for f in files if (root / "first" / f).read_bytes() != (root / "second" / f).read_bytes()]
    summaries = [f for f in files if f.parts[0] == "summary"]
    report("determinism", not different and not unmatched and len(summaries) == 3,
           f"{len(files)} output files ({len(summaries)} summary files) compared byte-for-byte, "
           f"{len(different)} differ" + (f": {different[:5]}" if different else "")
           + (f"; present in only one run: {unmatched[:5]}" if unmatched else ""))


def test_filter_analysis(protocol_runs, report, tmp_path):
    spec, root, _, _ = protocol_runs
    index = cli.cmd_export_filters(root / "first")
    n_classes = spec.dataset["synthetic"]["n_classes"]
    parts, separated, complete = [], True, False
    for cell, info in sorted(index.items()):
        sep = info["class_separation"]
        if sep is None:
            continue
        separated &= bool(sep["pairwise_l2"]) and sep["min_pairwise_l2"] > sep["mean_within_class_std"]
        complete |= not info["empty_classes"]
        parts.append(f"{cell}: min between-class L2 {sep['min_pairwise_l2']:.3f} vs mean within-class std "
                     f"{sep['mean_within_class_std']:.3f}, {n_classes - len(info['empty_classes'])}/{n_classes} "
                     f"classes with correct samples")

    control = replace(spec, filter_counts=[spec.filter_counts[0]], repetitions=1,
                      model={**spec.model, "constant_generator": True})
    assert cli.cmd_run(control, tmp_path) == cli.EXIT_OK
    cli.cmd_export_filters(tmp_path)
    heat = json.loads((tmp_path / "analysis" / f"dynamic_t{spec.filter_counts[0]}" / "heatmaps.json").read_text())
    by_filter = {}
    for h in heat["heatmaps"]:
        by_filter.setdefault(h["filter_index"], []).append(h)
    identical = all(len(hs) >= 2 and all(h["mean"] == hs[0]["mean"] for h in hs) for hs in by_filter.values())
    zero_std = all(not np.any(h["std"]) for h in heat["heatmaps"])
    parts.append(f"constant-generator control: {len(heat['heatmaps'])} heatmaps, identical across classes "
                 f"{identical}, all std zero {zero_std}")
    report("filter analysis", separated and complete and identical and zero_std, "; ".join(parts))
