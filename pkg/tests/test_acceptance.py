"""The ten acceptance criteria, each printing one pass/fail line.

Criteria 4 to 7, 9 and 10 share one cached five-seed run of the default
configuration on the reference benchmark (see ``conftest.py``).
"""
import time
from fractions import Fraction

import numpy as np

from gsde.cli import main as cli_main
from gsde.config import dump_config
from gsde.data import Dataset, Domain, hide_labels
from gsde.diffcore import make_rng
from gsde.driver import expand_source
from gsde.losses import (
    CentroidBank,
    LossFlags,
    MixMatchConfig,
    StepBatch,
    prepare_step,
    total_loss,
    update_centroids,
)
from gsde.model import ModelDims, init_model
from gsde.scoring import (
    combined_scores,
    knn_affinity,
    label_propagation,
    normalized_laplacian,
    propagate,
    select_top_fraction,
    selection_size,
)

from conftest import reference_config


def final_accuracies(results):
    return np.array([[r.final_accuracy for r in res.records] for res in results])


def accuracy_at(record, iteration):
    return next(tp.accuracy for tp in record.trace if tp.iteration == iteration)


# ---------------------------------------------------------------- 1


def _gradient_case(seed, steps=(1e-4, 1e-5)):
    """Worst relative error between analytic and finite-difference gradients.

    The analytic backward pass reverses the adversarial gradient on its way to
    the feature path, so the oracle differentiates ``L_C + L_MS + L_SS - l_am * L_AD``
    for feature-path parameters and plain ``L_AD`` for the discriminator.
    Each coordinate keeps the better of two central differences: a step that
    straddles a ReLU kink is wrong by O(1), the smaller step then recovers.
    """
    rng = make_rng(seed, 0xFD)
    dims = ModelDims(input_dim=3, hidden=8, bottleneck=4, num_classes=3, disc_hidden=6)
    m = init_model(dims, k=3, seed=seed)
    batch = StepBatch(rng.normal(size=(4, 3)), rng.integers(0, 3, 4), rng.normal(size=(4, 3)))
    bank = CentroidBank.empty(3, 4)
    bank = update_centroids(bank, rng.normal(size=(3, 4)), [0, 1, 2], Domain.SOURCE)
    bank = update_centroids(bank, rng.normal(size=(3, 4)), [0, 1, 2], Domain.TARGET)
    flags, cfg, l_am = LossFlags(), MixMatchConfig(), 0.6
    const = prepare_step(m, batch, flags, cfg, seed)
    m.zero_grad()
    out = total_loss(m, bank, batch, l_am, flags, cfg, const)
    assert all(v != 0 for v in out.as_dict().values()), "all four components must be active"

    def parts():
        o = total_loss(m, bank, batch, l_am, flags, cfg, const, backward=False)
        return o.total - o.adversarial, o.adversarial

    def central(arr, idx, h, disc):
        old = arr[idx]
        arr[idx] = old + h
        rest_up, ad_up = parts()
        arr[idx] = old - h
        rest_dn, ad_dn = parts()
        arr[idx] = old
        d_ad = (ad_up - ad_dn) / (2 * h)
        return (rest_up - rest_dn) / (2 * h) + (d_ad if disc else -l_am * d_ad)

    worst = 0.0
    for name, layer in m.named_layers():
        disc = name.startswith("discriminator")
        for arr, grad in layer.params():
            for idx in np.ndindex(arr.shape):
                rel = min(
                    abs(fd - grad[idx]) / max(abs(fd), abs(grad[idx]), 1e-8)
                    for fd in (central(arr, idx, h, disc) for h in steps)
                )
                worst = max(worst, rel)
    return worst


def test_criterion_1_gradient_correctness(acceptance_report):
    start = time.perf_counter()
    worst = max(_gradient_case(seed) for seed in range(10))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-4 and elapsed < 30
    acceptance_report(1, ok, f"worst relative error {worst:.2e} over 10 seeds, {elapsed:.1f} s")
    assert ok


# ---------------------------------------------------------------- 2


def test_criterion_2_label_propagation_oracle(acceptance_report):
    start = time.perf_counter()
    worst, exact = 0.0, True
    for g in range(50):
        rng = make_rng(g, 0x1B)
        n = int(rng.integers(2, 11))
        K = int(rng.integers(2, 4))
        f = rng.normal(size=(n, 3))
        A = knn_affinity(f, int(rng.integers(1, n)), mutual=bool(g % 2))
        lam = float(rng.uniform(0.05, 10.0))
        anchors = rng.random(size=(n, K))
        dense = np.linalg.solve(np.eye(n) + lam * normalized_laplacian(A), anchors)
        worst = max(worst, float(np.max(np.abs(propagate(A, anchors, lam) - dense))))
        exact &= np.array_equal(propagate(A, anchors, 0.0), anchors)
        ns = int(rng.integers(1, n))
        src = np.eye(K)[rng.integers(0, K, ns)]
        tgt = rng.dirichlet(np.ones(K), size=n - ns)
        exact &= np.array_equal(label_propagation(f, src, tgt, lam=0.0), tgt)
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-8 and exact and elapsed < 10
    acceptance_report(2, ok, f"max |CG - dense| {worst:.1e} on 50 graphs, lambda=0 exact: {exact}, {elapsed:.2f} s")
    assert ok


# ---------------------------------------------------------------- 3


def test_criterion_3_expansion_law(acceptance_report):
    checked, bad = 0, []
    for n_t in (7, 100, 1000):
        rng = make_rng(n_t, 3)
        table = combined_scores(*[rng.dirichlet(np.ones(3), size=n_t) for _ in range(3)])
        unl, _ = hide_labels(_dummy(n_t, Domain.TARGET))
        src = _dummy(5, Domain.SOURCE)
        for N in range(2, 9):
            prev = set()
            for n in range(1, N + 1):
                expect = (n - 1) * n_t // N
                sel = {i for i, _ in select_top_fraction(table, Fraction(n - 1, N))}
                grown = len(expand_source(src, unl, table, n, N)) - len(src)
                if not (len(sel) == expect == grown == selection_size(Fraction(n - 1, N), n_t) and prev <= sel):
                    bad.append((N, n, n_t))
                prev = sel
                checked += 1
    ok = not bad
    acceptance_report(3, ok, f"{checked} (N, n, n_t) cases, violations: {bad[:3] or 'none'}")
    assert ok


def _dummy(n, domain):
    return Dataset(make_rng(n).normal(size=(n, 2)), np.zeros(n, dtype=np.int64), np.full(n, int(domain)), 3)


# ---------------------------------------------------------------- 4


def test_criterion_4_gsde_benefit(reference_experiment, acceptance_report):
    results, elapsed = reference_experiment
    mean = final_accuracies(results).mean(axis=0)
    gain = mean[-1] - mean[0]
    steps = int(np.sum(np.diff(mean) >= 0))
    ok = gain >= 0.02 and steps >= 3 and elapsed < 600
    acceptance_report(4, ok, f"mean final accuracy per run {np.round(mean, 4).tolist()}, "
                             f"run5 - run1 = {100 * gain:.2f} pts, nondecreasing steps {steps}/4, {elapsed:.0f} s")
    assert ok


# ---------------------------------------------------------------- 5


def test_criterion_5_reinitialization(reference_experiment, no_reinit_experiment, acceptance_report):
    default = final_accuracies(reference_experiment[0])[:, -1].mean()
    kept = final_accuracies(no_reinit_experiment[0])[:, -1].mean()
    diff = default - kept
    ok = diff >= -0.005
    acceptance_report(5, ok, f"default {default:.4f} vs no_reinit {kept:.4f} (difference {100 * diff:+.2f} pts)")
    assert ok


# ---------------------------------------------------------------- 6


def test_criterion_6_early_alignment(reference_experiment, acceptance_report):
    results, _ = reference_experiment
    first = np.mean([accuracy_at(res.records[0], 100) for res in results])
    last = np.mean([accuracy_at(res.records[-1], 100) for res in results])
    ok = last - first >= 0.05
    acceptance_report(6, ok, f"accuracy at iteration 100: run1 {first:.4f}, run5 {last:.4f} "
                             f"(+{100 * (last - first):.2f} pts)")
    assert ok


# ---------------------------------------------------------------- 7


def test_criterion_7_discriminator_convergence(reference_experiment, acceptance_report):
    results, _ = reference_experiment
    horizon = reference_config().iterations_per_run // 5

    def gap(record):
        pts = [tp for tp in record.trace if tp.iteration <= horizon]
        return np.mean([abs(tp.disc_src - tp.disc_tgt) for tp in pts])

    gaps = [(gap(res.records[0]), gap(res.records[-1])) for res in results]
    wins = sum(last < first for first, last in gaps)
    ok = wins >= 4
    detail = ", ".join(f"{a:.3f}->{b:.3f}" for a, b in gaps)
    acceptance_report(7, ok, f"early |disc gap| run1->run5 per seed: {detail}; smaller in {wins}/5")
    assert ok


# ---------------------------------------------------------------- 8


def test_criterion_8_multi_bottleneck(tmp_path, acceptance_report):
    x = make_rng(8).normal(size=(16, 2))
    dims = ModelDims(input_dim=2)
    worst = 0.0
    for k in (2, 3, 5, 7):
        m = init_model(dims, k=k, seed=k)
        for b in m.bottlenecks[1:]:
            b.weight[...] = m.bottlenecks[0].weight
            b.bias[...] = m.bottlenecks[0].bias
        single = init_model(dims, k=1, seed=k)
        single.bottlenecks[0] = m.bottlenecks[0].copy()
        worst = max(worst, float(np.max(np.abs(m.forward(x).features - single.forward(x).features))))
    cfg = reference_config()
    cfg.seeds = [0]
    path = tmp_path / "ref.txt"
    path.write_text("\n".join(dump_config(cfg)) + "\n")
    code = cli_main(["sweep", str(path), "--axis", "bottlenecks", "--out", str(tmp_path / "k.csv")])
    points = [line.split(",")[1] for line in (tmp_path / "k.csv").read_text().splitlines()[1:]]
    ok = worst <= 1e-12 and code == 0 and points == ["1", "3", "5", "7"]
    acceptance_report(8, ok, f"cloned-vs-single max difference {worst:.1e}; k-sweep exit {code}, points {points}")
    assert ok


# ---------------------------------------------------------------- 9


def test_criterion_9_simplex_conservation(reference_experiment, acceptance_report):
    results, _ = reference_experiment
    worst, negative, tables = 0.0, False, 0
    for res in results:
        for rec in res.records:
            t = rec.scores
            tables += 1
            for arr in (t.p, t.p_na, t.p_lp, t.p_all):
                worst = max(worst, float(np.max(np.abs(arr.sum(axis=1) - 1.0))))
                negative |= bool(np.any(arr < 0))
    ok = worst <= 1e-6 and not negative and tables == 25
    acceptance_report(9, ok, f"{tables} score tables, max |row sum - 1| {worst:.1e}, negatives: {negative}")
    assert ok


# ---------------------------------------------------------------- 10


def test_criterion_10_no_label_leak(reference_experiment, acceptance_report):
    results, _ = reference_experiment
    leaked = [res.vault.leaked_reads for res in results]
    evals = [res.vault.eval_reads for res in results]
    # the counter must actually be live: evaluation reads are recorded
    ok = all(v == 0 for v in leaked) and all(e > 0 for e in evals)
    acceptance_report(10, ok, f"reads outside evaluation per seed {leaked}; evaluation reads {evals}")
    assert ok
