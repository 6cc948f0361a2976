"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

Criteria 5-7 share one set of training runs (five seeds, each a baseline
scorer plus the unconstrained and dual variants on the default synthetic
dataset), built once per session and timed as a whole.
"""
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from dualattn import evalkit
from dualattn.consistency import (
    DualWitness,
    consistency_penalty,
    marginal_residual,
    primal_objective,
    project_consistent_oracle,
    reparam_coarse,
    reparam_fine,
    solve_witness,
)
from dualattn.diffkit import grad_check
from dualattn.grid import NeighborhoodMap, ProbabilityMap, build_neighborhood, segment_sum
from dualattn.synthdata import DatasetSpec, generate
from dualattn.toynet import TrainConfig, attribution, predict, train

SIDES = [(4, 2), (6, 3), (8, 4), (10, 5), (12, 6), (14, 7), (16, 8)]
SEEDS = (0, 1, 2, 3, 4)
RESIDUAL_SEEDS = SEEDS[:3]
BASELINE_EPOCHS = 6
VARIANT_EPOCHS = 12
N_TRAIN = 2000
RUN_BUDGET_S = 30 * 60


def record(number: int, passed: bool, detail: str):
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} | {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    assert passed, line


def _instance(rng, fine, coarse):
    conc = rng.choice([0.3, 1.0, 5.0])
    tk = ProbabilityMap.from_weights(rng.dirichlet(np.full(fine * fine, conc)) + 1e-8)
    tl = ProbabilityMap.from_weights(rng.dirichlet(np.full(coarse * coarse, conc)) + 1e-8)
    return tk, tl, build_neighborhood(fine, coarse)


@pytest.fixture(scope="module")
def instances():
    rng = np.random.default_rng(20240601)
    return [_instance(rng, *SIDES[i % len(SIDES)]) for i in range(1000)]


def test_criterion_1_oracle_dual_equivalence(instances):
    start = time.perf_counter()
    worst_entry = worst_obj = worst_res = 0.0
    for tk, tl, nmap in instances:
        ref = project_consistent_oracle(tk, tl, nmap, tol=1e-12)
        w = solve_witness(tk, tl, nmap)
        mk, ml = reparam_fine(tk, w, nmap).flat, reparam_coarse(tl, w).flat
        worst_entry = max(worst_entry, np.abs(mk - ref.mu_fine.flat).max(), np.abs(ml - ref.mu_coarse.flat).max())
        worst_obj = max(worst_obj, abs(primal_objective(mk, ml, tk.flat, tl.flat) - ref.objective))
        worst_res = max(worst_res, np.abs(marginal_residual(tk, tl, w, nmap)).max())
    elapsed = time.perf_counter() - start
    passed = worst_entry <= 1e-6 and worst_obj <= 1e-8 and worst_res <= 1e-10 and elapsed <= 60
    record(1, passed, f"1000 instances, max entry gap {worst_entry:.2e} (<=1e-6), objective gap {worst_obj:.2e} "
                      f"(<=1e-8), residual {worst_res:.2e} (<=1e-10), {elapsed:.1f}s (<=60s)")


def test_criterion_2_optimality_certificate(instances):
    rng = np.random.default_rng(7)
    violations, worst_margin = 0, np.inf
    for tk, tl, nmap in instances:
        w = solve_witness(tk, tl, nmap)
        mk, ml = reparam_fine(tk, w, nmap).flat, reparam_coarse(tl, w).flat
        best = primal_objective(mk, ml, tk.flat, tl.flat)
        # half far away (fresh Dirichlet draws), half close (mixtures shrinking toward the optimum)
        far = rng.dirichlet(np.full(mk.size, 0.5), size=50)
        eps = np.logspace(-3, 0, 50)[:, None]
        near = (1 - eps) * mk + eps * rng.dirichlet(np.ones(mk.size), size=50)
        for cand in np.vstack([far, near]):
            cand = np.maximum(cand, 1e-300)
            cand = cand / cand.sum()
            obj = primal_objective(cand, segment_sum(cand, nmap), tk.flat, tl.flat)
            worst_margin = min(worst_margin, obj - best)
            violations += not best <= obj + 1e-12
    record(2, violations == 0, f"100 feasible competitors x 1000 instances, violations {violations}, "
                               f"smallest margin {worst_margin:.2e} (slack 1e-12)")


def test_criterion_3_penalty():
    rng = np.random.default_rng(3)
    at_witness, at_zero = 0.0, np.inf
    for fine, coarse in SIDES:
        for _ in range(20):
            tk, tl, nmap = _instance(rng, fine, coarse)
            at_witness = max(at_witness, consistency_penalty(tk, tl, solve_witness(tk, tl, nmap), nmap))
            at_zero = min(at_zero, consistency_penalty(tk, tl, DualWitness(np.zeros(nmap.n_coarse)), nmap))
    pairs = NeighborhoodMap.from_groups([[0, 1], [2, 3]])
    hand = consistency_penalty(ProbabilityMap([0.1, 0.2, 0.3, 0.4]), ProbabilityMap([0.5, 0.5]), DualWitness([0, 0]), pairs)
    stated = 0.0871265
    passed = at_witness <= 1e-12 and at_zero > 0 and abs(hand - stated) <= 1e-6
    record(3, passed, f"max penalty at witness {at_witness:.2e} (<=1e-12), min penalty at lambda=0 {at_zero:.2e} (>0), "
                      f"4-cell value {hand:.7f} vs stated {stated} (|diff| {abs(hand - stated):.1e}, tol 1e-6)")


def test_criterion_4_gradients():
    from test_attention import CELLS, KEYS, U, _pipeline
    from test_diffkit import CASES
    from test_toynet import test_full_model_gradient

    from dualattn.attention import cascade_t
    from dualattn.consistency import penalty_t
    from dualattn.diffkit import Tensor, ops

    failures, worst, count = [], 0.0, 0

    def check(name, fn, point):
        nonlocal worst, count
        report = grad_check(fn, point, step=1e-5, tol=1e-4)
        count += 1
        worst = max(worst, report.max_rel_error)
        if not report.passed:
            failures.append(f"{name} ({report.max_rel_error:.1e})")

    for name, fn, point in CASES:
        check(name, fn, point)
    base = {"U": U, "keys": KEYS, "cells": CELLS}
    for wrt in base:

        def gate(x, wrt=wrt):
            args = {k: Tensor(v) for k, v in base.items()}
            args[wrt] = x
            return _pipeline(args["U"], args["keys"], args["cells"])

        check(f"gate/{wrt}", gate, base[wrt])
    rng = np.random.default_rng(4)
    gates = [(rng.normal(size=(4, 4)), rng.normal(size=(9, 4))) for _ in range(2)]
    weights = rng.normal(size=(2, 9, 4))

    def cascade(cells):
        tau, out = cascade_t((Tensor(gates[0][0]), Tensor(gates[0][1])), (Tensor(gates[1][0]), Tensor(gates[1][1])), cells)
        return ops.add(ops.sum(ops.pointwise_mul(out, Tensor(weights))), ops.sum(ops.pointwise_mul(tau, Tensor(weights[:, :, 0]))))

    check("cascade/cells", cascade, rng.normal(size=(2, 9, 4)))
    tk, tl, nmap = _instance(rng, 8, 4)
    args = {"tau_fine": tk.flat[None], "tau_coarse": tl.flat[None], "lam": rng.normal(size=(1, 16))}
    for wrt in args:

        def pen(x, wrt=wrt):
            kw = {k: Tensor(v) for k, v in args.items()}
            kw[wrt] = x
            return ops.sum(penalty_t(kw["tau_fine"], kw["tau_coarse"], kw["lam"], nmap.assignment_matrix()))

        check(f"penalty/{wrt}", pen, args[wrt])
    from dualattn.synthdata import DatasetSpec as Spec, generate as gen

    tiny = gen(Spec(count=8, seed=11))
    for variant, witness in (("dual", "free"), ("dual", "map")):
        try:
            test_full_model_gradient(variant, witness, tiny)
            count += 1
        except AssertionError as exc:
            failures.append(f"full {variant}/{witness}: {exc}")
    detail = f"{count} checks (ops, gate pipeline, cascade, penalty, full dual loss), worst op error {worst:.1e} (tol 1e-4)"
    record(4, not failures, detail + ("" if not failures else f"; failed: {', '.join(failures)}"))


# training-based criteria ---------------------------------------------------------------------


def _map(att, ds, pos):
    return 100.0 * evalkit.mean_average_precision(
        [evalkit.AttributionRecord(att[i], ds.images[i], 1, ds.masks[i]) for i in pos]
    )


def _auc(att, ds, scorer):
    recs = [evalkit.AttributionRecord(att[i], ds.images[i], int(ds.labels[i])) for i in range(len(ds))]
    return evalkit.curve_auc(evalkit.perturbation_curve(scorer, recs))


def _block_residual(params, config, images):
    """Mean absolute gap between the two sites' attributions replicated to input resolution."""
    from dualattn.grid import build_neighborhood as bn
    from dualattn.toynet import upsample_attention

    _, fine, coarse, _ = predict(params, config, images)
    marg = fine @ bn(16, 8).assignment_matrix()
    return float(np.abs(upsample_attention(coarse, 8) - upsample_attention(marg, 8)).mean())


@pytest.fixture(scope="module")
def experiment():
    start = time.perf_counter()
    data = generate(DatasetSpec())
    train_set, eval_set = data.split(N_TRAIN)
    pos = np.flatnonzero(eval_set.labels == 1)
    rows = []
    for seed in SEEDS:
        base = train(train_set, TrainConfig(variant="baseline", epochs=BASELINE_EPOCHS, seed=seed))

        def scorer(images, base=base):
            return np.argmax(predict(base.params, base.config, images)[0], axis=1)

        row = {"seed": seed}
        for variant in ("unconstrained", "dual"):
            config = TrainConfig(variant=variant, epochs=VARIANT_EPOCHS, seed=seed)
            if variant == "dual" and seed in RESIDUAL_SEEDS:
                from dualattn.toynet import init_params

                row["res_init"] = _block_residual(init_params(config), config, eval_set.images)
            result = train(train_set, config)
            fine = attribution(result.params, config, eval_set.images, "fine")
            coarse = attribution(result.params, config, eval_set.images, "coarse")
            row[f"{variant}_map_coarse"] = _map(coarse, eval_set, pos)
            row[f"{variant}_map_fine"] = _map(fine, eval_set, pos)
            row[f"{variant}_auc_fine"] = _auc(fine, eval_set, scorer)
            if variant == "dual" and seed in RESIDUAL_SEEDS:
                row["res_final"] = _block_residual(result.params, config, eval_set.images)
        rand = np.stack([evalkit.random_attribution((64, 64), 1000 * seed + i) for i in range(len(eval_set))])
        row["random_auc"] = _auc(rand, eval_set, scorer)
        rows.append(row)
        print(row, flush=True)
    return rows, time.perf_counter() - start


def _mean(rows, key):
    return float(np.mean([r[key] for r in rows if key in r]))


@pytest.mark.slow
def test_criterion_5_map_ordering(experiment):
    rows, elapsed = experiment
    dual, unc = _mean(rows, "dual_map_coarse"), _mean(rows, "unconstrained_map_coarse")
    passed = dual - unc >= 10.0 and elapsed <= RUN_BUDGET_S
    record(5, passed, f"coarse-site mAP over {len(rows)} seeds: dual {dual:.2f} vs unconstrained {unc:.2f} "
                      f"(gap {dual - unc:+.2f}, need >= +10); fine site dual {_mean(rows, 'dual_map_fine'):.2f} vs "
                      f"{_mean(rows, 'unconstrained_map_fine'):.2f}; all runs {elapsed / 60:.1f} min (<=30)")


@pytest.mark.slow
def test_criterion_6_auc_ordering(experiment):
    rows, _ = experiment
    dual, unc, rand = _mean(rows, "dual_auc_fine"), _mean(rows, "unconstrained_auc_fine"), _mean(rows, "random_auc")
    record(6, dual > rand and dual > unc, f"fine-site perturbation AUC over {len(rows)} seeds: dual {dual:.2f}, "
                                          f"unconstrained {unc:.2f}, random {rand:.2f} (need dual > both)")


@pytest.mark.slow
def test_criterion_7_residual_decrease(experiment):
    rows, _ = experiment
    init, final = _mean(rows, "res_init"), _mean(rows, "res_final")
    drop = 1.0 - final / init
    record(7, drop >= 0.5, f"dual block-replicated residual over {len(RESIDUAL_SEEDS)} seeds: "
                           f"{init:.3e} -> {final:.3e} ({100 * drop:.1f}% decrease, need >= 50%)")


def test_criterion_8_metric_oracles():
    from test_evalkit import brute_force_ap

    rng = np.random.default_rng(8)
    mismatches = 0
    for t in range(200):
        att = rng.random((8, 8))
        if t % 4 == 0:
            att = np.round(att * 5) / 5
        mask = (rng.random((8, 8)) < rng.uniform(0.05, 0.6)).astype(np.uint8)
        mask.flat[rng.integers(64)] = 1
        mismatches += evalkit.average_precision(att, mask) != brute_force_ap(att, mask)[0]
    curves = [([0.0, 1.0], [33.3, 33.3], 33.3), ([0.0, 1.0], [100.0, 0.0], 50.0), ([0.0, 0.5, 1.0], [100.0, 100.0, 0.0], 75.0)]
    auc_ok = all(abs(evalkit.curve_auc(evalkit.PerturbationCurve(f, b)) - e) <= 1e-12 for f, b, e in curves)
    mask = np.zeros((64, 64), np.uint8)
    mask[:8, :8] = 1
    ties = np.array([0.05] * 7 + [0.2] * 3).reshape(2, 5)
    tie_mask = np.zeros((2, 5), np.uint8)
    tie_mask.flat[7:] = 1
    iou_ok = (
        evalkit.iou_at_quantile(np.full((64, 64), 1 / 4096), mask, 0.95) == 0.0
        and evalkit.iou_at_quantile(ties / ties.sum(), tie_mask, 0.9) == 0.0
        and evalkit.iou_at_quantile(ties / ties.sum(), tie_mask, 0.5) == 1.0
    )
    record(8, mismatches == 0 and auc_ok and iou_ok,
           f"mAP vs brute force: {mismatches}/200 mismatches; hand AUC curves {'ok' if auc_ok else 'wrong'}; "
           f"IoU tie cases {'ok' if iou_ok else 'wrong'}")


def test_criterion_9_determinism(tmp_path):
    from dualattn import cli

    def pipeline(root):
        root.mkdir()
        steps = [
            ["synth", "--count", "48", "--seed", "5", "--out", root / "d.cads"],
            ["train", "--variant", "dual", "--data", root / "d.cads", "--seed", "3", "--epochs", "2",
             "--batch-size", "8", "--out", root / "run"],
            ["train", "--variant", "baseline", "--data", root / "d.cads", "--epochs", "1", "--batch-size", "8",
             "--out", root / "base"],
            ["attribute", "--run", root / "run", "--data", root / "d.cads", "--site", "coarse"],
            ["eval", "--run", root / "run", "--data", root / "d.cads", "--source", "coarse"],
            ["perturb", "--run", root / "run", "--data", root / "d.cads", "--source", "coarse", "--scorer", root / "base"],
        ]
        for argv in steps:
            assert cli.main([str(a) for a in argv]) == 0, argv
        return {
            name: (root / name).read_bytes()
            for name in ("d.cads", "run/metrics.csv", "run/checkpoint.catn", "run/segmentation_coarse.csv",
                         "run/perturb_coarse.csv", "base/checkpoint.catn")
        }

    a, b = pipeline(tmp_path / "a"), pipeline(tmp_path / "b")
    differing = [k for k in a if a[k] != b[k]]
    record(9, not differing, f"{len(a)} artifacts compared bitwise across two runs; differing: {differing or 'none'}")
