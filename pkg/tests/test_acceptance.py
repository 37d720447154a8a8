"""Acceptance suite: one test per criterion, each printing a PASS/FAIL verdict line.

The tolerances below are the pinned acceptance thresholds; do not loosen them.
"""

import json
import re
import time
from dataclasses import replace

import numpy as np
import pytest

from fairwos import nn
from fairwos.cli import main
from fairwos.counterfactual import brute_force_counterfactuals, find_counterfactuals
from fairwos.gnn import init_gnn, gnn_forward, neighbor_operator
from fairwos.graph import SyntheticSpec, generate_synthetic
from fairwos.lambda_solver import LambdaVec, kkt_residuals, solve_lambda
from fairwos.metrics import fairness_metrics
from fairwos.theory import check_convergence_bound, check_counterfactual_bound, quadratic_toy_trace
from fairwos.train import (
    ALPHA_GRID_SENSITIVITY,
    K_GRID_SENSITIVITY,
    DisparityTerms,
    FairwosProgram,
    TrainConfig,
    evaluate,
    finetune_stage,
    model_inputs,
    pretrain_stage,
    train_vanilla,
)
from oracles import pgd_lambda, random_cf_instance

SEEDS = range(10)

LAMBDA_TOL = 1e-6
KKT_TOL = 1e-8
LAMBDA_BUDGET_S = 5.0
GRAD_TOL = 1e-4
GRAD_BUDGET_S = 30.0
CF_DIST_TOL = 1e-12
CF_BUDGET_S = 30.0
BOUND_BUDGET_S = 10.0
TRADEOFF_DSP_CUT = 0.30
TRADEOFF_ACC_DROP = 0.03
TRADEOFF_BUDGET_S = 600.0
ABLATION_INVERSIONS = 1
TREND_MIN_PAIRS = 3  # of 4 adjacent alpha pairs, i.e. at most one inversion
K_TREND_MIN_PAIRS = 2  # of the 3 pairs K in 1..4 offers, the same single inversion


# ------------------------------------------------------------------ 1. λ solver


def test_criterion_01_lambda_oracle(verdicts):
    rng = np.random.default_rng(0)
    count = 200
    sizes = rng.integers(1, 11, count)
    d = rng.uniform(0.0, 10.0, (count, 10))
    alpha = rng.choice([0.01, 0.05, 1.0, 2.0, 5.0], count)
    mask = np.arange(10)[None, :] < sizes[:, None]
    ref = pgd_lambda(d, alpha, mask)
    t0 = time.perf_counter()
    sols = [solve_lambda(d[k, :m], alpha[k]) for k, m in enumerate(sizes)]
    elapsed = time.perf_counter() - t0
    err = max(float(np.max(np.abs(s.weights - ref[k, :m]))) for k, (s, m) in enumerate(zip(sols, sizes)))
    kkt = 0.0
    for k, (s, m) in enumerate(zip(sols, sizes)):
        r = kkt_residuals(d[k, :m], alpha[k], s)
        kkt = max(kkt, *(r[key] for key in ("stationarity", "dual_feasibility", "complementarity",
                                             "primal_sum", "primal_nonneg")))
    ok = err <= LAMBDA_TOL and kkt <= KKT_TOL and elapsed < LAMBDA_BUDGET_S
    verdicts.record(1, "lambda solver vs projected-gradient oracle", ok,
                    f"max |diff| {err:.2e} (<= {LAMBDA_TOL}), max KKT residual {kkt:.2e} (<= {KKT_TOL}), "
                    f"{elapsed:.3f}s (< {LAMBDA_BUDGET_S}s)")
    assert ok


# ------------------------------------------------------------------ 2. gradients


def test_criterion_02_gradient_fidelity(verdicts):
    t0 = time.perf_counter()
    worst = 0.0
    for restart in range(10):
        rng = np.random.default_rng(restart)
        g = generate_synthetic(SyntheticSpec(num_nodes=20, seed=restart))
        x0 = rng.standard_normal((20, 4))
        bits = rng.integers(0, 2, (20, 4))
        model = init_gnn(4, 8, num_layers=1, backbone="gcn", seed=restart)
        nbr = neighbor_operator(g, "gcn")
        train = g.split == "train"
        labels = np.where(g.labels < 0, 0, g.labels)
        h, _ = gnn_forward(x0, nbr, model)
        cf = find_counterfactuals(h, bits, labels, 2, candidate_pool=train)
        lam = LambdaVec(rng.dirichlet(np.ones(4)), np.ones(4, bool))
        prog = FairwosProgram(x0, nbr, model, labels, train, DisparityTerms(cf, train), h.copy(), lam,
                              float(rng.choice([0.01, 1.0, 5.0])))
        worst = max(worst, nn.grad_check(prog, model.params, tol=GRAD_TOL).worst)
    elapsed = time.perf_counter() - t0
    ok = worst < GRAD_TOL and elapsed < GRAD_BUDGET_S
    verdicts.record(2, "full objective gradient check", ok,
                    f"max relative error {worst:.2e} (< {GRAD_TOL}) over 10 restarts, {elapsed:.1f}s "
                    f"(< {GRAD_BUDGET_S}s)")
    assert ok


# ------------------------------------------------------------------ 3. retrieval


def test_criterion_03_counterfactual_equivalence(verdicts):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    ids_equal, worst = True, 0.0
    for _ in range(50):
        h, bits, labels, K, pool = random_cf_instance(rng)
        fast = find_counterfactuals(h, bits, labels, K, pool)
        slow = brute_force_counterfactuals(h, bits, labels, K, pool)
        ids_equal &= bool(np.array_equal(fast.ids, slow.ids))
        filled = fast.ids >= 0
        worst = max(worst, float(np.max(np.abs(fast.dists[filled] - slow.dists[filled]), initial=0.0)))
    elapsed = time.perf_counter() - t0
    ok = ids_equal and worst <= CF_DIST_TOL and elapsed < CF_BUDGET_S
    verdicts.record(3, "counterfactual retrieval vs brute force", ok,
                    f"ids identical: {ids_equal}, max distance diff {worst:.1e} (<= {CF_DIST_TOL}), "
                    f"{elapsed:.1f}s (< {CF_BUDGET_S}s)")
    assert ok


# ------------------------------------------------------------------ 4. metrics


def test_criterion_04_metrics(verdicts):
    s = np.array([0, 0, 0, 0, 1, 1, 1, 1])
    y = np.array([1, 1, 0, 0, 1, 1, 0, 0])
    checks = {
        "constant predictor": fairness_metrics(np.ones(8), y, s).delta_sp == 0.0,
        "3/4 vs 1/4": fairness_metrics(np.array([1, 1, 1, 0, 1, 0, 0, 0]), y, s).delta_sp == 0.5,
        "TPR 2/2 vs 1/2": fairness_metrics(np.array([1, 1, 0, 0, 1, 0, 0, 0]), y, s).delta_eo == 0.5,
    }
    rng = np.random.default_rng(4)
    constant_ok = 0
    for _ in range(100):
        n = int(rng.integers(2, 60))
        sens = rng.integers(0, 2, n)
        sens[0], sens[-1] = 0, 1
        rep = fairness_metrics(np.full(n, rng.integers(0, 2)), rng.integers(0, 2, n), sens)
        constant_ok += rep.delta_sp == 0.0
    ok = all(checks.values()) and constant_ok == 100
    verdicts.record(4, "fairness metrics", ok,
                    ", ".join(f"{k}: {'ok' if v else 'wrong'}" for k, v in checks.items())
                    + f", constant predictors with zero gap {constant_ok}/100")
    assert ok


# ------------------------------------------------------------------ shared experiment


def default_config(seed: int, **over) -> TrainConfig:
    return replace(TrainConfig(seed=seed), **over)


@pytest.fixture(scope="module")
def experiment():
    """All runs on the default synthetic graph for seeds 0..9.

    Fine-tuning variants that share pretraining settings (alpha, K, the
    fairness and weight-update switches) reuse one pretrained stage per seed.
    """
    variants = {"fairwos": {}, "no_fairness": {"disable_fairness": True},
                "no_weight_update": {"disable_weight_update": True}}
    variants.update({f"alpha={a}": {"alpha": a} for a in ALPHA_GRID_SENSITIVITY})
    variants.update({f"K={k}": {"K": k} for k in K_GRID_SENSITIVITY})
    results = {name: [] for name in ["vanilla", "no_encoder", *variants]}
    core_time, states = 0.0, {}
    for seed in SEEDS:
        g = generate_synthetic(SyntheticSpec(seed=seed))
        t0 = time.perf_counter()
        van = train_vanilla(g, default_config(seed))
        pre = pretrain_stage(g, default_config(seed))
        fw, trace = finetune_stage(g, pre, default_config(seed))
        core_time += time.perf_counter() - t0
        states[seed] = (g, fw)
        results["vanilla"].append(evaluate(g, van))
        results["fairwos"].append(evaluate(g, fw))
        for name, over in variants.items():
            if name == "fairwos":
                continue
            state, _ = finetune_stage(g, pre, default_config(seed, **over))
            results[name].append(evaluate(g, state))
        cfg = default_config(seed, disable_encoder=True)
        state, _ = finetune_stage(g, pretrain_stage(g, cfg), cfg)
        results["no_encoder"].append(evaluate(g, state))
    means = {name: {"acc": np.mean([r.accuracy for r in reps]),
                    "dsp": np.mean([r.delta_sp for r in reps]),
                    "deo": np.mean([r.delta_eo for r in reps])} for name, reps in results.items()}
    return {"means": means, "results": results, "core_time": core_time, "states": states}


# ------------------------------------------------------------------ 5–6. theory


def test_criterion_05_embedding_bound(verdicts, experiment):
    g, state = experiment["states"][0]
    x0 = model_inputs(g, state)
    t0 = time.perf_counter()
    rep = check_counterfactual_bound(state.gnn, x0, neighbor_operator(g, state.gnn.backbone), trials=100)
    elapsed = time.perf_counter() - t0
    ok = rep.pass_rate == 1.0 and len(rep.trials) == 100 and elapsed < BOUND_BUDGET_S
    worst = min(t.margin for t in rep.trials)
    verdicts.record(5, "embedding-difference bound on a trained model", ok,
                    f"pass rate {rep.pass_rate:.0%} of {len(rep.trials)} trials, smallest margin {worst:.3g}, "
                    f"{elapsed:.2f}s (< {BOUND_BUDGET_S}s)")
    assert ok


def test_criterion_06_convergence_bound(verdicts):
    toy = check_convergence_bound(quadratic_toy_trace())
    g = generate_synthetic(SyntheticSpec(seed=0))
    config = default_config(0, finetune_optimizer="sgd", finetune_lr=0.05, freeze_counterfactuals=True,
                            disable_weight_update=True, selection="last", finetune_epochs=30)
    _, trace = finetune_stage(g, pretrain_stage(g, config), config)
    real = check_convergence_bound(trace)
    ok = (toy.status == "pass" and real.status == "pass"
          and toy.details["running_min_nonincreasing"] and real.details["running_min_nonincreasing"])
    verdicts.record(6, "gradient-norm convergence bound", ok,
                    f"quadratic toy {toy.status} (L~{toy.details['L_estimate']:.3g}), frozen-counterfactual "
                    f"trace {real.status} over T={real.details['T']} (L~{real.details['L_estimate']:.3g}, "
                    f"M={real.details['M']:.3g}), running minimum nonincreasing")
    assert ok


# ------------------------------------------------------------------ 7–9. synthetic analogs


def test_criterion_07_tradeoff(verdicts, experiment):
    m = experiment["means"]
    van, fw = m["vanilla"], m["fairwos"]
    cut = 1.0 - fw["dsp"] / van["dsp"]
    drop = van["acc"] - fw["acc"]
    elapsed = experiment["core_time"]
    ok = (cut >= TRADEOFF_DSP_CUT and fw["deo"] < van["deo"] and drop <= TRADEOFF_ACC_DROP
          and elapsed < TRADEOFF_BUDGET_S)
    verdicts.record(7, "fairness/utility trade-off vs vanilla", ok,
                    f"dSP {van['dsp']:.3f} -> {fw['dsp']:.3f} ({cut:.0%} lower, need >= {TRADEOFF_DSP_CUT:.0%}), "
                    f"dEO {van['deo']:.3f} -> {fw['deo']:.3f}, accuracy {van['acc']:.3f} -> {fw['acc']:.3f} "
                    f"(drop {100 * drop:.1f} points, need <= {100 * TRADEOFF_ACC_DROP:.0f}), "
                    f"{elapsed:.0f}s (< {TRADEOFF_BUDGET_S:.0f}s)")
    assert ok


def test_criterion_08_ablation_order(verdicts, experiment):
    m = experiment["means"]
    ablations = ("no_encoder", "no_fairness", "no_weight_update")
    inversions = []
    for name in ablations:
        if m["fairwos"]["dsp"] > m[name]["dsp"]:
            inversions.append(f"fairwos > {name}")
        if m[name]["dsp"] > m["vanilla"]["dsp"]:
            inversions.append(f"{name} > vanilla")
    ok = len(inversions) <= ABLATION_INVERSIONS
    detail = ", ".join(f"{k} {m[k]['dsp']:.3f}" for k in ("fairwos", *ablations, "vanilla"))
    verdicts.record(8, "ablation ordering of mean dSP", ok,
                    f"{detail}; inversions {inversions or 'none'} (<= {ABLATION_INVERSIONS})")
    assert ok


def nonincreasing_pairs(values) -> int:
    return sum(b <= a for a, b in zip(values, values[1:]))


def test_criterion_09_hyperparameter_trend(verdicts, experiment):
    m = experiment["means"]
    # alpha = 0 (fine-tuning without the fairness term) anchors the grid, giving 4 adjacent pairs
    alpha_curve = [m["no_fairness"]["dsp"]] + [m[f"alpha={a}"]["dsp"] for a in ALPHA_GRID_SENSITIVITY]
    k_curve = [m[f"K={k}"]["dsp"] for k in K_GRID_SENSITIVITY]
    a_ok = nonincreasing_pairs(alpha_curve) >= TREND_MIN_PAIRS
    k_ok = nonincreasing_pairs(k_curve) >= K_TREND_MIN_PAIRS
    ok = a_ok and k_ok
    verdicts.record(9, "dSP trend in alpha and K", ok,
                    f"alpha 0,{','.join(map(str, ALPHA_GRID_SENSITIVITY))}: "
                    f"{' '.join(f'{v:.3f}' for v in alpha_curve)} ({nonincreasing_pairs(alpha_curve)}/4 "
                    f"nonincreasing); K 1..4: {' '.join(f'{v:.3f}' for v in k_curve)} "
                    f"({nonincreasing_pairs(k_curve)}/3 nonincreasing)")
    assert ok


# ------------------------------------------------------------------ 10. determinism


def test_criterion_10_determinism(verdicts, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("synthetic.num_nodes = 300\npretrain_epochs = 200\nseeds = 0,1,2\n")
    raw = []
    for name in ("first", "second"):
        out = tmp_path / name
        assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
        data = (out / "report.json").read_bytes()
        masked, hits = re.subn(rb'"timestamp": "[^"]*"', b'"timestamp": ""', data)
        assert hits == 1
        raw.append(masked)
    ok = raw[0] == raw[1]
    seeds = len(json.loads(raw[0])["per_seed"])
    verdicts.record(10, "byte-identical report.json across runs", ok,
                    f"{seeds} seeds, {len(raw[0])} bytes compared with the timestamp masked")
    assert ok
