"""The eight acceptance criteria, each printing one PASS/FAIL line.

Criteria 3 and 5 share one pair of 30-epoch training runs on the 8-class
synthetic set, so this module takes several minutes on a single core.
"""

import json
import math
import time

import numpy as np
import pytest

from oracles import brute_force_pairs, random_batch
from pcnet import gradcheck
from pcnet.cli import main
from pcnet.config import TrainConfig
from pcnet.data import generate_synthetic, prepare_splits
from pcnet.evaluation import (AblationGrid, ablation_delta, inference_equivalence_check, read_ablation_csv,
                              write_ablation_csv)
from pcnet.model import RepresentationSet, classification_loss, ranking_loss, total_loss
from pcnet.pairing import METRICS, STRATEGIES, select_pairs
from pcnet.tensor import Tensor
from pcnet.training import cosine_lr, fit, init_state, sgd_step

TINY = ["--dataset", "synth", "--synth-classes", "4", "--synth-per-class", "12", "--input-size", "16",
        "--channels", "4,8", "--P", "4", "--K", "3", "--train-fraction", "0.5", "--seed", "7"]


@pytest.fixture
def verdict(capsys):
    def emit(number, title, ok, detail):
        with capsys.disabled():
            print(f"\nacceptance {number} {'PASS' if ok else 'FAIL'}: {title} ({detail})")
        assert ok, detail
    return emit


def test_criterion_1_gradient_suite(verdict):
    start = time.perf_counter()
    results = gradcheck.run(instances=20, seed=0)
    seconds = time.perf_counter() - start
    primitives = [r for r in results if r.tolerance == gradcheck.PRIMITIVE_TOL]
    composite = [r for r in results if r.tolerance == gradcheck.COMPOSITE_TOL]
    bad = [r.name for r in results if not r.ok or r.instances < 20]
    ok = not bad and len(composite) == 1 and primitives and seconds < 120
    verdict(1, "finite-difference gradients", ok,
            f"{len(primitives)} primitives max {max(r.max_rel_error for r in primitives):.1e} < 1e-5, "
            f"composite {composite[0].max_rel_error:.1e} < 1e-4, {seconds:.1f}s, failing={bad}")


def test_criterion_2_pair_oracle(verdict):
    start = time.perf_counter()
    mismatches, batches = [], 1000
    for seed in range(batches):
        F, labels = random_batch(np.random.default_rng([seed, 2]), max_size=24, integer=seed % 2 == 0)
        assert len(labels) <= 24
        for metric in METRICS:
            for strategy in STRATEGIES:
                got = select_pairs(F, labels, metric, strategy, np.random.default_rng(seed))
                intra, inter, di, de = brute_force_pairs(F, labels, metric, strategy, np.random.default_rng(seed))
                if (got.intra.tolist() != intra or got.inter.tolist() != inter
                        or not np.allclose(got.intra_dist, di, rtol=1e-12, atol=1e-12)
                        or not np.allclose(got.inter_dist, de, rtol=1e-12, atol=1e-12)):
                    mismatches.append((seed, metric, strategy))
    seconds = time.perf_counter() - start
    combos = len(METRICS) * len(STRATEGIES)
    verdict(2, "pair selection equals brute force", not mismatches and seconds < 60,
            f"{batches} batches x {combos} combinations, {len(mismatches)} mismatches, {seconds:.1f}s")


def _scores(rng, B, N, dyadic):
    if dyadic:
        # multiples of 1/64 keep every subtraction and the margin comparison exact
        return rng.integers(0, 65, size=(B, N)) / 64.0
    z = rng.normal(size=(B, N)) * 3
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def test_criterion_4_loss_algebra(verdict):
    rng = np.random.default_rng(44)
    problems, zero_cases, total = [], 0, 0
    for chunk in range(100):
        B, N = 100, int(rng.integers(2, 9))
        dyadic = chunk % 2 == 0
        eps = float(rng.integers(0, 9)) / 64 if dyadic else float(rng.uniform(0, 0.2))
        lam = float(rng.uniform(0, 2))
        q = {(n, h): Tensor(_scores(rng, B, N, dyadic), dtype=np.float64) for n in (1, 2) for h in ("self", "mut")}
        c1, c2 = rng.integers(0, N, B), rng.integers(0, N, B)
        reps = RepresentationSet(None, None, None, None, q)
        lc, lr = classification_loss(reps, c1, c2), ranking_loss(reps, c1, c2, eps)
        L = total_loss(lc, lr, lam, eps).L.data
        rows = np.arange(B)
        m1 = q[(1, "self")].data[rows, c1] - q[(1, "mut")].data[rows, c1]
        m2 = q[(2, "self")].data[rows, c2] - q[(2, "mut")].data[rows, c2]
        both = (m1 >= eps) & (m2 >= eps)
        zero_cases += int(both.sum())
        total += B
        if not np.array_equal(L, lc.data + lam * lr.data):
            problems.append(f"L != L_c + lam L_r in chunk {chunk}")
        if np.any(lr.data < 0):
            problems.append(f"negative L_r in chunk {chunk}")
        if not np.array_equal(lr.data == 0, both):
            problems.append(f"zero set mismatch in chunk {chunk}")
    verdict(4, "loss algebra", not problems and total >= 10_000,
            f"{total} score vectors, {zero_cases} with both margins met, problems={problems[:3]}")


@pytest.fixture(scope="module")
def learning_runs(tmp_path_factory):
    """Baseline and PCNet on the 8-class synthetic set, 100 train / 50 test per class, seed 7."""
    ds = generate_synthetic(8, 150, (64, 64), 7)
    train, test = prepare_splits(ds, 2 / 3, 7)
    base = TrainConfig(epochs=30, seed=7, P=8, K=12)
    checks = {}

    def probe_at_ten(state, row):
        if state.epoch == 10:
            checks["default"] = inference_equivalence_check(state.model)
            checks["test_images"] = inference_equivalence_check(state.model, probes=test.images[:64])

    runs = {}
    start = time.perf_counter()
    for row_id, cfg, hook in (("arch:baseline", base.replace(architecture="single", representation="self",
                                                            objective="Lc"), None),
                              ("arch:pcnet", base, probe_at_ten)):
        state = init_state(cfg.validate(), train.num_classes, train.class_names)
        history = fit(state, train, test, on_epoch=hook)
        runs[row_id] = (cfg, history)
    seconds = time.perf_counter() - start
    out = tmp_path_factory.mktemp("acceptance")
    results = []
    for row_id, (cfg, history) in runs.items():
        results.append({"row_id": row_id, "architecture": cfg.architecture, "representation": cfg.representation,
                        "objective": cfg.objective, "metric": cfg.metric, "strategy": cfg.strategy,
                        "lambda": cfg.lam, "OA": history[-1]["test_OA"], "final_Lc": history[-1]["L_c"],
                        "final_Lr": history[-1]["L_r"], "status": "ok"})
    write_ablation_csv(results, out / "ablation.csv")
    return dict(train=train, test=test, runs=runs, checks=checks, seconds=seconds, csv=out / "ablation.csv",
                results=results)


def test_criterion_3_inference_equivalence(verdict, learning_runs):
    checks = learning_runs["checks"]
    ok = len(checks) == 2 and all(c.ok for c in checks.values())
    verdict(3, "trained weights score identically through the plain path", ok,
            "; ".join(f"{k}: {c.message}" for k, c in checks.items()) or "epoch-10 probe never ran")


def test_criterion_5_end_to_end_learning(verdict, learning_runs):
    assert len(learning_runs["train"]) == 800 and len(learning_runs["test"]) == 400
    oa = {k: h[-1]["test_OA"] for k, (_, h) in learning_runs["runs"].items()}
    rows = read_ablation_csv(learning_runs["csv"])
    delta = ablation_delta(learning_runs["results"])
    recorded = rows[-1]["row_id"].startswith("delta:") and float(rows[-1]["OA"]) == delta
    seconds = learning_runs["seconds"]
    ok = min(oa.values()) >= 0.9 and recorded and seconds < 20 * 60
    verdict(5, "baseline and PCNet reach 90% test OA in 30 epochs", ok,
            f"baseline {oa['arch:baseline']:.4f}, PCNet {oa['arch:pcnet']:.4f}, delta {delta:+.4f} "
            f"written to ablation.csv, {seconds / 60:.1f} min")


def test_criterion_6_ablation_structure(verdict, tmp_path, monkeypatch):
    monkeypatch.setenv("PCNET_OUTPUT_ROOT", str(tmp_path))
    run = tmp_path / "ablate"
    code = main(["ablate", *TINY, "--epochs", "2", "--run-dir", str(run)])
    rows = read_ablation_csv(run / "ablation.csv")
    grid = [r for r in rows if not r["row_id"].startswith("delta:")]
    expected = [r.row_id for r in AblationGrid.default().rows]
    groups = {p: sum(r["row_id"].startswith(p) for r in grid) for p in ("arch:", "metric:", "strategy:", "lambda:")}
    finite = all(math.isfinite(float(r["OA"])) and r["status"] == "ok" for r in grid)
    lambdas = sorted(float(r["lambda"]) for r in grid if r["row_id"].startswith("lambda:"))
    seed = json.loads((run / "manifest.json").read_text())["config"]["seed"]
    ok = (code == 0 and [r["row_id"] for r in grid] == expected and groups == {"arch:": 5, "metric:": 3, "strategy:": 4, "lambda:": 5}
          and finite and lambdas == [0.5, 0.8, 1.0, 1.2, 1.5] and seed == "7")
    verdict(6, "default ablation grid", ok, f"{len(grid)} rows {groups}, finite={finite}, shared seed {seed}")


def test_criterion_7_determinism(verdict, tmp_path, monkeypatch):
    monkeypatch.setenv("PCNET_OUTPUT_ROOT", str(tmp_path))
    a, b, r = tmp_path / "a", tmp_path / "b", tmp_path / "r"
    codes = [main(["train", *TINY, "--epochs", "4", "--run-dir", str(a)]),
             main(["train", *TINY, "--epochs", "4", "--run-dir", str(b)]),
             main(["train", *TINY, "--epochs", "4", "--stop-after", "2", "--run-dir", str(r)]),
             main(["train", "--resume", str(r / "checkpoint.pcn")])]
    same_manifest = (a / "manifest.json").read_text().replace(str(a), "") == \
        (b / "manifest.json").read_text().replace(str(b), "")
    twins = all((a / f).read_bytes() == (b / f).read_bytes() for f in ("metrics.csv", "checkpoint.pcn"))
    resumed = all((a / f).read_bytes() == (r / f).read_bytes() for f in ("metrics.csv", "checkpoint.pcn"))
    verdict(7, "bitwise determinism and resume", codes == [0] * 4 and same_manifest and twins and resumed,
            f"exit codes {codes}, identical runs={twins}, resume equals straight-through={resumed}")


def test_criterion_8_schedule_and_optimizer(verdict):
    T, lr_min = 30, 1e-4
    ends = [abs(cosine_lr(0, T, 0.01, lr_min) - 0.01), abs(cosine_lr(T, T, 0.01, lr_min) - lr_min),
            abs(cosine_lr(T, T, 0.01, 0.0))]
    lr, g = 0.01, np.array([0.7, -1.3, 2.0])
    p, v = np.zeros(3), np.zeros(3)
    for _ in range(2):
        sgd_step([p], [g], [v], lr=lr, momentum=0.9, weight_decay=0.0)
    disp = float(np.max(np.abs(-p - lr * g * (1 + 1.9))))
    worst = max(ends + [disp])
    verdict(8, "cosine endpoints and two-step momentum displacement", worst <= 1e-12, f"max error {worst:.1e}")
