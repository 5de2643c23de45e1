"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL verdict (printed immediately and again in the
terminal summary) before asserting.  The case-study runs take minutes; select
or skip them with ``-m slow`` / ``-m "not slow"``.
"""
import time

import numpy as np
import pytest

from deepbiz import baselines as bl
from deepbiz import experiments as ex
from deepbiz import gradient_suite
from deepbiz import layers as ly
from deepbiz import metrics as mt
from deepbiz import optim as op
from xor_fixture import errors, fit_xor, single_layer, two_layer

pytestmark = pytest.mark.slow

VERDICTS = {}


def verdict(number, ok, detail):
    VERDICTS[number] = (bool(ok), detail)
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}", flush=True)
    assert ok, detail


def study(case, seed, models, out_dir=None):
    config = ex.ExperimentConfig(case, seed=seed, grid="smoke", models=models,
                                 out_dir=None if out_dir is None else str(out_dir))
    return ex.run_case_study(config)


def seed_mean(tables, name, metric):
    return float(np.mean([t.row(name).metrics[metric] for t in tables]))


# -- 1 -------------------------------------------------------------------------------------------

def test_gradient_suite():
    start = time.perf_counter()
    errors = gradient_suite.run_suite(0)
    elapsed = time.perf_counter() - start
    worst = max(errors, key=errors.get)
    verdict(1, errors[worst] < 1e-4 and elapsed < 60,
            f"{len(errors)} checks, worst {worst} {errors[worst]:.2e}, {elapsed:.1f} s")


# -- 2 -------------------------------------------------------------------------------------------

def test_xor():
    net = two_layer(0)
    hit, _ = fit_xor(net, 5000, stop_at_zero=False)
    final = errors(net)
    _, fewest = fit_xor(single_layer(0), 20000)
    verdict(2, hit is not None and final == 0 and fewest >= 1,
            f"two-layer first solved at step {hit}, {final} errors after 5000 steps; "
            f"single-layer best error count {fewest}")


# -- 3 -------------------------------------------------------------------------------------------

def brute_force_auc(scores, labels):
    pos, neg = scores[labels == 1], scores[labels == 0]
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0) + 0.5 * (diff == 0)).sum() / diff.size)


def test_metric_oracles():
    rng = np.random.default_rng(7)
    mismatches = gini_mismatches = 0
    for _ in range(200):
        n = int(rng.integers(2, 51))
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        scores = rng.integers(0, 8, n) / 7.0
        a = mt.auc(scores, labels)
        mismatches += a != brute_force_auc(scores, labels)
        gini_mismatches += mt.gini_from_auc(a) != 2 * a - 1
    anchors = [round(mt.gini_from_auc(a), 3) for a in (0.640, 0.630)]
    verdict(3, mismatches == 0 and gini_mismatches == 0 and anchors == [0.280, 0.260],
            f"AUC mismatches {mismatches}/200, Gini mismatches {gini_mismatches}, anchors {anchors}")


# -- 4 -------------------------------------------------------------------------------------------

def test_baseline_correctness():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(80, 4))
    y = X @ rng.normal(size=4) + 0.5 + rng.normal(scale=0.3, size=80)
    design = np.hstack([X, np.ones((80, 1))])
    oracle = np.linalg.lstsq(design, y, rcond=None)[0]
    ridge, lasso = bl.fit_ridge(X, y, 0.0), bl.fit_lasso(X, y, 0.0)
    ls_gap = max(np.abs(ridge.weights - oracle[:4]).max(), np.abs(lasso.weights - oracle[:4]).max(),
                 abs(ridge.intercept - oracle[4]), abs(lasso.intercept - oracle[4]))
    threshold = np.max(np.abs((X - X.mean(0)).T @ (y - y.mean()))) / len(y)
    zeroed = not bl.fit_lasso(X, y, threshold * 1.001).weights.any()
    forest = bl.fit_forest(X, y, trees=5, max_depth=0, seed=3)
    same = np.array_equal(forest.predict(X), bl.ConstantPredictor.fit(y).predict(X))
    verdict(4, ls_gap < 1e-4 and zeroed and same,
            f"least-squares gap {ls_gap:.1e}, lasso zeroed above threshold {zeroed}, depth-0 forest constant {same}")


# -- 5 -------------------------------------------------------------------------------------------

INSURANCE_MODELS = ["majority", "lasso", "ridge", "dnn2"]


@pytest.fixture(scope="module")
def insurance(tmp_path_factory):
    start = time.perf_counter()
    tables = [study("insurance", seed, INSURANCE_MODELS,
                    tmp_path_factory.mktemp("insurance") if seed == 0 else None) for seed in range(5)]
    return tables, time.perf_counter() - start


def test_insurance_ordering(insurance):
    tables, elapsed = insurance
    dnn = seed_mean(tables, ex.display_name("dnn2", ex.ExperimentConfig("insurance")), "auc")
    linear = max(seed_mean(tables, "Lasso", "auc"), seed_mean(tables, "Ridge regression", "auc"))
    majority = {t.row("Majority vote").metrics["auc"] for t in tables}
    verdict(5, dnn - linear >= 0.02 and majority == {0.5} and elapsed < 600,
            f"DNN AUC {dnn:.4f} vs best linear {linear:.4f} (margin {dnn - linear:+.4f}), "
            f"majority {sorted(majority)}, {elapsed:.0f} s")


# -- 6 -------------------------------------------------------------------------------------------

def test_tickets_ordering():
    start = time.perf_counter()
    tables = [study("tickets", seed, ["ridge", "gru", "lstm"]) for seed in range(3)]
    elapsed = time.perf_counter() - start
    config = ex.ExperimentConfig("tickets")
    ridge = seed_mean(tables, "Ridge regression", "mse")
    gru = seed_mean(tables, ex.display_name("gru", config), "mse")
    lstm = seed_mean(tables, ex.display_name("lstm", config), "mse")
    spread = abs(gru - lstm) / min(gru, lstm)
    verdict(6, gru < ridge and lstm < ridge and spread <= 0.05 and elapsed < 900,
            f"3-seed MSE ridge {ridge:.4f}, GRU {gru:.4f}, LSTM {lstm:.4f} "
            f"(GRU/LSTM differ by {spread:.1%}), {elapsed:.0f} s")


# -- 7 -------------------------------------------------------------------------------------------

def test_sales_ordering():
    start = time.perf_counter()
    table = study("sales", 0, ["mean", "forest", "gru", "lstm"])
    elapsed = time.perf_counter() - start
    config = ex.ExperimentConfig("sales")
    mse = {r.model: r.metrics["mse"] for r in table.rows}
    gru, lstm = mse[ex.display_name("gru", config)], mse[ex.display_name("lstm", config)]
    forest, mean = mse["Random forest"], mse["Mean value as predictor"]
    verdict(7, max(gru, lstm) < forest < mean and elapsed < 900,
            f"MSE GRU {gru:.4f}, LSTM {lstm:.4f}, forest {forest:.4f}, mean {mean:.4f}, {elapsed:.0f} s")


# -- 8 -------------------------------------------------------------------------------------------

def test_size_sweep_crossover():
    fractions = [0.02, 0.1, 1.0]
    runs = [ex.size_sensitivity_sweep(ex.ExperimentConfig("sales", seed=seed, grid="smoke"), fractions)
            for seed in range(3)]
    avg = {}
    for points in runs:
        for p in points:
            avg.setdefault((p.fraction, p.model), []).append(p.metric)
    avg = {k: float(np.mean(v)) for k, v in avg.items()}
    small_ok = avg[(0.02, "forest")] <= avg[(0.02, "gru")]
    full_ok = avg[(1.0, "gru")] < avg[(1.0, "forest")]
    summary = ", ".join(f"{f:g}: forest {avg[(f, 'forest')]:.4f} / GRU {avg[(f, 'gru')]:.4f}" for f in fractions)
    verdict(8, small_ok and full_ok, f"3-seed MSE {summary}")


# -- 9 -------------------------------------------------------------------------------------------

def overfit_curves(out_dir):
    """Wide MLP on 24 noisy rows; returns the learning-curve CSV paths for dropout 0 and 0.25."""
    rng = np.random.default_rng(0)

    def sample(n):
        x = rng.normal(size=(n, 5))
        return x, np.sin(2 * x[:, :1]) + 0.5 * x[:, 1:2] + rng.normal(scale=0.5, size=(n, 1))

    train_set, val_set = sample(24), sample(200)
    paths = {}
    for dropout in (0.0, 0.25):
        net = ly.mlp(5, [64, 64], 1, "relu", dropout=dropout, rng=0)
        cfg = op.TrainConfig(learning_rate=0.001, batch_size=8, max_epochs=200, patience=200,
                             dropout=dropout, seed=0)
        paths[dropout] = out_dir / f"curve_dropout_{dropout:g}.csv"
        op.train(net, train_set, val_set, cfg).curve.to_csv(paths[dropout])
    return paths


def rigged_early_stop():
    net = ly.Network([ly.Dense(1, 1, rng=0)])
    losses = iter([1.0, 0.9, 0.95, 0.96, 0.97, 0.5, 0.4])
    snapshots = []

    def val(network):
        snapshots.append(network.get_state()["0.weight"].copy())
        return next(losses)

    cfg = op.TrainConfig(learning_rate=0.1, batch_size=4, max_epochs=7, patience=3)
    res = op.train(net, (np.ones((4, 1)), np.ones((4, 1))), None, cfg, val_loss_fn=val)
    restored = np.array_equal(res.network.get_state()["0.weight"], snapshots[1])
    return res.stopped_epoch == 5 and res.best_epoch == 2 and restored


def test_early_stopping_and_curves(tmp_path):
    stops = rigged_early_stop()
    paths = overfit_curves(tmp_path)
    plain = op.LearningCurve.from_csv(paths[0.0])
    regular = op.LearningCurve.from_csv(paths[0.25])
    val, train = np.array(plain.val_loss), np.array(plain.train_loss)
    best = int(val.argmin())
    overfits = best < len(val) - 1 and val[-1] > val[best] and train[-1] < train[best]
    gap_plain = plain.val_loss[-1] - plain.train_loss[-1]
    gap_drop = regular.val_loss[-1] - regular.train_loss[-1]
    verdict(9, stops and overfits and gap_drop < gap_plain,
            f"rigged plateau handled {stops}; dropout 0 validation minimum at epoch {best + 1} then rises "
            f"to {val[-1]:.3f}; final gap {gap_plain:.3f} without dropout, {gap_drop:.3f} with 0.25")


# -- 10 ------------------------------------------------------------------------------------------

def test_determinism(insurance, tmp_path):
    first = insurance[0][0]
    again = study("insurance", 0, INSURANCE_MODELS, tmp_path / "again")
    same_table = again == first and again.to_csv() == first.to_csv()
    written = (tmp_path / "again" / "results.csv").read_text() == first.to_csv()
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    a, b = overfit_curves(tmp_path / "a"), overfit_curves(tmp_path / "b")
    same_curves = all(a[k].read_bytes() == b[k].read_bytes() for k in a)
    verdict(10, same_table and written and same_curves,
            f"insurance table identical {same_table}, results.csv identical {written}, "
            f"curve CSVs identical {same_curves}")
