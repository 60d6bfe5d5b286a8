import math

import numpy as np
import pytest

import shiftcai


def nerm_design(rng, q=6, n_i=3, r_i=2, p=3, psi=1.0):
    n, m = q * n_i, q * r_i
    X = np.column_stack([np.ones(n), rng.normal(size=(n, p - 1))])
    Xt = np.column_stack([np.ones(m), rng.normal(size=(m, p - 1))])
    Z = np.kron(np.eye(q), np.ones((n_i, 1)))
    Zt = np.kron(np.eye(q), np.ones((r_i, 1)))
    return shiftcai.Design(X, Z, Xt, Zt, psi * np.eye(q), np.eye(n), np.eye(m))


def test_candidate_sets():
    assert len(shiftcai.all_subsets(3)) == 7
    assert len(shiftcai.all_subsets(8, [0])) == 128
    assert shiftcai.nested_chain(3) == [[0], [0, 1], [0, 1, 2]]


def test_select_matches_criterion():
    rng = np.random.default_rng(3)
    d = nerm_design(rng)
    y = d.X @ np.array([1.0, 0.8, 0.0]) + rng.normal(size=d.n)
    ranked = shiftcai.select(d, y, variant="hat")
    assert len(ranked) == 7
    totals = [b.total for b in ranked]
    assert totals == sorted(totals)
    best = ranked[0]
    again = shiftcai.criterion(d, y, best.candidate, variant="hat")
    assert again.total == best.total
    parts = again.goodness + again.r_star + again.r1 + again.r2 + again.r3 + again.r4
    assert math.isclose(parts, again.total, rel_tol=0, abs_tol=1e-9)


def test_full_model_zero_corrections():
    rng = np.random.default_rng(4)
    d = nerm_design(rng)
    y = d.X @ np.array([1.0, 0.8, -0.5]) + rng.normal(size=d.n)
    b = shiftcai.criterion(d, y, [0, 1, 2], variant="hat")
    assert abs(b.r1) < 1e-10 and abs(b.r2) < 1e-10 and abs(b.r3) < 1e-10 and abs(b.r4) < 1e-10


def test_truth_oracle_and_errors():
    rng = np.random.default_rng(5)
    d = nerm_design(rng)
    mean, se = shiftcai.mc_true_cai(d, [0, 1], np.array([1.0, 0.5, 0.0]), 1.0, iterations=1000, seed=2)
    assert math.isfinite(mean) and se > 0
    with pytest.raises(ValueError):
        shiftcai.mc_true_cai(d, [0, 1], np.array([1.0, 0.5, 0.0]), 1.0, iterations=10)


def test_small_area_prediction():
    rng = np.random.default_rng(6)
    areas, ys, xs = [], [], []
    for i in range(10):
        b = rng.normal(scale=0.5)
        for k in range(6):
            x = rng.normal()
            areas.append(f"a{i}")
            xs.append([1.0, x])
            ys.append(1.0 + 0.5 * x + b + rng.normal(scale=0.4) if k < 4 else float("nan"))
    X, y = np.array(xs), np.array(ys)
    psi = shiftcai.estimate_psi(areas, y, X)
    assert psi["psi"] >= 0 and psi["sigma2"] > 0
    preds = shiftcai.predict(areas, y, X)
    assert sorted(preds) == [f"a{i}" for i in range(10)]
    logp = shiftcai.predict(areas, y, X, log_scale=True)
    assert all(v > 0 for v in logp.values())


def test_cli_entry(tmp_path):
    code, out, err = shiftcai.run_cli(["select", "--data", str(tmp_path / "missing.csv"), "--out", str(tmp_path)])
    assert code == 1
    assert "missing.csv" in err
