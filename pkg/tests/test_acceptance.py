"""End-to-end acceptance checks.

Every criterion prints one ``PASS``/``FAIL`` line to the terminal.  The
Monte Carlo cells are long (about 20 minutes on one core in total) and are
marked ``slow``; ``pytest -m "not slow"`` skips them.
"""

import time

import numpy as np
import pytest
from test_qp import active_set_oracle, small_instance

from npivband.band import BandConfig, BootstrapSpec, multiplier_quantile, run_full_sample
from npivband.cli import main
from npivband.penreg import PenalizedProblem, fit_partial_lasso, kkt_violation, lambda_max
from npivband.qp import OPTIMAL, QpProblem, min_feasible_mu, solve_direction, unit_target
from npivband.simkit import DgpSpec, generate, rep_rng, run_monte_carlo
from npivband.splines import BasisSpec, eval_basis, eval_basis_deriv, make_basis

SEED = 2024


@pytest.fixture
def report(capsys, request):
    def emit(label, checks):
        ok = all(passed for _, passed in checks)
        detail = "; ".join(f"{text} [{'ok' if passed else 'FAIL'}]" for text, passed in checks)
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} {label}: {detail}")
        return ok

    return emit


def mc(g, n, reps, mode="full", bounded=True):
    return run_monte_carlo(DgpSpec(n=n, p=150, g_kind=g, bounded=bounded, seed=SEED), reps, mode)


@pytest.mark.slow
def test_criterion_1_zero_effect_cell(report):
    r = mc("g1", 1000, 200)
    ok = report("criterion 1 (g1, n=1000, full, 200 reps)", [
        (f"coverage {r.coverage:.3f} in [0.90, 0.98]", 0.90 <= r.coverage <= 0.98),
        (f"length {r.length:.3f} in [0.49, 0.90]", 0.49 <= r.length <= 0.90),
        (f"BiasDB {r.bias_db:.4f} <= 0.03", r.bias_db <= 0.03),
        (f"BiasInit/BiasDB {r.bias_init / r.bias_db:.2f} >= 2", r.bias_init >= 2 * r.bias_db),
    ])
    assert ok


@pytest.mark.slow
def test_criterion_2_quadratic_cell(report):
    r = mc("g3", 1000, 200)
    ok = report("criterion 2 (g3, n=1000, full, 200 reps)", [
        (f"coverage {r.coverage:.3f} in [0.90, 0.98]", 0.90 <= r.coverage <= 0.98),
        (f"BiasDB {r.bias_db:.4f} <= 0.03", r.bias_db <= 0.03),
    ])
    assert ok


@pytest.mark.slow
def test_criterion_3_split_versus_full(report):
    full = mc("g1", 2000, 100, "full")
    split = mc("g1", 2000, 100, "split")
    ok = report("criterion 3 (g1, n=2000, 100 reps each)", [
        (f"split length {split.length:.3f} > full length {full.length:.3f}", split.length > full.length),
        (f"full coverage {full.coverage:.3f} >= 0.88", full.coverage >= 0.88),
        (f"split coverage {split.coverage:.3f} >= 0.88", split.coverage >= 0.88),
    ])
    assert ok


@pytest.mark.slow
def test_criterion_4_unbounded_support(report):
    r = mc("g2", 1000, 100, bounded=False)
    ok = report("criterion 4 (g2, unbounded, n=1000, 100 reps)", [
        (f"coverage {r.coverage:.3f} in [0.88, 0.99]", 0.88 <= r.coverage <= 0.99),
    ])
    assert ok


def _spline_checks():
    rng = np.random.default_rng(SEED)
    spec = BasisSpec(3, 5, 0.0, 1.0)
    x = rng.uniform(0, 1, 10_000)
    pou = np.abs(eval_basis(spec, x).sum(axis=1) - 1).max()
    dsum = np.abs(eval_basis_deriv(spec, x, 1).sum(axis=1)).max()
    knots = np.unique(make_basis(spec))
    xi = x[np.min(np.abs(x[:, None] - knots), axis=1) > 1e-3][:2000]
    h = 1e-6
    fd = np.abs((eval_basis(spec, xi + h) - eval_basis(spec, xi - h)) / (2 * h) - eval_basis_deriv(spec, xi)).max()
    return [(f"partition of unity {pou:.1e} <= 1e-12", pou <= 1e-12),
            (f"derivative sum {dsum:.1e} <= 1e-10", dsum <= 1e-10),
            (f"finite differences {fd:.1e} <= 1e-5", fd <= 1e-5)]


def _lasso_checks():
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        n, q, p = int(rng.integers(50, 200)), int(rng.integers(0, 4)), int(rng.integers(2, 50))
        w, x = rng.normal(size=(n, q)), rng.normal(size=(n, p))
        y = w @ rng.normal(size=q) + x[:, :2] @ [1.0, -1.0] + rng.normal(size=n)
        prob = PenalizedProblem(y, w, x)
        fit = fit_partial_lasso(prob, rng.uniform(0.02, 0.8) * lambda_max(prob), tol=1e-10)
        worst = max(worst, kkt_violation(prob, fit))
    rng = np.random.default_rng(SEED)
    x = rng.normal(size=400)
    y = 0.3 * x + rng.normal(size=400)
    x, y = (x - x.mean()) / x.std(), (y - y.mean()) / y.std()
    c = x @ y / 400
    err = max(abs(fit_partial_lasso(PenalizedProblem(y, None, x[:, None]), lam, tol=1e-14).pen_coef[0]
                  - np.sign(c) * max(abs(c) - lam, 0.0)) for lam in (0.0, 0.1, 0.25, 0.5))
    return [(f"KKT worst {worst:.1e} <= 1e-6 over 50 problems", worst <= 1e-6),
            (f"soft threshold {err:.1e} <= 1e-8", err <= 1e-8)]


def _qp_checks():
    tol = 1e-5
    satisfied, gap = True, 0.0
    for p in (1, 2, 3):
        for seed in range(8):
            feat, gram = small_instance(seed, p, 4, p - 1 if seed % 3 == 0 and p > 1 else None)
            j = seed % p
            mu = 1.5 * max(min_feasible_mu(gram, target_index=j), 0.05)
            nu = 1.0
            oracle = active_set_oracle(gram, feat, unit_target(p, j), mu, nu)
            sol = solve_direction(QpProblem(gram, feat, j, mu, mu2=nu), tol=1e-9, max_iter=100_000)
            if np.isfinite(oracle):
                satisfied &= sol.status == OPTIMAL and sol.max_viol_1 <= mu + 1e-7 and sol.max_viol_2 <= nu + 1e-7
                gap = max(gap, abs(sol.objective - oracle))
    rng = np.random.default_rng(SEED)
    feat = rng.normal(size=(40, 4))
    gram = feat.T @ feat / 40
    zero = solve_direction(QpProblem(gram, feat, 0, 1.0))
    exact = np.linalg.solve(gram, unit_target(4, 0))
    big = 2 * np.abs(feat @ exact).max() / np.sqrt(40)
    inv = solve_direction(QpProblem(gram, feat, 0, big))
    return [("constraints within mu + 1e-7", bool(satisfied)),
            (f"brute-force gap {gap:.1e} <= 2*tol", gap <= 2 * tol),
            ("zero vector optimal at mu = 1", zero.status == OPTIMAL and zero.objective <= 1e-10),
            ("invertible Gram within inverse bound", inv.objective <= exact @ gram @ exact + tol)]


def _multiplier_check():
    data, _ = generate(DgpSpec(n=500, p=20, seed=SEED), rep_rng(SEED, 0))
    res = run_full_sample(data, BandConfig(grid_points=20, boot_draws=200, seed=SEED))
    point = res.grid[:1] - data.d.mean()
    c = multiplier_quantile(res.state, point, BootstrapSpec(100_000, 0.05, SEED))
    return [(f"single-point quantile {c:.3f} = 1.96 +- 0.05", abs(c - 1.96) <= 0.05)]


def _identification_check():
    spec = DgpSpec(n=1000, p=150, g_kind="g2", seed=SEED, noise=False, theta_scale=0.0)
    data, _ = generate(spec, rep_rng(SEED, 0))
    res = run_full_sample(data, BandConfig(seed=SEED))
    err = np.abs(res.gtilde - 1.0).max()
    return [(f"noiseless slope error {err:.1e} < 1e-3 on {res.grid.size} points", err < 1e-3)]


def test_criterion_5_property_suite(report):
    start = time.perf_counter()
    checks = _spline_checks() + _lasso_checks() + _qp_checks() + _multiplier_check() + _identification_check()
    elapsed = time.perf_counter() - start
    checks.append((f"runtime {elapsed:.0f}s < 120s", elapsed < 120))
    assert report("criterion 5 (property suite)", checks)


def _strip(text, path):
    return text.replace(str(path), "")


def test_criterion_6_determinism(report, tmp_path):
    spec = DgpSpec(n=300, p=20, g_kind="g3", seed=SEED)
    data, _ = generate(spec, rep_rng(SEED, 0))
    header = ",".join(["y", "d"] + [f"x{j}" for j in range(1, 21)] + ["z1"])
    rows = np.column_stack([data.y, data.d, data.x, data.z])
    csv_path = tmp_path / "data.csv"
    csv_path.write_text(header + "\n" + "\n".join(",".join(repr(float(v)) for v in r) for r in rows) + "\n")
    outputs = {}
    for tag in ("a", "b"):
        for mode in ("full", "split"):
            prefix = tmp_path / f"{tag}_{mode}"
            assert main(["band", "--data", str(csv_path), "--out", str(prefix), "--mode", mode, "--seed", "5",
                         "--grid-points", "100", "--boot-draws", "300"]) == 0
            for ext in ("csv", "json", "dat"):
                path = tmp_path / f"{tag}_{mode}.{ext}"
                outputs[(tag, mode, ext)] = _strip(path.read_text(), prefix)
        sim = tmp_path / f"{tag}_sim.csv"
        assert main(["simulate", "--n", "200", "--p", "10", "--reps", "10", "--seed", "5", "--out", str(sim)]) == 0
        outputs[(tag, "sim", "csv")] = _strip(sim.read_text(), sim)
    checks = [(f"{mode}.{ext} identical", outputs[("a", mode, ext)] == outputs[("b", mode, ext)])
              for (tag, mode, ext) in outputs if tag == "a"]
    assert report("criterion 6 (determinism)", checks)
