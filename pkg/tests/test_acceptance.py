"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are also collected and repeated in the terminal summary (see conftest.py).
"""

import json
import time

import numpy as np
import pytest

from apgp import (KernelSpec, SelectionRule, StoppingCriteria, ap_inner_step, ap_solve,
                  bcd_step_oracle, build_cache, cg_solve, dense_kernel, exact_mll,
                  exact_mll_gradient, flops_formula, make_partition, make_preconditioner,
                  make_probes, mll_gradient_estimate, pivoted_cholesky, predict_mean,
                  select_block, synth_dataset, train)
from apgp import experiments as ex
from apgp.altproj import init_state
from apgp.data import sample_gp_prior
from apgp.gp import TrainConfig, raw_to_spec, softplus, spec_to_raw

RESULTS = []


def report(num, title, passed, detail):
    line = f"criterion {num:>2} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
    RESULTS.append(line)
    print(line)
    assert passed, line


def matern_system(seed, n, d=3, ls=None, noise=None, l=16):
    rng = np.random.default_rng(seed)
    X = rng.uniform(size=(n, d))
    ls = rng.uniform(0.1, 0.5) if ls is None else ls
    noise = 10 ** rng.uniform(-2, -1) if noise is None else noise
    spec = KernelSpec("matern52", [ls] * d, 1.0, noise)
    B = rng.normal(size=(n, l))
    return spec, X, B


def k_norm_sq(K, E):
    return float(np.sum(E * (K @ E)))


# 1 ---------------------------------------------------------------------------------------

def test_c01_oracle_equivalence():
    t0 = time.perf_counter()
    worst, count = 0.0, 0
    stop = StoppingCriteria(1e-8, 100_000, 0)
    for n in (200, 500, 1000):
        for b in (16, 64, 250):
            if b > n:
                continue
            for seed in range(3):
                spec, X, B = matern_system(100 * n + seed, n, ls=0.1, noise=0.5)
                W, _ = ap_solve(spec, X, B, b, "gs", stop)
                Ws = np.linalg.solve(dense_kernel(spec, X), B)
                worst = max(worst, np.linalg.norm(W - Ws) / np.linalg.norm(Ws))
                count += 1
    elapsed = time.perf_counter() - t0
    report(1, "AP vs dense solve", count >= 20 and worst <= 1e-6 and elapsed <= 60,
           f"{count} systems, worst rel err {worst:.2e} (tol 1e-6), {elapsed:.1f}s (limit 60s)")


# 2 ---------------------------------------------------------------------------------------

def test_c02_ap_equals_bcd():
    spec, X, B = matern_system(2, 50, noise=0.05)
    K = dense_kernel(spec, X)
    part = make_partition(50, 10)
    cache = build_cache(spec, X, part)
    state = init_state(B)
    W = np.zeros_like(B)
    worst_w = worst_r = 0.0
    for it in range(3 * part.m):
        j = select_block(SelectionRule("cyclic"), state.R, part, it)
        ap_inner_step(state, cache, spec, X, j)
        W = bcd_step_oracle(W, spec, X, B, part.block(j))
        worst_w = max(worst_w, np.linalg.norm(state.W - W) / np.linalg.norm(W))
        worst_r = max(worst_r, np.linalg.norm(state.R - (B - K @ state.W)) / np.linalg.norm(B))
    report(2, "AP iterates equal BCD iterates", worst_w <= 1e-10 and worst_r <= 1e-10,
           f"max W rel diff {worst_w:.2e}, max residual identity gap {worst_r:.2e} (tol 1e-10)")


# 3 and 4 ---------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def envelope_suite():
    """20 GS runs at n=500, b=50 with per-epoch K-norm errors and per-step objectives."""
    runs = []
    for seed in range(20):
        spec, X, B = matern_system(3000 + seed, 500)
        K = dense_kernel(spec, X)
        Ws = np.linalg.solve(K, B)
        part = make_partition(500, 50)
        lam_min = np.linalg.eigvalsh(K)[0]
        lam_blk = max(np.linalg.eigvalsh(K[part.block(j), part.block(j)])[-1] for j in range(part.m))
        kappa_p = lam_blk / lam_min
        err0 = k_norm_sq(K, Ws)
        errs, hs = [err0], [0.0]

        def on_step(s):
            hs.append(0.5 * np.sum(s.W * (K @ s.W)) - np.sum(B * s.W))

        def on_epoch(s):
            errs.append(k_norm_sq(K, s.W - Ws))

        ap_solve(spec, X, B, part, "gs", StoppingCriteria(1e-300, 20, 20),
                 on_step=on_step, on_epoch=on_epoch)
        runs.append(dict(kappa_p=kappa_p, errs=np.array(errs), hs=np.array(hs),
                         gap0=0.5 * np.sum(B * Ws)))
    return runs


def test_c03_linear_rate_envelope(envelope_suite):
    worst = 0.0
    for r in envelope_suite:
        t = np.arange(r["errs"].size)
        bound = np.exp(-t / r["kappa_p"]) * r["errs"][0]
        worst = max(worst, float(np.max(r["errs"][1:] / bound[1:])))
    kappas = [r["kappa_p"] for r in envelope_suite]
    report(3, "K-norm error under exp(-t/kappa') envelope", worst <= 1 + 1e-8,
           f"{len(envelope_suite)} systems x 20 epochs, kappa' in [{min(kappas):.0f}, {max(kappas):.0f}], "
           f"max error/bound over t>=1 {worst:.3e} (tol 1+1e-8)")


def test_c04_monotone_objective(envelope_suite):
    worst = max(float(np.max(np.diff(r["hs"]) / r["gap0"])) for r in envelope_suite)
    epoch_ok = all(np.all(np.diff(r["errs"]) <= 0) for r in envelope_suite)
    report(4, "objective non-increasing every inner step", worst <= 1e-12 and epoch_ok,
           f"max relative increase {worst:.2e} (tol 1e-12), per-epoch K-norm error non-increasing: {epoch_ok}")


# 5 ---------------------------------------------------------------------------------------

def test_c05_full_block_collapse():
    worst = 0.0
    for seed in range(5):
        spec, X, B = matern_system(500 + seed, 300)
        W, tr = ap_solve(spec, X, B, 300, "gs", StoppingCriteria(1e-8, 1, 0))
        cache = build_cache(spec, X, make_partition(300, 300))
        s = init_state(B)
        ap_inner_step(s, cache, spec, X, 0)
        worst = max(worst, np.linalg.norm(s.R) / np.linalg.norm(B))
    report(5, "b=n solves in one inner iteration", worst <= 1e-8 and s.inner_iter == 1,
           f"max ||R||/||B|| after 1 step {worst:.2e} (tol 1e-8)")


# 6 ---------------------------------------------------------------------------------------

def test_c06_flops_accounting():
    devs = []
    for b in (50, 100):
        spec, X, B = matern_system(6, 2000, l=16)
        _, tr = ap_solve(spec, X, B, b, "gs", StoppingCriteria(1e-300, 1, 1))
        counted = tr.per_epoch_flops()[-1]
        devs.append(abs(counted - flops_formula(2000, b, 16)) / flops_formula(2000, b, 16))
    report(6, "per-epoch FLOPs vs closed form", max(devs) <= 0.05,
           f"relative deviation b=50: {devs[0]:.2e}, b=100: {devs[1]:.2e} (tol 0.05)")


# 7 ---------------------------------------------------------------------------------------

def _fd_gradient(spec, X, y):
    # fourth-order central differences in the raw parameterisation
    raw = spec_to_raw(spec)
    out = np.empty_like(raw)
    f = lambda r: exact_mll(raw_to_spec(r, spec.family, spec.noise_floor), X, y)
    for i in range(raw.size):
        h = 1e-3 * max(abs(raw[i]), 0.1)
        e = np.zeros_like(raw)
        e[i] = h
        out[i] = (-f(raw + 2 * e) + 8 * f(raw + e) - 8 * f(raw - e) + f(raw - 2 * e)) / (12 * h)
    return out


def test_c07_gradient_correctness():
    worst_fd, worst_st = 0.0, 0.0
    for seed in range(10):
        rng = np.random.default_rng(700 + seed)
        d = 3
        fam = ("matern52", "matern32", "rbf")[seed % 3]
        X = rng.uniform(size=(300, d))
        spec = KernelSpec(fam, rng.uniform(0.2, 1.0, d), rng.uniform(0.5, 2.0),
                          10 ** rng.uniform(-2, -0.5), 0.3 * rng.normal())
        gen = KernelSpec(fam, rng.uniform(0.2, 1.0, d), 1.0, 0.05)
        y = sample_gp_prior(gen, X, rng)
        g = exact_mll_gradient(spec, X, y)
        fd = _fd_gradient(spec, X, y)
        floor = 1e-8 * np.linalg.norm(fd)
        worst_fd = max(worst_fd, float(np.max(np.abs(g - fd) / np.maximum(np.abs(fd), floor))))
        probes = make_probes(y, spec.mean_constant, 10_000, rng)
        est, _ = mll_gradient_estimate(spec, X, y, probes, "dense")
        worst_st = max(worst_st, float(np.linalg.norm(est - g) / np.linalg.norm(g)))
    report(7, "closed-form vs finite differences; stochastic vs closed form",
           worst_fd <= 1e-4 and worst_st <= 0.01,
           f"10 specs n=300: max per-parameter FD rel err {worst_fd:.2e} (tol 1e-4), "
           f"max 10^4-probe estimate rel err {worst_st:.2e} (tol 0.01)")


# 8 ---------------------------------------------------------------------------------------

def test_c08_selection_rule_ordering():
    wins = 0
    stop = StoppingCriteria(1e-12, 30, 30)
    for seed in range(50):
        rng = np.random.default_rng(800 + seed)
        spec, X, B = matern_system(800 + seed, 500, ls=rng.uniform(0.1, 0.5),
                                   noise=10 ** rng.uniform(-2, -1))
        cache = build_cache(spec, X, make_partition(500, 50))
        final = {rule: ap_solve(spec, X, B, 50, rule, stop, cache=cache, seed=seed)[1].final_avg_rel
                 for rule in ("gs", "cyclic", "random")}
        wins += final["gs"] <= final["cyclic"] and final["gs"] <= final["random"]
    report(8, "GS beats cyclic and random at 30 epochs", wins >= 40,
           f"GS best in {wins}/50 systems (need >= 40)")


# 9 ---------------------------------------------------------------------------------------

def test_c09_ill_conditioning_trend():
    growth_cg, growth_ap = [], []
    for seed in range(5):
        its_cg, its_ap = [], []
        for noise in (1e-1, 1e-2, 1e-3):
            gen = KernelSpec("matern52", [0.3] * 3, 1.0, noise, noise_floor=0.0)
            ds = synth_dataset(2500, 3, gen, seed)
            X, y = ds.X_train, ds.y_train
            spec = gen.replace(noise_variance=noise / ds.label_std ** 2, noise_floor=1e-4)
            B = make_probes(y, 0.0, 15, seed).B
            stop = StoppingCriteria(1.0, 1000, 0)
            P = make_preconditioner(spec, X, X.shape[0] // 10)
            _, tc = cg_solve(spec, X, B, stop, P)
            _, ta = ap_solve(spec, X, B, 500, "gs", stop)
            its_cg.append(tc.epochs_to_tolerance(1.0))
            its_ap.append(ta.epochs_to_tolerance(1.0))
        growth_cg.append(its_cg[-1] / its_cg[0])
        growth_ap.append(its_ap[-1] / its_ap[0])
    ratio = np.mean(growth_cg) / np.mean(growth_ap)
    report(9, "CG iteration growth exceeds AP epoch growth as noise shrinks", ratio >= 1.5,
           f"n=2000, sigma2 1e-1 -> 1e-3, mean growth CG {np.mean(growth_cg):.2f}x, "
           f"AP {np.mean(growth_ap):.2f}x, ratio {ratio:.2f} (need >= 1.5)")


# 10 --------------------------------------------------------------------------------------

def test_c10_end_to_end_parity():
    gen = KernelSpec("matern52", [0.6] * 5, 1.0, 0.05, noise_floor=0.0)
    ds = synth_dataset(2500, 5, gen, seed=10)
    init = KernelSpec("matern52", [softplus(0.0)] * 5, softplus(0.0), 1e-4 + softplus(0.0))
    out = {}
    for solver in ("ap", "cg"):
        t0 = time.perf_counter()
        cfg = TrainConfig(steps=50, lr=0.1, num_probes=15, solver=solver, batch_size=100,
                          precond_rank=500, seed=10)
        spec, _ = train(ds, init_spec=init, config=cfg)
        mean = predict_mean(spec, ds.X_train, ds.y_train, ds.X_test, solver,
                            StoppingCriteria.test_time(), batch_size=100, precond_rank=500)
        out[solver] = (float(np.sqrt(np.mean((mean - ds.y_test) ** 2))), time.perf_counter() - t0)
    diff = abs(out["ap"][0] - out["cg"][0])
    slowest = max(t for _, t in out.values())
    report(10, "AP- and CG-trained GPs reach the same test RMSE", diff <= 0.01 and slowest <= 600,
           f"n=2000 d=5, RMSE AP {out['ap'][0]:.4f}, CG {out['cg'][0]:.4f}, |diff| {diff:.4f} (tol 0.01), "
           f"wall AP {out['ap'][1]:.0f}s, CG {out['cg'][1]:.0f}s (limit 600s)")


# 11 --------------------------------------------------------------------------------------

def test_c11_preconditioner():
    spec, X, B = matern_system(1100, 1000, ls=0.3, noise=1e-3)
    K = dense_kernel(spec, X)
    full = pivoted_cholesky(spec, X, 1000)
    recon = np.linalg.norm(full.L @ full.L.T - K) / np.linalg.norm(K)
    stop = StoppingCriteria(0.01, 1000, 0)
    _, perfect = cg_solve(spec, X, B, stop, make_preconditioner(spec, X, 1000))
    wins = 0
    for seed in range(20):
        spec, X, B = matern_system(1100 + seed, 1000, ls=0.3, noise=1e-3, l=4)
        _, pre = cg_solve(spec, X, B, stop, make_preconditioner(spec, X, 100))
        k = pre.epochs_to_tolerance(0.01)
        # plain CG only has to be run for k iterations to decide "strictly fewer"
        _, plain = cg_solve(spec, X, B, StoppingCriteria(0.01, max(k, 1), 0))
        wins += k is not None and plain.epochs_to_tolerance(0.01) is None
    report(11, "pivoted Cholesky preconditioner",
           recon <= 1e-6 and perfect.epochs == 1 and wins >= 18,
           f"k=n reconstruction rel err {recon:.2e} (tol 1e-6), k=n PCG iterations {perfect.epochs} (need 1), "
           f"k=0.1n beats plain CG in {wins}/20 seeds (need >= 18)")


# 12 --------------------------------------------------------------------------------------

def test_c12_determinism(tmp_path):
    base = {"synth_n": 300, "synth_d": 3, "num_probes": 4, "batch_size": 40, "precond_rank": 30,
            "deterministic": True, "steps": 3, "methods": ["ap_gs", "ap_cyclic", "ap_random", "cg", "pcg"],
            "noise_variance": 0.1}
    files = {"solve": ["summary.json", "trace_ap_gs.csv", "trace_ap_cyclic.csv", "trace_ap_random.csv",
                       "trace_cg.csv", "trace_pcg.csv", "manifest.json"],
             "train": ["metrics.json", "train_log.jsonl", "model.json", "predictions.csv", "manifest.json"],
             "check": ["check.json", "manifest.json"]}
    runners = {"solve": ex.run_solver_benchmark, "train": ex.run_training, "check": ex.run_check}
    mismatched = []
    for cmd, names in files.items():
        blobs = []
        for rep in range(2):
            out = tmp_path / cmd / str(rep)
            runners[cmd](ex.load_config(None, {**base, "output_dir": str(out)}))
            blobs.append({name: (out / name).read_bytes() for name in names})
        mismatched += [f"{cmd}/{n}" for n in names if blobs[0][n] != blobs[1][n]]
    total = sum(len(v) for v in files.values())
    report(12, "repeated runs are byte-identical", not mismatched,
           f"{total - len(mismatched)}/{total} artefacts identical across solve/train/check"
           + (f"; differing: {mismatched}" if mismatched else ""))
