"""Acceptance suite: the thirteen end-to-end criteria, each at its stated tolerance.

Every test prints one ``C<n> PASS|FAIL`` line with the measured numbers.
The alignment experiments run through the same config and runner path as
the CLI.
"""

import json
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from sagalab import config as C
from sagalab import runner
from sagalab import tensor as T
from sagalab.gradcheck import check_composition, run_op_suite
from sagalab.metrics import box_alignment, layout_diversity, tiam_score
from sagalab.optim import CovSpec, GaussianPrior, OptimConfig, init_prior, learn_mu, learn_mu_sigma, optimize_prior
from sagalab.criterion import CriterionConfig
from sagalab.sampler import Pipeline, PipelineConfig
from sagalab.schedule import diffuse, estimate_z0, make_schedule
from sagalab.verification import (ASYMMETRIC, SINGLE, SYMMETRIC, approx_error, cumulant_scaling_check,
                                  fit_decay_slope, monte_carlo_cumulant_ratio)

# Two-entity prompts whose scene prior mixes or swaps entity signatures half the time.
ALIGNMENT_WORLD = {
    "schema": 1,
    "schedule": {"kind": "vp-diffusion", "grid": "ddpm50"},
    "backend": {"kind": "analytic", "vocab": 8, "shape": [4, 16, 16], "blob_sigma": 1.5, "k": 8,
                "amplitude": 1.0, "attention_gain": 0.1, "neglect": {"rate": 0.5, "mode": "mix"},
                "library_seed": 0},
    "method": {"method": "saga", "step_index": 35, "cutoff": 50, "guidance_lr": 200.0},
    "optim": {"steps": 50, "lr": 200.0, "momentum": 0.4, "batch": 10},
    "prompts": {"generate": {"n": 32, "entities": 2, "seed": 1}},
    "seeds": 16,
}

# Box-annotated prompts; the scene prior ignores the boxes, so only the criterion can use them.
BBOX_WORLD = {
    "schema": 1,
    "schedule": {"kind": "vp-diffusion", "grid": "ddpm50"},
    "backend": {"kind": "analytic", "vocab": 8, "shape": [4, 16, 16], "blob_sigma": 1.5, "k": 32,
                "amplitude": 1.0, "attention_gain": 0.01, "neglect": {"rate": 0.0},
                "place_in_boxes": False, "library_seed": 0},
    "method": {"method": "saga", "step_index": 35},
    "optim": {"steps": 50, "lr": 500.0, "momentum": 0.4, "batch": 10},
    "prompts": {"generate": {"n": 32, "entities": 2, "seed": 1, "boxes": True}},
    "seeds": 8,
}

T_SWEEP = [10, 20, 30, 35, 40, 43, 46, 49]


@pytest.fixture
def verdict(capsys):
    def report(n: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\nC{n} {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, f"criterion {n} failed: {detail}"
    return report


def make_config(raw, tmp: Path, **overrides) -> C.ExperimentConfig:
    raw = json.loads(json.dumps(raw))
    raw["output"] = {"dir": str(tmp)}
    return C.build_config(raw, tmp, None, [f"{k}={json.dumps(v)}" for k, v in overrides.items()])


def loaded(run_dir: Path):
    cfg = runner.load_resolved(run_dir)
    prompts = {p.prompt_id: p for p in C.load_prompts(cfg)}
    return runner.read_records(run_dir / runner.RECORDS), prompts, C.build_library(cfg, list(prompts.values()))


def items_of(records, prompts, method=None):
    return [(prompts[r["prompt"]], runner.record_latent(r)) for r in records if method in (None, r["method"])]


@pytest.fixture(scope="session")
def alignment_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("alignment")
    start = time.perf_counter()
    runner.run_experiment(make_config(ALIGNMENT_WORLD, out), ["vanilla", "saga", "saga-plus"], out,
                          runner.worker_count(8))
    return out, time.perf_counter() - start


@pytest.fixture(scope="session")
def t_sweep(tmp_path_factory):
    out = tmp_path_factory.mktemp("tsweep")
    cfg = make_config(ALIGNMENT_WORLD, out, **{"prompts.generate.n": 16, "seeds": 4})
    start = time.perf_counter()
    res = runner.sweep_experiment(cfg, ["step-index=" + ",".join(map(str, T_SWEEP))], None, out,
                                  runner.worker_count(8))
    return out, res, time.perf_counter() - start


# -- 1-3: Gaussian approximation of noised mixtures ------------------------------------


def test_c1_single_gaussian_is_exact(verdict):
    start = time.perf_counter()
    worst = 0.0
    for kind in ("vp-diffusion", "linear-flow"):
        s = make_schedule(kind)
        worst = max(worst, max(approx_error(SINGLE, s, t) for t in s.grid))
    elapsed = time.perf_counter() - start
    verdict(1, worst < 1e-10 and elapsed < 10, f"max TV {worst:.2e} over both grids (< 1e-10), {elapsed:.1f}s")


def test_c2_decay_slopes(verdict):
    start = time.perf_counter()
    flow = make_schedule("linear-flow")
    a = [0.2, 0.1, 0.05, 0.025]
    asym = fit_decay_slope(ASYMMETRIC, flow, a).slope
    sym = fit_decay_slope(SYMMETRIC, flow, a).slope
    elapsed = time.perf_counter() - start
    ok = 2.7 <= asym <= 3.3 and 3.7 <= sym <= 4.3 and elapsed < 60
    verdict(2, ok, f"asymmetric slope {asym:.3f} in [2.7, 3.3], symmetric {sym:.3f} in [3.7, 4.3], "
                   f"{elapsed:.1f}s")


def test_c3_cumulant_scaling(verdict):
    start = time.perf_counter()
    worst_exact, worst_mc = 0.0, 0.0
    for kind in ("vp-diffusion", "linear-flow"):
        s = make_schedule(kind)
        for t in (100, 200, 500, 800):
            for k in (3, 4):
                worst_exact = max(worst_exact, abs(cumulant_scaling_check(ASYMMETRIC, s, t, k).ratio - 1))
        for k in (3, 4):
            mc = monte_carlo_cumulant_ratio(ASYMMETRIC, s, 200, k, 1_000_000, np.random.default_rng(k))
            worst_mc = max(worst_mc, abs(mc - 1))
    elapsed = time.perf_counter() - start
    ok = worst_exact < 1e-8 and worst_mc < 0.05 and elapsed < 60
    verdict(3, ok, f"exact |ratio-1| {worst_exact:.1e} (< 1e-8), Monte Carlo |ratio-1| {worst_mc:.3f} "
                   f"(< 0.05, 1e6 samples), {elapsed:.1f}s")


# -- 4-6: numerics of the building blocks -------------------------------------------------


def test_c4_estimator_identity(verdict):
    rng = np.random.default_rng(0)
    worst = 0.0
    for kind in ("vp-diffusion", "linear-flow"):
        s = make_schedule(kind)
        for _ in range(100):
            t = float(rng.integers(1, 1000))
            z0, eps = rng.standard_normal((2, 4, 8, 8))
            zt = diffuse(s, z0, t, eps)
            pred = eps if kind == "vp-diffusion" else eps - z0
            worst = max(worst, float(np.abs(estimate_z0(s, zt, pred, t) - z0).max()))
    verdict(4, worst < 1e-9, f"max |z0_hat - z0| {worst:.1e} over 200 draws (< 1e-9)")


def test_c5_gradient_suite(verdict):
    ops = run_op_suite(n_instances=100, seed=0)
    comp = check_composition(n_instances=100, seed=0)
    worst_op = max(ops, key=ops.get)
    ok = max(ops.values()) < 1e-4 and comp.max_rel_error < 1e-4 and comp.instances >= 100
    verdict(5, ok, f"{len(ops)} ops x 100 instances, worst {worst_op} {ops[worst_op]:.1e}; composition "
                   f"{comp.instances} instances, max rel {comp.max_rel_error:.1e} (< 1e-4), "
                   f"{comp.degenerate} flat instances with abs error {comp.max_abs_error_degenerate:.1e}")


def test_c6_quadratic_convergence(verdict):
    s = make_schedule("vp-diffusion")
    a, b = s.coefficients(1)
    rng = np.random.default_rng(0)
    c = rng.standard_normal((4, 4, 4))
    prior = GaussianPrior(1.0, a, b, np.zeros_like(c), 1.0)
    objective = lambda z: T.tsum(T.square(T.sub(z, T.Tensor(c))), axis=(1, 2, 3))
    res = optimize_prior(prior, objective, OptimConfig(500, 0.1, 0.0, 10, rescale=False), rng)
    gap = float(np.linalg.norm(res.prior.mu - c / a))
    verdict(6, gap < 1e-2, f"||mu - c/a|| = {gap:.2e} after 500 steps (< 1e-2)")


# -- 7-8: invariants of the prior learner -------------------------------------------------


def test_c7_rescaling_invariant(verdict, alignment_run, t_sweep):
    runs = [alignment_run[0]] + [t_sweep[0] / "cells" / row["hash"] for row in t_sweep[1].rows]
    steps = violations = 0
    worst = -np.inf
    for run in runs:
        for rec in runner.read_records(run / runner.RECORDS):
            if rec["prior"] is None:
                continue
            trace = np.array(rec["prior"]["mu_std_trace"])
            excess = trace - rec["prior"]["sigma_ref"]
            steps += trace.size
            violations += int(np.sum(excess > 1e-9))
            worst = max(worst, float(excess.max()))
    verdict(7, steps > 0 and violations == 0,
            f"{violations} violations over {steps} optimizer steps, max std(mu) - sigma_ref = {worst:.1e}")


def _payload(rec, drop=("method",)):
    d = rec.to_dict()
    for k in drop:
        d.pop(k)
    return json.dumps(d)


def test_c8_reduction_lattice(verdict, tmp_path):
    cfg = make_config(ALIGNMENT_WORLD, tmp_path, **{"optim.steps": 10})
    schedule = C.build_schedule(cfg)
    prompts = C.load_prompts(cfg)[:8]
    backend = C.build_backend(cfg, schedule, prompts)
    pipe = Pipeline(schedule, backend, C.optim_config(cfg))
    frozen_pipe = Pipeline(schedule, backend, OptimConfig(10, 200.0, 0.4, 10, cov_lr=0.0))
    checks = 0
    bad = []
    for p in prompts:
        for seed in range(4):
            van = pipe.generate(p, PipelineConfig("vanilla"), seed)[0]
            gsn = pipe.generate(p, PipelineConfig("gsn", guidance_lr=0.0), seed)[0]
            saga = pipe.generate(p, PipelineConfig("saga", step_index=40, cutoff=50), seed)[0]
            plus = pipe.generate(p, PipelineConfig("saga-plus", step_index=40, cutoff=50, guidance_lr=0.0), seed)[0]
            sigma = frozen_pipe.generate(p, PipelineConfig("saga-sigma", step_index=40, cutoff=50,
                                                           cov=CovSpec.parse("diag")), seed)[0]
            saga_f = frozen_pipe.generate(p, PipelineConfig("saga", step_index=40, cutoff=50), seed)[0]
            sig = dict(sigma.to_dict(), method=None)
            sig["prior"] = dict(sig["prior"], cov=None)
            ref = dict(saga_f.to_dict(), method=None)
            ref["prior"] = dict(ref["prior"], cov=None)
            pairs = [("gsn(0)=vanilla", _payload(gsn), _payload(van)),
                     ("saga-plus(0)=saga", _payload(plus), _payload(saga)),
                     ("frozen saga-sigma=saga", json.dumps(sig), json.dumps(ref))]
            for name, x, y in pairs:
                checks += 1
                if x != y:
                    bad.append(f"{name} {p.prompt_id}/{seed}")
    # Optimizer level: learn_mu_sigma with a frozen factor against learn_mu.
    a, b = schedule.coefficients(schedule.grid[40])
    for p in prompts[:4]:
        prior = init_prior(backend.library.entry(p).prototypes.mean(axis=0), schedule.grid[40], a, b,
                           CovSpec.parse("diag"))
        crit = CriterionConfig()
        x = learn_mu_sigma(prior, backend, crit, p, OptimConfig(10, 200.0), np.random.default_rng(1), freeze_cov=True)
        y = learn_mu(prior, backend, crit, p, OptimConfig(10, 200.0), np.random.default_rng(1))
        checks += 1
        if x.prior.mu.tobytes() != y.prior.mu.tobytes() or x.losses != y.losses:
            bad.append(f"learn_mu_sigma(frozen)=learn_mu {p.prompt_id}")
    verdict(8, not bad, f"{checks - len(bad)}/{checks} byte-identical reductions" + (f"; {bad[:3]}" if bad else ""))


# -- 9-12: directional behaviour on the analytic backend -----------------------------------


def test_c9_alignment_ordering(verdict, alignment_run):
    out, elapsed = alignment_run
    records, prompts, lib = loaded(out)
    score = {m: tiam_score(items_of(records, prompts, m), lib) for m in ("vanilla", "saga", "saga-plus")}
    n = len(items_of(records, prompts, "saga"))
    v, s, p = score["vanilla"], score["saga"], score["saga-plus"]
    ok = p >= s >= v and s - v >= 0.15 and p - v >= 0.20 and elapsed < 15 * 60 and n >= 32 * 16
    verdict(9, ok, f"toy-TIAM vanilla {v:.3f}, saga {s:.3f}, saga-plus {p:.3f} over {n} images per method "
                   f"(saga-vanilla {100 * (s - v):.1f} pts >= 15, plus-vanilla {100 * (p - v):.1f} pts >= 20), "
                   f"{elapsed:.0f}s")


def test_c10_sweet_spot(verdict, t_sweep):
    _, res, elapsed = t_sweep
    curve = [(row["step-index"], row["tiam"]) for row in res.rows]
    values = [v for _, v in curve]
    best = int(np.argmax(values))
    interior = max(values[1:-1])
    ok = len(curve) >= 8 and interior > values[0] and interior > values[-1] and elapsed < 30 * 60
    text = ", ".join(f"{i}:{v:.3f}" for i, v in curve)
    verdict(10, ok, f"toy-TIAM by step index {{{text}}}; max at index {curve[best][0]}, {elapsed:.0f}s")


def test_c11_unique_distribution(verdict, tmp_path):
    cfg = make_config(ALIGNMENT_WORLD, tmp_path, **{"prompts.generate.n": 16})
    schedule = C.build_schedule(cfg)
    prompts = C.load_prompts(cfg)
    backend = C.build_backend(cfg, schedule, prompts)
    pipe = Pipeline(schedule, backend, C.optim_config(cfg))
    uni_groups, saga_groups = [], []
    for p in prompts:
        uni = pipe.generate(p, PipelineConfig("saga-uni", step_index=40, n_samples=8), 0)
        uni_groups.append([(p, r.z0) for r in uni])
        saga_groups.append([(p, pipe.generate(p, PipelineConfig("saga", step_index=40), s)[0].z0)
                            for s in range(8)])
    lib = backend.library
    d_uni, cov_uni = layout_diversity(uni_groups, lib)
    d_saga, cov_saga = layout_diversity(saga_groups, lib)
    t_uni = tiam_score([x for g in uni_groups for x in g], lib)
    t_saga = tiam_score([x for g in saga_groups for x in g], lib)
    ok = d_uni < d_saga and abs(t_uni - t_saga) <= 0.05
    verdict(11, ok, f"layout diversity saga-uni {d_uni:.2f} < saga {d_saga:.2f} (pair coverage {cov_uni:.2f}/"
                    f"{cov_saga:.2f}); toy-TIAM {t_uni:.3f} vs {t_saga:.3f} (within 0.05) on {len(prompts)} prompts")


def test_c12_bbox_conditioning(verdict, tmp_path):
    runner.run_experiment(make_config(BBOX_WORLD, tmp_path), ["saga", "saga-bbox"], tmp_path,
                          runner.worker_count(8))
    records, prompts, lib = loaded(tmp_path)
    plain = box_alignment(items_of(records, prompts, "saga"), lib)
    boxed = box_alignment(items_of(records, prompts, "saga-bbox"), lib)
    verdict(12, boxed >= plain + 0.10,
            f"box alignment saga {plain:.3f}, saga-bbox {boxed:.3f} (gain {100 * (boxed - plain):.1f} pts >= 10)")


# -- 13: determinism of the CLI -------------------------------------------------------------


def test_c13_cli_determinism(verdict, tmp_path):
    raw = json.loads(json.dumps(ALIGNMENT_WORLD))
    raw["prompts"] = {"generate": {"n": 3, "entities": 2, "seed": 5}}
    raw["seeds"] = [0, 7]
    raw["optim"]["steps"] = 10
    raw["method"]["n_samples"] = 2
    raw["output"] = {"dir": "out"}
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(raw))
    methods = "vanilla,gsn,saga,saga-plus,saga-uni,saga-sigma"
    digests = []
    for workers, threads in (("1", "1"), ("4", "2")):
        env = dict(os.environ, SAGA_LAB_THREADS=threads, PYTHONHASHSEED=threads)
        proc = subprocess.run([sys.executable, "-m", "sagalab.cli", "run", "--config", str(path), "--method",
                               methods, "--workers", workers], capture_output=True, text=True, env=env)
        assert proc.returncode == 0, proc.stderr
        digests.append((tmp_path / "out" / runner.RECORDS).read_bytes())
    n = digests[0].count(b"\n")
    verdict(13, digests[0] == digests[1] and n > 0,
            f"two runs ({n} records, different worker counts and hash seeds) byte-identical: "
            f"{digests[0] == digests[1]}")
