"""Acceptance gate: each test is one criterion and reports PASS/FAIL in the run summary.

Tolerances and sizes are the ones the criteria state; nothing here is tuned to
make a criterion pass.
"""

import copy
import math
import time

import numpy as np
import pytest
import torch

from mmebm.ablation import BASELINE, EBM_LD
from mmebm.config import RunConfig
from mmebm.data import generate
from mmebm.evaluation import frechet_distance, posterior_kl_diagnostic
from mmebm.learning import (GroupOptimizer, baseline_step, ebm_gradient_surrogate, generator_loss, inference_loss,
                            training_step)
from mmebm.model import EnergyPrior, MultimodalBatch, build_model
from mmebm.sampler import LangevinConfig, sample_prior
from mmebm.trainer import CHECKPOINT_NAME, load_checkpoint, train

SEEDS = (0, 1, 2)


# -- helpers ---------------------------------------------------------------------------


def fd_rel_error(fn, params, eps=1e-6) -> float:
    """Norm-wise relative error between autograd and central finite differences of scalar ``fn()``."""
    analytic = torch.autograd.grad(fn(), params, allow_unused=True)
    analytic = torch.cat([(torch.zeros_like(p) if g is None else g).reshape(-1) for p, g in zip(params, analytic)])
    numeric = torch.empty_like(analytic)
    k = 0
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = fn().item()
                flat[i] = orig - eps
                down = fn().item()
                flat[i] = orig
                numeric[k] = (up - down) / (2 * eps)
                k += 1
    return float((analytic - numeric).norm() / numeric.norm().clamp_min(1e-12))


def small_instance(seed):
    g = torch.Generator().manual_seed(seed)
    d = int(torch.randint(1, 9, (1,), generator=g))
    width = int(torch.randint(2, 17, (1,), generator=g))
    mode = "split" if seed % 2 else "shared"
    dims = [int(v) for v in torch.randint(1, 6, (2,), generator=g)]
    model = build_model(dims, d=d, d_w=2, latent_mode=mode, prior="ebm", ebm_hidden=(width, width),
                        enc_hidden=(width,), dec_hidden=(width,), seed=seed, dtype=torch.float64)
    batch = MultimodalBatch([torch.randn(4, dx, generator=g, dtype=torch.float64) for dx in dims])
    return model, batch, g


# -- 1 -----------------------------------------------------------------------------------


@pytest.mark.criterion(1, "gradient correctness (finite differences, rel < 1e-4)")
def test_criterion_1_gradients(record_property):
    t0 = time.perf_counter()
    worst = {}
    for seed in range(4):
        model, batch, g = small_instance(seed)
        groups = model.param_groups()
        z = torch.randn(5, model.d, generator=g, dtype=torch.float64, requires_grad=True)
        lat = torch.randn(batch.n, model.latent_dim, generator=g, dtype=torch.float64, requires_grad=True)
        zn = torch.randn(5, model.d, generator=g, dtype=torch.float64)
        noise = model.draw_noise(batch.n, g)
        errs = {
            "energy/z": fd_rel_error(lambda: model.prior.energy(z).sum(), [z]),
            "energy/alpha": fd_rel_error(lambda: model.prior.energy(z.detach()).sum(), groups.alpha),
            "decode_ll/latent": fd_rel_error(
                lambda: sum(model.decode_log_likelihood(m, lat, batch.observations[m]).sum() for m in range(2)),
                [lat]),
            "decode_ll/beta": fd_rel_error(
                lambda: sum(model.decode_log_likelihood(m, lat.detach(), batch.observations[m]).sum()
                            for m in range(2)), groups.beta),
            "inference_loss/phi": fd_rel_error(lambda: inference_loss(model, batch, noise=noise), groups.phi),
            "generator_loss/beta": fd_rel_error(lambda: generator_loss(model, batch, lat), groups.beta),
            "surrogate/alpha": fd_rel_error(lambda: ebm_gradient_surrogate(model.prior, z.detach(), zn),
                                            groups.alpha),
        }
        for k, v in errs.items():
            worst[k] = max(worst.get(k, 0.0), v)
    elapsed = time.perf_counter() - t0
    record_property("detail", f"max rel err {max(worst.values()):.2e} over 4 instances, {elapsed:.1f}s")
    assert max(worst.values()) < 1e-4, worst
    assert elapsed < 30


# -- 2 -----------------------------------------------------------------------------------


@pytest.mark.criterion(2, "sampler fidelity (f ≡ 0 → N(0, I2))")
def test_criterion_2_sampler(record_property):
    t0 = time.perf_counter()
    prior = EnergyPrior(2, (16, 16)).double().zero_init_()
    cfg = LangevinConfig(step_size=0.1, num_steps=500, target="prior")
    z = sample_prior(prior, 5000, cfg, torch.Generator().manual_seed(0)).final_z.numpy()
    elapsed = time.perf_counter() - t0
    mean, var = z.mean(0), z.var(0, ddof=1)
    se = np.sqrt(var / z.shape[0])
    record_property("detail", f"mean {np.round(mean, 4).tolist()} (3 SE = {np.round(3 * se, 4).tolist()}), "
                              f"var {np.round(var, 4).tolist()}, {elapsed:.1f}s")
    assert np.all(np.abs(mean) < 3 * se)
    assert np.all(np.abs(var - 1.0) < 0.1)
    assert elapsed < 60


# -- 3 -----------------------------------------------------------------------------------


@pytest.mark.criterion(3, "reduction identity (f ≡ 0, passthrough vs MoE-ELBO baseline)")
def test_criterion_3_reduction(record_property):
    t0 = time.perf_counter()
    ds = generate(RunConfig().data.spec())
    batch = ds.train.select(np.arange(128)).torch(torch.float64)
    ebm = build_model([16] * 3, d=8, latent_mode="shared", prior="ebm", seed=0, dtype=torch.float64)
    ebm.prior.zero_init_()
    base = copy.deepcopy(ebm)
    before = [p.detach().clone() for p in ebm.parameters()]
    prior_cfg = LangevinConfig(step_size=0.1, num_steps=60, target="prior")
    passthrough = LangevinConfig(target="posterior", passthrough=True)
    training_step(ebm, batch, prior_cfg, passthrough, GroupOptimizer(ebm), torch.Generator().manual_seed(11))
    baseline_step(base, batch, GroupOptimizer(base), torch.Generator().manual_seed(11))
    ge, gb = ebm.param_groups(), base.param_groups()
    gap = max(float((p - q).detach().abs().max()) for p, q in zip(ge.beta + ge.phi, gb.beta + gb.phi))
    moved = max(float((p.detach() - q).abs().max()) for p, q in zip(ebm.parameters(), before))
    elapsed = time.perf_counter() - t0
    record_property("detail", f"max |Δ update| {gap:.1e} (update size {moved:.1e}), {elapsed:.1f}s")
    assert moved > 0
    assert gap <= 1e-10
    assert elapsed < 10


# -- 4 -----------------------------------------------------------------------------------


@pytest.mark.criterion(4, "posterior LD tightens KL to the true posterior")
def test_criterion_4_kl_tightening(record_property):
    t0 = time.perf_counter()
    wins = 0
    for seed in range(50):
        g = torch.Generator().manual_seed(1000 + seed)
        d = int(torch.randint(1, 5, (1,), generator=g))
        dims = [int(v) for v in torch.randint(1, 7, (int(torch.randint(1, 4, (1,), generator=g)),), generator=g)]
        model = build_model(dims, d=d, prior="gaussian", enc_hidden=(8,), dec_hidden=(), seed=seed,
                            dtype=torch.float64)
        batch = MultimodalBatch([torch.randn(1, dx, generator=g, dtype=torch.float64) * 2 for dx in dims])
        cfg = LangevinConfig(step_size=0.05, num_steps=200, target="posterior", grad_clip=None)
        pre, post = posterior_kl_diagnostic(model, batch, cfg, g, n_chains=1000, init="prior")
        wins += int(post[0] < pre[0])
    elapsed = time.perf_counter() - t0
    record_property("detail", f"kl_post < kl_pre in {wins}/50 instances, {elapsed:.1f}s")
    assert wins >= 45
    assert elapsed < 300


# -- 5 and 6: desk-preset training runs ------------------------------------------------------


@pytest.fixture(scope="module")
def preset_runs(tmp_path_factory):
    """Default preset (EBM prior, split latents, posterior LD) and the Gaussian
    baseline on the same dataset, for three training seeds."""
    root = tmp_path_factory.mktemp("preset")
    runs = {}
    for row in (EBM_LD, BASELINE):
        for seed in SEEDS:
            cfg = row.apply(RunConfig())
            cfg.train.seed = seed
            t0 = time.perf_counter()
            report = train(cfg, root / f"{row.name}-{seed}").report
            runs[row.name, seed] = (report, time.perf_counter() - t0)
    return runs


@pytest.mark.slow
@pytest.mark.criterion(5, "post-LD cross coherence ≥ pre-LD (3 seeds, 2 SE)")
def test_criterion_5_post_ld_not_worse(preset_runs, record_property):
    rows, diffs, ok = [], [], True
    for seed in SEEDS:
        rep, _ = preset_runs[EBM_LD.name, seed]
        assert rep["n_cross"] >= 2000
        pre, post = rep["pre_ld"]["cross_coherence_mean"], rep["post_ld"]["cross_coherence_mean"]
        diff, se = rep["post_minus_pre"], rep["post_minus_pre_se"]
        diffs.append(diff)
        ok &= diff >= -2 * se
        rows.append(f"seed {seed}: {pre:.4f}→{post:.4f} (Δ {diff:+.4f} ± {se:.4f})")
    elapsed = sum(preset_runs[EBM_LD.name, s][1] for s in SEEDS)
    record_property("detail", "; ".join(rows) + f"; mean Δ {np.mean(diffs):+.4f}; {elapsed:.0f}s")
    assert np.mean(diffs) >= 0, "post-LD mean cross coherence is below pre-LD"
    assert ok, "a seed's post-minus-pre difference is negative beyond 2 standard errors"
    assert elapsed < 15 * 60


@pytest.mark.slow
@pytest.mark.criterion(6, "ebm-prior-plus-ld ≥ gaussian-baseline cross coherence on ≥2/3 seeds")
def test_criterion_6_ebm_beats_baseline(preset_runs, record_property):
    wins, rows = 0, []
    for seed in SEEDS:
        ebm = preset_runs[EBM_LD.name, seed][0]["cross_coherence_mean"]
        base = preset_runs[BASELINE.name, seed][0]["cross_coherence_mean"]
        wins += int(ebm >= base)
        rows.append(f"seed {seed}: ebm+ld {ebm:.4f} vs baseline {base:.4f}")
    elapsed = sum(t for _, t in preset_runs.values())
    record_property("detail", "; ".join(rows) + f"; {wins}/3 seeds; {elapsed:.0f}s")
    assert wins >= 2
    assert elapsed < 30 * 60


# -- 7 -----------------------------------------------------------------------------------


@pytest.mark.criterion(7, "Fréchet distance correctness")
def test_criterion_7_frechet(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1000, 8))
    same = frechet_distance(x, x)
    one_d = frechet_distance(rng.normal(0, 1, 100_000), rng.normal(1, 1, 100_000))
    elapsed = time.perf_counter() - t0
    record_property("detail", f"identical sets {same:.1e}, 1-D case {one_d:.4f}, {elapsed:.2f}s")
    assert same < 1e-8
    assert abs(one_d - 1.0) < 0.05
    assert elapsed < 10


# -- 8 -----------------------------------------------------------------------------------


@pytest.mark.criterion(8, "determinism and bitwise checkpoint resume")
def test_criterion_8_determinism(tmp_path, record_property):
    t0 = time.perf_counter()
    cfg = RunConfig()
    cfg.train.max_steps = 100
    train(cfg, tmp_path / "a", evaluate=False)
    train(cfg, tmp_path / "b", evaluate=False)
    same_metrics = (tmp_path / "a/metrics.jsonl").read_bytes() == (tmp_path / "b/metrics.jsonl").read_bytes()

    cfg64 = copy.deepcopy(cfg)
    cfg64.train.deterministic64 = True
    train(cfg64, tmp_path / "full", evaluate=False)
    train(cfg64, tmp_path / "resumed", evaluate=False, stop_at=50)
    train(cfg64, tmp_path / "resumed", evaluate=False)
    full, resumed = (load_checkpoint(tmp_path / d / CHECKPOINT_NAME) for d in ("full", "resumed"))
    same_params = all(torch.equal(a, b) for a, b in zip(full.model.state_dict().values(),
                                                         resumed.model.state_dict().values()))
    same_optim = all(torch.equal(torch.as_tensor(a[k]), torch.as_tensor(b[k]))
                     for name in full.optimizer.optimizers
                     for a, b in zip(full.optimizer.optimizers[name].state_dict()["state"].values(),
                                     resumed.optimizer.optimizers[name].state_dict()["state"].values())
                     for k in a)
    same_log = (tmp_path / "full/metrics.jsonl").read_bytes() == (tmp_path / "resumed/metrics.jsonl").read_bytes()
    elapsed = time.perf_counter() - t0
    record_property("detail", f"rerun metrics identical={same_metrics}, resume params={same_params} "
                              f"optimizer={same_optim} metrics={same_log}, {elapsed:.0f}s")
    assert same_metrics and same_params and same_optim and same_log
    assert full.step == resumed.step == 100
    assert elapsed < 300
