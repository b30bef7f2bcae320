import json
import math

import numpy as np
import pytest
import scipy.linalg
import torch
from hypothesis import given, settings, strategies as st

from conftest import small_model
from mmebm.data import BayesOracle, SynthDataset
from mmebm.errors import ContractError, UnsupportedConfigError
from mmebm.evaluation import (CoherenceReport, FrechetReport, build_report, coherence,
                              cross_coherence_matrix, cross_generate, cross_generate_all, frechet_distance,
                              frechet_from_moments, gaussian_kl, generate_for_eval, joint_coherence, joint_generate,
                              paired_difference, posterior_kl_diagnostic)
from mmebm.learning import GroupOptimizer, training_step
from mmebm.model import MultimodalBatch, build_model
from mmebm.sampler import LangevinConfig

PRIOR = LangevinConfig(step_size=0.1, num_steps=10, target="prior")
POST = LangevinConfig(step_size=0.05, num_steps=5, target="posterior")


# -- Fréchet distance -------------------------------------------------------------


def test_frechet_identical_sets_is_zero():
    x = np.random.default_rng(0).normal(size=(500, 4))
    assert frechet_distance(x, x) < 1e-8


def test_frechet_one_dimensional_closed_form():
    rng = np.random.default_rng(1)
    a, b = rng.normal(0, 1, 100_000), rng.normal(1, 1, 100_000)
    assert frechet_distance(a, b) == pytest.approx(1.0, abs=0.05)


def test_frechet_matches_scipy_sqrtm_oracle():
    rng = np.random.default_rng(2)
    A, B = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
    ca, cb = A @ A.T + 0.1 * np.eye(4), B @ B.T + 0.1 * np.eye(4)
    ma, mb = rng.normal(size=4), rng.normal(size=4)
    expected = np.sum((ma - mb) ** 2) + np.trace(ca + cb - 2 * scipy.linalg.sqrtm(ca @ cb).real)
    assert frechet_from_moments(ma, ca, mb, cb) == pytest.approx(expected, rel=1e-8)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), d=st.integers(1, 5))
def test_frechet_symmetric_non_negative_and_orthogonally_invariant(seed, d):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(60, d)) * rng.uniform(0.1, 3, size=d)
    b = rng.normal(size=(80, d)) + rng.normal(size=d)
    fab, fba = frechet_distance(a, b), frechet_distance(b, a)
    assert fab >= 0
    assert abs(fab - fba) < 1e-10 * max(1.0, fab)
    q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    assert frechet_distance(a @ q, b @ q) == pytest.approx(fab, abs=1e-6, rel=1e-6)


def test_frechet_contract_errors():
    with pytest.raises(ContractError):
        frechet_distance(np.zeros((10, 2)), np.zeros((10, 3)))
    with pytest.raises(ContractError):
        frechet_distance(np.zeros((2, 2)), np.zeros((10, 2)))


# -- Gaussian KL ---------------------------------------------------------------------


def test_gaussian_kl_cases():
    cov = np.array([[2.0, 0.3], [0.3, 1.0]])
    assert gaussian_kl([1.0, 2.0], cov, [1.0, 2.0], cov) == pytest.approx(0.0, abs=1e-14)
    assert gaussian_kl([1.0], [[1.0]], [0.0], [[1.0]]) == pytest.approx(0.5)
    # KL(N(0, 4) || N(0, 1)) = (4 - 1 - log 4) / 2
    assert gaussian_kl([0.0], [[4.0]], [0.0], [[1.0]]) == pytest.approx((3 - math.log(4)) / 2)


# -- posterior KL diagnostic ------------------------------------------------------------


def analytic_model(seed=0, dims=(3, 2), d=2):
    model = build_model(list(dims), d=d, prior="gaussian", dec_hidden=(), enc_hidden=(8,), seed=seed,
                        dtype=torch.float64)
    g = torch.Generator().manual_seed(seed + 100)
    batch = MultimodalBatch([torch.randn(3, dx, generator=g, dtype=torch.float64) for dx in dims])
    return model, batch


def test_kl_diagnostic_true_init_is_converged(gen):
    model, batch = analytic_model()
    cfg = LangevinConfig(step_size=0.05, num_steps=5, target="posterior", grad_clip=None)
    pre, post = posterior_kl_diagnostic(model, batch, cfg, gen, n_chains=4000, init="true")
    # Gaussian-fit KL has O(d^2 / n) small-sample bias
    assert np.all(pre < 0.01)
    assert np.all(np.abs(post - pre) < 0.01)


def test_kl_diagnostic_prior_init_tightens(gen):
    model, batch = analytic_model(seed=1)
    cfg = LangevinConfig(step_size=0.05, num_steps=300, target="posterior", grad_clip=None)
    pre, post = posterior_kl_diagnostic(model, batch, cfg, gen, n_chains=1000, init="prior")
    assert np.all(post < pre)


def test_kl_diagnostic_rejects_non_analytic(gen):
    model = small_model()
    batch = MultimodalBatch([torch.zeros(2, 3, dtype=torch.float64), torch.zeros(2, 4, dtype=torch.float64)])
    with pytest.raises(UnsupportedConfigError):
        posterior_kl_diagnostic(model, batch, POST, gen)


# -- coherence -------------------------------------------------------------------------


def _oracle(ds: SynthDataset) -> BayesOracle:
    return BayesOracle.from_dataset(ds)


def test_chance_level_joint_coherence(tiny_dataset):
    # label-independent generator: each modality draws its own random real rows
    ds, oracle = tiny_dataset, _oracle(tiny_dataset)
    rng = np.random.default_rng(0)
    n = 20_000
    obs = ds.train.observations
    gens = [obs[m][rng.integers(0, ds.train.n, n)] for m in range(ds.spec.M)]
    # agreement probability of independent classifiers with these marginals
    preds = [oracle.classify(m, obs[m])[0] for m in range(ds.spec.M)]
    freq = np.stack([np.bincount(p, minlength=ds.spec.K) / p.size for p in preds])
    expected = float(np.sum(np.prod(freq, 0)))
    assert expected == pytest.approx(1 / ds.spec.K ** (ds.spec.M - 1), rel=0.25)
    se = math.sqrt(expected * (1 - expected) / n)
    assert abs(joint_coherence(gens, oracle) - expected) < 3 * se


def test_copying_paired_target_gives_oracle_accuracy(tiny_dataset):
    ds, oracle = tiny_dataset, _oracle(tiny_dataset)
    obs, labels = ds.test.observations, ds.test.labels
    M = ds.spec.M
    gens = {(i, j): obs[j] for i in range(M) for j in range(M) if i != j}
    mat = cross_coherence_matrix(gens, labels, oracle)
    for j in range(M):
        acc = float(np.mean(oracle.classify(j, obs[j])[0] == labels))
        for i in range(M):
            if i != j:
                assert mat[i, j] == acc
    assert np.all(np.isnan(np.diag(mat)))


def test_copying_class_mean_is_fully_coherent(tiny_dataset):
    ds, oracle = tiny_dataset, _oracle(tiny_dataset)
    labels = ds.test.labels
    gens = {(0, 1): ds.W[1].T[labels], (1, 0): ds.W[0].T[labels]}
    mat = cross_coherence_matrix(gens, labels, oracle)
    assert mat[0, 1] == 1.0 and mat[1, 0] == 1.0


def test_coherence_invariant_to_consistent_relabeling(tiny_dataset):
    ds, oracle = tiny_dataset, _oracle(tiny_dataset)
    K = ds.spec.K
    perm = np.random.default_rng(3).permutation(K)
    # class c becomes perm[c]: column perm[c] of the new W is column c of the old one
    W2 = [np.empty_like(w) for w in ds.W]
    for w_new, w in zip(W2, ds.W):
        w_new[:, perm] = w
    oracle2 = BayesOracle(W2, ds.U, ds.spec.sigma_style, ds.spec.sigma_obs)
    obs, labels = ds.test.observations, ds.test.labels
    gens = {(0, 1): obs[1][::-1].copy(), (1, 2): obs[2], (2, 0): obs[0][::2].repeat(2, 0)[: labels.size]}
    a = cross_coherence_matrix(gens, labels, oracle)
    b = cross_coherence_matrix(gens, perm[labels], oracle2)
    np.testing.assert_array_equal(a, b)
    joint = [obs[m] for m in range(ds.spec.M)]
    assert joint_coherence(joint, oracle) == joint_coherence(joint, oracle2)


def test_coherence_requires_labels(tiny_dataset):
    model = build_model([6] * 3, d=2, d_w=0, prior="gaussian", seed=0, dtype=torch.float64)
    unlabelled = MultimodalBatch(tiny_dataset.test.observations)
    with pytest.raises(ContractError):
        coherence(model, unlabelled, _oracle(tiny_dataset), torch.Generator(), PRIOR, POST)


def test_paired_difference():
    post, pre = np.array([1.0, 1.0, 0.0, 1.0]), np.array([0.0, 1.0, 0.0, 0.0])
    mean, se = paired_difference(post, pre)
    assert mean == 0.5
    assert se == pytest.approx(np.std([1, 0, 0, 1], ddof=1) / 2)


@pytest.fixture(scope="module")
def trained(tiny_dataset):
    """A shared-latent model trained briefly on the tiny dataset."""
    ds = tiny_dataset
    model = build_model([ds.spec.D_x] * ds.spec.M, d=4, prior="gaussian", enc_hidden=(32,), dec_hidden=(32,),
                        seed=0, dtype=torch.float64)
    opt = GroupOptimizer(model, lr_beta=3e-3, lr_phi=3e-3)
    g = torch.Generator().manual_seed(0)
    rng = np.random.default_rng(0)
    passthrough = LangevinConfig(target="posterior", passthrough=True)
    for _ in range(400):
        batch = ds.train.select(rng.choice(ds.train.n, 64, replace=False)).torch(torch.float64)
        training_step(model, batch, PRIOR, passthrough, opt, g)
    return model


def test_trained_model_beats_shuffled_label_control(trained, tiny_dataset):
    ds, oracle = tiny_dataset, _oracle(tiny_dataset)
    rep = coherence(trained, ds.test, oracle, torch.Generator().manual_seed(1), PRIOR, POST, n_joint=256)
    shuffled = np.random.default_rng(0).permutation(ds.test.labels)
    gens = generate_for_eval(trained, ds.test, 0, torch.Generator().manual_seed(1), PRIOR, POST)
    control = cross_coherence_matrix(gens.cross_pre, shuffled, oracle)
    n = ds.test.n
    mask = ~np.eye(ds.spec.M, dtype=bool)
    # each entry is a binomial proportion over n test rows
    assert np.all(rep.cross_pre[mask] > control[mask] + 3 * np.sqrt(0.25 / n))
    assert 0 <= rep.joint_coherence <= 1
    for mat in (rep.cross_pre, rep.cross_post):
        assert np.all((mat[mask] >= 0) & (mat[mask] <= 1))


# -- generation ---------------------------------------------------------------------------


def test_two_modalities_give_two_cross_directions(gen):
    model = small_model(dims=(3, 4))
    batch = MultimodalBatch([torch.zeros(5, 3, dtype=torch.float64), torch.zeros(5, 4, dtype=torch.float64)],
                            np.zeros(5, dtype=np.int64))
    gens = generate_for_eval(model, batch, 0, gen, PRIOR, POST)
    assert sorted(gens.cross_pre) == sorted(gens.cross_post) == [(0, 1), (1, 0)]
    assert gens.cross_pre[(0, 1)].shape == (5, 4)


@pytest.mark.parametrize("mode", ["shared", "split"])
def test_cross_generation_is_reproducible(mode):
    model = small_model(mode=mode, d_w=2 if mode == "split" else 0)
    batch = MultimodalBatch([torch.randn(4, 3, dtype=torch.float64), torch.randn(4, 4, dtype=torch.float64)])
    for use_ld, latent in ((False, "mean"), (True, "sample")):
        a = cross_generate(model, batch, 0, 1, use_ld, torch.Generator().manual_seed(7), POST, latent)
        b = cross_generate(model, batch, 0, 1, use_ld, torch.Generator().manual_seed(7), POST, latent)
        np.testing.assert_array_equal(a, b)


def test_cross_generation_argument_errors(gen):
    model = small_model()
    batch = MultimodalBatch([torch.zeros(2, 3, dtype=torch.float64), torch.zeros(2, 4, dtype=torch.float64)])
    with pytest.raises(ContractError):
        cross_generate(model, batch, 1, 1, False, gen)
    with pytest.raises(ContractError):
        cross_generate(model, batch, 0, 5, False, gen)
    with pytest.raises(ContractError):
        cross_generate_all(model, batch, 3, False, gen)
    with pytest.raises(ContractError):
        cross_generate_all(model, batch, 0, True, gen, None)


def test_joint_generation_empty_and_deterministic():
    model = small_model(mode="split", d_w=2)
    empty = joint_generate(model, 0, torch.Generator(), PRIOR)
    assert [x.shape for x in empty] == [(0, 3), (0, 4)]
    a = joint_generate(model, 16, torch.Generator().manual_seed(3), PRIOR)
    b = joint_generate(model, 16, torch.Generator().manual_seed(3), PRIOR)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


def test_joint_generation_covariance_nondegenerate(trained):
    for x in joint_generate(trained, 2000, torch.Generator().manual_seed(0), PRIOR):
        cov = np.cov(x, rowvar=False)
        assert np.all(np.isfinite(cov))
        assert np.linalg.matrix_rank(cov) >= 1 and np.trace(cov) > 0


# -- report ------------------------------------------------------------------------------


def test_report_fields_and_headline(tmp_path):
    M = 2
    pre = np.array([[np.nan, 0.6], [0.4, np.nan]])
    post = np.array([[np.nan, 0.7], [0.5, np.nan]])
    coh = CoherenceReport(0.3, pre, post, n_cross=10, n_joint=10, post_minus_pre=0.1, post_minus_pre_se=0.02)
    fd = FrechetReport([1.0, 2.0], np.full((M, M), 3.0), np.full((M, M), 4.0))
    post_rep = build_report(coh, fd, "abc", 5)
    pre_rep = build_report(coh, fd, "abc", 5, headline="pre_ld")
    for key in ("joint_coherence", "cross_coherence_mean", "cross_coherence_matrix", "frechet_joint",
                "frechet_cross", "kl_pre_mean", "kl_post_mean", "config_hash", "seed"):
        assert key in post_rep
    assert post_rep["cross_coherence_mean"] == pytest.approx(0.6)
    assert pre_rep["cross_coherence_mean"] == pytest.approx(0.5)
    assert post_rep["cross_coherence_matrix"][0] == [None, 0.7]
    assert post_rep["kl_pre_mean"] is None
    json.dumps(post_rep, allow_nan=False)
    with pytest.raises(ContractError):
        build_report(coh, fd, "abc", 5, headline="other")
