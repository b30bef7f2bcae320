import pytest

from mmebm.config import ConfigError, RunConfig


def test_defaults_are_the_desk_preset():
    cfg = RunConfig().validate()
    d = cfg.data
    assert (d.M, d.K, d.D_x, d.n_train) == (3, 5, 16, 4096)
    assert (cfg.model.d, cfg.model.d_w) == (8, 4)
    assert (cfg.train.epochs, cfg.train.batch_size) == (30, 128)
    assert (cfg.optim.lr_alpha, cfg.optim.lr_beta, cfg.optim.lr_phi, cfg.optim.clip_norm) == (1e-4, 1e-3, 1e-3, 10.0)
    assert (cfg.sampler.posterior.step_size, cfg.sampler.posterior.num_steps) == (0.05, 20)
    assert cfg.sampler.prior.num_steps == 60


def test_toml_round_trip_and_hash():
    cfg = RunConfig()
    cfg.model.latent_mode = "shared"
    cfg.train.seed = 5
    back = RunConfig.from_toml(cfg.to_toml())
    assert back == cfg
    assert back.hash() == cfg.hash()
    cfg.out_dir = "elsewhere"
    assert cfg.hash() == back.hash()
    cfg.train.seed = 6
    assert cfg.hash() != back.hash()


def test_partial_toml_fills_defaults():
    cfg = RunConfig.from_toml("[train]\nepochs = 2\n[model]\nprior = 'gaussian'\n")
    assert cfg.train.epochs == 2 and cfg.model.prior == "gaussian" and cfg.model.d == 8


@pytest.mark.parametrize("text", [
    "[train]\nepochs = 'two'\n",
    "[train]\nepochz = 2\n",
    "bogus = 1\n",
    "[model]\nprior = 'flow'\n",
    "[model]\nlatent_mode = 'both'\n",
    "[sampler.prior]\nstep_size = -1.0\n",
    "[sampler.posterior]\nnoise_scale = 2.0\n",
    "[optim]\nlr_beta = -0.1\n",
    "[optim]\nrecon_source = 'middle'\n",
    "[eval]\ncross_latent = 'mode'\n",
    "[model]\nebm_hidden = [64, 0]\n",
    "[data]\nK = 0\n",
    "[train]\ndeterministic64 = 1\n",
    "not toml [",
])
def test_invalid_configs_are_rejected(text):
    with pytest.raises(ConfigError):
        RunConfig.from_toml(text)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "absent.toml")
