import numpy as np
import pytest
import torch

from mmebm.data import SynthSpec, generate
from mmebm.model import build_model

torch.set_num_threads(1)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


def rand_batch(n=5, dims=(3, 4), seed=0, labels=False, k=3):
    from mmebm.model import MultimodalBatch

    g = torch.Generator().manual_seed(seed)
    obs = [torch.randn((n, dx), generator=g, dtype=torch.float64) for dx in dims]
    lab = np.arange(n) % k if labels else None
    return MultimodalBatch(obs, lab)


def small_model(dims=(3, 4), d=2, d_w=0, mode="shared", prior="ebm", seed=0, hidden=(8,), base="normal"):
    return build_model(list(dims), d=d, d_w=d_w, latent_mode=mode, prior=prior, base_dist=base,
                       ebm_hidden=(8, 8), enc_hidden=hidden, dec_hidden=hidden, seed=seed, dtype=torch.float64)


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate(SynthSpec(M=3, K=4, D_x=6, d_style=2, sigma_style=0.5, sigma_obs=0.5, signal_scale=3.0,
                              seed=7, n_train=256, n_test=128))


# -- acceptance summary -------------------------------------------------------------

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    detail = dict(item.user_properties).get("detail", "")
    _CRITERIA[mark.args[0]] = (mark.args[1], "PASS" if rep.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number} [{status}] {title}: {detail}")
