import numpy as np
import pytest

from ipalab.dataworld import SceneSpec, curate
from ipalab.flowcore import FlowBatch, VelocityField
from ipalab.trainlab import PretrainConfig, make_eval_sets, pretrain_base


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_ref():
    """Frozen 5-d model with a 3-d condition."""
    return VelocityField.init(5, 3, hidden=(16, 16), seed=0).frozen()


def make_batch(rng, n=16, dim=5, cond_dim=3, t=None, hand=2):
    if t is None:
        t = rng.uniform(0.0, 1.0, n)
    mask = np.zeros((n, dim))
    mask[:, dim - hand:] = 1.0
    return FlowBatch.from_endpoints(rng.standard_normal((n, dim)), rng.standard_normal((n, dim)),
                                    t, rng.standard_normal((n, cond_dim)), mask)


@pytest.fixture
def batch(rng):
    return make_batch(rng)


@pytest.fixture
def moved_policy(small_ref):
    pol = small_ref.with_adapter(4, seed=1)
    r = np.random.default_rng(99)
    pol.set_params(pol.get_params() + 0.05 * r.standard_normal(pol.n_params))
    return pol


@pytest.fixture(scope="session")
def tiny_world():
    """A quickly pretrained base model and curated set for integration tests."""
    spec = SceneSpec()
    ref = pretrain_base(spec, PretrainConfig(n_data=2000, steps=300, hidden=(32, 32)))
    cur = curate(ref, spec, n_candidates=256, threshold=0.7, seed=0)
    ev = make_eval_sets(spec, cur.good, n_heldout=64, n_noise=2, n_t=8)
    return spec, ref, cur, ev


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[n])
