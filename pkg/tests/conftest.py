import numpy as np
import pytest

from gift.nn import MlpParams
from gift.policy import PolicyParams


def feedback_policy(gains, bound, obs_dim, scale=1e-3):
    """Policy whose pre-squash mean is ``-gains . obs`` (tanh hidden unit kept in its linear range)."""
    gains = np.asarray(gains, dtype=np.float64)
    w1 = (scale * gains).reshape(obs_dim, 1)
    w2 = np.array([[-1.0 / scale]])
    net = MlpParams([w1, w2], [np.zeros(1), np.zeros(1)])
    return PolicyParams(net, np.zeros(1), bound)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """One default pendulum pipeline run (3 seeds), shared by the slow tests."""
    import dataclasses
    import time

    from gift.harness.config import load_config
    from gift.harness.pipeline import run_pipeline

    out = tmp_path_factory.mktemp("desk")
    cfg = dataclasses.replace(load_config(None), out_dir=str(out))
    start = time.perf_counter()
    report = run_pipeline(cfg)
    return dict(cfg=cfg, report=report, seconds=time.perf_counter() - start, out=out)
