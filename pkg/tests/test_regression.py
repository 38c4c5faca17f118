import pytest

from core.models import CompressorKind, CompressorSpec, Method, RunConfig
from services.analysis import marina_stepsize
from services.compressors import ab_constants
from services.engine import run_method
from services.quadratic import generate_quadratic

pytestmark = pytest.mark.slow


def test_permk_beats_randk_on_identical_workers():
    n = d = 1000
    task = generate_quadratic(n, d, 1e-6, 0.0, seed=0)
    constants = task.constants()
    p = 1.0 / n
    traces = {}
    for spec in (CompressorSpec(kind=CompressorKind.PERMK), CompressorSpec(kind=CompressorKind.RANDK, k=1)):
        gamma = marina_stepsize(constants, ab_constants(spec, n, d), p)
        config = RunConfig(method=Method.MARINA, compressor=spec, gamma=gamma, p=p, T=200, master_seed=7)
        traces[spec.kind] = run_method(task, config)

    for budget in (32 * 50, 32 * 100, 32 * 200):
        permk = traces[CompressorKind.PERMK].best_within(budget)
        randk = traces[CompressorKind.RANDK].best_within(budget)
        assert permk is not None and randk is not None
        assert permk <= randk
