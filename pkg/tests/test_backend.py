import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmdpgrad import _backend
from cmdpgrad.estimators import FastWdEstimator, wd_infinite_horizon
from cmdpgrad.mdp import Simulator

from conftest import interior_alpha, random_model

needs_cython = pytest.mark.skipif("cython" not in _backend.available_backends(),
                                  reason="compiled extension not built")


def _probe(env_value):
    env = dict(os.environ)
    env.pop("CMDPGRAD_BACKEND", None)
    if env_value is not None:
        env["CMDPGRAD_BACKEND"] = env_value
    out = subprocess.run([sys.executable, "-c", "from cmdpgrad import _backend; print(_backend.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    return out.stdout.strip()


class TestSelection:
    def test_env_forces_python(self):
        assert _probe("python") == "python"

    @needs_cython
    def test_default_prefers_compiled(self):
        assert _probe(None) == "cython"

    def test_get_kernels(self):
        assert _backend.get_kernels("python").__name__.endswith("_pykernels")
        with pytest.raises(ValueError):
            _backend.get_kernels("fortran")


@needs_cython
class TestIdenticalOutput:
    py = _backend.get_kernels("python")
    cy = _backend.get_kernels("cython") if "cython" in _backend.available_backends() else None

    @given(st.integers(0, 10_000))
    @settings(max_examples=15, deadline=None)
    def test_simulator(self, seed):
        rng = np.random.default_rng(seed)
        m = random_model(rng, ragged=True)
        theta = m.flat_theta(np.concatenate([rng.dirichlet(np.ones(k)) for k in m.action_counts]))
        a = Simulator(m, theta, seed, x0=0, backend=self.py).run(500)
        b = Simulator(m, theta, seed, x0=0, backend=self.cy).run(500)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    @given(st.integers(0, 10_000))
    @settings(max_examples=15, deadline=None)
    def test_infinite_horizon(self, seed):
        rng = np.random.default_rng(seed)
        m = random_model(rng, n_constraints=2, ragged=True)
        alpha = interior_alpha(rng, m)
        for coords in ("alpha", "psi"):
            policy = alpha if coords == "alpha" else np.concatenate(
                [rng.dirichlet(np.ones(k)) for k in m.action_counts])
            a = wd_infinite_horizon(m, policy, 300, seed, coords=coords, backend=self.py).values
            b = wd_infinite_horizon(m, policy, 300, seed, coords=coords, backend=self.cy).values
            np.testing.assert_array_equal(a, b)

    def test_recorded_ledger(self, est_model, est_alpha):
        _, la = wd_infinite_horizon(est_model, est_alpha, 400, 1, record=True, return_ledger=True, backend=self.py)
        _, lb = wd_infinite_horizon(est_model, est_alpha, 400, 1, record=True, return_ledger=True, backend=self.cy)
        ra, rb = la.record_arrays(), lb.record_arrays()
        for key in ra:
            np.testing.assert_array_equal(ra[key], rb[key])

    def test_fast_batches(self, track_a):
        alpha = np.full(4, 0.6)
        fa = FastWdEstimator(track_a, alpha, 10, 5, backend=self.py)
        fb = FastWdEstimator(track_a, alpha, 10, 5, backend=self.cy)
        for _ in range(200):
            np.testing.assert_array_equal(fa.step()[0].values, fb.step()[0].values)
