import math
import os
import subprocess
import sys

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from hero import kernels
from hero._accel import backend

NB = kernels.IMPLEMENTATIONS["numba"]
NP = kernels.IMPLEMENTATIONS["numpy"]


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 5).flatmap(lambda n: st.tuples(
    hnp.arrays(float, n, elements=st.floats(-3, 3)),
    hnp.arrays(float, n, elements=st.floats(-3, 3)),
    st.integers(0, n - 1), st.floats(-math.pi, math.pi))))
def test_lidar_paths_agree(args):
    xs, ys, ego, heading = args
    a = NB["lidar"](xs, ys, ego, heading, 36, 0.1, 5.0)
    b = NP["lidar"](xs, ys, ego, heading, 36, 0.1, 5.0)
    assert np.allclose(a, b, atol=1e-12)
    assert np.all((a >= 0) & (a <= 5.0))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6).flatmap(lambda n: st.tuples(
    hnp.arrays(float, n, elements=st.floats(-1, 1)), hnp.arrays(float, n, elements=st.floats(-1, 1)))))
def test_collision_paths_agree(args):
    xs, ys = args
    a = NB["collisions"](xs, ys, 0.25, 0.3)
    b = NP["collisions"](xs, ys, 0.25, 0.3)
    assert np.array_equal(a, b)
    assert np.array_equal(a, a.T) and not a.diagonal().any()


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(float, st.integers(1, 50), elements=st.floats(-10, 10)), st.integers(1, 100))
def test_adam_paths_agree(g, step):
    bc1, bc2 = 1 - 0.9**step, 1 - 0.999**step
    outs = []
    for impl in (NB, NP):
        p, m, v = np.linspace(-1, 1, g.size), np.full(g.size, 0.1), np.full(g.size, 0.2)
        impl["adam"](p, g, m, v, 0.01, 0.9, 0.999, 1e-8, bc1, bc2)
        outs.append((p, m, v))
    for x, y in zip(*outs):
        assert np.allclose(x, y, rtol=1e-13, atol=1e-15)


def test_ray_dead_ahead_hits_disc_surface():
    d = NB["lidar"](np.array([0.0, 1.0]), np.array([0.0, 0.0]), 0, 0.0, 36, 0.1, 5.0)
    assert abs(d[0] - 0.9) < 1e-9
    assert d[18] == 5.0


def test_backend_switch_honours_env_flag():
    code = "from hero._accel import backend; print(backend())"
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True,
                         env=dict(os.environ, HERO_NUMBA="0"), check=True)
    assert out.stdout.strip() == "numpy"
    assert backend() in ("numba", "numpy")
