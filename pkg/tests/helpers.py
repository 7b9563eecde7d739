import numpy as np

from hero import env as E


def placed(xs, ys, headings=None, speeds=None, scripted=(), lane_count=2, **cfg):
    """An EnvState with vehicles at exact positions."""
    n = len(xs)
    specs = tuple(E.VehicleSpec(0, (0.0, 0.0), scripted=i in scripted) for i in range(n))
    config = E.EnvConfig(vehicles=specs, lane_count=lane_count, placement_tries=1, **cfg)
    state = E.EnvState(
        config=config,
        x=np.array(xs, dtype=float), y=np.array(ys, dtype=float),
        heading=np.zeros(n) if headings is None else np.array(headings, dtype=float),
        speed=np.full(n, 0.08) if speeds is None else np.array(speeds, dtype=float),
        omega=np.zeros(n), scripted=np.array([i in scripted for i in range(n)]),
        lc_target=np.full(n, -1), lc_status=np.zeros(n, dtype=int),
        lc_steps=np.zeros(n, dtype=int), lc_direction=np.zeros(n, dtype=int),
    )
    return state
