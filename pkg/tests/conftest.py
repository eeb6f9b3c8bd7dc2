import time

import numpy as np
import pytest

from constel.constellations import PointCloud
from constel.geom import SimilarityTransform, random_rotation

_ACCEPTANCE: dict[int, tuple[str, str]] = {}


def record_acceptance(number: int, name: str, passed: bool, detail: str = ""):
    _ACCEPTANCE[number] = ("PASS" if passed else "FAIL", f"{name}: {detail}" if detail else name)


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        status, text = _ACCEPTANCE[n]
        terminalreporter.write_line(f"{status} criterion {n:2d}: {text}")


def random_similarity(rng, scale_range=(0.1, 10.0), shift=10.0) -> SimilarityTransform:
    s = float(np.exp(rng.uniform(np.log(scale_range[0]), np.log(scale_range[1]))))
    return SimilarityTransform(random_rotation(rng), rng.uniform(-shift, shift, 3), s)


def general_points(rng, k, min_sep=0.05, min_perp=0.1):
    """Random k points in the unit cube, away from every degeneracy threshold."""
    from constel.constellations import is_degenerate
    from constel.starhash import select_ab
    from constel.geom import point_line_distance

    while True:
        P = rng.uniform(0, 1, (k, 3))
        D = np.linalg.norm(P[:, None] - P[None], axis=-1)
        if D[np.triu_indices(k, 1)].min() < min_sep or is_degenerate(P)[0]:
            continue
        a, b = select_ab(P)
        perp = sorted(point_line_distance(P[i], P[a], P[b]) / D[a, b] for i in range(k) if i not in (a, b))
        # keep clear of near-ties (pair choice, plane star choice) that flip under rounding
        d = np.sort(D[np.triu_indices(k, 1)])
        if perp[-1] < min_perp or d[-1] - d[-2] < 1e-3 * d[-1]:
            continue
        if len(perp) > 1 and perp[-1] - perp[-2] < 1e-3:
            continue
        c = P.mean(axis=0)
        if abs(np.linalg.norm(P[a] - c) - np.linalg.norm(P[b] - c)) < 1e-3:
            continue
        return P


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def cloud_of(points, ids=None, frames=10, metric=True, source_id="t"):
    P = np.asarray(points, dtype=float)
    ids = np.arange(len(P)) if ids is None else ids
    return PointCloud(ids, P, np.full(len(P), frames), source_id=source_id, metric=metric)
