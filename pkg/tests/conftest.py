"""Shared oracles and generators for the test suite.

The fusion oracle here is intentionally primitive: a python dict keyed by
integer cell index, updated one measurement at a time with scalar
comparisons. It shares no code with the production paths beyond numpy
scalar types, so agreement is meaningful.
"""

import math

import numpy as np
import pytest


def random_rotation(rng) -> np.ndarray:
    """Uniform-ish random rotation via QR with positive diagonal."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def bin_key(p, resolution):
    """Reference floor binning, scalar math."""
    return (math.floor(p[0] / resolution),
            math.floor(p[1] / resolution),
            math.floor(p[2] / resolution))


class OracleVoxel:
    __slots__ = ("conf", "crange", "rng", "hits")

    def __init__(self, n_cls):
        self.conf = [np.float32(np.nan)] * n_cls
        self.crange = [np.float32(np.inf)] * n_cls
        self.rng = np.float32(np.inf)
        self.hits = 0


def oracle_fuse(measurements, n_cls, resolution):
    """Offline min-range-per-class reference over a full measurement log.

    measurements: iterable of (point_xyz, conf_vector, range) in arrival
    order. Keeps, per cell and class, the finite confidence captured at
    the strictly smallest range, earliest arrival winning ties; the
    per-cell range is the smallest range of any semantics-bearing
    measurement. Returns dict: (ix,iy,iz) -> OracleVoxel.
    """
    cells = {}
    for p, conf, r in measurements:
        k = bin_key(p, resolution)
        v = cells.get(k)
        if v is None:
            v = cells[k] = OracleVoxel(n_cls)
        v.hits += 1
        r = np.float32(r)
        any_finite = False
        for c in range(n_cls):
            x = np.float32(conf[c])
            if not math.isnan(float(x)):
                any_finite = True
                if r < v.crange[c]:
                    v.conf[c] = x
                    v.crange[c] = r
        if any_finite and r < v.rng:
            v.rng = r
    return cells


def assert_map_equals_oracle(vmap, cells, n_cls):
    """Bit-equality between a map snapshot and the oracle dict."""
    snap = vmap.snapshot()
    assert snap.n_voxels == len(cells), \
        f"voxel count {snap.n_voxels} != oracle {len(cells)}"
    ijk = snap.keys_ijk()
    for i in range(snap.n_voxels):
        k = (int(ijk[i, 0]), int(ijk[i, 1]), int(ijk[i, 2]))
        v = cells[k]
        got_conf = snap.confidence[i]
        got_cr = snap.class_ranges[i]
        for c in range(n_cls):
            want = v.conf[c]
            if math.isnan(float(want)):
                assert math.isnan(float(got_conf[c])), (k, c)
            else:
                assert got_conf[c] == want, (k, c, got_conf[c], want)
            if math.isinf(float(v.crange[c])):
                assert math.isinf(float(got_cr[c])), (k, c)
            else:
                assert got_cr[c] == v.crange[c], (k, c)
        if math.isinf(float(v.rng)):
            assert math.isinf(float(snap.ranges[i]))
        else:
            assert snap.ranges[i] == v.rng, k
        assert snap.hits[i] == v.hits, k


def random_measurements(rng, n, n_cls, span=8.0, nan_point_frac=0.1,
                        nan_slot_frac=0.3, range_lo=0.5, range_hi=60.0):
    """Random points, partially-NaN confidence vectors, mixed ranges."""
    pts = rng.uniform(-span, span, (n, 3))
    conf = rng.random((n, n_cls)).astype(np.float32)
    conf[rng.random((n, n_cls)) < nan_slot_frac] = np.nan
    conf[rng.random(n) < nan_point_frac] = np.nan
    # duplicate some ranges on purpose so tie-breaking gets exercised
    ranges = rng.uniform(range_lo, range_hi, n)
    dup = rng.random(n) < 0.2
    ranges[dup] = np.round(ranges[dup], 1)
    return pts, conf, ranges.astype(np.float32)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
