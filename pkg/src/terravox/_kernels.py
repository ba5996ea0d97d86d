"""Voxel key packing, open-addressing row table, and range-fusion cores.

Two interchangeable execution paths live here:

  * compiled kernels (numba @njit) driving a custom open-addressing hash
    table: the default whenever numba imports cleanly;
  * a pure-numpy fallback using a sorted-key cache plus per-class
    lexsort winner selection.

Set TERRAVOX_NO_NUMBA=1 to force the fallback. Both paths produce
bit-identical stored state: new rows are allocated in first-touch order,
per-class winners are the earliest-arrival minimum-range finite
measurement, and a winner is accepted only when strictly closer than the
stored capture range (so ties keep the existing value). All confidences
and ranges are float32 end to end.

Keys pack three signed 21-bit axis indices into one int64:
    key = (ix + BIAS) << 42 | (iy + BIAS) << 21 | (iz + BIAS)
which at 0.2 m resolution indexes a ~420 km extent per axis.
"""

import os

import numpy as np

if os.environ.get("TERRAVOX_NO_NUMBA") == "1":
    HAS_NUMBA = False
else:
    try:
        from numba import njit
        HAS_NUMBA = True
    except ImportError:
        HAS_NUMBA = False

AXIS_BITS = 21
BIAS = 1 << 20
MAX_INDEX = (1 << 20) - 1
_M21 = (1 << AXIS_BITS) - 1
_M64 = (1 << 64) - 1


def pack_keys(ijk) -> np.ndarray:
    """(N, 3) signed voxel indices -> (N,) packed int64 keys."""
    ijk = np.asarray(ijk, dtype=np.int64)
    return ((ijk[..., 0] + BIAS) << 42) | ((ijk[..., 1] + BIAS) << 21) | (ijk[..., 2] + BIAS)


def unpack_keys(keys) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64)
    out = np.empty(keys.shape + (3,), dtype=np.int64)
    out[..., 0] = (keys >> 42) - BIAS
    out[..., 1] = ((keys >> 21) & _M21) - BIAS
    out[..., 2] = (keys & _M21) - BIAS
    return out


def mix_py(k: int) -> int:
    """splitmix64 finalizer on a python int; matches the kernel bit-for-bit."""
    k &= _M64
    k = (k ^ (k >> 30)) * 0xBF58476D1CE4E5B9 & _M64
    k = (k ^ (k >> 27)) * 0x94D049BB133111EB & _M64
    return k ^ (k >> 31)


if HAS_NUMBA:

    @njit(cache=True, inline="always")
    def _mix(k):
        k = (k ^ (k >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        k = (k ^ (k >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return k ^ (k >> np.uint64(31))

    @njit(cache=True)
    def nb_rebuild_slots(rowkeys, n_rows, slots):
        """Re-insert rows [0, n_rows) into a cleared slot table."""
        mask = np.uint64(slots.shape[0] - 1)
        for row in range(n_rows):
            h = _mix(np.uint64(rowkeys[row])) & mask
            while slots[h] != -1:
                h = (h + np.uint64(1)) & mask
            slots[h] = row

    @njit(cache=True)
    def nb_assign_rows(keys, slots, rowkeys, n_rows):
        """Row index per key; unseen keys claim rows in first-touch order."""
        mask = np.uint64(slots.shape[0] - 1)
        rows = np.empty(keys.shape[0], np.int64)
        for i in range(keys.shape[0]):
            k = keys[i]
            h = _mix(np.uint64(k)) & mask
            while True:
                s = slots[h]
                if s == -1:
                    slots[h] = n_rows
                    rowkeys[n_rows] = k
                    rows[i] = n_rows
                    n_rows += 1
                    break
                elif rowkeys[s] == k:
                    rows[i] = s
                    break
                h = (h + np.uint64(1)) & mask
        return rows, n_rows

    @njit(cache=True)
    def nb_fuse_range(keys, conf, rng, slots, rowkeys, m_conf, m_crange,
                      m_range, m_hits, m_last, m_epoch, n_rows, frame):
        """Single-pass bin-and-fuse for the range-priority rule.

        Per class, a finite incoming confidence replaces the stored one only
        when captured strictly closer than the stored capture range; the
        exposed per-voxel range is the min over any-finite arrivals. m_epoch
        gates the replacement counter to once per (slot, cloud): a slot
        counts as replaced when its pre-cloud value was finite.
        """
        mask = np.uint64(slots.shape[0] - 1)
        n_start = n_rows
        updated = 0
        replaced = 0
        n_cls = conf.shape[1]
        for i in range(keys.shape[0]):
            k = keys[i]
            h = _mix(np.uint64(k)) & mask
            while True:
                s = slots[h]
                if s == -1:
                    row = n_rows
                    slots[h] = row
                    rowkeys[row] = k
                    m_last[row] = frame
                    n_rows += 1
                    break
                elif rowkeys[s] == k:
                    row = s
                    if row < n_start and m_last[row] != frame:
                        updated += 1
                    m_last[row] = frame
                    break
                h = (h + np.uint64(1)) & mask
            m_hits[row] += 1
            r = rng[i]
            any_finite = False
            for c in range(n_cls):
                v = conf[i, c]
                if v == v:
                    any_finite = True
                    if r < m_crange[row, c]:
                        if m_epoch[row, c] != frame:
                            if m_conf[row, c] == m_conf[row, c]:
                                replaced += 1
                            m_epoch[row, c] = frame
                        m_conf[row, c] = v
                        m_crange[row, c] = r
            if any_finite and r < m_range[row]:
                m_range[row] = r
        return n_rows, n_rows - n_start, updated, replaced


def np_lookup_rows(keys, sorted_keys, sorted_rows) -> np.ndarray:
    """Rows for keys via binary search; -1 where absent."""
    rows = np.full(keys.shape[0], -1, dtype=np.int64)
    if sorted_keys.shape[0]:
        pos = np.searchsorted(sorted_keys, keys)
        inb = pos < sorted_keys.shape[0]
        hit = np.zeros(keys.shape[0], dtype=bool)
        hit[inb] = sorted_keys[pos[inb]] == keys[inb]
        rows[hit] = sorted_rows[pos[hit]]
    return rows


def np_assign_rows(keys, sorted_keys, sorted_rows, n_rows):
    """Fallback row assignment. Returns (rows, new_keys_in_first_touch_order)."""
    rows = np_lookup_rows(keys, sorted_keys, sorted_rows)
    new = rows == -1
    if not new.any():
        return rows, np.empty(0, dtype=np.int64)
    uniq, first, inv = np.unique(keys[new], return_index=True, return_inverse=True)
    order = np.argsort(first, kind="stable")
    rank = np.empty(uniq.shape[0], dtype=np.int64)
    rank[order] = np.arange(uniq.shape[0])
    rows[new] = n_rows + rank[inv]
    return rows, uniq[order]


def np_fuse_range(rows, conf, rng, m_conf, m_crange, m_range, m_hits, m_last,
                  n_start, frame):
    """Vectorized range fusion over pre-assigned rows.

    Winner per (row, class) = finite candidate with the smallest range,
    earliest arrival breaking exact float ties; accepted only when
    strictly below the stored capture range. Matches the sequential
    kernel state bit-for-bit.
    """
    n_pts, n_cls = conf.shape
    arrival = np.arange(n_pts)
    finite = ~np.isnan(conf)
    replaced = 0
    for c in range(n_cls):
        fin = finite[:, c]
        if not fin.any():
            continue
        rc, rr, ai, vv = rows[fin], rng[fin], arrival[fin], conf[fin, c]
        order = np.lexsort((ai, rr, rc))
        first = np.ones(order.shape[0], dtype=bool)
        first[1:] = rc[order[1:]] != rc[order[:-1]]
        w = order[first]
        wrow, wr = rc[w], rr[w]
        accept = wr < m_crange[wrow, c]
        if accept.any():
            arow = wrow[accept]
            replaced += int(np.count_nonzero(~np.isnan(m_conf[arow, c])))
            m_conf[arow, c] = vv[w][accept]
            m_crange[arow, c] = wr[accept]
    any_fin = finite.any(axis=1)
    if any_fin.any():
        np.minimum.at(m_range, rows[any_fin], rng[any_fin])
    np.add.at(m_hits, rows, 1)
    touched = np.unique(rows)
    updated = int(np.count_nonzero(touched < n_start))
    m_last[touched] = frame
    return updated, replaced
