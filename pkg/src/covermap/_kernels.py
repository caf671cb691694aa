"""Hot loops with a numba path and a pure-numpy fallback.

Set ``COVERMAP_DISABLE_NUMBA=1`` before import to force the numpy path (also
used automatically when numba is missing). Both paths are importable
directly as ``*_numba`` / ``*_numpy`` so they can be cross-checked and
benchmarked; the unsuffixed names dispatch to the selected one.

Every kernel works on plain ndarrays; the public modules wrap them.
"""

import os

import numpy as np

_DISABLED = os.environ.get("COVERMAP_DISABLE_NUMBA", "").strip().lower() not in ("", "0", "false", "no")

try:
    from numba import njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]):
            return args[0]
        return lambda f: f

USE_NUMBA = HAVE_NUMBA and not _DISABLED

# edge directions on the pixel lattice (x right, y down); a left turn is d + 1
DOWN, EAST, UP, WEST = 0, 1, 2, 3


# =============================================================================
# Connected-component labelling
# =============================================================================

@njit(cache=True, nogil=True)
def _find(parent, i):
    while parent[i] != i:
        parent[i] = parent[parent[i]]
        i = parent[i]
    return i


@njit(cache=True, nogil=True)
def _union(parent, a, b):
    ra = _find(parent, a)
    rb = _find(parent, b)
    if ra < rb:
        parent[rb] = ra
        return ra
    if rb < ra:
        parent[ra] = rb
    return rb


@njit(cache=True, nogil=True)
def ccl_numba(img, eight):
    h, w = img.shape
    lab = np.zeros((h, w), np.int32)
    parent = np.zeros(h * w // 2 + w + 2, np.int32)
    nxt = 1
    for y in range(h):
        for x in range(w):
            if img[y, x] == 0:
                continue
            cur = 0
            if x > 0 and lab[y, x - 1] > 0:
                cur = lab[y, x - 1]
            if y > 0:
                if lab[y - 1, x] > 0:
                    cur = lab[y - 1, x] if cur == 0 else _union(parent, cur, lab[y - 1, x])
                if eight:
                    if x > 0 and lab[y - 1, x - 1] > 0:
                        cur = lab[y - 1, x - 1] if cur == 0 else _union(parent, cur, lab[y - 1, x - 1])
                    if x + 1 < w and lab[y - 1, x + 1] > 0:
                        cur = lab[y - 1, x + 1] if cur == 0 else _union(parent, cur, lab[y - 1, x + 1])
            if cur == 0:
                if nxt >= parent.shape[0]:
                    grown = np.zeros(parent.shape[0] * 2, np.int32)
                    grown[: parent.shape[0]] = parent
                    parent = grown
                parent[nxt] = nxt
                cur = nxt
                nxt += 1
            lab[y, x] = cur
    final = np.zeros(nxt, np.int32)
    count = 0
    for y in range(h):
        for x in range(w):
            v = lab[y, x]
            if v == 0:
                continue
            r = _find(parent, v)
            if final[r] == 0:
                count += 1
                final[r] = count
            lab[y, x] = final[r]
    return lab, count


def ccl_numpy(img, eight):
    img = np.asarray(img) != 0
    h, w = img.shape
    padded = np.zeros((h, w + 2), np.int8)
    padded[:, 1:-1] = img
    d = np.diff(padded, axis=1)
    srow, scol = np.nonzero(d == 1)
    erow, ecol = np.nonzero(d == -1)
    # nonzero is row-major, so starts and ends pair up run by run
    nruns = srow.size
    lab = np.zeros((h, w), np.int32)
    if nruns == 0:
        return lab, 0
    stride = w + 2
    kstart = srow.astype(np.int64) * stride + scol
    kend = srow.astype(np.int64) * stride + ecol
    grow = 1 if eight else 0
    # for each run, overlapping runs in the previous row form a contiguous range
    prev = srow.astype(np.int64) - 1
    lo = np.searchsorted(kend, prev * stride + scol - grow, side="right")
    hi = np.searchsorted(kstart, prev * stride + ecol + grow, side="left")
    cnt = np.maximum(hi - lo, 0)
    b = np.repeat(np.arange(nruns), cnt)
    a = np.repeat(lo - np.cumsum(cnt) + cnt, cnt) + np.arange(cnt.sum())
    # hook roots onto the smaller root, then compress by pointer jumping
    root = np.arange(nruns)
    while True:
        ra, rb = root[a], root[b]
        if np.array_equal(ra, rb):
            break
        m = np.minimum(ra, rb)
        np.minimum.at(root, ra, m)
        np.minimum.at(root, rb, m)
        while True:
            jumped = root[root]
            if np.array_equal(jumped, root):
                break
            root = jumped
    _, ids = np.unique(root, return_inverse=True)
    ids = ids.astype(np.int32) + 1
    lengths = ecol - scol
    flat = np.repeat(srow.astype(np.int64) * w + scol - np.cumsum(lengths) + lengths, lengths)
    flat += np.arange(lengths.sum())
    lab.ravel()[flat] = np.repeat(ids, lengths)
    return lab, int(ids.max())


# =============================================================================
# Boundary ring walking
# =============================================================================

@njit(cache=True, nogil=True)
def walk_rings_numba(order, nxt, sx, sy, dirs, lab):
    n = order.shape[0]
    visited = np.zeros(n, np.bool_)
    coords = np.empty((n + 1, 2), np.int64)
    starts = np.empty(n + 1, np.int64)
    labels = np.empty(n, np.int64)
    nv = 0
    nr = 0
    for k in range(n):
        e0 = order[k]
        if visited[e0]:
            continue
        starts[nr] = nv
        labels[nr] = lab[e0]
        nr += 1
        first = nv
        prev_dir = -1
        e = e0
        while not visited[e]:
            visited[e] = True
            if dirs[e] != prev_dir:
                coords[nv, 0] = sx[e]
                coords[nv, 1] = sy[e]
                nv += 1
            prev_dir = dirs[e]
            e = nxt[e]
        # the ring may end on the same heading it started with
        if dirs[e0] == prev_dir and nv - first > 1:
            coords[first, 0] = coords[nv - 1, 0]
            coords[first, 1] = coords[nv - 1, 1]
            nv -= 1
    starts[nr] = nv
    return coords[:nv], starts[: nr + 1], labels[:nr]


def walk_rings_numpy(order, nxt, sx, sy, dirs, lab):
    n = order.shape[0]
    visited = np.zeros(n, bool)
    xs, ys, starts, labels = [], [], [], []
    nxt = nxt.tolist()
    dl = dirs.tolist()
    sxl = sx.tolist()
    syl = sy.tolist()
    for e0 in order.tolist():
        if visited[e0]:
            continue
        starts.append(len(xs))
        labels.append(int(lab[e0]))
        first = len(xs)
        prev_dir = -1
        e = e0
        while not visited[e]:
            visited[e] = True
            if dl[e] != prev_dir:
                xs.append(sxl[e])
                ys.append(syl[e])
            prev_dir = dl[e]
            e = nxt[e]
        if dl[e0] == prev_dir and len(xs) - first > 1:
            xs[first], ys[first] = xs[-1], ys[-1]
            xs.pop()
            ys.pop()
    starts.append(len(xs))
    coords = np.column_stack([np.asarray(xs, np.int64), np.asarray(ys, np.int64)]).reshape(-1, 2)
    return coords, np.asarray(starts, np.int64), np.asarray(labels, np.int64)


# =============================================================================
# Douglas-Peucker keep mask
# =============================================================================

@njit(cache=True, nogil=True)
def _seg_dist(px, py, ax, ay, bx, by):
    dx = bx - ax
    dy = by - ay
    den = dx * dx + dy * dy
    t = 0.0
    if den > 0.0:
        t = ((px - ax) * dx + (py - ay) * dy) / den
        if t < 0.0:
            t = 0.0
        elif t > 1.0:
            t = 1.0
    qx = ax + t * dx - px
    qy = ay + t * dy - py
    return np.sqrt(qx * qx + qy * qy)


@njit(cache=True, nogil=True)
def dp_keep_numba(pts, tol):
    n = pts.shape[0]
    keep = np.zeros(n, np.bool_)
    keep[0] = True
    keep[n - 1] = True
    stack = np.empty((n, 2), np.int64)
    top = 0
    stack[0, 0] = 0
    stack[0, 1] = n - 1
    top = 1
    while top > 0:
        top -= 1
        i = stack[top, 0]
        j = stack[top, 1]
        best = -1.0
        arg = -1
        for k in range(i + 1, j):
            d = _seg_dist(pts[k, 0], pts[k, 1], pts[i, 0], pts[i, 1], pts[j, 0], pts[j, 1])
            if d > best:
                best = d
                arg = k
        if arg >= 0 and best > tol:
            keep[arg] = True
            stack[top, 0] = i
            stack[top, 1] = arg
            top += 1
            stack[top, 0] = arg
            stack[top, 1] = j
            top += 1
    return keep


def dp_keep_numpy(pts, tol):
    pts = np.asarray(pts, np.float64)
    n = pts.shape[0]
    keep = np.zeros(n, bool)
    keep[0] = keep[n - 1] = True
    stack = [(0, n - 1)]
    while stack:
        i, j = stack.pop()
        if j - i < 2:
            continue
        ax, ay = pts[i]
        bx, by = pts[j]
        px, py = pts[i + 1:j, 0], pts[i + 1:j, 1]
        # same operation order as _seg_dist so ties on lattice rings break alike
        dx = bx - ax
        dy = by - ay
        den = dx * dx + dy * dy
        if den > 0:
            t = np.clip(((px - ax) * dx + (py - ay) * dy) / den, 0.0, 1.0)
        else:
            t = np.zeros(len(px))
        qx = ax + t * dx - px
        qy = ay + t * dy - py
        d = np.sqrt(qx * qx + qy * qy)
        k = int(np.argmax(d))
        if d[k] > tol:
            keep[i + 1 + k] = True
            stack.append((i, i + 1 + k))
            stack.append((i + 1 + k, j))
    return keep


# =============================================================================
# Synthetic spectral oracle: inverse-cubed squared-distance class memberships
# =============================================================================

@njit(cache=True, nogil=True)
def oracle_numba(img, sigs, soft):
    h, w, nb = img.shape
    k = sigs.shape[0]
    out = np.empty((h, w, k - 1), np.uint8)
    wts = np.empty(k, np.float64)
    for y in range(h):
        for x in range(w):
            tot = 0.0
            for c in range(k):
                d2 = 0.0
                for b in range(nb):
                    diff = np.float64(img[y, x, b]) - sigs[c, b]
                    d2 = d2 + diff * diff
                q = d2 + soft
                wc = 1.0 / (q * q * q)
                wts[c] = wc
                tot = tot + wc
            for c in range(1, k):
                p = wts[c] / tot
                out[y, x, c - 1] = np.uint8(np.floor(p * 255.0 + 0.5))
    return out


def oracle_numpy(img, sigs, soft, chunk_rows=256):
    h, w, nb = img.shape
    k = sigs.shape[0]
    out = np.empty((h, w, k - 1), np.uint8)
    for r0 in range(0, h, chunk_rows):
        blk = img[r0:r0 + chunk_rows].astype(np.float64)
        wts = []
        tot = np.zeros(blk.shape[:2])
        for c in range(k):
            d2 = np.zeros(blk.shape[:2])
            for b in range(nb):
                diff = blk[:, :, b] - sigs[c, b]
                d2 = d2 + diff * diff
            q = d2 + soft
            wc = 1.0 / (q * q * q)
            wts.append(wc)
            tot = tot + wc
        for c in range(1, k):
            out[r0:r0 + chunk_rows, :, c - 1] = np.floor(wts[c] / tot * 255.0 + 0.5)
    return out


if USE_NUMBA:
    ccl = ccl_numba
    walk_rings = walk_rings_numba
    dp_keep = dp_keep_numba
    oracle = oracle_numba
else:
    ccl = ccl_numpy
    walk_rings = walk_rings_numpy
    dp_keep = dp_keep_numpy
    oracle = oracle_numpy
