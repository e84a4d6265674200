"""Bowyer-Watson Delaunay kernel with robust predicates.

Incremental insertion over a ghost-vertex boundary (no super-triangle).
Predicates run a float filter, then a double-double stage; determinants
that are zero at double-double precision are resolved by symbolic
perturbation in index order (the lifted paraboloid height of point i is
lowered by eps^(i+1), eps -> 0+), so co-circular ties are deterministic.

Points must be handed in already lexicographically sorted and distinct;
ranks used by the perturbation rule are the sorted positions.
"""

import numpy as np

from ._jit import maybe_njit

_EPS = 2.220446049250313e-16
_SPLITTER = 134217729.0  # 2^27 + 1
_CCW_BOUND = (3.0 + 16.0 * _EPS) * _EPS
_ICC_BOUND = (10.0 + 96.0 * _EPS) * _EPS
# Relative threshold below which a double-double determinant is treated as
# an exact zero and handed to the perturbation rule.
_DD_REL_BOUND = 1e-29

STATUS_OK = 0
STATUS_COLLINEAR = 2


@maybe_njit(cache=True)
def _two_sum(a, b):
    x = a + b
    bv = x - a
    av = x - bv
    return x, (a - av) + (b - bv)


@maybe_njit(cache=True)
def _fast_two_sum(a, b):
    x = a + b
    return x, b - (x - a)


@maybe_njit(cache=True)
def _two_diff(a, b):
    x = a - b
    bv = a - x
    av = x + bv
    return x, (a - av) - (b - bv)


@maybe_njit(cache=True)
def _two_prod(a, b):
    x = a * b
    c = _SPLITTER * a
    abig = c - a
    ahi = c - abig
    alo = a - ahi
    c = _SPLITTER * b
    bbig = c - b
    bhi = c - bbig
    blo = b - bhi
    err = x - ahi * bhi
    err -= alo * bhi
    err -= ahi * blo
    return x, alo * blo - err


@maybe_njit(cache=True)
def _dd_add(ah, al, bh, bl):
    sh, se = _two_sum(ah, bh)
    se += al + bl
    return _fast_two_sum(sh, se)


@maybe_njit(cache=True)
def _dd_mul(ah, al, bh, bl):
    ph, pe = _two_prod(ah, bh)
    pe += ah * bl + al * bh
    return _fast_two_sum(ph, pe)


@maybe_njit(cache=True)
def orient2d(ax, ay, bx, by, cx, cy):
    """Sign of the (b-a) x (c-a) cross product: +1 CCW, -1 CW, 0 collinear."""
    detl = (ax - cx) * (by - cy)
    detr = (ay - cy) * (bx - cx)
    det = detl - detr
    detsum = abs(detl) + abs(detr)
    if abs(det) > _CCW_BOUND * detsum:
        return 1.0 if det > 0.0 else -1.0
    if detsum == 0.0:
        return 0.0
    # double-double stage on exactly represented differences
    d1h, d1l = _two_diff(ax, cx)
    d2h, d2l = _two_diff(by, cy)
    d3h, d3l = _two_diff(ay, cy)
    d4h, d4l = _two_diff(bx, cx)
    t1h, t1l = _dd_mul(d1h, d1l, d2h, d2l)
    t2h, t2l = _dd_mul(d3h, d3l, d4h, d4l)
    rh, rl = _dd_add(t1h, t1l, -t2h, -t2l)
    if abs(rh) > _DD_REL_BOUND * detsum:
        return 1.0 if rh > 0.0 else -1.0
    return 0.0


@maybe_njit(cache=True)
def _incircle_det(ax, ay, bx, by, cx, cy, dx, dy):
    """(sign, certain): in-circle determinant sign with adaptive fallback."""
    adx = ax - dx
    ady = ay - dy
    bdx = bx - dx
    bdy = by - dy
    cdx = cx - dx
    cdy = cy - dy
    bdxcdy = bdx * cdy
    cdxbdy = cdx * bdy
    alift = adx * adx + ady * ady
    cdxady = cdx * ady
    adxcdy = adx * cdy
    blift = bdx * bdx + bdy * bdy
    adxbdy = adx * bdy
    bdxady = bdx * ady
    clift = cdx * cdx + cdy * cdy
    det = (alift * (bdxcdy - cdxbdy) + blift * (cdxady - adxcdy)
           + clift * (adxbdy - bdxady))
    permanent = ((abs(bdxcdy) + abs(cdxbdy)) * alift
                 + (abs(cdxady) + abs(adxcdy)) * blift
                 + (abs(adxbdy) + abs(bdxady)) * clift)
    if abs(det) > _ICC_BOUND * permanent:
        return (1.0 if det > 0.0 else -1.0), True
    if permanent == 0.0:
        return 0.0, True

    # double-double stage
    axh, axl = _two_diff(ax, dx)
    ayh, ayl = _two_diff(ay, dy)
    bxh, bxl = _two_diff(bx, dx)
    byh, byl = _two_diff(by, dy)
    cxh, cxl = _two_diff(cx, dx)
    cyh, cyl = _two_diff(cy, dy)

    # lifts |p - d|^2
    t1h, t1l = _dd_mul(axh, axl, axh, axl)
    t2h, t2l = _dd_mul(ayh, ayl, ayh, ayl)
    alh, all_ = _dd_add(t1h, t1l, t2h, t2l)
    t1h, t1l = _dd_mul(bxh, bxl, bxh, bxl)
    t2h, t2l = _dd_mul(byh, byl, byh, byl)
    blh, bll = _dd_add(t1h, t1l, t2h, t2l)
    t1h, t1l = _dd_mul(cxh, cxl, cxh, cxl)
    t2h, t2l = _dd_mul(cyh, cyl, cyh, cyl)
    clh, cll = _dd_add(t1h, t1l, t2h, t2l)

    # pairwise cross products
    t1h, t1l = _dd_mul(bxh, bxl, cyh, cyl)
    t2h, t2l = _dd_mul(cxh, cxl, byh, byl)
    m1h, m1l = _dd_add(t1h, t1l, -t2h, -t2l)
    t1h, t1l = _dd_mul(cxh, cxl, ayh, ayl)
    t2h, t2l = _dd_mul(axh, axl, cyh, cyl)
    m2h, m2l = _dd_add(t1h, t1l, -t2h, -t2l)
    t1h, t1l = _dd_mul(axh, axl, byh, byl)
    t2h, t2l = _dd_mul(bxh, bxl, ayh, ayl)
    m3h, m3l = _dd_add(t1h, t1l, -t2h, -t2l)

    t1h, t1l = _dd_mul(alh, all_, m1h, m1l)
    t2h, t2l = _dd_mul(blh, bll, m2h, m2l)
    t3h, t3l = _dd_mul(clh, cll, m3h, m3l)
    rh, rl = _dd_add(t1h, t1l, t2h, t2l)
    rh, rl = _dd_add(rh, rl, t3h, t3l)
    if abs(rh) > _DD_REL_BOUND * permanent:
        return (1.0 if rh > 0.0 else -1.0), True
    return 0.0, True


@maybe_njit(cache=True)
def incircle_perturbed(pts, ia, ib, ic, id_):
    """In-circle test with symbolic perturbation by index order.

    Returns +1 if point id_ lies strictly inside the (perturbed) circumdisk
    of CCW triangle (ia, ib, ic), else -1.  Never returns 0: exact ties are
    resolved by the documented perturbation rule.
    """
    ax, ay = pts[ia, 0], pts[ia, 1]
    bx, by = pts[ib, 0], pts[ib, 1]
    cx, cy = pts[ic, 0], pts[ic, 1]
    dx, dy = pts[id_, 0], pts[id_, 1]
    s, _ = _incircle_det(ax, ay, bx, by, cx, cy, dx, dy)
    if s != 0.0:
        return s
    # det == 0: decide via the epsilon expansion
    #   det_w = sum_i coeff_i eps^(rank_i + 1), smallest rank dominates.
    # coeff_a = -orient(d,b,c), coeff_b = +orient(d,a,c),
    # coeff_c = -orient(d,a,b), coeff_d = +orient(a,b,c)
    idx = np.empty(4, np.int64)
    idx[0] = ia
    idx[1] = ib
    idx[2] = ic
    idx[3] = id_
    order = np.argsort(idx)
    for oi in range(4):
        which = order[oi]
        if which == 0:
            coeff = -orient2d(dx, dy, bx, by, cx, cy)
        elif which == 1:
            coeff = orient2d(dx, dy, ax, ay, cx, cy)
        elif which == 2:
            coeff = -orient2d(dx, dy, ax, ay, bx, by)
        else:
            coeff = orient2d(ax, ay, bx, by, cx, cy)
        if coeff != 0.0:
            return coeff
    return -1.0  # unreachable for distinct non-degenerate input


@maybe_njit(cache=True)
def _on_open_segment(ax, ay, bx, by, px, py):
    # PRE: p exactly collinear with (a, b); comparisons only, no rounding.
    if abs(bx - ax) >= abs(by - ay):
        lo = ax if ax < bx else bx
        hi = bx if ax < bx else ax
        return lo < px < hi
    lo = ay if ay < by else by
    hi = by if ay < by else ay
    return lo < py < hi


@maybe_njit(cache=True)
def _in_disk(pts, ghost, tri_v, t, ip):
    """Does point ip lie in the (generalized) circumdisk of triangle t?"""
    v0 = tri_v[t, 0]
    v1 = tri_v[t, 1]
    v2 = tri_v[t, 2]
    px, py = pts[ip, 0], pts[ip, 1]
    if v2 == ghost:
        # ghost stores the reversed hull edge in slots (0, 1)
        o = orient2d(pts[v0, 0], pts[v0, 1], pts[v1, 0], pts[v1, 1], px, py)
        if o > 0.0:
            return True
        if o == 0.0:
            return _on_open_segment(pts[v0, 0], pts[v0, 1],
                                    pts[v1, 0], pts[v1, 1], px, py)
        return False
    return incircle_perturbed(pts, v0, v1, v2, ip) > 0.0


@maybe_njit(cache=True)
def _locate(pts, ghost, tri_v, tri_n, start, ip):
    """Visibility walk from a real triangle to one whose disk holds ip."""
    px, py = pts[ip, 0], pts[ip, 1]
    t = start
    for _ in range(4 * tri_v.shape[0] + 16):
        if tri_v[t, 2] == ghost:
            return t
        a = tri_v[t, 0]
        b = tri_v[t, 1]
        c = tri_v[t, 2]
        if orient2d(pts[a, 0], pts[a, 1], pts[b, 0], pts[b, 1], px, py) < 0.0:
            t = tri_n[t, 2]
        elif orient2d(pts[b, 0], pts[b, 1], pts[c, 0], pts[c, 1], px, py) < 0.0:
            t = tri_n[t, 0]
        elif orient2d(pts[c, 0], pts[c, 1], pts[a, 0], pts[a, 1], px, py) < 0.0:
            t = tri_n[t, 1]
        else:
            return t
    return t  # walk bound exceeded; caller validates


@maybe_njit(cache=True)
def _slot_of(tri_v, t, v):
    if tri_v[t, 0] == v:
        return 0
    if tri_v[t, 1] == v:
        return 1
    return 2


@maybe_njit(cache=True)
def build_kernel(pts):
    """Triangulate lexicographically sorted distinct points.

    Returns (tri_v, tri_n, n_slots, status).  Freed slots carry
    tri_v[t, 0] == -2; ghost triangles reference vertex id n.
    """
    n = pts.shape[0]
    ghost = n
    cap = 4 * n + 64
    tri_v = np.full((cap, 3), -2, np.int64)
    tri_n = np.full((cap, 3), -1, np.int64)
    free = np.empty(cap, np.int64)
    n_free = 0
    n_slots = 0

    # initial non-collinear triple: (0, 1, k)
    k = -1
    for j in range(2, n):
        if orient2d(pts[0, 0], pts[0, 1], pts[1, 0], pts[1, 1],
                    pts[j, 0], pts[j, 1]) != 0.0:
            k = j
            break
    if k < 0:
        return tri_v, tri_n, 0, STATUS_COLLINEAR

    a = 0
    b = 1
    c = k
    if orient2d(pts[a, 0], pts[a, 1], pts[b, 0], pts[b, 1],
                pts[c, 0], pts[c, 1]) < 0.0:
        b, c = c, b
    # T0 real, G0/G1/G2 ghosts of hull edges (a,b), (b,c), (c,a)
    tri_v[0, 0], tri_v[0, 1], tri_v[0, 2] = a, b, c
    tri_v[1, 0], tri_v[1, 1], tri_v[1, 2] = b, a, ghost
    tri_v[2, 0], tri_v[2, 1], tri_v[2, 2] = c, b, ghost
    tri_v[3, 0], tri_v[3, 1], tri_v[3, 2] = a, c, ghost
    tri_n[0, 0], tri_n[0, 1], tri_n[0, 2] = 2, 3, 1
    tri_n[1, 0], tri_n[1, 1], tri_n[1, 2] = 3, 2, 0   # (b,a,g): opp b->(a,g)=G2, opp a->(g,b)=G1
    tri_n[2, 0], tri_n[2, 1], tri_n[2, 2] = 1, 3, 0   # (c,b,g): opp c->(b,g)=G0, opp b->(g,c)=G2
    tri_n[3, 0], tri_n[3, 1], tri_n[3, 2] = 2, 1, 0   # (a,c,g): opp a->(c,g)=G1, opp c->(g,a)=G0
    n_slots = 4
    last_real = 0

    mark_in = np.full(cap, -1, np.int64)
    mark_out = np.full(cap, -1, np.int64)
    stack = np.empty(cap, np.int64)
    cavity = np.empty(cap, np.int64)
    bnd_v1 = np.empty(cap, np.int64)
    bnd_v2 = np.empty(cap, np.int64)
    bnd_out = np.empty(cap, np.int64)
    new_tris = np.empty(cap, np.int64)

    for ip in range(2, n):
        if ip == k:
            continue
        epoch = ip
        loc = _locate(pts, ghost, tri_v, tri_n, last_real, ip)
        if not _in_disk(pts, ghost, tri_v, loc, ip):
            # walk bound pathology; scan for a holder (defensive, O(cap))
            found = -1
            for t in range(n_slots):
                if tri_v[t, 0] != -2 and _in_disk(pts, ghost, tri_v, t, ip):
                    found = t
                    break
            loc = found
        # ---- cavity BFS
        n_stack = 1
        stack[0] = loc
        mark_in[loc] = epoch
        n_cav = 1
        cavity[0] = loc
        n_bnd = 0
        while n_stack > 0:
            n_stack -= 1
            t = stack[n_stack]
            for e in range(3):
                s = tri_n[t, e]
                if mark_in[s] == epoch:
                    continue
                inside = False
                if mark_out[s] != epoch:
                    inside = _in_disk(pts, ghost, tri_v, s, ip)
                    if inside:
                        mark_in[s] = epoch
                        cavity[n_cav] = s
                        n_cav += 1
                        stack[n_stack] = s
                        n_stack += 1
                    else:
                        mark_out[s] = epoch
                if mark_in[s] != epoch:
                    # boundary edge of t opposite local slot e
                    bnd_v1[n_bnd] = tri_v[t, (e + 1) % 3]
                    bnd_v2[n_bnd] = tri_v[t, (e + 2) % 3]
                    bnd_out[n_bnd] = s
                    n_bnd += 1
        # ---- free cavity slots
        for i in range(n_cav):
            t = cavity[i]
            tri_v[t, 0] = -2
            free[n_free] = t
            n_free += 1
        # ---- create new triangles (v1, v2, ip), ghost rotated to slot 2
        for i in range(n_bnd):
            if n_free > 0:
                n_free -= 1
                t = free[n_free]
            else:
                t = n_slots
                n_slots += 1
            v1 = bnd_v1[i]
            v2 = bnd_v2[i]
            if v1 == ghost:
                tri_v[t, 0], tri_v[t, 1], tri_v[t, 2] = v2, ip, ghost
            elif v2 == ghost:
                tri_v[t, 0], tri_v[t, 1], tri_v[t, 2] = ip, v1, ghost
            else:
                tri_v[t, 0], tri_v[t, 1], tri_v[t, 2] = v1, v2, ip
            new_tris[i] = t
        # ---- wire neighbors
        for i in range(n_bnd):
            t = new_tris[i]
            v1 = bnd_v1[i]
            v2 = bnd_v2[i]
            out = bnd_out[i]
            # across the boundary edge (v1, v2): slot opposite ip
            tri_n[t, _slot_of(tri_v, t, ip)] = out
            so = 0
            if tri_v[out, 0] != v1 and tri_v[out, 0] != v2:
                so = 0
            elif tri_v[out, 1] != v1 and tri_v[out, 1] != v2:
                so = 1
            else:
                so = 2
            tri_n[out, so] = t
            # spokes: edge (v2, ip) opposite v1 and (ip, v1) opposite v2
            for j in range(n_bnd):
                if bnd_v1[j] == v2:
                    tri_n[t, _slot_of(tri_v, t, v1)] = new_tris[j]
                if bnd_v2[j] == v1:
                    tri_n[t, _slot_of(tri_v, t, v2)] = new_tris[j]
            if tri_v[t, 2] != ghost:
                last_real = t
    return tri_v, tri_n, n_slots, STATUS_OK
