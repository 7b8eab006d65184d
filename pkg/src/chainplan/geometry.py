"""Signed-distance queries between convex collision primitives.

Sphere/capsule pairs and anything-vs-box where one side reduces to a point
or segment have exact closed forms; box-box and penetrating capsule-box fall
back to GJK with EPA for penetration depth. All queries return witness
points and a unit normal (from b toward a) so the optimizer can build
configuration-space gradients.

These kernels sit in the planner's innermost loop, so they work on cached
world-frame data (endpoints, rotation matrices) and mostly scalar math.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import sqrt

import numpy as np

from .model import BOX, CAPSULE, SPHERE, Shape
from .transforms import Transform, quat_to_matrix

__all__ = [
    "PosedShape", "DistanceResult", "CollisionPairSet", "hinge",
    "signed_distance", "signed_distance_gjk", "build_collision_pairs",
    "distance_gradient", "shape_aabb", "support_point",
]


def hinge(x):
    """One-sided penalty |x|+ = max(x, 0)."""
    return np.maximum(x, 0.0)


class PosedShape:
    """A collision primitive at a world pose, with cached derived data."""

    __slots__ = ("shape", "pose", "link", "name", "_prep", "_aabb")

    def __init__(self, shape: Shape, pose: Transform, link=None, name=""):
        self.shape = shape
        self.pose = pose
        self.link = link
        self.name = name
        self._prep = None
        self._aabb = None

    @property
    def prep(self):
        if self._prep is None:
            kind = self.shape.kind
            if kind == SPHERE:
                self._prep = (self.pose.trans, self.shape.params[0])
            elif kind == CAPSULE:
                r, hl = self.shape.params
                R = quat_to_matrix(self.pose.rot)
                z = hl * R[:, 2]
                c = self.pose.trans
                self._prep = (c - z, c + z, r)
            else:
                self._prep = (self.pose.trans, quat_to_matrix(self.pose.rot),
                              np.asarray(self.shape.params))
        return self._prep

    def aabb(self):
        """World axis-aligned bounds (lo, hi), cached."""
        if self._aabb is None:
            kind = self.shape.kind
            if kind == SPHERE:
                c, r = self.prep
                self._aabb = (c - r, c + r)
            elif kind == CAPSULE:
                p0, p1, r = self.prep
                self._aabb = (np.minimum(p0, p1) - r, np.maximum(p0, p1) + r)
            else:
                c, R, h = self.prep
                ext = np.abs(R) @ h
                self._aabb = (c - ext, c + ext)
        return self._aabb

    def __repr__(self):
        return f"PosedShape({self.shape.kind}, name={self.name!r})"


def shape_aabb(ps: PosedShape, margin=0.0):
    lo, hi = ps.aabb()
    return lo - margin, hi + margin


def aabb_overlap(a: PosedShape, b: PosedShape, margin=0.0) -> bool:
    alo, ahi = a.aabb()
    blo, bhi = b.aabb()
    return bool(np.all(ahi + margin >= blo) and np.all(bhi + margin >= alo))


@dataclass
class DistanceResult:
    distance: float
    witness_a: np.ndarray
    witness_b: np.ndarray
    normal: np.ndarray    # unit vector from b toward a


# ---------------------------------------------------------------------------
# scalar helpers

def _point_segment(p, a, b):
    dx, dy, dz = b[0] - a[0], b[1] - a[1], b[2] - a[2]
    dd = dx * dx + dy * dy + dz * dz
    if dd < 1e-16:
        return a, 0.0
    s = ((p[0] - a[0]) * dx + (p[1] - a[1]) * dy + (p[2] - a[2]) * dz) / dd
    s = 0.0 if s < 0.0 else (1.0 if s > 1.0 else s)
    return np.array([a[0] + s * dx, a[1] + s * dy, a[2] + s * dz]), s


def _segment_segment(p1, q1, p2, q2):
    """Closest points between two segments (Ericson, RTCD 5.1.9)."""
    d1 = q1 - p1
    d2 = q2 - p2
    r = p1 - p2
    a = float(d1 @ d1)
    e = float(d2 @ d2)
    f = float(d2 @ r)
    if a < 1e-16 and e < 1e-16:
        return p1, p2
    if a < 1e-16:
        t = min(max(f / e, 0.0), 1.0)
        return p1, p2 + t * d2
    c = float(d1 @ r)
    if e < 1e-16:
        s = min(max(-c / a, 0.0), 1.0)
        return p1 + s * d1, p2
    b = float(d1 @ d2)
    denom = a * e - b * b
    s = min(max((b * f - c * e) / denom, 0.0), 1.0) if denom > 1e-16 else 0.0
    t = (b * s + f) / e
    if t < 0.0:
        t = 0.0
        s = min(max(-c / a, 0.0), 1.0)
    elif t > 1.0:
        t = 1.0
        s = min(max((b - c) / a, 0.0), 1.0)
    return p1 + s * d1, p2 + t * d2


def _point_box_local(p, h):
    """Signed distance of a point to a box (box frame): (dist, witness, normal)."""
    cx = min(max(p[0], -h[0]), h[0])
    cy = min(max(p[1], -h[1]), h[1])
    cz = min(max(p[2], -h[2]), h[2])
    dx, dy, dz = p[0] - cx, p[1] - cy, p[2] - cz
    d2 = dx * dx + dy * dy + dz * dz
    if d2 > 1e-30:
        dist = sqrt(d2)
        return dist, np.array([cx, cy, cz]), np.array([dx / dist, dy / dist, dz / dist])
    # inside: push out through the nearest face
    best_axis, best_margin, sign = 0, np.inf, 1.0
    for i in range(3):
        m = h[i] - abs(p[i])
        if m < best_margin:
            best_margin, best_axis = m, i
            sign = 1.0 if p[i] >= 0.0 else -1.0
    w = np.array([p[0], p[1], p[2]], dtype=float)
    w[best_axis] = sign * h[best_axis]
    n = np.zeros(3)
    n[best_axis] = sign
    return -best_margin, w, n


def _segment_box_local(a, b, h):
    """Exact min distance from segment [a,b] to a box, all in the box frame.

    The squared distance is piecewise quadratic in the segment parameter;
    minimize per interval between face-plane crossings. Returns
    (dist, s, box_point); dist = 0 means the core intersects.
    """
    d = (b[0] - a[0], b[1] - a[1], b[2] - a[2])
    cuts = [0.0, 1.0]
    for i in range(3):
        if abs(d[i]) > 1e-14:
            for lim in (h[i], -h[i]):
                s = (lim - a[i]) / d[i]
                if 0.0 < s < 1.0:
                    cuts.append(s)
    cuts.sort()

    def sqd(s):
        tot = 0.0
        for i in range(3):
            e = abs(a[i] + s * d[i]) - h[i]
            if e > 0.0:
                tot += e * e
        return tot

    best_f, best_s = np.inf, 0.0
    for k in range(len(cuts) - 1):
        lo, hi_ = cuts[k], cuts[k + 1]
        mid = 0.5 * (lo + hi_)
        A = B = 0.0
        outside = False
        for i in range(3):
            p = a[i] + mid * d[i]
            if p > h[i]:
                sg = 1.0
            elif p < -h[i]:
                sg = -1.0
            else:
                continue
            outside = True
            A += d[i] * d[i]
            B += 2.0 * d[i] * (a[i] - sg * h[i])
        if not outside:
            return 0.0, mid, np.array([min(max(a[i] + mid * d[i], -h[i]), h[i]) for i in range(3)])
        cands = (lo, hi_) if A < 1e-16 else (min(max(-B / (2.0 * A), lo), hi_), lo, hi_)
        for s in cands:
            f = sqd(s)
            if f < best_f:
                best_f, best_s = f, s
    s = best_s
    p = [a[i] + s * d[i] for i in range(3)]
    w = np.array([min(max(p[i], -h[i]), h[i]) for i in range(3)])
    return sqrt(best_f), s, w


# ---------------------------------------------------------------------------
# closed-form pair kernels

def _dir(dv):
    n = sqrt(dv[0] * dv[0] + dv[1] * dv[1] + dv[2] * dv[2])
    if n < 1e-12:
        return np.array([1.0, 0.0, 0.0]), 0.0
    return dv / n, n


def _sphere_sphere(a, b):
    ca, ra = a.prep
    cb, rb = b.prep
    n, dist_c = _dir(ca - cb)
    return DistanceResult(dist_c - ra - rb, ca - ra * n, cb + rb * n, n)


def _capsule_capsule(a, b):
    pa, qa, ra = a.prep
    pb, qb, rb = b.prep
    wa, wb = _segment_segment(pa, qa, pb, qb)
    n, dist_c = _dir(wa - wb)
    return DistanceResult(dist_c - ra - rb, wa - ra * n, wb + rb * n, n)


def _sphere_capsule(a, b):
    ca, ra = a.prep
    pb, qb, rb = b.prep
    wb, _ = _point_segment(ca, pb, qb)
    n, dist_c = _dir(ca - wb)
    return DistanceResult(dist_c - ra - rb, ca - ra * n, wb + rb * n, n)


def _sphere_box(a, b):
    ca, ra = a.prep
    cb, R, h = b.prep
    pl = R.T @ (ca - cb)
    dist_c, wl, nl = _point_box_local(pl, h)
    n = R @ nl
    wb = R @ wl + cb
    return DistanceResult(dist_c - ra, ca - ra * n, wb, n)


def _capsule_box(a, b):
    pa, qa, ra = a.prep
    cb, R, h = b.prep
    al = R.T @ (pa - cb)
    bl = R.T @ (qa - cb)
    dist_c, s, wl = _segment_box_local(al, bl, h)
    if dist_c > 1e-12:
        wa_core = pa + s * (qa - pa)
        wb = R @ wl + cb
        n, _ = _dir(wa_core - wb)
        return DistanceResult(dist_c - ra, wa_core - ra * n, wb, n)
    # core pierces the box: EPA on (segment, box)
    res = signed_distance_gjk(PosedShape(Shape(CAPSULE, (1e-12, a.shape.params[1])), a.pose), b)
    return DistanceResult(res.distance - ra, res.witness_a - ra * res.normal,
                          res.witness_b, res.normal)


# ---------------------------------------------------------------------------
# GJK / EPA on support functions

def support_point(ps: PosedShape, direction):
    """Farthest point of the posed shape along a world direction."""
    d = np.asarray(direction, dtype=float)
    n = sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2])
    d = d / n if n > 1e-12 else np.array([1.0, 0.0, 0.0])
    kind = ps.shape.kind
    if kind == SPHERE:
        c, r = ps.prep
        return c + r * d
    if kind == CAPSULE:
        p0, p1, r = ps.prep
        end = p1 if float(d @ (p1 - p0)) >= 0.0 else p0
        return end + r * d
    c, R, h = ps.prep
    dl = R.T @ d
    return c + R @ np.where(dl >= 0.0, h, -h)


def _closest_simplex(simplex):
    """Closest point to the origin on a 1-4 point simplex.

    Returns (point, lambdas, kept_indices, contains_origin).
    """
    pts = [s[0] for s in simplex]
    n = len(pts)
    if n == 1:
        return pts[0], [1.0], [0], False
    if n == 2:
        a, b = pts
        ab = b - a
        denom = float(ab @ ab)
        t = 0.0 if denom < 1e-18 else min(max(-float(a @ ab) / denom, 0.0), 1.0)
        if t <= 0.0:
            return a, [1.0], [0], False
        if t >= 1.0:
            return b, [1.0], [1], False
        return a + t * ab, [1.0 - t, t], [0, 1], False
    if n == 3:
        pt, lam, kept, _ = _closest_triangle(pts, [0, 1, 2])
        return pt, lam, kept, False
    return _closest_tetra(pts)


def _closest_triangle(pts, idx):
    """Closest point to origin on triangle pts[idx]; Ericson's region tests."""
    a, b, c = pts[idx[0]], pts[idx[1]], pts[idx[2]]
    ab, ac = b - a, c - a
    ap = -a
    d1, d2 = float(ab @ ap), float(ac @ ap)
    if d1 <= 0.0 and d2 <= 0.0:
        return a, [1.0], [idx[0]], False
    bp = -b
    d3, d4 = float(ab @ bp), float(ac @ bp)
    if d3 >= 0.0 and d4 <= d3:
        return b, [1.0], [idx[1]], False
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        return a + v * ab, [1.0 - v, v], [idx[0], idx[1]], False
    cp = -c
    d5, d6 = float(ab @ cp), float(ac @ cp)
    if d6 >= 0.0 and d5 <= d6:
        return c, [1.0], [idx[2]], False
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return a + w * ac, [1.0 - w, w], [idx[0], idx[2]], False
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return b + w * (c - b), [1.0 - w, w], [idx[1], idx[2]], False
    denom = va + vb + vc
    v = vb / denom
    w = vc / denom
    return a + v * ab + w * ac, [1.0 - v - w, v, w], list(idx), False


def _closest_tetra(pts):
    a, b, c, d = pts

    def signed(p0, p1, p2, p3):
        return float(np.dot(np.cross(p1 - p0, p2 - p0), p3 - p0))

    best = None
    faces = ((0, 1, 2, 3), (0, 1, 3, 2), (0, 2, 3, 1), (1, 2, 3, 0))
    inside = True
    for f in faces:
        p0, p1, p2, pref = pts[f[0]], pts[f[1]], pts[f[2]], pts[f[3]]
        side_o = signed(p0, p1, p2, np.zeros(3))
        side_r = signed(p0, p1, p2, pref)
        if side_o * side_r < 0.0 or abs(side_r) < 1e-18:
            inside = False
            pt, lam, kept, _ = _closest_triangle(pts, [f[0], f[1], f[2]])
            d2 = float(pt @ pt)
            if best is None or d2 < best[0]:
                best = (d2, pt, lam, kept)
    if inside:
        return np.zeros(3), [0.25] * 4, [0, 1, 2, 3], True
    _, pt, lam, kept = best
    return pt, lam, kept, False


def signed_distance_gjk(a: PosedShape, b: PosedShape, max_iter=128, tol=1e-12) -> DistanceResult:
    """Generic GJK distance with witness points; EPA for penetration depth."""
    d0 = b.pose.trans - a.pose.trans
    if float(d0 @ d0) < 1e-18:
        d0 = np.array([1.0, 0.0, 0.0])

    def support(direction):
        sa = support_point(a, direction)
        sb = support_point(b, -np.asarray(direction))
        return sa - sb, sa, sb

    m, sa, sb = support(-d0)
    simplex = [(m, sa, sb)]
    v = m
    dist_prev = np.inf
    for _ in range(max_iter):
        vn = sqrt(float(v @ v))
        if vn < 1e-11:
            return _epa(a, b, simplex, support)
        w, sa, sb = support(-v)
        # converged when the new support gains nothing (or we stall)
        if vn * vn - float(v @ w) <= tol * max(1.0, vn * vn) or vn >= dist_prev - 1e-14:
            break
        dist_prev = vn
        simplex.append((w, sa, sb))
        v, _, kept, contains = _closest_simplex(simplex)
        simplex = [simplex[i] for i in kept]
        if contains:
            return _epa(a, b, simplex, support)
    v, lam, kept, contains = _closest_simplex(simplex)
    if contains:
        return _epa(a, b, simplex, support)
    simplex = [simplex[i] for i in kept]
    wa = sum(l * s[1] for l, s in zip(lam, simplex))
    wb = sum(l * s[2] for l, s in zip(lam, simplex))
    dist = sqrt(float(v @ v))
    n = (wa - wb) / dist if dist > 1e-12 else np.array([1.0, 0.0, 0.0])
    return DistanceResult(dist, wa, wb, n)


def _epa(a, b, simplex, support, max_iter=128, tol=1e-10):
    """Expanding-polytope penetration depth, seeded from a GJK simplex."""
    pts = [list(s) for s in simplex]
    dirs = [np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]),
            np.array([0.0, 0.0, 1.0]), np.array([-1.0, 0.0, 0.0]),
            np.array([0.0, -1.0, 0.0]), np.array([0.0, 0.0, -1.0]),
            np.array([1.0, 1.0, 1.0]) / sqrt(3.0), np.array([-1.0, 1.0, -1.0]) / sqrt(3.0)]
    di = 0
    while len(pts) < 4 and di < len(dirs):
        m, sa, sb = support(dirs[di])
        di += 1
        if all(float((m - p[0]) @ (m - p[0])) > 1e-20 for p in pts):
            pts.append([m, sa, sb])
    if len(pts) < 4:
        c = pts[0]
        return DistanceResult(0.0, c[1], c[2], np.array([1.0, 0.0, 0.0]))
    n0 = np.cross(pts[1][0] - pts[0][0], pts[2][0] - pts[0][0])
    if float(n0 @ (pts[3][0] - pts[0][0])) > 0.0:
        pts[1], pts[2] = pts[2], pts[1]
    faces = [(0, 1, 2), (0, 3, 1), (0, 2, 3), (1, 3, 2)]
    # orient faces outward from the seed centroid; the growing polytope stays
    # star-shaped around it even when the origin sits on a seed face
    centroid = 0.25 * (pts[0][0] + pts[1][0] + pts[2][0] + pts[3][0])

    def face_info(f):
        p0, p1, p2 = pts[f[0]][0], pts[f[1]][0], pts[f[2]][0]
        n = np.cross(p1 - p0, p2 - p0)
        ln = float(np.linalg.norm(n))
        if ln < 1e-18:
            return None, np.inf
        n = n / ln
        if float(n @ (p0 - centroid)) < 0.0:
            n = -n
        return n, float(n @ p0)

    for _ in range(max_iter):
        infos = [face_info(f) for f in faces]
        order = [i for i, (n, d) in enumerate(infos) if n is not None]
        if not order:
            break
        best = min(order, key=lambda i: infos[i][1])
        n, d = infos[best]
        m, sa, sb = support(n)
        gain = float(n @ m) - d
        if gain < tol:
            f = faces[best]
            pt, lam, kept, _ = _closest_triangle([pts[f[0]][0], pts[f[1]][0], pts[f[2]][0]],
                                                 [0, 1, 2])
            tri = [pts[f[i]] for i in kept]
            wa = sum(l * t[1] for l, t in zip(lam, tri))
            wb = sum(l * t[2] for l, t in zip(lam, tri))
            return DistanceResult(-max(d, 0.0), wa, wb, n)
        pts.append([m, sa, sb])
        ni = len(pts) - 1
        # drop faces visible from m, patch the horizon with new triangles
        visible = [i for i, f in enumerate(faces)
                   if infos[i][0] is not None and float(infos[i][0] @ (m - pts[f[0]][0])) > 1e-12]
        if not visible:
            f = faces[best]
            return DistanceResult(-max(d, 0.0), pts[f[0]][1], pts[f[0]][2], n)
        edge_uses = {}
        for i in visible:
            f = faces[i]
            for e in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
                key = frozenset(e)
                if key in edge_uses:
                    edge_uses[key] = None      # interior edge, shared twice
                else:
                    edge_uses[key] = e
        visible_set = set(visible)
        faces = [f for i, f in enumerate(faces) if i not in visible_set]
        for e in edge_uses.values():
            if e is not None:
                faces.append((e[0], e[1], ni))
    infos = [face_info(f) for f in faces]
    order = [i for i, (n, d) in enumerate(infos) if n is not None]
    best = min(order, key=lambda i: infos[i][1])
    n, d = infos[best]
    f = faces[best]
    return DistanceResult(-max(d, 0.0), pts[f[0]][1], pts[f[0]][2], n)


_CLOSED_FORMS = {
    (SPHERE, SPHERE): _sphere_sphere,
    (CAPSULE, CAPSULE): _capsule_capsule,
    (SPHERE, CAPSULE): _sphere_capsule,
    (SPHERE, BOX): _sphere_box,
    (CAPSULE, BOX): _capsule_box,
}


def signed_distance(a: PosedShape, b: PosedShape) -> DistanceResult:
    """Signed distance between two posed primitives (negative = penetration)."""
    key = (a.shape.kind, b.shape.kind)
    fn = _CLOSED_FORMS.get(key)
    if fn is not None:
        return fn(a, b)
    fn = _CLOSED_FORMS.get((key[1], key[0]))
    if fn is not None:
        r = fn(b, a)
        return DistanceResult(r.distance, r.witness_b, r.witness_a, -r.normal)
    return signed_distance_gjk(a, b)


# ---------------------------------------------------------------------------
# pair bookkeeping and gradients

@dataclass
class CollisionPairSet:
    """Pairs eligible for checking: (link, link) and (link, env index)."""

    link_pairs: list = field(default_factory=list)
    env_pairs: list = field(default_factory=list)   # (link, env_index)


def build_collision_pairs(tree, environment, allowed=()) -> CollisionPairSet:
    """Enumerate checkable pairs, skipping joint-adjacent links and
    explicitly allowed combinations.

    ``allowed`` holds 2-tuples of names; environment shapes are matched by
    their PosedShape.name.
    """
    allowed = {frozenset(p) for p in allowed}
    carriers = [l.name for l in tree.links.values() if l.collision_geoms]
    adjacent = {frozenset((j.parent, j.child)) for j in tree.joints.values()}
    pairs = CollisionPairSet()
    for i in range(len(carriers)):
        for k in range(i + 1, len(carriers)):
            key = frozenset((carriers[i], carriers[k]))
            if key in adjacent or key in allowed:
                continue
            pairs.link_pairs.append((carriers[i], carriers[k]))
    for link in carriers:
        for ei, env in enumerate(environment):
            if frozenset((link, env.name)) in allowed:
                continue
            pairs.env_pairs.append((link, ei))
    return pairs


def link_shapes_world(tree, frames, link) -> list:
    """Posed collision shapes of a link given its world frame."""
    world = frames[link]
    return [PosedShape(s, world.compose(t), link=link, name=f"{link}[{i}]")
            for i, (s, t) in enumerate(tree.links[link].collision_geoms)]


def pair_distance(shapes_a, shapes_b) -> DistanceResult:
    """Min signed distance over the geoms of two shape sets."""
    best = None
    for sa in shapes_a:
        for sb in shapes_b:
            r = signed_distance(sa, sb)
            if best is None or r.distance < best.distance:
                best = r
    return best


def _world_to_link(frame: Transform, p):
    R = quat_to_matrix(frame.rot)
    return R.T @ (p - frame.trans)


def distance_gradient(tree, q, pair_result: DistanceResult, link_a, link_b,
                      frames=None) -> np.ndarray:
    """d(signed distance)/dq via witness-point Jacobians.

    Either link may be None (environment shape, zero contribution). Valid
    away from witness discontinuities; uses the contact normal b->a.
    """
    from .kinematics import chain_jacobian, forward_kinematics
    if frames is None:
        frames = forward_kinematics(tree, q)
    g = np.zeros(tree.dof)
    n = pair_result.normal
    if link_a is not None:
        ref = _world_to_link(frames[link_a], pair_result.witness_a)
        g += n @ chain_jacobian(tree, q, link_a, ref, frames=frames)[:3]
    if link_b is not None:
        ref = _world_to_link(frames[link_b], pair_result.witness_b)
        g -= n @ chain_jacobian(tree, q, link_b, ref, frames=frames)[:3]
    return g
