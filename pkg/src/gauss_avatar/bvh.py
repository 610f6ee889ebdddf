"""Bounding-volume hierarchy for exact closest-point queries on triangle meshes."""

from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np

LEAF_SIZE = 4


@nb.njit(cache=True, inline="always")
def _closest_on_triangle(p, a, b, c):
    """Closest point barycentrics (Ericson, Real-Time Collision Detection 5.1.5)."""
    abx, aby, abz = b[0] - a[0], b[1] - a[1], b[2] - a[2]
    acx, acy, acz = c[0] - a[0], c[1] - a[1], c[2] - a[2]
    apx, apy, apz = p[0] - a[0], p[1] - a[1], p[2] - a[2]
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return 1.0, 0.0, 0.0
    bpx, bpy, bpz = p[0] - b[0], p[1] - b[1], p[2] - b[2]
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return 0.0, 1.0, 0.0
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        return 1.0 - v, v, 0.0
    cpx, cpy, cpz = p[0] - c[0], p[1] - c[1], p[2] - c[2]
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return 0.0, 0.0, 1.0
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return 1.0 - w, 0.0, w
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return 0.0, 1.0 - w, w
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return 1.0 - v - w, v, w


@nb.njit(cache=True, inline="always")
def _dist2(p, a, b, c, u, v, w):
    qx = u * a[0] + v * b[0] + w * c[0]
    qy = u * a[1] + v * b[1] + w * c[1]
    qz = u * a[2] + v * b[2] + w * c[2]
    dx, dy, dz = p[0] - qx, p[1] - qy, p[2] - qz
    return dx * dx + dy * dy + dz * dz


@nb.njit(cache=True, inline="always")
def _box_dist2(p, lo, hi):
    s = 0.0
    for k in range(3):
        if p[k] < lo[k]:
            d = lo[k] - p[k]
            s += d * d
        elif p[k] > hi[k]:
            d = p[k] - hi[k]
            s += d * d
    return s


@nb.njit(cache=True)
def _query_bvh(points, tri, node_lo, node_hi, left, right, start, count, prims, out_face, out_bary, out_d):
    stack = np.empty(128, dtype=np.int64)
    for qi in range(points.shape[0]):
        p = points[qi]
        best = np.inf
        best_f = -1
        bu, bv, bw = 1.0, 0.0, 0.0
        top = 0
        stack[0] = 0
        top = 1
        while top > 0:
            top -= 1
            node = stack[top]
            if _box_dist2(p, node_lo[node], node_hi[node]) > best:
                continue
            if count[node] > 0:
                for s in range(start[node], start[node] + count[node]):
                    f = prims[s]
                    u, v, w = _closest_on_triangle(p, tri[f, 0], tri[f, 1], tri[f, 2])
                    d = _dist2(p, tri[f, 0], tri[f, 1], tri[f, 2], u, v, w)
                    if d < best or (d == best and f < best_f):
                        best = d
                        best_f = f
                        bu, bv, bw = u, v, w
            else:
                l, r = left[node], right[node]
                dl = _box_dist2(p, node_lo[l], node_hi[l])
                dr = _box_dist2(p, node_lo[r], node_hi[r])
                # push the farther child first so the nearer one is popped next
                if dl <= dr:
                    stack[top] = r
                    stack[top + 1] = l
                else:
                    stack[top] = l
                    stack[top + 1] = r
                top += 2
        out_face[qi] = best_f
        out_bary[qi, 0] = bu
        out_bary[qi, 1] = bv
        out_bary[qi, 2] = bw
        out_d[qi] = np.sqrt(best)


@nb.njit(cache=True)
def _query_brute(points, tri, out_face, out_bary, out_d):
    for qi in range(points.shape[0]):
        p = points[qi]
        best = np.inf
        best_f = -1
        bu, bv, bw = 1.0, 0.0, 0.0
        for f in range(tri.shape[0]):
            u, v, w = _closest_on_triangle(p, tri[f, 0], tri[f, 1], tri[f, 2])
            d = _dist2(p, tri[f, 0], tri[f, 1], tri[f, 2], u, v, w)
            if d < best:
                best = d
                best_f = f
                bu, bv, bw = u, v, w
        out_face[qi] = best_f
        out_bary[qi, 0] = bu
        out_bary[qi, 1] = bv
        out_bary[qi, 2] = bw
        out_d[qi] = np.sqrt(best)


@dataclass
class TriangleBVH:
    triangles: np.ndarray  # (F, 3, 3)
    node_lo: np.ndarray
    node_hi: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    count: np.ndarray  # > 0 for leaves
    prims: np.ndarray

    @classmethod
    def build(cls, triangles: np.ndarray, leaf_size: int = LEAF_SIZE) -> "TriangleBVH":
        tri = np.ascontiguousarray(triangles, dtype=np.float64)
        F = tri.shape[0]
        if F == 0:
            raise ValueError("cannot build a BVH over an empty mesh")
        tlo, thi = tri.min(axis=1), tri.max(axis=1)
        cent = tri.mean(axis=1)
        prims = np.arange(F, dtype=np.int64)
        lo, hi, left, right, start, count = [], [], [], [], [], []

        def new_node(s: int, e: int) -> int:
            idx = prims[s:e]
            lo.append(tlo[idx].min(axis=0))
            hi.append(thi[idx].max(axis=0))
            left.append(-1)
            right.append(-1)
            start.append(s)
            count.append(e - s)
            return len(lo) - 1

        root = new_node(0, F)
        work = [(root, 0, F)]
        while work:
            node, s, e = work.pop()
            if e - s <= leaf_size:
                continue
            idx = prims[s:e]
            c = cent[idx]
            axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
            order = np.argsort(c[:, axis], kind="stable")
            prims[s:e] = idx[order]
            mid = (s + e) // 2
            l_node = new_node(s, mid)
            r_node = new_node(mid, e)
            left[node], right[node], count[node] = l_node, r_node, 0
            work.append((l_node, s, mid))
            work.append((r_node, mid, e))

        return cls(
            tri,
            np.array(lo),
            np.array(hi),
            np.array(left, dtype=np.int64),
            np.array(right, dtype=np.int64),
            np.array(start, dtype=np.int64),
            np.array(count, dtype=np.int64),
            prims,
        )

    def query(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Closest (face, barycentric, distance) per point; ties go to the lowest face."""
        pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        n = pts.shape[0]
        face = np.empty(n, dtype=np.int64)
        bary = np.empty((n, 3))
        dist = np.empty(n)
        _query_bvh(
            pts, self.triangles, self.node_lo, self.node_hi, self.left, self.right,
            self.start, self.count, self.prims, face, bary, dist,
        )
        return face, bary, dist


def closest_points_brute_force(triangles: np.ndarray, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Linear scan over all triangles; reference path for the BVH."""
    tri = np.ascontiguousarray(triangles, dtype=np.float64)
    pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    n = pts.shape[0]
    face = np.empty(n, dtype=np.int64)
    bary = np.empty((n, 3))
    dist = np.empty(n)
    _query_brute(pts, tri, face, bary, dist)
    return face, bary, dist
