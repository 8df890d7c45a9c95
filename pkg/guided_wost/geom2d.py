"""Bounding volume hierarchies over boundary segments and the queries a walk needs.

All queries are batched: points, origins and directions are ``(Q, 2)`` arrays and a
single 2-vector is treated as a batch of one. Traversal is breadth-first over
``(query, node)`` pairs so that every level of the tree is one set of numpy operations.
"""

from dataclasses import dataclass
import typing as t
import numpy as np
from .scene import Kind
from .errors import GeometryError


LEAF_SIZE = 4
DEGENERATE_TOL = 1e-12
ALL_KINDS = frozenset((Kind.DIRICHLET, Kind.NEUMANN))


def cross(u, v):
    return u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]


def dot(u, v):
    return np.einsum("...i,...i->...", u, v)


def segment_closest_points(p, a, b):
    """Closest points on segments ``a``-``b`` to ``p`` and their squared distances."""
    e = b - a
    denom = dot(e, e)
    s = np.clip(dot(p - a, e) / denom, 0.0, 1.0)
    q = a + s[..., None] * e
    diff = p - q
    return q, dot(diff, diff)


def ray_segment_hits(o, d, a, b):
    """Ray parameter ``t`` at which ``o + t d`` crosses segment ``a``-``b``; NaN on a miss.

    Parallel segments (including collinear ones) never count as hit.
    """
    e = b - a
    denom = cross(d, e)
    ao = a - o
    with np.errstate(divide="ignore", invalid="ignore"):
        t_hit = cross(ao, e) / denom
        s = cross(ao, d) / denom
    ok = (np.abs(denom) > DEGENERATE_TOL * np.sqrt(dot(e, e))) & (s >= 0.0) & (s <= 1.0)
    return np.where(ok, t_hit, np.nan)


def segment_normals(a, b):
    e = b - a
    n = np.stack([-e[..., 1], e[..., 0]], axis=-1)
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def silhouette_mask(x, v, count, w1, w2, normal=None):
    """Whether vertex ``v`` is a Neumann silhouette as seen from ``x``.

    ``w1`` and ``w2`` are the far ends of the two Neumann segments meeting at ``v`` and
    ``count`` the number of incident Neumann segments. ``normal`` is the walk-side normal
    when ``x`` rests on a Neumann segment (zero rows mean none).
    """
    x, v, w1, w2 = (np.asarray(a, dtype=float) for a in (x, v, w1, w2))
    d = v - x
    dn = np.linalg.norm(d, axis=-1)
    e1, e2 = w1 - v, w2 - v
    n1, n2 = np.linalg.norm(e1, axis=-1), np.linalg.norm(e2, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        sa = np.where(dn > 0, cross(d, e1) / (dn * n1), 0.0)
        sb = np.where(dn > 0, cross(d, e2) / (dn * n2), 0.0)
    sa = np.nan_to_num(sa)
    sb = np.nan_to_num(sb)
    deg_a = np.abs(sa) <= DEGENERATE_TOL
    deg_b = np.abs(sb) <= DEGENERATE_TOL

    if normal is None:
        has_normal = np.zeros(dn.shape, dtype=bool)
        normal = np.zeros_like(d)
    else:
        normal = np.broadcast_to(np.asarray(normal, dtype=float), d.shape)
        has_normal = np.any(normal != 0, axis=-1)

    # x on the line of one incident segment: the walk-side rule applies only when x
    # lies on that segment's side of v
    along = np.where(deg_a[..., None], e1, e2)
    other = np.where(deg_a[..., None], e2, e1)
    other_len = np.where(deg_a, n2, n1)
    on_segment_side = dot(along, -d) > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        bends_away = dot(other, normal) / other_len < -DEGENERATE_TOL
    one_side = np.where(has_normal & on_segment_side, bends_away, True)

    sil = np.where(
        deg_a & deg_b,
        ~has_normal,
        np.where(deg_a | deg_b, one_side, sa * sb > 0),
    )
    return sil | (count != 2) | (dn <= DEGENERATE_TOL)


@dataclass
class Bvh:
    lo: np.ndarray
    hi: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    count: np.ndarray
    order: np.ndarray

    @property
    def size(self):
        return self.lo.shape[0]

    def is_leaf(self, nodes):
        return self.left[nodes] < 0

    def leaf_segments(self, qs, nodes):
        """Expand ``(query, leaf)`` pairs into ``(query, segment)`` pairs."""
        counts = self.count[nodes]
        total = int(counts.sum())
        qq = np.repeat(qs, counts)
        first = np.repeat(self.start[nodes], counts)
        offsets = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
        return qq, self.order[first + offsets]


def build_bvh(ids, a, b, leaf_size=LEAF_SIZE):
    """Median split over segment centroids along the wider centroid axis."""
    ids = np.asarray(ids, dtype=np.int64)
    seg_lo = np.minimum(a[ids], b[ids])
    seg_hi = np.maximum(a[ids], b[ids])
    centroid = 0.5 * (a[ids] + b[ids])

    lo, hi, left, right, start, count = [], [], [], [], [], []
    order = np.arange(ids.size)

    def node(begin, end):
        index = len(lo)
        idx = order[begin:end]
        lo.append(seg_lo[idx].min(axis=0))
        hi.append(seg_hi[idx].max(axis=0))
        left.append(-1)
        right.append(-1)
        start.append(begin)
        count.append(end - begin)
        if end - begin <= leaf_size:
            return index
        c = centroid[idx]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        order[begin:end] = idx[np.argsort(c[:, axis], kind="stable")]
        mid = (begin + end) // 2
        left[index] = node(begin, mid)
        right[index] = node(mid, end)
        count[index] = 0
        return index

    node(0, ids.size)
    return Bvh(
        lo=np.array(lo, dtype=float),
        hi=np.array(hi, dtype=float),
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        start=np.array(start, dtype=np.int64),
        count=np.array(count, dtype=np.int64),
        order=ids[order],
    )


@dataclass
class Accel:
    a: np.ndarray
    b: np.ndarray
    normals: np.ndarray
    is_neumann: np.ndarray
    trees: t.Dict[frozenset, Bvh]
    vertices: np.ndarray
    vertex_count: np.ndarray
    vertex_neighbors: np.ndarray
    segment_vertices: np.ndarray
    t_epsilon: float

    def tree(self, kinds):
        return self.trees.get(normalize_kinds(kinds))

    @property
    def root_box(self):
        tree = self.trees[ALL_KINDS]
        return tree.lo[0], tree.hi[0]


def normalize_kinds(kinds):
    if isinstance(kinds, (str, Kind)):
        kinds = [kinds]
    kinds = frozenset(Kind(k) for k in kinds)
    if not kinds:
        raise GeometryError("at least one segment kind is required")
    return kinds


def _neumann_adjacency(a, b, is_neumann):
    ids = np.flatnonzero(is_neumann)
    segment_vertices = np.full((a.shape[0], 2), -1, dtype=np.int64)
    if not ids.size:
        return np.zeros((0, 2)), np.zeros(0, np.int64), np.zeros((0, 2, 2)), segment_vertices
    ends = np.concatenate([a[ids], b[ids]])
    vertices, inverse = np.unique(ends, axis=0, return_inverse=True)
    inverse = inverse.reshape(2, -1)
    segment_vertices[ids, 0] = inverse[0]
    segment_vertices[ids, 1] = inverse[1]

    vertex_count = np.zeros(vertices.shape[0], dtype=np.int64)
    neighbors = np.repeat(vertices[:, None, :], 2, axis=1)
    for k, seg in enumerate(ids):
        for end, far in ((0, b[seg]), (1, a[seg])):
            vid = inverse[end, k]
            if vertex_count[vid] < 2:
                neighbors[vid, vertex_count[vid]] = far
            vertex_count[vid] += 1
    return vertices, vertex_count, neighbors, segment_vertices


def build_accel(scene, t_epsilon=None):
    if not scene.segments:
        raise GeometryError("scene has no boundary segments")
    a, b, is_neumann = scene.a, scene.b, scene.is_neumann
    trees = {ALL_KINDS: build_bvh(np.arange(a.shape[0]), a, b)}
    for kind, mask in ((Kind.DIRICHLET, ~is_neumann), (Kind.NEUMANN, is_neumann)):
        if mask.any():
            trees[frozenset((kind,))] = build_bvh(np.flatnonzero(mask), a, b)
    vertices, vertex_count, neighbors, segment_vertices = _neumann_adjacency(a, b, is_neumann)
    return Accel(
        a=a,
        b=b,
        normals=segment_normals(a, b),
        is_neumann=is_neumann,
        trees=trees,
        vertices=vertices,
        vertex_count=vertex_count,
        vertex_neighbors=neighbors,
        segment_vertices=segment_vertices,
        t_epsilon=1e-6 * scene.diagonal if t_epsilon is None else t_epsilon,
    )


def _as_batch(x):
    x = np.asarray(x, dtype=float)
    return np.atleast_2d(x), x.ndim == 1


def _box_dist2(p, lo, hi):
    d = np.maximum(np.maximum(lo - p, p - hi), 0.0)
    return dot(d, d)


def _update_min(qs, values, best, payloads, current):
    """Keep, per query, the smallest candidate value if it beats ``best``."""
    if not qs.size:
        return
    order = np.lexsort((values, qs))
    qs, values = qs[order], values[order]
    first = np.ones(qs.size, dtype=bool)
    first[1:] = qs[1:] != qs[:-1]
    qs, values = qs[first], values[first]
    better = values < best[qs]
    qs = qs[better]
    best[qs] = values[better]
    for payload, store in zip(payloads, current):
        store[qs] = payload[order][first][better]


def _traverse(tree, qs, nodes, lower_bound, best, visit_leaves):
    while qs.size:
        keep = lower_bound(qs, nodes) <= best[qs]
        qs, nodes = qs[keep], nodes[keep]
        leaf = tree.is_leaf(nodes)
        if leaf.any():
            visit_leaves(*tree.leaf_segments(qs[leaf], nodes[leaf]))
        inner = ~leaf
        qs_i, nodes_i = qs[inner], nodes[inner]
        qs = np.concatenate([qs_i, qs_i])
        nodes = np.concatenate([tree.left[nodes_i], tree.right[nodes_i]])


def closest_point(accel, x, kinds=ALL_KINDS):
    """Nearest boundary point among segments of ``kinds``.

    Returns ``(point, distance, segment)``; queries with no candidate segment get an
    infinite distance, a NaN point and segment -1.
    """
    x, single = _as_batch(x)
    n = x.shape[0]
    best = np.full(n, np.inf)
    point = np.full((n, 2), np.nan)
    segment = np.full(n, -1, dtype=np.int64)
    tree = accel.tree(kinds)

    if tree is not None and n:
        def visit(qq, segs):
            q, d2 = segment_closest_points(x[qq], accel.a[segs], accel.b[segs])
            _update_min(qq, d2, best, (q, segs), (point, segment))

        # greedy descent gives every query a finite bound before the sweep
        cur = np.zeros(n, dtype=np.int64)
        while True:
            inner = ~tree.is_leaf(cur)
            if not inner.any():
                break
            lc, rc = tree.left[cur[inner]], tree.right[cur[inner]]
            p = x[inner]
            go_right = _box_dist2(p, tree.lo[rc], tree.hi[rc]) < _box_dist2(
                p, tree.lo[lc], tree.hi[lc]
            )
            cur[inner] = np.where(go_right, rc, lc)
        visit(*tree.leaf_segments(np.arange(n), cur))

        _traverse(
            tree,
            np.arange(n),
            np.zeros(n, dtype=np.int64),
            lambda qs, nodes: _box_dist2(x[qs], tree.lo[nodes], tree.hi[nodes]),
            best,
            visit,
        )

    dist = np.sqrt(best)
    if single:
        return point[0], float(dist[0]), int(segment[0])
    return point, dist, segment


def closest_silhouette(accel, x, normal=None):
    """Distance from ``x`` to the nearest Neumann silhouette vertex (inf if none)."""
    x, single = _as_batch(x)
    n = x.shape[0]
    if normal is not None:
        normal = np.broadcast_to(np.asarray(normal, dtype=float), x.shape)
    best = np.full(n, np.inf)
    tree = accel.tree(Kind.NEUMANN)

    if tree is not None and n:
        def visit(qq, segs):
            qq = np.concatenate([qq, qq])
            vid = np.concatenate([accel.segment_vertices[segs, 0], accel.segment_vertices[segs, 1]])
            v = accel.vertices[vid]
            sil = silhouette_mask(
                x[qq],
                v,
                accel.vertex_count[vid],
                accel.vertex_neighbors[vid, 0],
                accel.vertex_neighbors[vid, 1],
                None if normal is None else normal[qq],
            )
            diff = v[sil] - x[qq[sil]]
            _update_min(qq[sil], dot(diff, diff), best, (), ())

        _traverse(
            tree,
            np.arange(n),
            np.zeros(n, dtype=np.int64),
            lambda qs, nodes: _box_dist2(x[qs], tree.lo[nodes], tree.hi[nodes]),
            best,
            visit,
        )

    dist = np.sqrt(best)
    return float(dist[0]) if single else dist


@dataclass
class HitInfo:
    t: float
    point: np.ndarray
    normal: np.ndarray
    segment: int
    kind: Kind


@dataclass
class Hits:
    """Batched ray hits; rows without a hit have ``hit`` False and ``t`` inf."""

    hit: np.ndarray
    t: np.ndarray
    point: np.ndarray
    normal: np.ndarray
    segment: np.ndarray
    neumann: np.ndarray

    def __getitem__(self, i):
        if not self.hit[i]:
            return None
        return HitInfo(
            t=float(self.t[i]),
            point=self.point[i],
            normal=self.normal[i],
            segment=int(self.segment[i]),
            kind=Kind.NEUMANN if self.neumann[i] else Kind.DIRICHLET,
        )


def _slab_entry(o, inv_d, zero_d, lo, hi):
    with np.errstate(invalid="ignore"):
        t0 = (lo - o) * inv_d
        t1 = (hi - o) * inv_d
    inside = (o >= lo) & (o <= hi)
    tmin = np.where(zero_d, np.where(inside, -np.inf, np.inf), np.minimum(t0, t1))
    tmax = np.where(zero_d, np.where(inside, np.inf, -np.inf), np.maximum(t0, t1))
    enter = np.maximum(tmin.max(axis=-1), 0.0)
    leave = tmax.min(axis=-1)
    return np.where(enter <= leave, enter, np.inf)


def ray_cast(accel, origins, dirs, t_max, kinds=ALL_KINDS, t_epsilon=None):
    """First intersections with ``t`` in ``(t_epsilon, t_max]``, normals facing the ray."""
    origins, _ = _as_batch(origins)
    dirs, _ = _as_batch(dirs)
    n = origins.shape[0]
    t_eps = accel.t_epsilon if t_epsilon is None else t_epsilon
    best = np.broadcast_to(np.asarray(t_max, dtype=float), (n,)).copy()
    segment = np.full(n, -1, dtype=np.int64)
    tree = accel.tree(kinds)

    if tree is not None and n:
        zero_d = dirs == 0.0
        inv_d = np.where(zero_d, 0.0, 1.0 / np.where(zero_d, 1.0, dirs))

        def visit(qq, segs):
            th = ray_segment_hits(origins[qq], dirs[qq], accel.a[segs], accel.b[segs])
            th = np.where(th > t_eps, th, np.inf)
            keep = np.isfinite(th) & (th <= best[qq])
            qq, segs, th = qq[keep], segs[keep], th[keep]
            if not qq.size:
                return
            order = np.lexsort((segs, th, qq))
            qq, segs, th = qq[order], segs[order], th[order]
            first = np.ones(qq.size, dtype=bool)
            first[1:] = qq[1:] != qq[:-1]
            qq, segs, th = qq[first], segs[first], th[first]
            # a hit at exactly t_max counts
            better = (th < best[qq]) | (segment[qq] < 0)
            best[qq[better]] = th[better]
            segment[qq[better]] = segs[better]

        _traverse(
            tree,
            np.arange(n),
            np.zeros(n, dtype=np.int64),
            lambda qs, nodes: _slab_entry(
                origins[qs], inv_d[qs], zero_d[qs], tree.lo[nodes], tree.hi[nodes]
            ),
            best,
            visit,
        )

    hit = segment >= 0
    t_hit = np.where(hit, best, np.inf)
    point = np.where(hit[:, None], origins + t_hit[:, None] * dirs, np.nan)
    normal = np.zeros((n, 2))
    if hit.any():
        nz = accel.normals[segment[hit]]
        flip = dot(nz, dirs[hit]) > 0
        normal[hit] = np.where(flip[:, None], -nz, nz)
    neumann = np.zeros(n, dtype=bool)
    neumann[hit] = accel.is_neumann[segment[hit]]
    return Hits(hit, t_hit, point, normal, segment, neumann)


def ray_first_hit(accel, origin, direction, t_max, kinds=ALL_KINDS, t_epsilon=None):
    hits = ray_cast(accel, origin, direction, t_max, kinds, t_epsilon)
    return hits[0]


def combine_radius(dist_dirichlet, dist_silhouette, r_min):
    return np.minimum(dist_dirichlet, np.maximum(dist_silhouette, r_min))


def star_radius(accel, x, r_min, normal=None):
    """Radius of the star-shaped region around ``x``."""
    x_batch, single = _as_batch(x)
    _, dist_d, _ = closest_point(accel, x_batch, Kind.DIRICHLET)
    dist_s = closest_silhouette(accel, x_batch, normal)
    r = combine_radius(dist_d, dist_s, r_min)
    if np.any(~np.isfinite(r)):
        raise GeometryError("unbounded star: no Dirichlet boundary and no Neumann silhouette")
    return float(r[0]) if single else r
