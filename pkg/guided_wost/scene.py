from dataclasses import dataclass, field
import typing as t
import enum
import json
import math
import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from .errors import SceneError


INSIDE_CHUNK = 4096


class Kind(str, enum.Enum):
    DIRICHLET = "dirichlet"
    NEUMANN = "neumann"


@dataclass(frozen=True)
class Constant:
    value: float

    def __call__(self, p):
        p = np.asarray(p, dtype=float)
        return np.full(p.shape[:-1], float(self.value))

    def to_dict(self):
        return {"type": "constant", "value": self.value}

    @property
    def is_zero(self):
        return self.value == 0


@dataclass(frozen=True)
class Linear:
    c0: float = 0.0
    cx: float = 0.0
    cy: float = 0.0

    def __call__(self, p):
        p = np.asarray(p, dtype=float)
        return self.c0 + self.cx * p[..., 0] + self.cy * p[..., 1]

    def to_dict(self):
        return {"type": "linear", "c0": self.c0, "cx": self.cx, "cy": self.cy}

    @property
    def is_zero(self):
        return self.c0 == 0 and self.cx == 0 and self.cy == 0


@dataclass(frozen=True)
class Quadratic:
    c0: float = 0.0
    cx: float = 0.0
    cy: float = 0.0
    cxx: float = 0.0
    cxy: float = 0.0
    cyy: float = 0.0

    def __call__(self, p):
        p = np.asarray(p, dtype=float)
        x, y = p[..., 0], p[..., 1]
        return (
            self.c0 + self.cx * x + self.cy * y
            + self.cxx * x * x + self.cxy * x * y + self.cyy * y * y
        )

    def to_dict(self):
        return {
            "type": "quadratic", "c0": self.c0, "cx": self.cx, "cy": self.cy,
            "cxx": self.cxx, "cxy": self.cxy, "cyy": self.cyy,
        }

    @property
    def is_zero(self):
        return not any((self.c0, self.cx, self.cy, self.cxx, self.cxy, self.cyy))


@dataclass(frozen=True)
class Raster:
    """Row-major cell values over ``bbox``; row 0 is the bottom row. Nearest-cell lookup."""

    width: int
    height: int
    bbox: t.Tuple[t.Tuple[float, float], t.Tuple[float, float]]
    values: np.ndarray = field(compare=False, repr=False)
    clamp: bool = True

    def __call__(self, p):
        p = np.asarray(p, dtype=float)
        (x0, y0), (x1, y1) = self.bbox
        fx = (p[..., 0] - x0) / (x1 - x0)
        fy = (p[..., 1] - y0) / (y1 - y0)
        i = np.clip(np.floor(fx * self.width).astype(np.int64), 0, self.width - 1)
        j = np.clip(np.floor(fy * self.height).astype(np.int64), 0, self.height - 1)
        out = self.values[j, i]
        if not self.clamp:
            outside = (fx < 0) | (fx > 1) | (fy < 0) | (fy > 1)
            out = np.where(outside, 0.0, out)
        return out

    def cell_center(self, i, j):
        (x0, y0), (x1, y1) = self.bbox
        return (
            x0 + (i + 0.5) * (x1 - x0) / self.width,
            y0 + (j + 0.5) * (y1 - y0) / self.height,
        )

    def to_dict(self):
        return {
            "type": "raster",
            "width": self.width,
            "height": self.height,
            "bbox": {"min": list(self.bbox[0]), "max": list(self.bbox[1])},
            "values": [float(v) for v in self.values.ravel()],
        }

    @property
    def is_zero(self):
        return not np.any(self.values)


@dataclass(frozen=True)
class Zero:
    def __call__(self, p):
        p = np.asarray(p, dtype=float)
        return np.zeros(p.shape[:-1])

    def to_dict(self):
        return {"type": "zero"}

    is_zero = True


ValueSpec = t.Union[Constant, Linear, Quadratic, Raster]
SourceField = t.Union[Zero, Constant, Linear, Quadratic, Raster]


@dataclass(frozen=True)
class BoundarySegment:
    a: t.Tuple[float, float]
    b: t.Tuple[float, float]
    kind: Kind
    value_ref: str


@dataclass
class Scene:
    segments: t.List[BoundarySegment]
    values: t.Dict[str, ValueSpec]
    source: SourceField
    bbox: t.Tuple[t.Tuple[float, float], t.Tuple[float, float]]
    epsilon_shell: float

    def __post_init__(self):
        self.a = np.array([s.a for s in self.segments], dtype=float).reshape(-1, 2)
        self.b = np.array([s.b for s in self.segments], dtype=float).reshape(-1, 2)
        self.is_neumann = np.array([s.kind == Kind.NEUMANN for s in self.segments], dtype=bool)
        self.value_names = sorted(self.values)
        lookup = {name: i for i, name in enumerate(self.value_names)}
        self.value_index = np.array(
            [lookup.get(s.value_ref, -1) for s in self.segments], dtype=np.int64
        )
        self.loop_labels = closed_loops(self.a, self.b)

    @property
    def diagonal(self):
        (x0, y0), (x1, y1) = self.bbox
        return math.hypot(x1 - x0, y1 - y0)

    def segment_ids(self, kind):
        return np.flatnonzero(self.is_neumann == (Kind(kind) == Kind.NEUMANN))

    def has_kind(self, kind):
        return self.segment_ids(kind).size > 0

    @property
    def has_source(self):
        return not self.source.is_zero

    @property
    def has_neumann_flux(self):
        ids = self.segment_ids(Kind.NEUMANN)
        names = {self.segments[i].value_ref for i in ids}
        return any(not self.values[n].is_zero for n in names)

    def contains(self, p, margin=0.0):
        p = np.asarray(p, dtype=float)
        (x0, y0), (x1, y1) = self.bbox
        return (
            (p[..., 0] >= x0 - margin) & (p[..., 0] <= x1 + margin)
            & (p[..., 1] >= y0 - margin) & (p[..., 1] <= y1 + margin)
        )

    def inside(self, p):
        """Whether ``p`` is enclosed by at least one closed boundary loop.

        Open curves never enclose anything; a scene without closed loops counts its whole
        bbox as inside.
        """
        p = np.asarray(p, dtype=float)
        flat = p.reshape(-1, 2)
        result = self.contains(flat)
        ids = np.flatnonzero(self.loop_labels >= 0)
        if ids.size:
            _, loop = np.unique(self.loop_labels[ids], return_inverse=True)
            onehot = np.eye(int(loop.max()) + 1, dtype=np.int64)[loop.reshape(-1)]
            a, b = self.a[ids], self.b[ids]
            enclosed = np.zeros(flat.shape[0], dtype=bool)
            for begin in range(0, flat.shape[0], INSIDE_CHUNK):
                q = flat[begin:begin + INSIDE_CHUNK, None, :]
                straddle = (a[:, 1] > q[..., 1]) != (b[:, 1] > q[..., 1])
                with np.errstate(divide="ignore", invalid="ignore"):
                    t_y = (q[..., 1] - a[:, 1]) / (b[:, 1] - a[:, 1])
                crossing = straddle & (a[:, 0] + t_y * (b[:, 0] - a[:, 0]) > q[..., 0])
                counts = crossing.astype(np.int64) @ onehot
                enclosed[begin:begin + INSIDE_CHUNK] = np.any(counts % 2 == 1, axis=1)
            result &= enclosed
        return result.reshape(p.shape[:-1])


def closed_loops(a, b):
    """Loop label of every segment on a closed polyline, -1 for segments of open curves.

    A connected set of segments is closed when every vertex has an even number of incident
    segments. Vertices are matched by exact coordinates.
    """
    n = a.shape[0]
    if not n:
        return np.zeros(0, dtype=np.int64)
    _, inverse = np.unique(np.concatenate([a, b]), axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    va, vb = inverse[:n], inverse[n:]
    nv = int(inverse.max()) + 1
    graph = coo_matrix((np.ones(n), (va, vb)), shape=(nv, nv))
    _, labels = connected_components(graph, directed=False)
    degree = np.bincount(inverse, minlength=nv)
    open_labels = np.unique(labels[degree % 2 == 1])
    seg_labels = labels[va]
    return np.where(np.isin(seg_labels, open_labels), -1, seg_labels).astype(np.int64)


def _eval_boundary(scene, p, segment, kind):
    p = np.asarray(p, dtype=float)
    segment = np.asarray(segment, dtype=np.int64)
    if segment.size and np.any(scene.is_neumann[segment] != (kind == Kind.NEUMANN)):
        raise SceneError(f"segment is not a {kind.value} segment")
    flat_p = p.reshape(-1, 2)
    flat_s = np.broadcast_to(segment, p.shape[:-1]).ravel()
    out = np.zeros(flat_s.shape[0])
    value_index = scene.value_index[flat_s]
    for i in np.unique(value_index):
        mask = value_index == i
        out[mask] = scene.values[scene.value_names[i]](flat_p[mask])
    return out.reshape(p.shape[:-1])


def eval_dirichlet(scene, p, segment):
    return _eval_boundary(scene, p, segment, Kind.DIRICHLET)


def eval_neumann(scene, p, segment):
    return _eval_boundary(scene, p, segment, Kind.NEUMANN)


def eval_source(scene, p):
    p = np.asarray(p, dtype=float)
    if scene.source.is_zero:
        return np.zeros(p.shape[:-1])
    return np.where(scene.contains(p), scene.source(p), 0.0)


def _parse_point(value, path):
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise SceneError("expected a point [x, y]", path)
    try:
        x, y = float(value[0]), float(value[1])
    except (TypeError, ValueError):
        raise SceneError("point coordinates must be numbers", path)
    if not (math.isfinite(x) and math.isfinite(y)):
        raise SceneError("point coordinates must be finite", path)
    return (x, y)


def _parse_bbox(value, path):
    if not isinstance(value, dict) or "min" not in value or "max" not in value:
        raise SceneError("expected {min: [x, y], max: [x, y]}", path)
    lo = _parse_point(value["min"], f"{path}.min")
    hi = _parse_point(value["max"], f"{path}.max")
    if not (hi[0] > lo[0] and hi[1] > lo[1]):
        raise SceneError("bbox max must exceed min on both axes", path)
    return (lo, hi)


def _number(spec, key, path, default=None):
    if key not in spec:
        if default is None:
            raise SceneError(f"missing '{key}'", path)
        return default
    try:
        value = float(spec[key])
    except (TypeError, ValueError):
        raise SceneError(f"'{key}' must be a number", path)
    if not math.isfinite(value):
        raise SceneError(f"'{key}' must be finite", path)
    return value


def parse_value_spec(spec, path, allow_zero=False):
    if not isinstance(spec, dict) or "type" not in spec:
        raise SceneError("expected an object with a 'type'", path)
    kind = spec["type"]
    if kind == "zero" and allow_zero:
        return Zero()
    if kind == "constant":
        return Constant(_number(spec, "value", path))
    if kind == "linear":
        return Linear(*(_number(spec, k, path, 0.0) for k in ("c0", "cx", "cy")))
    if kind == "quadratic":
        return Quadratic(
            *(_number(spec, k, path, 0.0) for k in ("c0", "cx", "cy", "cxx", "cxy", "cyy"))
        )
    if kind == "raster":
        width = int(_number(spec, "width", path))
        height = int(_number(spec, "height", path))
        if width < 1 or height < 1:
            raise SceneError("raster width and height must be >= 1", path)
        values = np.asarray(spec.get("values", []), dtype=float)
        if values.size != width * height:
            raise SceneError(f"raster expects {width * height} values, got {values.size}", path)
        if not np.all(np.isfinite(values)):
            raise SceneError("raster values must be finite", f"{path}.values")
        bbox = _parse_bbox(spec.get("bbox"), f"{path}.bbox")
        return Raster(width, height, bbox, values.reshape(height, width), clamp=not allow_zero)
    raise SceneError(f"unknown value type '{kind}'", f"{path}.type")


def scene_from_dict(doc, roulette=True):
    if not isinstance(doc, dict):
        raise SceneError("scene document must be an object")
    bbox = _parse_bbox(doc.get("bbox"), "bbox")

    values = {}
    for name, spec in (doc.get("values") or {}).items():
        values[name] = parse_value_spec(spec, f"values.{name}")

    source = Zero()
    if doc.get("source") is not None:
        source = parse_value_spec(doc["source"], "source", allow_zero=True)

    raw_segments = doc.get("segments")
    if not isinstance(raw_segments, list) or not raw_segments:
        raise SceneError("expected a non-empty list", "segments")
    segments = []
    for i, seg in enumerate(raw_segments):
        path = f"segments[{i}]"
        if not isinstance(seg, dict):
            raise SceneError("expected an object", path)
        a = _parse_point(seg.get("a"), f"{path}.a")
        b = _parse_point(seg.get("b"), f"{path}.b")
        if a == b:
            raise SceneError("segment has zero length", path)
        try:
            kind = Kind(seg.get("kind"))
        except ValueError:
            raise SceneError("kind must be 'dirichlet' or 'neumann'", f"{path}.kind")
        ref = seg.get("value")
        if ref not in values:
            raise SceneError(f"unknown value '{ref}'", f"{path}.value")
        (x0, y0), (x1, y1) = bbox
        for p, end in ((a, "a"), (b, "b")):
            if not (x0 <= p[0] <= x1 and y0 <= p[1] <= y1):
                raise SceneError("endpoint lies outside bbox", f"{path}.{end}")
        segments.append(BoundarySegment(a, b, kind, ref))

    diagonal = math.hypot(bbox[1][0] - bbox[0][0], bbox[1][1] - bbox[0][1])
    epsilon = _number(doc, "epsilon_shell", "epsilon_shell", 1e-3 * diagonal)
    if epsilon <= 0:
        raise SceneError("must be > 0", "epsilon_shell")

    if not roulette and not any(s.kind == Kind.DIRICHLET for s in segments):
        raise SceneError("scene has no Dirichlet segment and Russian roulette is disabled")

    return Scene(segments, values, source, bbox, epsilon)


def load_scene(document, roulette=True):
    """Parse and validate a scene from JSON text (or an already decoded mapping)."""
    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as e:
            raise SceneError(e.msg, line=e.lineno)
    return scene_from_dict(document, roulette=roulette)


def load_scene_file(filename, roulette=True):
    with open(filename) as f:
        return load_scene(f.read(), roulette=roulette)


def scene_to_dict(scene):
    return {
        "bbox": {"min": list(scene.bbox[0]), "max": list(scene.bbox[1])},
        "epsilon_shell": scene.epsilon_shell,
        "values": {name: spec.to_dict() for name, spec in scene.values.items()},
        "source": scene.source.to_dict(),
        "segments": [
            {"a": list(s.a), "b": list(s.b), "kind": s.kind.value, "value": s.value_ref}
            for s in scene.segments
        ],
    }


def dump_scene(scene):
    return json.dumps(scene_to_dict(scene), indent=2)
