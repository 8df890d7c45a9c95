from dataclasses import dataclass
import typing as t
import math
import logging
import numpy as np
from .scene import load_scene, load_scene_file
from .errors import SceneError


logger = logging.getLogger(__name__)


PRESET_PREFIX = "preset:"


@dataclass
class Preset:
    name: str
    document: t.Mapping[str, t.Any]
    solution: t.Optional[t.Callable[[np.ndarray], np.ndarray]] = None
    description: str = ""

    @property
    def analytic(self):
        return self.solution is not None

    def scene(self, roulette=True):
        return load_scene(self.document, roulette=roulette)


PRESETS: t.Dict[str, Preset] = {}


def preset(name, description=""):
    def decorator(func):
        document, solution = func()
        text = description or (func.__doc__ or "").strip()
        PRESETS[name] = Preset(name, document, solution, text)
        return func
    return decorator


def _polygon(center, radius, sides):
    angles = 2 * math.pi * np.arange(sides) / sides
    return [
        [center[0] + radius * math.cos(a), center[1] + radius * math.sin(a)] for a in angles
    ]


def _loop(points, kind, value):
    return [
        {"a": points[i], "b": points[(i + 1) % len(points)], "kind": kind, "value": value}
        for i in range(len(points))
    ]


def _chain(points, kind, value):
    return [
        {"a": points[i], "b": points[i + 1], "kind": kind, "value": value}
        for i in range(len(points) - 1)
    ]


def _unit_square(left, right, left_kind="dirichlet", right_kind="dirichlet", edges="flat"):
    return [
        {"a": [0.0, 0.0], "b": [1.0, 0.0], "kind": "neumann", "value": edges},
        {"a": [1.0, 0.0], "b": [1.0, 1.0], "kind": right_kind, "value": right},
        {"a": [1.0, 1.0], "b": [0.0, 1.0], "kind": "neumann", "value": edges},
        {"a": [0.0, 1.0], "b": [0.0, 0.0], "kind": left_kind, "value": left},
    ]


UNIT_DISK_BBOX = {"min": [-1.0, -1.0], "max": [1.0, 1.0]}
UNIT_SQUARE_BBOX = {"min": [0.0, 0.0], "max": [1.0, 1.0]}


@preset("harmonic-disk")
def _harmonic_disk():
    """Unit disk, g = x^2 - y^2, no source"""
    doc = {
        "bbox": UNIT_DISK_BBOX,
        "epsilon_shell": 1e-4,
        "values": {"g": {"type": "quadratic", "cxx": 1.0, "cyy": -1.0}},
        "source": {"type": "zero"},
        "segments": _loop(_polygon((0.0, 0.0), 1.0, 256), "dirichlet", "g"),
    }
    return doc, lambda p: p[..., 0] ** 2 - p[..., 1] ** 2


@preset("const-source-disk")
def _const_source_disk():
    """Unit disk, g = x^2 + y^2 - 1, f = 4"""
    doc = {
        "bbox": UNIT_DISK_BBOX,
        "epsilon_shell": 1e-4,
        "values": {"g": {"type": "quadratic", "c0": -1.0, "cxx": 1.0, "cyy": 1.0}},
        "source": {"type": "constant", "value": 4.0},
        "segments": _loop(_polygon((0.0, 0.0), 1.0, 256), "dirichlet", "g"),
    }
    return doc, lambda p: p[..., 0] ** 2 + p[..., 1] ** 2 - 1.0


@preset("neumann-strip")
def _neumann_strip():
    """Unit square, u = 0 at x = 0, u = 1 at x = 1, insulated top and bottom"""
    doc = {
        "bbox": UNIT_SQUARE_BBOX,
        "epsilon_shell": 1e-4,
        "values": {
            "zero": {"type": "constant", "value": 0.0},
            "one": {"type": "constant", "value": 1.0},
            "flat": {"type": "constant", "value": 0.0},
        },
        "source": {"type": "zero"},
        "segments": _unit_square("zero", "one"),
    }
    return doc, lambda p: np.array(p[..., 0], dtype=float)


@preset("flux-strip")
def _flux_strip():
    """Unit square, u = 0 at x = 0, outward flux 1 at x = 1, insulated top and bottom"""
    doc = {
        "bbox": UNIT_SQUARE_BBOX,
        "epsilon_shell": 1e-4,
        "values": {
            "zero": {"type": "constant", "value": 0.0},
            "flux": {"type": "constant", "value": 1.0},
            "flat": {"type": "constant", "value": 0.0},
        },
        "source": {"type": "zero"},
        "segments": _unit_square("zero", "flux", right_kind="neumann"),
    }
    return doc, lambda p: np.array(p[..., 0], dtype=float)


@preset("strip-wave")
def _strip_wave():
    """Insulated strip whose right end carries 1 + sin(2 pi y) / 2"""
    rows = 32
    ys = (np.arange(rows) + 0.5) / rows
    doc = {
        "bbox": UNIT_SQUARE_BBOX,
        "values": {
            "zero": {"type": "constant", "value": 0.0},
            "wave": {
                "type": "raster",
                "width": 1,
                "height": rows,
                "bbox": {"min": [0.5, 0.0], "max": [1.5, 1.0]},
                "values": [float(v) for v in 1.0 + 0.5 * np.sin(2 * math.pi * ys)],
            },
            "flat": {"type": "constant", "value": 0.0},
        },
        "source": {"type": "zero"},
        "segments": _unit_square("zero", "wave"),
    }
    return doc, None


@preset("fille")
def _fille():
    """Insulated box with interior curves held at 0 and 1"""
    box = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]
    wave = [
        [float(x), 0.3 + 0.05 * math.sin(6 * math.pi * x)] for x in np.linspace(0.15, 0.85, 33)
    ]
    segments = (
        _loop(box, "neumann", "flat")
        + _loop(_polygon((0.35, 0.6), 0.12, 24), "dirichlet", "white")
        + _loop(_polygon((0.68, 0.62), 0.1, 24), "dirichlet", "black")
        + _chain(wave, "dirichlet", "white")
        + _chain([[0.2, 0.85], [0.5, 0.75], [0.8, 0.9]], "dirichlet", "black")
    )
    doc = {
        "bbox": UNIT_SQUARE_BBOX,
        "values": {
            "white": {"type": "constant", "value": 1.0},
            "black": {"type": "constant", "value": 0.0},
            "flat": {"type": "constant", "value": 0.0},
        },
        "source": {"type": "zero"},
        "segments": segments,
    }
    return doc, None


def get_preset(name):
    try:
        return PRESETS[name]
    except KeyError:
        raise SceneError(f"unknown preset '{name}' (available: {', '.join(sorted(PRESETS))})")


def load_scene_ref(ref, roulette=True):
    """Load a scene from a file path or a ``preset:<name>`` reference.

    Returns the scene and the preset it came from (None for files).
    """
    if ref.startswith(PRESET_PREFIX):
        p = get_preset(ref[len(PRESET_PREFIX):])
        return p.scene(roulette=roulette), p
    return load_scene_file(ref, roulette=roulette), None
