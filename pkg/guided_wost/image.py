from dataclasses import dataclass
import os
import numpy as np
from .utils import write_rows, read_rows, write_pfm, read_pfm, write_png
from .errors import ImageError


RELMSE_GUARD = 0.01
OUTPUT_FORMATS = ("csv", "pfm", "png")
CSV_HEADER = ("i", "j", "mean", "var", "count")


@dataclass
class SolutionImage:
    """Running per-cell statistics over a ``width`` x ``height`` grid, stored row-major with
    row 0 at the bottom."""

    width: int
    height: int
    mean: np.ndarray
    m2: np.ndarray
    count: np.ndarray

    @classmethod
    def blank(cls, width, height):
        n = width * height
        return cls(width, height, np.zeros(n), np.zeros(n), np.zeros(n, dtype=np.int64))

    @classmethod
    def exact(cls, width, height, values, count=1):
        values = np.asarray(values, dtype=float).ravel()
        if values.size != width * height:
            raise ImageError(f"expected {width * height} values, got {values.size}")
        n = np.full(values.size, count, dtype=np.int64)
        return cls(width, height, values.copy(), np.zeros(values.size), n)

    @property
    def shape(self):
        return (self.height, self.width)

    def add(self, values):
        values = np.asarray(values, dtype=float).ravel()
        if values.size != self.mean.size:
            raise ImageError(f"expected {self.mean.size} values, got {values.size}")
        self.count += 1
        delta = values - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (values - self.mean)

    @property
    def variance_of_mean(self):
        n = self.count.astype(float)
        with np.errstate(divide="ignore", invalid="ignore"):
            var = self.m2 / (n * (n - 1.0))
        return np.where(self.count >= 2, var, 0.0)

    @property
    def values(self):
        return self.mean.reshape(self.shape)

    @property
    def samples(self):
        return int(self.count.min()) if self.count.size else 0


def eval_grid(bbox, width, height):
    """Cell centers of a ``width`` x ``height`` lattice over ``bbox``, ordered j-major."""
    (x0, y0), (x1, y1) = bbox
    xs = x0 + (np.arange(width) + 0.5) * (x1 - x0) / width
    ys = y0 + (np.arange(height) + 0.5) * (y1 - y0) / height
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def _values(img):
    if isinstance(img, SolutionImage):
        return img.values
    return np.asarray(img, dtype=float)


def relmse_delta(ref):
    ref = _values(ref)
    return max((RELMSE_GUARD * float(np.max(np.abs(ref)))) ** 2, np.finfo(float).tiny)


def compute_relmse(est, ref, mask=None):
    """Mean of ``(est - ref)^2 / (ref^2 + delta)`` with ``delta = (0.01 max|ref|)^2``."""
    est_v, ref_v = _values(est), _values(ref)
    if est_v.shape != ref_v.shape:
        raise ImageError(f"dimension mismatch: {est_v.shape} vs {ref_v.shape}")
    delta = relmse_delta(ref_v)
    err = (est_v - ref_v) ** 2 / (ref_v**2 + delta)
    if mask is not None:
        err = err[np.asarray(mask, dtype=bool)]
    return float(np.mean(err))


def output_format(filename, fmt=None):
    fmt = fmt or os.path.splitext(filename)[1].lstrip(".").lower()
    if fmt not in OUTPUT_FORMATS:
        formats = ", ".join(OUTPUT_FORMATS)
        raise ImageError(f"unsupported output format '{fmt}' (use one of {formats})")
    return fmt


def write_field_output(img, filename, fmt=None, vmin=None, vmax=None):
    fmt = output_format(filename, fmt)
    if fmt == "csv":
        var = img.variance_of_mean
        rows = (
            (k % img.width, k // img.width, img.mean[k], var[k], img.count[k])
            for k in range(img.mean.size)
        )
        write_rows(filename, CSV_HEADER, rows)
    elif fmt == "pfm":
        write_pfm(filename, img.values)
    else:
        write_png(filename, img.values, vmin, vmax)
    return filename


def read_field_output(filename, fmt=None):
    """Read a csv or pfm solution back into a :class:`SolutionImage`."""
    fmt = output_format(filename, fmt)
    if fmt == "csv":
        header, rows = read_rows(filename)
        if tuple(header) != CSV_HEADER:
            raise ImageError(f"{filename}: unexpected header {header}")
        data = np.array(rows, dtype=float)
        width = int(data[:, 0].max()) + 1
        height = int(data[:, 1].max()) + 1
        index = data[:, 1].astype(np.int64) * width + data[:, 0].astype(np.int64)
        img = SolutionImage.blank(width, height)
        img.mean[index] = data[:, 2]
        img.count[index] = data[:, 4].astype(np.int64)
        n = img.count.astype(float)
        img.m2[index] = data[:, 3] * n[index] * (n[index] - 1.0)
        return img
    if fmt == "pfm":
        values = read_pfm(filename).astype(float)
        height, width = values.shape
        return SolutionImage.exact(width, height, values)
    raise ImageError("png outputs are tonemapped and cannot be compared")
