from PIL import Image
import numpy as np
import os
import csv
import json
import hashlib


def ensure_parent(filename):
    folder = os.path.dirname(filename)
    if folder and not os.path.exists(folder):
        os.makedirs(folder)


def write_rows(filename, header, rows):
    ensure_parent(filename)
    with open(filename, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def read_rows(filename):
    with open(filename, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        return header, [row for row in reader if row]


def write_json(filename, data):
    ensure_parent(filename)
    with open(filename, "w") as f:
        json.dump(data, f, indent=2)


def write_pfm(filename, values):
    """Grayscale PFM: little-endian float32, bottom row first."""
    values = np.asarray(values, dtype="<f4")
    height, width = values.shape
    ensure_parent(filename)
    with open(filename, "wb") as f:
        f.write(f"Pf\n{width} {height}\n-1.0\n".encode("ascii"))
        f.write(values.tobytes())


def read_pfm(filename):
    with open(filename, "rb") as f:
        kind = f.readline().strip()
        if kind != b"Pf":
            raise ValueError(f"{filename}: not a grayscale PFM file")
        width, height = (int(v) for v in f.readline().split())
        scale = float(f.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(width * height * 4), dtype=dtype)
    return data.reshape(height, width).astype(np.float32)


def write_png(filename, values, vmin=None, vmax=None):
    """8-bit grayscale PNG of ``values`` (row 0 at the bottom) plus a JSON sidecar with the
    tonemap range."""
    values = np.asarray(values, dtype=float)
    vmin = float(np.min(values)) if vmin is None else float(vmin)
    vmax = float(np.max(values)) if vmax is None else float(vmax)
    span = vmax - vmin
    scaled = np.clip((values - vmin) / span, 0.0, 1.0) if span > 0 else np.zeros_like(values)
    pixels = np.ascontiguousarray(np.round(scaled * 255.0).astype(np.uint8)[::-1])
    ensure_parent(filename)
    Image.fromarray(pixels).save(filename)
    sidecar = os.path.splitext(filename)[0] + ".json"
    write_json(sidecar, {"tonemap": "linear", "min": vmin, "max": vmax})
    return sidecar


def read_png(filename):
    with Image.open(filename) as image:
        return np.array(image.convert("L"))[::-1]


def hash_file(filename):
    h = hashlib.sha256()
    with open(filename, "rb") as f:
        for block in iter(lambda: f.read(128 * 1024), b""):
            h.update(block)
    return h.hexdigest()
