"""Dense multi-resolution feature grid followed by a small ReLU MLP.

The field maps a 2D position to the raw parameters of a vMF mixture plus the raw
selection logit. Everything is float64 numpy with hand-written backpropagation.
"""

from dataclasses import dataclass, asdict
import typing as t
import json
import numpy as np
from .spherical import UnnormParams
from .errors import FieldError


CHECKPOINT_VERSION = 1


@dataclass
class FieldConfig:
    levels: int = 4
    resolutions: t.Sequence[int] = (16, 32, 64, 128)
    features: int = 4
    hidden: int = 64
    k: int = 8
    dim: int = 2
    learning_rate: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        self.resolutions = tuple(int(r) for r in self.resolutions)

    def validate(self):
        if self.levels < 1:
            raise FieldError("levels must be >= 1")
        if len(self.resolutions) != self.levels:
            raise FieldError(f"expected {self.levels} resolutions, got {len(self.resolutions)}")
        if any(r < 2 for r in self.resolutions):
            raise FieldError("every grid resolution must be >= 2")
        if self.features < 1 or self.hidden < 1:
            raise FieldError("features and hidden width must be >= 1")
        if self.k < 1:
            raise FieldError("K must be >= 1")
        if self.dim != 2:
            raise FieldError("only 2D fields are supported")
        return self

    @property
    def input_size(self):
        return self.levels * self.features

    @property
    def output_size(self):
        return UnnormParams.output_size(self.k, self.dim)


@dataclass
class ForwardRecord:
    """Activations kept from :meth:`GuidingField.forward` for the matching backward pass."""

    owner: int
    corners: t.List[t.Tuple[np.ndarray, np.ndarray]]
    weights: t.List[np.ndarray]
    enc: np.ndarray
    z0: np.ndarray
    h0: np.ndarray
    z1: np.ndarray
    h1: np.ndarray


def _dense(x, w, b):
    # explicit accumulation keeps each row's summation order independent of the batch size
    out = np.broadcast_to(b, (x.shape[0], w.shape[1])).copy()
    for i in range(w.shape[0]):
        out += x[:, i, None] * w[i]
    return out


def lattice_weights(xs, bbox_lo, bbox_hi, resolution):
    """Corner indices and bilinear weights of ``xs`` on a ``resolution``-sized lattice."""
    u = np.clip((xs - bbox_lo) / (bbox_hi - bbox_lo), 0.0, 1.0) * (resolution - 1)
    i0 = np.clip(np.floor(u), 0, resolution - 2).astype(np.int64)
    f = u - i0
    fx, fy = f[:, 0], f[:, 1]
    ix, iy = i0[:, 0], i0[:, 1]
    corners = [(ix, iy), (ix + 1, iy), (ix, iy + 1), (ix + 1, iy + 1)]
    weights = [(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy]
    return corners, weights


class GuidingField:
    def __init__(self, config, bbox, params, adam_m=None, adam_v=None, step=0):
        self.config = config
        self.bbox_lo = np.asarray(bbox[0], dtype=float)
        self.bbox_hi = np.asarray(bbox[1], dtype=float)
        self.params = params
        self.adam_m = adam_m or {k: np.zeros_like(v) for k, v in params.items()}
        self.adam_v = adam_v or {k: np.zeros_like(v) for k, v in params.items()}
        self.grads = {k: np.zeros_like(v) for k, v in params.items()}
        self.step = step

    @classmethod
    def create(cls, config, bbox):
        config = config.validate()
        rng = np.random.default_rng(config.seed)
        params = {}
        for level, res in enumerate(config.resolutions):
            params[f"grid{level}"] = rng.uniform(-1e-4, 1e-4, size=(res, res, config.features))
        sizes = [config.input_size, config.hidden, config.hidden, config.output_size]
        for layer in range(3):
            fan_in = sizes[layer]
            bound = 1.0 / np.sqrt(fan_in)
            params[f"w{layer}"] = rng.uniform(-bound, bound, size=(fan_in, sizes[layer + 1]))
            params[f"b{layer}"] = np.zeros(sizes[layer + 1])
        return cls(config, bbox, params)

    @property
    def grid_names(self):
        return [f"grid{level}" for level in range(self.config.levels)]

    def _encode(self, xs):
        corners_all, weights_all, parts = [], [], []
        for name in self.grid_names:
            grid = self.params[name]
            corners, weights = lattice_weights(xs, self.bbox_lo, self.bbox_hi, grid.shape[0])
            enc = sum(w[:, None] * grid[ix, iy] for (ix, iy), w in zip(corners, weights))
            corners_all.append(corners)
            weights_all.append(weights)
            parts.append(enc)
        return corners_all, weights_all, np.concatenate(parts, axis=1)

    def forward(self, xs):
        """Raw outputs at ``xs`` (``(N, 2)``) and the record needed by :meth:`backward`."""
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        p = self.params
        corners, weights, enc = self._encode(xs)
        z0 = _dense(enc, p["w0"], p["b0"])
        h0 = np.maximum(z0, 0.0)
        z1 = _dense(h0, p["w1"], p["b1"])
        h1 = np.maximum(z1, 0.0)
        out = _dense(h1, p["w2"], p["b2"])
        return out, ForwardRecord(id(self), corners, weights, enc, z0, h0, z1, h1)

    def eval_batch(self, xs):
        out, _ = self.forward(xs)
        return UnnormParams.from_vector(out, self.config.k, self.config.dim)

    def eval(self, x):
        out, _ = self.forward(np.asarray(x, dtype=float)[None])
        return UnnormParams.from_vector(out[0], self.config.k, self.config.dim)

    def backward(self, record, d_out):
        """Accumulate parameter gradients for upstream gradient ``d_out`` (``(N, out)``)."""
        if record is None:
            raise FieldError("backward called without a forward record")
        if record.owner != id(self):
            raise FieldError("forward record belongs to another field")
        if isinstance(d_out, UnnormParams):
            d_out = d_out.to_vector()
        d_out = np.atleast_2d(np.asarray(d_out, dtype=float))
        p, g = self.params, self.grads

        g["w2"] += record.h1.T @ d_out
        g["b2"] += d_out.sum(axis=0)
        dz1 = (d_out @ p["w2"].T) * (record.z1 > 0)
        g["w1"] += record.h0.T @ dz1
        g["b1"] += dz1.sum(axis=0)
        dz0 = (dz1 @ p["w1"].T) * (record.z0 > 0)
        g["w0"] += record.enc.T @ dz0
        g["b0"] += dz0.sum(axis=0)
        d_enc = dz0 @ p["w0"].T

        nf = self.config.features
        for level, name in enumerate(self.grid_names):
            d_level = d_enc[:, level * nf:(level + 1) * nf]
            for (ix, iy), w in zip(record.corners[level], record.weights[level]):
                np.add.at(g[name], (ix, iy), w[:, None] * d_level)

    def zero_grad(self):
        for grad in self.grads.values():
            grad.fill(0.0)

    def adam_step(self, lr=None, beta1=None, beta2=None, eps=None):
        cfg = self.config
        lr = cfg.learning_rate if lr is None else lr
        beta1 = cfg.beta1 if beta1 is None else beta1
        beta2 = cfg.beta2 if beta2 is None else beta2
        eps = cfg.eps if eps is None else eps
        self.step += 1
        c1 = 1.0 - beta1**self.step
        c2 = 1.0 - beta2**self.step
        for name, param in self.params.items():
            grad = self.grads[name]
            m = self.adam_m[name]
            v = self.adam_v[name]
            m *= beta1
            m += (1.0 - beta1) * grad
            v *= beta2
            v += (1.0 - beta2) * grad * grad
            param -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        self.zero_grad()

    def save(self, filename):
        arrays = {
            "version": np.array(CHECKPOINT_VERSION),
            "config": np.array(json.dumps(asdict(self.config))),
            "bbox": np.stack([self.bbox_lo, self.bbox_hi]).astype("<f8"),
            "step": np.array(self.step),
        }
        for name in self.params:
            arrays[f"param/{name}"] = self.params[name].astype("<f8")
            arrays[f"adam_m/{name}"] = self.adam_m[name].astype("<f8")
            arrays[f"adam_v/{name}"] = self.adam_v[name].astype("<f8")
        with open(filename, "wb") as f:
            np.savez(f, **arrays)

    @classmethod
    def load(cls, filename):
        try:
            with np.load(filename, allow_pickle=False) as data:
                version = int(data["version"])
                if version != CHECKPOINT_VERSION:
                    raise FieldError(f"unsupported checkpoint version {version}")
                config = FieldConfig(**json.loads(str(data["config"]))).validate()
                bbox = data["bbox"]
                sections = {"param": {}, "adam_m": {}, "adam_v": {}}
                for key in data.files:
                    if "/" in key:
                        section, name = key.split("/", 1)
                        sections[section][name] = data[key].astype(np.float64)
                step = int(data["step"])
        except (OSError, KeyError, ValueError) as e:
            raise FieldError(f"cannot read checkpoint {filename}: {e}")
        field = cls(config, bbox, sections["param"], sections["adam_m"], sections["adam_v"], step)
        expected = cls.create(config, bbox).params
        for name, arr in expected.items():
            if name not in field.params or field.params[name].shape != arr.shape:
                raise FieldError(f"checkpoint parameter '{name}' is missing or misshaped")
        return field

    def copy(self):
        return GuidingField(
            self.config,
            (self.bbox_lo, self.bbox_hi),
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.adam_m.items()},
            {k: v.copy() for k, v in self.adam_v.items()},
            self.step,
        )
