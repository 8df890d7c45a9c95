"""von Mises-Fisher mixtures on the circle and the sphere.

Parameters carry arbitrary leading batch axes: ``mu`` is ``(..., K, d)``, ``kappa`` and
``lam`` are ``(..., K)`` and ``c`` is ``(...)``. Directions ``nu`` and normals ``n`` are
``(..., d)``; an all-zero normal row means "not on a Neumann boundary".
"""

from dataclasses import dataclass
import typing as t
import math
import numpy as np
from scipy.special import i0e, i1e, expit, softmax


KAPPA_MIN = 1e-6
KAPPA_MAX = 1e4
MU_NORM_FLOOR = 1e-12
SPHERE_AREA = {2: 2 * math.pi, 3: 4 * math.pi}


@dataclass(frozen=True)
class VmfComponent:
    mu: np.ndarray
    kappa: float
    lam: float = 1.0


@dataclass
class MixtureParams:
    mu: np.ndarray
    kappa: np.ndarray
    lam: np.ndarray
    c: np.ndarray

    @property
    def dim(self):
        return self.mu.shape[-1]

    @property
    def k(self):
        return self.kappa.shape[-1]

    @property
    def shape(self):
        return self.c.shape

    @classmethod
    def from_components(cls, components, c=0.5):
        return cls(
            mu=np.array([np.asarray(comp.mu, dtype=float) for comp in components]),
            kappa=np.array([comp.kappa for comp in components], dtype=float),
            lam=np.array([comp.lam for comp in components], dtype=float),
            c=np.asarray(c, dtype=float),
        )

    def take(self, index):
        return MixtureParams(self.mu[index], self.kappa[index], self.lam[index], self.c[index])

    def with_selection(self, c):
        return MixtureParams(self.mu, self.kappa, self.lam, np.full(self.c.shape, c, dtype=float))


@dataclass
class UnnormParams:
    mu_raw: np.ndarray
    kappa_raw: np.ndarray
    lambda_raw: np.ndarray
    c_raw: np.ndarray

    @property
    def k(self):
        return self.kappa_raw.shape[-1]

    @property
    def dim(self):
        return self.mu_raw.shape[-1]

    @staticmethod
    def output_size(k, d):
        return (2 + d) * k + 1

    @classmethod
    def from_vector(cls, v, k, d):
        """Split field outputs laid out as
        ``[mu_raw (K*d), kappa_raw (K), lambda_raw (K), c_raw]``."""
        v = np.asarray(v, dtype=float)
        lead = v.shape[:-1]
        kd = k * d
        return cls(
            mu_raw=v[..., :kd].reshape(lead + (k, d)),
            kappa_raw=v[..., kd:kd + k],
            lambda_raw=v[..., kd + k:kd + 2 * k],
            c_raw=v[..., kd + 2 * k],
        )

    def to_vector(self):
        lead = self.c_raw.shape
        return np.concatenate(
            [
                self.mu_raw.reshape(lead + (-1,)),
                self.kappa_raw,
                self.lambda_raw,
                np.asarray(self.c_raw)[..., None],
            ],
            axis=-1,
        )

    def __add__(self, other):
        return UnnormParams(
            self.mu_raw + other.mu_raw,
            self.kappa_raw + other.kappa_raw,
            self.lambda_raw + other.lambda_raw,
            self.c_raw + other.c_raw,
        )

    def scale(self, factor):
        f = np.asarray(factor, dtype=float)
        return UnnormParams(
            self.mu_raw * f[..., None, None],
            self.kappa_raw * f[..., None],
            self.lambda_raw * f[..., None],
            self.c_raw * f,
        )


def normalize(unnorm):
    norm = np.linalg.norm(unnorm.mu_raw, axis=-1, keepdims=True)
    return MixtureParams(
        mu=unnorm.mu_raw / np.maximum(norm, MU_NORM_FLOOR),
        kappa=np.clip(np.exp(unnorm.kappa_raw), KAPPA_MIN, KAPPA_MAX),
        lam=softmax(unnorm.lambda_raw, axis=-1),
        c=expit(unnorm.c_raw),
    )


def dot(u, v):
    return np.einsum("...i,...i->...", u, v)


def vmf_log_pdf(nu, mu, kappa):
    nu = np.asarray(nu, dtype=float)
    mu = np.asarray(mu, dtype=float)
    kappa = np.asarray(kappa, dtype=float)
    t_ = dot(mu, nu)
    d = mu.shape[-1]
    if d == 2:
        return kappa * (t_ - 1.0) - np.log(2 * math.pi * i0e(kappa))
    if d == 3:
        small = kappa < 1e-8
        safe = np.where(small, 1.0, kappa)
        norm = np.where(small, 0.5, safe / -np.expm1(-2.0 * safe))
        return np.log(norm / (2 * math.pi)) + kappa * (t_ - 1.0)
    raise ValueError(f"unsupported dimension {d}")


def vmf_pdf(nu, mu, kappa):
    return np.exp(vmf_log_pdf(nu, mu, kappa))


def vmf_dlog_dkappa(nu, mu, kappa):
    """Derivative of the log density with respect to the concentration."""
    t_ = dot(np.asarray(mu, dtype=float), np.asarray(nu, dtype=float))
    kappa = np.asarray(kappa, dtype=float)
    d = np.shape(mu)[-1]
    if d == 2:
        return t_ - i1e(kappa) / i0e(kappa)
    small = kappa < 1e-4
    safe = np.where(small, 1.0, kappa)
    langevin = np.where(small, kappa / 3.0, 1.0 / np.tanh(safe) - 1.0 / safe)
    return t_ - langevin


def _orthonormal_frame(mu):
    x, y, z = mu[..., 0], mu[..., 1], mu[..., 2]
    sign = np.where(z >= 0, 1.0, -1.0)
    a = -1.0 / (sign + z)
    b = x * y * a
    b1 = np.stack([1.0 + sign * x * x * a, sign * b, -sign * x], axis=-1)
    b2 = np.stack([b, sign + y * y * a, -y], axis=-1)
    return b1, b2


def vmf_sample(rng, mu, kappa):
    """Draw one direction per row of ``mu``/``kappa``."""
    mu = np.asarray(mu, dtype=float)
    kappa = np.asarray(kappa, dtype=float)
    shape = np.broadcast_shapes(mu.shape[:-1], kappa.shape)
    d = mu.shape[-1]
    if d == 2:
        theta = rng.vonmises(np.arctan2(mu[..., 1], mu[..., 0]), kappa, size=shape)
        return np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    if d == 3:
        u = rng.random(shape)
        phi = 2 * math.pi * rng.random(shape)
        small = kappa < 1e-8
        safe = np.where(small, 1.0, kappa)
        tail = 1.0 + np.log1p((1.0 - u) * np.expm1(-2.0 * safe)) / safe
        cos_t = np.where(small, 1.0 - 2.0 * u, tail)
        cos_t = np.clip(cos_t, -1.0, 1.0)
        sin_t = np.sqrt(1.0 - cos_t * cos_t)
        mu = np.broadcast_to(mu, shape + (3,))
        b1, b2 = _orthonormal_frame(mu)
        return (
            cos_t[..., None] * mu
            + (sin_t * np.cos(phi))[..., None] * b1
            + (sin_t * np.sin(phi))[..., None] * b2
        )
    raise ValueError(f"unsupported dimension {d}")


def component_pdfs(nu, params):
    return vmf_pdf(np.asarray(nu)[..., None, :], params.mu, params.kappa)


def mixture_pdf(nu, params):
    return np.sum(params.lam * component_pdfs(nu, params), axis=-1)


def mixture_sample(rng, params):
    if params.k == 1:
        return vmf_sample(rng, params.mu[..., 0, :], params.kappa[..., 0])
    u = rng.random(params.shape)
    cdf = np.cumsum(params.lam, axis=-1)
    idx = np.minimum(np.sum(cdf < u[..., None], axis=-1), params.k - 1)
    mu = np.take_along_axis(params.mu, idx[..., None, None], axis=-2)[..., 0, :]
    kappa = np.take_along_axis(params.kappa, idx[..., None], axis=-1)[..., 0]
    return vmf_sample(rng, mu, kappa)


def reflect(nu, n):
    return nu - 2.0 * dot(nu, n)[..., None] * n


def reflected_pdf(nu, params, n):
    nu = np.asarray(nu, dtype=float)
    n = np.asarray(n, dtype=float)
    valid = dot(nu, n) > 0
    return np.where(valid, mixture_pdf(nu, params) + mixture_pdf(reflect(nu, n), params), 0.0)


def _redraw_tangent(rng, draw, nu, n):
    """Redraw rows that landed exactly on the tangent line (measure zero)."""
    tangent = dot(nu, n) == 0
    while tangent.any():
        idx = np.flatnonzero(tangent)
        nu[idx] = draw(idx)
        tangent[idx] = dot(nu[idx], n[idx]) == 0
    return nu


def reflected_sample(rng, params, n):
    n = np.broadcast_to(np.asarray(n, dtype=float), params.mu.shape[:-2] + (params.dim,))
    nu = np.array(mixture_sample(rng, params))
    if nu.ndim == 1:
        nu, n1 = nu[None], n[None]
        one = _redraw_tangent(rng, lambda idx: mixture_sample(rng, params), nu, n1)
        return np.where(dot(one, n1)[..., None] < 0, reflect(one, n1), one)[0]
    nu = _redraw_tangent(rng, lambda idx: mixture_sample(rng, params.take(idx)), nu, n)
    return np.where(dot(nu, n)[..., None] < 0, reflect(nu, n), nu)


def has_normal(n):
    return np.any(np.asarray(n) != 0, axis=-1)


def uniform_dir_pdf(nu, n=None, d=2):
    nu = np.asarray(nu, dtype=float)
    full = np.full(nu.shape[:-1], 1.0 / SPHERE_AREA[d])
    if n is None:
        return full
    n = np.asarray(n, dtype=float)
    half = np.where(dot(nu, n) > 0, 2.0 / SPHERE_AREA[d], 0.0)
    return np.where(has_normal(n), half, full)


def uniform_dir_sample(rng, n=None, d=2, size=None):
    """Uniform directions; rows with a normal are folded onto the walk-side hemisphere."""
    if n is not None:
        n = np.asarray(n, dtype=float)
        size = n.shape[:-1]
    if size is None:
        size = ()
    elif np.isscalar(size):
        size = (int(size),)
    size = tuple(size)
    zero = np.zeros(size)
    mu = np.zeros(size + (d,))
    mu[..., 0] = 1.0
    nu = np.array(vmf_sample(rng, mu, zero))
    if n is None:
        return nu
    single = nu.ndim == 1
    nu, n, mu, zero = np.atleast_2d(nu), np.atleast_2d(n), np.atleast_2d(mu), np.atleast_1d(zero)
    idx = np.flatnonzero(has_normal(n))
    if idx.size:
        sub, sub_n = nu[idx], n[idx]
        sub = _redraw_tangent(rng, lambda i: vmf_sample(rng, mu[idx[i]], zero[idx[i]]), sub, sub_n)
        nu[idx] = np.where(dot(sub, sub_n)[..., None] < 0, reflect(sub, sub_n), sub)
    return nu[0] if single else nu


def guided_pdf(nu, params, n=None, reflection=True):
    """Density of the guided technique: reflected on Neumann rows, else the plain mixture.

    Without reflection, Neumann rows keep the plain mixture restricted to the walk side.
    """
    v = mixture_pdf(nu, params)
    if n is None:
        return v
    n = np.asarray(n, dtype=float)
    on_boundary = has_normal(n)
    if reflection:
        return np.where(on_boundary, reflected_pdf(nu, params, n), v)
    return np.where(on_boundary & (dot(nu, n) <= 0), 0.0, v)


def guided_sample(rng, params, n=None, reflection=True):
    if n is None or not reflection:
        return mixture_sample(rng, params)
    n = np.asarray(n, dtype=float)
    on_boundary = has_normal(n)
    nu = np.array(mixture_sample(rng, params))
    if not np.any(on_boundary):
        return nu
    if nu.ndim == 1:
        one, n1 = nu[None], n[None]
        one = _redraw_tangent(rng, lambda i: mixture_sample(rng, params), one, n1)
        return np.where(dot(one, n1)[..., None] < 0, reflect(one, n1), one)[0]
    idx = np.flatnonzero(on_boundary)
    sub = nu[idx]
    sub_n = n[idx]
    sub = _redraw_tangent(rng, lambda i: mixture_sample(rng, params.take(idx[i])), sub, sub_n)
    nu[idx] = np.where(dot(sub, sub_n)[..., None] < 0, reflect(sub, sub_n), sub)
    return nu


def mis_pdf(nu, params, n=None, d=2, reflection=True):
    p_g = guided_pdf(nu, params, n, reflection)
    p_u = uniform_dir_pdf(nu, n, d)
    return params.c * p_g + (1.0 - params.c) * p_u


@dataclass
class MisSample:
    nu: np.ndarray
    pdf: np.ndarray
    pdf_g: np.ndarray
    pdf_u: np.ndarray
    guided: np.ndarray


def mis_sample(rng, params, n=None, d=2, reflection=True):
    """One-sample MIS: the guided technique with probability ``c``, else uniform."""
    shape = params.shape
    guided = rng.random(shape) < params.c
    if n is not None:
        n = np.broadcast_to(np.asarray(n, dtype=float), shape + (d,))
    if not shape:
        if guided:
            nu = guided_sample(rng, params, n, reflection)
        else:
            nu = uniform_dir_sample(rng, n, d)
    else:
        nu = np.zeros(shape + (d,))
        gi = np.flatnonzero(guided)
        ui = np.flatnonzero(~guided)
        if gi.size:
            nu[gi] = guided_sample(rng, params.take(gi), None if n is None else n[gi], reflection)
        if ui.size:
            nu[ui] = uniform_dir_sample(rng, None if n is None else n[ui], d, size=ui.shape)
    p_g = guided_pdf(nu, params, n, reflection)
    p_u = uniform_dir_pdf(nu, n, d)
    pdf = params.c * p_g + (1.0 - params.c) * p_u
    return MisSample(nu, pdf, p_g, p_u, guided)


def mixture_grad(nu, unnorm):
    """Mixture density and its gradient with respect to every raw parameter.

    Returns ``(V, grad)`` where ``grad`` is an :class:`UnnormParams` of partial derivatives
    (``c_raw`` does not enter the mixture, so its entry is zero).
    """
    params = normalize(unnorm)
    nu = np.asarray(nu, dtype=float)[..., None, :]
    v = vmf_pdf(nu, params.mu, params.kappa)
    weighted = params.lam * v
    total = weighted.sum(axis=-1)

    mu_norm = np.maximum(np.linalg.norm(unnorm.mu_raw, axis=-1), MU_NORM_FLOOR)
    cos_t = dot(params.mu, nu)
    tangent = nu - cos_t[..., None] * params.mu
    d_mu = (weighted * params.kappa / mu_norm)[..., None] * tangent

    raw_kappa = np.exp(unnorm.kappa_raw)
    free = (raw_kappa >= KAPPA_MIN) & (raw_kappa <= KAPPA_MAX)
    dlog = vmf_dlog_dkappa(nu, params.mu, params.kappa)
    d_kappa = np.where(free, weighted * dlog * params.kappa, 0.0)

    d_lambda = params.lam * (v - total[..., None])

    d_c = np.zeros_like(np.asarray(unnorm.c_raw, dtype=float))
    grad = UnnormParams(d_mu, d_kappa, d_lambda, d_c)
    return total, grad
