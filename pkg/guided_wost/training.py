from dataclasses import dataclass, field
import typing as t
import time
import logging
import numpy as np
from .spherical import UnnormParams, normalize, mixture_grad, reflect, guided_pdf, has_normal


logger = logging.getLogger(__name__)


PDF_FLOOR = 1e-8
V_FLOOR = 1e-12
SELECTION_FRACTION = 0.2
DEFAULT_THRESHOLD = 256


@dataclass
class GuideRecords:
    """Training samples as parallel arrays; a zero ``normal`` row marks an interior record."""

    x: np.ndarray
    nu: np.ndarray
    target: np.ndarray
    pdf_mis: np.ndarray
    pdf_g: np.ndarray
    pdf_u: np.ndarray
    normal: np.ndarray

    CSV_HEADER = ("x", "y", "nu_x", "nu_y", "target", "pdf_mis", "pdf_g", "pdf_u", "on_neumann")

    @classmethod
    def empty(cls, d=2):
        return cls(
            x=np.zeros((0, 2)),
            nu=np.zeros((0, d)),
            target=np.zeros(0),
            pdf_mis=np.zeros(0),
            pdf_g=np.zeros(0),
            pdf_u=np.zeros(0),
            normal=np.zeros((0, d)),
        )

    @classmethod
    def concat(cls, parts):
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty()
        return cls(**{
            name: np.concatenate([getattr(p, name) for p in parts])
            for name in ("x", "nu", "target", "pdf_mis", "pdf_g", "pdf_u", "normal")
        })

    def __len__(self):
        return self.target.shape[0]

    @property
    def on_neumann(self):
        return has_normal(self.normal)

    def take(self, index):
        return GuideRecords(
            self.x[index],
            self.nu[index],
            self.target[index],
            self.pdf_mis[index],
            self.pdf_g[index],
            self.pdf_u[index],
            self.normal[index],
        )

    def rows(self):
        on_neumann = self.on_neumann
        for i in range(len(self)):
            yield (
                self.x[i, 0], self.x[i, 1], self.nu[i, 0], self.nu[i, 1], self.target[i],
                self.pdf_mis[i], self.pdf_g[i], self.pdf_u[i], int(on_neumann[i]),
            )


@dataclass
class TraceStep:
    """One wavefront step of a set of walks, expressed in each walk's local frame.

    The value of the sub-walk starting at this step is
    ``contrib + weight * survival * value_of_next_step``.
    """

    walk: np.ndarray
    contrib: np.ndarray
    weight: np.ndarray
    survival: np.ndarray
    x: np.ndarray
    nu: np.ndarray
    pdf_mis: np.ndarray
    pdf_g: np.ndarray
    pdf_u: np.ndarray
    normal: np.ndarray
    recordable: np.ndarray


@dataclass
class WalkTrace:
    n_walks: int
    steps: t.List[TraceStep] = field(default_factory=list)

    def append(self, step):
        self.steps.append(step)

    def __len__(self):
        return len(self.steps)


def backfill_targets(trace, terminal):
    """Reverse scan over ``trace``: every step's target is the magnitude of the realized
    estimate from the next walk position onward.

    ``terminal`` holds the value each walk ended on (0 for killed or escaped walks). Returns
    the records of recordable steps and the per-walk estimates the scan reconstructs.
    """
    u = np.array(terminal, dtype=float)
    parts = []
    for step in reversed(trace.steps):
        nxt = step.survival * u[step.walk]
        u[step.walk] = step.contrib + step.weight * nxt
        keep = step.recordable
        if np.any(keep):
            parts.append(
                GuideRecords(
                    x=step.x[keep],
                    nu=step.nu[keep],
                    target=np.abs(nxt[keep]),
                    pdf_mis=step.pdf_mis[keep],
                    pdf_g=step.pdf_g[keep],
                    pdf_u=step.pdf_u[keep],
                    normal=step.normal[keep],
                )
            )
    parts.reverse()
    return GuideRecords.concat(parts), u


def kl_weight(target, pdf_mis, v):
    """Factor multiplying the mixture gradient in the single-sample KL gradient."""
    return -target / (pdf_mis * v)


def kl_grad(records, unnorm, reflection=True):
    """Per-record gradient of ``-target * log V_eff / pdf_mis`` with respect to the raw
    parameters, where ``V_eff`` is the reflected mixture on Neumann records.

    Returns the gradient and a mask of records skipped because ``V_eff`` fell below the floor.
    """
    v, grad = mixture_grad(records.nu, unnorm)
    if reflection:
        on_neumann = records.on_neumann
        if np.any(on_neumann):
            v_r, grad_r = mixture_grad(reflect(records.nu, records.normal), unnorm)
            v = np.where(on_neumann, v + v_r, v)
            grad = grad + grad_r.scale(on_neumann.astype(float))
    skipped = v < V_FLOOR
    weight = kl_weight(records.target, records.pdf_mis, np.where(skipped, 1.0, v))
    scale = np.where(skipped, 0.0, weight)
    return grad.scale(scale), skipped


def selection_grad_values(target, pdf_g, pdf_u, pdf_mis, c, e=SELECTION_FRACTION):
    """Gradient of the selection loss with respect to the raw selection logit."""
    mixed = c * pdf_g + (1.0 - c) * pdf_u
    grad_c = -e * target * (pdf_g - pdf_u) / (mixed * pdf_mis)
    return grad_c * c * (1.0 - c)


def selection_grad(records, params, e=SELECTION_FRACTION, reflection=True):
    pdf_g = guided_pdf(records.nu, params, records.normal, reflection)
    return selection_grad_values(records.target, pdf_g, records.pdf_u, records.pdf_mis, params.c, e)


@dataclass
class TrainStats:
    records: int = 0
    skipped: int = 0
    steps: int = 0
    grad_norm: float = 0.0
    seconds: float = 0.0

    def merge(self, other):
        steps = self.steps + other.steps
        norm = (
            (self.grad_norm * self.steps + other.grad_norm * other.steps) / steps if steps else 0.0
        )
        return TrainStats(
            self.records + other.records,
            self.skipped + other.skipped,
            steps,
            norm,
            self.seconds + other.seconds,
        )


def train_batch(
    field,
    records,
    minibatch=16384,
    rng=None,
    learn_selection=True,
    e=SELECTION_FRACTION,
    reflection=True,
):
    """One shuffled pass over ``records``: one Adam step per minibatch."""
    start = time.perf_counter()
    stats = TrainStats()
    if not len(records):
        return stats
    rng = rng or np.random.default_rng(0)
    usable = (records.pdf_mis >= PDF_FLOOR) & np.isfinite(records.target)
    stats.skipped = int(np.count_nonzero(~usable))
    order = rng.permutation(np.flatnonzero(usable))
    norms = []
    k, d = field.config.k, field.config.dim

    for begin in range(0, order.size, minibatch):
        batch = records.take(order[begin:begin + minibatch])
        out, record = field.forward(batch.x)
        unnorm = UnnormParams.from_vector(out, k, d)
        grad, skipped = kl_grad(batch, unnorm, reflection)
        d_out = grad.to_vector()
        if learn_selection:
            d_out[:, -1] += selection_grad(batch, normalize(unnorm), e, reflection)
        d_out /= len(batch)
        field.backward(record, d_out)
        field.adam_step()
        stats.records += len(batch)
        stats.skipped += int(np.count_nonzero(skipped))
        stats.steps += 1
        norms.append(float(np.linalg.norm(d_out)))

    if stats.skipped:
        logger.warning("Skipped %d of %d guiding records", stats.skipped, len(records))
    stats.grad_norm = float(np.mean(norms)) if norms else 0.0
    stats.seconds = time.perf_counter() - start
    logger.debug(
        "Trained on %d records in %d steps (%.3fs)", stats.records, stats.steps, stats.seconds
    )
    return stats


def training_active(wpp_completed, threshold=DEFAULT_THRESHOLD):
    return wpp_completed < threshold
