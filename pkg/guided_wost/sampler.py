import importlib
import numpy as np
from .spherical import normalize, mis_sample
from .training import train_batch, TrainStats
from .errors import ConfigError


class SamplerBase:
    """Chooses the next walk direction and, for guided samplers, trains the field."""

    name = None
    uses_field = True
    learn_selection = False

    def init(self, solver=None):
        self.solver = solver

    def select(self, params):
        return params

    def decode(self, field, xs):
        return self.select(normalize(field.eval_batch(xs)))

    def sample(self, rng, params, normals, reflection=True):
        return mis_sample(rng, params, normals, d=2, reflection=reflection)

    def train(self, field, records, rng, minibatch, reflection=True, e=0.2):
        if not self.uses_field:
            return TrainStats()
        return train_batch(
            field,
            records,
            minibatch=minibatch,
            rng=rng,
            learn_selection=self.learn_selection,
            e=e,
            reflection=reflection,
        )

    def __repr__(self):
        return f"<{self.__class__.__name__} {self.name}>"


class FixedSelectionSampler(SamplerBase):
    """Guided sampler whose selection probability is a constant instead of the field's."""

    c = 1.0

    def select(self, params):
        return params.with_selection(self.c)


def load_sampler(sampler, solver=None):
    """Resolve a sampler given as an instance, a class, a registered name or ``module:Class``."""
    from .samplers import SAMPLERS

    if isinstance(sampler, str):
        if sampler in SAMPLERS:
            sampler = SAMPLERS[sampler]
        else:
            if ":" in sampler:
                module, class_name = sampler.rsplit(":", 1)
            else:
                module, class_name = sampler, None
            try:
                m = importlib.import_module(module)
            except ImportError:
                raise ConfigError("SAMPLER", f"unknown sampler '{sampler}'")
            if class_name:
                found = getattr(m, class_name, None)
            else:
                found = next(
                    (
                        cls for cls in m.__dict__.values()
                        if isinstance(cls, type) and issubclass(cls, SamplerBase)
                        and cls.__module__ == m.__name__
                    ),
                    None,
                )
            if not (isinstance(found, type) and issubclass(found, SamplerBase)):
                raise ConfigError("SAMPLER", f"sampler class not found in '{sampler}'")
            sampler = found
    if isinstance(sampler, type):
        sampler = sampler()
    if not isinstance(sampler, SamplerBase):
        raise ConfigError("SAMPLER", f"not a sampler: {sampler!r}")
    sampler.init(solver)
    return sampler


def as_selection(value):
    c = float(value)
    if not 0.0 < c < 1.0:
        raise ConfigError("FIXED_C", "must lie strictly between 0 and 1")
    return np.float64(c)
