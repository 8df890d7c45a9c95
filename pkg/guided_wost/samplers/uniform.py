import numpy as np
from ..sampler import SamplerBase
from ..spherical import MisSample, uniform_dir_sample, uniform_dir_pdf


class UniformSampler(SamplerBase):
    name = "uniform"
    uses_field = False

    def decode(self, field, xs):
        return None

    def sample(self, rng, params, normals, reflection=True):
        nu = uniform_dir_sample(rng, normals, d=2)
        pdf = uniform_dir_pdf(nu, normals, d=2)
        return MisSample(nu, pdf, pdf, pdf, np.zeros(pdf.shape, dtype=bool))
