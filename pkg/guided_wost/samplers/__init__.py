from .uniform import UniformSampler
from .guiding import GuidingOnlySampler, FixedMisSampler, LearnableMisSampler


SAMPLERS = {
    cls.name: cls
    for cls in (UniformSampler, GuidingOnlySampler, FixedMisSampler, LearnableMisSampler)
}
