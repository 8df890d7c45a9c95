from ..sampler import SamplerBase, FixedSelectionSampler, as_selection


class GuidingOnlySampler(FixedSelectionSampler):
    """Always samples the guided mixture."""

    name = "guiding_only"
    c = 1.0


class FixedMisSampler(FixedSelectionSampler):
    name = "fixed_mis"
    c = 0.5

    def init(self, solver=None):
        super().init(solver)
        if solver is not None:
            self.c = as_selection(solver.config.fixed_c)


class LearnableMisSampler(SamplerBase):
    """MIS between guided and uniform sampling with a learned per-position selection."""

    name = "learnable_mis"
    learn_selection = True
