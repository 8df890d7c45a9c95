import math
import numpy as np
import pytest
from scipy.special import expit
from guided_wost.field import FieldConfig, GuidingField
from guided_wost.spherical import (
    MixtureParams,
    UnnormParams,
    VmfComponent,
    mixture_pdf,
    normalize,
    reflect,
)
from guided_wost.training import (
    GuideRecords,
    TraceStep,
    WalkTrace,
    backfill_targets,
    kl_grad,
    kl_weight,
    selection_grad,
    selection_grad_values,
    train_batch,
    training_active,
)


def random_directions(rng, n):
    theta = rng.uniform(0, 2 * math.pi, n)
    return np.stack([np.cos(theta), np.sin(theta)], axis=1)


def make_records(rng, n, neumann_fraction=0.5):
    nu = random_directions(rng, n)
    normal = random_directions(rng, n)
    normal = np.where((np.sum(normal * nu, axis=1) < 0)[:, None], -normal, normal)
    normal[rng.random(n) >= neumann_fraction] = 0.0
    pdf_g = rng.uniform(0.05, 1.0, n)
    pdf_u = np.full(n, 1 / (2 * math.pi))
    return GuideRecords(
        x=rng.random((n, 2)),
        nu=nu,
        target=rng.uniform(0.0, 2.0, n),
        pdf_mis=0.5 * pdf_g + 0.5 * pdf_u,
        pdf_g=pdf_g,
        pdf_u=pdf_u,
        normal=normal,
    )


def random_unnorm(rng, n, k):
    return UnnormParams(
        mu_raw=rng.normal(size=(n, k, 2)),
        kappa_raw=rng.uniform(-1.0, 2.0, (n, k)),
        lambda_raw=rng.normal(size=(n, k)),
        c_raw=rng.normal(size=n),
    )


def make_step(walk, contrib, weight, survival, recordable=None):
    n = len(walk)
    return TraceStep(
        walk=np.asarray(walk),
        contrib=np.asarray(contrib, dtype=float),
        weight=np.asarray(weight, dtype=float),
        survival=np.asarray(survival, dtype=float),
        x=np.zeros((n, 2)),
        nu=np.tile([1.0, 0.0], (n, 1)),
        pdf_mis=np.ones(n),
        pdf_g=np.ones(n),
        pdf_u=np.ones(n),
        normal=np.zeros((n, 2)),
        recordable=np.ones(n, bool) if recordable is None else np.asarray(recordable),
    )


def small_field(**kwargs):
    values = dict(levels=2, resolutions=(4, 8), features=2, hidden=16, k=2)
    values.update(kwargs)
    return GuidingField.create(FieldConfig(**values), ((0.0, 0.0), (1.0, 1.0)))


def test_kl_weight_example():
    assert kl_weight(0.5, 0.3, 0.4) * 0.2 == pytest.approx(-0.833333, abs=1e-6)


def test_kl_grad_zero_target(rng):
    records = make_records(rng, 20)
    records.target[...] = 0.0
    grad, skipped = kl_grad(records, random_unnorm(rng, 20, 3))
    assert not skipped.any()
    assert not np.any(grad.to_vector())


def test_kl_grad_matches_finite_differences(rng):
    n, k = 100, 3
    records = make_records(rng, n)
    unnorm = random_unnorm(rng, n, k)
    on_neumann = records.on_neumann
    reflected = reflect(records.nu, records.normal)

    def loss(vector):
        params = normalize(UnnormParams.from_vector(vector, k, 2))
        v = mixture_pdf(records.nu, params)
        v = v + np.where(on_neumann, mixture_pdf(reflected, params), 0.0)
        return -records.target * np.log(v) / records.pdf_mis

    grad, skipped = kl_grad(records, unnorm)
    assert not skipped.any()
    analytic = grad.to_vector()
    base = unnorm.to_vector()
    h = 1e-6
    for j in range(base.shape[1]):
        hi, lo = base.copy(), base.copy()
        hi[:, j] += h
        lo[:, j] -= h
        fd = (loss(hi) - loss(lo)) / (2 * h)
        assert analytic[:, j] == pytest.approx(fd, rel=1e-3, abs=1e-7)


def test_kl_grad_without_reflection_ignores_normals(rng):
    records = make_records(rng, 30)
    unnorm = random_unnorm(rng, 30, 2)
    plain = GuideRecords(**{**records.__dict__, "normal": np.zeros((30, 2))})
    a, _ = kl_grad(records, unnorm, reflection=False)
    b, _ = kl_grad(plain, unnorm)
    assert np.array_equal(a.to_vector(), b.to_vector())


def test_kl_grad_skips_vanishing_density():
    records = GuideRecords(
        x=np.zeros((1, 2)),
        nu=np.array([[-1.0, 0.0]]),
        target=np.array([1.0]),
        pdf_mis=np.array([0.5]),
        pdf_g=np.array([0.5]),
        pdf_u=np.array([0.5]),
        normal=np.zeros((1, 2)),
    )
    unnorm = UnnormParams(
        mu_raw=np.array([[[1.0, 0.0]]]),
        kappa_raw=np.array([[math.log(1e4)]]),
        lambda_raw=np.zeros((1, 1)),
        c_raw=np.zeros(1),
    )
    grad, skipped = kl_grad(records, unnorm)
    assert skipped.all()
    assert not np.any(grad.to_vector())


def test_selection_grad_examples():
    assert selection_grad_values(1.0, 0.4, 0.1, 0.25, 0.5, 0.2) == pytest.approx(-0.24)
    assert selection_grad_values(1.3, 0.2, 0.2, 0.2, 0.7) == 0.0
    assert selection_grad_values(0.0, 0.9, 0.1, 0.3, 0.4) == 0.0


def test_selection_grad_matches_finite_differences(rng):
    n, e = 100, 0.2
    target = rng.uniform(0, 2, n)
    pdf_g = rng.uniform(0.01, 2, n)
    pdf_u = rng.uniform(0.01, 2, n)
    pdf_mis = rng.uniform(0.1, 1, n)
    c_raw = rng.normal(size=n)

    def loss(raw):
        c = expit(raw)
        return -e * target * np.log(c * pdf_g + (1 - c) * pdf_u) / pdf_mis

    h = 1e-6
    fd = (loss(c_raw + h) - loss(c_raw - h)) / (2 * h)
    analytic = selection_grad_values(target, pdf_g, pdf_u, pdf_mis, expit(c_raw), e)
    assert analytic == pytest.approx(fd, rel=1e-3, abs=1e-9)


def test_selection_grad_uses_guided_pdf(rng):
    records = make_records(rng, 10, neumann_fraction=0.0)
    params = MixtureParams(
        np.tile([1.0, 0.0], (10, 1, 1)),
        np.full((10, 1), 2.0),
        np.ones((10, 1)),
        np.full(10, 0.3),
    )
    expected = selection_grad_values(
        records.target, mixture_pdf(records.nu, params), records.pdf_u, records.pdf_mis, 0.3
    )
    assert np.allclose(selection_grad(records, params), expected)


def test_backfill_single_step():
    trace = WalkTrace(1)
    trace.append(make_step([0], [0.0], [1.0], [1.0]))
    records, estimates = backfill_targets(trace, [2.0])
    assert len(records) == 1
    assert records.target[0] == 2.0
    assert estimates[0] == 2.0


def test_backfill_zero_walk():
    trace = WalkTrace(2)
    trace.append(make_step([0, 1], [0, 0], [0.7, 1.2], [1, 1]))
    trace.append(make_step([0], [0], [0.9], [1]))
    records, estimates = backfill_targets(trace, [0.0, 0.0])
    assert len(records) == 3
    assert not np.any(records.target)
    assert not np.any(estimates)


def test_backfill_matches_suffix_sums():
    contrib = {0: [0.1, -0.4, 0.25], 1: [0.3, -0.2]}
    weight = {0: [0.9, 1.1, -0.8], 1: [1.0, 0.5]}
    survival = {0: [1.0, 2.0, 1.0], 1: [1.0, 1.0]}
    terminal = [1.5, -3.0]

    trace = WalkTrace(2)
    trace.append(make_step([0, 1], [0.1, 0.3], [0.9, 1.0], [1.0, 1.0]))
    trace.append(make_step([0, 1], [-0.4, -0.2], [1.1, 0.5], [2.0, 1.0], [True, False]))
    trace.append(make_step([0], [0.25], [-0.8], [1.0]))
    records, estimates = backfill_targets(trace, terminal)

    def suffix_value(w, k):
        # value of the sub-walk starting at step k, in its own throughput frame
        total, throughput = 0.0, 1.0
        for j in range(k, len(contrib[w])):
            total += throughput * contrib[w][j]
            throughput *= weight[w][j] * survival[w][j]
        return total + throughput * terminal[w]

    def target(w, k):
        return abs(survival[w][k] * suffix_value(w, k + 1))

    expected = [target(0, 0), target(1, 0), target(0, 1), target(0, 2)]
    assert records.target == pytest.approx(expected)
    assert estimates == pytest.approx([suffix_value(0, 0), suffix_value(1, 0)])


def test_records_helpers(rng):
    a = make_records(rng, 3)
    b = make_records(rng, 2)
    both = GuideRecords.concat([a, GuideRecords.empty(), b])
    assert len(both) == 5
    assert np.array_equal(both.take([3, 4]).nu, b.nu)
    assert len(GuideRecords.concat([])) == 0
    rows = list(both.rows())
    assert len(rows) == 5
    assert all(len(r) == len(GuideRecords.CSV_HEADER) for r in rows)
    assert [r[-1] for r in rows] == list(both.on_neumann.astype(int))


def test_train_batch_empty():
    field = small_field()
    stats = train_batch(field, GuideRecords.empty())
    assert stats.steps == 0
    assert stats.records == 0
    assert field.step == 0


def test_train_batch_zero_targets_leave_parameters(rng):
    field = small_field()
    before = {k: v.copy() for k, v in field.params.items()}
    records = make_records(rng, 50)
    records.target[...] = 0.0
    stats = train_batch(field, records, minibatch=16, rng=np.random.default_rng(0))
    assert stats.steps == 4
    assert stats.records == 50
    assert all(np.array_equal(before[k], field.params[k]) for k in before)


def test_train_batch_is_reproducible(rng):
    records = make_records(rng, 200)
    a, b = small_field(), small_field()
    train_batch(a, records, minibatch=64, rng=np.random.default_rng(5))
    train_batch(b, records, minibatch=64, rng=np.random.default_rng(5))
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert a.step == b.step == 4


def test_train_batch_drops_tiny_pdfs(rng):
    records = make_records(rng, 40)
    records.pdf_mis[:10] = 1e-9
    stats = train_batch(small_field(), records, minibatch=100)
    assert stats.records == 30
    assert stats.skipped >= 10


def test_train_batch_selection_switch(rng):
    records = make_records(rng, 64)
    a, b = small_field(), small_field()
    train_batch(a, records, rng=np.random.default_rng(1), learn_selection=False)
    train_batch(b, records, rng=np.random.default_rng(1), learn_selection=True)
    assert not np.array_equal(a.params["b2"][-1:], b.params["b2"][-1:])
    assert np.array_equal(a.params["b2"][-1:], small_field().params["b2"][-1:])


@pytest.mark.slow
def test_training_reduces_kl_divergence():
    target = MixtureParams.from_components(
        [
            VmfComponent(np.array([1.0, 0.0]), 8.0, 0.7),
            VmfComponent(np.array([-0.6, 0.8]), 4.0, 0.3),
        ]
    )
    theta = np.linspace(0, 2 * math.pi, 1440, endpoint=False)
    grid = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    p = mixture_pdf(grid, target)
    x = np.array([[0.4, 0.6]])
    field = small_field(k=4)

    def divergence():
        q = mixture_pdf(grid, normalize(field.eval_batch(x)).take(0))
        return float(np.sum(p * np.log(p / q)) * (2 * math.pi / theta.size))

    rng = np.random.default_rng(0)
    initial = divergence()
    n = 512
    for _ in range(3000):
        nu = random_directions(rng, n)
        records = GuideRecords(
            x=np.repeat(x, n, axis=0),
            nu=nu,
            target=mixture_pdf(nu, target),
            pdf_mis=np.full(n, 1 / (2 * math.pi)),
            pdf_g=np.full(n, 1 / (2 * math.pi)),
            pdf_u=np.full(n, 1 / (2 * math.pi)),
            normal=np.zeros((n, 2)),
        )
        train_batch(field, records, minibatch=n, rng=rng, learn_selection=False)
    assert divergence() < initial / 10


@pytest.mark.parametrize(
    "wpp, threshold, expected",
    [(0, 256, True), (255, 256, True), (256, 256, False), (64, 64, False), (0, 0, False)],
)
def test_training_active(wpp, threshold, expected):
    assert training_active(wpp, threshold) is expected


def test_training_active_default():
    assert training_active(0)
    assert not training_active(256)
