import numpy as np
import pytest

from dwropt.errors import ConfigurationError, NumericalError, OutOfDomainError
from dwropt.field import (
    AdvectionField,
    CoefficientField,
    RasterField,
    average_advection,
    correlated_noise,
    eval_coefficient,
    gen_gaussian_raster,
    stream_advection,
)
from dwropt.mesh import Domain, build_hierarchy


class ConstantAdvection:
    def __init__(self, vector):
        self.vector = np.asarray(vector, dtype=float)

    def values_at(self, points):
        return np.broadcast_to(self.vector, (len(np.atleast_2d(points)), 2)).copy()


# ---------------------------------------------------------------------------
# rasters


def test_raster_determinism():
    a = gen_gaussian_raster(64, 64, 0.05, seed=3)
    b = gen_gaussian_raster(64, 64, 0.05, seed=3)
    assert np.array_equal(a.values, b.values)
    c = gen_gaussian_raster(64, 64, 0.05, seed=4)
    assert not np.array_equal(a.values, c.values)


def test_raster_spans_full_8bit_range():
    r = gen_gaussian_raster(128, 128, 0.02, seed=1)
    assert r.values.dtype == np.uint8
    assert r.values.min() == 0
    assert r.values.max() == 255


def test_large_correlation_smooths_noise():
    # smoothing with a kernel much wider than the raster must shrink the
    # sample std by at least 10x compared with the unconvolved noise
    raw = correlated_noise(64, 64, 0.0, seed=11)
    smooth = correlated_noise(64, 64, 10 * 64.0, seed=11)
    assert smooth.std() <= raw.std() / 10.0


def test_paper_scale_raster_parameters():
    r = gen_gaussian_raster(1024, 1024, 0.0025, seed=0)
    assert r.values.shape == (1024, 1024)
    assert r.values.min() == 0 and r.values.max() == 255


def test_invalid_raster_parameters():
    with pytest.raises(ConfigurationError):
        gen_gaussian_raster(0, 4, 0.1, seed=0)
    with pytest.raises(ConfigurationError):
        gen_gaussian_raster(4, 4, -1.0, seed=0)


def test_pgm_round_trip(tmp_path):
    r = gen_gaussian_raster(33, 17, 0.05, seed=9)
    path = tmp_path / "field.pgm"
    r.to_pgm(path)
    back = RasterField.from_pgm(path)
    assert np.array_equal(r.values, back.values)
    assert back.values.dtype == np.uint8


def test_csv_round_trip(tmp_path):
    values = np.linspace(0.0, 1.0, 12).reshape(3, 4) ** 3
    r = RasterField(values=values)
    path = tmp_path / "field.csv"
    r.to_csv(path)
    back = RasterField.from_csv(path)
    assert np.array_equal(r.values, back.values)


def test_raster_lookup_out_of_extent():
    r = RasterField(values=np.zeros((4, 4), dtype=np.uint8))
    with pytest.raises(OutOfDomainError):
        r.nearest([(1.5, 0.5)])


# ---------------------------------------------------------------------------
# coefficient fields


def test_constant_coefficient():
    f = CoefficientField.constant(3.0)
    assert np.allclose(eval_coefficient(f, (0.3, 0.9)), 3.0 * np.eye(2))


def test_lognormal_endpoints():
    values = np.zeros((2, 2), dtype=np.uint8)
    values[0, 0] = 0
    values[1, 1] = 255
    f = CoefficientField.lognormal(RasterField(values=values), gamma=0.5)
    low = eval_coefficient(f, (0.2, 0.2))
    high = eval_coefficient(f, (0.8, 0.8))
    assert np.allclose(low, 0.5 * np.eye(2))
    assert np.allclose(high, 0.5 * np.exp(10.0) * np.eye(2))


def test_laminate_layers():
    f = CoefficientField.laminate(axis=0, a=1.0, b=4.0, layer_width=0.25)
    assert np.allclose(eval_coefficient(f, (0.1, 0.9)), np.diag([1.0, 1.0]))
    assert np.allclose(eval_coefficient(f, (0.3, 0.1)), np.diag([4.0, 4.0]))


def test_checkerboard_parity():
    f = CoefficientField.checkerboard(a=2.0, b=5.0, tile=0.5)
    assert np.allclose(eval_coefficient(f, (0.25, 0.25)), 2.0 * np.eye(2))
    assert np.allclose(eval_coefficient(f, (0.75, 0.25)), 5.0 * np.eye(2))
    assert np.allclose(eval_coefficient(f, (0.75, 0.75)), 2.0 * np.eye(2))


def test_tensors_always_symmetric():
    raster = gen_gaussian_raster(32, 32, 0.1, seed=5)
    fields = [
        CoefficientField.constant([[2.0, 0.5], [0.5, 1.0]]),
        CoefficientField.laminate(1, 1.0, 3.0, 0.125),
        CoefficientField.checkerboard(1.0, 9.0, 0.25),
        CoefficientField.lognormal(raster, 0.1),
    ]
    rng = np.random.default_rng(0)
    pts = rng.uniform(0.05, 0.95, size=(50, 2))
    for f in fields:
        t = f.tensors_at(pts)
        assert np.allclose(t, t.transpose(0, 2, 1))


def test_lognormal_spd_and_condition():
    raster = gen_gaussian_raster(64, 64, 0.02, seed=2)
    f = CoefficientField.lognormal(raster, gamma=0.05)
    pts = np.random.default_rng(1).uniform(0.0, 1.0, size=(200, 2))
    t = f.tensors_at(pts)
    eigs = np.linalg.eigvalsh(t)
    assert np.all(eigs > 0.0)
    assert t.max() / t[t > 0].min() <= np.exp(10.0) * (1.0 + 1e-12)


# ---------------------------------------------------------------------------
# advection fields


def test_constant_stream_gives_zero_field():
    psi = RasterField(values=np.full((17, 17), 3.7))
    b = stream_advection(psi, scale=2.0, taper_width=0.2, fd_step=0.01)
    pts = np.random.default_rng(0).uniform(0.3, 0.7, size=(40, 2))
    vals = b.values_at(pts)
    assert np.allclose(vals, 0.0, atol=1e-12)


def test_stream_divergence_probe():
    psi = RasterField(values=correlated_noise(33, 33, 2.0, seed=7))
    b = stream_advection(psi, scale=50.0, taper_width=0.1, fd_step=2.0**-9)
    xs = np.linspace(0.0, 1.0, 101)
    gx, gy = np.meshgrid(xs, xs)
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    interior = np.all((pts > 0.01) & (pts < 0.99), axis=1)
    div = b.divergence_fd(pts[interior])
    bmax = b.max_magnitude()
    assert bmax > 0.0
    assert np.abs(div).max() <= 1e-8 * bmax


def test_stream_vanishes_on_boundary():
    psi = RasterField(values=correlated_noise(33, 33, 2.0, seed=8))
    b = stream_advection(psi, scale=10.0, taper_width=0.1, fd_step=2.0**-8)
    ts = np.linspace(0.0, 1.0, 57)
    edges = np.concatenate(
        [
            np.column_stack([ts, np.zeros_like(ts)]),
            np.column_stack([ts, np.ones_like(ts)]),
            np.column_stack([np.zeros_like(ts), ts]),
            np.column_stack([np.ones_like(ts), ts]),
        ]
    )
    assert np.allclose(b.values_at(edges), 0.0, atol=0.0)


def test_stream_scaled_to_paper_range():
    psi = RasterField(values=correlated_noise(65, 65, 2.0, seed=3))
    raw = stream_advection(psi, scale=1.0, taper_width=0.05, fd_step=2.0**-9)
    target = 300.0
    scale = target / raw.max_magnitude()
    b = stream_advection(psi, scale=scale, taper_width=0.05, fd_step=2.0**-9)
    m = b.max_magnitude()
    assert 0.0 < m <= target * (1.0 + 1e-9)
    assert m > 0.9 * target


def test_degenerate_taper_rejected():
    psi = RasterField(values=np.zeros((9, 9)))
    with pytest.raises(ConfigurationError):
        stream_advection(psi, 1.0, taper_width=0.001, fd_step=0.01)
    with pytest.raises(ConfigurationError):
        stream_advection(psi, 1.0, taper_width=0.6, fd_step=0.01)


# ---------------------------------------------------------------------------
# cell averages


def test_average_of_constant_field():
    h = build_hierarchy(Domain(), 0.25, 0.125, 0.0625)
    avg = average_advection(ConstantAdvection((2.0, -1.5)), h)
    assert np.allclose(avg, np.array([2.0, -1.5]))


def test_average_of_curl_over_domain_vanishes():
    # with a single sampling cell covering the whole domain, the mean of a
    # tapered curl field is zero by the divergence theorem
    h = build_hierarchy(Domain(), 1.0, 0.125, 2.0**-6)
    psi = RasterField(values=correlated_noise(33, 33, 3.0, seed=12))
    b = stream_advection(psi, scale=100.0, taper_width=0.1, fd_step=2.0**-7)
    avg = average_advection(b, h)

    # fine-quadrature oracle: dense midpoint average
    n = 512
    xs = (np.arange(n) + 0.5) / n
    gx, gy = np.meshgrid(xs, xs)
    oracle = b.values_at(np.column_stack([gx.ravel(), gy.ravel()])).mean(axis=0)
    bmax = b.max_magnitude()
    assert np.abs(avg).max() <= 5e-3 * bmax
    assert np.abs(avg - oracle).max() <= 5e-3 * bmax


def test_average_of_odd_symmetric_field():
    h = build_hierarchy(Domain(), 1.0, 0.5, 0.125)

    class Odd:
        def values_at(self, points):
            p = np.atleast_2d(points)
            return np.column_stack([p[:, 0] - 0.5, (p[:, 1] - 0.5) ** 3])

    avg = average_advection(Odd(), h)
    assert np.abs(avg).max() <= 1e-12


def test_geometric_mean_requires_positive_diagonal():
    from dwropt.upscale import geometric_mean_model

    h = build_hierarchy(Domain(), 0.5, 0.25, 0.125)
    bad = CoefficientField.constant([[0.0, 0.0], [0.0, 1.0]])
    with pytest.raises(NumericalError, match="sampling cell"):
        geometric_mean_model(bad, h)
