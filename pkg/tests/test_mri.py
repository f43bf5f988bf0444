"""Tests for sequence timing, signal synthesis, reconstruction, decoding."""

import numpy as np
import pytest

from hemoflow.errors import SequenceError, ValidationError
from hemoflow.flowfields import VelocityField
from hemoflow.mesh import generate_box_mesh, tet_volumes
from hemoflow.mri import (ENCODE_AXES, ImageVolume, KSpaceData,
                          SequenceParams, _quadrature, add_noise,
                          load_images, load_kspace, phase_to_velocity,
                          reconstruct, save_images, save_kspace,
                          sequence_timings, synthesize_frame,
                          synthesize_signal)

PROTOCOL_DEFAULTS = SequenceParams()

# small settings that keep synthesis fast: an 8 mm cube in a 16 mm FOV
SMALL = SequenceParams(matrix=(8, 8, 8), voxel=(0.002, 0.002, 0.002),
                       adc_bandwidth=32e3)


def small_box(divisions=(2, 2, 2)):
    return generate_box_mesh(size=(0.008, 0.008, 0.008), divisions=divisions)


def uniform_field(mesh, u):
    values = np.tile(np.asarray(u, dtype=float), (1, mesh.n_vertices, 1))
    return VelocityField(times=np.array([0.0]), values=values)


def decode(mesh, field, params, **kw):
    k = synthesize_frame(mesh, np.ones(mesh.n_vertices), field, params, **kw)
    return phase_to_velocity(reconstruct(k))


# =========================================================================
# Sequence timings
# =========================================================================

def test_default_parameters_echo_time():
    t = sequence_timings(PROTOCOL_DEFAULTS)
    assert abs(t.echo_time - 1.66e-3) < 0.05e-3, \
        f"TE {t.echo_time * 1e3:.3f} ms outside 1.66 +/- 0.05 ms"
    # the constituent durations all sit on the 10 us gradient raster
    # except the readout window, which follows the ADC clock
    assert t.durations["bipolar"] == pytest.approx(760e-6)
    assert t.durations["encode"] == pytest.approx(380e-6)
    assert t.durations["readout_ramp"] == pytest.approx(70e-6)
    assert t.durations["readout_window"] == pytest.approx(112 / 128e3)


def test_sample_times_are_echo_centered():
    t = sequence_timings(PROTOCOL_DEFAULTS)
    n = PROTOCOL_DEFAULTS.acquired_readout
    assert t.sample_times.shape == (n,)
    spacing = np.diff(t.sample_times)
    assert np.allclose(spacing, t.dwell, rtol=0, atol=1e-15), \
        "samples must be spaced by exactly one ADC dwell"
    assert t.sample_times[n // 2] == pytest.approx(t.echo_time), \
        "the k-space center sample defines the echo"
    assert t.sample_times.min() >= t.echo_time - 0.5 * n * t.dwell - 1e-12


def test_doubling_bandwidth_halves_dwell():
    base = sequence_timings(PROTOCOL_DEFAULTS)
    fast = sequence_timings(SequenceParams(adc_bandwidth=256e3))
    assert fast.dwell == pytest.approx(base.dwell / 2)
    assert fast.echo_time < base.echo_time, \
        "a shorter readout window must shorten the echo"


def test_smaller_venc_strictly_lengthens_echo():
    echo_times = [sequence_timings(SequenceParams(venc=v)).echo_time
                  for v in (2.5, 1.25, 0.625, 0.3125)]
    assert np.all(np.diff(echo_times) > 0), \
        f"TE must grow strictly as VENC shrinks, got {echo_times}"


def test_infeasible_readout_gradient():
    with pytest.raises(SequenceError):
        sequence_timings(SequenceParams(max_gradient=1e-3))
    # widening the voxel brings the gradient back under the limit
    sequence_timings(SequenceParams(max_gradient=1e-3,
                                    voxel=(0.03, 0.002, 0.002)))


def test_parameter_validation():
    with pytest.raises(ValidationError):
        SequenceParams(venc=0.0)
    with pytest.raises(ValidationError):
        SequenceParams(matrix=(56, 30))
    with pytest.raises(ValidationError):
        SequenceParams(voxel=(0.002, -0.002, 0.002))


# =========================================================================
# Quadrature
# =========================================================================

def simplex_like_integral(mesh, f):
    """Dense midpoint oracle over the box mesh for smooth integrands."""
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    axes = [np.linspace(a, b, 201)[:-1] + (b - a) / 400
            for a, b in zip(lo, hi)]
    grid = np.meshgrid(*axes, indexing="ij")
    cell = np.prod((hi - lo) / 200)
    return f(*grid).sum() * cell


def test_quadrature_integrates_polynomials():
    mesh = small_box()
    zero = np.zeros((mesh.n_vertices, 3))
    for rule, poly, degree_note in (
            (4, lambda x, y, z: 1.0 + 2 * x - y + 3 * x * y + z * z, "deg 2"),
            (11, lambda x, y, z: x * x * y * y + z ** 4 - x * y * z, "deg 4"),
    ):
        pos, wq, m0q, _ = _quadrature(
            mesh, np.ones(mesh.n_vertices), zero, rule)
        total = (wq * poly(pos[:, 0], pos[:, 1], pos[:, 2])).sum()
        exact = simplex_like_integral(mesh, poly)
        assert total == pytest.approx(exact, rel=1e-4), \
            f"rule {rule} must integrate {degree_note} polynomials"
    assert wq.sum() == pytest.approx(tet_volumes(mesh).sum(), rel=1e-12)
    with pytest.raises(ValidationError):
        _quadrature(mesh, np.ones(mesh.n_vertices), zero, 7)


# =========================================================================
# Synthesis
# =========================================================================

def test_dc_sample_is_object_integral():
    mesh = small_box()
    field = uniform_field(mesh, (0.0, 0.0, 0.0))
    k = synthesize_signal(mesh, np.full(mesh.n_vertices, 2.0), field, SMALL,
                          encode="ref")
    t = sequence_timings(SMALL)
    n = SMALL.acquired_readout
    dc = k.signals["ref"][n // 2, SMALL.matrix[1] // 2, SMALL.matrix[2] // 2]
    expected = 2.0 * 0.008 ** 3 * np.exp(-t.echo_time / SMALL.t2_star)
    assert abs(dc - expected) / abs(expected) < 1e-3, \
        "k = 0 must integrate M0 over the object with echo-time decay"
    assert abs(dc.imag) < 1e-12 * abs(dc), "centered object gives a real DC"


def test_synthesize_validation():
    mesh = small_box()
    field = uniform_field(mesh, (0.0, 0.0, 0.0))
    ones = np.ones(mesh.n_vertices)
    with pytest.raises(ValidationError):
        synthesize_signal(mesh, ones, field, SMALL, encode="t")
    with pytest.raises(ValidationError):
        synthesize_signal(mesh, ones, field, SMALL, frame=1)
    with pytest.raises(ValidationError):
        synthesize_signal(mesh, -ones, field, SMALL)
    with pytest.raises(ValidationError):
        synthesize_signal(mesh, ones[:-1], field, SMALL)


# =========================================================================
# Reconstruction
# =========================================================================

def manual_kspace(grid, params):
    times = sequence_timings(params).sample_times
    return KSpaceData(signals={"ref": grid}, sample_times=times,
                      params=params)


def test_dc_only_gives_constant_image():
    params = SequenceParams(matrix=(6, 5, 4), voxel=(0.002, 0.002, 0.002),
                            oversampling=1, adc_bandwidth=10e3)
    grid = np.zeros((6, 5, 4), dtype=complex)
    grid[3, 2, 2] = 1.0  # the centered zero-frequency sample
    img = reconstruct(manual_kspace(grid, params)).volumes["ref"]
    assert np.allclose(img, img.flat[0], rtol=0, atol=1e-12 * abs(img.flat[0]))


def test_parseval_without_oversampling():
    params = SequenceParams(matrix=(6, 5, 4), voxel=(0.002, 0.002, 0.002),
                            oversampling=1, adc_bandwidth=10e3)
    rng = np.random.default_rng(3)
    grid = rng.normal(size=(6, 5, 4)) + 1j * rng.normal(size=(6, 5, 4))
    img = reconstruct(manual_kspace(grid, params)).volumes["ref"]
    n = grid.size
    assert np.sum(np.abs(grid) ** 2) == pytest.approx(
        n * np.sum(np.abs(img) ** 2), rel=1e-9), \
        "the inverse transform must preserve energy up to the 1/N factor"


def test_reconstruction_matches_rasterized_object():
    # a box offset from the voxel grid carrying a smooth M0 pattern; the
    # oracle rasterizes the object on a fine subgrid and evaluates the
    # Fourier sum directly, so it shares no code with the mesh quadrature
    center = np.array([0.0007, -0.0003, 0.0011])
    half = np.array([0.010, 0.008, 0.004])
    mesh = generate_box_mesh(size=2 * half, divisions=(10, 8, 4),
                             center=center)

    def m0_func(x, y, z):
        return (1.0 + 0.6 * np.sin(2 * np.pi * (x - center[0]) / 0.020)
                * np.cos(np.pi * (y - center[1]) / 0.016)
                + 0.3 * np.cos(np.pi * (z - center[2]) / 0.008))

    params = SequenceParams(matrix=(20, 16, 12), voxel=(0.002, 0.002, 0.002),
                            adc_bandwidth=48e3)
    field = uniform_field(mesh, (0.0, 0.0, 0.0))
    k = synthesize_signal(mesh, m0_func(*mesh.vertices.T), field, params)
    img = np.abs(reconstruct(k).volumes["ref"])

    sub = 4
    t = sequence_timings(params)
    axes = []
    for n, v, c in zip(params.matrix, params.voxel, params.fov_center):
        edges = (np.arange(n * sub + 1) / sub - n // 2 - 0.5) * v + c
        axes.append(0.5 * (edges[:-1] + edges[1:]))
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    inside = np.ones(X.shape, dtype=bool)
    for coords, c, h in zip((X, Y, Z), center, half):
        inside &= (coords > c - h) & (coords < c + h)
    rho = m0_func(X, Y, Z) * inside
    exps = [np.exp(-2j * np.pi * np.outer(ax, kv))
            for ax, kv in zip(axes, params.k_axes())]
    total = np.tensordot(np.tensordot(np.tensordot(
        rho, exps[0], axes=(0, 0)), exps[1], axes=(0, 0)), exps[2],
        axes=(0, 0))
    total *= np.prod([v / sub for v in params.voxel])
    total *= np.exp(-t.sample_times / params.t2_star)[:, None, None]
    oracle_k = KSpaceData(signals={"ref": total},
                          sample_times=t.sample_times, params=params)
    img_oracle = np.abs(reconstruct(oracle_k).volumes["ref"])

    corr = np.corrcoef(img.ravel(), img_oracle.ravel())[0, 1]
    assert corr > 0.99, f"image/rasterization correlation {corr:.4f}"


# =========================================================================
# Velocity decoding
# =========================================================================

def test_uniform_velocity_round_trip():
    mesh = small_box()
    u = (0.6, -0.4, 0.9)
    rec = decode(mesh, uniform_field(mesh, u), SMALL)
    interior = rec.magnitude > 0.5 * rec.magnitude.max()
    err = np.abs(rec.velocity[interior] - np.asarray(u)).max()
    assert err < 1e-9 * SMALL.venc, \
        f"noiseless uniform velocity must decode exactly, err {err:.2e}"
    assert not rec.wrapped[interior].any()


def test_decoding_is_negation_equivariant():
    mesh = small_box()
    u = (0.8, 0.3, -0.5)
    fwd = decode(mesh, uniform_field(mesh, u), SMALL)
    rev = decode(mesh, uniform_field(mesh, tuple(-c for c in u)), SMALL)
    interior = fwd.magnitude > 0.5 * fwd.magnitude.max()
    assert np.allclose(rev.velocity[interior], -fwd.velocity[interior],
                       atol=1e-9), "negating the field must negate the decode"


def test_velocity_beyond_venc_wraps():
    mesh = small_box()
    venc = SMALL.venc
    rec = decode(mesh, uniform_field(mesh, (1.1 * venc, 0.0, 0.0)), SMALL)
    interior = rec.magnitude > 0.5 * rec.magnitude.max()
    assert np.allclose(rec.velocity[interior][:, 0], -0.9 * venc,
                       atol=1e-9 * venc), \
        "u = 1.1 VENC must alias to -0.9 VENC"

    rec = decode(mesh, uniform_field(mesh, (venc, 0.0, 0.0)), SMALL)
    vals = rec.velocity[interior][:, 0]
    assert np.all(np.abs(vals) == pytest.approx(venc, rel=1e-9)), \
        "u = VENC lands on the aliasing boundary"
    assert rec.wrapped[interior][:, 0].all(), \
        "boundary phase must be flagged as wrapped"


def test_decode_requires_all_encodes():
    mesh = small_box()
    field = uniform_field(mesh, (0.0, 0.0, 0.0))
    k = synthesize_signal(mesh, np.ones(mesh.n_vertices), field, SMALL)
    img = reconstruct(k)
    with pytest.raises(ValidationError):
        phase_to_velocity(img)


# =========================================================================
# Noise
# =========================================================================

def test_noise_determinism_and_identity():
    mesh = small_box()
    field = uniform_field(mesh, (0.2, 0.0, 0.0))
    k = synthesize_frame(mesh, np.ones(mesh.n_vertices), field, SMALL)
    a = add_noise(k, 0.052, seed=42)
    b = add_noise(k, 0.052, seed=42)
    for name in ENCODE_AXES:
        assert np.array_equal(a.signals[name], b.signals[name]), \
            "same seed must give bit-identical noise"
    c = add_noise(k, 0.052, seed=43)
    assert not np.array_equal(a.signals["ref"], c.signals["ref"])
    clean = add_noise(k, 0.0, seed=42)
    for name in ENCODE_AXES:
        assert np.array_equal(clean.signals[name], k.signals[name]), \
            "zero sigma must be the identity"
    assert a.seed == 42


def test_image_noise_scales_with_sigma():
    mesh = small_box()
    field = uniform_field(mesh, (0.0, 0.0, 0.0))
    k = synthesize_signal(mesh, np.ones(mesh.n_vertices), field, SMALL)
    clean = reconstruct(k).volumes["ref"]
    stds = []
    for sigma in (0.02, 0.04, 0.08):
        noisy = reconstruct(add_noise(k, sigma, seed=5)).volumes["ref"]
        stds.append(np.std((noisy - clean).real))
    ratios = np.array(stds[1:]) / np.array(stds[:-1])
    assert np.allclose(ratios, 2.0, rtol=0.05), \
        f"image noise must scale linearly with sigma, ratios {ratios}"


# =========================================================================
# Persistence
# =========================================================================

def test_kspace_round_trip(tmp_path):
    mesh = small_box()
    field = uniform_field(mesh, (0.3, -0.2, 0.1))
    k = synthesize_frame(mesh, np.ones(mesh.n_vertices), field, SMALL)
    k = add_noise(k, 0.01, seed=9)
    path = tmp_path / "phase00.json"
    save_kspace(k, path)
    loaded = load_kspace(path)
    assert sorted(loaded.signals) == sorted(k.signals)
    for name in k.signals:
        # payload is complex64, so expect single-precision agreement
        assert np.allclose(loaded.signals[name], k.signals[name],
                           rtol=1e-5, atol=1e-5 * k.max_amplitude())
    assert loaded.seed == 9
    assert loaded.params == k.params
    assert np.allclose(loaded.sample_times, k.sample_times)

    img = reconstruct(loaded)
    save_images(img, tmp_path / "img00.json")
    img2 = load_images(tmp_path / "img00.json")
    for name in img.volumes:
        assert np.allclose(img2.volumes[name], img.volumes[name],
                           rtol=1e-4, atol=1e-6)

    with pytest.raises(ValidationError):
        load_images(path)  # wrong container format


def test_kspace_validation():
    with pytest.raises(ValidationError):
        KSpaceData(signals={"bogus": np.zeros((16, 8, 8), complex)},
                   sample_times=np.zeros(16), params=SMALL)
    with pytest.raises(ValidationError):
        KSpaceData(signals={"ref": np.zeros((4, 4, 4), complex)},
                   sample_times=np.zeros(4), params=SMALL)
    with pytest.raises(ValidationError):
        ImageVolume(volumes={"ref": np.zeros((4, 4, 4), complex)},
                    params=SMALL)
