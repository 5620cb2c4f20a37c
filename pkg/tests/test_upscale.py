import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from liverperf.errors import ConfigurationError, ContractError, GeometryError
from liverperf.geometry import CellField
from liverperf.meshgen import box_mesh
from liverperf.upscale import (
    CompartmentSpec,
    PerfusionParams,
    SegmentPieces,
    average_permeability,
    average_porosity,
    bridging_segments,
    check_compartment_specs,
    may_couple,
    perfusion_coupling_coeffs,
    reference_norm,
    regularize,
    segment_pieces,
    three_compartment_specs,
)
from liverperf.vtree import VascularTree

from conftest import chain_tree

MU = 3.5e-3


def _cube_with_segment(direction=(1, 0, 0)):
    """1 cm cube (V = 1e-6 m^3) holding one 1 cm segment of radius 0.5 mm."""
    mesh = box_mesh(1, (0, 0, 0), (0.01, 0.01, 0.01))
    c = np.full(3, 0.005)
    d = np.asarray(direction, float)
    d /= np.linalg.norm(d)
    pos = np.array([c - 0.004 * d, c + 0.004 * d])
    tree = VascularTree(pos, [0], [1], [1e-3], [0.01])
    return mesh, segment_pieces(tree)


def test_single_segment_values():
    mesh, pieces = _cube_with_segment()
    # a control radius covering the cube makes the control volume the whole cube
    K = average_permeability(pieces, mesh, MU, control_radius=1.0).values
    phi = average_porosity(pieces, mesh, control_radius=1.0).values
    G = perfusion_coupling_coeffs(pieces, mesh, MU, control_radius=1.0).values
    r = 0.5e-3
    assert K[0, 0, 0] == pytest.approx(np.pi * r**4 / (8 * MU) * 0.01 / 1e-6, rel=1e-12)
    assert K[0, 0, 0] == pytest.approx(7.0e-8, rel=0.01)
    assert phi[0] == pytest.approx(7.85e-3, rel=1e-3)
    assert G[0] == pytest.approx(7.0e-4, rel=0.01)
    np.testing.assert_allclose(K[:, 1:, 1:], 0.0, atol=0)
    assert np.allclose(K, K[0])


def test_empty_cell_gets_zero():
    mesh = box_mesh(2)
    tree = chain_tree([0.1], [0.01])  # near the origin corner only
    pieces = segment_pieces(tree)
    K = average_permeability(pieces, mesh, MU).values
    phi = average_porosity(pieces, mesh).values
    occupied = np.abs(K).max(axis=(1, 2)) > 0
    assert occupied.sum() == 1
    assert np.count_nonzero(phi) == 1


def test_orthogonal_segments_give_diagonal_tensor():
    mesh = box_mesh(1, (0, 0, 0), (1, 1, 1))
    pos = np.array([[0.4, 0.5, 0.5], [0.5, 0.5, 0.5], [0.5, 0.6, 0.5]])
    tree = VascularTree(pos, [0, 1], [1, 2], [0.01, 0.01], [0.1, 0.1])
    # both midpoints in the same cell thanks to a whole-domain control volume
    K = average_permeability(segment_pieces(tree), mesh, MU, control_radius=10.0).values[0]
    assert K[0, 0] == pytest.approx(K[1, 1])
    assert K[2, 2] == 0 and K[0, 1] == 0


def test_piecewise_cut_preserves_totals():
    tree = chain_tree([0.7], [0.01])
    tree = VascularTree(tree.positions + 0.1, tree.tails, tree.heads, tree.diameters, [0.9])
    mesh = box_mesh(4)
    one = segment_pieces(tree)
    many = segment_pieces(tree, max_piece=0.05)
    assert len(many.lengths) == 14
    assert many.lengths.sum() == pytest.approx(0.9)
    V = mesh.volumes
    for f in (
        lambda p: average_permeability(p, mesh, MU).values[:, 0, 0],
        lambda p: average_porosity(p, mesh).values,
        lambda p: perfusion_coupling_coeffs(p, mesh, MU).values,
    ):
        assert (f(many) * V).sum() == pytest.approx((f(one) * V).sum(), rel=1e-12)


def test_porosity_above_one_rejected():
    mesh = box_mesh(1, (0, 0, 0), (0.01, 0.01, 0.01))
    tree = VascularTree([[0.001, 0.005, 0.005], [0.009, 0.005, 0.005]], [0], [1], [0.02], [0.008])
    with pytest.raises(GeometryError):
        average_porosity(segment_pieces(tree), mesh, control_radius=1.0)


def test_regularize_examples():
    K = CellField("K", np.zeros((2, 3, 3)))
    out = regularize(K, eps=1e-3, K_bar=1e-8).values
    np.testing.assert_allclose(out, np.broadcast_to(1e-11 * np.eye(3), (2, 3, 3)))
    with pytest.raises(ConfigurationError):
        regularize(K, eps=0.0, K_bar=1.0)
    with pytest.raises(ConfigurationError):
        regularize(K, eps=1e-3, volumes=np.ones(2))
    K2 = CellField("K", np.stack([2 * np.eye(3), np.zeros((3, 3))]))
    assert reference_norm(K2, np.array([1.0, 5.0])) == pytest.approx(2.0)
    reg = regularize(K2, eps=0.5, volumes=np.ones(2)).values
    np.testing.assert_allclose(reg[1], np.eye(3))
    assert np.all(np.linalg.eigvalsh(reg) > 0)


def test_compartment_rules():
    P1, F, H1 = three_compartment_specs()
    assert may_couple(P1, F) and may_couple(F, H1)
    assert not may_couple(P1, H1)
    check_compartment_specs((P1, F, H1))
    with pytest.raises(ConfigurationError):
        check_compartment_specs((CompartmentSpec(1, "P", (1e-4, 1e-3), 1), CompartmentSpec(2, "P", (5e-4, 2e-3), 2)))
    with pytest.raises(ConfigurationError):
        check_compartment_specs((CompartmentSpec(1, "P", (1e-4, 1e-3), 2), CompartmentSpec(2, "P", (1e-3, 2e-3), 1)))


def test_params_contracts():
    n = 3
    eye = np.broadcast_to(np.eye(3), (n, 3, 3))
    specs = three_compartment_specs()
    K = {i: CellField("K", eye, i) for i in (1, 2, 3)}
    phi = {i: CellField("phi", np.full(n, 0.2), i) for i in (1, 2, 3)}
    p = PerfusionParams(specs, K, phi, {(1, 2): CellField("G", np.ones(n))})
    np.testing.assert_allclose(p.phi_m.values, 0.4)
    np.testing.assert_array_equal(p.exchange(2, 1), np.ones(n))
    np.testing.assert_array_equal(p.exchange(2, 3), np.zeros(n))
    with pytest.raises(ConfigurationError):
        PerfusionParams(specs, K, phi, {(1, 3): CellField("G", np.ones(n))})
    with pytest.raises(ContractError):
        PerfusionParams(specs, K, phi, {(1, 2): CellField("G", -np.ones(n))})
    with pytest.raises(GeometryError):
        PerfusionParams(specs, K, {i: CellField("phi", np.full(n, 0.4), i) for i in (1, 2, 3)}, {})


def test_bridging_segments():
    tree = chain_tree([0.01, 0.01, 0.01], [2e-3, 5e-4, 5e-5])
    spec = CompartmentSpec(1, "P", (1e-4, 1e-3), 1)
    np.testing.assert_array_equal(bridging_segments(tree, [0, 1, 2], spec), [1])


def _random_pieces(rng, n, lo=0.1, hi=0.9):
    mid = rng.uniform(lo, hi, (n, 3))
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1)[:, None]
    diam = rng.uniform(1e-4, 1e-3, n)
    L = rng.uniform(0.01, 0.05, n)
    return SegmentPieces(mid, d, diam, L, L, np.arange(n))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 40))
def test_rotation_equivariance(seed, n):
    rng = np.random.default_rng(seed)
    mesh = box_mesh(1, (-1, -1, -1), (1, 1, 1))
    p = _random_pieces(rng, n, -0.3, 0.3)
    R = Rotation.random(random_state=seed).as_matrix()
    rot = SegmentPieces(p.midpoints, p.directions @ R.T, p.diameters, p.lengths, p.segment_lengths, p.segment_ids)
    K = average_permeability(p, mesh, MU, control_radius=10.0).values[0]
    Kr = average_permeability(rot, mesh, MU, control_radius=10.0).values[0]
    np.testing.assert_allclose(Kr, R @ K @ R.T, atol=1e-12 * np.abs(K).max())


def test_quarter_turn_swaps_axes():
    mesh, px = _cube_with_segment((1, 0, 0))
    _, py = _cube_with_segment((0, 1, 0))
    Kx = average_permeability(px, mesh, MU, control_radius=1.0).values[0]
    Ky = average_permeability(py, mesh, MU, control_radius=1.0).values[0]
    assert Ky[1, 1] == pytest.approx(Kx[0, 0], rel=1e-12)
    assert Ky[0, 0] == pytest.approx(0.0, abs=1e-25)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 30), st.integers(1, 29))
def test_additivity_over_segment_sets(seed, n, k):
    k = min(k, n - 1)
    rng = np.random.default_rng(seed)
    mesh = box_mesh(2)
    p = _random_pieces(rng, n)

    def sub(idx):
        return SegmentPieces(*(getattr(p, f)[idx] for f in SegmentPieces.__dataclass_fields__))

    a, b = np.arange(k), np.arange(k, n)
    for fn in (
        lambda q: average_permeability(q, mesh, MU).values,
        lambda q: average_porosity(q, mesh).values,
        lambda q: perfusion_coupling_coeffs(q, mesh, MU).values,
    ):
        whole = fn(p)
        np.testing.assert_allclose(fn(sub(a)) + fn(sub(b)), whole, rtol=1e-12, atol=1e-12 * np.abs(whole).max())


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 30), st.floats(0.1, 0.6))
def test_control_volume_partition_of_unity(seed, n, radius):
    rng = np.random.default_rng(seed)
    mesh = box_mesh(3)
    p = _random_pieces(rng, n)
    point = average_porosity(p, mesh).values
    # total vessel volume is what the per-cell averages integrate to
    total = np.sum(np.pi * (p.diameters / 2) ** 2 * p.lengths)
    assert np.sum(point * mesh.volumes) == pytest.approx(total, rel=1e-12)
    smooth = average_porosity(p, mesh, control_radius=radius).values
    assert np.all(smooth >= 0)
    assert smooth.max() <= point.max() * (1 + 1e-12)
