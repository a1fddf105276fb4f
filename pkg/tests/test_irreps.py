import math
import pytest
import numpy as np

from pyequicpi import *
from pyequicpi.equinet.irreps import L1_TO_XYZ


def _unit(rng, n=None):
    v = rng.normal(size=(3,) if n is None else (n, 3))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def test_l0_component_is_constant(rng):
    for _ in range(5):
        assert real_spherical_harmonics(_unit(rng))[0] == pytest.approx(1.0 / (2.0 * math.sqrt(math.pi)))


def test_harmonics_length():
    assert real_spherical_harmonics([0.0, 0.0, 1.0], lmax=2).shape == (9,)
    assert real_spherical_harmonics([0.0, 0.0, 1.0], lmax=1).shape == (4,)


def test_parity(rng):
    for _ in range(10):
        v = _unit(rng)
        y, y_neg = real_spherical_harmonics(v), real_spherical_harmonics(-v)
        np.testing.assert_array_equal(y_neg[0:1], y[0:1])
        np.testing.assert_array_equal(y_neg[1:4], -y[1:4])
        np.testing.assert_array_equal(y_neg[4:9], y[4:9])


def test_non_unit_vector_rejected():
    with pytest.raises(ArgumentError):
        real_spherical_harmonics([1.0, 1.0, 0.0])


def test_harmonics_orthonormal_on_sphere(rng):
    # Monte-Carlo estimate of the Gram matrix, 4π·mean(Y Yᵀ)
    points = _unit(rng, 200000)
    y = np.concatenate([b.value for b in sh_blocks(points, 2)], axis=1)
    gram = 4.0 * math.pi * (y.T @ y) / len(points)
    np.testing.assert_allclose(gram, np.eye(9), atol=0.02)


def test_wigner_identity():
    for l in range(3):
        np.testing.assert_allclose(wigner_d(np.eye(3), l), np.eye(2 * l + 1), atol=1e-12)


def test_wigner_rotates_harmonics(rng):
    worst = 0.0
    for _ in range(100):
        rotation = random_rotation(rng)
        v = _unit(rng)
        y, y_rot = real_spherical_harmonics(v), real_spherical_harmonics(rotation @ v)
        for l, block in ((0, slice(0, 1)), (1, slice(1, 4)), (2, slice(4, 9))):
            worst = max(worst, np.max(np.abs(wigner_d(rotation, l) @ y[block] - y_rot[block])))
    assert worst < 1e-10


def test_wigner_homomorphism(rng):
    for _ in range(20):
        r1, r2 = random_rotation(rng), random_rotation(rng)
        for l in range(3):
            np.testing.assert_allclose(wigner_d(r1 @ r2, l), wigner_d(r1, l) @ wigner_d(r2, l), atol=1e-10)


def test_wigner_orthogonal(rng):
    rotation = random_rotation(rng)
    for l in range(3):
        d = wigner_d(rotation, l)
        np.testing.assert_allclose(d @ d.T, np.eye(2 * l + 1), atol=1e-10)


def test_wigner_rejects_non_rotations():
    with pytest.raises(ArgumentError):
        wigner_d(np.diag([1.0, 2.0, 1.0]), 1)
    with pytest.raises(ArgumentError):
        wigner_d(-np.eye(3), 1)


def test_random_rotation_is_proper(rng):
    for _ in range(10):
        rotation = random_rotation(rng)
        np.testing.assert_allclose(rotation.T @ rotation, np.eye(3), atol=1e-12)
        assert np.linalg.det(rotation) == pytest.approx(1.0)


@pytest.mark.parametrize("path", tensor_product_paths(2, include_odd=True))
def test_clebsch_gordan_normalized(path):
    cg = clebsch_gordan(*path)
    l3 = path[2]
    np.testing.assert_allclose(np.einsum("abc,abd->cd", cg, cg), np.eye(2 * l3 + 1), atol=1e-8)


@pytest.mark.parametrize("path", tensor_product_paths(2, include_odd=True))
def test_clebsch_gordan_equivariant(path, rng):
    l1, l2, l3 = path
    cg = clebsch_gordan(*path)
    rotation = random_rotation(rng)
    d1, d2, d3 = (wigner_d(rotation, l) for l in path)
    rotated = np.einsum("ia,jb,abc->ijc", d1, d2, cg)
    np.testing.assert_allclose(rotated, np.einsum("ijk,kc->ijc", cg, d3), atol=1e-9)


def test_clebsch_gordan_scalar_path():
    np.testing.assert_allclose(clebsch_gordan(0, 0, 0), np.ones((1, 1, 1)))
    np.testing.assert_allclose(clebsch_gordan(1, 1, 0)[:, :, 0], np.eye(3) / math.sqrt(3.0), atol=1e-12)


def test_clebsch_gordan_cross_product(rng):
    cg = clebsch_gordan(1, 1, 1)
    ratios = []
    for _ in range(20):
        u, v = rng.normal(size=3), rng.normal(size=3)
        out = np.einsum("a,b,abc->c", u, v, cg)
        expected = L1_TO_XYZ @ np.cross(L1_TO_XYZ.T @ u, L1_TO_XYZ.T @ v)
        scale = np.dot(out, expected) / np.dot(expected, expected)
        np.testing.assert_allclose(out, scale * expected, atol=1e-10)
        ratios.append(scale)
    assert abs(ratios[0]) > 0.1
    np.testing.assert_allclose(ratios, ratios[0], atol=1e-10)


def test_clebsch_gordan_rejects_forbidden_paths():
    with pytest.raises(ArgumentError):
        clebsch_gordan(0, 0, 1)
    with pytest.raises(ArgumentError):
        clebsch_gordan(2, 2, 3)


def test_even_paths():
    paths = tensor_product_paths(2)
    assert all(sum(p) % 2 == 0 for p in paths)
    assert (0, 0, 0) in paths and (1, 1, 0) in paths
    assert (1, 1, 1) not in paths
    assert (1, 1, 1) in tensor_product_paths(2, include_odd=True)


def test_irrep_layout():
    layout = IrrepLayout((4, 2, 1))
    assert layout.width == 4 + 6 + 5
    assert layout.block_slice(1) == slice(4, 10)
    with pytest.raises(ConfigurationError):
        IrrepLayout((4, 2))
    with pytest.raises(ConfigurationError):
        IrrepLayout((4, -1, 1))


def test_irrep_feature_blocks_and_rotation(rng):
    blocks = [rng.normal(size=(3, 4, 1)), rng.normal(size=(3, 2, 3)), rng.normal(size=(3, 1, 5))]
    feature = IrrepFeature.from_blocks(blocks)
    assert feature.n == 3
    np.testing.assert_array_equal(feature.block(1), blocks[1])
    np.testing.assert_array_equal(feature.scalars, blocks[0][:, :, 0])
    rotation = random_rotation(rng)
    rotated = feature.rotated(rotation)
    np.testing.assert_array_equal(rotated.scalars, feature.scalars)
    np.testing.assert_allclose(rotated.block(1), blocks[1] @ wigner_d(rotation, 1).T)
    with pytest.raises(ConfigurationError):
        IrrepFeature(IrrepLayout((4, 2, 1)), np.zeros((3, 7)))
