import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clusterknn.dataset import Structure
from clusterknn.descriptors import (
    BOHR_PER_ANGSTROM,
    DescriptorParams,
    LmbParams,
    bag_of_bonds,
    coulomb_matrix,
    global_pool,
    infer_padding,
    local_many_body,
)
from clusterknn.errors import ConfigError, DegenerateGeometry

CM_PARAMS = DescriptorParams(kind="CM", max_atoms_per_element={"H": 4, "O": 2})


def _structure(elements, coords, id="t"):
    return Structure(id=id, elements=tuple(elements), coords=np.asarray(coords, dtype=float))


def _random_structure(rng, n_atoms=5, elements=("H", "O", "C")):
    elems = [elements[i] for i in rng.integers(0, len(elements), n_atoms)]
    return _structure(elems, rng.uniform(0, 4, (n_atoms, 3)))


def _rigid_motion(s, rng):
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    shift = rng.uniform(-5, 5, 3)
    return _structure(s.elements, s.coords @ q.T + shift)


def test_cm_single_hydrogen():
    s = _structure(["H"], [[0, 0, 0]])
    d = coulomb_matrix(s, CM_PARAMS).vector
    nz = d[d != 0]
    assert len(nz) == 1
    assert nz[0] == pytest.approx(0.5)


def test_cm_h2_offdiagonal():
    # 1*1 / (0.74 Angstrom in Bohr); checked by hand: 0.74/0.52917721092 = 1.398397,
    # reciprocal 0.7151040
    s = _structure(["H", "H"], [[0, 0, 0], [0, 0, 0.74]])
    d = coulomb_matrix(s, CM_PARAMS).vector
    expected = 1.0 / (0.74 * BOHR_PER_ANGSTROM)
    assert expected == pytest.approx(0.71510, abs=1e-5)
    assert np.any(np.isclose(d, expected))


def test_cm_permutation_invariance():
    rng = np.random.default_rng(0)
    s = _random_structure(rng)
    perm = rng.permutation(5)
    s2 = _structure([s.elements[i] for i in perm], s.coords[perm])
    np.testing.assert_allclose(
        coulomb_matrix(s, CM_PARAMS).vector, coulomb_matrix(s2, CM_PARAMS).vector, atol=1e-12
    )


def test_cm_coincident_atoms():
    s = _structure(["H", "H"], [[0, 0, 0], [0, 0, 0]])
    with pytest.raises(DegenerateGeometry):
        coulomb_matrix(s, CM_PARAMS)


def test_cm_padding_overflow():
    s = _structure(["H"] * 7, np.arange(21).reshape(7, 3))
    with pytest.raises(ConfigError):
        coulomb_matrix(s, CM_PARAMS)


def test_bob_h2_single_bag():
    s = _structure(["H", "H"], [[0, 0, 0], [0, 0, 0.74]])
    d = bag_of_bonds(s, CM_PARAMS).vector
    nz = d[d != 0]
    assert len(nz) == 1
    assert nz[0] == pytest.approx(1.0 / (0.74 * BOHR_PER_ANGSTROM))


def test_bob_permutation_invariance():
    rng = np.random.default_rng(1)
    params = DescriptorParams(kind="BoB", max_atoms_per_element={"H": 5, "O": 5})
    for _ in range(5):
        s = _random_structure(rng, elements=("H", "O"))
        perm = rng.permutation(5)
        s2 = _structure([s.elements[i] for i in perm], s.coords[perm])
        np.testing.assert_allclose(
            bag_of_bonds(s, params).vector, bag_of_bonds(s2, params).vector, atol=1e-12
        )


def test_bob_same_pair_multiset():
    # mirror-image structures share the multiset of pair terms
    s1 = _structure(["H", "O"], [[0, 0, 0], [0, 0, 1.0]])
    s2 = _structure(["O", "H"], [[5, 5, 5], [5, 5, 4.0]])
    np.testing.assert_allclose(
        bag_of_bonds(s1, CM_PARAMS).vector, bag_of_bonds(s2, CM_PARAMS).vector
    )


LMB_PARAMS = DescriptorParams(kind="LMB", lmb=LmbParams(r_cut=6.0, n_radial=8, n_angular=4))


def test_lmb_isolated_atom():
    s = _structure(["O"], [[0, 0, 0]])
    d = local_many_body(s, LMB_PARAMS)
    np.testing.assert_array_equal(d.vectors, 0.0)


def test_lmb_rotation_invariance():
    rng = np.random.default_rng(2)
    water = _structure(["O", "H", "H"], [[0, 0, 0], [0.76, 0.59, 0], [-0.76, 0.59, 0]])
    moved = _rigid_motion(water, rng)
    np.testing.assert_allclose(
        local_many_body(water, LMB_PARAMS).vectors,
        local_many_body(moved, LMB_PARAMS).vectors,
        atol=1e-10,
    )


def test_lmb_dimer_beyond_cutoff():
    s = _structure(["H", "H"], [[0, 0, 0], [0, 0, 10.0]])
    np.testing.assert_array_equal(local_many_body(s, LMB_PARAMS).vectors, 0.0)


def test_lmb_dimer_radial_block():
    # Within cutoff: only the partner-element radial channel is populated.
    # Oracle: evaluate the Gaussian basis directly at the dimer separation.
    r = 2.0
    s = _structure(["H", "O"], [[0, 0, 0], [0, 0, r]])
    lp = LMB_PARAMS.lmb
    d = local_many_body(s, LMB_PARAMS)
    centers = np.linspace(0.5, lp.r_cut, lp.n_radial)
    fcut = 0.5 * (np.cos(np.pi * r / lp.r_cut) + 1)
    expected = np.exp(-((r - centers) ** 2) / (2 * lp.radial_width**2)) * fcut
    # H center sees one O neighbour: the O radial block (element index 3)
    o_block = 3 * lp.n_radial
    np.testing.assert_allclose(d.vectors[0, o_block : o_block + lp.n_radial], expected, atol=1e-12)
    other = np.delete(d.vectors[0], np.arange(o_block, o_block + lp.n_radial))
    np.testing.assert_array_equal(other, 0.0)


def test_lmb_rigid_motion_property():
    rng = np.random.default_rng(3)
    for _ in range(10):
        s = _random_structure(rng, n_atoms=4)
        moved = _rigid_motion(s, rng)
        np.testing.assert_allclose(
            local_many_body(s, LMB_PARAMS).vectors,
            local_many_body(moved, LMB_PARAMS).vectors,
            atol=1e-10,
        )


def test_pool_identity_and_linearity():
    rng = np.random.default_rng(4)
    s = _random_structure(rng, n_atoms=1)
    d = local_many_body(s, LMB_PARAMS)
    np.testing.assert_array_equal(global_pool(d).vector, d.vectors[0])

    s2 = _random_structure(rng, n_atoms=4)
    d2 = local_many_body(s2, LMB_PARAMS)
    from clusterknn.descriptors import LocalDescriptor

    doubled = LocalDescriptor(
        np.vstack([d2.vectors, d2.vectors]), d2.center_elements + d2.center_elements
    )
    np.testing.assert_allclose(global_pool(doubled).vector, 2 * global_pool(d2).vector)


def test_lmb_extensivity_under_pooling():
    rng = np.random.default_rng(5)
    s = _random_structure(rng, n_atoms=4)
    far = _structure(
        list(s.elements) * 2, np.vstack([s.coords, s.coords + np.array([100.0, 0, 0])])
    )
    single = global_pool(local_many_body(s, LMB_PARAMS)).vector
    double = global_pool(local_many_body(far, LMB_PARAMS)).vector
    np.testing.assert_allclose(double, 2 * single, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=2, max_value=6), st.integers(min_value=0, max_value=10**6))
def test_lmb_fixed_dimension(n_atoms, seed):
    rng = np.random.default_rng(seed)
    s = _random_structure(rng, n_atoms=n_atoms)
    d = local_many_body(s, LMB_PARAMS)
    assert d.vectors.shape == (n_atoms, 6 * 8 + 21 * 4)


def test_infer_padding():
    s1 = _structure(["H", "H", "O"], np.arange(9).reshape(3, 3))
    s2 = _structure(["O", "O"], [[0, 0, 0], [1, 1, 1]])
    assert infer_padding([s1, s2]) == {"H": 2, "O": 2}
