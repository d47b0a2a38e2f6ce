import numpy as np
import pytest

from equicrl.groups import (
    GroupSpec,
    SpatialAction,
    act_image,
    act_typed_vector,
    check_group_axioms,
    compose,
    d2,
    d2_element,
    direct_sum,
    element_names,
    elements,
    inverse,
    irrep,
    multiplication_table,
    regular_rep,
    rep_matrix,
    trivial_rep,
)

SUPPORTED = [
    GroupSpec("cyclic", 1),
    GroupSpec("cyclic", 2),
    GroupSpec("cyclic", 4),
    GroupSpec("dihedral", 1),
    GroupSpec("dihedral", 2),
    GroupSpec("dihedral", 4),
]


def test_element_counts():
    assert len(elements(d2())) == 4
    assert len(elements(GroupSpec("cyclic", 1))) == 1
    assert len(elements(GroupSpec("cyclic", 4))) == 4
    assert len(elements(GroupSpec("dihedral", 4))) == 8


def test_d2_canonical_order():
    assert element_names(d2()) == ("e", "mx", "my", "r180")
    assert d2().identity().index == 0


@pytest.mark.parametrize("group", SUPPORTED, ids=lambda g: g.name)
def test_group_axioms_exhaustive(group):
    check_group_axioms(group)


def test_compose_d2():
    e, mx, my, r = elements(d2())
    assert compose(e, mx) == mx
    assert compose(mx, mx) == e
    # diag(1,-1) @ diag(-1,1) = diag(-1,-1)
    assert compose(mx, my) == r
    assert compose(my, mx) == r
    assert compose(r, mx) == my


def test_compose_rejects_mixed_groups():
    with pytest.raises(ValueError):
        compose(d2().element(0), GroupSpec("cyclic", 4).element(1))


@pytest.mark.parametrize("group", SUPPORTED, ids=lambda g: g.name)
def test_inverse(group):
    for g in elements(group):
        assert compose(g, inverse(g)) == group.identity()
        assert compose(inverse(g), g) == group.identity()


@pytest.mark.parametrize("group", SUPPORTED, ids=lambda g: g.name)
def test_representation_homomorphism(group):
    reps = [trivial_rep(group), regular_rep(group)]
    if group == d2():
        reps += [irrep(group, lab) for lab in ("x", "y", "xy")]
        reps.append(direct_sum([irrep(group, "x"), trivial_rep(group), regular_rep(group)]))
    for rep in reps:
        for g in elements(group):
            for h in elements(group):
                lhs = rep_matrix(rep, compose(g, h))
                rhs = rep_matrix(rep, g) @ rep_matrix(rep, h)
                assert np.array_equal(lhs, rhs), (rep, g, h)


def test_trivial_rep_is_one():
    for g in elements(d2()):
        assert np.array_equal(rep_matrix(trivial_rep(d2()), g), [[1.0]])


def test_regular_rep_is_permutations():
    reg = regular_rep(d2())
    assert np.array_equal(rep_matrix(reg, d2().identity()), np.eye(4))
    for g in elements(d2()):
        m = rep_matrix(reg, g)
        assert m.shape == (4, 4)
        assert np.array_equal(m.sum(axis=0), np.ones(4))
        assert np.array_equal(m.sum(axis=1), np.ones(4))
        assert set(np.unique(m)) <= {0.0, 1.0}


def test_d2_irrep_values_match_coordinate_signs():
    # my negates x; mx negates y; r180 negates both.
    action = SpatialAction(d2())
    rx = irrep(d2(), "x")
    ry = irrep(d2(), "y")
    for g in elements(d2()):
        m = action.coord_matrix(g)
        assert rep_matrix(rx, g)[0, 0] == m[0, 0]
        assert rep_matrix(ry, g)[0, 0] == m[1, 1]
    assert rep_matrix(rx, d2_element("my"))[0, 0] == -1.0


def test_d2_irreps_pairwise_distinct():
    reps = [trivial_rep(d2())] + [irrep(d2(), lab) for lab in ("x", "y", "xy")]
    chars = [tuple(r.character()) for r in reps]
    assert len(set(chars)) == 4


def test_act_image_identity_and_involution():
    rng = np.random.default_rng(0)
    action = SpatialAction(d2())
    img = rng.standard_normal((3, 5, 7))
    e, mx, my, r = elements(d2())
    assert np.array_equal(act_image(action, e, img), img)
    assert np.array_equal(act_image(action, r, act_image(action, r, img)), img)
    for g in (mx, my, r):
        assert not np.array_equal(act_image(action, g, img), img)


def test_act_image_hot_pixel():
    action = SpatialAction(d2())
    h, w = 6, 9
    img = np.zeros((1, h, w))
    img[0, 2, 3] = 1.0
    out = act_image(action, d2_element("mx"), img)
    assert out[0, h - 1 - 2, 3] == 1.0
    assert out.sum() == 1.0
    out = act_image(action, d2_element("my"), img)
    assert out[0, 2, w - 1 - 3] == 1.0


def test_act_image_is_left_action():
    rng = np.random.default_rng(1)
    for group in SUPPORTED:
        if group.n == 4:
            img = rng.standard_normal((2, 6, 6))
        else:
            img = rng.standard_normal((2, 6, 9))
        action = SpatialAction(group)
        for g in elements(group):
            for h in elements(group):
                lhs = act_image(action, g, act_image(action, h, img))
                rhs = act_image(action, compose(g, h), img)
                assert np.array_equal(lhs, rhs), (group.name, g, h)


def test_act_image_norm_preserving():
    rng = np.random.default_rng(2)
    action = SpatialAction(d2())
    img = rng.standard_normal((4, 15, 15))
    for g in elements(d2()):
        out = act_image(action, g, img)
        assert out.sum() == pytest.approx(img.sum(), abs=1e-12)
        assert np.linalg.norm(out) == pytest.approx(np.linalg.norm(img), abs=1e-12)


def test_coord_matrix_matches_pixel_action():
    # Moving a hot pixel and transforming its centered coordinates agree.
    action = SpatialAction(d2())
    h = w = 7
    c = (h - 1) // 2
    for g in elements(d2()):
        m = action.coord_matrix(g)
        for row, col in [(1, 2), (6, 0), (3, 3)]:
            img = np.zeros((1, h, w))
            img[0, row, col] = 1.0
            out = act_image(action, g, img)
            r2, c2 = np.argwhere(out[0] == 1.0)[0]
            xy = np.array([col - c, row - c], dtype=float)
            x2, y2 = m @ xy
            assert (c2 - c, r2 - c) == (x2, y2)


def test_act_typed_vector():
    e, mx, my, r = elements(d2())
    rx, ry = irrep(d2(), "x"), irrep(d2(), "y")
    xy_rep = direct_sum([rx, ry])
    v = np.array([3.0, 4.0])
    assert np.array_equal(act_typed_vector(xy_rep, r, v), [-3.0, -4.0])
    assert np.array_equal(act_typed_vector(xy_rep, mx, v), [3.0, -4.0])
    assert np.array_equal(act_typed_vector(trivial_rep(d2()), my, np.array([5.0])), [5.0])
    reg = regular_rep(d2())
    w = np.array([1.0, 2.0, 3.0, 4.0])
    out = act_typed_vector(reg, mx, w)
    assert sorted(out.tolist()) == sorted(w.tolist())
    with pytest.raises(ValueError):
        act_typed_vector(xy_rep, mx, np.array([1.0, 2.0, 3.0]))


def test_multiplication_table_closed():
    t = multiplication_table(GroupSpec("dihedral", 4))
    assert t.shape == (8, 8)
    assert t.min() >= 0 and t.max() < 8


def test_unsupported_irrep_raises():
    with pytest.raises(ValueError):
        irrep(GroupSpec("cyclic", 4), "x")
    with pytest.raises(ValueError):
        irrep(d2(), "nope")
