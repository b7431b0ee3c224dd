import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dnpm.errors import ChartError, EmptyInputError, PreconditionError, RangeError, ShapeError
from dnpm.geometry import (
    CoreTensor,
    Mesh,
    apply_displacement,
    bake_map,
    bilinear_proxy,
    compute_vertex_normals,
    decode_uint16,
    encode_uint16,
    sample_map,
    subdivide_midpoint,
)

from conftest import planar_grid


def random_core(rng, n_id, n_exp, n_vert, affine=False):
    verts, faces, uvs = planar_grid(int(np.ceil(np.sqrt(n_vert))))
    n = len(verts)
    data = rng.normal(size=(n_id + affine, n_exp + affine, 3 * n))
    return CoreTensor(data, faces, uvs, affine=affine)


def loop_contract(data, w_id, w_exp):
    out = np.zeros(data.shape[2])
    for k in range(data.shape[2]):
        acc = 0.0
        for i in range(data.shape[0]):
            for j in range(data.shape[1]):
                acc += data[i, j, k] * w_id[i] * w_exp[j]
        out[k] = acc
    return out


# ---------------------------------------------------------------- bilinear


def test_one_hot_selects_slice(rng):
    verts, faces, uvs = planar_grid(2)
    data = rng.normal(size=(2, 2, 12))
    core = CoreTensor(data, faces, uvs)
    mesh = bilinear_proxy(core, [1, 0], [1, 0])
    np.testing.assert_array_equal(mesh.vertices, data[0, 0].reshape(4, 3))


def test_identity_mean(rng):
    verts, faces, uvs = planar_grid(2)
    data = rng.normal(size=(2, 2, 12))
    core = CoreTensor(data, faces, uvs)
    mesh = bilinear_proxy(core, [0.5, 0.5], [1, 0])
    np.testing.assert_allclose(mesh.vertices.ravel(), 0.5 * (data[0, 0] + data[1, 0]), atol=1e-15)


def test_faces_and_uvs_copied(rng):
    core = random_core(rng, 3, 4, 9)
    mesh = bilinear_proxy(core, rng.normal(size=3), rng.normal(size=4))
    np.testing.assert_array_equal(mesh.faces, core.faces)
    np.testing.assert_array_equal(mesh.uvs, core.uvs)


def test_contraction_matches_loop(rng):
    for _ in range(20):
        core = random_core(rng, 3, 4, 9)
        w_id, w_exp = rng.normal(size=3), rng.normal(size=4)
        got = bilinear_proxy(core, w_id, w_exp).vertices.ravel()
        np.testing.assert_allclose(got, loop_contract(core.data, w_id, w_exp), atol=1e-12)


def test_affine_core_lifts_vectors(rng):
    core = random_core(rng, 3, 4, 9, affine=True)
    w_id, w_exp = rng.normal(size=3), rng.normal(size=4)
    got = bilinear_proxy(core, w_id, w_exp).vertices.ravel()
    want = loop_contract(core.data, np.r_[1.0, w_id], np.r_[1.0, w_exp])
    np.testing.assert_allclose(got, want, atol=1e-12)
    # zero coefficients give the mean neutral face
    np.testing.assert_allclose(bilinear_proxy(core, np.zeros(3), np.zeros(4)).vertices.ravel(), core.data[0, 0])


def test_bilinearity(rng):
    core = random_core(rng, 4, 5, 16)
    a, b = rng.normal(size=4), rng.normal(size=4)
    e = rng.normal(size=5)
    t = rng.uniform()
    lhs = bilinear_proxy(core, t * a + (1 - t) * b, e).vertices
    rhs = t * bilinear_proxy(core, a, e).vertices + (1 - t) * bilinear_proxy(core, b, e).vertices
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)
    e2 = rng.normal(size=5)
    lhs = bilinear_proxy(core, a, t * e + (1 - t) * e2).vertices
    rhs = t * bilinear_proxy(core, a, e).vertices + (1 - t) * bilinear_proxy(core, a, e2).vertices
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


def test_dimension_mismatch(rng):
    core = random_core(rng, 3, 4, 9)
    with pytest.raises(ShapeError):
        bilinear_proxy(core, np.zeros(2), np.zeros(4))
    with pytest.raises(ShapeError):
        bilinear_proxy(core, np.zeros(3), np.zeros(5))


def test_core_invariants(rng):
    verts, faces, uvs = planar_grid(2)
    with pytest.raises(ShapeError):
        CoreTensor(np.zeros((2, 2, 13)), faces, uvs)
    bad = np.zeros((2, 2, 12))
    bad[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        CoreTensor(bad, faces, uvs)


# ------------------------------------------------------------------- mesh


def test_mesh_validation():
    v = np.zeros((4, 3))
    with pytest.raises(ShapeError):
        Mesh(v, [[0, 1, 4]])
    with pytest.raises(ShapeError):
        Mesh(v, [[0, 1, 2]])  # vertex 3 unreferenced
    Mesh(v, [[0, 1, 2]], allow_isolated=True)
    with pytest.raises(RangeError):
        Mesh(v[:3], [[0, 1, 2]], uvs=[[0, 0], [1, 0], [0, 1.1]])
    with pytest.raises(RangeError):
        Mesh(v[:3], [[0, 1, 2]], normals=[[0, 0, 2.0]] * 3)


def test_quad_normals():
    v = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], dtype=float)
    mesh = compute_vertex_normals(Mesh(v, [[0, 1, 2], [0, 2, 3]]))
    np.testing.assert_allclose(mesh.normals, np.tile([0, 0, 1.0], (4, 1)))


def octahedron():
    v = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], dtype=float)
    f = [[0, 2, 4], [2, 1, 4], [1, 3, 4], [3, 0, 4], [2, 0, 5], [1, 2, 5], [3, 1, 5], [0, 3, 5]]
    return Mesh(v, f)


def test_octahedron_normals():
    mesh = compute_vertex_normals(octahedron())
    np.testing.assert_allclose(mesh.normals, mesh.vertices, atol=1e-12)


def test_normals_match_accumulation_oracle(rng):
    from scipy.spatial import ConvexHull

    for _ in range(10):
        pts = rng.normal(size=(30, 3))
        pts /= np.linalg.norm(pts, axis=1, keepdims=True)
        hull = ConvexHull(pts)
        faces = hull.simplices.copy()
        # orient outward
        for f in faces:
            a, b, c = pts[f]
            if np.dot(np.cross(b - a, c - a), a + b + c) < 0:
                f[[1, 2]] = f[[2, 1]]
        used = np.unique(faces)
        remap = -np.ones(len(pts), dtype=int)
        remap[used] = np.arange(len(used))
        mesh = compute_vertex_normals(Mesh(pts[used], remap[faces]))
        acc = np.zeros((len(used), 3))
        for f in mesh.faces:
            a, b, c = mesh.vertices[f]
            n = np.cross(b - a, c - a)
            for i in f:
                acc[i] += n
        want = acc / np.linalg.norm(acc, axis=1, keepdims=True)
        np.testing.assert_allclose(mesh.normals, want, atol=1e-9)


def test_degenerate_star_gets_default_normal():
    v = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]], dtype=float)
    mesh = compute_vertex_normals(Mesh(v, [[0, 1, 2]]))
    np.testing.assert_array_equal(mesh.normals, np.tile([0, 0, 1.0], (3, 1)))


def test_empty_mesh_normals():
    with pytest.raises(EmptyInputError):
        compute_vertex_normals(Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=int)))


# -------------------------------------------------------------- subdivision


def test_subdivide_zero_is_identity(rng):
    verts, faces, uvs = planar_grid(3)
    mesh = Mesh(verts, faces, uvs)
    assert subdivide_midpoint(mesh, 0) is mesh


def test_subdivide_single_triangle():
    m = Mesh(np.eye(3), [[0, 1, 2]], uvs=[[0, 0], [1, 0], [0, 1]])
    out = subdivide_midpoint(m, 1)
    assert out.n_vertices == 6 and out.n_faces == 4
    np.testing.assert_allclose(out.vertices[3:].sum(axis=0), np.ones(3))


def edge_set(faces):
    return {tuple(sorted(e)) for tri in faces for e in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0]))}


def test_subdivide_counts_match_edge_oracle():
    verts, faces, uvs = planar_grid(4)
    mesh = Mesh(verts, faces, uvs)
    out1 = subdivide_midpoint(mesh, 1)
    out2 = subdivide_midpoint(mesh, 2)
    assert out2.n_faces == 16 * mesh.n_faces
    # each level adds one vertex per edge
    assert out1.n_vertices == mesh.n_vertices + len(edge_set(mesh.faces))
    assert out2.n_vertices == out1.n_vertices + len(edge_set(out1.faces))
    # disc topology: V - E + F = 1 at every level
    for m in (mesh, out1, out2):
        assert m.n_vertices - len(edge_set(m.faces)) + m.n_faces == 1


def test_subdivide_preserves_surface(rng):
    verts, faces, uvs = planar_grid(3)
    verts = verts + rng.normal(size=verts.shape) * 0.1
    out = subdivide_midpoint(Mesh(verts, faces, uvs), 2)
    # uv -> position is the same affine map on each original triangle; check one
    tri = faces[0]
    a = np.c_[uvs[tri], np.ones(3)]
    coef = np.linalg.solve(a, verts[tri])
    inside = []
    for i, uv in enumerate(out.uvs):
        lam = np.linalg.solve(a.T, np.r_[uv, 1.0])
        if lam.min() > -1e-12:
            inside.append(i)
    assert inside
    for i in inside:
        np.testing.assert_allclose(out.vertices[i], np.r_[out.uvs[i], 1.0] @ coef, atol=1e-12)


# ----------------------------------------------------------------- sampling


def bilerp_oracle(m, uv):
    h, w = m.shape
    x, y = uv[0] * (w - 1), (1 - uv[1]) * (h - 1)
    x0, y0 = min(int(np.floor(x)), w - 2), min(int(np.floor(y)), h - 2)
    fx, fy = x - x0, y - y0
    return (
        m[y0, x0] * (1 - fx) * (1 - fy)
        + m[y0, x0 + 1] * fx * (1 - fy)
        + m[y0 + 1, x0] * (1 - fx) * fy
        + m[y0 + 1, x0 + 1] * fx * fy
    )


def test_sample_constant(rng):
    m = np.full((5, 7), 0.3)
    for uv in rng.uniform(size=(20, 2)):
        assert sample_map(m, uv) == pytest.approx(0.3, abs=1e-15)


def test_sample_at_nodes():
    m = np.array([[0.0, 1.0], [1.0, 0.0]])
    # row 0 is the top edge (v = 1)
    assert sample_map(m, [0, 1]) == 0.0
    assert sample_map(m, [1, 1]) == 1.0
    assert sample_map(m, [0, 0]) == 1.0
    assert sample_map(m, [1, 0]) == 0.0


def test_sample_matches_oracle(rng):
    m = rng.normal(size=(8, 8))
    uvs = rng.uniform(size=(100, 2))
    got = sample_map(m, uvs)
    want = np.array([bilerp_oracle(m, uv) for uv in uvs])
    np.testing.assert_allclose(got, want, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 9), st.integers(2, 9), st.floats(0, 1), st.floats(0, 1), st.integers(0, 2**31))
def test_sample_within_neighbours(h, w, u, v, seed):
    m = np.random.default_rng(seed).normal(size=(h, w))
    val = sample_map(m, [u, v])
    x, y = u * (w - 1), (1 - v) * (h - 1)
    x0, y0 = min(int(x), w - 2), min(int(y), h - 2)
    nb = m[y0 : y0 + 2, x0 : x0 + 2]
    assert nb.min() - 1e-12 <= val <= nb.max() + 1e-12


def test_sample_out_of_range():
    with pytest.raises(RangeError):
        sample_map(np.zeros((4, 4)), [1.2, 0.5])
    with pytest.raises(RangeError):
        sample_map(np.zeros((4, 4)), [0.5, -0.1])


# ----------------------------------------------------------- displacement


def test_uint16_roundtrip(rng):
    codes = rng.integers(0, 65536, size=(16, 16)).astype(np.uint16)
    from dnpm.geometry import uint16_to_normalized

    np.testing.assert_array_equal(encode_uint16(uint16_to_normalized(codes)), codes)
    assert decode_uint16(np.array([0, 65535]), 0.002).tolist() == pytest.approx([-0.002, 0.002])


def test_zero_map_gives_subdivided_proxy(rng):
    verts, faces, uvs = planar_grid(3)
    proxy = Mesh(verts + rng.normal(size=verts.shape) * 0.1, faces, uvs)
    out = apply_displacement(proxy, np.zeros((8, 8)), 1.0, 2)
    np.testing.assert_array_equal(out.vertices, subdivide_midpoint(proxy, 2).vertices)
    # 16-bit code for zero is not representable; s=0 is exact regardless
    out0 = apply_displacement(proxy, rng.uniform(-1, 1, (8, 8)), 0.0, 1)
    np.testing.assert_array_equal(out0.vertices, subdivide_midpoint(proxy, 1).vertices)


def test_uniform_offset():
    verts, faces, uvs = planar_grid(3)
    proxy = Mesh(verts, faces, uvs)
    # decoded displacement 1.0 with d_max = 1
    out = apply_displacement(proxy, np.ones((4, 4)), 0.5, 0, d_max=1.0)
    np.testing.assert_allclose(out.vertices - verts, np.tile([0, 0, 0.5], (len(verts), 1)), atol=1e-15)


def test_displacement_matches_loop_oracle(rng):
    verts, faces, uvs = planar_grid(4)
    proxy = Mesh(verts + rng.normal(size=verts.shape) * 0.05, faces, uvs)
    m = rng.uniform(-1, 1, size=(16, 16))
    s, d_max = 0.7, 0.01
    out = apply_displacement(proxy, m, s, 1, d_max)
    fine = compute_vertex_normals(subdivide_midpoint(proxy, 1))
    for i in range(fine.n_vertices):
        want = fine.vertices[i] + s * (bilerp_oracle(m, fine.uvs[i]) * d_max) * fine.normals[i]
        np.testing.assert_allclose(out.vertices[i], want, atol=1e-9)


def test_displacement_uint16_map(rng):
    verts, faces, uvs = planar_grid(3)
    proxy = Mesh(verts, faces, uvs)
    codes = rng.integers(0, 65536, size=(8, 8)).astype(np.uint16)
    from dnpm.geometry import uint16_to_normalized

    a = apply_displacement(proxy, codes, 1.0, 1, 0.01)
    b = apply_displacement(proxy, uint16_to_normalized(codes), 1.0, 1, 0.01)
    np.testing.assert_allclose(a.vertices, b.vertices, atol=1e-15)


def test_displacement_linear_in_s(rng):
    verts, faces, uvs = planar_grid(3)
    proxy = Mesh(verts + rng.normal(size=verts.shape) * 0.05, faces, uvs)
    m = rng.uniform(-1, 1, (8, 8))
    base = subdivide_midpoint(proxy, 1).vertices
    one = apply_displacement(proxy, m, 0.3, 1).vertices - base
    two = apply_displacement(proxy, m, 0.6, 1).vertices - base
    np.testing.assert_allclose(two, 2 * one, atol=1e-10)


def test_displacement_preconditions():
    m = Mesh(np.eye(3), [[0, 1, 2]])
    with pytest.raises(PreconditionError):
        apply_displacement(m, np.zeros((4, 4)), 1.0, 0)
    m = Mesh(np.eye(3), [[0, 1, 2]], uvs=[[0, 0], [1, 0], [0, 1]])
    with pytest.raises(PreconditionError):
        apply_displacement(m, np.zeros((4, 4)), np.nan, 0)


# -------------------------------------------------------------------- bake


def full_chart_triangle():
    # covers the whole texel grid when combined with its mirror; alone it covers the lower-left half
    return Mesh(np.eye(3), [[0, 1, 2]], uvs=[[0, 0], [1, 0], [0, 1]])


def test_bake_constant():
    verts, faces, uvs = planar_grid(3)
    out = bake_map(Mesh(verts, faces, uvs), np.full(len(verts), 0.25), 16)
    np.testing.assert_allclose(out, 0.25, atol=1e-12)


def test_bake_barycentric_oracle():
    # a triangle larger than the unit square, so every texel centre is inside
    mesh = Mesh(np.eye(3), [[0, 1, 2]], uvs=[[0, 0], [1, 0], [0, 1]])
    res = 9
    out = bake_map(mesh, [0.0, 0.0, 1.0], res)
    for r in range(res):
        for c in range(res):
            u, v = c / (res - 1), 1 - r / (res - 1)
            if u + v <= 1 + 1e-12:
                assert out[r, c] == pytest.approx(v, abs=1e-6)  # barycentric weight of vertex 2


def test_bake_then_sample_recovers_linear_field():
    verts, faces, uvs = planar_grid(5)
    vals = 0.3 * uvs[:, 0] - 0.7 * uvs[:, 1] + 0.1
    out = bake_map(Mesh(verts, faces, uvs), vals, 33)
    np.testing.assert_allclose(sample_map(out, uvs), vals, atol=1e-9)


def test_bake_then_sample_lipschitz(rng):
    verts, faces, uvs = planar_grid(6)
    vals = np.sin(3 * uvs[:, 0]) * np.cos(2 * uvs[:, 1])
    res = 64
    out = bake_map(Mesh(verts, faces, uvs), vals, res)
    lip = 5.0  # generous bound on the PL interpolant's slope
    assert np.abs(sample_map(out, uvs) - vals).max() <= lip / res


def test_bake_fills_uncovered(rng):
    out = bake_map(full_chart_triangle(), [1.0, 1.0, 1.0], 8)
    np.testing.assert_allclose(out, 1.0)


def test_bake_overlap_raises():
    mesh = Mesh(np.eye(3).repeat(2, 0)[[0, 2, 4, 1, 3, 5]], [[0, 1, 2], [3, 4, 5]], uvs=[[0, 0], [1, 0], [0, 1]] * 2)
    with pytest.raises(ChartError):
        bake_map(mesh, np.zeros(6), 8)
