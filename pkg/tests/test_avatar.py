import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gsface.avatar import (
    FORWARD_BLOCK,
    Anchors,
    GaussianSet,
    OffsetNetwork,
    anchor_points,
    avatar_from_bytes,
    avatar_to_bytes,
    compose,
    drive,
    mesh_positions,
    offset_forward,
    positional_encoding,
)
from gsface.head import THETA_DIM, BlendshapeHead, FlameParams
from gsface.sections import ContainerError


def tiny_head(uv, faces):
    v = len(uv)
    rng = np.random.default_rng(0)
    return BlendshapeHead(
        rng.normal(size=(v, 3)),
        np.zeros((v, 3, 2)),
        np.zeros((v, 3, 5)),
        np.zeros((v, 3, 50)),
        np.asarray(faces),
        np.asarray(uv, dtype=float),
    )


def test_single_triangle_covering_square():
    # the only triangle whose closure holds the whole unit square must extend past it
    head = tiny_head([[0, 0], [2, 0], [0, 2]], [[0, 1, 2]])
    anchors = anchor_points(head, 2)
    assert len(anchors) == 4
    assert np.all(anchors.face == 0)


def test_two_triangle_quad_tiles_square():
    head = tiny_head([[0, 0], [1, 0], [1, 1], [0, 1]], [[0, 1, 2], [0, 2, 3]])
    anchors = anchor_points(head, 8)
    assert len(anchors) == 64
    # samples on the diagonal go to the lower face index
    assert set(np.unique(anchors.face)) == {0, 1}


def test_grid_zero_rejected(model):
    with pytest.raises(ValueError):
        anchor_points(model, 0)


def point_in_triangle(p, a, b, c, tol=1e-9):
    def cross(o, u, v):
        return (u[0] - o[0]) * (v[1] - o[1]) - (u[1] - o[1]) * (v[0] - o[0])

    d1, d2, d3 = cross(a, b, p), cross(b, c, p), cross(c, a, p)
    has_neg = min(d1, d2, d3) < -tol
    has_pos = max(d1, d2, d3) > tol
    return not (has_neg and has_pos)


def test_anchors_lie_inside_their_triangles(model):
    anchors = anchor_points(model, 128)
    assert len(anchors) > 0.5 * 128 * 128
    tri = model.uv[model.faces[anchors.face]]
    uv = np.einsum("nj,njk->nk", anchors.bary, tri)
    for i in range(0, len(anchors), 37):
        assert point_in_triangle(uv[i], *tri[i])
    # reconstructed points sit on cell centres
    cells = uv * 128 - 0.5
    assert np.abs(cells - np.round(cells)).max() < 1e-9


def test_anchor_order_is_row_major(model):
    anchors = anchor_points(model, 64)
    tri = model.uv[model.faces[anchors.face]]
    uv = np.einsum("nj,njk->nk", anchors.bary, tri)
    idx = np.round(uv[:, 1] * 64 - 0.5) * 64 + np.round(uv[:, 0] * 64 - 0.5)
    assert np.all(np.diff(idx) > 0)


def test_mesh_positions_examples(model):
    anchors = Anchors(np.array([3, 3]), np.array([[1 / 3, 1 / 3, 1 / 3], [1.0, 0.0, 0.0]]), 1)
    pos = mesh_positions(anchors, model.faces, model.template)
    corners = model.template[model.faces[3]]
    np.testing.assert_allclose(pos[0], corners.mean(axis=0), rtol=1e-12)
    assert np.array_equal(pos[1], corners[0])


def test_mesh_positions_match_loop_oracle(model, rng):
    n = 200
    face = rng.integers(0, len(model.faces), n)
    bary = rng.dirichlet(np.ones(3), n)
    verts = model.template + rng.normal(size=model.template.shape)
    got = mesh_positions(Anchors(face, bary, 1), model.faces, verts)
    for i in range(n):
        want = sum(bary[i, j] * verts[model.faces[face[i], j]] for j in range(3))
        assert np.abs(got[i] - want).max() <= 1e-9 * max(1.0, np.abs(want).max())


def test_mesh_positions_vertex_mismatch(model):
    anchors = anchor_points(model, 8)
    with pytest.raises(ValueError):
        mesh_positions(anchors, model.faces, model.template[:10])


def test_positional_encoding_examples():
    enc = positional_encoding(np.zeros((1, 3)), 4)
    assert np.all(enc[0, :3] == 0)
    body = enc[0, 3:].reshape(4, 2, 3)
    assert np.all(body[:, 0] == 0) and np.all(body[:, 1] == 1)

    enc = positional_encoding(np.array([[1.0, 0.0, 0.0]]), 1)
    assert abs(enc[0, 3]) < 1e-15 and enc[0, 6] == -1.0


def test_positional_encoding_matches_formula(rng):
    x = rng.uniform(-1, 1, size=(50, 3))
    enc = positional_encoding(x, 10)
    assert enc.shape == (50, 63)
    for i in range(50):
        col = 3
        for level in range(10):
            for fn in (np.sin, np.cos):
                for c in range(3):
                    assert abs(enc[i, col] - fn(2.0**level * np.pi * x[i, c])) <= 1e-12
                    col += 1


def test_zero_network_gives_zero_offsets(rng):
    net = OffsetNetwork.random(0, hidden=(16,))
    zero = OffsetNetwork([(np.zeros_like(w), np.zeros_like(b)) for w, b in net.layers])
    d_mu, d_r, d_s = offset_forward(zero, rng.normal(size=(7, 3)), rng.normal(size=50))
    assert not d_mu.any() and not d_r.any() and not d_s.any()


def test_single_layer_network_is_affine(rng):
    net = OffsetNetwork.random(0, hidden=())
    w, b = net.layers[0]
    mu = rng.normal(size=(1, 3)) * 40
    psi = rng.normal(size=50)
    d_mu, d_r, d_s = offset_forward(net, mu, psi)
    x = np.concatenate([positional_encoding(mu / net.pos_scale, net.pe_bands)[0], psi])
    want = x @ w + b
    k = net.out_scale
    np.testing.assert_allclose(d_mu[0], want[:3] * k[0], rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(d_r[0], want[3:7] * k[1], rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(d_s[0], want[7:] * k[2], rtol=1e-12, atol=1e-14)


def test_forward_rows_independent_of_batch(rng):
    net = OffsetNetwork.random(3, hidden=(32, 32))
    mu = rng.normal(size=(FORWARD_BLOCK * 2 + 17, 3)) * 50
    psi = rng.normal(size=20)
    full = offset_forward(net, mu, psi)
    for lo, hi in ((0, 1), (5, 300), (FORWARD_BLOCK * 2, len(mu))):
        part = offset_forward(net, mu[lo:hi], psi)
        for a, b in zip(full, part):
            assert np.array_equal(a[lo:hi], b)


def test_psi_longer_than_network_rejected(rng):
    net = OffsetNetwork.random(0, hidden=(8,), dim_psi=10)
    with pytest.raises(ValueError):
        offset_forward(net, rng.normal(size=(2, 3)), np.zeros(11))


def unit_gaussians(n, rng):
    anchors = Anchors(np.zeros(n, dtype=int), np.tile([1.0, 0, 0], (n, 1)), 1)
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianSet(anchors, q, rng.normal(size=(n, 3)), rng.normal(size=n), rng.normal(size=(n, 3)),
                       rng.normal(size=(n, 9)))


def test_compose_zero_offsets(rng):
    g = unit_gaussians(20, rng)
    mu = rng.normal(size=(20, 3))
    z = np.zeros((20, 3))
    out = compose(g, mu, z, np.zeros((20, 4)), z)
    assert np.array_equal(out.means, mu)
    np.testing.assert_allclose(out.quats, g.r, atol=1e-15)
    assert np.array_equal(out.scales, np.exp(g.s))


def test_compose_log_two_doubles_scale(rng):
    g = unit_gaussians(5, rng)
    out = compose(g, np.zeros((5, 3)), np.zeros((5, 3)), np.zeros((5, 4)), np.full((5, 3), np.log(2.0)))
    np.testing.assert_allclose(out.scales, 2 * np.exp(g.s), rtol=1e-15)


@given(st.integers(0, 2**31 - 1))
def test_composed_quaternions_unit(seed):
    r = np.random.default_rng(seed)
    g = unit_gaussians(64, r)
    out = compose(g, np.zeros((64, 3)), np.zeros((64, 3)), r.normal(size=(64, 4)) * 0.3, np.zeros((64, 3)))
    assert np.abs(np.linalg.norm(out.quats, axis=1) - 1).max() <= 1e-6


def test_compose_degenerate_rotation(rng):
    g = unit_gaussians(3, rng)
    with pytest.raises(ValueError, match="degenerate"):
        compose(g, np.zeros((3, 3)), np.zeros((3, 3)), -g.r, np.zeros((3, 3)))


def test_drive_is_deterministic(model, avatar, rng):
    p = FlameParams(np.zeros(0), rng.normal(size=THETA_DIM) * 0.1, rng.normal(size=50))
    a, b = drive(avatar, model, p), drive(avatar, model, p)
    for f in ("means", "quats", "scales", "alpha"):
        assert np.array_equal(getattr(a, f), getattr(b, f))
    assert np.abs(np.linalg.norm(a.quats, axis=1) - 1).max() <= 1e-6


def test_avatar_file_round_trip(model, avatar):
    data = avatar_to_bytes(avatar)
    assert data[:4] == b"GFAV"
    back = avatar_from_bytes(data, model)
    g, h = avatar.gaussians, back.gaussians
    for f in ("r", "s", "o", "h_base", "h_rest"):
        assert np.array_equal(getattr(g, f), getattr(h, f))
    for (w0, b0), (w1, b1) in zip(avatar.network.layers, back.network.layers):
        assert np.array_equal(w0, w1) and np.array_equal(b0, b1)
    assert avatar_to_bytes(back) == data


def test_avatar_rejects_other_base_model(avatar):
    other = tiny_head([[0, 0], [2, 0], [0, 2]], [[0, 1, 2]])
    with pytest.raises(ContainerError, match="different base model"):
        avatar_from_bytes(avatar_to_bytes(avatar), other)
