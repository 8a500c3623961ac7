import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import numeric_grad, rel_err
from magn.patching import GeometryError, PatchGeometry, PatchSet, fold, overlap_counts, unfold, valid_sizes
from magn.tensor import GradTape, Tensor, backward, mul, tsum


def enumerate_windows(H, W, win, stride, pad):
    """Corners of every window fitting in the padded map, by brute force."""
    out = []
    for i in range(H + 2 * pad[0]):
        for j in range(W + 2 * pad[1]):
            if i % stride[0] == 0 and j % stride[1] == 0:
                if i + win[0] <= H + 2 * pad[0] and j + win[1] <= W + 2 * pad[1]:
                    out.append((i, j))
    return out


def averaging_oracle(patches, H, W, win, stride, pad):
    acc = np.zeros((H + 2 * pad[0], W + 2 * pad[1], patches.shape[-1]))
    hits = np.zeros(acc.shape[:2])
    for (i, j), p in zip(enumerate_windows(H, W, win, stride, pad), patches):
        for u in range(win[0]):
            for v in range(win[1]):
                acc[i + u, j + v] += p[u, v]
                hits[i + u, j + v] += 1
    out = acc / np.maximum(hits, 1)[..., None]
    return out[pad[0] : pad[0] + H, pad[1] : pad[1] + W]


def random_geometry(rng):
    win = tuple(int(v) for v in rng.integers(1, 8, size=2))
    stride = tuple(int(rng.integers(1, w + 1)) for w in win)
    pad = tuple(int(v) for v in rng.integers(0, 3, size=2))
    sizes = []
    for a in range(2):
        ok = [n for n in valid_sizes(20, win[a], stride[a], pad[a]) if n >= 1]
        sizes.append(int(rng.choice(ok)))
    return PatchGeometry(sizes[0], sizes[1], win, stride, pad)


def test_single_window_is_the_input(rng):
    x = rng.standard_normal((7, 7, 1))
    ps = unfold(Tensor(x), PatchGeometry(7, 7, 7, 4))
    assert ps.geometry.count == 1
    assert np.array_equal(ps.patches.data[0], x)


def test_disjoint_quadrants(rng):
    x = rng.standard_normal((8, 8, 1))
    p = unfold(Tensor(x), PatchGeometry(8, 8, 4, 4)).patches.data
    assert p.shape == (4, 4, 4, 1)
    quads = [x[:4, :4], x[:4, 4:], x[4:, :4], x[4:, 4:]]
    for got, want in zip(p, quads):
        assert np.array_equal(got, want)


def test_default_crop_has_49_windows():
    g = PatchGeometry(31, 31, 7, 4)
    assert g.count == 49 == len(enumerate_windows(31, 31, (7, 7), (4, 4), (0, 0)))


def test_overlap_counts_31():
    c = overlap_counts(PatchGeometry(31, 31, 7, 4))[..., 0]
    assert c[0, 0] == 1 and c[-1, -1] == 1
    assert c.max() == 4 and c[4:27, 4:27].min() >= 1
    # rows 4..6 lie in two window rows; so do columns 4..6
    assert c[5, 5] == 4


def test_counts_all_one_without_overlap():
    assert np.all(overlap_counts(PatchGeometry(12, 8, 4, 4)) == 1)


def test_count_sum_identity(rng):
    for _ in range(10):
        g = random_geometry(rng)
        inside = overlap_counts(g).sum()
        padded = g.count * g.window[0] * g.window[1]
        # windows also cover padding; count that coverage by enumeration
        covered_pad = 0
        for i, j in g.positions():
            for u in range(g.window[0]):
                for v in range(g.window[1]):
                    r, c = i + u - g.padding[0], j + v - g.padding[1]
                    covered_pad += not (0 <= r < g.height and 0 <= c < g.width)
        assert inside == padded - covered_pad


def test_fold_matches_averaging_oracle(rng):
    x = rng.standard_normal((31, 31, 2))
    g = PatchGeometry(31, 31, 7, 4)
    p = rng.standard_normal((g.count, 7, 7, 2))
    got = fold(PatchSet(Tensor(p), g)).data
    assert np.max(np.abs(got - averaging_oracle(p, 31, 31, (7, 7), (4, 4), (0, 0)))) < 1e-12
    assert np.max(np.abs(fold(unfold(Tensor(x), g)).data - x)) < 1e-12


def test_fold_without_overlap_is_reassembly(rng):
    g = PatchGeometry(8, 12, 4, 4)
    p = rng.standard_normal((g.count, 4, 4, 3))
    out = fold(PatchSet(Tensor(p), g)).data
    assert np.array_equal(out[:4, 4:8], p[1])


def test_formula_matches_enumeration_on_random_geometries(rng):
    for _ in range(20):
        g = random_geometry(rng)
        corners = enumerate_windows(g.height, g.width, g.window, g.stride, g.padding)
        assert g.count == len(corners)
        assert g.positions() == corners
        x = rng.standard_normal((g.height, g.width, 2))
        assert np.max(np.abs(fold(unfold(Tensor(x), g)).data - x)) < 1e-12


@settings(max_examples=40, deadline=None)
@given(
    st.integers(1, 6), st.integers(1, 6), st.integers(0, 2), st.integers(0, 4), st.integers(0, 4), st.integers(0, 2**31)
)
def test_round_trip_property(win, stride_raw, pad, kh, kw, seed):
    stride = min(stride_raw, win)
    H = max(1, win - 2 * pad + kh * stride)
    W = max(1, win - 2 * pad + kw * stride)
    try:
        g = PatchGeometry(H, W, win, stride, pad)
    except GeometryError:
        return
    x = np.random.default_rng(seed).standard_normal((H, W, 2))
    assert np.max(np.abs(fold(unfold(Tensor(x), g)).data - x)) < 1e-12


def test_linearity(rng):
    g = PatchGeometry(15, 11, (7, 3), (4, 2), (0, 0))
    x, y = rng.standard_normal((2, 15, 11, 3))
    a, b = 1.7, -0.4
    lhs = unfold(Tensor(a * x + b * y), g).patches.data
    rhs = a * unfold(Tensor(x), g).patches.data + b * unfold(Tensor(y), g).patches.data
    assert np.max(np.abs(lhs - rhs)) < 1e-12
    p, q = rng.standard_normal((2, g.count, 7, 3, 3))
    lhs = fold(PatchSet(Tensor(a * p + b * q), g)).data
    rhs = a * fold(PatchSet(Tensor(p), g)).data + b * fold(PatchSet(Tensor(q), g)).data
    assert np.max(np.abs(lhs - rhs)) < 1e-12


def test_batched_matches_single(rng):
    g = PatchGeometry(11, 11, 7, 4, 0)
    x = rng.standard_normal((3, 11, 11, 2))
    batched = unfold(Tensor(x), g).patches.data
    for i in range(3):
        assert np.array_equal(batched[i], unfold(Tensor(x[i]), g).patches.data)


def test_gradients(rng):
    g = PatchGeometry(9, 9, 5, 2, 1)
    x = rng.standard_normal((9, 9, 2))
    w = rng.standard_normal((g.count, 5, 5, 2))
    p = rng.standard_normal((g.count, 5, 5, 2))
    wx = rng.standard_normal((9, 9, 2))

    xt = Tensor(x, requires_grad=True)
    with GradTape() as tape:
        loss = tsum(mul(unfold(xt, g).patches, Tensor(w)))
    gx = backward(tape, loss)[xt]
    num = numeric_grad(lambda v: float(np.sum(unfold(Tensor(v), g).patches.data * w)), x)
    assert rel_err(gx, num) < 1e-4

    pt = Tensor(p, requires_grad=True)
    with GradTape() as tape:
        loss = tsum(mul(fold(PatchSet(pt, g)), Tensor(wx)))
    gp = backward(tape, loss)[pt]
    num = numeric_grad(lambda v: float(np.sum(fold(PatchSet(Tensor(v), g)).data * wx)), p)
    assert rel_err(gp, num) < 1e-4


def test_indivisible_size_is_rejected_with_a_suggestion():
    with pytest.raises(GeometryError, match="smallest valid padding is 1; or crop to 27"):
        PatchGeometry(29, 31, 7, 4)
    with pytest.raises(GeometryError, match="crop to 27"):
        PatchGeometry(31, 30, 7, 4)


def test_stride_larger_than_window_rejected():
    with pytest.raises(GeometryError):
        PatchGeometry(9, 9, 3, 6)


def test_mismatched_map_rejected():
    with pytest.raises(GeometryError):
        unfold(Tensor(np.zeros((11, 11, 1))), PatchGeometry(15, 15, 7, 4))
