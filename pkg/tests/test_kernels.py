import numpy as np
import pytest

from glioworld import kernels


@pytest.fixture(scope="module")
def rng():
    return np.random.default_rng(11)


def both(name):
    impls = kernels.implementations(name)
    return [impls["numpy"]] + ([impls["numba"]] if impls["numba"] else [])


def test_backend_flag_reported():
    assert kernels.backend_name() in ("numpy", "numba")


def test_resize_backend_parity(rng):
    impls = kernels.implementations("trilinear_resize")
    if impls["numba"] is None:
        pytest.skip("numba unavailable")
    x = rng.standard_normal((3, 5, 6, 7))
    a = impls["numpy"](x, (11, 12, 13))
    b = impls["numba"](x, (11, 12, 13))
    assert np.allclose(a, b, atol=1e-12)


def test_resize_preserves_constants(rng):
    for fn in both("trilinear_resize"):
        x = np.full((2, 4, 4, 4), 3.25)
        out = fn(x, (9, 9, 9))
        assert np.allclose(out, 3.25)


def test_resize_linearity(rng):
    for fn in both("trilinear_resize"):
        a = rng.standard_normal((2, 4, 5, 6))
        b = rng.standard_normal((2, 4, 5, 6))
        assert np.allclose(fn(a + b, (8, 9, 10)),
                           fn(a, (8, 9, 10)) + fn(b, (8, 9, 10)), atol=1e-12)


def test_adjoint_property(rng):
    x = rng.standard_normal((4, 5, 6, 7))
    g = rng.standard_normal((4, 10, 11, 12))
    fwd = kernels.implementations("trilinear_resize")
    adj = kernels.implementations("trilinear_resize_adjoint")
    for backend in ("numpy", "numba"):
        if fwd[backend] is None:
            continue
        ax = fwd[backend](x, (10, 11, 12))
        aty = adj[backend](g, (5, 6, 7))
        assert np.isclose(np.sum(ax * g), np.sum(x * aty), rtol=1e-10)


def _ssim_bruteforce(x, y, win, c1, c2):
    vals = []
    D, H, W = x.shape
    n = win ** 3
    for a in range(D - win + 1):
        for b in range(H - win + 1):
            for c in range(W - win + 1):
                wx = x[a:a + win, b:b + win, c:c + win].ravel()
                wy = y[a:a + win, b:b + win, c:c + win].ravel()
                mx, my = wx.mean(), wy.mean()
                vx = (wx ** 2).mean() - mx ** 2
                vy = (wy ** 2).mean() - my ** 2
                cxy = (wx * wy).mean() - mx * my
                vals.append(((2 * mx * my + c1) * (2 * cxy + c2))
                            / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def test_ssim_matches_bruteforce(rng):
    x = rng.random((10, 11, 12))
    y = np.clip(x + 0.1 * rng.standard_normal(x.shape), 0, 1)
    ref = _ssim_bruteforce(x, y, 7, 1e-4, 9e-4)
    for fn in both("ssim3d_mean"):
        assert np.isclose(fn(x, y, 7, 1e-4, 9e-4), ref, rtol=1e-9)


def test_sphere_labels_match_distance_rule(rng):
    center = (7.3, 8.1, 7.9)
    radii = (1.2, 2.5, 4.0, 6.5)
    for fn in both("sphere_labels"):
        lab = fn((16, 16, 16), center, radii)
        for _ in range(200):
            v = rng.integers(0, 16, size=3)
            d = np.sqrt(((v - np.array(center)) ** 2).sum())
            if d < radii[0]:
                want = 4
            elif d < radii[1]:
                want = 3
            elif d < radii[2]:
                want = 2
            elif d < radii[3]:
                want = 1
            else:
                want = 0
            assert lab[tuple(v)] == want
