"""Pure-numpy kernel implementations (fallback path)."""

import numpy as np


def _axis_weights(n_in: int, n_out: int):
    """Source indices and interpolation weights, align-corners convention."""
    if n_out == 1 or n_in == 1:
        src = np.zeros(n_out)
    else:
        src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    i0 = np.floor(src).astype(np.int64)
    i0 = np.minimum(i0, n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    w0 = 1.0 - w1
    return i0, i1, w0, w1


def trilinear_resize(x: np.ndarray, out_shape) -> np.ndarray:
    """Resize (C, d, h, w) -> (C, D, H, W) by align-corners trilinear interp."""
    C, d, h, w = x.shape
    D, H, W = out_shape
    di0, di1, dw0, dw1 = _axis_weights(d, D)
    hi0, hi1, hw0, hw1 = _axis_weights(h, H)
    wi0, wi1, ww0, ww1 = _axis_weights(w, W)

    out = np.zeros((C, D, H, W), dtype=x.dtype)
    for ia, wa in ((di0, dw0), (di1, dw1)):
        xa = x[:, ia]
        for ib, wb in ((hi0, hw0), (hi1, hw1)):
            xab = xa[:, :, ib]
            wab = wa[:, None] * wb[None, :]
            for ic, wc in ((wi0, ww0), (wi1, ww1)):
                out += xab[:, :, :, ic] * (wab[:, :, None] * wc).astype(x.dtype)
    return out


def trilinear_resize_adjoint(grad: np.ndarray, in_shape) -> np.ndarray:
    """Exact adjoint of trilinear_resize: scatter (C,D,H,W) -> (C,d,h,w)."""
    C, D, H, W = grad.shape
    d, h, w = in_shape
    di0, di1, dw0, dw1 = _axis_weights(d, D)
    hi0, hi1, hw0, hw1 = _axis_weights(h, H)
    wi0, wi1, ww0, ww1 = _axis_weights(w, W)

    out = np.zeros((C, d, h, w), dtype=grad.dtype)
    flat = out.reshape(C, -1)
    for ia, wa in ((di0, dw0), (di1, dw1)):
        for ib, wb in ((hi0, hw0), (hi1, hw1)):
            for ic, wc in ((wi0, ww0), (wi1, ww1)):
                wgt = (wa[:, None, None] * wb[None, :, None] * wc[None, None, :]).astype(grad.dtype)
                idx = (ia[:, None, None] * h + ib[None, :, None]) * w + ic[None, None, :]
                contrib = grad * wgt
                np.add.at(flat, (slice(None), idx.ravel()), contrib.reshape(C, -1))
    return out


def _box_sum(x: np.ndarray, win: int) -> np.ndarray:
    """Sum over all valid win^3 windows via cumulative sums."""
    s = x
    for ax in range(3):
        c = np.cumsum(s, axis=ax)
        lead = np.take(c, np.arange(win - 1, s.shape[ax]), axis=ax)
        lag = np.take(c, np.arange(0, s.shape[ax] - win + 1) - 1, axis=ax)
        # index -1 wraps; the first window needs no subtraction
        lag = np.where(
            np.expand_dims(np.arange(lead.shape[ax]) == 0, tuple(i for i in range(3) if i != ax)),
            0.0,
            lag,
        )
        s = lead - lag
    return s


def ssim3d_mean(x: np.ndarray, y: np.ndarray, win: int, c1: float, c2: float) -> float:
    """Mean SSIM over valid win^3 uniform windows (population variances)."""
    x = x.astype(np.float64)
    y = y.astype(np.float64)
    n = float(win ** 3)
    mx = _box_sum(x, win) / n
    my = _box_sum(y, win) / n
    mxx = _box_sum(x * x, win) / n
    myy = _box_sum(y * y, win) / n
    mxy = _box_sum(x * y, win) / n
    vx = mxx - mx * mx
    vy = myy - my * my
    cxy = mxy - mx * my
    num = (2 * mx * my + c1) * (2 * cxy + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(np.mean(num / den))


def sphere_labels(shape, center, radii) -> np.ndarray:
    """Region labels for nested spheres.

    radii = (r_cav, r_net, r_et, r_ed), non-decreasing. A voxel at distance
    rho from center gets: CAV(4) if rho < r_cav, NET(3) if rho < r_net,
    ET(2) if rho < r_et, ED(1) if rho < r_ed, else BG(0).
    """
    D, H, W = shape
    r_cav, r_net, r_et, r_ed = radii
    zz = (np.arange(D) - center[0])[:, None, None]
    yy = (np.arange(H) - center[1])[None, :, None]
    xx = (np.arange(W) - center[2])[None, None, :]
    d2 = zz * zz + yy * yy + xx * xx
    out = np.zeros(shape, dtype=np.int8)
    out[d2 < r_ed * r_ed] = 1
    out[d2 < r_et * r_et] = 2
    out[d2 < r_net * r_net] = 3
    out[d2 < r_cav * r_cav] = 4
    return out
