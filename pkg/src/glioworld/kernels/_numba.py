"""Numba JIT kernel implementations (fast path)."""

import numpy as np
from numba import njit


@njit(cache=True)
def _src_coord(i, n_in, n_out):
    if n_out == 1 or n_in == 1:
        return 0.0
    return i * (n_in - 1) / (n_out - 1)


@njit(cache=True)
def _trilinear_resize_impl(x, out):
    C, d, h, w = x.shape
    D, H, W = out.shape[1], out.shape[2], out.shape[3]
    for a in range(D):
        sa = _src_coord(a, d, D)
        a0 = int(sa)
        if a0 > d - 1:
            a0 = d - 1
        a1 = min(a0 + 1, d - 1)
        fa = sa - a0
        for b in range(H):
            sb = _src_coord(b, h, H)
            b0 = int(sb)
            if b0 > h - 1:
                b0 = h - 1
            b1 = min(b0 + 1, h - 1)
            fb = sb - b0
            for c in range(W):
                sc = _src_coord(c, w, W)
                c0 = int(sc)
                if c0 > w - 1:
                    c0 = w - 1
                c1 = min(c0 + 1, w - 1)
                fc = sc - c0
                w000 = (1 - fa) * (1 - fb) * (1 - fc)
                w001 = (1 - fa) * (1 - fb) * fc
                w010 = (1 - fa) * fb * (1 - fc)
                w011 = (1 - fa) * fb * fc
                w100 = fa * (1 - fb) * (1 - fc)
                w101 = fa * (1 - fb) * fc
                w110 = fa * fb * (1 - fc)
                w111 = fa * fb * fc
                for ch in range(C):
                    out[ch, a, b, c] = (
                        w000 * x[ch, a0, b0, c0]
                        + w001 * x[ch, a0, b0, c1]
                        + w010 * x[ch, a0, b1, c0]
                        + w011 * x[ch, a0, b1, c1]
                        + w100 * x[ch, a1, b0, c0]
                        + w101 * x[ch, a1, b0, c1]
                        + w110 * x[ch, a1, b1, c0]
                        + w111 * x[ch, a1, b1, c1]
                    )


def trilinear_resize(x: np.ndarray, out_shape) -> np.ndarray:
    out = np.empty((x.shape[0],) + tuple(out_shape), dtype=x.dtype)
    _trilinear_resize_impl(np.ascontiguousarray(x), out)
    return out


@njit(cache=True)
def _trilinear_adjoint_impl(grad, out):
    C, D, H, W = grad.shape
    d, h, w = out.shape[1], out.shape[2], out.shape[3]
    for a in range(D):
        sa = _src_coord(a, d, D)
        a0 = int(sa)
        if a0 > d - 1:
            a0 = d - 1
        a1 = min(a0 + 1, d - 1)
        fa = sa - a0
        for b in range(H):
            sb = _src_coord(b, h, H)
            b0 = int(sb)
            if b0 > h - 1:
                b0 = h - 1
            b1 = min(b0 + 1, h - 1)
            fb = sb - b0
            for c in range(W):
                sc = _src_coord(c, w, W)
                c0 = int(sc)
                if c0 > w - 1:
                    c0 = w - 1
                c1 = min(c0 + 1, w - 1)
                fc = sc - c0
                w000 = (1 - fa) * (1 - fb) * (1 - fc)
                w001 = (1 - fa) * (1 - fb) * fc
                w010 = (1 - fa) * fb * (1 - fc)
                w011 = (1 - fa) * fb * fc
                w100 = fa * (1 - fb) * (1 - fc)
                w101 = fa * (1 - fb) * fc
                w110 = fa * fb * (1 - fc)
                w111 = fa * fb * fc
                for ch in range(C):
                    g = grad[ch, a, b, c]
                    out[ch, a0, b0, c0] += w000 * g
                    out[ch, a0, b0, c1] += w001 * g
                    out[ch, a0, b1, c0] += w010 * g
                    out[ch, a0, b1, c1] += w011 * g
                    out[ch, a1, b0, c0] += w100 * g
                    out[ch, a1, b0, c1] += w101 * g
                    out[ch, a1, b1, c0] += w110 * g
                    out[ch, a1, b1, c1] += w111 * g


def trilinear_resize_adjoint(grad: np.ndarray, in_shape) -> np.ndarray:
    out = np.zeros((grad.shape[0],) + tuple(in_shape), dtype=grad.dtype)
    _trilinear_adjoint_impl(np.ascontiguousarray(grad), out)
    return out


@njit(cache=True)
def _integral3d(x):
    D, H, W = x.shape
    s = np.zeros((D + 1, H + 1, W + 1), dtype=np.float64)
    for i in range(D):
        for j in range(H):
            row = 0.0
            for k in range(W):
                row += x[i, j, k]
                s[i + 1, j + 1, k + 1] = row + s[i, j + 1, k + 1] \
                    + s[i + 1, j, k + 1] - s[i, j, k + 1]
    return s


@njit(cache=True)
def _window_sum(s, a, b, c, w):
    return (s[a + w, b + w, c + w] - s[a, b + w, c + w]
            - s[a + w, b, c + w] - s[a + w, b + w, c]
            + s[a, b, c + w] + s[a, b + w, c] + s[a + w, b, c]
            - s[a, b, c])


@njit(cache=True)
def _ssim3d_impl(x, y, win, c1, c2):
    D, H, W = x.shape
    n = win * win * win
    sx_i = _integral3d(x)
    sy_i = _integral3d(y)
    sxx_i = _integral3d(x * x)
    syy_i = _integral3d(y * y)
    sxy_i = _integral3d(x * y)
    total = 0.0
    count = 0
    for a in range(D - win + 1):
        for b in range(H - win + 1):
            for c in range(W - win + 1):
                mx = _window_sum(sx_i, a, b, c, win) / n
                my = _window_sum(sy_i, a, b, c, win) / n
                vx = _window_sum(sxx_i, a, b, c, win) / n - mx * mx
                vy = _window_sum(syy_i, a, b, c, win) / n - my * my
                cxy = _window_sum(sxy_i, a, b, c, win) / n - mx * my
                num = (2 * mx * my + c1) * (2 * cxy + c2)
                den = (mx * mx + my * my + c1) * (vx + vy + c2)
                total += num / den
                count += 1
    return total / count


def ssim3d_mean(x: np.ndarray, y: np.ndarray, win: int, c1: float, c2: float) -> float:
    return float(
        _ssim3d_impl(
            np.ascontiguousarray(x, dtype=np.float64),
            np.ascontiguousarray(y, dtype=np.float64),
            win,
            c1,
            c2,
        )
    )


@njit(cache=True)
def _sphere_labels_impl(out, cz, cy, cx, r2_cav, r2_net, r2_et, r2_ed):
    D, H, W = out.shape
    for a in range(D):
        dz = a - cz
        for b in range(H):
            dy = b - cy
            for c in range(W):
                dx = c - cx
                d2 = dz * dz + dy * dy + dx * dx
                if d2 < r2_cav:
                    out[a, b, c] = 4
                elif d2 < r2_net:
                    out[a, b, c] = 3
                elif d2 < r2_et:
                    out[a, b, c] = 2
                elif d2 < r2_ed:
                    out[a, b, c] = 1
                else:
                    out[a, b, c] = 0


def sphere_labels(shape, center, radii) -> np.ndarray:
    out = np.empty(tuple(shape), dtype=np.int8)
    r_cav, r_net, r_et, r_ed = radii
    _sphere_labels_impl(
        out,
        float(center[0]),
        float(center[1]),
        float(center[2]),
        float(r_cav) ** 2,
        float(r_net) ** 2,
        float(r_et) ** 2,
        float(r_ed) ** 2,
    )
    return out
