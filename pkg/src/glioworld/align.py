"""Mask-alignment auxiliary objective.

Tapped shared-trunk features are fused top-down into voxel logits by
projection, trilinear upsampling and summation; the compound focal + Dice
loss against the time-appropriate mask is weighted by a noise-dependent
coefficient (1 for planning, t for imaging, so high-noise steps count less).
"""

import numpy as np

from .kernels import trilinear_resize, trilinear_resize_adjoint
from .layers import Linear, Module


def alpha_schedule(task: str, t=None):
    """Time-dependent weight on the alignment loss."""
    if task == "plan":
        return 1.0
    if task == "img":
        if t is None:
            raise ValueError("imaging alignment weight needs the timestep t")
        return t
    raise ValueError(f"unknown task {task!r}")


class Aligner(Module):
    """Top-down pyramid fusion from tapped features to 4-class voxel logits."""

    def __init__(self, taps, d_model, d_al, latent_side, grid, rng, dtype):
        self.taps = tuple(sorted(taps))
        self.d_al = d_al
        self.side = latent_side
        self.grid = grid
        self.proj = {i: Linear(d_model, d_al, rng, dtype) for i in self.taps}
        self.out = Linear(d_al, 4, rng, dtype)
        self.dtype = dtype

    def children(self):
        out = {f"proj{i}": p for i, p in self.proj.items()}
        out["out"] = self.out
        return out

    def _tok_to_grid(self, x, side):
        B = x.shape[0]
        return x.reshape(B, side, side, side, self.d_al).transpose(0, 4, 1, 2, 3)

    def _grid_to_tok(self, x):
        B, C = x.shape[:2]
        return x.transpose(0, 2, 3, 4, 1).reshape(B, -1, C)

    def _resize_batch(self, x, out_side):
        B = x.shape[0]
        out = np.empty((B, x.shape[1], out_side, out_side, out_side), dtype=x.dtype)
        for b in range(B):
            out[b] = trilinear_resize(x[b], (out_side,) * 3)
        return out

    def _resize_adj_batch(self, g, in_side):
        B = g.shape[0]
        out = np.empty((B, g.shape[1], in_side, in_side, in_side), dtype=g.dtype)
        for b in range(B):
            out[b] = trilinear_resize_adjoint(g[b], (in_side,) * 3)
        return out

    def forward(self, tap_feats: dict, ctx=None):
        """tap_feats: layer index -> (B, L_img, d_model) image-token features."""
        order = sorted(self.taps, reverse=True)  # deepest first
        sides = {}
        side = self.side
        plan = []
        for k, tap in enumerate(order):
            plan.append((tap, side))
            sides[tap] = side
            if k < len(order) - 1:
                side = min(side * 2, self.grid)
        pctx = {} if ctx is not None else None
        y = None
        for tap, tap_side in plan:
            c = {} if ctx is not None else None
            p = self.proj[tap].forward(tap_feats[tap], c)
            if pctx is not None:
                pctx[tap] = c
            pg = self._tok_to_grid(p, self.side)
            if tap_side != self.side:
                pg = self._resize_batch(pg, tap_side)
            if y is None:
                y = pg
            else:
                y = self._resize_batch(y, tap_side) + pg
        final_side = plan[-1][1]
        if final_side != self.grid:
            y = self._resize_batch(y, self.grid)
        cout = {} if ctx is not None else None
        logits = self.out.forward(self._grid_to_tok(y), cout)  # (B, grid^3, 4)
        B = logits.shape[0]
        logits = logits.reshape(B, self.grid, self.grid, self.grid, 4)
        logits = logits.transpose(0, 4, 1, 2, 3)
        if ctx is not None:
            ctx.update(plan=plan, pctx=pctx, cout=cout, final_side=final_side)
        return logits

    def backward(self, dlogits, ctx):
        """Returns {layer index: gradient w.r.t. tapped features}."""
        B = dlogits.shape[0]
        dtok = dlogits.transpose(0, 2, 3, 4, 1).reshape(B, -1, 4)
        dy = self._grid_to_tok_adj(self.out.backward(dtok, ctx["cout"]))
        if ctx["final_side"] != self.grid:
            dy = self._resize_adj_batch(dy, ctx["final_side"])
        dtaps = {}
        for tap, tap_side in reversed(ctx["plan"]):
            dpg = dy
            if tap_side != self.side:
                dp_tok = self._resize_adj_batch(dpg, self.side)
            else:
                dp_tok = dpg
            dp = self._grid_to_tok(dp_tok)
            dtaps[tap] = self.proj[tap].backward(dp, ctx["pctx"][tap])
            if tap != ctx["plan"][0][0]:
                prev_side = dict(ctx["plan"])[_prev_tap(ctx["plan"], tap)]
                dy = self._resize_adj_batch(dy, prev_side)
        return dtaps

    def _grid_to_tok_adj(self, dtok):
        B, _, C = dtok.shape
        g = self.grid
        return dtok.reshape(B, g, g, g, C).transpose(0, 4, 1, 2, 3)


def _prev_tap(plan, tap):
    idx = [p[0] for p in plan].index(tap)
    return plan[idx - 1][0]


def channel_softmax(logits, axis=1):
    m = logits.max(axis=axis, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=axis, keepdims=True)


def channel_softmax_backward(probs, dprobs, axis=1):
    dot = (dprobs * probs).sum(axis=axis, keepdims=True)
    return probs * (dprobs - dot)


def _pow(base, exponent: float):
    """base ** exponent with fast paths for the small integer exponents the
    focal loss actually uses."""
    if exponent == 0.0:
        return np.ones_like(base)
    if exponent == 1.0:
        return base
    if exponent == 2.0:
        return base * base
    return base ** exponent


def focal_loss(probs, mask, gamma: float, eps: float = 1e-7) -> float:
    """-(1/|V|) sum_v (1 - p_true)^gamma log p_true, probs clamped to [eps, 1-eps]."""
    p = np.clip((probs * mask).sum(axis=0), eps, 1.0 - eps)
    return float(-np.mean(_pow(1.0 - p, gamma) * np.log(p)))


def dice_loss(probs, mask, eps: float = 1e-6) -> float:
    """Mean over the ED/ET/NET regions of 1 - 2<p, m>/(|p| + |m| + eps)."""
    total = 0.0
    for r in range(1, 4):
        p = probs[r].ravel()
        m = mask[r].ravel()
        total += 1.0 - 2.0 * float(p @ m) / (float(p.sum()) + float(m.sum()) + eps)
    return total / 3.0


def align_loss(probs, mask, task: str, t=None, gamma: float = 2.0,
               eps: float = 1e-7, dice_eps: float = 1e-6) -> float:
    """alpha(t) * (focal + dice) for a single item."""
    a = alpha_schedule(task, t)
    return float(a) * (focal_loss(probs, mask, gamma, eps) + dice_loss(probs, mask, dice_eps))


def _focal_grad(probs, mask, gamma, eps):
    """Gradient of focal_loss w.r.t. probs (same shape)."""
    p_true = (probs * mask).sum(axis=0)
    clamped = np.clip(p_true, eps, 1.0 - eps)
    active = (p_true >= eps) & (p_true <= 1.0 - eps)
    n = p_true.size
    one_m = 1.0 - clamped
    if gamma == 0.0:
        d = -1.0 / clamped
    else:
        d = (gamma * _pow(one_m, gamma - 1.0) * np.log(clamped)
             - _pow(one_m, gamma) / clamped)
    d = d * active / n
    return mask * d[None]


def _dice_grad(probs, mask, dice_eps):
    g = np.zeros_like(probs)
    for r in range(1, 4):
        p = probs[r]
        m = mask[r]
        denom = float(p.sum()) + float(m.sum()) + dice_eps
        inter = float((p * m).sum())
        g[r] = (-2.0 * m / denom + 2.0 * inter / denom ** 2) / 3.0
    return g


def align_loss_batch(logits, masks, task: str, ts=None, gamma: float = 2.0,
                     eps: float = 1e-7, dice_eps: float = 1e-6):
    """Batch-mean alignment loss and its gradient w.r.t. the logits.

    logits: (B, 4, D, H, W); masks: same shape one-hot; ts: (B,) for imaging.
    """
    B = logits.shape[0]
    probs = channel_softmax(logits)
    loss = 0.0
    dlogits = np.zeros_like(probs)
    for b in range(B):
        a = float(alpha_schedule(task, None if ts is None else float(ts[b])))
        f = focal_loss(probs[b], masks[b], gamma, eps)
        d = dice_loss(probs[b], masks[b], dice_eps)
        loss += a * (f + d)
        if a != 0.0:
            dp = _focal_grad(probs[b], masks[b], gamma, eps) + _dice_grad(probs[b], masks[b], dice_eps)
            dlogits[b] = channel_softmax_backward(probs[b], (a / B) * dp, axis=0)
    return loss / B, dlogits


def focused_mask(logits) -> np.ndarray:
    """Hard labels from aligner logits: argmax over the class axis."""
    return np.argmax(logits, axis=0).astype(np.int8)
