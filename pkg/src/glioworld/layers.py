"""Transformer building blocks in numpy with explicit backward passes.

Every module follows the same contract: ``forward(x, ..., ctx)`` stashes
whatever the backward pass needs into the caller-owned ``ctx`` dict and
``backward(dy, ctx)`` returns the input gradient while accumulating
parameter gradients into the module's ``g`` dict. Forward with ``ctx=None``
is pure and therefore safe for concurrent inference.
"""

import numpy as np


def xavier(rng, fan_in, fan_out, dtype):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


def gelu(x):
    c = np.asarray(0.7978845608028654, dtype=x.dtype)  # sqrt(2/pi)
    a = np.asarray(0.044715, dtype=x.dtype)
    x2 = x * x
    inner = c * (x + a * x2 * x)
    return 0.5 * x * (1.0 + np.tanh(inner))


def gelu_grad(x):
    c = np.asarray(0.7978845608028654, dtype=x.dtype)
    a = np.asarray(0.044715, dtype=x.dtype)
    x2 = x * x
    inner = c * (x + a * x2 * x)
    t = np.tanh(inner)
    sech2 = 1.0 - t * t
    return 0.5 * (1.0 + t) + 0.5 * x * sech2 * c * (1.0 + 3.0 * a * x2)


def softmax(x, axis=-1):
    m = x.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    return e / e.sum(axis=axis, keepdims=True)


class Module:
    """Base: nested parameter/gradient dictionaries by dotted name."""

    def children(self) -> dict:
        return {}

    def local(self) -> dict:
        """name -> (param array, grad array) for leaf parameters."""
        return {}

    def params(self, prefix="") -> dict:
        out = {prefix + n: p for n, (p, _) in self.local().items()}
        for cname, child in self.children().items():
            out.update(child.params(prefix + cname + "."))
        return out

    def grads(self, prefix="") -> dict:
        out = {prefix + n: g for n, (_, g) in self.local().items()}
        for cname, child in self.children().items():
            out.update(child.grads(prefix + cname + "."))
        return out

    def zero_grads(self) -> None:
        for _, g in self.local().values():
            g[...] = 0.0
        for child in self.children().values():
            child.zero_grads()


class Linear(Module):
    def __init__(self, d_in, d_out, rng, dtype, zero_init=False):
        if zero_init:
            self.w = np.zeros((d_in, d_out), dtype=dtype)
        else:
            self.w = xavier(rng, d_in, d_out, dtype)
        self.b = np.zeros(d_out, dtype=dtype)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)

    def local(self):
        return {"w": (self.w, self.gw), "b": (self.b, self.gb)}

    def forward(self, x, ctx=None):
        if ctx is not None:
            ctx["x"] = x
        return x @ self.w + self.b

    def backward(self, dy, ctx):
        x = ctx["x"]
        self.gw += x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])
        self.gb += dy.reshape(-1, dy.shape[-1]).sum(axis=0)
        return dy @ self.w.T


class LayerNorm(Module):
    def __init__(self, d, dtype, affine=True, eps=1e-5):
        self.eps = eps
        self.affine = affine
        if affine:
            self.g = np.ones(d, dtype=dtype)
            self.b = np.zeros(d, dtype=dtype)
            self.gg = np.zeros_like(self.g)
            self.gb = np.zeros_like(self.b)

    def local(self):
        if not self.affine:
            return {}
        return {"g": (self.g, self.gg), "b": (self.b, self.gb)}

    def forward(self, x, ctx=None):
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv
        if ctx is not None:
            ctx["xhat"] = xhat
            ctx["inv"] = inv
        if self.affine:
            return xhat * self.g + self.b
        return xhat

    def backward(self, dy, ctx):
        xhat, inv = ctx["xhat"], ctx["inv"]
        if self.affine:
            self.gg += (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
            self.gb += dy.reshape(-1, dy.shape[-1]).sum(axis=0)
            dxhat = dy * self.g
        else:
            dxhat = dy
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        return inv * (dxhat - m1 - xhat * m2)


class MultiHeadAttention(Module):
    """Scaled dot-product self-attention with an additive mask."""

    def __init__(self, d, n_heads, rng, dtype):
        if d % n_heads:
            raise ValueError(f"d_model {d} not divisible by n_heads {n_heads}")
        self.d = d
        self.h = n_heads
        self.dh = d // n_heads
        self.wq = Linear(d, d, rng, dtype)
        self.wk = Linear(d, d, rng, dtype)
        self.wv = Linear(d, d, rng, dtype)
        self.wo = Linear(d, d, rng, dtype)

    def children(self):
        return {"wq": self.wq, "wk": self.wk, "wv": self.wv, "wo": self.wo}

    def _split(self, x):
        B, L, _ = x.shape
        return x.reshape(B, L, self.h, self.dh).transpose(0, 2, 1, 3)

    def _merge(self, x):
        B, h, L, dh = x.shape
        return x.transpose(0, 2, 1, 3).reshape(B, L, h * dh)

    def forward(self, x, mask, ctx=None):
        sub = {} if ctx is not None else None
        cq, ck, cv = ({}, {}, {}) if ctx is not None else (None, None, None)
        q = self._split(self.wq.forward(x, cq))
        k = self._split(self.wk.forward(x, ck))
        v = self._split(self.wv.forward(x, cv))
        scale = np.asarray(1.0 / np.sqrt(self.dh), dtype=x.dtype)
        scores = np.matmul(q, k.transpose(0, 1, 3, 2)) * scale
        if mask is not None:
            scores = scores + mask  # (L,L) or (B,1,L,L) broadcast
        attn = softmax(scores, axis=-1)
        out = self._merge(np.matmul(attn, v))
        co = {} if ctx is not None else None
        y = self.wo.forward(out, co)
        if ctx is not None:
            ctx.update(q=q, k=k, v=v, attn=attn, cq=cq, ck=ck, cv=cv, co=co,
                       scale=scale)
        return y

    def backward(self, dy, ctx):
        q, k, v, attn = ctx["q"], ctx["k"], ctx["v"], ctx["attn"]
        dout = self.wo.backward(dy, ctx["co"])
        B, L, _ = dout.shape
        dmerged = dout.reshape(B, L, self.h, self.dh).transpose(0, 2, 1, 3)
        dattn = np.matmul(dmerged, v.transpose(0, 1, 3, 2))
        dv = np.matmul(attn.transpose(0, 1, 3, 2), dmerged)
        # softmax backward
        dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
        dscores *= ctx["scale"]
        dq = np.matmul(dscores, k)
        dk = np.matmul(dscores.transpose(0, 1, 3, 2), q)
        dx = self.wq.backward(self._merge(dq), ctx["cq"])
        dx += self.wk.backward(self._merge(dk), ctx["ck"])
        dx += self.wv.backward(self._merge(dv), ctx["cv"])
        return dx


class FeedForward(Module):
    def __init__(self, d, d_ff, rng, dtype):
        self.lin1 = Linear(d, d_ff, rng, dtype)
        self.lin2 = Linear(d_ff, d, rng, dtype)

    def children(self):
        return {"lin1": self.lin1, "lin2": self.lin2}

    def forward(self, x, ctx=None):
        c1 = {} if ctx is not None else None
        h = self.lin1.forward(x, c1)
        a = gelu(h)
        c2 = {} if ctx is not None else None
        y = self.lin2.forward(a, c2)
        if ctx is not None:
            ctx.update(h=h, c1=c1, c2=c2)
        return y

    def backward(self, dy, ctx):
        da = self.lin2.backward(dy, ctx["c2"])
        dh = da * gelu_grad(ctx["h"])
        return self.lin1.backward(dh, ctx["c1"])


class AttnBlock(Module):
    """Pre-norm residual attention: y = x + attn(ln(x), mask)."""

    def __init__(self, d, n_heads, rng, dtype):
        self.ln = LayerNorm(d, dtype)
        self.attn = MultiHeadAttention(d, n_heads, rng, dtype)

    def children(self):
        return {"ln": self.ln, "attn": self.attn}

    def forward(self, x, mask, ctx=None):
        cl = {} if ctx is not None else None
        ca = {} if ctx is not None else None
        y = x + self.attn.forward(self.ln.forward(x, cl), mask, ca)
        if ctx is not None:
            ctx.update(cl=cl, ca=ca)
        return y

    def backward(self, dy, ctx):
        return dy + self.ln.backward(self.attn.backward(dy, ctx["ca"]), ctx["cl"])


class FFNBlock(Module):
    """Pre-norm residual feed-forward: y = x + ffn(ln(x))."""

    def __init__(self, d, d_ff, rng, dtype):
        self.ln = LayerNorm(d, dtype)
        self.ffn = FeedForward(d, d_ff, rng, dtype)

    def children(self):
        return {"ln": self.ln, "ffn": self.ffn}

    def forward(self, x, ctx=None):
        cl = {} if ctx is not None else None
        cf = {} if ctx is not None else None
        y = x + self.ffn.forward(self.ln.forward(x, cl), cf)
        if ctx is not None:
            ctx.update(cl=cl, cf=cf)
        return y

    def backward(self, dy, ctx):
        return dy + self.ln.backward(self.ffn.backward(dy, ctx["cf"]), ctx["cl"])


class TrunkLayer(Module):
    """Unified attention plus either a shared or task-routed FFN block."""

    def __init__(self, d, n_heads, d_ff, rng, dtype, task_specific: bool):
        self.attn_block = AttnBlock(d, n_heads, rng, dtype)
        self.task_specific = task_specific
        if task_specific:
            self.ffn_plan = FFNBlock(d, d_ff, rng, dtype)
            self.ffn_img = FFNBlock(d, d_ff, rng, dtype)
        else:
            self.ffn_shared = FFNBlock(d, d_ff, rng, dtype)

    def children(self):
        out = {"attn": self.attn_block}
        if self.task_specific:
            out["ffn_plan"] = self.ffn_plan
            out["ffn_img"] = self.ffn_img
        else:
            out["ffn"] = self.ffn_shared
        return out

    def _ffn_for(self, task):
        if not self.task_specific:
            return self.ffn_shared
        return self.ffn_plan if task == "plan" else self.ffn_img

    def forward(self, x, mask, task, ctx=None):
        ca = {} if ctx is not None else None
        h = self.attn_block.forward(x, mask, ca)
        cf = {} if ctx is not None else None
        y = self._ffn_for(task).forward(h, cf)
        if ctx is not None:
            ctx.update(ca=ca, cf=cf, task=task)
        return y

    def backward(self, dy, ctx):
        dh = self._ffn_for(ctx["task"]).backward(dy, ctx["cf"])
        return self.attn_block.backward(dh, ctx["ca"])


def sinusoidal_embedding(t, dim, dtype):
    """Sinusoidal features of scalar timesteps t in [0,1], shape (B, dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=dtype))
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, np.log(1000.0), half)).astype(dtype)
    ang = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
    if emb.shape[-1] < dim:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], dim - emb.shape[-1]), dtype=dtype)], axis=-1)
    return emb.astype(dtype)


class AdaLNBlock(Module):
    """Transformer block whose norms are scale/shift-modulated by a timestep
    embedding (the flow head's conditioning path)."""

    def __init__(self, d, n_heads, d_ff, d_t, rng, dtype):
        self.d = d
        self.norm1 = LayerNorm(d, dtype, affine=False)
        self.attn = MultiHeadAttention(d, n_heads, rng, dtype)
        self.norm2 = LayerNorm(d, dtype, affine=False)
        self.ffn = FeedForward(d, d_ff, rng, dtype)
        self.mod = Linear(d_t, 4 * d, rng, dtype, zero_init=True)

    def children(self):
        return {"norm1": self.norm1, "attn": self.attn, "norm2": self.norm2,
                "ffn": self.ffn, "mod": self.mod}

    def forward(self, x, temb, ctx=None):
        cm = {} if ctx is not None else None
        m = self.mod.forward(temb, cm)  # (B, 4d)
        s1, b1, s2, b2 = np.split(m, 4, axis=-1)
        c1 = {} if ctx is not None else None
        n1 = self.norm1.forward(x, c1)
        a_in = n1 * (1.0 + s1[:, None, :]) + b1[:, None, :]
        ca = {} if ctx is not None else None
        h = x + self.attn.forward(a_in, None, ca)
        c2 = {} if ctx is not None else None
        n2 = self.norm2.forward(h, c2)
        f_in = n2 * (1.0 + s2[:, None, :]) + b2[:, None, :]
        cf = {} if ctx is not None else None
        y = h + self.ffn.forward(f_in, cf)
        if ctx is not None:
            ctx.update(cm=cm, c1=c1, ca=ca, c2=c2, cf=cf,
                       n1=n1, n2=n2, s1=s1, s2=s2)
        return y

    def backward(self, dy, ctx):
        df_in = self.ffn.backward(dy, ctx["cf"])
        ds2 = (df_in * ctx["n2"]).sum(axis=1)
        db2 = df_in.sum(axis=1)
        dn2 = df_in * (1.0 + ctx["s2"][:, None, :])
        dh = dy + self.norm2.backward(dn2, ctx["c2"])
        da_in = self.attn.backward(dh, ctx["ca"])
        ds1 = (da_in * ctx["n1"]).sum(axis=1)
        db1 = da_in.sum(axis=1)
        dn1 = da_in * (1.0 + ctx["s1"][:, None, :])
        dx = dh + self.norm1.backward(dn1, ctx["c1"])
        dm = np.concatenate([ds1, db1, ds2, db2], axis=-1)
        dtemb = self.mod.backward(dm, ctx["cm"])
        return dx, dtemb


class FlowHead(Module):
    """Velocity predictor over image tokens.

    A small adaLN transformer stack plus timestep-gated skip paths from the
    noisy latent and the current-scan latent, which preserve the identity
    pathways that the d_model bottleneck would otherwise remove. The head
    emits a bounded numerator that is divided by (1 - t + time_eps): the
    straight-path velocity toward a predicted clean latent scales as
    1/(1 - t), so this keeps the learned function bounded on-path.
    """

    def __init__(self, d, n_heads, d_ff, c_lat, depth, rng, dtype,
                 time_eps: float = 0.05):
        self.d = d
        self.d_t = d
        self.c_lat = c_lat
        self.time_eps = time_eps
        self.t_mlp = Linear(self.d_t, self.d_t, rng, dtype)
        self.blocks = [AdaLNBlock(d, n_heads, d_ff, self.d_t, rng, dtype)
                       for _ in range(depth)]
        self.norm_f = LayerNorm(d, dtype, affine=False)
        self.mod_f = Linear(self.d_t, 2 * d, rng, dtype, zero_init=True)
        self.out = Linear(d, c_lat, rng, dtype, zero_init=True)
        self.skip = Linear(self.d_t, 2 * c_lat, rng, dtype, zero_init=True)
        self.dtype = dtype

    def children(self):
        out = {"t_mlp": self.t_mlp, "norm_f": self.norm_f, "mod_f": self.mod_f,
               "out": self.out, "skip": self.skip}
        for i, blk in enumerate(self.blocks):
            out[f"block{i}"] = blk
        return out

    def forward(self, h_img, t, z_t, z_cur, ctx=None):
        sin = sinusoidal_embedding(t, self.d_t, self.dtype)
        cm = {} if ctx is not None else None
        pre = self.t_mlp.forward(sin, cm)
        temb = gelu(pre)
        x = h_img
        bctxs = []
        for blk in self.blocks:
            cb = {} if ctx is not None else None
            x = blk.forward(x, temb, cb)
            bctxs.append(cb)
        cmf = {} if ctx is not None else None
        mf = self.mod_f.forward(temb, cmf)
        sf, bf = np.split(mf, 2, axis=-1)
        cnf = {} if ctx is not None else None
        nf = self.norm_f.forward(x, cnf)
        f_out = nf * (1.0 + sf[:, None, :]) + bf[:, None, :]
        cout = {} if ctx is not None else None
        v = self.out.forward(f_out, cout)
        csk = {} if ctx is not None else None
        gains = self.skip.forward(temb, csk)  # (B, 2*C)
        g_t, g_c = np.split(gains, 2, axis=-1)
        v = v + g_t[:, None, :] * z_t + g_c[:, None, :] * z_cur
        t_arr = np.atleast_1d(np.asarray(t, dtype=self.dtype))
        inv = (1.0 / (1.0 - t_arr + self.time_eps))[:, None, None]
        v = v * inv
        if ctx is not None:
            ctx.update(cm=cm, pre=pre, bctxs=bctxs, cmf=cmf, cnf=cnf, nf=nf,
                       sf=sf, cout=cout, csk=csk, g_t=g_t, g_c=g_c,
                       z_t=z_t, z_cur=z_cur, inv=inv)
        return v

    def backward(self, dv, ctx):
        dv = dv * ctx["inv"]
        dg_t = (dv * ctx["z_t"]).sum(axis=1)
        dg_c = (dv * ctx["z_cur"]).sum(axis=1)
        dtemb = self.skip.backward(np.concatenate([dg_t, dg_c], axis=-1), ctx["csk"])
        df_out = self.out.backward(dv, ctx["cout"])
        dsf = (df_out * ctx["nf"]).sum(axis=1)
        dbf = df_out.sum(axis=1)
        dnf = df_out * (1.0 + ctx["sf"][:, None, :])
        dx = self.norm_f.backward(dnf, ctx["cnf"])
        dtemb += self.mod_f.backward(np.concatenate([dsf, dbf], axis=-1), ctx["cmf"])
        for blk, cb in zip(reversed(self.blocks), reversed(ctx["bctxs"])):
            dx, dt = blk.backward(dx, cb)
            dtemb += dt
        dpre = dtemb * gelu_grad(ctx["pre"])
        self.t_mlp.backward(dpre, ctx["cm"])
        return dx
