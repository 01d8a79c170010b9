"""The Y-shaped world-model backbone.

A single attention trunk is shared by both tasks; feed-forward blocks are
shared in the first half of the network and task-specific in the second.
Text obeys causal attention among text tokens while image tokens see and are
seen by everything. Shared-layer image features are tapped for the aligner.
"""

from dataclasses import dataclass

import numpy as np

from .align import Aligner
from .config import ModelConfig
from .layers import FlowHead, LayerNorm, Linear, TrunkLayer
from .tokenizer import PatchAutoencoder, TokenSequence, Vocabulary


def build_attention_mask(i_text, L: int, dtype=np.float32) -> np.ndarray:
    """Additive mask: -inf exactly where query and key are both text tokens
    and the key lies in the future; 0 everywhere else."""
    M = np.zeros((L, L), dtype=dtype)
    it = np.asarray(sorted(i_text), dtype=np.int64)
    if it.size:
        M[np.ix_(it, it)] = np.where(it[None, :] > it[:, None],
                                     dtype(-np.inf), dtype(0.0))
    return M


@dataclass
class ModelBatch:
    """Padded batch of interleaved sequences for one task."""

    ids: np.ndarray        # (B, L) int64, -1 at image slots, PAD beyond EOS
    img: np.ndarray        # (B, L_img, C)
    img_cur: np.ndarray    # (B, L_img, C) or None
    attn_mask: np.ndarray  # (B, 1, L, L) additive
    i_img: np.ndarray      # image slot indices (same for every item)
    lengths: np.ndarray    # (B,) logical lengths incl. EOS
    task: str

    @property
    def batch_size(self) -> int:
        return self.ids.shape[0]

    @property
    def length(self) -> int:
        return self.ids.shape[1]


class WorldModel:
    """Parameters plus forward/backward for the full stack."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.dtype = dtype
        self.vocab = Vocabulary()
        rng = np.random.default_rng(seed)
        d = cfg.d_model
        C = cfg.lat_channels

        self.voltok = PatchAutoencoder(cfg.patch, cfg.c_lat, dtype=dtype)
        self.emb_tok = (0.02 * rng.standard_normal((self.vocab.size, d))).astype(dtype)
        self.g_emb_tok = np.zeros_like(self.emb_tok)
        self.emb_pos = (0.02 * rng.standard_normal((cfg.n_img_tokens, d))).astype(dtype)
        self.g_emb_pos = np.zeros_like(self.emb_pos)

        self.proj_plan_in = Linear(C, d, rng, dtype)
        self.proj_img_in = Linear(2 * C, d, rng, dtype)
        self.layers = [
            TrunkLayer(d, cfg.n_heads, cfg.d_ff, rng, dtype,
                       task_specific=(i > cfg.n_shared and cfg.y_mot))
            for i in range(1, cfg.n_layers + 1)
        ]
        self.final_ln_plan = LayerNorm(d, dtype)
        self.final_ln_img = LayerNorm(d, dtype)
        self.plan_head = Linear(d, self.vocab.size, rng, dtype)
        self.flow_head = FlowHead(d, cfg.n_heads, cfg.d_ff, C, cfg.flow_depth,
                                  rng, dtype)
        self.aligner = None
        if cfg.mm_align:
            self.aligner = Aligner(cfg.aligner_taps, d, cfg.aligner_width,
                                   cfg.latent_side, cfg.grid, rng, dtype)

    # -- parameter bookkeeping ------------------------------------------------

    def _modules(self):
        mods = {"proj.plan_in": self.proj_plan_in, "proj.img_in": self.proj_img_in}
        for i, layer in enumerate(self.layers, start=1):
            mods[f"trunk{i}"] = layer
        mods["final_ln_plan"] = self.final_ln_plan
        mods["final_ln_img"] = self.final_ln_img
        mods["head.plan"] = self.plan_head
        mods["head.flow"] = self.flow_head
        if self.aligner is not None:
            mods["align"] = self.aligner
        return mods

    def params(self) -> dict:
        out = {"embed.tok": self.emb_tok, "embed.pos": self.emb_pos}
        for name, mod in self._modules().items():
            out.update(mod.params(name + "."))
        out.update(self.voltok.params())
        return out

    def grads(self) -> dict:
        out = {"embed.tok": self.g_emb_tok, "embed.pos": self.g_emb_pos}
        for name, mod in self._modules().items():
            out.update(mod.grads(name + "."))
        return out

    def zero_grads(self) -> None:
        self.g_emb_tok[...] = 0.0
        self.g_emb_pos[...] = 0.0
        for mod in self._modules().values():
            mod.zero_grads()

    def trainable_row_mask(self, name: str):
        """None for fully trainable, False for frozen, or a row mask array."""
        if name.startswith("voltok."):
            return False
        if name == "embed.tok":
            mask = np.zeros(self.emb_tok.shape[0], dtype=bool)
            mask[list(self.vocab.planning_ids)] = True
            return mask
        return None

    def load_params(self, params: dict) -> None:
        own = self.params()
        missing = set(own) - set(params)
        extra = set(params) - set(own)
        if missing or extra:
            raise ValueError(f"parameter mismatch: missing={sorted(missing)[:4]} "
                             f"extra={sorted(extra)[:4]}")
        for k, v in own.items():
            if params[k].shape != v.shape:
                raise ValueError(f"shape mismatch for {k}: "
                                 f"{params[k].shape} vs {v.shape}")
            v[...] = params[k]
        self.voltok.c_lat = self.voltok.enc_w.shape[1]

    # -- batching -------------------------------------------------------------

    def collate(self, seqs) -> ModelBatch:
        """Pad a list of TokenSequence (same task, same grid) into a batch.

        Text obeys causal attention among text/boundary tokens in both tasks.
        For the planning task, image rows are additionally blocked from text
        columns: text sits after the image block, so letting images read it
        would launder future answer tokens back into earlier text positions
        through a two-hop path and break autoregressive causality. Imaging
        sequences keep full image-to-text visibility, which the conditioning
        on the plan and interval requires.
        """
        task = seqs[0].task
        assert all(s.task == task for s in seqs)
        lengths = np.array([s.length for s in seqs], dtype=np.int64)
        L = int(lengths.max())
        B = len(seqs)
        ids = np.full((B, L), self.vocab.pad, dtype=np.int64)
        img = np.stack([s.img.values for s in seqs]).astype(self.dtype)
        img_cur = None
        if task == "img":
            img_cur = np.stack([s.img_cur.values for s in seqs]).astype(self.dtype)
        attn = np.zeros((B, 1, L, L), dtype=self.dtype)
        for b, s in enumerate(seqs):
            ids[b, : s.length] = s.ids
            textish = np.concatenate([s.i_text, s.i_boundary])
            M = build_attention_mask(textish, L, dtype=self.dtype)
            if task == "plan" and s.i_text.size:
                M[np.ix_(s.i_img, s.i_text)] = -np.inf
            pads = np.arange(s.length, L)
            if pads.size:
                M[:, pads] = -np.inf
                M[pads, pads] = 0.0
            attn[b, 0] = M
        return ModelBatch(ids=ids, img=img, img_cur=img_cur, attn_mask=attn,
                          i_img=seqs[0].i_img, lengths=lengths, task=task)

    # -- forward / backward ---------------------------------------------------

    def trunk_forward(self, batch: ModelBatch, ctx=None, collect_hidden=False):
        """Run embedding and all trunk layers.

        Returns (final hidden states (B, L, d), taps {layer: (B, L_img, d)},
        optional per-layer hiddens).
        """
        task = batch.task
        ids_safe = np.where(batch.ids >= 0, batch.ids, self.vocab.pad)
        H = self.emb_tok[ids_safe].copy()
        if task == "plan":
            proj_ctx = {} if ctx is not None else None
            slots = self.proj_plan_in.forward(batch.img, proj_ctx)
        else:
            proj_ctx = {} if ctx is not None else None
            fused = np.concatenate([batch.img, batch.img_cur], axis=-1)
            slots = self.proj_img_in.forward(fused, proj_ctx)
        H[:, batch.i_img, :] = slots + self.emb_pos[None, :, :]

        taps = {}
        layer_ctxs = [] if ctx is not None else None
        hiddens = [] if collect_hidden else None
        tap_set = set(self.cfg.aligner_taps) if self.aligner is not None else set()
        for i, layer in enumerate(self.layers, start=1):
            lc = {} if ctx is not None else None
            H = layer.forward(H, batch.attn_mask, task, lc)
            if ctx is not None:
                layer_ctxs.append(lc)
            if collect_hidden:
                hiddens.append(H)
            if i in tap_set:
                taps[i] = H[:, batch.i_img, :]
        ln = self.final_ln_plan if task == "plan" else self.final_ln_img
        lnc = {} if ctx is not None else None
        out = ln.forward(H, lnc)
        if ctx is not None:
            ctx.update(ids_safe=ids_safe, proj_ctx=proj_ctx,
                       layer_ctxs=layer_ctxs, ln_ctx=lnc, task=task,
                       i_img=batch.i_img)
        return out, taps, hiddens

    def trunk_backward(self, d_out, dtaps, ctx) -> None:
        """Backprop through final LN, layers (re-injecting tap gradients at
        their source layers) and the embedding."""
        task = ctx["task"]
        ln = self.final_ln_plan if task == "plan" else self.final_ln_img
        d = ln.backward(d_out, ctx["ln_ctx"])
        for i in range(len(self.layers), 0, -1):
            if dtaps and i in dtaps:
                d[:, ctx["i_img"], :] += dtaps[i]
            d = self.layers[i - 1].backward(d, ctx["layer_ctxs"][i - 1])

        d_slots = d[:, ctx["i_img"], :]
        self.g_emb_pos += d_slots.sum(axis=0)
        if task == "plan":
            self.proj_plan_in.backward(d_slots, ctx["proj_ctx"])
        else:
            self.proj_img_in.backward(d_slots, ctx["proj_ctx"])
        d_text = d.copy()
        d_text[:, ctx["i_img"], :] = 0.0
        flat_ids = ctx["ids_safe"].ravel()
        np.add.at(self.g_emb_tok, flat_ids,
                  d_text.reshape(-1, d_text.shape[-1]))

    def forward_single(self, seq: TokenSequence, t: float = None):
        """Diagnostic single-sequence forward returning per-layer hiddens,
        tapped features and head outputs."""
        batch = self.collate([seq])
        out, taps, hiddens = self.trunk_forward(batch, ctx=None, collect_hidden=True)
        result = {
            "hidden": [h[0] for h in hiddens],
            "taps": {k: v[0] for k, v in taps.items()},
            "final": out[0],
        }
        if seq.task == "plan":
            result["plan_logits"] = self.plan_head.forward(out)[0]
        else:
            if t is None:
                raise ValueError("imaging forward requires the timestep t")
            h_img = out[:, batch.i_img, :]
            v = self.flow_head.forward(h_img, np.array([t], dtype=self.dtype),
                                       batch.img, batch.img_cur)
            result["velocity"] = v[0]
        return result
