"""Alternating-task training: autoregressive plan NLL and flow-matching MSE,
each regularized by the mask-alignment objective."""

import json
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .align import align_loss_batch
from .cohort import TreatmentPlan, make_pairs
from .config import ModelConfig, TrainConfig
from .layers import softmax
from .model import ModelBatch, WorldModel
from .tokenizer import LatentGrid, build_sequence, noise_augment, render_context, text_encode

CKPT_FORMAT = "glioworld-ckpt"
CKPT_VERSION = 1


# ---------------------------------------------------------------------------
# dataset


class PairDataset:
    """Pre-encoded training views over a cohort.

    Planning items are the distinct (subject, timepoint) states with a known
    next plan; imaging items are all dense timepoint pairs.
    """

    def __init__(self, cohort, model: WorldModel):
        self.model = model
        self.vocab = model.vocab
        self.trajs = {t.subject_id: t for t in cohort}
        self.latents = {}
        self.masks = {}
        for traj in cohort:
            for k, tp in enumerate(traj.timepoints):
                self.latents[(traj.subject_id, k)] = model.voltok.encode(tp.volume)
                self.masks[(traj.subject_id, k)] = tp.mask.data.astype(model.dtype)
        self.plan_items = []
        for traj in cohort:
            for p in range(len(traj.plans)):
                self.plan_items.append((traj.subject_id, p, traj.plans[p]))
        self.img_items = []
        for traj in cohort:
            for pair in make_pairs(traj):
                self.img_items.append(pair)

    # -- planning -----------------------------------------------------------

    def plan_sequence(self, subject_id: str, p: int, target: TreatmentPlan = None):
        """Sequence for the planning task at timepoint p. When a target plan
        is given its tokens plus EOS become the training targets."""
        traj = self.trajs[subject_id]
        ctx_text = render_context(traj.sex, traj.age, traj.grade,
                                  traj.plans[:p], "plan")
        ctx_ids = text_encode(self.vocab, ctx_text)
        target_ids = []
        if target is not None:
            target_ids = [self.vocab.plan_id(t) for t in target.tokens]
        seq = build_sequence(self.vocab, self.latents[(subject_id, p)],
                             ctx_ids + target_ids, "plan")
        o = 3 + seq.img.n_tokens
        # position i predicts token i+1; EOS is the final target
        query_pos = [o + len(ctx_ids) - 1 + k for k in range(len(target_ids) + 1)]
        target_tok = target_ids + [self.vocab.eos]
        return seq, np.array(query_pos), np.array(target_tok)

    def build_plan_batch(self, picks):
        seqs, qpos, qtok, masks = [], [], [], []
        for i in picks:
            sid, p, target = self.plan_items[i]
            seq, pos, tok = self.plan_sequence(sid, p, target)
            seqs.append(seq)
            qpos.append(pos)
            qtok.append(tok)
            masks.append(self.masks[(sid, p)])
        return seqs, qpos, qtok, np.stack(masks)

    # -- imaging --------------------------------------------------------------

    def img_sequence(self, pair, z_t: LatentGrid):
        traj = self.trajs[pair.subject_id]
        text = render_context(traj.sex, traj.age, traj.grade, pair.history,
                              "img", plan=pair.plan_between, tau=pair.interval_days)
        ids = text_encode(self.vocab, text)
        cur = self.latents[(pair.subject_id, pair.source_index)]
        return build_sequence(self.vocab, z_t, ids, "img", current=cur)

    def build_img_batch(self, picks, rng):
        seqs, vels, ts, masks = [], [], [], []
        dtype = self.model.dtype
        for i in picks:
            pair = self.img_items[i]
            z1 = self.latents[(pair.subject_id, pair.target_index)]
            t = float(rng.uniform())
            z0 = rng.standard_normal(z1.values.shape).astype(dtype)
            z_t = noise_augment(z1, t, z0)
            seqs.append(self.img_sequence(pair, z_t))
            vels.append(z1.values - z0)
            ts.append(t)
            masks.append(self.masks[(pair.subject_id, pair.target_index)])
        return seqs, np.stack(vels), np.array(ts, dtype=dtype), np.stack(masks)


# ---------------------------------------------------------------------------
# losses


def plan_loss(model: WorldModel, seqs, query_pos, query_tok, masks_cur,
              backward: bool = True):
    """Mean next-token NLL over the target plan positions plus the
    current-mask alignment term. Returns (total, parts dict)."""
    batch = model.collate(seqs)
    ctx = {}
    out, taps, _ = model.trunk_forward(batch, ctx)
    hctx = {}
    logits = model.plan_head.forward(out, hctx)  # (B, L, V)

    n_targets = sum(len(p) for p in query_pos)
    if n_targets == 0:
        raise ValueError("planning batch has no target tokens")
    nll = 0.0
    dlogits = np.zeros_like(logits)
    for b, (pos, tok) in enumerate(zip(query_pos, query_tok)):
        probs = softmax(logits[b, pos].astype(np.float64), axis=-1)
        nll -= np.log(np.maximum(probs[np.arange(len(tok)), tok], 1e-300)).sum()
        if backward:
            d = probs.copy()
            d[np.arange(len(tok)), tok] -= 1.0
            dlogits[b, pos] += (d / n_targets).astype(model.dtype)
    nll = float(nll / n_targets)

    loss_align = 0.0
    dtaps = None
    al_logits = None
    if model.aligner is not None:
        actx = {}
        al_logits = model.aligner.forward(taps, actx)
        loss_align, d_al = align_loss_batch(
            al_logits, masks_cur, "plan",
            gamma=model.cfg.focal_gamma, eps=model.cfg.prob_eps,
            dice_eps=model.cfg.dice_eps)
        if backward:
            dtaps = model.aligner.backward(d_al.astype(model.dtype), actx)

    if backward:
        d_out = model.plan_head.backward(dlogits, hctx)
        model.trunk_backward(d_out, dtaps, ctx)
    total = nll + float(loss_align)
    return total, {"nll": nll, "align": float(loss_align),
                   "logits": logits, "aligner_logits": al_logits}


def img_loss(model: WorldModel, seqs, velocities, ts, masks_fut,
             backward: bool = True):
    """lambda_img * ||v_hat - (z1 - z0)||^2 (mean over elements) plus the
    future-mask alignment term weighted by alpha(t)."""
    batch = model.collate(seqs)
    ctx = {}
    out, taps, _ = model.trunk_forward(batch, ctx)
    h_img = out[:, batch.i_img, :]
    fctx = {}
    v_hat = model.flow_head.forward(h_img, ts, batch.img, batch.img_cur, fctx)

    lam = model.cfg.lambda_img
    resid = v_hat.astype(np.float64) - velocities.astype(np.float64)
    mse = float(np.mean(resid ** 2))
    loss_img = lam * mse

    loss_align = 0.0
    dtaps = None
    al_logits = None
    if model.aligner is not None:
        actx = {}
        al_logits = model.aligner.forward(taps, actx)
        loss_align, d_al = align_loss_batch(
            al_logits, masks_fut, "img", ts=ts,
            gamma=model.cfg.focal_gamma, eps=model.cfg.prob_eps,
            dice_eps=model.cfg.dice_eps)
        if backward:
            dtaps = model.aligner.backward(d_al.astype(model.dtype), actx)

    if backward:
        dv = (2.0 * lam * resid / resid.size).astype(model.dtype)
        dh_img = model.flow_head.backward(dv, fctx)
        d_out = np.zeros_like(out)
        d_out[:, batch.i_img, :] = dh_img
        model.trunk_backward(d_out, dtaps, ctx)
    total = loss_img + float(loss_align)
    return total, {"mse": mse, "img": loss_img, "align": float(loss_align),
                   "v_hat": v_hat, "aligner_logits": al_logits}


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """Decoupled weight decay, linear warmup, per-group learning rates and
    row-level freezing (frozen base vocabulary)."""

    def __init__(self, model: WorldModel, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        self.step_count = 0
        self.m = {}
        self.v = {}
        self.freeze = {}
        params = model.params()
        for name in model.grads():
            mask = model.trainable_row_mask(name)
            if mask is False:
                continue
            self.freeze[name] = mask  # None or row mask
            self.m[name] = np.zeros_like(params[name], dtype=np.float64)
            self.v[name] = np.zeros_like(params[name], dtype=np.float64)

    def lr_for(self, name: str) -> float:
        best = self.cfg.lr
        best_len = -1
        for prefix, lr in self.cfg.lr_overrides.items():
            if name.startswith(prefix) and len(prefix) > best_len:
                best, best_len = lr, len(prefix)
        return best

    def step(self) -> float:
        self.step_count += 1
        cfg = self.cfg
        warm = min(1.0, self.step_count / max(cfg.warmup_steps, 1))
        params = self.model.params()
        grads = self.model.grads()

        if cfg.grad_clip > 0:
            sq = 0.0
            for name in self.m:
                g = grads[name]
                mask = self.freeze[name]
                if mask is not None:
                    g = g[mask]
                sq += float((g.astype(np.float64) ** 2).sum())
            norm = np.sqrt(sq)
            scale = 1.0 if norm <= cfg.grad_clip else cfg.grad_clip / (norm + 1e-12)
        else:
            scale = 1.0

        bc1 = 1.0 - cfg.beta1 ** self.step_count
        bc2 = 1.0 - cfg.beta2 ** self.step_count
        for name in self.m:
            p = params[name]
            g = grads[name].astype(np.float64) * scale
            m = self.m[name]
            v = self.v[name]
            m *= cfg.beta1
            m += (1 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1 - cfg.beta2) * g * g
            upd = (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
            lr = self.lr_for(name) * warm
            wd = cfg.weight_decay if p.ndim >= 2 else 0.0
            delta = lr * (upd + wd * p.astype(np.float64))
            mask = self.freeze[name]
            if mask is None:
                p -= delta.astype(p.dtype)
            else:
                p[mask] -= delta[mask].astype(p.dtype)
        return warm

    def state(self) -> dict:
        out = {"step_count": np.array(self.step_count)}
        for name in self.m:
            out[f"m/{name}"] = self.m[name]
            out[f"v/{name}"] = self.v[name]
        return out

    def load_state(self, state: dict) -> None:
        self.step_count = int(state["step_count"])
        for name in self.m:
            self.m[name][...] = state[f"m/{name}"]
            self.v[name][...] = state[f"v/{name}"]


# ---------------------------------------------------------------------------
# training loop


def train_step(model: WorldModel, opt: AdamW, data: PairDataset,
               cfg: TrainConfig, rng) -> dict:
    """One optimizer step on a randomly assigned task batch."""
    if cfg.tasks == "both":
        task = "img" if rng.uniform() < cfg.task_prob_img else "plan"
    else:
        task = cfg.tasks
    model.zero_grads()
    if task == "plan":
        picks = rng.integers(0, len(data.plan_items), size=cfg.batch_size)
        seqs, qpos, qtok, masks = data.build_plan_batch(picks)
        total, parts = plan_loss(model, seqs, qpos, qtok, masks)
        record = {"task": "plan", "loss": total, "nll": parts["nll"],
                  "align": parts["align"]}
    else:
        picks = rng.integers(0, len(data.img_items), size=cfg.batch_size)
        seqs, vels, ts, masks = data.build_img_batch(picks, rng)
        total, parts = img_loss(model, seqs, vels, ts, masks)
        record = {"task": "img", "loss": total, "mse": parts["mse"],
                  "align": parts["align"]}
    if not np.isfinite(total):
        raise RuntimeError(f"non-finite {task} loss at step {opt.step_count + 1}: "
                           f"{record}")
    warm = opt.step()
    record["lr_scale"] = warm
    return record


def train_model(model: WorldModel, cohort_train, cfg: TrainConfig,
                log_path=None, progress=False):
    """Run the alternating training loop. Returns (optimizer, history).

    When the model is configured with a reduced latent width, the patch
    autoencoder is pre-fitted on the training volumes first (PCA: the
    optimal linear maps) and then kept frozen.
    """
    cfg.validate()
    if model.voltok.c_lat < model.voltok.full:
        vols = [tp.volume for traj in cohort_train for tp in traj.timepoints]
        model.voltok.prefit(vols, model.voltok.c_lat)
    data = PairDataset(cohort_train, model)
    opt = AdamW(model, cfg)
    rng = np.random.default_rng(cfg.seed)
    history = []
    log_f = open(log_path, "a") if log_path else None
    t0 = time.time()
    try:
        for step in range(1, cfg.steps + 1):
            rec = train_step(model, opt, data, cfg, rng)
            rec["step"] = step
            history.append(rec)
            if log_f is not None:
                log_f.write(json.dumps({k: v for k, v in rec.items()}) + "\n")
            if progress and (step % cfg.log_every == 0 or step == 1):
                print(f"step {step:5d} [{rec['task']:4s}] loss {rec['loss']:.4f} "
                      f"({time.time() - t0:.0f}s)")
    finally:
        if log_f is not None:
            log_f.close()
    return opt, history


# ---------------------------------------------------------------------------
# checkpointing


def save_checkpoint(path, model: WorldModel, opt: AdamW = None,
                    train_cfg: TrainConfig = None, step: int = 0) -> None:
    meta = {
        "format": CKPT_FORMAT,
        "version": CKPT_VERSION,
        "model_cfg": asdict(model.cfg),
        "train_cfg": asdict(train_cfg) if train_cfg else None,
        "step": step,
        "vocab": model.vocab.tokens,
    }
    meta["model_cfg"]["aligner_taps"] = list(model.cfg.aligner_taps)
    arrays = {"__meta__": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
    for k, v in model.params().items():
        arrays[f"p/{k}"] = v
    if opt is not None:
        for k, v in opt.state().items():
            arrays[f"opt/{k}"] = v
    np.savez_compressed(path, **arrays)


def load_checkpoint(path, expect: ModelConfig = None, dtype=np.float32):
    """Rebuild a model (and optimizer state) from a checkpoint file."""
    try:
        blob = np.load(path, allow_pickle=False)
    except Exception as e:
        raise ValueError(f"cannot read checkpoint {path}: {e}") from None
    if "__meta__" not in blob:
        raise ValueError(f"{path} is not a glioworld checkpoint (no header)")
    meta = json.loads(bytes(blob["__meta__"]).decode())
    if meta.get("format") != CKPT_FORMAT or meta.get("version") != CKPT_VERSION:
        raise ValueError(
            f"checkpoint version mismatch: got {meta.get('format')}/"
            f"{meta.get('version')}, need {CKPT_FORMAT}/{CKPT_VERSION}")
    mraw = dict(meta["model_cfg"])
    mraw["aligner_taps"] = tuple(mraw["aligner_taps"])
    cfg = ModelConfig(**mraw)
    if expect is not None:
        for field in ("grid", "patch"):
            if getattr(expect, field) != getattr(cfg, field):
                raise ValueError(
                    f"checkpoint {field}={getattr(cfg, field)} does not match "
                    f"expected {field}={getattr(expect, field)}")
    model = WorldModel(cfg, dtype=dtype)
    model.load_params({k[2:]: blob[k] for k in blob.files if k.startswith("p/")})
    opt_state = {k[4:]: blob[k] for k in blob.files if k.startswith("opt/")}
    train_cfg = TrainConfig(**meta["train_cfg"]) if meta.get("train_cfg") else None
    return model, opt_state, train_cfg, meta
