"""Inference: greedy constrained plan decoding, Euler flow sampling, and
multi-step counterfactual rollouts."""

from dataclasses import dataclass, field

import numpy as np

from .align import focused_mask
from .cohort import SegMask, TreatmentPlan, Volume
from .model import WorldModel
from .tokenizer import LatentGrid, build_sequence, render_context, text_encode


class NoPlanError(RuntimeError):
    """Greedy decoding terminated without emitting any planning token."""


@dataclass
class PatientState:
    """Everything inference needs about a patient at one moment."""

    sex: str
    age: int
    grade: int
    history: list          # TreatmentPlan list, oldest first
    volume: Volume
    day: int = 0

    @classmethod
    def from_trajectory(cls, traj, k: int) -> "PatientState":
        return cls(sex=traj.sex, age=traj.age, grade=traj.grade,
                   history=list(traj.plans[:k]), volume=traj.timepoints[k].volume,
                   day=traj.timepoints[k].day)


def predict_plan(model: WorldModel, state: PatientState, max_tokens: int = 5):
    """Greedy decoding constrained to planning tokens plus EOS.

    Returns (TreatmentPlan, per-step logits list). Ties resolve to the lowest
    reserved id because argmax takes the first maximum.
    """
    vocab = model.vocab
    ctx_ids = text_encode(vocab, render_context(
        state.sex, state.age, state.grade, state.history, "plan"))
    latent = model.voltok.encode(state.volume)
    # candidate order realizes the tie-break: lowest reserved id first, EOS last
    candidates = np.array(sorted(vocab.planning_ids) + [vocab.eos])

    generated = []
    step_logits = []
    for _ in range(max_tokens + 1):
        seq = build_sequence(vocab, latent, ctx_ids + generated, "plan")
        batch = model.collate([seq])
        out, _, _ = model.trunk_forward(batch)
        logits = model.plan_head.forward(out)[0, seq.length - 2]
        step_logits.append(logits.copy())
        nxt = int(candidates[np.argmax(logits[candidates])])
        if nxt == vocab.eos:
            break
        generated.append(nxt)
        if len(generated) >= max_tokens:
            break
    if not generated:
        raise NoPlanError("decoder emitted EOS before any planning token")
    toks = tuple(vocab.planning_ids.index(g) for g in generated)
    return TreatmentPlan(toks), step_logits


def euler_integrate(z0: np.ndarray, velocity_fn, steps: int = 50) -> np.ndarray:
    """z <- z + (1/steps) * v(z, k/steps) for k = 0..steps-1."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    z = np.array(z0, copy=True)
    for k in range(steps):
        v = velocity_fn(z, k / steps)
        z += v / steps
        if not np.isfinite(z).all():
            raise FloatingPointError(f"non-finite state at integration step {k}")
    return z


@dataclass
class GeneratedFuture:
    volume: Volume
    mask: SegMask            # aligner's focused mask (argmax at final step)
    latent: np.ndarray
    aligner_logits: np.ndarray = None


def generate_future(model: WorldModel, state: PatientState, plan: TreatmentPlan,
                    tau: int, steps: int = None, seed: int = 0) -> GeneratedFuture:
    """Sample the future volume under a plan and interval via Euler flow."""
    cfg = model.cfg
    steps = steps or cfg.sampler_steps
    vocab = model.vocab
    ids = text_encode(vocab, render_context(
        state.sex, state.age, state.grade, state.history, "img",
        plan=plan, tau=tau))
    z_cur = model.voltok.encode(state.volume)
    rng = np.random.default_rng(seed)
    z0 = rng.standard_normal(z_cur.values.shape).astype(model.dtype)

    last_aligner = [None]

    def vfield(z, t):
        grid = LatentGrid(values=z.astype(model.dtype), side=z_cur.side,
                          positions=z_cur.positions)
        seq = build_sequence(vocab, grid, ids, "img", current=z_cur)
        batch = model.collate([seq])
        out, taps, _ = model.trunk_forward(batch)
        if model.aligner is not None:
            last_aligner[0] = model.aligner.forward(taps)[0]
        v = model.flow_head.forward(out[:, batch.i_img, :],
                                    np.array([t], dtype=model.dtype),
                                    batch.img, batch.img_cur)
        return v[0]

    z1 = euler_integrate(z0, vfield, steps)
    vol = model.voltok.decode(LatentGrid(values=z1.astype(model.dtype),
                                         side=z_cur.side,
                                         positions=z_cur.positions))
    vol = Volume(np.clip(vol.data, -1.0, 1.0))

    mask = None
    al_logits = None
    if last_aligner[0] is not None:
        al_logits = last_aligner[0]
        labels = focused_mask(al_logits)
        onehot = np.zeros_like(al_logits, dtype=np.float32)
        for c in range(4):
            onehot[c][labels == c] = 1.0
        mask = SegMask(onehot)
    return GeneratedFuture(volume=vol, mask=mask, latent=z1,
                           aligner_logits=al_logits)


@dataclass
class RolloutStep:
    day: int
    action: TreatmentPlan
    tau: int
    volume: Volume
    mask: SegMask
    suggested_plan: TreatmentPlan = None
    suggestion_failed: bool = False


def rollout(model: WorldModel, state: PatientState, actions,
            steps: int = None, seed: int = 0):
    """Chain generated futures, feeding each back as the next current state.

    actions: iterable of (TreatmentPlan, tau_days). Also records the model's
    own suggested plan at every state visited.
    """
    out = []
    cur = state
    for k, (plan, tau) in enumerate(actions):
        try:
            suggestion, _ = predict_plan(model, cur)
            failed = False
        except NoPlanError:
            suggestion, failed = None, True
        gen = generate_future(model, cur, plan, int(tau),
                              steps=steps, seed=seed + k)
        day = cur.day + int(tau)
        out.append(RolloutStep(day=day, action=plan, tau=int(tau),
                               volume=gen.volume, mask=gen.mask,
                               suggested_plan=suggestion,
                               suggestion_failed=failed))
        cur = PatientState(sex=cur.sex, age=cur.age, grade=cur.grade,
                           history=cur.history + [plan], volume=gen.volume,
                           day=day)
    return out


def parse_actions(spec: str):
    """Parse 'SUR+CRT:92,AM:60' into [(TreatmentPlan, tau), ...]."""
    actions = []
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        if ":" not in part:
            raise ValueError(f"action {part!r} needs the form TOKENS:DAYS")
        plan_s, tau_s = part.rsplit(":", 1)
        actions.append((TreatmentPlan.parse(plan_s), int(tau_s)))
    if not actions:
        raise ValueError("no actions given")
    return actions
