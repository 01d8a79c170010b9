"""Synthetic longitudinal cohort with rule-based, treatment-conditioned dynamics.

Tumors are concentric spheres (necrotic core NET, enhancing shell ET, edema
halo ED, optional post-surgical cavity) painted with per-class intensity
signatures onto a per-subject anatomy texture. Because every region is an
analytic sphere, voxel counts, centroids and the effect of every treatment
are computable in closed form, which is what makes this cohort usable as a
ground-truth oracle for the world model.
"""

import json
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from .config import CohortConfig
from .kernels import sphere_labels, trilinear_resize

# mask channel order
BG, ED, ET, NET = 0, 1, 2, 3
MASK_CLASSES = ("BG", "ED", "ET", "NET")

# region labels used by sphere_labels (CAV renders as BG in the mask)
LABEL_BG, LABEL_ED, LABEL_ET, LABEL_NET, LABEL_CAV = 0, 1, 2, 3, 4

# per-class intensity signatures, channel order (FLAIR, T1CE, T2W)
SIGNATURES = {
    LABEL_ED: np.array([0.70, 0.10, 0.55]),
    LABEL_ET: np.array([0.35, 0.80, 0.25]),
    LABEL_NET: np.array([0.15, -0.45, 0.60]),
    LABEL_CAV: np.array([-0.92, -0.92, -0.92]),
}
# voxels farther than this from every signature are background tissue
CLASSIFY_MARGIN = 0.28


class TreatmentToken(IntEnum):
    """The five reserved planning actions, in canonical order."""

    SUR = 0
    CRT = 1
    RT = 2
    TMZ = 3
    AM = 4

    @property
    def label(self) -> str:
        return f"[{self.name}]"


@dataclass(frozen=True)
class TreatmentPlan:
    """A non-empty set of treatment tokens in canonical order."""

    tokens: tuple

    def __post_init__(self):
        toks = tuple(sorted(set(TreatmentToken(t) for t in self.tokens)))
        if not toks:
            raise ValueError("a treatment plan needs at least one token")
        object.__setattr__(self, "tokens", toks)

    def __str__(self) -> str:
        return " + ".join(t.label for t in self.tokens)

    def __contains__(self, tok) -> bool:
        return TreatmentToken(tok) in self.tokens

    @classmethod
    def parse(cls, text: str) -> "TreatmentPlan":
        """Parse 'SUR+CRT' or '[SUR] + [CRT]' style strings."""
        parts = [p.strip().strip("[]") for p in text.replace(" ", "").split("+")]
        try:
            return cls(tuple(TreatmentToken[p] for p in parts if p))
        except KeyError as e:
            raise ValueError(f"unknown treatment token {e.args[0]!r} in {text!r}") from None

    def short(self) -> str:
        return "+".join(t.name for t in self.tokens)


def plan_union(plans) -> TreatmentPlan:
    toks = []
    for p in plans:
        toks.extend(p.tokens)
    return TreatmentPlan(tuple(toks))


@dataclass
class Volume:
    """3-channel intensity grid, every value in [-1, 1]."""

    data: np.ndarray  # (3, D, H, W) float32

    def validate(self) -> None:
        assert self.data.ndim == 4 and self.data.shape[0] == 3
        assert np.isfinite(self.data).all()
        assert self.data.min() >= -1.0 and self.data.max() <= 1.0


@dataclass
class SegMask:
    """One-hot 4-class mask (BG, ED, ET, NET)."""

    data: np.ndarray  # (4, D, H, W) float32 in {0,1}

    def validate(self) -> None:
        assert self.data.ndim == 4 and self.data.shape[0] == 4
        s = self.data.sum(axis=0)
        assert np.all((self.data == 0) | (self.data == 1))
        assert np.allclose(s, 1.0)

    def labels(self) -> np.ndarray:
        return np.argmax(self.data, axis=0).astype(np.int8)

    def core_voxels(self) -> int:
        """Tumor proper: enhancing tumor + non-enhancing core."""
        return int(self.data[ET].sum() + self.data[NET].sum())

    def foreground_voxels(self) -> int:
        """All non-background classes (ED + ET + NET)."""
        return int(self.data[1:].sum())


@dataclass
class Timepoint:
    day: int
    volume: Volume
    mask: SegMask


@dataclass
class PatientTrajectory:
    subject_id: str
    sex: str          # "F" or "M"
    age: int
    grade: int
    timepoints: list
    plans: list       # plans[i] administered between timepoints[i] and [i+1]

    def validate(self) -> None:
        assert len(self.timepoints) >= 2
        assert len(self.plans) == len(self.timepoints) - 1
        days = [tp.day for tp in self.timepoints]
        assert all(b > a for a, b in zip(days, days[1:]))


@dataclass
class TrainingPair:
    subject_id: str
    source_index: int
    target_index: int
    interval_days: int
    plan_between: TreatmentPlan  # union of plans administered between p and q
    history: list                # plans administered before p


@dataclass
class TumorState:
    """Continuous sphere parameters recovered from a rendered timepoint."""

    center: np.ndarray          # (3,) float
    r_cav: float
    r_net: float
    r_et: float
    r_ed: float

    @property
    def radii(self):
        return (self.r_cav, self.r_net, self.r_et, self.r_ed)


# ---------------------------------------------------------------------------
# intensity model


def normalize_intensities(raw: np.ndarray) -> np.ndarray:
    """Percentile-clip (p1, p99) then map affinely to [-1, 1].

    A constant grid maps to all zeros.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if not np.isfinite(raw).all():
        raise ValueError("raw intensities must be finite")
    lo, hi = np.percentile(raw, [1.0, 99.0])
    if hi - lo < 1e-12:
        return np.zeros_like(raw, dtype=np.float32)
    clipped = np.clip(raw, lo, hi)
    return ((clipped - lo) / (hi - lo) * 2.0 - 1.0).astype(np.float32)


def classify_voxels(volume: np.ndarray) -> np.ndarray:
    """Recover region labels from intensities by nearest painted signature.

    Voxels farther than CLASSIFY_MARGIN from every signature are background.
    """
    labels = sorted(SIGNATURES)
    sigs = np.stack([SIGNATURES[k] for k in labels])  # (K, 3)
    diff = volume[None, :, :, :, :] - sigs[:, :, None, None, None]
    dist = np.sqrt((diff ** 2).sum(axis=1))  # (K, D, H, W)
    best = dist.argmin(axis=0)
    out = np.array(labels, dtype=np.int8)[best]
    out[dist.min(axis=0) > CLASSIFY_MARGIN] = LABEL_BG
    return out


def _radius_from_count(n: float) -> float:
    """Continuous sphere-volume inversion: voxel count -> radius."""
    return (3.0 * max(n, 0.0) / (4.0 * np.pi)) ** (1.0 / 3.0)


def _count_from_radius(r: float) -> int:
    return int(round(4.0 / 3.0 * np.pi * max(r, 0.0) ** 3))


def _distance_grid(shape, center) -> np.ndarray:
    zz = (np.arange(shape[0]) - center[0])[:, None, None]
    yy = (np.arange(shape[1]) - center[1])[None, :, None]
    xx = (np.arange(shape[2]) - center[2])[None, None, :]
    return np.sqrt(zz * zz + yy * yy + xx * xx)


def derive_tumor_state(volume: Volume) -> TumorState:
    """Recover continuous center and equivalent radii from a rendered volume.

    Center is the foreground centroid; radii come from sphere-volume
    inversion of the cumulative region counts.
    """
    lab = classify_voxels(volume.data)
    fg = lab != LABEL_BG
    if not fg.any():
        c = (np.array(volume.data.shape[1:], dtype=np.float64) - 1) / 2
        return TumorState(center=c, r_cav=0.0, r_net=0.0, r_et=0.0, r_ed=0.0)
    center = np.argwhere(fg).mean(axis=0)
    cum = 0
    radii = []
    for k in (LABEL_CAV, LABEL_NET, LABEL_ET, LABEL_ED):
        cum += int((lab == k).sum())
        radii.append(_radius_from_count(cum))
    return TumorState(center=center, r_cav=radii[0], r_net=radii[1],
                      r_et=radii[2], r_ed=radii[3])


def _paint(center, radii, texture, rng, cfg: CohortConfig):
    """Render (volume, mask) from sphere parameters over an anatomy texture."""
    shape = texture.shape[1:]
    lab = sphere_labels(shape, center, radii)
    vol = texture + rng.normal(0.0, cfg.scan_noise, size=texture.shape)
    for k, sig in SIGNATURES.items():
        region = lab == k
        if not region.any():
            continue
        n = int(region.sum())
        noise = rng.normal(0.0, cfg.paint_noise, size=(3, n))
        for ch in range(3):
            vol[ch][region] = sig[ch] + noise[ch]
    vol = np.clip(vol, -1.0, 1.0).astype(np.float32)

    mask = np.zeros((4,) + shape, dtype=np.float32)
    mask[ED][lab == LABEL_ED] = 1.0
    mask[ET][lab == LABEL_ET] = 1.0
    mask[NET][lab == LABEL_NET] = 1.0
    mask[BG] = 1.0 - mask[1:].sum(axis=0)
    return Volume(vol), SegMask(mask)


def _make_texture(grid: int, rng, cfg: CohortConfig) -> np.ndarray:
    """Per-subject anatomy: smooth low-frequency field squeezed into a dark band."""
    raw = 100.0 + 20.0 * rng.standard_normal((3, 4, 4, 4))
    smooth = trilinear_resize(raw, (grid, grid, grid))
    normed = normalize_intensities(smooth)
    return (cfg.bg_level + cfg.bg_span * normed).astype(np.float64)


# ---------------------------------------------------------------------------
# dynamics


def _jit(rng, cfg: CohortConfig) -> float:
    """Sign-preserving multiplicative jitter on a radius delta."""
    return 1.0 + cfg.delta_jitter * float(np.clip(rng.standard_normal(), -2.0, 2.0))


def _morph_cumulative(lab: np.ndarray, dist: np.ndarray, targets) -> np.ndarray:
    """Adjust the nested region sets toward target cumulative counts.

    Each cumulative set (CAV; CAV+NET; CAV+NET+ET; all foreground) gains its
    nearest outside voxels or loses its farthest members, so an unchanged
    count leaves the voxel set untouched. Nesting is enforced inner-to-outer.
    """
    d = dist.ravel()
    cum_old = np.zeros(d.shape, dtype=bool)
    inner = np.zeros(d.shape, dtype=bool)
    lab_flat = lab.ravel()
    new_lab = np.zeros(d.shape, dtype=np.int8)
    order_levels = (LABEL_CAV, LABEL_NET, LABEL_ET, LABEL_ED)
    for level, target in zip(order_levels, targets):
        cum_old = cum_old | (lab_flat == level)
        cur = cum_old | inner
        n_cur = int(cur.sum())
        target = max(int(target), int(inner.sum()))
        if target > n_cur:
            cand = np.flatnonzero(~cur)
            take = min(target - n_cur, cand.size)
            if take > 0:
                pick = cand[np.argpartition(d[cand], take - 1)[:take]]
                cur[pick] = True
        elif target < n_cur:
            cand = np.flatnonzero(cur & ~inner)
            drop = min(n_cur - target, cand.size)
            if drop > 0:
                pick = cand[np.argpartition(-d[cand], drop - 1)[:drop]]
                cur[pick] = False
        new_lab[cur & ~inner] = level
        inner = cur
    return new_lab.reshape(lab.shape)


def evolve_state(tp: Timepoint, plan: TreatmentPlan, tau: int, rng,
                 cfg: CohortConfig = None) -> Timepoint:
    """Advance a timepoint by tau days under a treatment plan.

    Rules: AM grows all radii; TMZ shrinks ET/NET; RT shrinks ET/NET faster;
    CRT additionally shrinks ED; SUR turns ET/NET inside the resection sphere
    into a dark cavity. Region evolution happens in count space on the nested
    voxel sets, so a zero delta is an exact identity on the mask.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    cfg = cfg or CohortConfig()
    shape = tp.volume.data.shape[1:]
    lab = classify_voxels(tp.volume.data)
    state = derive_tumor_state(tp.volume)
    dist = _distance_grid(shape, state.center)
    r_cav, r_net, r_et, r_ed = state.radii

    resected = TreatmentToken.SUR in plan
    if resected:
        rho = r_net + cfg.resection_frac * (r_et - r_net)
        removed = ((lab == LABEL_ET) | (lab == LABEL_NET)) & (dist < rho)
        lab = lab.copy()
        lab[removed] = LABEL_CAV
        r_cav = _radius_from_count(int((lab == LABEL_CAV).sum()))
        r_net = max(r_net, r_cav)

    d_ed = d_et = d_net = 0.0
    if TreatmentToken.AM in plan:
        d_ed += cfg.grow_ed * tau * _jit(rng, cfg)
        d_et += cfg.grow_et * tau * _jit(rng, cfg)
        d_net += cfg.grow_net * tau * _jit(rng, cfg)
    if TreatmentToken.TMZ in plan:
        d_et -= cfg.shrink_tmz * tau * _jit(rng, cfg)
        d_net -= cfg.shrink_tmz * tau * _jit(rng, cfg)
    if TreatmentToken.RT in plan:
        d_et -= cfg.shrink_rt * tau * _jit(rng, cfg)
        d_net -= cfg.shrink_rt * tau * _jit(rng, cfg)
    if TreatmentToken.CRT in plan:
        d_et -= cfg.shrink_rt * tau * _jit(rng, cfg)
        d_net -= cfg.shrink_rt * tau * _jit(rng, cfg)
        d_ed -= cfg.shrink_crt_ed * tau * _jit(rng, cfg)
    heal = 0.0
    if not resected and r_cav > 0.0:
        heal = cfg.cavity_heal * tau * _jit(rng, cfg)

    new_cav = float(np.clip(r_cav - heal, 0.0, cfg.r_max))
    new_net = float(np.clip(r_net + d_net, new_cav, cfg.r_max))
    new_et = float(np.clip(r_et + d_et, new_net, cfg.r_max))
    new_ed = float(np.clip(r_ed + d_ed, new_et + 0.2, cfg.r_max))

    # target counts shift the measured counts by the analytic volume change,
    # so an untouched radius keeps its exact current voxel set
    cum = 0
    measured = []
    for k in (LABEL_CAV, LABEL_NET, LABEL_ET, LABEL_ED):
        cum += int((lab == k).sum())
        measured.append(cum)
    targets = []
    prev = 0
    for n_meas, (r_old, r_new) in zip(
            measured,
            ((r_cav, new_cav), (r_net, new_net), (r_et, new_et), (r_ed, new_ed))):
        delta = _count_from_radius(r_new) - _count_from_radius(r_old)
        target = max(n_meas + delta, prev)
        targets.append(target)
        prev = target

    new_lab = _morph_cumulative(lab, dist, targets)

    # intensities: untouched voxels keep their appearance plus fresh scan
    # noise; relabeled voxels are repainted; revealed voxels heal to tissue
    vol = tp.volume.data.astype(np.float64) + rng.normal(
        0.0, cfg.scan_noise, size=tp.volume.data.shape)
    changed = new_lab != lab
    for k, sig in SIGNATURES.items():
        region = changed & (new_lab == k)
        n = int(region.sum())
        if n == 0:
            continue
        vol[:, region] = sig[:, None] + rng.normal(0.0, cfg.paint_noise, size=(3, n))
    revealed = changed & (new_lab == LABEL_BG)
    n_rev = int(revealed.sum())
    if n_rev:
        vol[:, revealed] = cfg.bg_level + rng.normal(0.0, cfg.paint_noise, size=(3, n_rev))
    vol = np.clip(vol, -1.0, 1.0).astype(np.float32)

    mask = np.zeros((4,) + shape, dtype=np.float32)
    mask[ED][new_lab == LABEL_ED] = 1.0
    mask[ET][new_lab == LABEL_ET] = 1.0
    mask[NET][new_lab == LABEL_NET] = 1.0
    mask[BG] = 1.0 - mask[1:].sum(axis=0)
    return Timepoint(day=tp.day + int(tau), volume=Volume(vol), mask=SegMask(mask))


def choose_plan(history: list, tumor_fraction: float, rng,
                cfg: CohortConfig = None) -> TreatmentPlan:
    """Clinician policy: protocol anchored on observable state with
    randomized practice variation.

    The anchor is deterministic (large baseline tumors get resected, small
    ones irradiated; follow-ups de-escalate toward monitoring), but within
    each anchor the concrete regimen is drawn with fixed majority
    probabilities. The randomized component is exogenous to the tumor
    state, which is what lets a world model identify action effects from
    observational trajectories.
    """
    cfg = cfg or CohortConfig()
    T = TreatmentToken
    visit = len(history)
    u = float(rng.random())
    if visit == 0:
        if tumor_fraction >= cfg.size_threshold:
            return TreatmentPlan((T.SUR, T.CRT)) if u < 0.6 else TreatmentPlan((T.SUR,))
        return TreatmentPlan((T.RT, T.TMZ)) if u < 0.6 else TreatmentPlan((T.RT,))
    if visit == 1:
        if any(T.SUR in p for p in history):
            return TreatmentPlan((T.TMZ,)) if u < 0.6 else TreatmentPlan((T.AM,))
        return TreatmentPlan((T.CRT,)) if u < 0.6 else TreatmentPlan((T.AM,))
    if visit == 2:
        return TreatmentPlan((T.TMZ,)) if u < 0.55 else TreatmentPlan((T.AM,))
    return TreatmentPlan((T.AM,))


def generate_cohort(seed: int, cfg: CohortConfig = None) -> list:
    """Deterministically generate a cohort of PatientTrajectory objects."""
    cfg = cfg or CohortConfig()
    cfg.validate()
    seqs = np.random.SeedSequence(seed).spawn(cfg.n_subjects)
    return [_generate_subject(i, seqs[i], cfg) for i in range(cfg.n_subjects)]


def _generate_subject(index: int, seq, cfg: CohortConfig) -> PatientTrajectory:
    rng = np.random.default_rng(seq)
    grid = cfg.grid
    sex = "F" if rng.random() < 0.5 else "M"
    # ages distinct across cohorts of up to 9 subjects: the identity key that
    # makes randomized treatment draws memorizable on the training split
    age = 35 + (index * 5 + int(rng.integers(0, 5))) % 45
    grade = int(3 + (rng.random() < 0.5))

    large = bool(rng.random() < 0.5)
    r_ed = float(rng.uniform(5.2, 6.8) if large else rng.uniform(3.2, 4.0))
    r_et = r_ed * float(rng.uniform(0.55, 0.70))
    r_net = r_et * float(rng.uniform(0.40, 0.60))
    center = (grid - 1) / 2 + rng.uniform(-3.0, 3.0, size=3)

    texture = _make_texture(grid, rng, cfg)
    vol, mask = _paint(center, (0.0, r_net, r_et, r_ed), texture, rng, cfg)
    timepoints = [Timepoint(day=0, volume=vol, mask=mask)]
    plans = []

    n_tp = int(rng.integers(cfg.tp_min, cfg.tp_max + 1))
    for _ in range(n_tp - 1):
        tp = timepoints[-1]
        frac = tp.mask.foreground_voxels() / tp.mask.data[0].size
        plan = choose_plan(plans, frac, rng, cfg)
        tau = int(rng.integers(cfg.gap_min, cfg.gap_max + 1))
        timepoints.append(evolve_state(tp, plan, tau, rng, cfg))
        plans.append(plan)

    traj = PatientTrajectory(
        subject_id=f"subj{index:03d}", sex=sex, age=age, grade=grade,
        timepoints=timepoints, plans=plans,
    )
    traj.validate()
    return traj


# ---------------------------------------------------------------------------
# pairing / splitting / persistence


def make_pairs(traj: PatientTrajectory) -> list:
    """One training pair per ordered timepoint pair (p < q)."""
    pairs = []
    days = [tp.day for tp in traj.timepoints]
    for p in range(len(traj.timepoints)):
        for q in range(p + 1, len(traj.timepoints)):
            pairs.append(TrainingPair(
                subject_id=traj.subject_id,
                source_index=p,
                target_index=q,
                interval_days=days[q] - days[p],
                plan_between=plan_union(traj.plans[p:q]),
                history=list(traj.plans[:p]),
            ))
    return pairs


def split_cohort(cohort: list, ratio: float = 0.8, seed: int = 0):
    """Subject-level split; no subject's pairs straddle the boundary."""
    if len(cohort) < 2:
        raise ValueError("need at least 2 subjects to split")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(cohort))
    n_train = int(round(len(cohort) * ratio))
    n_train = min(max(n_train, 1), len(cohort) - 1)
    train_idx = set(order[:n_train].tolist())
    train = [cohort[i] for i in sorted(train_idx)]
    val = [cohort[i] for i in range(len(cohort)) if i not in train_idx]
    return train, val


def save_cohort(cohort: list, out_dir, split=None) -> None:
    """Persist as manifest.json + one little-endian float32 blob per array."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    split_of = {}
    if split is not None:
        train, val = split
        split_of = {t.subject_id: "train" for t in train}
        split_of.update({t.subject_id: "val" for t in val})

    subjects = []
    for traj in cohort:
        tps = []
        for k, tp in enumerate(traj.timepoints):
            vol_name = f"{traj.subject_id}_t{k}_vol.f32"
            mask_name = f"{traj.subject_id}_t{k}_mask.f32"
            tp.volume.data.astype("<f4").tofile(out / vol_name)
            tp.mask.data.astype("<f4").tofile(out / mask_name)
            tps.append({
                "day": tp.day,
                "volume": vol_name, "volume_shape": list(tp.volume.data.shape),
                "mask": mask_name, "mask_shape": list(tp.mask.data.shape),
            })
        subjects.append({
            "subject_id": traj.subject_id,
            "sex": traj.sex, "age": traj.age, "grade": traj.grade,
            "split": split_of.get(traj.subject_id),
            "timepoints": tps,
            "plans": [p.short() for p in traj.plans],
        })
    manifest = {
        "format": "glioworld-cohort",
        "version": 1,
        "dtype": "<f4",
        "order": "C",
        "subjects": subjects,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_cohort(in_dir):
    """Load a persisted cohort. Returns (trajectories, split_map)."""
    root = Path(in_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("format") != "glioworld-cohort" or manifest.get("version") != 1:
        raise ValueError(f"unrecognized cohort manifest in {root}")
    cohort = []
    split_map = {}
    for s in manifest["subjects"]:
        tps = []
        for t in s["timepoints"]:
            vol = np.fromfile(root / t["volume"], dtype="<f4").reshape(t["volume_shape"])
            mask = np.fromfile(root / t["mask"], dtype="<f4").reshape(t["mask_shape"])
            tps.append(Timepoint(day=t["day"], volume=Volume(vol), mask=SegMask(mask)))
        traj = PatientTrajectory(
            subject_id=s["subject_id"], sex=s["sex"], age=s["age"], grade=s["grade"],
            timepoints=tps, plans=[TreatmentPlan.parse(p) for p in s["plans"]],
        )
        cohort.append(traj)
        if s.get("split"):
            split_map[s["subject_id"]] = s["split"]
    return cohort, split_map
