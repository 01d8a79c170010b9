"""Reconstruction metrics, planning metrics, the aligner-focus correlation
analysis, and whole-model evaluation reports."""

import json
from pathlib import Path

import numpy as np

from .cohort import make_pairs
from .infer import PatientState, generate_future, predict_plan, NoPlanError
from .kernels import ssim3d_mean

CHANNELS = ("FLAIR", "T1CE", "T2W")
INTERVAL_BUCKETS = ((0, 90), (90, 180), (180, 360), (360, None))


def nmse(x_hat: np.ndarray, x: np.ndarray) -> float:
    """100 * ||x_hat - x||^2 / ||x||^2."""
    denom = float(np.sum(np.asarray(x, dtype=np.float64) ** 2))
    if denom == 0.0:
        raise ValueError("reference volume has zero norm")
    num = float(np.sum((np.asarray(x_hat, np.float64) - np.asarray(x, np.float64)) ** 2))
    return 100.0 * num / denom


PSNR_CAP = 100.0


def psnr(x_hat: np.ndarray, x: np.ndarray) -> float:
    """PSNR in dB on volumes rescaled from [-1,1] to [0,1] (data range 1).

    Identical volumes report the documented cap of 100 dB.
    """
    a = (np.asarray(x_hat, np.float64) + 1.0) / 2.0
    b = (np.asarray(x, np.float64) + 1.0) / 2.0
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def ssim(x_hat: np.ndarray, x: np.ndarray, win: int = 7,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """3D SSIM, uniform win^3 window, valid windows only, data range 1."""
    a = (np.asarray(x_hat, np.float64) + 1.0) / 2.0
    b = (np.asarray(x, np.float64) + 1.0) / 2.0
    return ssim3d_mean(a, b, win, k1 ** 2, k2 ** 2)


# ---------------------------------------------------------------------------
# planning metrics


def plan_metrics(predictions, references) -> dict:
    """Exact-set accuracy plus macro one-vs-rest F1/precision/specificity.

    Classes are the distinct canonical plan sets present in the references.
    Predicted classes absent from the references count as negatives for
    every reference class and are flagged.
    """
    if len(predictions) != len(references):
        raise ValueError("predictions and references differ in length")
    preds = [p.short() if p is not None else "<none>" for p in predictions]
    refs = [r.short() for r in references]
    classes = sorted(set(refs))
    n = len(refs)
    acc = 100.0 * sum(p == r for p, r in zip(preds, refs)) / n

    f1s, precs, specs = [], [], []
    for c in classes:
        tp = sum(p == c and r == c for p, r in zip(preds, refs))
        fp = sum(p == c and r != c for p, r in zip(preds, refs))
        fn = sum(p != c and r == c for p, r in zip(preds, refs))
        tn = n - tp - fp - fn
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        spec = tn / (tn + fp) if tn + fp else 0.0
        f1s.append(f1)
        precs.append(prec)
        specs.append(spec)
    unseen = sorted(set(preds) - set(classes))
    return {
        "accuracy": acc,
        "f1": 100.0 * float(np.mean(f1s)),
        "specificity": 100.0 * float(np.mean(specs)),
        "precision": 100.0 * float(np.mean(precs)),
        "classes": classes,
        "n": n,
        "unseen_predictions": unseen,
    }


# ---------------------------------------------------------------------------
# correlation analysis


def pearson_r(x, y):
    """Standard Pearson correlation; None when either input has no variance."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 2 or x.std() == 0.0 or y.std() == 0.0:
        return None
    xc = x - x.mean()
    yc = y - y.mean()
    return float((xc @ yc) / np.sqrt((xc @ xc) * (yc @ yc)))


def focus_correlation(records, min_per_stratum: int = 3) -> dict:
    """Pearson r between aligner focused-region volume and ground-truth tumor
    volume, overall and stratified by interval bucket and treatment kind.

    records: dicts with keys focus_vox, true_vox, interval_days, plan.
    """
    out = {"overall": None, "by_interval": {}, "by_treatment": {}, "n": len(records)}
    if not records:
        return out
    fv = [r["focus_vox"] for r in records]
    tv = [r["true_vox"] for r in records]
    out["overall"] = pearson_r(fv, tv)
    for lo, hi in INTERVAL_BUCKETS:
        name = f"{lo}-{hi if hi is not None else 'inf'}d"
        sel = [r for r in records
               if r["interval_days"] >= lo and (hi is None or r["interval_days"] < hi)]
        if len(sel) >= min_per_stratum:
            out["by_interval"][name] = pearson_r(
                [r["focus_vox"] for r in sel], [r["true_vox"] for r in sel])
    tokens = sorted({t.name for r in records for t in r["plan"].tokens})
    for tok in tokens:
        sel = [r for r in records if any(t.name == tok for t in r["plan"].tokens)]
        if len(sel) >= min_per_stratum:
            out["by_treatment"][tok] = pearson_r(
                [r["focus_vox"] for r in sel], [r["true_vox"] for r in sel])
    return out


# ---------------------------------------------------------------------------
# whole-model evaluation


def _mean_std(vals):
    a = np.asarray(vals, dtype=np.float64)
    return {"mean": float(a.mean()), "std": float(a.std())}


def evaluate_generation(model, cohort, steps=None, base_seed=1234):
    """Per-channel NMSE/PSNR/SSIM of sampled futures over all dense pairs,
    plus the copy-current-volume baseline and aligner-focus records."""
    per = {c: {"nmse": [], "psnr": [], "ssim": []} for c in CHANNELS}
    base = {c: {"nmse": [], "psnr": [], "ssim": []} for c in CHANNELS}
    focus_records = []
    counter = 0
    for traj in cohort:
        for pair in make_pairs(traj):
            state = PatientState.from_trajectory(traj, pair.source_index)
            seed = base_seed + counter
            counter += 1
            gen = generate_future(model, state, pair.plan_between,
                                  pair.interval_days, steps=steps, seed=seed)
            target = traj.timepoints[pair.target_index].volume.data
            current = traj.timepoints[pair.source_index].volume.data
            for c, name in enumerate(CHANNELS):
                per[name]["nmse"].append(nmse(gen.volume.data[c], target[c]))
                per[name]["psnr"].append(psnr(gen.volume.data[c], target[c]))
                per[name]["ssim"].append(ssim(gen.volume.data[c], target[c]))
                base[name]["nmse"].append(nmse(current[c], target[c]))
                base[name]["psnr"].append(psnr(current[c], target[c]))
                base[name]["ssim"].append(ssim(current[c], target[c]))
            if gen.mask is not None:
                true_mask = traj.timepoints[pair.target_index].mask
                focus_records.append({
                    "focus_vox": gen.mask.foreground_voxels(),
                    "true_vox": true_mask.foreground_voxels(),
                    "interval_days": pair.interval_days,
                    "plan": pair.plan_between,
                })
    gen_stats = {c: {m: _mean_std(v) for m, v in d.items()} for c, d in per.items()}
    base_stats = {c: {m: _mean_std(v) for m, v in d.items()} for c, d in base.items()}
    return gen_stats, base_stats, focus_records


def evaluate_planning(model, cohort):
    """Greedy decode at every state with a known next plan."""
    preds, refs = [], []
    failures = 0
    for traj in cohort:
        for p in range(len(traj.plans)):
            state = PatientState.from_trajectory(traj, p)
            try:
                plan, _ = predict_plan(model, state)
            except NoPlanError:
                plan = None
                failures += 1
            preds.append(plan)
            refs.append(traj.plans[p])
    stats = plan_metrics(preds, refs)
    stats["decode_failures"] = failures
    return stats, preds, refs


def counterfactual_direction(model, cohort, steps=None, base_seed=777) -> dict:
    """Swap the conditioning action between {AM} and {SUR} (same state and
    seed) and check the predicted tumor-core volume moves the way the cohort
    dynamics dictate (growth under AM, loss under SUR)."""
    from .cohort import TreatmentPlan, TreatmentToken, classify_voxels, LABEL_ET, LABEL_NET

    am = TreatmentPlan((TreatmentToken.AM,))
    sur = TreatmentPlan((TreatmentToken.SUR,))
    total = 0
    correct = 0
    details = []
    counter = 0
    for traj in cohort:
        for pair in make_pairs(traj):
            state = PatientState.from_trajectory(traj, pair.source_index)
            seed = base_seed + counter
            counter += 1
            vols = {}
            for name, plan in (("AM", am), ("SUR", sur)):
                gen = generate_future(model, state, plan, pair.interval_days,
                                      steps=steps, seed=seed)
                lab = classify_voxels(gen.volume.data)
                vols[name] = int(((lab == LABEL_ET) | (lab == LABEL_NET)).sum())
            ok = vols["AM"] > vols["SUR"]
            total += 1
            correct += int(ok)
            details.append({"subject": traj.subject_id, "p": pair.source_index,
                            "q": pair.target_index, "am_vox": vols["AM"],
                            "sur_vox": vols["SUR"], "correct": ok})
    return {"fraction_correct": correct / total if total else None,
            "n": total, "details": details}


def evaluate_model(model, cohort, steps=None, base_seed=1234) -> dict:
    gen_stats, base_stats, focus_records = evaluate_generation(
        model, cohort, steps=steps, base_seed=base_seed)
    plan_stats, _, _ = evaluate_planning(model, cohort)
    corr = focus_correlation(focus_records) if focus_records else None
    return {
        "planning": plan_stats,
        "generation": gen_stats,
        "copy_baseline": base_stats,
        "correlation": corr,
        "n_pairs": len(focus_records) if focus_records else
                   sum(len(make_pairs(t)) for t in cohort),
    }


def render_report(report: dict) -> str:
    """Human-readable rendering of an evaluation report."""
    lines = []
    p = report["planning"]
    lines.append("== Treatment planning ==")
    lines.append(f"accuracy {p['accuracy']:.1f}  f1 {p['f1']:.1f}  "
                 f"specificity {p['specificity']:.1f}  precision {p['precision']:.1f}  "
                 f"(n={p['n']}, classes={len(p['classes'])})")
    lines.append("== Future MRI generation (model | copy-current baseline) ==")
    for c in CHANNELS:
        g = report["generation"][c]
        b = report["copy_baseline"][c]
        lines.append(
            f"{c:6s} NMSE {g['nmse']['mean']:6.2f}±{g['nmse']['std']:.2f} | "
            f"{b['nmse']['mean']:6.2f}  PSNR {g['psnr']['mean']:5.2f} | "
            f"{b['psnr']['mean']:5.2f}  SSIM {g['ssim']['mean']:.4f} | "
            f"{b['ssim']['mean']:.4f}")
    corr = report.get("correlation")
    if corr:
        lines.append("== Aligner focus vs tumor volume (Pearson r) ==")
        ov = corr["overall"]
        lines.append(f"overall: {ov:.3f}" if ov is not None else "overall: undefined")
        for name, r in corr["by_interval"].items():
            lines.append(f"  interval {name}: {r if r is None else round(r, 3)}")
        for name, r in corr["by_treatment"].items():
            lines.append(f"  treatment {name}: {r if r is None else round(r, 3)}")
    return "\n".join(lines)


def write_report(report: dict, out_prefix) -> None:
    out = Path(out_prefix)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.with_suffix(".json").write_text(json.dumps(report, indent=2))
    out.with_suffix(".txt").write_text(render_report(report) + "\n")
