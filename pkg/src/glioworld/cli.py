"""Command-line entry points: cohort generation, training, evaluation,
counterfactual rollouts, the sandbox service, and the kernel benchmark."""

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .config import CohortConfig, ModelConfig, TrainConfig, load_config, save_config


def _cmd_gen_cohort(args):
    from .cohort import generate_cohort, save_cohort, split_cohort

    cfg = CohortConfig(n_subjects=args.subjects, grid=args.grid, patch=args.patch,
                       tp_min=args.tp_min, tp_max=args.tp_max)
    cfg.validate()
    cohort = generate_cohort(args.seed, cfg)
    split = split_cohort(cohort, args.split_ratio, seed=args.split_seed)
    save_cohort(cohort, args.out, split=split)
    n_tp = sum(len(t.timepoints) for t in cohort)
    print(f"wrote {len(cohort)} subjects / {n_tp} timepoints to {args.out} "
          f"(train {len(split[0])} / val {len(split[1])})")


def _cmd_init_config(args):
    save_config(args.out, ModelConfig(), TrainConfig())
    print(f"wrote default config to {args.out}")


def _load_split(cohort_dir, which):
    from .cohort import load_cohort

    cohort, split_map = load_cohort(cohort_dir)
    if not split_map:
        raise SystemExit(f"cohort at {cohort_dir} carries no split assignment")
    picked = [t for t in cohort if split_map.get(t.subject_id) == which]
    if not picked:
        raise SystemExit(f"no subjects in split {which!r}")
    return picked


def _cmd_train(args):
    from .model import WorldModel
    from .train import save_checkpoint, train_model

    model_cfg, train_cfg = load_config(args.config)
    cohort_train = _load_split(args.cohort, "train")
    grid = cohort_train[0].timepoints[0].volume.data.shape[1]
    if grid != model_cfg.grid:
        raise SystemExit(f"config grid {model_cfg.grid} != cohort grid {grid}")
    model = WorldModel(model_cfg, seed=train_cfg.seed)
    t0 = time.time()
    opt, history = train_model(model, cohort_train, train_cfg,
                               log_path=args.log, progress=True)
    save_checkpoint(args.out, model, opt, train_cfg, step=train_cfg.steps)
    print(f"trained {train_cfg.steps} steps in {time.time() - t0:.0f}s; "
          f"final loss {history[-1]['loss']:.4f}; checkpoint at {args.out}")


def _cmd_eval(args):
    from .metrics import evaluate_model, render_report, write_report
    from .train import load_checkpoint

    model, _, _, _ = load_checkpoint(args.ckpt)
    subset = _load_split(args.cohort, args.split)
    report = evaluate_model(model, subset, steps=args.steps)
    write_report(report, args.report)
    print(render_report(report))
    print(f"report written to {args.report}.json / .txt")


def _cmd_rollout(args):
    from .infer import PatientState, parse_actions, rollout
    from .cohort import load_cohort
    from .train import load_checkpoint
    from .viz import export_step_artifacts

    model, _, _, _ = load_checkpoint(args.ckpt)
    cohort, _ = load_cohort(args.cohort)
    traj = next((t for t in cohort if t.subject_id == args.subject), None)
    if traj is None:
        raise SystemExit(f"unknown subject {args.subject!r}; have "
                         f"{[t.subject_id for t in cohort]}")
    actions = parse_actions(args.actions)
    state = PatientState.from_trajectory(traj, args.timepoint)
    steps = rollout(model, state, actions, seed=args.seed)
    out = Path(args.out)
    manifest = {"subject": args.subject, "from_timepoint": args.timepoint,
                "seed": args.seed, "steps": []}
    for i, st in enumerate(steps):
        entry = export_step_artifacts(out, f"step{i}", st.volume, st.mask)
        entry.update(day=st.day, action=str(st.action), interval_days=st.tau,
                     suggested_plan=str(st.suggested_plan) if st.suggested_plan else None)
        manifest["steps"].append(entry)
        print(f"step {i}: day {st.day} action {st.action} "
              f"suggested {st.suggested_plan}")
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    print(f"rollout artifacts in {out}")


def _cmd_serve(args):
    import uvicorn

    from .service import create_app

    app = create_app(args.ckpt, args.cohort)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")


def _cmd_bench(args):
    from .kernels import implementations

    rng = np.random.default_rng(0)
    g = args.grid
    cases = {
        "trilinear_resize": ((rng.standard_normal((16, g // 4, g // 4, g // 4)),
                              (g, g, g)), {}),
        "trilinear_resize_adjoint": ((rng.standard_normal((16, g, g, g)),
                                      (g // 4, g // 4, g // 4)), {}),
        "ssim3d_mean": ((rng.random((g, g, g)), rng.random((g, g, g)), 7,
                         1e-4, 9e-4), {}),
        "sphere_labels": (((g, g, g), (g / 2, g / 2, g / 2),
                           (1.0, 3.0, 5.0, 8.0)), {}),
    }
    print(f"kernel benchmark, grid={g}, {args.repeat} repeats (best shown)")
    for name, (call_args, kw) in cases.items():
        impls = implementations(name)
        row = {}
        for backend, fn in impls.items():
            if fn is None:
                row[backend] = None
                continue
            fn(*call_args, **kw)  # warm JIT
            best = min(_time_once(fn, call_args, kw) for _ in range(args.repeat))
            row[backend] = best
        numba_s = f"{row['numba'] * 1e3:8.2f} ms" if row.get("numba") else "     n/a"
        speedup = (f"x{row['numpy'] / row['numba']:.1f}"
                   if row.get("numba") else "")
        print(f"  {name:26s} numpy {row['numpy'] * 1e3:8.2f} ms | "
              f"numba {numba_s} {speedup}")


def _time_once(fn, call_args, kw):
    t0 = time.perf_counter()
    fn(*call_args, **kw)
    return time.perf_counter() - t0


def main(argv=None):
    ap = argparse.ArgumentParser(prog="glioworld",
                                 description="glioma treatment world model")
    sub = ap.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-cohort", help="generate a synthetic cohort")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--subjects", type=int, default=8)
    g.add_argument("--grid", type=int, default=32)
    g.add_argument("--patch", type=int, default=4)
    g.add_argument("--tp-min", type=int, default=3)
    g.add_argument("--tp-max", type=int, default=5)
    g.add_argument("--split-ratio", type=float, default=0.8)
    g.add_argument("--split-seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=_cmd_gen_cohort)

    c = sub.add_parser("init-config", help="write a default train config")
    c.add_argument("--out", required=True)
    c.set_defaults(fn=_cmd_init_config)

    t = sub.add_parser("train", help="train a world model")
    t.add_argument("--config", required=True)
    t.add_argument("--cohort", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--log", default=None)
    t.set_defaults(fn=_cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--cohort", required=True)
    e.add_argument("--split", choices=("train", "val"), default="val")
    e.add_argument("--steps", type=int, default=None,
                   help="Euler steps (default: model config)")
    e.add_argument("--report", required=True)
    e.set_defaults(fn=_cmd_eval)

    r = sub.add_parser("rollout", help="counterfactual rollout")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--cohort", required=True)
    r.add_argument("--subject", required=True)
    r.add_argument("--timepoint", type=int, default=0)
    r.add_argument("--actions", required=True,
                   help="e.g. 'SUR+CRT:92,AM:60'")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True)
    r.set_defaults(fn=_cmd_rollout)

    s = sub.add_parser("serve", help="run the sandbox HTTP service")
    s.add_argument("--port", type=int, default=8008)
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--ckpt", default=None)
    s.add_argument("--cohort", default=None)
    s.set_defaults(fn=_cmd_serve)

    b = sub.add_parser("bench", help="compare numba vs numpy kernels")
    b.add_argument("--grid", type=int, default=32)
    b.add_argument("--repeat", type=int, default=5)
    b.set_defaults(fn=_cmd_bench)

    args = ap.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
