"""Single command-line entry point.

Subcommands cover dataset generation, codebook and stage training,
evaluation, closed-loop rollouts, latency benchmarks, report rendering,
mask inspection, and the orchestrated end-to-end pipeline. Exit codes:
0 success, 2 config/schema error, 3 data error, 4 numeric failure.

Heavy modules are imported lazily inside the command functions so that
F1LAB_THREADS can cap the BLAS worker count before numpy loads.
"""

from __future__ import annotations

import argparse
import glob
import hashlib
import json
import os
import sys

PIPELINE_VERSION = "f1lab-pipe-1"
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


def _apply_thread_cap():
    cap = os.environ.get("F1LAB_THREADS")
    if cap:
        for var in _THREAD_VARS:
            os.environ.setdefault(var, cap)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _load_run(args):
    from .trainer import default_run_config, run_config_from_dict

    if getattr(args, "config", None):
        from .errors import ConfigError

        if not os.path.exists(args.config):
            raise ConfigError(f"config file not found: {args.config}")
        with open(args.config) as f:
            run = run_config_from_dict(json.load(f))
    else:
        run = default_run_config(getattr(args, "task", None) or "static")
    import dataclasses

    if getattr(args, "task", None):
        world = dataclasses.replace(run.world, dynamic_fraction=1.0 if args.task == "dynamic" else 0.0)
        model = dataclasses.replace(run.model, chunk=8 if args.task == "dynamic" else run.model.chunk)
        run = dataclasses.replace(run, task=args.task, world=world, model=model)
    if getattr(args, "seed", None) is not None:
        run = dataclasses.replace(run, seed=args.seed)
    if getattr(args, "deterministic", False):
        run = dataclasses.replace(run, deterministic=True)
    if getattr(args, "ablation", None):
        from .trainer import AblationFlags

        run = dataclasses.replace(run, ablation=AblationFlags(**{args.ablation: True}))
    if getattr(args, "scales", None):
        import dataclasses as _dc

        run = _dc.replace(run, ablation=_dc.replace(run.ablation, inference_scales=args.scales))
    return run


def _sides_for(run):
    # 4 is the trained schedule itself; only the sweep settings override it
    from .trainer import SWEEP_SIDES

    if run.ablation.inference_scales != 4:
        return SWEEP_SIDES[run.ablation.inference_scales]
    return None


def _resolved(run):
    """Fold ablation flags into the model so fresh inits match training."""
    import dataclasses

    if run.ablation.no_gen and run.model.use_gen:
        run = dataclasses.replace(run, model=dataclasses.replace(run.model, use_gen=False))
    return run


def _require_empty(path, force: bool):
    from .errors import DataError

    if os.path.isdir(path) and os.listdir(path) and not force:
        raise DataError(f"output directory {path} is not empty; pass --force to overwrite")
    os.makedirs(path, exist_ok=True)


def _model_layout(cfg):
    from .layout import Segment, SegmentLayout

    segs = [Segment("UND", cfg.instr_len + cfg.grid_side**2)]
    if cfg.use_gen:
        segs += [Segment("GEN", r * r, i) for i, r in enumerate(cfg.scales)]
    segs.append(Segment("ACT", cfg.chunk + 1))
    return SegmentLayout(tuple(segs))


def _dir_bytes(path) -> int:
    return sum(os.path.getsize(os.path.join(r, f)) for r, _, fs in os.walk(path) for f in fs)


# ---- commands --------------------------------------------------------------


def cmd_gen_data(args) -> int:
    run = _load_run(args)
    from .world import generate_dataset, save_dataset

    _require_empty(args.out, args.force)
    ds = generate_dataset(run.world, run.seed)
    save_dataset(ds, args.out)
    rate = sum(t.success for t in ds.trajectories) / len(ds.trajectories)
    print(f"dataset: {len(ds.trajectories)} trajectories, expert success {rate:.3f}, {_dir_bytes(args.out)} bytes -> {args.out}")
    return 0


def cmd_train_codebook(args) -> int:
    run = _load_run(args)
    from .rvq import frames_of, reconstruction_mse, train_codebook
    from .world import load_dataset

    ds = load_dataset(args.data)
    cb = train_codebook(ds, run.codebook, run.seed)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "codebook")
    cb.save(path)
    frames = frames_of(ds)[:100]
    mse = reconstruction_mse(frames, cb)
    print(f"codebook: V={cb.v} dim={cb.dim} scales={cb.scales}  mse={mse:.6g} -> {path}.json")
    return 0


def _stage_init(run, plans, stage: int, out_dir):
    """Parameters to start `stage` from, following the stage chain."""
    from .backbone import ExpertParams
    from .errors import DataError
    from .trainer import load_training_checkpoint

    earlier = [s for s in sorted(plans) if s < stage]
    if not earlier:
        return ExpertParams.init(run.model, run.seed)
    prev = earlier[-1]
    plan = plans[prev]
    path = os.path.join(str(out_dir), f"stage{prev}_ck{plan.checkpoints:02d}")
    if not os.path.exists(path + ".json"):
        raise DataError(f"missing stage {prev} checkpoint {path}.json; train stage {prev} first")
    params, _, _, _, _, _ = load_training_checkpoint(path)
    return params


def cmd_train(args) -> int:
    run = _resolved(_load_run(args))
    from .rvq import Codebook
    from .trainer import make_stage_plans, run_training
    from .world import load_dataset

    ds = load_dataset(args.data)
    cb = Codebook.load(args.codebook)
    os.makedirs(args.out, exist_ok=True)
    plans = make_stage_plans(run)
    stages = [args.stage] if args.stage else sorted(plans)
    from .errors import ConfigError

    for s in stages:
        if s not in plans:
            raise ConfigError(f"stage {s} is not part of this run (available: {sorted(plans)})")
    init = _stage_init(run, plans, stages[0], args.out) if stages else None
    result = run_training(run, ds, cb, out_dir=args.out, stages=stages, init_params=init)
    for s, res in result.stage_results.items():
        last = res.log_rows[-1]
        nll = f"  heldout nll {res.heldout_nll[-1][1]:.4g}" if res.heldout_nll else ""
        print(f"stage {s}: {len(res.log_rows)} steps, loss {last['loss_total']:.4g} (gen {last['loss_gen']:.4g}, act {last['loss_act']:.4g}){nll}")
    if result.final_path:
        print(f"final checkpoint -> {result.final_path}.json")
    return 0


def cmd_eval(args) -> int:
    run = _load_run(args)
    import numpy as np

    from .errors import DataError
    from .metrics import TAUS, correlation, open_loop_eval, write_correlation_json, write_eval_csv, write_foresight_csv
    from .rvq import Codebook
    from .trainer import load_training_checkpoint, prepare_data
    from .world import load_dataset

    ds = load_dataset(args.data)
    cb = Codebook.load(args.codebook)
    data = prepare_data(ds, cb, run)
    pattern = args.checkpoints or os.path.join(str(args.out), "stage2_ck*.json")
    paths = sorted(glob.glob(pattern))
    if not paths:
        raise DataError(f"no checkpoints match {pattern}")
    sides = _sides_for(run)
    eval_rows, foresight_rows = [], []
    for path in paths:
        params, cfg, stage, step, _, _ = load_training_checkpoint(path[: -len(".json")])
        ev = open_loop_eval(cfg, params, cb, data.heldout, n_pairs=args.pairs, seed=run.seed, sides=sides)
        eval_rows.append(
            {
                "step": step,
                "image_token_acc": ev.image_acc,
                "acc_0.01": ev.acc_tau[0.01],
                "acc_0.02": ev.acc_tau[0.02],
                "acc_0.05": ev.acc_tau[0.05],
            }
        )
        counts = {r: i + 1 for i, r in enumerate(sorted(ev.per_scale_acc))}
        for r in sorted(ev.per_scale_acc):
            foresight_rows.append({"step": step, "scale": r, "token_acc": ev.per_scale_acc[r], "mse": ev.decoded_mse.get(counts[r], float("nan"))})
    out_dir = os.path.join(str(args.out), "eval")
    os.makedirs(out_dir, exist_ok=True)
    write_eval_csv(os.path.join(out_dir, "eval.csv"), eval_rows)
    write_foresight_csv(os.path.join(out_dir, "foresight_metrics.csv"), foresight_rows)
    per_tau = {}
    img = np.asarray([r["image_token_acc"] for r in eval_rows])
    if len(eval_rows) >= 3 and np.all(np.isfinite(img)):
        for tau in TAUS:
            acc = np.asarray([r[f"acc_{tau:g}"] for r in eval_rows])
            per_tau[tau] = correlation(img, acc)
    write_correlation_json(os.path.join(out_dir, "correlation.json"), per_tau, n=len(eval_rows))
    for row in eval_rows:
        print("step %5d  img %.4f  acc05 %.4f  acc02 %.4f  acc01 %.4f" % (row["step"], row["image_token_acc"], row["acc_0.05"], row["acc_0.02"], row["acc_0.01"]))
    for tau, (pe, sp) in per_tau.items():
        print(f"tau {tau:g}: pearson {pe:.4f} spearman {sp:.4f}")
    print(f"eval artifacts -> {out_dir}")
    return 0


def cmd_rollout(args) -> int:
    run = _load_run(args)
    from .metrics import closed_loop_eval, write_rollout_summary
    from .rvq import Codebook
    from .trainer import load_training_checkpoint
    from .world import Dataset, save_dataset

    cb = Codebook.load(args.codebook)
    params, cfg, _, _, _, _ = load_training_checkpoint(args.checkpoint)
    first = args.first_seed if args.first_seed is not None else run.seed * 1000
    seeds = range(first, first + args.episodes)
    result = closed_loop_eval(
        cfg,
        params,
        cb,
        run.world,
        seeds,
        sides=_sides_for(run),
        actor=args.actor,
        replan_every=args.replan,
        record=True,
    )
    os.makedirs(args.out, exist_ok=True)
    manifest = {
        "version": "f1lab-ds-1",
        "seed": int(first),
        "config": None,
        "count": len(result.trajectories),
        "source": f"closed-loop rollout ({args.actor})",
    }
    import dataclasses as _dc

    manifest["config"] = _dc.asdict(run.world)
    save_dataset(Dataset(manifest=manifest, trajectories=result.trajectories), args.out)
    write_rollout_summary(os.path.join(args.out, "rollout_summary.json"), result)
    print(f"rollout: {len(seeds)} episodes, success {result.success_rate:.3f}, mean steps {result.mean_steps:.1f} -> {args.out}")
    return 0


def cmd_bench(args) -> int:
    run = _load_run(args)
    from .backbone import ExpertParams
    from .metrics import BENCH_ROWS, bench_latency
    from .rvq import Codebook
    from .trainer import load_training_checkpoint

    cb = Codebook.load(args.codebook)
    if args.checkpoint:
        params, cfg, _, _, _, _ = load_training_checkpoint(args.checkpoint)
    else:
        cfg = run.model
        params = ExpertParams.init(cfg, run.seed)
    times = bench_latency(cfg, params, cb, run.world, runs=args.runs, denoise_steps=args.steps, seed=run.seed)
    width = max(len(r) for r in BENCH_ROWS)
    for row in BENCH_ROWS:
        print(f"{row:<{width}}  {times[row]:9.3f} ms")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "bench.csv")
        with open(path, "w") as f:
            f.write("stage,ms\n")
            for row in BENCH_ROWS:
                f.write(f"\"{row}\",{times[row]:.6g}\n")
        print(f"-> {path}")
    return 0


def cmd_mask(args) -> int:
    run = _resolved(_load_run(args))
    from .layout import layout_from_string
    from .report import mask_svg, mask_text

    layout = layout_from_string(args.layout) if args.layout else _model_layout(run.model)
    text = mask_text(layout)
    print(text)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "mask.txt"), "w") as f:
            f.write(text + "\n")
        with open(os.path.join(args.out, "mask.svg"), "w") as f:
            f.write(mask_svg(layout))
        print(f"mask artifacts -> {args.out}")
    return 0


def cmd_report(args) -> int:
    if args.what == "mask":
        return cmd_mask(args)
    run = _resolved(_load_run(args))
    from .report import mask_svg, mask_text, render_report

    art = str(args.artifacts or args.out)
    eval_csv = os.path.join(art, "eval", "eval.csv")
    corr_json = os.path.join(art, "eval", "correlation.json")
    logs = {}
    for path in sorted(glob.glob(os.path.join(art, "train_log_stage*.csv"))):
        stage = int(path.rsplit("stage", 1)[1].split(".")[0])
        logs[stage] = path
    rates = None
    abl_path = os.path.join(art, "eval", "ablation.json")
    if os.path.exists(abl_path):
        with open(abl_path) as f:
            rates = {k: float(v) for k, v in json.load(f).items()}
    out_dir = os.path.join(str(args.out), "report")
    written = render_report(
        out_dir,
        eval_csv=eval_csv if os.path.exists(eval_csv) else None,
        correlation_json=corr_json if os.path.exists(corr_json) else None,
        train_logs=logs or None,
        ablation_rates=rates,
    )
    layout = _model_layout(run.model)
    with open(os.path.join(out_dir, "mask.svg"), "w") as f:
        f.write(mask_svg(layout))
    with open(os.path.join(out_dir, "mask.txt"), "w") as f:
        f.write(mask_text(layout) + "\n")
    written += [os.path.join(out_dir, "mask.svg"), os.path.join(out_dir, "mask.txt")]
    missing = [p for p in (eval_csv, corr_json) if not os.path.exists(p)]
    for p in missing:
        print(f"note: {p} absent, figure skipped")
    print("report -> " + ", ".join(sorted(os.path.basename(p) for p in written)))
    return 0


# ---- pipeline --------------------------------------------------------------


def _checkpoint_files(prefix) -> list:
    return [prefix + ".json", prefix + ".bin"]


def _pipeline_steps(run, plans, out):
    """Ordered (name, output-paths) pairs for ledger bookkeeping."""
    steps = [
        ("dataset", [os.path.join(out, "dataset", "manifest.json"), os.path.join(out, "dataset", "trajs.jsonl")]),
        ("codebook", [os.path.join(out, "codebook.json"), os.path.join(out, "codebook.bin")]),
    ]
    ordered = sorted(plans)
    for s in ordered:
        outs = []
        for i in range(plans[s].checkpoints):
            outs += _checkpoint_files(os.path.join(out, f"stage{s}_ck{i + 1:02d}"))
        if s == ordered[-1]:
            outs += _checkpoint_files(os.path.join(out, "final"))
        steps.append((f"stage{s}", outs))
    steps.append(("eval", [os.path.join(out, "eval", n) for n in ("eval.csv", "correlation.json", "foresight_metrics.csv")]))
    report_files = ["correlation.svg", "mask.svg", "mask.txt"]
    if plans:
        report_files.append("loss_curves.svg")
    steps.append(("report", [os.path.join(out, "report", n) for n in report_files]))
    return steps


def cmd_pipeline(args) -> int:
    run = _resolved(_load_run(args))
    from .errors import DataError
    from .trainer import make_stage_plans, run_config_to_dict

    out = str(args.out)
    os.makedirs(out, exist_ok=True)
    plans = make_stage_plans(run)
    steps = _pipeline_steps(run, plans, out)
    config_doc = json.dumps(run_config_to_dict(run), sort_keys=True)
    config_digest = hashlib.sha256(config_doc.encode()).hexdigest()
    ledger_path = os.path.join(out, "pipeline.json")
    ledger = {"version": PIPELINE_VERSION, "config_digest": config_digest, "steps": {}}
    if os.path.exists(ledger_path):
        with open(ledger_path) as f:
            prior = json.load(f)
        if prior.get("config_digest") != config_digest:
            if not args.force:
                raise DataError("pipeline.json was produced by a different config; pass --force to rebuild")
        else:
            ledger = prior

    def save_ledger():
        with open(ledger_path, "w") as f:
            json.dump(ledger, f, indent=1, sort_keys=True)
            f.write("\n")

    def fresh(name, outputs) -> bool:
        rec = ledger["steps"].get(name)
        if not rec or not rec.get("done"):
            return False
        for rel, digest in rec["artifacts"].items():
            path = os.path.join(out, rel)
            if not os.path.exists(path):
                return False
            if _sha256(path) != digest:
                if args.force:
                    return False
                raise DataError(f"stale artifact {rel} under step {name}: digest differs from pipeline.json; pass --force to rebuild")
        return True

    def finish(name, outputs):
        arts = {}
        for path in outputs:
            if os.path.exists(path):
                arts[os.path.relpath(path, out)] = _sha256(path)
        ledger["steps"][name] = {"done": True, "artifacts": arts}
        for later in [n for n, _ in steps[[n for n, _ in steps].index(name) + 1 :]]:
            ledger["steps"].pop(later, None)
        save_ledger()

    ns = argparse.Namespace(**vars(args))
    data_dir = os.path.join(out, "dataset")
    for name, outputs in steps:
        if fresh(name, outputs):
            print(f"[pipeline] {name}: up to date")
            continue
        print(f"[pipeline] {name}: running")
        if name == "dataset":
            ns.out, ns.force = data_dir, True
            cmd_gen_data(ns)
        elif name == "codebook":
            ns.data, ns.out = data_dir, out
            cmd_train_codebook(ns)
        elif name.startswith("stage"):
            ns.data, ns.codebook, ns.out, ns.stage = data_dir, os.path.join(out, "codebook"), out, int(name[5:])
            cmd_train(ns)
        elif name == "eval":
            ns.data, ns.codebook, ns.out = data_dir, os.path.join(out, "codebook"), out
            ns.checkpoints = None
            ns.pairs = args.pairs
            cmd_eval(ns)
        elif name == "report":
            ns.out, ns.artifacts, ns.what, ns.layout = out, out, "all", None
            cmd_report(ns)
        finish(name, outputs)
    print(f"pipeline complete -> {out}")
    return 0


# ---- argument parsing ------------------------------------------------------


def _add_common(p, out_required=True):
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--deterministic", action="store_true", help="record deterministic mode in the config")
    p.add_argument("--force", action="store_true", help="overwrite/rebuild existing outputs")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="f1lab", description="desk-scale foresight-action policy lab")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate an expert demonstration dataset")
    _add_common(p)
    p.add_argument("--task", choices=("static", "dynamic"))

    p = sub.add_parser("train-codebook", help="train the residual VQ codebook")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset directory")

    p = sub.add_parser("train", help="run training stages")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--codebook", required=True, help="codebook path prefix")
    p.add_argument("--stage", type=int, choices=(1, 2, 3), help="single stage to run (default: all configured)")
    p.add_argument("--ablation", choices=("no_gen", "frozen_gen", "skip_stage2"))

    p = sub.add_parser("eval", help="open-loop metrics over stored checkpoints")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--checkpoints", help="glob of checkpoint manifests (default OUT/stage2_ck*.json)")
    p.add_argument("--pairs", type=int, default=256)
    p.add_argument("--scales", type=int, choices=(2, 4, 6), help="inference scale-count sweep setting")

    p = sub.add_parser("rollout", help="closed-loop episodes written as a dataset")
    _add_common(p)
    p.add_argument("--codebook", required=True)
    p.add_argument("--checkpoint", required=True, help="checkpoint path prefix")
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--first-seed", type=int, help="first episode seed (default seed*1000)")
    p.add_argument("--actor", choices=("model", "expert"), default="model")
    p.add_argument("--replan", type=int, help="steps executed between replans (default: whole chunk)")
    p.add_argument("--scales", type=int, choices=(2, 4, 6))

    p = sub.add_parser("bench", help="latency breakdown table")
    _add_common(p, out_required=False)
    p.add_argument("--codebook", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--runs", type=int, default=50)
    p.add_argument("--steps", type=int, help="denoise steps for the flow row")

    p = sub.add_parser("report", help="render the SVG report bundle")
    _add_common(p)
    p.add_argument("what", nargs="?", choices=("all", "mask"), default="all")
    p.add_argument("--artifacts", help="pipeline output dir to read (default: --out)")
    p.add_argument("--layout", help="segment layout spec, e.g. UND:3,GEN:1@0,GEN:4@1,ACT:5")

    p = sub.add_parser("mask", help="print and save the progressive attention mask")
    _add_common(p, out_required=False)
    p.add_argument("--layout", help="segment layout spec, e.g. UND:3,GEN:1@0,GEN:4@1,ACT:5")

    p = sub.add_parser("pipeline", help="codebook, stages, eval, and report in one run")
    _add_common(p)
    p.add_argument("--task", choices=("static", "dynamic"))
    p.add_argument("--ablation", choices=("no_gen", "frozen_gen", "skip_stage2"))
    p.add_argument("--scales", type=int, choices=(2, 4, 6))
    p.add_argument("--pairs", type=int, default=256)
    return ap


def main(argv=None) -> int:
    _apply_thread_cap()
    args = build_parser().parse_args(argv)
    from .errors import ConfigError, DataError, LayoutError, NumericError, ShapeError, WorldError

    handlers = {
        "gen-data": cmd_gen_data,
        "train-codebook": cmd_train_codebook,
        "train": cmd_train,
        "eval": cmd_eval,
        "rollout": cmd_rollout,
        "bench": cmd_bench,
        "report": cmd_report,
        "mask": cmd_mask,
        "pipeline": cmd_pipeline,
    }
    try:
        return handlers[args.command](args)
    except (ConfigError, LayoutError, ShapeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, WorldError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
