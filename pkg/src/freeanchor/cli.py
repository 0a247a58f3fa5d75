"""Command-line entry point.

Exit codes: 0 success, 1 verification or training failure, 2 usage / input error.
FREEANCHOR_THREADS sets the BLAS thread count (read before numpy loads).
"""

from __future__ import annotations

import os

if "FREEANCHOR_THREADS" in os.environ:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["FREEANCHOR_THREADS"])

import argparse  # noqa: E402
import csv  # noqa: E402
import hashlib  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

from . import __version__  # noqa: E402

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("freeanchor")


class UsageError(Exception):
    pass


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _refuse_existing(paths, force: bool) -> None:
    existing = [str(p) for p in paths if Path(p).exists()]
    if existing and not force:
        raise UsageError(f"refusing to overwrite {', '.join(existing)} (use --force)")


# ---------------------------------------------------------------------------
# generate


def manifest_path(data_path: Path) -> Path:
    return data_path.with_name(data_path.name + ".manifest.json")


def cmd_generate(args) -> int:
    from .synthdata import DatasetSpec, generate_dataset, save_dataset, shape_composition

    if args.spec:
        spec = DatasetSpec.from_dict(json.loads(Path(args.spec).read_text()))
    else:
        f = args.slender_frac
        if not 0.0 <= f <= 1.0:
            raise UsageError("--slender-frac must lie in [0, 1]")
        spec = DatasetSpec(
            num_scenes=args.scenes,
            width=args.size,
            height=args.size,
            num_classes=args.classes,
            shape_mix=(1.0 - f, f / 2, f / 2),
            objects_per_scene=args.objects,
            noise=args.noise,
            seed=args.seed,
        )
    out = Path(args.out)
    man = manifest_path(out)
    _refuse_existing([out, man], args.force)
    out.parent.mkdir(parents=True, exist_ok=True)
    scenes = generate_dataset(spec)
    save_dataset(scenes, out)
    comp = shape_composition(scenes)
    manifest = {
        "version": __version__,
        "seed": spec.seed,
        "scenes": len(scenes),
        "objects": comp["objects"],
        "slender_objects": comp["slender"],
        "square_objects": comp["square"],
        "all_slender": comp["objects"] > 0 and comp["square"] == 0,
        "objects_per_scene": {str(n): sum(s.crowdedness == n for s in scenes) for n in sorted({s.crowdedness for s in scenes})},
        "spec": spec.to_dict(),
        "sha256": _sha256(out),
    }
    man.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(json.dumps({k: manifest[k] for k in ("scenes", "objects", "slender_objects", "seed", "sha256")}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _train_config_from_args(args):
    from .experiment import ExperimentConfig
    from .loss import HyperParams
    from .trainer import TrainConfig

    if args.config:
        cfg = ExperimentConfig.load(args.config)
        if args.loss:
            cfg = cfg.with_loss(args.loss)
        return cfg
    hp = HyperParams(n=args.n, t=args.t, alpha=args.alpha, gamma=args.gamma, beta=args.beta)
    tc = TrainConfig(
        loss=args.loss or "free_anchor",
        iterations=args.iterations,
        batch_size=args.batch_size,
        lr=args.lr,
        milestones=args.milestones,
        momentum=args.momentum,
        hidden=args.hidden,
        seed=args.seed,
        log_every=args.log_every,
        snapshot_every=args.snapshot_every,
        hp=hp,
    )
    if not args.data:
        raise UsageError("train needs --data or --config")
    return ExperimentConfig(dataset=str(args.data), train=tc)


def cmd_train(args) -> int:
    import numpy as np

    from .experiment import resolve_dataset
    from .geometry import generate_anchors
    from .model import TrainingError, load_checkpoint, save_checkpoint
    from .plotting import plot_training_log
    from .synthdata import DatasetSpec
    from .trainer import SceneCache, TrainState, train

    cfg = _train_config_from_args(args)
    out = Path(args.out)
    log_path, model_path = out / "log.csv", out / "model.json"
    if args.resume is None:
        _refuse_existing([log_path, model_path], args.force)
    out.mkdir(parents=True, exist_ok=True)
    if isinstance(cfg.dataset, str) and not Path(cfg.dataset).exists():
        raise UsageError(f"dataset {cfg.dataset} does not exist")
    scenes = resolve_dataset(cfg.dataset)
    anchors = generate_anchors(cfg.layout)
    num_classes = cfg.dataset.num_classes if isinstance(cfg.dataset, DatasetSpec) else _classes_of(cfg.dataset)
    state = None
    if args.resume is not None:
        params, extra = load_checkpoint(args.resume)
        velocity = extra.get("velocity") or None
        state = TrainState(params, int(extra.get("iteration", 0)), None if velocity is None else np.asarray(velocity))
    cfg.save(out / "config.json")
    cache = SceneCache(anchors, cfg.train.hp.n, cfg.train.hp.iou_threshold)
    try:
        state = train(
            scenes,
            cfg.train,
            anchors,
            state=state,
            cache=cache,
            log_path=log_path,
            checkpoint_dir=out,
            num_classes=num_classes,
            checkpoint_meta={"layout": cfg.layout.to_dict()},
        )
    except TrainingError as exc:
        print(f"training aborted: {exc}; last good checkpoint in {out / 'last_good.json'}", file=sys.stderr)
        return EXIT_FAIL
    save_checkpoint(
        model_path,
        state.params,
        iteration=state.iteration,
        velocity=state.velocity if state.velocity is not None else [],
        train_config=cfg.train.to_dict(),
        layout=cfg.layout.to_dict(),
    )
    rows = _read_log(log_path)
    plot_training_log(rows, out / "loss.png", title=f"{cfg.train.loss} training loss")
    final = rows[-1] if rows else None
    print(json.dumps({"iterations": state.iteration, "final_loss": final[2] if final else None, "checkpoint": str(model_path)}))
    return EXIT_OK


def _classes_of(path) -> int | None:
    man = manifest_path(Path(path))
    if man.exists():
        return int(json.loads(man.read_text())["spec"]["num_classes"])
    return None


def _read_log(path: Path) -> list[list[float]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        return [[float(v) for v in row] for row in reader]


# ---------------------------------------------------------------------------
# eval


def _layout_of(extra: dict):
    from .geometry import AnchorLayout
    from .trainer import DEFAULT_LAYOUT

    return AnchorLayout.from_dict(extra["layout"]) if "layout" in extra else DEFAULT_LAYOUT


def cmd_eval(args) -> int:
    from .evaluation import breakdown_report
    from .geometry import generate_anchors
    from .inference import detect_all
    from .model import feature_dim, load_checkpoint
    from .plotting import plot_grouped_ap, plot_pr_curves
    from .synthdata import load_dataset

    params, extra = load_checkpoint(args.checkpoint)
    if params.feature_dim != feature_dim():
        raise UsageError(
            f"checkpoint expects {params.feature_dim}-dimensional features, this build extracts {feature_dim()}"
        )
    scenes = load_dataset(args.data)
    layout = _layout_of(extra)
    bad = [s for s in scenes if (s.width, s.height) != (layout.width, layout.height)]
    if bad:
        raise UsageError(
            f"scene {bad[0].id} is {bad[0].width}x{bad[0].height} but the checkpoint's anchors cover "
            f"{layout.width}x{layout.height}"
        )
    labels = [int(s.labels.max()) for s in scenes if s.crowdedness]
    if labels and max(labels) >= params.num_classes:
        raise UsageError(f"dataset has class {max(labels)} but the checkpoint predicts {params.num_classes} classes")
    anchors = generate_anchors(layout)
    raw, final = detect_all(params, scenes, anchors, nms_threshold=args.nms_threshold)
    report = breakdown_report(final, scenes, raw_detections=raw, nms_threshold=args.nms_threshold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "report.json")
    report.save_pr_curves(out / "pr_curves.csv")
    if not args.no_figures:
        plot_pr_curves(report, out / "pr_curves.png")
        d = report.to_dict()
        if d["shape_AP"]:
            plot_grouped_ap({"model": d["shape_AP"]}, out / "shape_ap.png", "AP by shape")
        if d["crowd_AP"]:
            plot_grouped_ap({"model": d["crowd_AP"]}, out / "crowd_ap.png", "AP by objects per scene")
    d = report.to_dict()
    print(json.dumps({k: d[k] for k in ("AP", "AP50", "AP75", "NR")}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_gradcheck, summarize
    from .loss import HyperParams

    hp = HyperParams(n=args.n, t=args.t)
    results = run_gradcheck(args.instances, args.seed, hp, args.loss, args.perturb, args.corrupt)
    worst = summarize(results)
    tol = args.tolerance if args.tolerance is not None else TOLERANCE
    print(f"{'block':<8}{'max_rel_error':>16}  status")
    ok = True
    for name, err in worst.items():
        passed = err < tol
        ok &= passed
        print(f"{name:<8}{err:>16.3e}  {'PASS' if passed else 'FAIL'}")
    print(f"instances={len(results)} perturb={args.perturb:g} tolerance={tol:g} result={'PASS' if ok else 'FAIL'}")
    if args.json:
        doc = {
            "tolerance": tol,
            "perturb": args.perturb,
            "passed": ok,
            "blocks": worst,
            "instances": [
                {"seed": r.seed, "anchors": r.num_anchors, "objects": r.num_objects, "classes": r.num_classes, **r.block_errors}
                for r in results
            ],
        }
        Path(args.json).write_text(json.dumps(doc, indent=2) + "\n")
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------------------
# trace-matching


def cmd_trace_matching(args) -> int:
    from .geometry import generate_anchors
    from .loss import HyperParams
    from .model import extract_features, load_checkpoint
    from .plotting import plot_trace
    from .synthdata import load_dataset
    from .trace import trace_rows, write_trace

    scenes = {s.id: s for s in load_dataset(args.data)}
    if args.scene_id not in scenes:
        raise UsageError(f"scene id {args.scene_id} not found in {args.data}")
    scene = scenes[args.scene_id]
    rows, features, anchors = [], None, None
    for path in args.checkpoints:
        params, extra = load_checkpoint(path)
        if anchors is None:
            anchors = generate_anchors(_layout_of(extra))
            features = extract_features(scene, anchors)
        tc = extra.get("train_config", {})
        hp = HyperParams(**tc["hp"]) if "hp" in tc else HyperParams()
        if args.n is not None:
            hp = HyperParams(**{**hp.__dict__, "n": args.n})
        rows += trace_rows(params, scene, anchors, hp, int(extra.get("iteration", 0)), features)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_trace(rows, out)
    if not args.no_figures:
        plot_trace(rows, out.with_suffix(".png"))
    print(json.dumps({"rows": len(rows), "snapshots": len(args.checkpoints), "csv": str(out)}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# compare


def cmd_compare(args) -> int:
    from .experiment import PRESETS, ExperimentConfig, ap_gap, compare, non_decreasing
    from .plotting import plot_grouped_ap, plot_training_log

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in args.seeds:
        cfg = ExperimentConfig.load(args.config).with_seed(seed) if args.config else PRESETS[args.preset](seed)
        if args.iterations:
            cfg.train.iterations = args.iterations
        cfg.save(out / f"config_seed{seed}.json")
        results = compare(cfg)
        for mode, r in results.items():
            r.report.save(out / f"report_{mode}_seed{seed}.json")
            d = r.report.to_dict()
            rows.append({"seed": seed, "loss": mode, "AP": d["AP"], "AP50": d["AP50"], "NR": d["NR"],
                         **{f"AP_{k}": v for k, v in d["shape_AP"].items()},
                         **{f"AP_crowd_{k}": v for k, v in d["crowd_AP"].items()}})
            if not args.no_figures:
                plot_training_log(r.state.rows, out / f"loss_{mode}_seed{seed}.png", f"{mode}, seed {seed}")
        gap = ap_gap(results)
        log.info("seed %d: AP gap by crowd bucket %s (non-decreasing: %s)", seed, gap, non_decreasing(gap.values()))
        if not args.no_figures:
            groups = {m: {**r.report.to_dict()["shape_AP"], **r.report.to_dict()["crowd_AP"]} for m, r in results.items()}
            plot_grouped_ap(groups, out / f"ap_breakdown_seed{seed}.png", f"AP by subset, seed {seed}")
    keys = sorted({k for r in rows for k in r}, key=lambda k: (k not in ("seed", "loss", "AP", "AP50", "NR"), k))
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    (out / "summary.json").write_text(json.dumps(rows, indent=2) + "\n")
    for r in rows:
        print(json.dumps(r))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="freeanchor", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset (JSON lines) and manifest")
    g.add_argument("--out", default="data/scenes.jsonl", help="output path; .gz compresses")
    g.add_argument("--scenes", type=int, default=500)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--slender-frac", type=float, default=0.0, help="fraction of slender objects")
    g.add_argument("--objects", type=_ints, default=(1,), help="objects-per-scene choices, e.g. 1,2,3")
    g.add_argument("--classes", type=int, default=3)
    g.add_argument("--size", type=int, default=64, help="image width and height")
    g.add_argument("--noise", type=float, default=0.05)
    g.add_argument("--spec", help="dataset spec JSON; overrides the flags above")
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train the toy detector")
    t.add_argument("--data", help="dataset JSON lines")
    t.add_argument("--config", help="experiment config JSON (replaces the training flags)")
    t.add_argument("--loss", choices=["free_anchor", "baseline_iou"])
    t.add_argument("--out", default="runs/train")
    t.add_argument("--iterations", type=int, default=2000)
    t.add_argument("--batch-size", type=int, default=8)
    t.add_argument("--lr", type=float, default=0.01)
    t.add_argument("--momentum", type=float, default=0.0)
    t.add_argument("--milestones", type=_ints, default=(1200, 1600))
    t.add_argument("--hidden", type=_ints, default=(32,))
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--n", type=int, default=50, help="anchor bag size")
    t.add_argument("--t", type=float, default=0.6, help="background IoU threshold")
    t.add_argument("--alpha", type=float, default=0.5)
    t.add_argument("--gamma", type=float, default=2.0)
    t.add_argument("--beta", type=float, default=0.75)
    t.add_argument("--log-every", type=int, default=10)
    t.add_argument("--snapshot-every", type=int, default=0, help="write ckpt_XXXXXX.json every k iterations")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint: AP, NR, breakdowns")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", default="runs/eval")
    e.add_argument("--nms-threshold", type=float, default=0.5)
    e.add_argument("--no-figures", action="store_true")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of the loss gradient through the head")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--instances", type=int, default=100)
    c.add_argument("--perturb", type=float, default=1e-6, help="central-difference step")
    c.add_argument("--loss", choices=["free_anchor", "baseline_iou"], default="free_anchor")
    c.add_argument("--n", type=int, default=10)
    c.add_argument("--t", type=float, default=0.3)
    c.add_argument("--tolerance", type=float)
    c.add_argument("--json", help="write per-instance errors here")
    c.add_argument("--corrupt", type=float, default=0.0, help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_gradcheck)

    m = sub.add_parser("trace-matching", help="per-anchor confidence and match probability across snapshots")
    m.add_argument("--checkpoints", nargs="+", required=True)
    m.add_argument("--data", required=True)
    m.add_argument("--scene-id", type=int, required=True)
    m.add_argument("--out", default="runs/trace.csv")
    m.add_argument("--n", type=int, help="bag size (default: from the checkpoint)")
    m.add_argument("--no-figures", action="store_true")
    m.set_defaults(func=cmd_trace_matching)

    x = sub.add_parser("compare", help="train both losses on identical data over several seeds")
    src = x.add_mutually_exclusive_group()
    src.add_argument("--preset", choices=["slender", "crowded"], default="slender")
    src.add_argument("--config", help="experiment config JSON")
    x.add_argument("--seeds", type=_ints, default=(0, 1, 2, 3, 4))
    x.add_argument("--iterations", type=int)
    x.add_argument("--out", default="runs/compare")
    x.add_argument("--no-figures", action="store_true")
    x.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
