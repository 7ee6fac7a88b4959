"""Command-line surface for the reconstruction pipeline.

Subcommands: gen-data, select, fit, train, reconstruct, texture, eval,
gradcheck. All randomness derives from --seed; outputs are deterministic
given identical inputs, seed, and config (wall-clock timings are printed to
stderr, never written into artifacts).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .bodymodel import BodyLoadError, BodyParams, load_body
from .config import ConfigError, RunConfig
from .gradsuite import run_grad_suite
from .mcubes import marching_cubes
from .mesh import load_obj, save_obj, save_ply
from .metrics import chamfer, p2s
from .pipeline import infer_texture, load_model, reconstruct_frame
from .registration import register_body_to_scan
from .sequence import (load_selection_cache, precompute_selections, save_selection_cache)
from .synthetic import generate_synthetic_sequence, load_dataset, save_dataset
from .training import TrainConfig, TrainingDiverged, train

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING = 4


def _log(msg: str):
    print(msg, file=sys.stderr)


def _load_run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else \
        RunConfig.for_preset(getattr(args, "preset", "desk"))
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def cmd_gen_data(args) -> int:
    ds = generate_synthetic_sequence(
        frames=args.frames, image_size=args.size, pose_script=args.pose_script,
        seed=args.seed, cloth=args.cloth, cloth_offset=args.cloth_offset,
        perturb_rad=args.perturb, color_mode=args.colors, swing=args.swing)
    save_dataset(ds, args.out)
    _log(f"wrote {args.frames} frames to {args.out}")
    return EXIT_OK


def cmd_select(args) -> int:
    ds = load_dataset(args.data)
    if args.target is not None:
        selections = {args.target: precompute_selections(ds.store, args.n)[args.target]}
    else:
        selections = precompute_selections(ds.store, args.n)
    out = Path(args.out) if args.out else Path(args.data) / "selection.json"
    save_selection_cache(selections, out)
    _log(f"selection cache -> {out}")
    return EXIT_OK


def cmd_fit(args) -> int:
    body = load_body(args.body)
    scan = load_obj(args.scan)
    if args.init:
        init_doc = json.loads(Path(args.init).read_text())
        init = BodyParams(np.asarray(init_doc["theta"]),
                          np.asarray(init_doc.get("translation", [0, 0, 0])),
                          np.asarray(init_doc.get("beta", [0.0] * body.n_shape)))
    else:
        init = BodyParams.zero(body)
    params, report = register_body_to_scan(
        body, scan, init, steps=args.steps, lr=args.lr, samples=args.samples,
        seed=args.seed)
    doc = {"theta": params.theta.tolist(),
           "translation": params.global_translation.tolist(),
           "beta": params.beta.tolist(),
           "report": report.to_dict()}
    Path(args.out).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    _log(f"fit residual {report.final_residual:.5f} (converged={report.converged})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    tc = cfg.train
    tc.seed = args.seed if args.seed is not None else tc.seed
    if args.steps is not None:
        tc.steps = args.steps
    if args.lr is not None:
        tc.lr = args.lr
    if args.noise_std is not None:
        tc.noise_std = args.noise_std
    if args.no_shift:
        tc.use_shift = False
    if args.texture_steps is not None:
        tc.texture_steps = args.texture_steps
    if args.fusion:
        cfg.mft.fusion = args.fusion
    ds = load_dataset(args.data)
    ckpt = train(tc, ds, args.out, mft=cfg.mft)
    _log(f"checkpoint -> {ckpt}")
    return EXIT_OK


def _save_mesh(mesh, stem: Path, fmt: str):
    if fmt in ("obj", "both"):
        save_obj(mesh, stem.with_suffix(".obj"))
    if fmt in ("ply", "both"):
        save_ply(mesh, stem.with_suffix(".ply"))


def cmd_reconstruct(args) -> int:
    cfg = _load_run_config(args)
    ds = load_dataset(args.data)
    model, _ = load_model(args.ckpt)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    refs_cache = load_selection_cache(args.selection) if args.selection else None
    targets = range(len(ds.store)) if args.all else [args.frame]
    for t in targets:
        refs = refs_cache.get(t) if refs_cache else None
        mesh, report = reconstruct_frame(
            model, ds.body, ds.store, ds.images, t, args.resolution,
            refs=refs, n_refs=args.refs,
            shift_correct=not args.no_shift_correct,
            shift_refetch=cfg.shift_refetch)
        stem = out_dir / f"frame_{t:03d}"
        _save_mesh(mesh, stem, args.format)
        doc = report.to_dict()
        timings = doc.pop("timings")
        stem.with_name(stem.name + "_report.json").write_text(
            json.dumps(doc, indent=1, sort_keys=True) + "\n")
        _log(f"frame {t}: {mesh.n_vertices} verts, {mesh.n_faces} faces "
             f"({', '.join(f'{k} {v:.2f}s' for k, v in timings.items())})")
    return EXIT_OK


def cmd_texture(args) -> int:
    ds = load_dataset(args.data)
    model, _ = load_model(args.ckpt)
    if args.mesh:
        mesh = load_obj(args.mesh)
    else:
        mesh, _ = reconstruct_frame(model, ds.body, ds.store, ds.images,
                                    args.frame, args.resolution, n_refs=args.refs)
    colored = infer_texture(model, mesh, ds.body, ds.store, ds.images,
                            args.frame, n_refs=args.refs)
    save_obj(colored, args.out)
    _log(f"textured mesh -> {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.sweep_refs:
        return _eval_sweep(args)
    pred = load_obj(args.pred)
    gt = load_obj(args.gt)
    report = {
        "chamfer_cm": chamfer(pred, gt, samples=args.samples, seed=args.seed),
        "p2s_cm": p2s(pred, gt, samples=args.samples, seed=args.seed),
        "samples": args.samples,
        "seed": args.seed,
    }
    text = json.dumps(report, indent=1, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return EXIT_OK


def _eval_sweep(args) -> int:
    """Chamfer versus reference-frame count, written as CSV."""
    ds = load_dataset(args.data)
    model, _ = load_model(args.ckpt)
    counts = [int(x) for x in args.sweep_refs.split(",")]
    rows = ["n_refs,chamfer_cm,p2s_cm"]
    for n in counts:
        mesh, _ = reconstruct_frame(model, ds.body, ds.store, ds.images,
                                    args.frame, args.resolution, n_refs=n)
        gt = ds.gt_meshes[args.frame]
        if mesh.is_empty():
            rows.append(f"{n},nan,nan")
            _log(f"n={n}: empty reconstruction")
            continue
        c = chamfer(mesh, gt, samples=args.samples, seed=args.seed)
        s = p2s(mesh, gt, samples=args.samples, seed=args.seed)
        rows.append(f"{n},{c:.6f},{s:.6f}")
        _log(f"n={n}: chamfer {c:.3f} cm, p2s {s:.3f} cm")
    out = Path(args.out or "frame_curve.csv")
    out.write_text("\n".join(rows) + "\n")
    _log(f"curve -> {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    result = run_grad_suite(seeds=args.seeds, tolerance=args.tolerance,
                            progress=_log if args.verbose else None)
    doc = result.to_dict()
    text = json.dumps(doc, indent=1, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return EXIT_OK if result.passed else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mfrecon",
        description="Multi-frame guided implicit reconstruction of articulated bodies.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic sequence dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--size", type=int, default=64, help="image width/height in pixels")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--pose-script", choices=["orbit", "wave"], default="orbit")
    p.add_argument("--swing", type=float, default=0.25, help="limb swing amplitude (rad)")
    p.add_argument("--cloth", action="store_true", help="wrap a displaced outer shell")
    p.add_argument("--cloth-offset", type=float, default=0.04)
    p.add_argument("--perturb", type=float, default=0.0,
                   help="per-joint pose perturbation of the stored tracking (rad)")
    p.add_argument("--colors", choices=["parts", "red"], default="parts")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("select", help="precompute reference frames for each target")
    p.add_argument("--data", required=True)
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--target", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=1)
    p.set_defaults(fn=cmd_select)

    p = sub.add_parser("fit", help="register the body model to a scan mesh")
    p.add_argument("--body", required=True)
    p.add_argument("--scan", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--init", default=None, help="JSON with initial theta/translation/beta")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.03)
    p.add_argument("--samples", type=int, default=2000)
    p.add_argument("--seed", type=int, default=1)
    p.set_defaults(fn=cmd_fit)

    p = sub.add_parser("train", help="train the reconstruction network")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--noise-std", type=float, default=None)
    p.add_argument("--no-shift", action="store_true", help="disable the warp-refinement head")
    p.add_argument("--fusion", choices=["mft", "avgpool"], default=None)
    p.add_argument("--texture-steps", type=int, default=None)
    p.add_argument("--preset", choices=["desk", "full"], default="desk")
    p.add_argument("--config", default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("reconstruct", help="extract meshes for one or all frames")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--all", action="store_true")
    p.add_argument("--resolution", type=int, default=128)
    p.add_argument("--refs", type=int, default=4)
    p.add_argument("--selection", default=None, help="selection cache JSON")
    p.add_argument("--no-shift-correct", action="store_true")
    p.add_argument("--format", choices=["obj", "ply", "both"], default="obj")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--preset", choices=["desk", "full"], default="desk")
    p.add_argument("--config", default=None)
    p.set_defaults(fn=cmd_reconstruct)

    p = sub.add_parser("texture", help="predict vertex colors for a reconstructed mesh")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--mesh", default=None, help="mesh OBJ (reconstructed if omitted)")
    p.add_argument("--resolution", type=int, default=96)
    p.add_argument("--refs", type=int, default=4)
    p.add_argument("--seed", type=int, default=1)
    p.set_defaults(fn=cmd_texture)

    p = sub.add_parser("eval", help="chamfer/P2S metrics, or a reference-count sweep")
    p.add_argument("--pred", default=None)
    p.add_argument("--gt", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--resolution", type=int, default=96)
    p.add_argument("--sweep-refs", default=None, help="comma list, e.g. 1,2,4,8")
    p.add_argument("--samples", type=int, default=10000)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification suite")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--verbose", action="store_true")
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=1)
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.fn is cmd_eval and not args.sweep_refs and (not args.pred or not args.gt):
        parser.error("eval needs --pred/--gt, or --data/--ckpt with --sweep-refs")
    if args.fn is cmd_eval and args.sweep_refs and (not args.data or not args.ckpt):
        parser.error("eval --sweep-refs needs --data and --ckpt")
    try:
        return args.fn(args)
    except ConfigError as exc:
        _log(f"config error: {exc}")
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        _log(f"missing file: {exc}")
        return EXIT_MISSING
    except BodyLoadError as exc:
        _log(f"body file error: {exc}")
        return EXIT_MISSING if "not found" in str(exc) else EXIT_RUNTIME
    except (TrainingDiverged, ValueError, np.linalg.LinAlgError) as exc:
        _log(f"error: {exc}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
