"""Command-line entry point: generate, train, render, eval, ablate.

Exit codes: 0 ok, 2 missing input, 3 corrupt artifact, 4 numerical failure.
"""

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from aquarender import config as cfg_mod
from aquarender import images, metrics, scene as scene_mod
from aquarender.field import CheckpointError, load_checkpoint, save_checkpoint
from aquarender.geometry import Camera
from aquarender.scene import SceneError, generate_dataset, load_dataset, load_scene
from aquarender.trainer import NumericalError, TrainConfig, render_view, train

EXIT_OK = 0
EXIT_MISSING = 2
EXIT_CORRUPT = 3
EXIT_NUMERICAL = 4

VARIANTS = (
    ("baseline", {"renderer": "baseline"}),
    ("single_surface", {"renderer": "single_surface"}),
    ("single_surface+rl", {"renderer": "single_surface", "robust.enabled": True}),
    ("single_surface+dgs", {"renderer": "single_surface", "dgs.enabled": True}),
    ("single_surface+rl+dgs",
     {"renderer": "single_surface", "robust.enabled": True, "dgs.enabled": True}),
)


def _resolve_config(args, extra=None):
    file_values = cfg_mod.load_config_file(args.config) if args.config else None
    overrides = dict(extra or {})
    if args.seed is not None:
        overrides["seed"] = args.seed
    threads = args.threads
    if threads is None and os.environ.get("AQUA_THREADS"):
        threads = int(os.environ["AQUA_THREADS"])
    if threads is not None:
        overrides["threads"] = threads
    return cfg_mod.resolve(file_values, overrides)


def _train_overrides(args):
    ov = {}
    if getattr(args, "renderer", None):
        ov["renderer"] = args.renderer
    for flag, key in (("eta", "renderer.eta"), ("base", "renderer.base"),
                      ("iterations", "train.iterations")):
        v = getattr(args, flag, None)
        if v is not None:
            ov[key] = v
    for flag, key in (("robust", "robust.enabled"), ("dgs", "dgs.enabled")):
        if getattr(args, flag, False):
            ov[key] = True
    return ov


def cmd_generate(args):
    spec = load_scene(args.scene)
    seed = args.seed if args.seed is not None else 0
    out = Path(args.out)
    generate_dataset(spec, out, seed=seed)
    print(f"[generate] wrote {spec.n_frames} frames to {out}")
    return EXIT_OK


def _frame_renderer(fld, dataset, tc):
    def render_frame(f):
        return render_view(fld, dataset.cameras[f], dataset.near, dataset.far,
                           tc.settings(), tc.n_coarse, tc.n_fine)
    return render_frame


def cmd_train(args):
    dataset = load_dataset(args.dataset)
    cfg = _resolve_config(args, _train_overrides(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tc = TrainConfig.from_run_config(cfg)
    fld, log = train(tc, dataset)
    cfg_mod.save_resolved(cfg, out / "config.json")
    log.write_csv(out / "train_log.csv")
    save_checkpoint(fld, out / "checkpoint.npz",
                    config={"run": cfg, "near": dataset.near, "far": dataset.far})
    print(f"[train] checkpoint written to {out / 'checkpoint.npz'}")
    return EXIT_OK


def _load_camera_spec(path):
    with open(path) as f:
        doc = json.load(f)
    if "rotation" in doc:
        return Camera.from_dict(doc), doc
    cam = Camera.look_at(
        doc["position"], doc["look_at"], up=doc.get("up", (0.0, 1.0, 0.0)),
        fov_deg=doc.get("fov_deg", 60.0), width=doc.get("width", 64),
        height=doc.get("height", 64),
    )
    return cam, doc


def cmd_render(args):
    fld, ck_cfg = load_checkpoint(args.checkpoint)
    camera, doc = _load_camera_spec(args.camera)
    run = ck_cfg.get("run", {})
    cfg = cfg_mod.resolve(overrides={k: v for k, v in run.items() if k in cfg_mod.DEFAULTS})
    tc = TrainConfig.from_run_config(cfg)
    near = doc.get("near", ck_cfg.get("near", 0.05))
    far = doc.get("far", ck_cfg.get("far", 4.0))
    grid = tuple(r + 1 for r in fld.resolution)
    if fld.density_params.shape != grid:
        raise CheckpointError("checkpoint parameter shapes are inconsistent")
    img = render_view(fld, camera, near, far, tc.settings(), tc.n_coarse, tc.n_fine)
    out = Path(args.out)
    if out.suffix.lower() == ".png":
        images.write_png(out, img)
    else:
        images.write_ppm(out, img)
    print(f"[render] {camera.width}x{camera.height} image written to {out}")
    return EXIT_OK


def cmd_eval(args):
    dataset = load_dataset(args.dataset)
    fld, ck_cfg = load_checkpoint(args.checkpoint)
    run = ck_cfg.get("run", {})
    cfg = cfg_mod.resolve(overrides={k: v for k, v in run.items() if k in cfg_mod.DEFAULTS})
    if args.renderer:
        cfg["renderer"] = args.renderer
    tc = TrainConfig.from_run_config(cfg)
    report = metrics.evaluate_run(
        _frame_renderer(fld, dataset, tc), dataset, cfg["renderer"],
        config=cfg, split=args.split, csv_path=args.out,
    )
    s = report.summary
    print(f"[eval] {cfg['renderer']}: psnr_full {s['psnr_full']:.3f} "
          f"psnr_static {s['psnr_static']:.3f} ssim_full {s['ssim_full']:.4f}")
    return EXIT_OK


def cmd_ablate(args):
    dataset = load_dataset(args.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base_cfg = _resolve_config(args)
    fields = ["variant", "frame_id", "renderer", "psnr_full", "psnr_static",
              "ssim_full", "ssim_static"]
    rows = []
    for name, overrides in VARIANTS:
        cfg = dict(base_cfg)
        cfg.update(overrides)
        try:
            tc = TrainConfig.from_run_config(cfg)
            fld, log = train(tc, dataset)
            vdir = out / name.replace("+", "_")
            vdir.mkdir(exist_ok=True)
            save_checkpoint(fld, vdir / "checkpoint.npz",
                            config={"run": cfg, "near": dataset.near, "far": dataset.far})
            cfg_mod.save_resolved(cfg, vdir / "config.json")
            report = metrics.evaluate_run(
                _frame_renderer(fld, dataset, tc), dataset, cfg["renderer"], config=cfg
            )
            for row in report.rows + [report.summary]:
                rows.append({"variant": name, **row})
            print(f"[ablate] {name}: psnr_static {report.summary['psnr_static']:.3f} dB")
        except Exception as e:  # record and continue with the other variants
            rows.append({
                "variant": name, "frame_id": "mean", "renderer": cfg.get("renderer", ""),
                "psnr_full": "nan", "psnr_static": "nan",
                "ssim_full": "nan", "ssim_static": "nan",
            })
            print(f"[ablate] {name} failed: {e}", file=sys.stderr)
    csv_path = out / "ablation.csv"
    with open(csv_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({
                k: f"{v:.6f}" if isinstance(v, float) and np.isfinite(v) else v
                for k, v in ((k, row[k]) for k in fields)
            })
    print(f"[ablate] summary written to {csv_path}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="aqua", description=__doc__)
    p.add_argument("--seed", type=int, default=None, help="override the run seed")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (or env AQUA_THREADS)")
    p.add_argument("--config", default=None, help="JSON config file with flat dotted keys")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render a synthetic dataset from a scene file")
    g.add_argument("scene", help="scene JSON file or bundled preset name")
    g.add_argument("out", help="output dataset directory")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="fit a radiance field to a dataset")
    t.add_argument("dataset")
    t.add_argument("out")
    t.add_argument("--renderer", choices=["baseline", "single_surface"], default=None)
    t.add_argument("--eta", type=float, default=None)
    t.add_argument("--base", type=float, default=None)
    t.add_argument("--iterations", type=int, default=None)
    t.add_argument("--robust", action="store_true", help="enable the robust loss")
    t.add_argument("--dgs", action="store_true", help="enable depth-based gradient scaling")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render a view from a checkpoint")
    r.add_argument("checkpoint")
    r.add_argument("camera", help="camera spec JSON")
    r.add_argument("out", help="output image (.ppm or .png)")
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="evaluate a checkpoint against a dataset split")
    e.add_argument("checkpoint")
    e.add_argument("dataset")
    e.add_argument("out", help="output metrics CSV")
    e.add_argument("--split", default="test", choices=["train", "val", "test"])
    e.add_argument("--renderer", choices=["baseline", "single_surface"], default=None)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and compare the renderer/loss variants")
    a.add_argument("dataset")
    a.add_argument("out")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as e:
        print(f"error: missing input: {e}", file=sys.stderr)
        return EXIT_MISSING
    except (CheckpointError, SceneError, cfg_mod.ConfigError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CORRUPT
    except NumericalError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
