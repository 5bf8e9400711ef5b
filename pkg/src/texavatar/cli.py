"""texavatar command line."""
from __future__ import annotations

import argparse
import csv
import io
import sys
import time
from pathlib import Path

from . import imageio

# exit codes, one per error class
EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_MISSING_FILE = 3
EXIT_BAD_INPUT = 4
EXIT_NUMERIC = 5
EXIT_GEOMETRY = 6
EXIT_UNKNOWN_PRESET = 7


def _int_list(text):
    try:
        return [int(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of integers, got {text!r}")


def _stem(path):
    path = Path(path)
    return path.with_suffix("") if path.suffix.lower() in (".pfm", ".png") else path


def cmd_gen_scene(args):
    from .synth import gen_scene
    t0 = time.perf_counter()
    scene = gen_scene(args.preset, args.seed, args.out, image_size=args.image_size)
    print(f"wrote {scene.frame_count} frames x {len(scene.cameras)} cameras to {args.out} "
          f"in {time.perf_counter() - t0:.1f} s")
    return EXIT_OK


def cmd_render(args):
    from .pipeline import load_model, render_view
    from .synth import Scene
    scene = Scene.load(args.scene, with_images=True)
    model = load_model(scene, args.params)
    out = render_view(scene, model, args.frame, args.camera)
    stem = _stem(args.out)
    stem.parent.mkdir(parents=True, exist_ok=True)
    imageio.save_image(stem, out.rgb)
    print(f"wrote {stem}.pfm and {stem}.png")
    return EXIT_OK


def cmd_fit(args):
    from .fit import FitConfig, fit
    from .synth import Scene
    config = FitConfig.load(args.config) if args.config else FitConfig()
    if args.iterations is not None:
        config = FitConfig.from_dict({**config.to_dict(), "iterations": args.iterations,
                                      "dense_phase_iterations": min(config.dense_phase_iterations, args.iterations)})
    scene = Scene.load(args.scene)

    def progress(row):
        if args.verbose or row["psnr_holdout"] != "":
            held = "" if row["psnr_holdout"] == "" else f"  holdout {row['psnr_holdout']:.2f} dB"
            print(f"iter {row['iteration']:5d}  loss {row['total']:.6f}{held}", flush=True)

    result = fit(scene, config, out_dir=args.out, progress=progress)
    print(f"wrote {Path(args.out) / 'decoder.bin'} and metrics.csv ({len(result.metrics)} iterations)")
    return EXIT_OK


def cmd_gradcheck(args):
    from . import gradcheck
    t0 = time.perf_counter()
    passed, worst = gradcheck.run(args.scale, seeds=args.seeds, tol=args.tol, decoder_tol=args.decoder_tol)
    for key in sorted(worst):
        tol = args.tol if key.startswith("render.") else args.decoder_tol
        print(f"{key:28s} worst rel. err {worst[key]:.3e}  (tol {tol:g})  {'ok' if worst[key] <= tol else 'FAIL'}")
    print(f"{'PASS' if passed else 'FAIL'}: {args.seeds} {args.scale} scenes in {time.perf_counter() - t0:.1f} s")
    return EXIT_OK if passed else EXIT_CHECK_FAILED


def cmd_unwrap(args):
    from .atlas import unwrap_views
    from .skinning import pose_mesh
    from .synth import Scene
    scene = Scene.load(args.scene)
    if not 0 <= args.frame < scene.frame_count:
        raise IndexError(f"frame {args.frame} out of range (scene has {scene.frame_count})")
    cams = args.cameras if args.cameras is not None else scene.training_cameras
    posed = pose_mesh(scene.skeleton, scene.poses[args.frame], scene.template)
    res = args.resolution or scene.manifest["unwrap_resolution"]
    tex = unwrap_views(posed, scene.template, [scene.cameras[c] for c in cams],
                       [scene.targets[args.frame, c] for c in cams], resolution=res)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    weight_path = tex.save(out)
    print(f"wrote {out} ({res} x {res}, weights in {weight_path.name})")
    return EXIT_OK


def cmd_eval(args):
    from .pipeline import evaluate, load_model, mean_psnr
    from .synth import Scene
    scene = Scene.load(args.scene)
    model = load_model(scene, args.params)
    cams = args.holdout_cameras if args.holdout_cameras is not None else scene.holdout_cameras
    rows = evaluate(scene, model, cams)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["frame", "camera", "psnr_db"])
    for r in rows:
        w.writerow([r["frame"], r["camera"], f"{r['psnr']:.4f}"])
    print(f"{'frame':>5} {'camera':>6} {'PSNR (dB)':>10}")
    for r in rows:
        print(f"{r['frame']:5d} {r['camera']:6d} {r['psnr']:10.3f}")
    print(f"{'mean':>12} {mean_psnr(rows):10.3f}")
    if args.csv:
        Path(args.csv).write_text(buf.getvalue())
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="texavatar", description="Texel-aligned volumetric primitive avatars.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scene", help="write a synthetic dataset")
    g.add_argument("--preset", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--image-size", type=int, default=None)
    g.set_defaults(func=cmd_gen_scene)

    r = sub.add_parser("render", help="render a parameter file at a frame and camera")
    r.add_argument("--scene", required=True)
    r.add_argument("--frame", type=int, required=True)
    r.add_argument("--camera", type=int, required=True)
    r.add_argument("--params", required=True)
    r.add_argument("--out", required=True, help="output stem; .pfm and .png are written")
    r.set_defaults(func=cmd_render)

    f = sub.add_parser("fit", help="fit the decoder to a scene")
    f.add_argument("--scene", required=True)
    f.add_argument("--config", default=None, help="FitConfig as JSON or TOML")
    f.add_argument("--out", required=True)
    f.add_argument("--iterations", type=int, default=None)
    f.add_argument("--verbose", action="store_true")
    f.set_defaults(func=cmd_fit)

    c = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    c.add_argument("--scale", choices=["micro", "small"], default="micro")
    c.add_argument("--tol", type=float, default=1e-4, help="tolerance for render parameters")
    c.add_argument("--decoder-tol", type=float, default=1e-3, help="tolerance for the loss through the decoder")
    c.add_argument("--seeds", type=int, default=20)
    c.set_defaults(func=cmd_gradcheck)

    u = sub.add_parser("unwrap", help="multi-view UV texture of a frame")
    u.add_argument("--scene", required=True)
    u.add_argument("--frame", type=int, required=True)
    u.add_argument("--out", required=True)
    u.add_argument("--resolution", type=int, default=None)
    u.add_argument("--cameras", type=_int_list, default=None)
    u.set_defaults(func=cmd_unwrap)

    e = sub.add_parser("eval", help="PSNR of a parameter file on held-out cameras")
    e.add_argument("--scene", required=True)
    e.add_argument("--params", required=True)
    e.add_argument("--holdout-cameras", type=_int_list, default=None)
    e.add_argument("--csv", default=None)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    from .atlas import EmptyAtlasError
    from .fit import NonFiniteLossError
    from .raymarch import NonFiniteFieldError
    from .skinning import DegenerateGeometryError
    from .synth import UnknownPresetError

    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING_FILE
    except UnknownPresetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNKNOWN_PRESET
    except (NonFiniteLossError, NonFiniteFieldError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DegenerateGeometryError, EmptyAtlasError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_GEOMETRY
    except (ValueError, IndexError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
