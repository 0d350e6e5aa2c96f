"""Command-line entry point: ``glonerf <command> [flags]``.

Every command exits 0 on success.  Failures print exactly one line to stderr,
``error: <kind>: <message>``, and exit 1 (runtime) or 2 (bad usage).
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

__all__ = ["main", "build_parser", "to_uint8", "write_png", "write_pgm16"]

DEPTH_SCALE = 10000.0  # PGM counts per scene unit


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def to_uint8(img) -> np.ndarray:
    """Clip to [0, 1], scale by 255, round half up."""
    return np.floor(np.clip(np.asarray(img, dtype=np.float64), 0, 1) * 255 + 0.5).astype(np.uint8)


def write_png(path, img):
    from .dataset import write_image

    write_image(path, to_uint8(img))


def write_pgm16(path, depth, scale=DEPTH_SCALE):
    """Binary 16-bit PGM, value = round(depth * scale) clipped to [0, 65535]."""
    d = np.nan_to_num(np.asarray(depth, dtype=np.float64), nan=0.0, posinf=0.0)
    v = np.clip(np.floor(d * scale + 0.5), 0, 65535).astype(">u2")
    h, w = v.shape
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode())
        fh.write(v.tobytes())


def _triple(text):
    try:
        parts = [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected yaw,pitch,distance, got {text!r}")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected yaw,pitch,distance, got {text!r}")
    return tuple(parts)


def _add_fit_flags(p, steps=1000):
    p.add_argument("--steps", type=int, default=steps, help="latent fitting steps")
    p.add_argument("--lr", type=float, default=1e-3, help="latent fitting learning rate")
    p.add_argument("--pixels", type=int, default=256, help="pixels per image per fitting step")
    p.add_argument("--lambda-mask", type=float, default=1.0)
    p.add_argument("--lambda-hard", type=float, default=0.1)


def _fit_settings(args):
    from .evaluate import FitSettings

    return FitSettings(args.steps, args.lr, args.pixels, args.lambda_mask, args.lambda_hard, args.seed)


def build_parser() -> argparse.ArgumentParser:
    from .train import TrainConfig

    parser = _Parser(prog="glonerf", allow_abbrev=False,
                     description="Latent-conditioned radiance fields from single-view corpora.")
    parser.add_argument("--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("make-synthetic", help="write an analytic synthetic corpus", allow_abbrev=False)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--count", type=int, default=100, help="number of objects K")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--family", choices=["sphere-pair", "box-and-sphere"], default="sphere-pair")
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--no-eval-split", action="store_true", help="skip the paired eval/ split")

    p = sub.add_parser("fit-cameras", help="fit per-image cameras from landmarks", allow_abbrev=False)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--canonical", help="canonical keypoints file (default: the dataset's)")
    p.add_argument("--focal", type=float, help="initial / fixed focal length in pixels")
    p.add_argument("--fit-focal", choices=["auto", "yes", "no"], default="auto",
                   help="free the focal length (auto: when >= 5 landmarks are valid)")
    p.add_argument("--refine-canonical", action="store_true",
                   help="co-optimise symmetric canonical keypoints over the corpus first")
    p.add_argument("--out", help="camera directory to write (default: DATA/cameras)")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train a model on a dataset", allow_abbrev=False)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="run directory for checkpoints and metrics.csv")
    p.add_argument("--config", help="flat key = value config file; flags override it")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--stop-at", type=int, help="stop after this many completed steps")
    for f in fields(TrainConfig):
        kind = {bool: "bool", int: int, float: float}.get(type(f.default), str)
        flag = "--" + f.name.replace("_", "-")
        if kind == "bool":
            p.add_argument(flag, choices=["true", "false"], dest=f.name, default=None)
        else:
            p.add_argument(flag, type=int if f.name == "skip" else kind, dest=f.name, default=None,
                           help=f"(default {f.default})")

    p = sub.add_parser("render", help="render an image from a checkpoint", allow_abbrev=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="PNG path; with --frames > 1 a {frame} pattern")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--index", type=int, help="latent table row")
    src.add_argument("--latent", help="latent file from fit or sample")
    src.add_argument("--truncation", type=float, help="draw a latent with this truncation")
    src.add_argument("--mean", action="store_true", help="use the latent-table mean")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data", help="dataset for --view cameras and the mean focal length")
    cam = p.add_mutually_exclusive_group(required=True)
    cam.add_argument("--view", type=int, help="camera of dataset image k")
    cam.add_argument("--orbit", type=_triple, help="yaw,pitch,distance (degrees, scene units)")
    p.add_argument("--yaw-end", type=float, help="turntable: last yaw (with --frames)")
    p.add_argument("--frames", type=int, default=1)
    p.add_argument("--size", type=int, default=64, help="orbit image size")
    p.add_argument("--focal", type=float, help="orbit focal length (default: dataset mean)")
    p.add_argument("--depth-out", help="16-bit PGM depth (ray parameter x 10000)")
    p.add_argument("--depth-bin", help="raw float32 depth")
    p.add_argument("--alpha-out", help="alpha PNG")

    p = sub.add_parser("fit", help="fit a latent to one image with the network frozen",
                       allow_abbrev=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--view", type=int, required=True, help="image index in the dataset")
    p.add_argument("--out", required=True, help="latent file to write")
    p.add_argument("--seed", type=int, default=0)
    _add_fit_flags(p)

    p = sub.add_parser("sample", help="draw latents from the fitted latent distribution",
                       allow_abbrev=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="latent file (a {i} pattern when --count > 1)")
    p.add_argument("--truncation", type=float, default=1.0)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("eval-recon", help="PSNR of training views with their own latents",
                       allow_abbrev=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="metrics CSV")
    p.add_argument("--limit", type=int, help="only the first N images")

    p = sub.add_parser("eval-depth", help="keypoint depth correlation", allow_abbrev=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--limit", type=int)
    p.add_argument("--latents", choices=["table", "fit"], default="table",
                   help="table rows (training images) or latents fitted per image")
    p.add_argument("--seed", type=int, default=0)
    _add_fit_flags(p)

    p = sub.add_parser("eval-novel-view", help="fit on query views, score at paired targets",
                       allow_abbrev=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="query views (one per object)")
    p.add_argument("--targets", help="target views of the same objects (default: DATA/eval)")
    p.add_argument("--out", required=True)
    p.add_argument("--limit", type=int)
    p.add_argument("--seed", type=int, default=0)
    _add_fit_flags(p)
    return parser


def _write_scores(path, column, scores, mean):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image", column])
        for s in scores:
            w.writerow([s.name, f"{s.value:.6f}"])
        w.writerow(["mean", f"{mean:.6f}"])


def _load_examples(path, limit=None):
    from .dataset import load_dataset

    ds = load_dataset(path)
    return ds, ds.examples[:limit] if limit else ds.examples


def cmd_make_synthetic(args):
    from .synthetic import SyntheticSceneSpec, generate_synthetic

    spec = SyntheticSceneSpec(family=args.family, image_size=args.image_size)
    out = generate_synthetic(args.out, args.count, args.seed, spec, eval_split=not args.no_eval_split)
    print(f"wrote {args.count} objects to {out}")


def cmd_fit_cameras(args):
    from .camera import CameraIntrinsics, fit_camera, fit_canonical_points
    from .dataset import (read_canonical, read_image, read_landmarks, read_manifest, write_camera,
                          write_canonical)

    root = Path(args.data)
    canon_path = Path(args.canonical) if args.canonical else root / "canonical_keypoints.txt"
    if not canon_path.exists():
        raise FileNotFoundError(f"canonical keypoints file {canon_path} not found")
    canonical = read_canonical(canon_path)
    stems = sorted(p.stem for p in (root / "images").glob("*.png"))
    if not stems:
        raise FileNotFoundError(f"{root}/images: no images")
    manifest = read_manifest(root / "manifest.txt") if (root / "manifest.txt").exists() else {}
    items = []
    for stem in stems:
        h, w = read_image(root / "images" / f"{stem}.png").shape[:2]
        lm = read_landmarks(root / "landmarks" / f"{stem}.txt")
        f0 = args.focal or manifest.get("focal") or 1.2 * max(w, h)
        items.append((stem, lm, CameraIntrinsics.centered(float(f0), w, h)))
    if args.refine_canonical:
        res = fit_canonical_points([lm for _, lm, _ in items], canonical, items[0][2])
        canonical = res.keypoints
        write_canonical(root / "canonical_keypoints.refined.txt", canonical)
    out_dir = Path(args.out) if args.out else root / "cameras"
    out_dir.mkdir(parents=True, exist_ok=True)
    rms = []
    for stem, lm, intr in items:
        free = {"yes": True, "no": False}.get(args.fit_focal, lm.num_valid >= 5)
        fit = fit_camera(lm, canonical, intr, fit_intrinsics=free)
        write_camera(out_dir / f"{stem}.txt", fit.extrinsics, fit.intrinsics)
        rms.append(fit.rms)
    print(f"fitted {len(rms)} cameras, mean rms {np.mean(rms):.6g} px, max rms {np.max(rms):.6g} px")


def cmd_train(args):
    from .train import TrainConfig, read_config_file, train

    values = read_config_file(args.config) if args.config else {}
    for f in fields(TrainConfig):
        v = getattr(args, f.name)
        if v is not None:
            values[f.name] = v
    config = TrainConfig.from_dict(values)
    ds, examples = _load_examples(args.data)
    log = logging.getLogger("glonerf.train")
    state = train(examples, config, args.out, resume=args.resume, stop_at=args.stop_at,
                  progress=lambda s, b: log.info("step %d loss %.6f", s, b.total))
    print(f"trained to step {state.step}; checkpoint {Path(args.out) / 'model.ckpt'}")


def _resolve_latent(args, model):
    from .checkpoint import load_latent
    from .latent import fit_distribution, sample_latent

    if args.index is not None:
        return model.latents.lookup(args.index)
    if args.latent:
        z = load_latent(args.latent)
        if z.size != model.latent_dim:
            raise ValueError(f"latent file has dimension {z.size}, model expects {model.latent_dim}")
        return z
    dist = fit_distribution(model.latents)
    if args.mean:
        return dist.mean
    return sample_latent(dist, args.truncation, np.random.default_rng(args.seed))


def _frame_path(pattern, i, n):
    if n == 1:
        return pattern
    if "{frame" in pattern:
        return pattern.format(frame=i)
    p = Path(pattern)
    return str(p.with_name(f"{p.stem}_{i:04d}{p.suffix}"))


def cmd_render(args):
    from .camera import CameraIntrinsics, orbit_extrinsics
    from .checkpoint import load_checkpoint

    model, _ = load_checkpoint(args.checkpoint)
    z = np.asarray(_resolve_latent(args, model), dtype=model.dtype)
    examples = _load_examples(args.data)[1] if args.data else None
    if args.view is not None:
        if examples is None:
            raise ValueError("--view needs --data")
        if not 0 <= args.view < len(examples):
            raise IndexError(f"view {args.view} out of range for {len(examples)} images")
        ex = examples[args.view]
        cams = [(ex.extrinsics, ex.intrinsics)]
    else:
        if args.frames < 1:
            raise ValueError("--frames must be >= 1")
        yaw0, pitch, dist = args.orbit
        yaws = np.linspace(yaw0, args.yaw_end if args.yaw_end is not None else yaw0, args.frames)
        if args.focal:
            focal = args.focal
        elif examples:
            focal = float(np.mean([e.intrinsics.focal for e in examples])) * args.size / examples[0].width
        else:
            focal = 1.2 * args.size
        intr = CameraIntrinsics.centered(focal, args.size, args.size)
        cams = [(orbit_extrinsics(y, pitch, dist), intr) for y in yaws]
    for i, (extr, intr) in enumerate(cams):
        color, depth, alpha = model.render_view(z, extr, intr)
        write_png(_frame_path(args.out, i, len(cams)), color)
        if args.depth_out:
            write_pgm16(_frame_path(args.depth_out, i, len(cams)), depth)
        if args.depth_bin:
            np.asarray(depth, dtype="<f4").tofile(_frame_path(args.depth_bin, i, len(cams)))
        if args.alpha_out:
            write_png(_frame_path(args.alpha_out, i, len(cams)), alpha)
    print(f"rendered {len(cams)} frame(s) to {args.out}")


def cmd_fit(args):
    from .checkpoint import load_checkpoint, save_latent
    from .evaluate import fit_query_latents

    model, _ = load_checkpoint(args.checkpoint)
    _, examples = _load_examples(args.data)
    if not 0 <= args.view < len(examples):
        raise IndexError(f"view {args.view} out of range for {len(examples)} images")
    z = fit_query_latents(model, [examples[args.view]], _fit_settings(args))[0]
    save_latent(args.out, z)
    print(f"wrote latent to {args.out}")


def cmd_sample(args):
    from .checkpoint import load_checkpoint, save_latent
    from .latent import fit_distribution, sample_latent

    model, _ = load_checkpoint(args.checkpoint)
    if args.count < 1:
        raise ValueError("--count must be >= 1")
    zs = sample_latent(fit_distribution(model.latents), args.truncation,
                       np.random.default_rng(args.seed), size=args.count)
    for i, z in enumerate(zs):
        path = args.out if args.count == 1 else (
            args.out.format(i=i) if "{i" in args.out else _frame_path(args.out, i, args.count))
        save_latent(path, z)
    print(f"wrote {args.count} latent(s)")


def cmd_eval_recon(args):
    from .checkpoint import load_checkpoint
    from .evaluate import eval_recon, mean_score

    model, _ = load_checkpoint(args.checkpoint)
    _, examples = _load_examples(args.data, args.limit)
    if max(ex.index for ex in examples) >= model.latents.num_rows:
        raise ValueError("dataset has more images than the checkpoint's latent table")
    scores = eval_recon(model, examples)
    m = mean_score(scores)
    _write_scores(args.out, "psnr", scores, m)
    print(f"mean_psnr {m:.6f}")


def cmd_eval_depth(args):
    from .checkpoint import load_checkpoint
    from .evaluate import eval_depth, fit_query_latents, mean_score

    model, _ = load_checkpoint(args.checkpoint)
    _, examples = _load_examples(args.data, args.limit)
    latents = fit_query_latents(model, examples, _fit_settings(args)) if args.latents == "fit" else None
    scores = eval_depth(model, examples, latents)
    m = mean_score(scores)
    _write_scores(args.out, "correlation", scores, m)
    print(f"mean_depth_correlation {m:.6f}")


def cmd_eval_novel_view(args):
    from .checkpoint import load_checkpoint
    from .evaluate import eval_novel_view, mean_score

    model, _ = load_checkpoint(args.checkpoint)
    _, queries = _load_examples(args.data, args.limit)
    _, targets = _load_examples(args.targets or Path(args.data) / "eval", args.limit)
    scores, _ = eval_novel_view(model, queries, targets, _fit_settings(args))
    m = mean_score(scores)
    _write_scores(args.out, "psnr", scores, m)
    print(f"mean_novel_view_psnr {m:.6f}")


COMMANDS = {
    "make-synthetic": cmd_make_synthetic,
    "fit-cameras": cmd_fit_cameras,
    "train": cmd_train,
    "render": cmd_render,
    "fit": cmd_fit,
    "sample": cmd_sample,
    "eval-recon": cmd_eval_recon,
    "eval-depth": cmd_eval_depth,
    "eval-novel-view": cmd_eval_novel_view,
}


def _one_line(text) -> str:
    return " ".join(str(text).split())


def _join_negative_values(argv):
    """``--orbit -30,0,3`` would read as a flag; rewrite it as ``--orbit=-30,0,3``."""
    out, i = [], 0
    while i < len(argv):
        a = argv[i]
        if a in _VALUE_FLAGS and i + 1 < len(argv) and argv[i + 1][:1] == "-" and \
                argv[i + 1][1:2].isdigit():
            out.append(f"{a}={argv[i + 1]}")
            i += 2
            continue
        out.append(a)
        i += 1
    return out


_VALUE_FLAGS = {"--orbit"}


def main(argv=None) -> int:
    argv = _join_negative_values(list(sys.argv[1:] if argv is None else argv))
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
    except UsageError as err:
        print(f"error: usage: {_one_line(err)}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except KeyboardInterrupt:
        print("error: interrupted: ", file=sys.stderr)
        return 130
    except Exception as err:  # every failure becomes one parsable line
        print(f"error: {type(err).__name__}: {_one_line(err)}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
