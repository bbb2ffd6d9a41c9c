"""Command-line entry point.

Exit codes: 0 success, 2 usage or configuration error, 3 data or
checkpoint-compatibility error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

logger = logging.getLogger("priordepth")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _size(text: str) -> tuple[int, int]:
    try:
        w, h = (int(t) for t in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WxH, got {text!r}") from None
    if w < 1 or h < 1:
        raise argparse.ArgumentTypeError("size must be positive")
    return w, h


def _caps(text: str) -> list[float]:
    try:
        return [math.inf if t.strip().lower() in ("inf", "full") else float(t) for t in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated caps, got {text!r}") from None


def _grid(text: str) -> tuple[int, int]:
    try:
        r, c = (int(t) for t in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected RxC, got {text!r}") from None
    return r, c


def _range(text: str) -> tuple[float, float]:
    lo, hi = (float(t) for t in text.split(","))
    return lo, hi


# ----------------------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    from .data import generate_synthetic, write_dataset

    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise UsageError(f"cannot write to {out}: {exc}") from None
    w, h = args.size
    samples = generate_synthetic(args.seed, args.count, w, h, args.priors,
                                 scale_range=args.scale_range, sequence_shift=args.sequence_shift)
    write_dataset(samples, out)
    print(f"wrote {len(samples)} samples ({w}x{h}, {args.priors} priors) to {out}")
    return EXIT_OK


def cmd_extract_priors(args) -> int:
    from .data import RGB_EXTENSIONS, read_depth, read_rgb
    from .priors import ExtractionConfig, SparsePrior, extract_prior, write_prior_csv

    rgb_dir, depth_dir, out = Path(args.rgb_dir), Path(args.depth_dir), Path(args.out)
    frames = sorted(p for p in rgb_dir.glob("*") if p.suffix.lower() in RGB_EXTENSIONS)
    if not frames:
        raise DataError(f"no images in {rgb_dir}")
    out.mkdir(parents=True, exist_ok=True)
    cfg = ExtractionConfig(args.grid[0], args.grid[1], args.per_cell, args.ransac_iters, args.tol, args.seed)
    ext = ".png" if args.depth_png_mm else ".tif"
    total = 0
    for t, frame in enumerate(frames):
        stem = frame.stem
        depth_path = depth_dir / f"{stem}{ext}"
        if not depth_path.exists():
            raise DataError(f"missing depth {depth_path}")
        if len(frames) == 1:
            logger.warning("%s: no neighbouring frame, writing empty prior", stem)
            prior = SparsePrior(source_image_id=stem)
        else:
            # frame t pairs with t+1; the last frame pairs with its predecessor
            other = frames[t + 1] if t + 1 < len(frames) else frames[t - 1]
            depth = read_depth(depth_path)
            valid = np.isfinite(depth) & (depth > 0)
            prior = extract_prior(read_rgb(frame), read_rgb(other), depth, valid, cfg, stem)
        write_prior_csv(prior, out / f"{stem}.csv")
        total += len(prior)
    print(f"extracted {total} priors over {len(frames)} frames into {out}")
    return EXIT_OK


def cmd_densify(args) -> int:
    from .densify import prior_maps, save_debug_images
    from .priors import read_prior_csv

    w, h = args.size
    prior = read_prior_csv(args.prior)
    prior.validate(w, h)
    p1, p2 = save_debug_images(prior_maps(prior, w, h, args.sigma), args.out)
    print(f"wrote {p1} and {p2}")
    return EXIT_OK


def _run_config(args):
    from .config import ConfigError, load_run_config

    overrides = {"preset": args.preset, "data": args.data, "eval_data": args.eval_data, "seed": args.seed,
                 "epochs": args.epochs, "max_steps": args.max_steps, "batch_size": args.batch_size,
                 "base_lr": args.lr}
    try:
        return load_run_config(args.config, overrides)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None


def _config_mismatch(a: dict, b: dict, keys=None) -> list[str]:
    keys = keys or sorted(set(a) | set(b))
    return [f"{k} ({a.get(k)!r} vs {b.get(k)!r})" for k in keys if a.get(k) != b.get(k)]


def _load_samples(root, size, resize: bool):
    from .data import load_dataset

    descs = load_dataset(root, size if resize else None)
    samples = [d.load() for d in descs]
    w, h = size
    bad = [s.id for s in samples if (s.width, s.height) != (w, h)]
    if bad:
        s = next(x for x in samples if x.id == bad[0])
        raise DataError("checkpoint/data mismatch in config keys input_width, input_height: "
                        f"network expects {w}x{h}, {bad[0]} is {s.width}x{s.height}")
    return samples


def cmd_train(args) -> int:
    from .config import save_run_config
    from .training import fit, load_state, save_state

    cfg = _run_config(args)
    if cfg.data is None:
        raise UsageError("no training data: pass --data or set 'data' in the config")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.train.checkpoint_dir is None:
        cfg.train.checkpoint_dir = str(out / "checkpoints")
    size = (cfg.network.input_width, cfg.network.input_height)
    train_set = _load_samples(cfg.data, size, resize=True)
    eval_set = _load_samples(cfg.eval_data, size, resize=True) if cfg.eval_data else None
    state = None
    if args.resume:
        state, payload = load_state(args.resume, cfg.train)
        bad = _config_mismatch(payload["network_config"], cfg.network.to_dict())
        if bad:
            raise DataError(f"resume checkpoint incompatible, mismatched config keys: {', '.join(bad)}")
    save_run_config(cfg, out / "config.json")
    state, log = fit(train_set, eval_set, cfg.network, cfg.loss, cfg.train, cfg.augment,
                     state=state, log_path=out / "train_log.csv")
    save_state(out / "model.pt", state, cfg.network, cfg.loss, cfg.train, cfg.augment)
    if log.rows:
        print(f"trained {state.step} steps / {state.epoch} epochs: "
              f"loss {log.rows[0]['total']:.4f} -> {log.rows[-1]['total']:.4f}")
    print(f"model written to {out / 'model.pt'}")
    return EXIT_OK


def _load_model(path):
    from .model import load_checkpoint

    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None
    except (KeyError, ValueError, RuntimeError) as exc:
        raise DataError(f"cannot load checkpoint {path}: {exc}") from None


def cmd_eval(args) -> int:
    from .evaluation import write_report_csv
    from .training import evaluate_model

    model, _ = _load_model(args.checkpoint)
    cfg = model.cfg
    samples = _load_samples(args.data, (cfg.input_width, cfg.input_height), args.resize)
    reports = evaluate_model(model, samples, args.priors, args.caps, seed=args.seed)
    out = Path(args.out) if args.out else Path(args.checkpoint).with_suffix(f".eval_p{args.priors}.csv")
    summary = write_report_csv(reports, out)
    print(f"priors={args.priors}  images={len(samples)}  report={out}")
    print(f"{'cap':>6} {'rmse_lin':>9} {'rmse_log':>9} {'rmse_silog':>10} {'mare':>7} {'n_pixels':>9}")
    for r in summary:
        cap = "inf" if math.isinf(r.range_cap) else f"{r.range_cap:g}"
        print(f"{cap:>6} {r.rmse_lin:9.4f} {r.rmse_log:9.4f} {r.rmse_silog:10.4f} {r.mare:7.4f} {r.n_pixels:9d}")
    return EXIT_OK


def save_colormap(depth: np.ndarray, path: str | Path, vmin: float | None = None,
                  vmax: float | None = None) -> None:
    """Viridis rendering of a depth map with a fixed per-image range."""
    import cv2
    from matplotlib import colormaps

    lo = float(np.nanmin(depth)) if vmin is None else vmin
    hi = float(np.nanmax(depth)) if vmax is None else vmax
    norm = np.clip((depth - lo) / max(hi - lo, 1e-12), 0.0, 1.0)
    rgba = colormaps["viridis"](norm)
    bgr = (rgba[..., 2::-1] * 255).round().astype(np.uint8)
    cv2.imwrite(str(path), bgr)


def cmd_infer(args) -> int:
    import cv2
    import torch

    from .data import read_depth, read_rgb, write_depth
    from .densify import prior_maps
    from .priors import SparsePrior, read_prior_csv

    model, _ = _load_model(args.checkpoint)
    cfg = model.cfg
    w, h = cfg.input_width, cfg.input_height
    try:
        image = read_rgb(args.rgb)
    except OSError as exc:
        raise DataError(str(exc)) from None
    h0, w0 = image.shape[1:]
    if (w0, h0) != (w, h):
        image = np.moveaxis(cv2.resize(np.moveaxis(image, 0, -1), (w, h), interpolation=cv2.INTER_AREA), -1, 0)
    prior = read_prior_csv(args.prior) if args.prior else SparsePrior()
    if len(prior):
        pts = prior.points.copy()
        pts[:, 0] = np.clip((pts[:, 0] + 0.5) * w / w0 - 0.5, 0, w - 1)
        pts[:, 1] = np.clip((pts[:, 1] + 0.5) * h / h0 - 0.5, 0, h - 1)
        prior = SparsePrior(pts)
    dtype = next(model.parameters()).dtype
    maps = torch.from_numpy(prior_maps(prior, w, h, cfg.sigma).stack()).to(dtype)[None]
    model.eval()
    with torch.no_grad():
        depth = model(torch.from_numpy(image).to(dtype)[None], maps).depth[0, 0].double().numpy()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_depth(depth, out)
    vmin = vmax = None
    if args.gt:
        gt = read_depth(args.gt)
        valid = gt[np.isfinite(gt) & (gt > 0)]
        if valid.size:
            vmin, vmax = float(valid.min()), float(valid.max())
    viz = out.with_suffix(".png") if out.suffix.lower() != ".png" else out.with_name(out.stem + "_viz.png")
    save_colormap(depth, viz, vmin, vmax)
    print(f"depth {w}x{h} written to {out}, visualization {viz}")
    return EXIT_OK


def cmd_bench(args) -> int:
    import torch

    from .model import NetworkConfig, PriorDepthNet

    torch.set_num_threads(1)
    if args.checkpoint:
        model, _ = _load_model(args.checkpoint)
    else:
        torch.manual_seed(args.seed)
        cfg = NetworkConfig.toy() if args.preset == "toy" else NetworkConfig()
        model = PriorDepthNet(cfg)
    cfg = model.cfg
    model.eval()
    dtype = next(model.parameters()).dtype
    image = torch.rand(1, 3, cfg.input_height, cfg.input_width, dtype=dtype)
    prior = torch.rand(1, 2, cfg.input_height, cfg.input_width, dtype=dtype)
    times = []
    with torch.no_grad():
        model(image, prior)  # warm-up
        for _ in range(args.iters):
            t0 = time.perf_counter()
            model(image, prior)
            times.append(time.perf_counter() - t0)
    ms = np.array(times) * 1000.0
    print(f"forward {cfg.input_width}x{cfg.input_height}, 1 thread, {args.iters} iters: "
          f"mean {ms.mean():.2f} ms, p95 {np.percentile(ms, 95):.2f} ms, {1000.0 / ms.mean():.1f} FPS")
    return EXIT_OK


def cmd_config(args) -> int:
    from .config import KEY_DOCS, default_flat

    flat = default_flat(args.preset)
    if args.docs:
        for k in sorted(flat):
            print(f"{k:20s} {json.dumps(flat[k]):>24s}  {KEY_DOCS[k]}")
    else:
        print(json.dumps(flat, indent=2, sort_keys=True))
    return EXIT_OK


# ----------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="priordepth", description="Monocular metric depth with sparse priors")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="materialize a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=_positive_int, default=8)
    s.add_argument("--size", type=_size, default=(64, 48), help="WxH")
    s.add_argument("--priors", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--scale-range", type=_range, default=(1.0, 1.0), help="lo,hi global depth scale")
    s.add_argument("--sequence-shift", type=int, default=0,
                   help="make consecutive frames crops of one scene shifted by N px")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("extract-priors", help="sparse priors from consecutive frame pairs")
    s.add_argument("--rgb-dir", required=True)
    s.add_argument("--depth-dir", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--grid", type=_grid, default=(8, 8), help="RxC patches")
    s.add_argument("--per-cell", type=_positive_int, default=8)
    s.add_argument("--ransac-iters", type=_positive_int, default=2000)
    s.add_argument("--tol", type=float, default=2.0, help="epipolar tolerance in px")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--depth-png-mm", action="store_true")
    s.set_defaults(func=cmd_extract_priors)

    s = sub.add_parser("densify", help="debug dump of the dense prior maps")
    s.add_argument("--prior", required=True)
    s.add_argument("--size", type=_size, required=True)
    s.add_argument("--sigma", type=float, default=10.0)
    s.add_argument("--out", required=True, help="output stem")
    s.set_defaults(func=cmd_densify)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--config")
    s.add_argument("--preset", choices=("default", "toy"))
    s.add_argument("--data")
    s.add_argument("--eval-data")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=_positive_int)
    s.add_argument("--max-steps", type=_positive_int)
    s.add_argument("--batch-size", type=_positive_int)
    s.add_argument("--lr", type=float)
    s.add_argument("--resume", help="checkpoint to continue from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="range-capped evaluation report")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--priors", type=int, default=200)
    s.add_argument("--caps", type=_caps, default=[math.inf, 5.0, 1.0])
    s.add_argument("--out")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--resize", action="store_true", help="resize data to the network input size")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("infer", help="predict one depth map")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--rgb", required=True)
    s.add_argument("--prior")
    s.add_argument("--gt", help="ground-truth depth fixing the visualization range")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("bench", help="single-threaded forward latency")
    s.add_argument("--checkpoint")
    s.add_argument("--preset", choices=("default", "toy"), default="toy")
    s.add_argument("--iters", type=_positive_int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("config", help="print the default flat run configuration")
    s.add_argument("--preset", choices=("default", "toy"), default="default")
    s.add_argument("--docs", action="store_true")
    s.set_defaults(func=cmd_config)
    return p


def main(argv=None) -> int:
    from .priors import PriorFormatError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, PriorFormatError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
