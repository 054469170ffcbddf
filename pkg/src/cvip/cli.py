"""``cvip`` command line: encode, decode, flow, gen-data, train, eval, bench.

Results go to stdout as JSON (or a table with --pretty). The resolved config of
every run is logged to stderr. Usage errors exit 2, runtime failures exit 1.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .errors import CvipError

log = logging.getLogger("cvip")

SCHEMA = "cvip/1"


class UsageError(Exception):
    pass


# --- small parsers ------------------------------------------------------------

def _inflate_at(text):
    if text.lower() == "none":
        return None
    try:
        k = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 1..5 or none, got {text!r}")
    if not 1 <= k <= 5:
        raise argparse.ArgumentTypeError(f"expected 1..5 or none, got {k}")
    return k


def _weights(text):
    try:
        w = [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected two comma-separated numbers, got {text!r}")
    if len(w) != 2 or min(w) < 0 or sum(w) <= 0:
        raise argparse.ArgumentTypeError("fusion weights must be two non-negative numbers, not both zero")
    return w


def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


# --- frame io -----------------------------------------------------------------

def _read_frames(path: Path):
    from .codec import Frame
    if path.is_dir():
        from PIL import Image
        files = sorted(p for p in path.iterdir() if p.suffix.lower() == ".png")
        if not files:
            raise UsageError(f"{path}: no .png frames")
        return [Frame(np.asarray(Image.open(f).convert("RGB"), dtype=np.uint8)) for f in files]
    if path.suffix == ".npy":
        arr = np.load(path)
        if arr.ndim != 4 or arr.shape[-1] != 3 or arr.dtype != np.uint8:
            raise UsageError(f"{path}: expected a uint8 array shaped (T, H, W, 3)")
        return [Frame(a) for a in arr]
    raise UsageError(f"{path}: input must be a .npy array or a directory of .png frames")


# --- subcommands --------------------------------------------------------------

def cmd_encode(args):
    from .codec import encode_gop_video, write_gvc
    frames = _read_frames(Path(args.input))
    gv = encode_gop_video(frames, args.gop, args.range, args.label)
    write_gvc(gv, args.out)
    return {"out": str(args.out), "frames": gv.frame_count, "width": gv.width, "height": gv.height,
            "gop_size": gv.gop_size, "bytes": Path(args.out).stat().st_size}


def cmd_decode(args):
    from PIL import Image
    from .codec import decode_gop_video, read_gvc
    gv = read_gvc(args.input)
    frames = decode_gop_video(gv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, f in enumerate(frames):
        Image.fromarray(f.data).save(out / f"frame_{k:05d}.png")
    return {"out": str(out), "frames": len(frames), "width": gv.width, "height": gv.height,
            "label": gv.label}


def _flow_params(args):
    from .data import DATASET_FLOW_PARAMS
    from .flow import FAST_PARAMS, FlowParams
    base = {"default": FlowParams(), "fast": FAST_PARAMS, "dataset": DATASET_FLOW_PARAMS}[args.preset]
    if args.smoothness is not None:
        base = replace(base, smoothness_weight=args.smoothness)
    return base


def cmd_flow(args):
    from .codec import decode_gop_video, read_gvc
    from .flow import video_flows, write_flow_dir
    params = _flow_params(args)
    log.info("flow params %s", json.dumps(asdict(params)))
    frames = decode_gop_video(read_gvc(args.input))
    flows = video_flows(frames, params)
    paths = write_flow_dir(args.out, flows)
    mag = np.hypot(flows[:, 0], flows[:, 1]) if len(flows) else np.zeros(1)
    return {"out": str(args.out), "pairs": len(paths), "mean_magnitude": float(mag.mean()),
            "params": asdict(params)}


def cmd_gen_data(args):
    from .data import SyntheticConfig, generate_synthetic_dataset
    cfg = SyntheticConfig(classes=args.classes, clips_per_class=args.clips, frames=args.frames,
                          size=args.size, test_per_class=args.test_per_class)
    log.info("gen-data config %s seed %d", json.dumps(asdict(cfg)), args.seed)
    m = generate_synthetic_dataset(args.out, cfg, seed=args.seed, with_flows=not args.no_flows)
    return {"out": str(args.out), "videos": len(m.entries), "classes": m.num_classes,
            "train": len(m.split("train")), "test": len(m.split("test"))}


def _train_config(args):
    from .distill import LossConfig
    from .pipeline import TrainConfig
    base = TrainConfig()
    loss = LossConfig(args.lambda1, args.lambda2, args.temperature, args.feat_norm)
    kw = dict(seed=args.seed, loss=loss, inflate_at=args.inflate_at)
    for name in ("lr", "batch_size", "n_segments"):
        if getattr(args, name) is not None:
            kw[name] = getattr(args, name)
    return replace(base, **kw)


def cmd_train(args):
    from .data import VideoStore, load_manifest
    from .pipeline import (DEFAULT_EPOCHS, STAGES, ScheduleConfig, load_network, run_training_schedule,
                           save_network, train_i_stream)
    manifest = load_manifest(args.data)
    base = _train_config(args)
    epochs = dict(DEFAULT_EPOCHS)
    if args.epochs is not None:
        epochs = {k: args.epochs for k in epochs}
    sched = ScheduleConfig(base=base, epochs=epochs, num_classes=manifest.num_classes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resolved = {"stage": args.stage, "data": str(args.data), "train": base.to_json(), "epochs": epochs,
                "lr_scale": sched.lr_scale}
    log.info("train config %s", json.dumps(resolved, sort_keys=True))
    (out / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True))
    store = VideoStore(manifest)

    def progress(rec):
        log.info("%s", json.dumps(rec, sort_keys=True))

    stages = list(STAGES) + ["istream"] if args.stage == "all" else [args.stage]
    given = {}
    for key in ("mr2d", "of2d", "distill2d", "inflate", "inflate_teacher"):
        p = out / f"{key}.ckpt"
        if p.exists() and args.stage != "all":
            given[key] = load_network(p)
    written = []
    p_stages = [s for s in stages if s in STAGES]
    if p_stages:
        results = run_training_schedule(manifest, sched, p_stages, out, given, store, progress)
        written += [f"{k}.ckpt" for k in results]
    if "istream" in stages:
        res = train_i_stream(manifest, sched.stage_cfg("istream"), store, progress=progress)
        save_network(out / "istream.ckpt", res.net)
        with open(out / "train_log.jsonl", "a", encoding="utf-8") as fh:
            for rec in res.log:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        written.append("istream.ckpt")
    return {"out": str(out), "checkpoints": written, "config": resolved}


def cmd_eval(args):
    from .data import load_manifest
    from .pipeline import FusionConfig, TrainConfig, evaluate, load_network
    if not args.i_ckpt and not args.p_ckpt:
        raise UsageError("eval needs --i-ckpt and/or --p-ckpt")
    manifest = load_manifest(args.data)
    i_net = load_network(args.i_ckpt) if args.i_ckpt else None
    p_net = load_network(args.p_ckpt) if args.p_ckpt else None
    cfg = TrainConfig(n_segments=args.n_segments) if args.n_segments else TrainConfig()
    report = evaluate(manifest, i_net, p_net, FusionConfig(*args.fuse_weights), args.split, cfg=cfg)
    if args.out:
        Path(args.out).write_text(json.dumps(report, sort_keys=True, indent=2))
    return report


def cmd_bench(args):
    from .bench import count_flops, measure_vps
    from .models import build_i_stream, build_p_stream, i_stream_spec, p_stream_spec
    from .pipeline import load_network
    i_net = load_network(args.i_ckpt) if args.i_ckpt else build_i_stream(i_stream_spec(args.classes), seed=0)
    p_net = load_network(args.p_ckpt) if args.p_ckpt else build_p_stream(p_stream_spec(args.classes), seed=0)
    out = {}
    if args.flops or not args.vps:
        s, t = args.size, args.frames
        ri = count_flops(i_net, (3, s, s), batch=t)
        rp = count_flops(p_net, (p_net.spec.input_channels, t, s, s))
        out["flops"] = {"i_stream": ri.total_flops, "p_stream": rp.total_flops,
                        "i_layers": [asdict(l) for l in ri.layers], "p_layers": [asdict(l) for l in rp.layers]}
    if args.vps:
        if not args.data:
            raise UsageError("--vps needs --data")
        from .data import load_manifest
        rep = measure_vps(i_net, p_net, load_manifest(args.data), args.reps, args.warmup, args.frames)
        out["vps"] = rep.vps
        out["timing"] = rep.timing
    return out


# --- output -------------------------------------------------------------------

def _table(obj, prefix=""):
    rows = []
    for k, v in obj.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            rows += _table(v, key + ".")
        elif isinstance(v, list) and v and isinstance(v[0], (dict, list)):
            rows.append((key, f"[{len(v)} rows]"))
        else:
            rows.append((key, v if not isinstance(v, float) else f"{v:.6g}"))
    return rows


def _emit(result: dict, pretty: bool):
    if pretty:
        rows = _table(result)
        width = max((len(k) for k, _ in rows), default=0)
        for k, v in rows:
            print(f"{k.ljust(width)}  {v}")
    else:
        print(json.dumps(result, sort_keys=True))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cvip", description="Compressed-video two-stream recognition toolkit.")
    p.add_argument("--version", action="version", version=f"cvip {__version__}")
    p.add_argument("--threads", type=_positive, default=None,
                   help="BLAS thread count (default: $CVIP_THREADS or library default)")
    p.add_argument("--pretty", action="store_true", help="print a table instead of JSON")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("encode", help="encode frames into a .gvc container")
    e.add_argument("--in", dest="input", required=True, help=".npy (T,H,W,3) uint8 or directory of .png")
    e.add_argument("--out", required=True)
    e.add_argument("--gop", type=_positive, default=12)
    e.add_argument("--range", type=int, default=7, help="motion search range in pixels")
    e.add_argument("--label", type=int, default=None)
    e.set_defaults(func=cmd_encode)

    d = sub.add_parser("decode", help="decode a .gvc container to .png frames")
    d.add_argument("--in", dest="input", required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_decode)

    f = sub.add_parser("flow", help="TV-L1 flow for every frame pair of a container")
    f.add_argument("--in", dest="input", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--preset", choices=("default", "fast", "dataset"), default="dataset")
    f.add_argument("--smoothness", type=float, default=None)
    f.set_defaults(func=cmd_flow)

    g = sub.add_parser("gen-data", help="render the synthetic appearance/motion dataset")
    g.add_argument("--classes", type=int, default=8)
    g.add_argument("--clips", type=int, default=25, help="clips per class")
    g.add_argument("--test-per-class", type=int, default=10)
    g.add_argument("--frames", type=int, default=32)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--no-flows", action="store_true")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run one training stage or the whole schedule")
    t.add_argument("--stage", required=True,
                   choices=("mr2d", "of2d", "distill2d", "inflate", "distill3d", "istream", "all"))
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--epochs", type=_positive, default=None, help="epochs for every stage")
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--batch-size", type=_positive, default=None)
    t.add_argument("--n-segments", type=_positive, default=None)
    t.add_argument("--lambda1", type=float, default=50.0)
    t.add_argument("--lambda2", type=float, default=0.0)
    t.add_argument("--temperature", type=float, default=8.0)
    t.add_argument("--feat-norm", choices=("l1", "l2"), default="l1")
    t.add_argument("--inflate-at", type=_inflate_at, default=3, help="1..5 or none")
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("eval", help="top-1 of each stream and of the late fusion")
    v.add_argument("--data", required=True)
    v.add_argument("--i-ckpt")
    v.add_argument("--p-ckpt")
    v.add_argument("--fuse-weights", type=_weights, default=[1.0, 1.0])
    v.add_argument("--split", default="test")
    v.add_argument("--n-segments", type=_positive, default=None,
                   help="frames sampled per video (default: the training default)")
    v.add_argument("--out", help="also write the report here")
    v.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="analytic FLOPs and videos per second")
    b.add_argument("--flops", action="store_true")
    b.add_argument("--vps", action="store_true")
    b.add_argument("--i-ckpt")
    b.add_argument("--p-ckpt")
    b.add_argument("--data")
    b.add_argument("--reps", type=int, default=10)
    b.add_argument("--warmup", type=int, default=2)
    b.add_argument("--frames", type=_positive, default=16)
    b.add_argument("--size", type=_positive, default=64)
    b.add_argument("--classes", type=_positive, default=8)
    b.set_defaults(func=cmd_bench)
    return p


def _limit_threads(n):
    if n is None:
        return None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(name)s: %(message)s")
    threads = args.threads
    if threads is None and os.environ.get("CVIP_THREADS"):
        try:
            threads = _positive(os.environ["CVIP_THREADS"])
        except (ValueError, argparse.ArgumentTypeError):
            parser.error(f"CVIP_THREADS must be a positive integer, got {os.environ['CVIP_THREADS']!r}")
    _limit_threads(threads)
    log.info("command %s %s", args.command, json.dumps(
        {k: v for k, v in vars(args).items() if k != "func"}, default=str, sort_keys=True))
    try:
        result = args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (CvipError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    result = {"schema": SCHEMA, "command": args.command, **result}
    _emit(result, args.pretty)
    return 0


if __name__ == "__main__":
    sys.exit(main())
