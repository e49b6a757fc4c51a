"""Command line entry point. Every command prints ``key=value`` lines.

Exit codes: 0 ok, 1 bad configuration or arguments, 2 storage failure,
3 benchmark precondition not met.
"""

from __future__ import annotations

import argparse
import logging
import sqlite3
import sys
import time
from pathlib import Path

from .archive import Archiver
from .codec.points import kitti_bytes, read_kitti_bin
from .core import EngineConfig, Modality, parse_day, parse_overrides, render_ts, to_ms
from .errors import AvsError, ValidationError
from .hotstore import HotStore
from .reduce import DedupFilter, voxel_downsample
from .retrieve import GPS_ROW, Retriever, retrieval_bench


def _config(args) -> EngineConfig:
    overrides = parse_overrides(args.set or [])
    if args.hot_root:
        overrides["hot_root"] = args.hot_root
    if args.cold_root:
        overrides["cold_root"] = args.cold_root
    return EngineConfig.load(args.config, overrides)


def _emit(pairs) -> None:
    for key, value in pairs:
        print(f"{key}={value}")


def _open(cfg: EngineConfig) -> tuple[HotStore, Archiver]:
    hot = HotStore(cfg.hot_root, cfg)
    return hot, Archiver(hot, cfg.cold_root, cfg)


# -- commands ---------------------------------------------------------------


def cmd_ingest(args, cfg: EngineConfig) -> int:
    from .ingest.pipeline import run_pipeline
    from .ingest.sources import SynthSpec, kitti_source, synth_source

    if args.source == "synth":
        source = synth_source(SynthSpec(duration_s=args.duration), seed=args.seed)
    else:
        if not (args.velodyne or args.images):
            raise ValidationError("kitti source needs --velodyne and/or --images")
        source = kitti_source(args.velodyne, args.images, args.rate)
    speed = 1.0 if args.realtime else args.speed
    report = run_pipeline(source, cfg, speed=speed,
                          backpressure="reject" if speed is not None else "block")
    sys.stdout.write(report.to_text())
    return 2 if any(r.halted for r in report.modalities.values()) else 0


def cmd_archive(args, cfg: EngineConfig) -> int:
    cutoff = parse_day(args.before)
    hot, archiver = _open(cfg)
    try:
        if args.dry_run:
            plan = archiver.plan(cutoff)
            for p in plan:
                print(f"plan modality={p.modality.value} day={p.day} items={p.item_count} "
                      f"bytes={p.size_bytes} dest={p.dest} resume={int(p.resume)}")
            _emit([("dry_run", 1), ("days", len(plan))])
            return 0
        entries = archiver.archive_before(cutoff)
        for e in entries:
            print(f"archived modality={e.modality.value} day={e.day} items={e.item_count} "
                  f"path={e.rel_path}")
        _emit([("dry_run", 0), ("days", len(entries))])
        return 0
    finally:
        archiver.close()
        hot.close()


def _write_item(out: Path, item, raw: bool) -> int:
    name = render_ts(item.ts)
    m = item.modality
    if raw:
        data = item.data
        ext = "row" if m is Modality.GPS else m.ext
    elif m is Modality.IMAGE:
        from PIL import Image
        arr = item.data.array()
        path = out / f"{name}.png"
        Image.fromarray(arr[:, :, 0] if item.data.channels == 1 else arr).save(path)
        return path.stat().st_size
    elif m is Modality.LIDAR:
        data, ext = kitti_bytes(item.data), "bin"
    else:
        fix = item.data
        data, ext = f"{fix.ts},{fix.lat!r},{fix.lon!r},{fix.alt!r}\n".encode(), "csv"
    (out / f"{name}.{ext}").write_bytes(data)
    return len(data)


def cmd_get(args, cfg: EngineConfig) -> int:
    m = Modality.parse(args.modality)
    t0, t1 = to_ms(args.from_), to_ms(args.to)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    hot, archiver = _open(cfg)
    counts = {"hot": 0, "cold": 0}
    total = 0
    ttfb = None
    try:
        began = time.perf_counter()
        for item in Retriever(hot, archiver).retrieve_range(m, t0, t1, "raw" if args.raw else "decoded"):
            if ttfb is None:
                ttfb = (time.perf_counter() - began) * 1e3
            counts[item.tier] += 1
            total += _write_item(out, item, args.raw)
        elapsed = (time.perf_counter() - began) * 1e3
    finally:
        archiver.close()
        hot.close()
    _emit([
        ("modality", m.value), ("from", t0), ("to", t1), ("mode", "raw" if args.raw else "decoded"),
        ("items", counts["hot"] + counts["cold"]), ("hot_items", counts["hot"]),
        ("cold_items", counts["cold"]), ("bytes", total),
        ("ttfb_ms", f"{ttfb:.3f}" if ttfb is not None else "nan"), ("elapsed_ms", f"{elapsed:.3f}"),
        ("out", out),
    ])
    return 0


def cmd_bench_retrieve(args, cfg: EngineConfig) -> int:
    hot, archiver = _open(cfg)
    try:
        report = retrieval_bench(Retriever(hot, archiver), args.windows, args.window_s, args.seed,
                                 mode="raw" if args.raw else "decoded")
    finally:
        archiver.close()
        hot.close()
    sys.stdout.write(report.to_text())
    return 0


def cmd_bench_all(args, cfg: EngineConfig) -> int:
    from .ingest.bench import bench_suite

    report = bench_suite(cfg, seed=args.seed, duration_s=args.duration,
                         speed=1.0 if args.realtime else None, n_windows=args.windows,
                         window_s=args.window_s, archive_runs=args.archive_runs)
    sys.stdout.write(report.to_text())
    if args.csv:
        n = report.write_csv(args.csv)
        _emit([("csv", args.csv), ("csv_rows", n)])
    return 0


def _expand(paths, suffixes) -> list[Path]:
    files = []
    for p in map(Path, paths):
        if p.is_dir():
            files += sorted(q for q in p.iterdir() if q.suffix.lower() in suffixes)
        else:
            files.append(p)
    return files


def cmd_reduce(args, cfg: EngineConfig) -> int:
    leaf = args.leaf if args.leaf is not None else cfg.voxel_leaf_m
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    n_in = n_out = 0
    for path in _expand(args.inputs, (".bin",)):
        cloud = read_kitti_bin(path)
        reduced = voxel_downsample(cloud, leaf)
        n_in, n_out = n_in + len(cloud), n_out + len(reduced)
        print(f"file={path} points_in={len(cloud)} points_out={len(reduced)}")
        if out:
            (out / path.name).write_bytes(kitti_bytes(reduced))
    _emit([("leaf_m", leaf), ("points_in", n_in), ("points_out", n_out),
           ("keep_ratio", f"{n_out / n_in:.4f}" if n_in else "nan")])
    return 0


def cmd_dedup(args, cfg: EngineConfig) -> int:
    from .codec.image import decode_image

    tau = args.tau if args.tau is not None else cfg.dedup_hamming_threshold
    filt = DedupFilter(tau)
    for path in _expand(args.inputs, (".png", ".jpg", ".jpeg")):
        d = filt.offer(decode_image(path.read_bytes()))
        print(f"file={path} hash={d.hash:016x} distance={d.distance} keep={int(d.keep)}")
    _emit([("tau", tau), ("frames", filt.seen), ("kept", filt.kept), ("dropped", filt.dropped)])
    return 0


def cmd_usage(args, cfg: EngineConfig) -> int:
    hot = HotStore(cfg.hot_root, cfg)
    try:
        u = hot.usage()
    finally:
        hot.close()
    for m in Modality:
        _emit([(f"{m.value}.items", u.items_by_modality[m.value]),
               (f"{m.value}.bytes", u.bytes_by_modality[m.value])])
    _emit([("total_bytes", u.total_bytes), ("oldest_day", u.oldest_day or "none")])
    return 0


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
    common.add_argument("--hot-root")
    common.add_argument("--cold-root")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="avstore", description="Tiered storage for sensor streams.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", parents=[common], help="run the ingest pipelines")
    s.add_argument("--source", choices=("synth", "kitti"), default="synth")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--duration", type=float, default=10.0, help="synthetic seconds")
    s.add_argument("--velodyne", help="KITTI velodyne directory")
    s.add_argument("--images", help="image directory")
    s.add_argument("--rate", type=float, default=10.0, help="KITTI replay rate (Hz)")
    s.add_argument("--realtime", action="store_true", help="pace frames at their timestamps")
    s.add_argument("--speed", type=float, help="pacing factor (2.0 = twice real time)")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("archive", parents=[common], help="move whole days to the cold tier")
    s.add_argument("--before", required=True, help="YYYY/MM/DD (exclusive)")
    s.add_argument("--dry-run", action="store_true")
    s.set_defaults(func=cmd_archive)

    s = sub.add_parser("get", parents=[common], help="retrieve a time range")
    s.add_argument("--modality", required=True, choices=[m.value for m in Modality])
    s.add_argument("--from", dest="from_", required=True, help="ms timestamp or RFC 3339")
    s.add_argument("--to", required=True, help="ms timestamp or RFC 3339 (inclusive)")
    s.add_argument("--raw", action="store_true", help="stored bytes instead of decoded data")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_get)

    bench = sub.add_parser("bench", help="benchmarks")
    bsub = bench.add_subparsers(dest="bench", required=True)
    s = bsub.add_parser("retrieve", parents=[common], help="TTFB / per-item retrieval bench")
    s.add_argument("--windows", type=int, default=6)
    s.add_argument("--window-s", type=float, default=75)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--raw", action="store_true")
    s.set_defaults(func=cmd_bench_retrieve)
    s = bsub.add_parser("all", parents=[common], help="full benchmark suite")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--duration", type=float, default=120.0)
    s.add_argument("--realtime", action="store_true")
    s.add_argument("--windows", type=int, default=6)
    s.add_argument("--window-s", type=float, default=75)
    s.add_argument("--archive-runs", type=int, default=10)
    s.add_argument("--csv", help="write raw latency samples here")
    s.set_defaults(func=cmd_bench_all)

    s = sub.add_parser("reduce", parents=[common], help="voxel-downsample KITTI .bin files")
    s.add_argument("inputs", nargs="+")
    s.add_argument("--leaf", type=float, help="voxel edge in metres")
    s.add_argument("--out")
    s.set_defaults(func=cmd_reduce)

    s = sub.add_parser("dedup", parents=[common], help="perceptual-hash dedup of images")
    s.add_argument("inputs", nargs="+")
    s.add_argument("--tau", type=int)
    s.set_defaults(func=cmd_dedup)

    s = sub.add_parser("usage", parents=[common], help="hot tier usage")
    s.set_defaults(func=cmd_usage)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        return args.func(args, cfg)
    except AvsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, sqlite3.Error) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
