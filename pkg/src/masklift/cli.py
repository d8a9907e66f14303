"""Command line interface and pipeline orchestration.

Subcommands::

    run       full pipeline: lift -> merge -> overseg -> ensemble
    lift      per-frame lifted clouds only
    merge     fuse already-lifted per-frame PLYs
    overseg   geometric over-segmentation of a scene PLY
    ensemble  combine a scene PLY with an over-segmentation
    eval      score a predicted PLY against a ground-truth PLY
    synth     render a synthetic scene from a spec JSON

Exit codes: 0 success, 2 scene/file loading failure, 3 validation or
configuration failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .camera import DEFAULT_DEPTH_DIVISOR, DEFAULT_MAX_DEPTH, unproject_frame
from .cloud import LabeledCloud
from .errors import AlignmentError, ConfigError, MaskliftError, SceneLoadError, ValidationError
from .eval import SceneSpec, demo_scene_spec, hungarian_match_iou, write_synthetic_scene
from .gridpool import PoolConfig, grid_pool
from .io import (
    SceneDataset,
    load_scene,
    read_ply,
    read_segments_text,
    write_ply,
    write_segments_text,
)
from .lift import IdAllocator, remap_local_labels
from .merge import MergeConfig, MergeTreeTrace, bottom_up_merge
from .overseg import OversegConfig, Oversegmentation, build_graph, ensemble, estimate_normals, felzenszwalb_segment

log = logging.getLogger("masklift")

ENV_THREADS = "MASKLIFT_THREADS"
STAGES = ("lift", "merge", "overseg")


@dataclass(frozen=True)
class PipelineConfig:
    """Every semantic knob of the pipeline in one place.

    ``threads`` and ``json_logs`` affect execution only, never results, and
    are excluded from the config snapshot written next to the outputs.
    """

    voxel_size: float = 0.05
    delta: float = 0.5
    ensemble_delta: float | None = None  # None: same as delta
    match_radius: float | None = None  # None: same as voxel_size
    stride: int = 1
    frame_stride: int = 1
    depth_divisor: float = DEFAULT_DEPTH_DIVISOR
    max_depth: float = DEFAULT_MAX_DEPTH
    knn: int = 16
    fz_k: float = 0.1
    min_segment: int = 20
    no_ensemble: bool = False
    no_pool_after_merge: bool = False
    strict: bool = False
    seed: int = 0
    threads: int | None = None  # None: MASKLIFT_THREADS env, else 1
    json_logs: bool = False

    def __post_init__(self):
        # Sub-configs carry the range checks; construct them to validate.
        self.merge_config()
        self.overseg_config()
        PoolConfig(self.voxel_size)
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")
        if self.frame_stride < 1:
            raise ConfigError(f"frame stride must be >= 1, got {self.frame_stride}")
        if self.depth_divisor <= 0:
            raise ConfigError(f"depth divisor must be positive, got {self.depth_divisor}")
        if self.max_depth <= 0:
            raise ConfigError(f"max depth must be positive, got {self.max_depth}")
        if self.ensemble_delta is not None and not (0.0 < self.ensemble_delta <= 1.0):
            raise ConfigError(f"ensemble delta must be in (0, 1], got {self.ensemble_delta}")
        if self.threads is not None and self.threads < 1:
            raise ConfigError(f"thread count must be >= 1, got {self.threads}")

    def merge_config(self) -> MergeConfig:
        return MergeConfig(
            delta=self.delta,
            voxel_size=self.voxel_size,
            match_radius=self.match_radius,
            pool_after_merge=not self.no_pool_after_merge,
        )

    def overseg_config(self) -> OversegConfig:
        return OversegConfig(knn=self.knn, fz_k=self.fz_k, min_segment=self.min_segment)

    def resolved_ensemble_delta(self) -> float:
        return self.delta if self.ensemble_delta is None else self.ensemble_delta

    def resolved_threads(self) -> int:
        if self.threads is not None:
            return self.threads
        env = os.environ.get(ENV_THREADS, "").strip()
        if env:
            try:
                value = int(env)
            except ValueError:
                raise ConfigError(f"{ENV_THREADS} must be an integer, got {env!r}") from None
            if value < 1:
                raise ConfigError(f"{ENV_THREADS} must be >= 1, got {value}")
            return value
        return 1

    def snapshot(self) -> dict:
        out = {}
        for f in fields(self):
            if f.name in ("threads", "json_logs"):
                continue
            out[f.name] = getattr(self, f.name)
        return out

    @classmethod
    def from_dict(cls, payload: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**payload)


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def lift_scene(dataset: SceneDataset, config: PipelineConfig) -> list[LabeledCloud]:
    """Lift and pool every frame of a scene, in frame order.

    Per-frame work (decode, unproject, local labels) may run on worker
    threads; global mask ID blocks are assigned sequentially in frame order
    afterwards, so the result is independent of the thread count.
    """
    threads = config.resolved_threads()
    pool_cfg = PoolConfig(config.voxel_size)

    def frame_job(record):
        depth = dataset.load_depth(record)
        mask = dataset.load_masks(record)
        if (mask.width, mask.height) != (depth.width, depth.height):
            raise ValidationError(
                f"frame {record.name}: mask is {mask.width}x{mask.height} "
                f"but depth is {depth.width}x{depth.height}"
            )
        pixels, points = unproject_frame(
            depth, dataset.intrinsics, record.pose, config.stride, config.max_depth
        )
        local = mask.labels[pixels[:, 1], pixels[:, 0]]
        return points, local, mask.mask_ids()

    if threads > 1 and len(dataset.records) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(frame_job, dataset.records))
    else:
        results = [frame_job(r) for r in dataset.records]

    allocator = IdAllocator()
    clouds = []
    for points, local, mask_ids in results:
        base = allocator.reserve(len(mask_ids))
        cloud = LabeledCloud(points, remap_local_labels(local, mask_ids, base))
        clouds.append(grid_pool(cloud, pool_cfg))
    return clouds


@dataclass
class RunOutputs:
    out_dir: Path
    merged: LabeledCloud
    trace: MergeTreeTrace
    final: LabeledCloud | None
    overseg: Oversegmentation | None


def run_pipeline(
    scene_dir: Path | str,
    out_dir: Path | str,
    config: PipelineConfig,
    stop_after: str | None = None,
) -> RunOutputs | None:
    """Execute the pipeline and write artifacts under ``out_dir``.

    Artifacts: config.json, merged.ply (scene masks before the ensemble),
    merge_trace.json, overseg.txt, final.ply.  With ``stop_after`` set, the
    later stages and their files are skipped; ``--stop-after lift`` writes
    per-frame clouds to frames/ instead.
    """
    if stop_after is not None and stop_after not in STAGES:
        raise ConfigError(f"stop-after must be one of {STAGES}, got {stop_after!r}")
    stage = "load"
    try:
        dataset = load_scene(
            scene_dir,
            depth_divisor=config.depth_divisor,
            frame_stride=config.frame_stride,
            strict=config.strict,
        )
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "config.json", config.snapshot())

        stage = "lift"
        log.info("lifting %d frames", len(dataset.records))
        clouds = lift_scene(dataset, config)
        if stop_after == "lift":
            frame_dir = out / "frames"
            frame_dir.mkdir(exist_ok=True)
            for record, cloud in zip(dataset.records, clouds):
                write_ply(frame_dir / f"frame_{record.frame_id:05d}.ply", cloud)
            return None

        stage = "merge"
        log.info("merging %d clouds", len(clouds))
        merged, trace = bottom_up_merge(
            clouds, config.merge_config(), threads=config.resolved_threads()
        )
        write_ply(out / "merged.ply", merged)
        _write_json(out / "merge_trace.json", trace.to_json())
        if stop_after == "merge":
            return RunOutputs(out, merged, trace, None, None)

        overseg_result: Oversegmentation | None = None
        final = merged
        if not config.no_ensemble:
            stage = "overseg"
            log.info("over-segmenting %d points", len(merged))
            normals = estimate_normals(merged.points, config.knn)
            graph = build_graph(normals, config.knn)
            overseg_result = felzenszwalb_segment(graph, config.overseg_config())
            write_segments_text(out / "overseg.txt", overseg_result.segment_id)
            if stop_after == "overseg":
                return RunOutputs(out, merged, trace, None, overseg_result)

            stage = "ensemble"
            log.info("ensembling %d segments", overseg_result.n_segments)
            final = ensemble(merged, overseg_result, config.resolved_ensemble_delta())
        write_ply(out / "final.ply", final)
        return RunOutputs(out, merged, trace, final, overseg_result)
    except MaskliftError as e:
        raise type(e)(f"[{stage}] {e}") from e


# --- subcommand handlers -------------------------------------------------


def _add_config_flags(p: argparse.ArgumentParser, overseg_only: bool = False) -> None:
    if not overseg_only:
        p.add_argument("--voxel", type=float, default=None, help="voxel size in meters (default 0.05)")
        p.add_argument("--delta", type=float, default=None, help="merge overlap threshold (default 0.5)")
        p.add_argument("--match-radius", type=float, default=None, help="correspondence radius (default: voxel size)")
        p.add_argument("--no-pool-after-merge", action="store_true", help="skip pooling after each pair merge")
    p.add_argument("--knn", type=int, default=None, help="neighbors for normals and the graph (default 16)")
    p.add_argument("--fz-k", type=float, default=None, help="segmentation scale parameter (default 0.1)")
    p.add_argument("--min-segment", type=int, default=None, help="smallest surviving segment (default 20)")


def _config_from_args(args: argparse.Namespace) -> PipelineConfig:
    base: dict = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            base = json.loads(path.read_text())
        except OSError as e:
            raise SceneLoadError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        if not isinstance(base, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
    overrides = {
        "voxel_size": getattr(args, "voxel", None),
        "delta": getattr(args, "delta", None),
        "ensemble_delta": getattr(args, "ensemble_delta", None),
        "match_radius": getattr(args, "match_radius", None),
        "stride": getattr(args, "stride", None),
        "frame_stride": getattr(args, "frame_stride", None),
        "depth_divisor": getattr(args, "depth_divisor", None),
        "max_depth": getattr(args, "max_depth", None),
        "knn": getattr(args, "knn", None),
        "fz_k": getattr(args, "fz_k", None),
        "min_segment": getattr(args, "min_segment", None),
        "seed": getattr(args, "seed", None),
        "threads": getattr(args, "threads", None),
    }
    for key, value in overrides.items():
        if value is not None:
            base[key] = value
    for flag in ("no_ensemble", "no_pool_after_merge", "strict", "json_logs"):
        if getattr(args, flag, False):
            base[flag] = True
    return PipelineConfig.from_dict(base)


def _cmd_run(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    run_pipeline(args.scene, args.out, config, stop_after=args.stop_after)
    log.info("outputs written to %s", args.out)
    return 0


def _cmd_lift(args: argparse.Namespace) -> int:
    args.stop_after = "lift"
    return _cmd_run(args)


def _cmd_merge(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    paths: list[Path] = []
    for raw in args.clouds:
        p = Path(raw)
        if p.is_dir():
            paths.extend(sorted(p.glob("*.ply")))
        else:
            paths.append(p)
    if not paths:
        raise SceneLoadError("no input PLY files")
    clouds = [read_ply(p) for p in paths]
    merged, trace = bottom_up_merge(
        clouds, config.merge_config(), threads=config.resolved_threads()
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_ply(out / "merged.ply", merged)
    _write_json(out / "merge_trace.json", trace.to_json())
    log.info("merged %d clouds into %d points", len(clouds), len(merged))
    return 0


def _cmd_overseg(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    cloud = read_ply(args.cloud)
    normals = estimate_normals(cloud.points, config.knn)
    graph = build_graph(normals, config.knn)
    seg = felzenszwalb_segment(graph, config.overseg_config())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_segments_text(out / "overseg.txt", seg.segment_id)
    log.info("%d segments over %d points", seg.n_segments, len(cloud))
    return 0


def _cmd_ensemble(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    cloud = read_ply(args.cloud)
    segment_id = read_segments_text(args.segments)
    final = ensemble(cloud, Oversegmentation(segment_id), config.resolved_ensemble_delta())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_ply(out / "final.ply", final)
    log.info("final cloud has %d instances", final.label_ids().size)
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    pred = read_ply(args.pred)
    true = read_ply(args.true)
    if len(pred) != len(true):
        raise AlignmentError(f"clouds have {len(pred)} and {len(true)} points")
    if len(pred) and not np.allclose(pred.points, true.points, atol=1e-6):
        raise AlignmentError("cloud coordinates do not line up within 1e-6")
    report = hungarian_match_iou(pred.labels, true.labels)
    payload = report.to_dict()
    print(json.dumps(payload, sort_keys=True, indent=2))
    if args.out:
        _write_json(Path(args.out), payload)
    return 0


def _cmd_synth(args: argparse.Namespace) -> int:
    if args.demo:
        spec = demo_scene_spec(seed=args.seed if args.seed is not None else 0)
    else:
        if not args.spec:
            raise ConfigError("synth needs a spec JSON (or --demo)")
        path = Path(args.spec)
        try:
            payload = json.loads(path.read_text())
        except OSError as e:
            raise SceneLoadError(f"cannot read spec {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        if args.seed is not None:
            payload["seed"] = args.seed
        spec = SceneSpec.from_json(payload)
    write_synthetic_scene(spec, args.out)
    log.info("scene written to %s", args.out)
    return 0


class _JsonLogFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        return json.dumps(
            {"level": record.levelname.lower(), "message": record.getMessage()},
            sort_keys=True,
        )


def _setup_logging(json_logs: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    if json_logs:
        handler.setFormatter(_JsonLogFormatter())
    else:
        handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    root = logging.getLogger("masklift")
    root.handlers[:] = [handler]
    root.setLevel(logging.INFO)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="masklift", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--threads", type=int, default=None, help=f"worker threads (default: ${ENV_THREADS} or 1)")
        p.add_argument("--json-logs", action="store_true", dest="json_logs", help="emit JSON log lines")
        p.add_argument("--seed", type=int, default=None, help="seed recorded in the config snapshot")

    run = sub.add_parser("run", help="full pipeline over a scene directory")
    run.add_argument("scene")
    run.add_argument("--out", required=True)
    run.add_argument("--config", default=None, help="JSON file with config values (flags override)")
    run.add_argument("--stop-after", choices=STAGES, default=None)
    run.add_argument("--stride", type=int, default=None, help="pixel stride for unprojection (default 1)")
    run.add_argument("--frame-stride", type=int, default=None, help="keep every Nth frame (default 1)")
    run.add_argument("--depth-divisor", type=float, default=None, help="raw units per meter (default 1000)")
    run.add_argument("--max-depth", type=float, default=None, help="max usable depth in meters (default 10)")
    run.add_argument("--strict", action="store_true", help="fail on any skipped frame")
    run.add_argument("--no-ensemble", action="store_true", help="stop at merged scene masks")
    run.add_argument("--ensemble-delta", type=float, default=None, help="ensemble threshold (default: --delta)")
    _add_config_flags(run)
    common(run)
    run.set_defaults(handler=_cmd_run)

    lift = sub.add_parser("lift", help="write per-frame lifted clouds")
    lift.add_argument("scene")
    lift.add_argument("--out", required=True)
    lift.add_argument("--config", default=None)
    lift.add_argument("--stride", type=int, default=None)
    lift.add_argument("--frame-stride", type=int, default=None)
    lift.add_argument("--depth-divisor", type=float, default=None)
    lift.add_argument("--max-depth", type=float, default=None)
    lift.add_argument("--strict", action="store_true")
    _add_config_flags(lift)
    common(lift)
    lift.set_defaults(handler=_cmd_lift)

    merge = sub.add_parser("merge", help="fuse per-frame PLY clouds")
    merge.add_argument("clouds", nargs="+", help="PLY files or a directory of them")
    merge.add_argument("--out", required=True)
    merge.add_argument("--config", default=None)
    _add_config_flags(merge)
    common(merge)
    merge.set_defaults(handler=_cmd_merge)

    overseg = sub.add_parser("overseg", help="over-segment a scene PLY")
    overseg.add_argument("cloud")
    overseg.add_argument("--out", required=True)
    overseg.add_argument("--config", default=None)
    _add_config_flags(overseg, overseg_only=True)
    common(overseg)
    overseg.set_defaults(handler=_cmd_overseg)

    ens = sub.add_parser("ensemble", help="combine scene masks with over-segments")
    ens.add_argument("cloud", help="scene PLY")
    ens.add_argument("segments", help="overseg.txt")
    ens.add_argument("--out", required=True)
    ens.add_argument("--config", default=None)
    ens.add_argument("--ensemble-delta", type=float, default=None)
    ens.add_argument("--delta", type=float, default=None)
    common(ens)
    ens.set_defaults(handler=_cmd_ensemble)

    ev = sub.add_parser("eval", help="score predicted instances against ground truth")
    ev.add_argument("pred")
    ev.add_argument("true")
    ev.add_argument("--out", default=None, help="also write the report JSON here")
    common(ev)
    ev.set_defaults(handler=_cmd_eval)

    synth = sub.add_parser("synth", help="render a synthetic scene")
    synth.add_argument("spec", nargs="?", default=None, help="scene spec JSON")
    synth.add_argument("--out", required=True)
    synth.add_argument("--demo", action="store_true", help="use the built-in demo scene")
    common(synth)
    synth.set_defaults(handler=_cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(getattr(args, "json_logs", False))
    try:
        return args.handler(args)
    except SceneLoadError as e:
        log.error("%s", e)
        return 2
    except ValidationError as e:
        log.error("%s", e)
        return 3


if __name__ == "__main__":
    sys.exit(main())
