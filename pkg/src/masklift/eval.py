"""Synthetic scenes and evaluation: render, perturb, score.

The renderer ray-casts axis-aligned boxes and finite axis-aligned plane
patches analytically, producing depth frames in raw sensor units plus
ground-truth instance masks.  A scene written to disk is a regular scene
directory (loadable by the pipeline) plus ``gt.ply``, a ground-truth labeled
cloud built through the same pooled reduction tree the pipeline uses, so its
point coordinates coincide with a default-parameter run bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .camera import CameraIntrinsics, CameraPose, DepthFrame, unproject_frame
from .cloud import LabeledCloud, concat_clouds
from .errors import ConfigError, MalformedInputError
from .gridpool import PoolConfig, grid_pool
from .io import save_depth_png, save_mask_image, save_matrix_text, save_pose, write_ply
from .lift import MaskImage
from .merge import pair_schedule

_AXES = {"x": 0, "y": 1, "z": 2}


@dataclass(frozen=True)
class Box:
    """Axis-aligned box instance."""

    instance_id: int
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    def __post_init__(self):
        if self.instance_id < 1:
            raise ConfigError(f"instance id must be >= 1, got {self.instance_id}")
        if not all(a < b for a, b in zip(self.lo, self.hi)):
            raise ConfigError(f"box must have lo < hi per axis, got {self.lo}..{self.hi}")


@dataclass(frozen=True)
class PlanePatch:
    """Finite axis-aligned plane patch: axis = const, bounded on the others."""

    instance_id: int
    axis: str
    offset: float
    lo: tuple[float, float]  # bounds on the two remaining axes, in axis order
    hi: tuple[float, float]

    def __post_init__(self):
        if self.instance_id < 1:
            raise ConfigError(f"instance id must be >= 1, got {self.instance_id}")
        if self.axis not in _AXES:
            raise ConfigError(f"axis must be one of x/y/z, got {self.axis!r}")
        if not all(a < b for a, b in zip(self.lo, self.hi)):
            raise ConfigError(f"plane bounds must have lo < hi, got {self.lo}..{self.hi}")


@dataclass(frozen=True)
class PerturbOptions:
    split_prob: float = 0.0
    permute_ids: bool = False

    def __post_init__(self):
        if not (0.0 <= self.split_prob <= 1.0):
            raise ConfigError(f"split probability must be in [0, 1], got {self.split_prob}")


def look_at_pose(eye, target, up=(0.0, 0.0, 1.0)) -> CameraPose:
    """World-to-camera pose for a camera at ``eye`` looking at ``target``.

    Camera convention: +z forward, +x right, +y down.  Degenerate when the
    view direction is parallel to ``up``.
    """
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    norm = np.linalg.norm(forward)
    if norm == 0:
        raise ConfigError("camera eye and target coincide")
    forward = forward / norm
    down = -np.asarray(up, dtype=np.float64)
    right = np.cross(down, forward)
    norm = np.linalg.norm(right)
    if norm < 1e-12:
        raise ConfigError("view direction is parallel to the up vector")
    right = right / norm
    down = np.cross(forward, right)
    r_cw = np.stack([right, down, forward], axis=1)  # camera axes as columns
    return CameraPose(r_cw.T, -r_cw.T @ eye)


@dataclass(frozen=True)
class SceneSpec:
    """Complete description of a synthetic scene."""

    width: int = 160
    height: int = 120
    intrinsics: CameraIntrinsics = field(
        default_factory=lambda: CameraIntrinsics(110.0, 110.0, 79.5, 59.5)
    )
    boxes: tuple[Box, ...] = ()
    planes: tuple[PlanePatch, ...] = ()
    poses: tuple[CameraPose, ...] = ()
    seed: int = 0
    depth_divisor: float = 1000.0
    max_depth: float = 10.0
    voxel_size: float = 0.05
    stride: int = 1
    perturb: PerturbOptions | None = None

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ConfigError(f"image size must be positive, got {self.width}x{self.height}")
        if not self.boxes and not self.planes:
            raise ConfigError("scene needs at least one primitive")
        if not self.poses:
            raise ConfigError("scene needs at least one camera pose")
        ids = [b.instance_id for b in self.boxes] + [p.instance_id for p in self.planes]
        if len(set(ids)) != len(ids):
            raise ConfigError("instance ids must be unique")

    @classmethod
    def from_json(cls, payload: dict) -> "SceneSpec":
        known = {
            "width", "height", "intrinsics", "boxes", "planes", "poses",
            "seed", "depth_divisor", "max_depth", "voxel_size", "stride", "perturb",
        }
        unknown = set(payload) - known
        if unknown:
            raise ConfigError(f"unknown scene spec keys: {sorted(unknown)}")
        intr = payload.get("intrinsics", {})
        boxes = tuple(
            Box(int(b["id"]), tuple(map(float, b["min"])), tuple(map(float, b["max"])))
            for b in payload.get("boxes", [])
        )
        planes = tuple(
            PlanePatch(
                int(p["id"]), str(p["axis"]), float(p["offset"]),
                tuple(map(float, p["min"])), tuple(map(float, p["max"])),
            )
            for p in payload.get("planes", [])
        )
        poses = []
        for entry in payload.get("poses", []):
            if "matrix" in entry:
                poses.append(
                    CameraPose.from_camera_to_world(np.array(entry["matrix"], dtype=np.float64))
                )
            else:
                poses.append(look_at_pose(entry["eye"], entry["target"], entry.get("up", (0, 0, 1))))
        perturb = None
        if payload.get("perturb"):
            perturb = PerturbOptions(
                split_prob=float(payload["perturb"].get("split_prob", 0.0)),
                permute_ids=bool(payload["perturb"].get("permute_ids", False)),
            )
        return cls(
            width=int(payload.get("width", 160)),
            height=int(payload.get("height", 120)),
            intrinsics=CameraIntrinsics(
                float(intr.get("fx", 110.0)), float(intr.get("fy", 110.0)),
                float(intr.get("cx", 79.5)), float(intr.get("cy", 59.5)),
            ),
            boxes=boxes,
            planes=planes,
            poses=tuple(poses),
            seed=int(payload.get("seed", 0)),
            depth_divisor=float(payload.get("depth_divisor", 1000.0)),
            max_depth=float(payload.get("max_depth", 10.0)),
            voxel_size=float(payload.get("voxel_size", 0.05)),
            stride=int(payload.get("stride", 1)),
            perturb=perturb,
        )

    def to_json(self) -> dict:
        out: dict = {
            "width": self.width,
            "height": self.height,
            "intrinsics": {
                "fx": self.intrinsics.fx, "fy": self.intrinsics.fy,
                "cx": self.intrinsics.cx, "cy": self.intrinsics.cy,
            },
            "boxes": [
                {"id": b.instance_id, "min": list(b.lo), "max": list(b.hi)} for b in self.boxes
            ],
            "planes": [
                {
                    "id": p.instance_id, "axis": p.axis, "offset": p.offset,
                    "min": list(p.lo), "max": list(p.hi),
                }
                for p in self.planes
            ],
            "poses": [
                {"matrix": pose.camera_to_world_matrix().tolist()} for pose in self.poses
            ],
            "seed": self.seed,
            "depth_divisor": self.depth_divisor,
            "max_depth": self.max_depth,
            "voxel_size": self.voxel_size,
            "stride": self.stride,
        }
        if self.perturb is not None:
            out["perturb"] = {
                "split_prob": self.perturb.split_prob,
                "permute_ids": self.perturb.permute_ids,
            }
        return out


def demo_scene_spec(
    n_boxes: int = 8,
    n_poses: int = 16,
    seed: int = 0,
    perturb: PerturbOptions | None = None,
) -> SceneSpec:
    """A ring of boxes orbited by the camera; the default synthetic scene."""
    if n_boxes < 1 or n_poses < 1:
        raise ConfigError("need at least one box and one pose")
    boxes = []
    ring_radius = 1.6
    half = 0.3
    for i in range(n_boxes):
        angle = 2.0 * np.pi * i / n_boxes
        cx, cy = ring_radius * np.cos(angle), ring_radius * np.sin(angle)
        boxes.append(
            Box(i + 1, (cx - half, cy - half, -half), (cx + half, cy + half, half))
        )
    poses = []
    for f in range(n_poses):
        angle = 2.0 * np.pi * (f + 0.5) / n_poses
        eye = (4.0 * np.cos(angle), 4.0 * np.sin(angle), 1.8)
        poses.append(look_at_pose(eye, (0.0, 0.0, 0.0)))
    return SceneSpec(boxes=tuple(boxes), poses=tuple(poses), seed=seed, perturb=perturb)


@dataclass(frozen=True)
class RenderedFrame:
    depth: DepthFrame
    gt_mask: MaskImage
    local_to_true: dict[int, int]


def _ray_cast(spec: SceneSpec, pose: CameraPose) -> tuple[np.ndarray, np.ndarray]:
    """Distance along camera z and true instance id, per pixel (inf/0 = miss)."""
    intr = spec.intrinsics
    u, v = np.meshgrid(
        np.arange(spec.width, dtype=np.float64), np.arange(spec.height, dtype=np.float64)
    )
    dirs_cam = np.stack(
        [(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], axis=-1
    )
    # dir_cam z is 1, so the ray parameter t equals camera-space depth.
    dirs = dirs_cam @ pose.rotation
    origin = -pose.rotation.T @ pose.translation
    t_best = np.full((spec.height, spec.width), np.inf)
    id_best = np.zeros((spec.height, spec.width), dtype=np.int64)

    def consider(t: np.ndarray, hit: np.ndarray, instance_id: int) -> None:
        closer = hit & (t > 1e-9) & (t < t_best)
        t_best[closer] = t[closer]
        id_best[closer] = instance_id

    with np.errstate(divide="ignore", invalid="ignore"):
        for box in spec.boxes:
            lo = (np.asarray(box.lo) - origin) / dirs
            hi = (np.asarray(box.hi) - origin) / dirs
            t_near = np.nanmax(np.minimum(lo, hi), axis=-1)
            t_far = np.nanmin(np.maximum(lo, hi), axis=-1)
            # A zero direction component gives 0/0 = nan when the origin
            # coordinate sits exactly on a face; nan comparisons are False,
            # which safely drops only those grazing rays.
            hit = t_near <= t_far
            consider(np.where(t_near > 0, t_near, t_far), hit, box.instance_id)
        for plane in spec.planes:
            axis = _AXES[plane.axis]
            others = [a for a in range(3) if a != axis]
            t = (plane.offset - origin[axis]) / dirs[..., axis]
            pt0 = origin[others[0]] + t * dirs[..., others[0]]
            pt1 = origin[others[1]] + t * dirs[..., others[1]]
            hit = (
                np.isfinite(t)
                & (pt0 >= plane.lo[0]) & (pt0 <= plane.hi[0])
                & (pt1 >= plane.lo[1]) & (pt1 <= plane.hi[1])
            )
            consider(t, hit, plane.instance_id)
    return t_best, id_best


def render_frame(spec: SceneSpec, pose_index: int) -> RenderedFrame:
    """Render one pose: quantized depth plus the ground-truth instance mask.

    Raw depth is floor(t * depth_divisor); hits that quantize to 0, exceed
    the 16-bit range, or lie beyond max_depth become invalid pixels and are
    masked out too.  Visible true ids are remapped to frame-local 1..k in
    ascending order.
    """
    if not (0 <= pose_index < len(spec.poses)):
        raise MalformedInputError(f"pose index {pose_index} out of range")
    t, true_id = _ray_cast(spec, spec.poses[pose_index])
    raw = np.zeros(t.shape, dtype=np.int64)
    ok = np.isfinite(t) & (t <= spec.max_depth)
    raw[ok] = np.floor(t[ok] * spec.depth_divisor).astype(np.int64)
    raw[raw > np.iinfo(np.uint16).max] = 0
    visible = raw > 0
    true_id = np.where(visible, true_id, 0)
    ids = np.unique(true_id)
    ids = ids[ids > 0]
    local = np.searchsorted(ids, true_id) + 1
    local[true_id == 0] = 0
    depth = DepthFrame(spec.width, spec.height, raw, spec.depth_divisor)
    mask = MaskImage(
        spec.width, spec.height, local, {rank + 1: 1.0 for rank in range(ids.size)}
    )
    return RenderedFrame(depth, mask, {rank + 1: int(tid) for rank, tid in enumerate(ids)})


def render_depth(spec: SceneSpec, pose_index: int) -> tuple[DepthFrame, MaskImage]:
    frame = render_frame(spec, pose_index)
    return frame.depth, frame.gt_mask


def perturb_masks(
    mask: MaskImage, options: PerturbOptions, rng: int | np.random.Generator
) -> MaskImage:
    """Split masks along a random pixel line and optionally permute their ids.

    Every output mask is a subset of exactly one input mask, so the induced
    pixel partition always refines the input.  Masks with no pixels keep an
    id but consume no randomness; masks that cannot be split (a single
    distinct coordinate on both axes) stay whole.
    """
    gen = np.random.default_rng(rng)
    out = np.zeros_like(mask.labels)
    conf: dict[int, float] = {}
    next_id = 1
    for mid in mask.mask_ids():
        pix = mask.labels == mid
        score = mask.confidences[mid]
        if not pix.any():
            conf[next_id] = score
            next_id += 1
            continue
        parts = [pix]
        if options.split_prob > 0 and gen.random() < options.split_prob:
            vs, us = np.nonzero(pix)
            axis = int(gen.integers(2))
            for ax in (axis, 1 - axis):
                coords = vs if ax == 0 else us
                distinct = np.unique(coords)
                if distinct.size < 2:
                    continue
                cut = distinct[int(gen.integers(1, distinct.size))]
                below = coords < cut
                a = np.zeros_like(pix)
                b = np.zeros_like(pix)
                a[vs[below], us[below]] = True
                b[vs[~below], us[~below]] = True
                parts = [a, b]
                break
        for part in parts:
            out[part] = next_id
            conf[next_id] = score
            next_id += 1
    if options.permute_ids and next_id > 1:
        k = next_id - 1
        perm = gen.permutation(k) + 1
        remap = np.zeros(k + 1, dtype=np.int64)
        remap[1:] = perm
        out = remap[out]
        conf = {int(perm[old - 1]): c for old, c in conf.items()}
    return MaskImage(mask.width, mask.height, out, conf)


@dataclass(frozen=True)
class MatchReport:
    """One-to-one instance matching outcome between two labelings."""

    mean_iou: float
    n_pred: int
    n_true: int
    matches: list[tuple[int, int, float]]  # (pred id, true id, iou), iou > 0

    @property
    def n_matched(self) -> int:
        return len(self.matches)

    def to_dict(self) -> dict:
        return {
            "mean_iou": self.mean_iou,
            "n_pred": self.n_pred,
            "n_true": self.n_true,
            "n_matched": self.n_matched,
            "matches": [
                {"pred": p, "true": t, "iou": i} for p, t, i in self.matches
            ],
        }


def hungarian_match_iou(pred: np.ndarray, true: np.ndarray) -> MatchReport:
    """Match predicted to true instances one-to-one, maximizing total IoU.

    Label 0 is background on both sides.  The mean is the sum of matched
    IoUs divided by the number of true instances, so unmatched true
    instances count as 0.  Matches with zero IoU are discarded.
    """
    pred = np.asarray(pred).reshape(-1)
    true = np.asarray(true).reshape(-1)
    if pred.shape != true.shape:
        raise MalformedInputError(
            f"labelings cover {pred.shape[0]} and {true.shape[0]} points"
        )
    pred_ids, pred_inv = np.unique(pred, return_inverse=True)
    true_ids, true_inv = np.unique(true, return_inverse=True)
    joint = np.zeros((pred_ids.size, true_ids.size), dtype=np.int64)
    np.add.at(joint, (pred_inv, true_inv), 1)
    pred_sizes = joint.sum(axis=1)
    true_sizes = joint.sum(axis=0)
    keep_p = pred_ids > 0
    keep_t = true_ids > 0
    inter = joint[np.ix_(keep_p, keep_t)].astype(np.float64)
    sizes_p = pred_sizes[keep_p].astype(np.float64)
    sizes_t = true_sizes[keep_t].astype(np.float64)
    ids_p = pred_ids[keep_p]
    ids_t = true_ids[keep_t]
    n_pred, n_true = ids_p.size, ids_t.size
    if n_true == 0:
        return MatchReport(1.0 if n_pred == 0 else 0.0, n_pred, 0, [])
    if n_pred == 0:
        return MatchReport(0.0, 0, n_true, [])
    union = sizes_p[:, None] + sizes_t[None, :] - inter
    iou = inter / union
    rows, cols = linear_sum_assignment(iou, maximize=True)
    matches = [
        (int(ids_p[r]), int(ids_t[c]), float(iou[r, c]))
        for r, c in zip(rows, cols)
        if iou[r, c] > 0
    ]
    mean = sum(m[2] for m in matches) / n_true
    return MatchReport(mean, n_pred, n_true, matches)


def ground_truth_cloud(spec: SceneSpec) -> LabeledCloud:
    """Lift every frame with true instance ids and fuse through the same
    pooled reduction tree the pipeline uses, so coordinates line up exactly
    with a run over the written scene at the spec's voxel/stride settings."""
    pool = PoolConfig(spec.voxel_size)
    clouds = []
    for f in range(len(spec.poses)):
        rendered = render_frame(spec, f)
        pixels, points = unproject_frame(
            rendered.depth, spec.intrinsics, spec.poses[f], spec.stride, spec.max_depth
        )
        local = rendered.gt_mask.labels[pixels[:, 1], pixels[:, 0]]
        remap = np.zeros(max(rendered.local_to_true, default=0) + 1, dtype=np.int64)
        for loc, true in rendered.local_to_true.items():
            remap[loc] = true
        clouds.append(grid_pool(LabeledCloud(points, remap[local]), pool))
    for level in pair_schedule(len(clouds)):
        merged = [grid_pool(concat_clouds(clouds[a], clouds[b]), pool) for a, b in level]
        if len(clouds) % 2:
            merged.append(clouds[-1])
        clouds = merged
    return clouds[0]


def write_synthetic_scene(spec: SceneSpec, out_dir: Path | str) -> Path:
    """Write a loadable scene directory plus spec.json and gt.ply.

    Mask perturbation (if configured) applies only to the emitted masks;
    gt.ply always carries true instance ids.  Output is a pure function of
    the spec, including its seed.
    """
    out = Path(out_dir)
    for sub in ("depth", "pose", "masks"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    save_matrix_text(out / "intrinsic.txt", _intrinsic_matrix4(spec.intrinsics))
    seeds = np.random.SeedSequence(spec.seed).spawn(len(spec.poses))
    for f in range(len(spec.poses)):
        rendered = render_frame(spec, f)
        mask = rendered.gt_mask
        if spec.perturb is not None:
            mask = perturb_masks(mask, spec.perturb, np.random.default_rng(seeds[f]))
        name = f"{f:05d}"
        save_depth_png(out / "depth" / f"{name}.png", rendered.depth)
        save_pose(out / "pose" / f"{name}.txt", spec.poses[f])
        save_mask_image(out / "masks" / f"{name}.png", out / "masks" / f"{name}.json", mask)
    write_ply(out / "gt.ply", ground_truth_cloud(spec))
    (out / "spec.json").write_text(json.dumps(spec.to_json(), sort_keys=True, indent=2) + "\n")
    return out


def _intrinsic_matrix4(intr: CameraIntrinsics) -> np.ndarray:
    m = np.eye(4)
    m[:3, :3] = intr.matrix()
    return m
