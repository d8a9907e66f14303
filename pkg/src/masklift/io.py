"""Scene directory loading and on-disk formats (PNG depth/masks, text poses, PLY).

A scene directory looks like::

    scene/
      intrinsic.txt          4x4 (or 3x3) whitespace-separated intrinsic matrix
      depth/<frame>.png      16-bit single-channel PNG, raw sensor units
      pose/<frame>.txt       4x4 camera-to-world matrix, row-major text
      masks/<frame>.png      16-bit label PNG with <frame>.json confidences
      masks/<frame>/         (alternative) 8-bit binary PNGs + scores.json

Frame names are zero-padded integers; the integer is the frame id and frames
are processed in ascending id order.  Frames with missing or unparsable
files are skipped with a warning, or fail the whole load in strict mode.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import CameraIntrinsics, CameraPose, DepthFrame, DEFAULT_DEPTH_DIVISOR
from .cloud import LabeledCloud
from .errors import MalformedInputError, PlyParseError, SceneLoadError
from .lift import MaskImage, RawMaskSet, resolve_overlaps

log = logging.getLogger("masklift")


def load_matrix_text(path: Path | str, rows: int, cols: int) -> np.ndarray:
    path = Path(path)
    try:
        values = [float(tok) for tok in path.read_text().split()]
    except OSError as e:
        raise SceneLoadError(f"cannot read {path}: {e}") from e
    except ValueError as e:
        raise MalformedInputError(f"{path}: non-numeric value ({e})") from e
    if len(values) != rows * cols:
        raise MalformedInputError(
            f"{path}: expected {rows * cols} numbers, found {len(values)}"
        )
    return np.array(values, dtype=np.float64).reshape(rows, cols)


def save_matrix_text(path: Path | str, matrix: np.ndarray) -> None:
    lines = [" ".join(format(v, ".17g") for v in row) for row in np.asarray(matrix)]
    Path(path).write_text("\n".join(lines) + "\n")


def load_intrinsics(path: Path | str) -> CameraIntrinsics:
    path = Path(path)
    try:
        values = [float(tok) for tok in path.read_text().split()]
    except OSError as e:
        raise SceneLoadError(f"cannot read intrinsics {path}: {e}") from e
    except ValueError as e:
        raise MalformedInputError(f"{path}: non-numeric value ({e})") from e
    if len(values) == 16:
        m = np.array(values).reshape(4, 4)
    elif len(values) == 9:
        m = np.array(values).reshape(3, 3)
    else:
        raise MalformedInputError(f"{path}: expected a 3x3 or 4x4 matrix")
    return CameraIntrinsics.from_matrix(m)


def load_pose(path: Path | str) -> CameraPose:
    return CameraPose.from_camera_to_world(load_matrix_text(path, 4, 4))


def save_pose(path: Path | str, pose: CameraPose) -> None:
    save_matrix_text(path, pose.camera_to_world_matrix())


def load_depth_png(path: Path | str, depth_divisor: float = DEFAULT_DEPTH_DIVISOR) -> DepthFrame:
    path = Path(path)
    try:
        with Image.open(path) as img:
            if img.mode not in ("I;16", "I", "L"):
                raise SceneLoadError(f"{path}: depth PNG must be single-channel, got mode {img.mode}")
            arr = np.asarray(img)
    except (OSError, SyntaxError) as e:
        raise SceneLoadError(f"cannot read depth {path}: {e}") from e
    return DepthFrame(arr.shape[1], arr.shape[0], arr.astype(np.int64), depth_divisor)


def save_depth_png(path: Path | str, frame: DepthFrame) -> None:
    raw = frame.raw
    if raw.max(initial=0) > np.iinfo(np.uint16).max:
        raise MalformedInputError("raw depth exceeds 16-bit range")
    Image.fromarray(raw.astype(np.uint16)).save(Path(path), format="PNG")


def load_label_png(path: Path | str) -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as img:
            if img.mode not in ("I;16", "I", "L", "P"):
                raise SceneLoadError(f"{path}: label PNG must be single-channel, got mode {img.mode}")
            if img.mode == "P":
                img = img.convert("L")
            arr = np.asarray(img)
    except (OSError, SyntaxError) as e:
        raise SceneLoadError(f"cannot read mask {path}: {e}") from e
    return arr.astype(np.int64)


def save_label_png(path: Path | str, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.max(initial=0) > np.iinfo(np.uint16).max:
        raise MalformedInputError("label image exceeds 16-bit range")
    Image.fromarray(labels.astype(np.uint16)).save(Path(path), format="PNG")


def load_mask_image(png_path: Path | str, json_path: Path | str) -> MaskImage:
    labels = load_label_png(png_path)
    try:
        raw_conf = json.loads(Path(json_path).read_text())
    except OSError as e:
        raise SceneLoadError(f"cannot read confidences {json_path}: {e}") from e
    except json.JSONDecodeError as e:
        raise SceneLoadError(f"{json_path}: invalid JSON ({e})") from e
    if not isinstance(raw_conf, dict):
        raise MalformedInputError(f"{json_path}: expected an object mapping mask id to confidence")
    try:
        conf = {int(k): float(v) for k, v in raw_conf.items()}
    except (TypeError, ValueError) as e:
        raise MalformedInputError(f"{json_path}: bad confidence entry ({e})") from e
    return MaskImage(labels.shape[1], labels.shape[0], labels, conf)


def save_mask_image(png_path: Path | str, json_path: Path | str, mask: MaskImage) -> None:
    save_label_png(png_path, mask.labels)
    payload = {str(k): mask.confidences[k] for k in sorted(mask.confidences)}
    Path(json_path).write_text(json.dumps(payload, sort_keys=True) + "\n")


def load_binary_mask_dir(mask_dir: Path | str) -> MaskImage:
    """Load a directory of 8-bit binary mask PNGs (255 = member).

    ``scores.json`` must hold a list of floats aligned with the PNG
    filenames in sorted order; that order also assigns frame-local IDs
    1..K.  Overlaps are resolved by score (ties to the smaller ID).
    """
    mask_dir = Path(mask_dir)
    png_paths = sorted(p for p in mask_dir.glob("*.png"))
    if not png_paths:
        raise SceneLoadError(f"{mask_dir}: no mask PNGs")
    scores_path = mask_dir / "scores.json"
    try:
        scores = json.loads(scores_path.read_text())
    except OSError as e:
        raise SceneLoadError(f"cannot read scores {scores_path}: {e}") from e
    except json.JSONDecodeError as e:
        raise SceneLoadError(f"{scores_path}: invalid JSON ({e})") from e
    if not isinstance(scores, list) or len(scores) != len(png_paths):
        raise MalformedInputError(
            f"{scores_path}: expected a list of {len(png_paths)} scores"
        )
    layers = []
    for p in png_paths:
        try:
            with Image.open(p) as img:
                if img.mode != "L":
                    raise SceneLoadError(f"{p}: binary mask PNG must be 8-bit, got mode {img.mode}")
                layers.append(np.asarray(img) == 255)
        except (OSError, SyntaxError) as e:
            raise SceneLoadError(f"cannot read mask {p}: {e}") from e
    shapes = {layer.shape for layer in layers}
    if len(shapes) != 1:
        raise MalformedInputError(f"{mask_dir}: mask PNGs have differing sizes {sorted(shapes)}")
    stack = np.stack(layers)
    raw = RawMaskSet(stack.shape[2], stack.shape[1], stack, np.array(scores, dtype=np.float64))
    return resolve_overlaps(raw)


@dataclass(frozen=True)
class FrameRecord:
    frame_id: int
    name: str
    depth_path: Path
    pose_path: Path
    mask_path: Path  # label PNG, or a directory of binary masks
    conf_path: Path | None
    pose: CameraPose


@dataclass
class SceneDataset:
    root: Path
    intrinsics: CameraIntrinsics
    records: list[FrameRecord]
    depth_divisor: float = DEFAULT_DEPTH_DIVISOR
    warnings: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def load_depth(self, record: FrameRecord) -> DepthFrame:
        return load_depth_png(record.depth_path, self.depth_divisor)

    def load_masks(self, record: FrameRecord) -> MaskImage:
        if record.mask_path.is_dir():
            return load_binary_mask_dir(record.mask_path)
        assert record.conf_path is not None
        return load_mask_image(record.mask_path, record.conf_path)


def load_scene(
    root: Path | str,
    depth_divisor: float = DEFAULT_DEPTH_DIVISOR,
    frame_stride: int = 1,
    strict: bool = False,
) -> SceneDataset:
    """Index a scene directory, validating poses up front.

    Incomplete or unparsable frames are skipped with a warning (strict mode
    turns any skip into a SceneLoadError).  ``frame_stride`` keeps every
    N-th frame of the ascending id order.
    """
    root = Path(root)
    if not root.is_dir():
        raise SceneLoadError(f"scene directory {root} does not exist")
    if frame_stride < 1:
        raise MalformedInputError(f"frame stride must be >= 1, got {frame_stride}")
    intrinsics = load_intrinsics(root / "intrinsic.txt")
    depth_dir = root / "depth"
    if not depth_dir.is_dir():
        raise SceneLoadError(f"{root}: missing depth/ directory")

    warnings: list[str] = []

    def skip(msg: str) -> None:
        if strict:
            raise SceneLoadError(msg)
        warnings.append(msg)
        log.warning("%s", msg)

    candidates = []
    for depth_path in sorted(depth_dir.glob("*.png")):
        try:
            frame_id = int(depth_path.stem)
        except ValueError:
            skip(f"{depth_path}: frame name is not an integer; skipped")
            continue
        candidates.append((frame_id, depth_path.stem, depth_path))
    candidates.sort()

    records: list[FrameRecord] = []
    seen: set[int] = set()
    for frame_id, name, depth_path in candidates:
        if frame_id in seen:
            skip(f"{depth_path}: duplicate frame id {frame_id}; skipped")
            continue
        pose_path = root / "pose" / f"{name}.txt"
        if not pose_path.is_file():
            skip(f"frame {name}: missing pose file; skipped")
            continue
        mask_png = root / "masks" / f"{name}.png"
        mask_dir = root / "masks" / name
        conf_path: Path | None = None
        if mask_png.is_file():
            conf_path = root / "masks" / f"{name}.json"
            if not conf_path.is_file():
                skip(f"frame {name}: mask PNG without confidence JSON; skipped")
                continue
            mask_path = mask_png
        elif mask_dir.is_dir():
            mask_path = mask_dir
        else:
            skip(f"frame {name}: missing masks; skipped")
            continue
        try:
            pose = load_pose(pose_path)
        except (SceneLoadError, MalformedInputError, ValueError) as e:
            skip(f"frame {name}: bad pose ({e}); skipped")
            continue
        seen.add(frame_id)
        records.append(FrameRecord(frame_id, name, depth_path, pose_path, mask_path, conf_path, pose))

    records = records[::frame_stride]
    if not records:
        raise SceneLoadError(f"{root}: no usable frames")
    return SceneDataset(root, intrinsics, records, depth_divisor, warnings)


# --- PLY ---------------------------------------------------------------

_PLY_DTYPES = {
    "float": "<f4",
    "float32": "<f4",
    "double": "<f8",
    "float64": "<f8",
    "uchar": "u1",
    "uint8": "u1",
    "ushort": "<u2",
    "uint16": "<u2",
    "uint": "<u4",
    "uint32": "<u4",
    "int": "<i4",
    "int32": "<i4",
}


def label_colors(labels: np.ndarray) -> np.ndarray:
    """Deterministic RGB per label (label 0 is black)."""
    h = labels.astype(np.uint64)
    h = (h ^ (h >> np.uint64(33))) * np.uint64(0xFF51AFD7ED558CCD)
    h = (h ^ (h >> np.uint64(33))) * np.uint64(0xC4CEB9FE1A85EC53)
    h = h ^ (h >> np.uint64(33))
    rgb = np.stack(
        [(h >> np.uint64(16)) & np.uint64(255), (h >> np.uint64(8)) & np.uint64(255), h & np.uint64(255)],
        axis=1,
    ).astype(np.uint8)
    rgb[labels == 0] = 0
    return rgb


def write_ply(path: Path | str, cloud: LabeledCloud) -> None:
    """Write a labeled cloud as binary little-endian PLY.

    Properties: float x/y/z, uint label, uchar red/green/blue.  Colors are a
    pure function of the label, so identical clouds give identical bytes.
    """
    if cloud.labels.size and cloud.labels.max() > np.iinfo(np.uint32).max:
        raise MalformedInputError("labels exceed uint32 range")
    dtype = np.dtype(
        [
            ("x", "<f4"),
            ("y", "<f4"),
            ("z", "<f4"),
            ("label", "<u4"),
            ("red", "u1"),
            ("green", "u1"),
            ("blue", "u1"),
        ]
    )
    data = np.empty(len(cloud), dtype=dtype)
    data["x"] = cloud.points[:, 0]
    data["y"] = cloud.points[:, 1]
    data["z"] = cloud.points[:, 2]
    data["label"] = cloud.labels.astype(np.uint32)
    rgb = label_colors(cloud.labels)
    data["red"], data["green"], data["blue"] = rgb[:, 0], rgb[:, 1], rgb[:, 2]
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {len(cloud)}\n"
        "property float x\n"
        "property float y\n"
        "property float z\n"
        "property uint label\n"
        "property uchar red\n"
        "property uchar green\n"
        "property uchar blue\n"
        "end_header\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(data.tobytes())


def read_ply(path: Path | str) -> LabeledCloud:
    """Read a binary little-endian PLY with at least x/y/z/label properties."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise SceneLoadError(f"cannot read {path}: {e}") from e
    end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply\n") or end < 0:
        raise PlyParseError(f"{path} is not a PLY file", line=1)
    header_lines = blob[:end].decode("latin-1").splitlines()
    fields: list[tuple[str, str]] = []
    count = None
    in_vertex = False
    for lineno, line in enumerate(header_lines[1:], start=2):
        tokens = line.split()
        if not tokens or tokens[0] == "comment":
            continue
        if tokens[0] == "format":
            if tokens[1:2] != ["binary_little_endian"]:
                raise PlyParseError(f"unsupported format {' '.join(tokens[1:])}", line=lineno)
        elif tokens[0] == "element":
            if len(tokens) != 3:
                raise PlyParseError("malformed element line", line=lineno)
            in_vertex = tokens[1] == "vertex"
            if in_vertex:
                try:
                    count = int(tokens[2])
                except ValueError:
                    raise PlyParseError(f"bad vertex count {tokens[2]!r}", line=lineno) from None
        elif tokens[0] == "property" and in_vertex:
            if len(tokens) != 3 or tokens[1] not in _PLY_DTYPES:
                raise PlyParseError(f"unsupported property {line.strip()!r}", line=lineno)
            fields.append((tokens[2], _PLY_DTYPES[tokens[1]]))
    if count is None:
        raise PlyParseError("no vertex element", line=len(header_lines))
    names = [n for n, _ in fields]
    for required in ("x", "y", "z", "label"):
        if required not in names:
            raise PlyParseError(f"missing property {required!r}", line=len(header_lines))
    dtype = np.dtype(fields)
    body = blob[end + len(b"end_header\n"):]
    if len(body) < count * dtype.itemsize:
        raise PlyParseError(
            f"body holds {len(body)} bytes, expected {count * dtype.itemsize}", line=len(header_lines)
        )
    data = np.frombuffer(body, dtype=dtype, count=count)
    points = np.stack([data["x"], data["y"], data["z"]], axis=1).astype(np.float32)
    return LabeledCloud(points, data["label"].astype(np.int64))


def write_segments_text(path: Path | str, segment_id: np.ndarray) -> None:
    """One segment id per line, aligned with the point order of the scene PLY."""
    Path(path).write_text("".join(f"{int(s)}\n" for s in segment_id))


def read_segments_text(path: Path | str) -> np.ndarray:
    path = Path(path)
    try:
        lines = path.read_text().split()
    except OSError as e:
        raise SceneLoadError(f"cannot read {path}: {e}") from e
    try:
        return np.array([int(tok) for tok in lines], dtype=np.int64)
    except ValueError as e:
        raise MalformedInputError(f"{path}: non-integer segment id ({e})") from e
