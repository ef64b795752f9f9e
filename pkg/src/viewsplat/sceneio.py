"""Persistence: scene manifests, images, checkpoints, splat files, synth data.

All binary formats are little-endian and every writer has a loader whose
round trip is lossless (bytes for checkpoints and splat files, 8-bit
quantization for PNGs).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .autodiff import Tensor
from .cameras import Camera, Intrinsics, Pose, SceneNormalization, lookat_pose
from .decoder import GaussianSet
from .errors import FormatError, ValidationError
from .model import Model, ModelConfig
from .renderer import make_frame, project, quaternion_to_matrix, rasterize_tiled
from .training import SceneSample

SH_DC = 0.28209479177387814

PLY_PROPERTIES = (
    "x", "y", "z", "nx", "ny", "nz",
    "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
    "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
)

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


# -- images -----------------------------------------------------------------------

def write_png(path, image: np.ndarray) -> None:
    """8-bit RGB PNG from a [0,1] float image."""
    quant = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(quant, mode="RGB").save(path)


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def write_image_f32(path, image: np.ndarray) -> None:
    """Raw float32 dump for loss-exactness comparisons."""
    np.save(path, np.asarray(image, dtype=np.float32))


def read_image_f32(path) -> np.ndarray:
    return np.load(path)


# -- scene manifests -----------------------------------------------------------------

def save_manifest(path, scene: SceneSample, image_paths: list[str]) -> None:
    views = []
    for cam, rel in zip(scene.cameras, image_paths):
        intr = cam.intrinsics
        views.append({
            "image_path": rel,
            "fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy,
            "width": intr.width, "height": intr.height,
            "c2w": [float(v) for v in cam.pose.matrix().reshape(-1)],
        })
    doc = {"name": scene.name, "near": scene.near, "far": scene.far, "views": views}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))


def load_manifest(path) -> SceneSample:
    """Read a manifest and its images; image paths resolve relative to it."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest at {path}")
    doc = json.loads(path.read_text())
    cameras, images = [], []
    for view in doc["views"]:
        m = np.asarray(view["c2w"], dtype=np.float64).reshape(4, 4)
        R = m[:3, :3]
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-4:
            raise ValidationError(f"{view['image_path']}: rotation block not orthonormal")
        pose = Pose(R, m[:3, 3], tol=1e-4).orthonormalized()
        cameras.append(Camera(
            Intrinsics(view["fx"], view["fy"], view["cx"], view["cy"],
                       view["width"], view["height"]),
            pose,
        ))
        img_path = path.parent / view["image_path"]
        if not img_path.exists():
            raise FileNotFoundError(f"image {img_path} referenced by manifest is missing")
        images.append(read_png(img_path))
    return SceneSample(cameras, images, near=doc["near"], far=doc["far"],
                       name=doc.get("name", path.parent.name))


# -- checkpoints ------------------------------------------------------------------------

def save_checkpoint(path, model: Model) -> None:
    """Header-length u64, JSON header (config + tensor table), raw payload."""
    params = model.parameters()
    header: dict = {"__config__": json.loads(model.config.to_json())}
    offset = 0
    blobs = []
    for name in sorted(params):
        t = params[name]
        dtype = "f64" if t.dtype == np.float64 else "f32"
        data = np.ascontiguousarray(t.data, dtype=_DTYPES[dtype])
        header[name] = {"dtype": dtype, "shape": list(t.shape), "offset": offset}
        blobs.append(data.tobytes())
        offset += len(blobs[-1])
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)


def _read_header(path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated before header length (8 bytes needed)")
    (hlen,) = struct.unpack("<Q", raw[:8])
    if 8 + hlen > len(raw):
        raise FormatError(f"{path}: header length {hlen} overruns file at byte 8")
    header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    return header, raw[8 + hlen:]


def load_checkpoint(path, config_override: ModelConfig | None = None) -> Model:
    """Rebuild a model bit-exactly; offsets are validated before reading."""
    header, payload = _read_header(path)
    cfg_doc = header.pop("__config__", None)
    if cfg_doc is None:
        raise FormatError(f"{path}: header is missing __config__")
    config = config_override or ModelConfig.from_dict(cfg_doc)

    entries = sorted(header.items(), key=lambda kv: kv[1]["offset"])
    cursor = 0
    for name, meta in entries:
        if meta["dtype"] not in _DTYPES:
            raise FormatError(f"{path}: unknown dtype {meta['dtype']!r} for {name}")
        if meta["offset"] != cursor:
            raise FormatError(
                f"{path}: offset gap before {name!r} at byte {8 + cursor}"
            )
        cursor += int(np.prod(meta["shape"])) * _DTYPES[meta["dtype"]].itemsize
    if cursor != len(payload):
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, header describes {cursor}"
        )

    dtype = np.float64 if entries and entries[0][1]["dtype"] == "f64" else np.float32
    model = Model.create(config, seed=0, dtype=dtype)
    params = model.parameters()
    missing = set(params) - set(header)
    extra = set(header) - set(params)
    if missing or extra:
        raise FormatError(
            f"{path}: parameter names do not match config (missing {sorted(missing)[:3]},"
            f" extra {sorted(extra)[:3]})"
        )
    for name, meta in entries:
        t = params[name]
        shape = tuple(meta["shape"])
        if t.shape != shape:
            raise FormatError(
                f"{path}: shape conflict for {name!r}: file {shape} vs config {t.shape}"
            )
        np_dtype = _DTYPES[meta["dtype"]]
        start = meta["offset"]
        count = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype=np_dtype, count=count, offset=start)
        t.data = np.ascontiguousarray(arr.reshape(shape), dtype=t.dtype)
    return model


# -- splat files (binary PLY) ----------------------------------------------------------

def _ply_header(count: int) -> bytes:
    lines = ["ply", "format binary_little_endian 1.0", f"element vertex {count}"]
    lines += [f"property float {name}" for name in PLY_PROPERTIES]
    lines.append("end_header")
    return ("\n".join(lines) + "\n").encode("ascii")


def save_splats(path, gaussians: GaussianSet) -> None:
    """3DGS-interop PLY: logit opacity, log scales, SH-DC colors, zero normals."""
    n = len(gaussians)
    rec = np.zeros(n, dtype=[(name, "<f4") for name in PLY_PROPERTIES])
    means = gaussians.means.numpy().astype(np.float64)
    rec["x"], rec["y"], rec["z"] = means[:, 0], means[:, 1], means[:, 2]
    color = gaussians.color.numpy().astype(np.float64)
    for i in range(3):
        rec[f"f_dc_{i}"] = (color[:, i] - 0.5) / SH_DC
    alpha = gaussians.opacity.numpy().astype(np.float64)
    with np.errstate(divide="ignore"):
        rec["opacity"] = np.log(alpha / (1.0 - alpha))
    scale = gaussians.scale.numpy().astype(np.float64)
    for i in range(3):
        rec[f"scale_{i}"] = np.log(scale[:, i])
    quat = gaussians.rotation.numpy().astype(np.float64)
    for i in range(4):
        rec[f"rot_{i}"] = quat[:, i]
    with open(path, "wb") as fh:
        fh.write(_ply_header(n))
        fh.write(rec.tobytes())


def load_splats(path) -> GaussianSet:
    """Inverse of save_splats; the property order must match bit-exactly."""
    raw = Path(path).read_bytes()
    marker = b"end_header\n"
    pos = raw.find(marker)
    if pos < 0:
        raise FormatError(f"{path}: no end_header marker")
    header_lines = raw[:pos].decode("ascii", errors="replace").splitlines()
    if not header_lines or header_lines[0] != "ply":
        raise FormatError(f"{path}: not a PLY file")
    if "format binary_little_endian 1.0" not in header_lines[1]:
        raise FormatError(f"{path}: expected binary_little_endian 1.0")
    counts = [ln for ln in header_lines if ln.startswith("element vertex ")]
    if len(counts) != 1:
        raise FormatError(f"{path}: expected exactly one vertex element")
    n = int(counts[0].rsplit(" ", 1)[1])
    props = [ln.split(" ", 2)[2] for ln in header_lines if ln.startswith("property ")]
    if tuple(props) != PLY_PROPERTIES:
        raise FormatError(
            f"{path}: property order {props} does not match the splat contract"
        )
    body = raw[pos + len(marker):]
    expected = n * 17 * 4
    if len(body) != expected:
        raise FormatError(
            f"{path}: body is {len(body)} bytes, expected {expected} at byte {pos + len(marker)}"
        )
    rec = np.frombuffer(body, dtype=[(name, "<f4") for name in PLY_PROPERTIES], count=n)
    means = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    color = np.stack([rec[f"f_dc_{i}"] for i in range(3)], axis=1).astype(np.float64)
    color = color * SH_DC + 0.5
    alpha = 1.0 / (1.0 + np.exp(-rec["opacity"].astype(np.float64)))
    scale = np.exp(np.stack([rec[f"scale_{i}"] for i in range(3)], axis=1).astype(np.float64))
    quat = np.stack([rec[f"rot_{i}"] for i in range(4)], axis=1).astype(np.float64)
    return GaussianSet.from_arrays(means, alpha, scale, quat, color)


# -- world-space transforms ---------------------------------------------------------------

def _matrix_to_quaternion(R: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion wxyz (single matrix)."""
    t = np.trace(R)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        return np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s,
                         (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    i = int(np.argmax(np.diag(R)))
    j, k = (i + 1) % 3, (i + 2) % 3
    s = np.sqrt(R[i, i] - R[j, j] - R[k, k] + 1.0) * 2
    q = np.empty(4)
    q[0] = (R[k, j] - R[j, k]) / s
    q[1 + i] = 0.25 * s
    q[1 + j] = (R[j, i] + R[i, j]) / s
    q[1 + k] = (R[k, i] + R[i, k]) / s
    return q / np.linalg.norm(q)


def _quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product: rows of b rotated-composed with single quaternion a."""
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b[:, 0], b[:, 1], b[:, 2], b[:, 3]
    return np.stack([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ], axis=1)


def denormalize_gaussians(gaussians: GaussianSet, norm: SceneNormalization) -> GaussianSet:
    """Map Gaussians from the normalized frame back to the raw world."""
    means = gaussians.means.numpy()
    raw_means = (norm.scale * means - norm.translation) @ norm.rotation
    q_ref = _matrix_to_quaternion(norm.rotation.T)
    return GaussianSet.from_arrays(
        means=raw_means,
        opacity=gaussians.opacity.numpy(),
        scale=norm.scale * gaussians.scale.numpy(),
        rotation=_quat_multiply(q_ref, gaussians.rotation.numpy()),
        color=gaussians.color.numpy(),
    )


# -- synthetic scenes -----------------------------------------------------------------------

def random_gaussian_set(rng: np.random.Generator, n: int) -> GaussianSet:
    quat = rng.standard_normal((max(n, 1), 4))
    quat /= np.linalg.norm(quat, axis=1, keepdims=True)
    g = GaussianSet.from_arrays(
        means=rng.uniform(-0.8, 0.8, (n, 3)),
        opacity=rng.uniform(0.35, 0.95, n),
        scale=rng.uniform(0.04, 0.16, (n, 3)),
        rotation=quat[:n],
        color=rng.uniform(0.05, 0.95, (n, 3)),
    )
    return g


def arc_cameras(rng: np.random.Generator, n_views: int, height: int, width: int,
                radius: float = 2.6) -> list[Camera]:
    """Jittered arc of inward-facing cameras around the scene."""
    cams = []
    for i in range(n_views):
        ang = -0.9 + 1.8 * i / max(n_views - 1, 1) + rng.uniform(-0.05, 0.05)
        lift = rng.uniform(-0.25, 0.25)
        pos = radius * np.array([np.sin(ang), lift, -np.cos(ang)])
        intr = Intrinsics(1.1 * width, 1.1 * height, width / 2, height / 2, width, height)
        cams.append(Camera(intr, lookat_pose(pos)))
    return cams


@dataclass
class SynthScene:
    directory: Path
    scene: SceneSample
    gaussians: GaussianSet


def synth_scene(out_dir, seed: int = 0, n_views: int = 6, height: int = 32,
                width: int = 32, n_gaussians: int = 96) -> SynthScene:
    """Generate a fully deterministic synthetic dataset.

    Writes manifest.json, per-view PNGs plus raw f32 dumps, and the
    ground-truth splat file. Ground-truth images are rendered from the
    reloaded splat file, so re-rendering from disk is bit-exact.
    """
    if n_views < 2:
        raise ValidationError("synthetic scenes need at least 2 views")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    gaussians = random_gaussian_set(rng, n_gaussians)
    save_splats(out / "ground_truth.ply", gaussians)
    gaussians = load_splats(out / "ground_truth.ply")

    cameras = arc_cameras(rng, n_views, height, width)
    images = []
    image_paths = []
    for i, cam in enumerate(cameras):
        target = rasterize_tiled(project(gaussians, cam), make_frame(width, height))
        images.append(target.image.astype(np.float32))
        name = f"view_{i:03d}"
        write_png(out / f"{name}.png", target.image)
        write_image_f32(out / f"{name}.npy", target.image)
        image_paths.append(f"{name}.png")

    scene = SceneSample(cameras, images, near=0.5, far=8.0, name=out.name)
    save_manifest(out / "manifest.json", scene, image_paths)
    return SynthScene(out, scene, gaussians)
