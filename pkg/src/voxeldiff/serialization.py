"""On-disk formats: voxel grids, raw images, checkpoints, posed datasets.

All binary payloads are little-endian float64 and round-trip bit-exactly.

- voxel grid: b"HFVG" | u32 version | u32 S | u32 d | 6 f64 extent
  | features f64 in (channel, z, y, x) order
- raw image:  text header b"HFIMG H W C\\n" | f64 row-major
- checkpoint: b"HFCK" | u32 version | u32 count | per entry:
  u16 name length | name utf-8 | u32 ndim | u32 dims... | f64 data
- posed dataset: directory with manifest.json listing per frame an image
  path and the 16 row-major projection matrix numbers
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError, ValidationError
from .field import VoxelGrid
from .render import Camera
from .tensor import Tensor
from .unproject import PosedImage

GRID_MAGIC = b"HFVG"
IMAGE_MAGIC = b"HFIMG"
CHECKPOINT_MAGIC = b"HFCK"
FORMAT_VERSION = 1


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file while reading {what}")
    return buf


def save_grid(path, grid: VoxelGrid) -> None:
    lo, hi = grid.extent
    with open(path, "wb") as f:
        f.write(GRID_MAGIC)
        f.write(struct.pack("<III", FORMAT_VERSION, grid.resolution, grid.channels))
        f.write(struct.pack("<6d", lo, lo, lo, hi, hi, hi))
        f.write(np.ascontiguousarray(grid.features.data, dtype="<f8").tobytes())


def load_grid(path) -> VoxelGrid:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != GRID_MAGIC:
            raise FormatError(f"bad magic {magic!r}; expected {GRID_MAGIC!r}")
        version, s, d = struct.unpack("<III", _read_exact(f, 12, "header"))
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported grid version {version}")
        ext = struct.unpack("<6d", _read_exact(f, 48, "extent"))
        n = d * s * s * s
        data = np.frombuffer(_read_exact(f, 8 * n, "features"), dtype="<f8")
    features = data.astype(np.float64).reshape(d, s, s, s)
    return VoxelGrid(s, d, Tensor(features), (ext[0], ext[3]))


def save_image_raw(path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, c = img.shape
    with open(path, "wb") as f:
        f.write(f"HFIMG {h} {w} {c}\n".encode())
        f.write(np.ascontiguousarray(img, dtype="<f8").tobytes())


def load_image_raw(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline()
        parts = header.split()
        if not parts or parts[0] != IMAGE_MAGIC:
            raise FormatError(f"bad magic {parts[:1]!r}; expected {IMAGE_MAGIC!r}")
        if len(parts) != 4:
            raise FormatError("malformed raw image header")
        h, w, c = (int(p) for p in parts[1:])
        data = np.frombuffer(_read_exact(f, 8 * h * w * c, "pixels"), dtype="<f8")
    return data.astype(np.float64).reshape(h, w, c)


def save_image_png(path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    quantized = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(quantized, mode="RGB").save(path)


def load_image_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_image(path, image) -> None:
    """Dispatch on extension: .png quantized preview, anything else raw."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        save_image_png(path, image)
    else:
        save_image_raw(path, image)


def load_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".png":
        return load_image_png(path)
    return load_image_raw(path)


def save_checkpoint(path, params: dict) -> None:
    """Write named parameter arrays; accepts tensors or arrays as values."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(params)))
        for name in sorted(params):
            arr = params[name]
            arr = np.ascontiguousarray(arr.data if isinstance(arr, Tensor) else arr, dtype="<f8")
            encoded = name.encode()
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> dict:
    out = {}
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad magic {magic!r}; expected {CHECKPOINT_MAGIC!r}")
        version, count = struct.unpack("<II", _read_exact(f, 8, "header"))
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
            name = _read_exact(f, name_len, "name").decode()
            (ndim,) = struct.unpack("<I", _read_exact(f, 4, "ndim"))
            shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim, "shape"))
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(_read_exact(f, 8 * n, name), dtype="<f8")
            out[name] = data.astype(np.float64).reshape(shape)
    return out


def save_dataset(directory, frames, near=None, far=None) -> None:
    """Write posed frames: raw images plus a manifest with projections."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if not frames:
        raise ValidationError("cannot save an empty dataset")
    entries = []
    for i, frame in enumerate(frames):
        name = f"frame_{i:03d}.raw"
        save_image_raw(directory / name, frame.image)
        save_image_png(directory / f"frame_{i:03d}.png", frame.image)
        entries.append(
            {"image": name, "projection": [float(x) for x in frame.camera.matrix.ravel()]}
        )
    cam0 = frames[0].camera
    manifest = {
        "image_size": [cam0.height, cam0.width],
        "near": cam0.near if near is None else near,
        "far": cam0.far if far is None else far,
        "frames": entries,
    }
    with open(directory / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)


def load_dataset(directory) -> list:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"no manifest.json in {directory}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    try:
        h, w = manifest["image_size"]
        near, far = manifest["near"], manifest["far"]
        entries = manifest["frames"]
    except KeyError as e:
        raise FormatError(f"manifest missing key {e}") from e
    frames = []
    for entry in entries:
        image = load_image(directory / entry["image"])
        proj = np.asarray(entry["projection"], dtype=np.float64)
        if proj.size != 16:
            raise FormatError("projection must have 16 numbers")
        camera = Camera(proj.reshape(4, 4), w, h, near, far)
        frames.append(PosedImage(image, camera))
    return frames
