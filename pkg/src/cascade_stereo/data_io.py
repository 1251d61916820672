"""Image and disparity codecs, normalization, synthetic pairs and checkpoints.

Disparity PNGs follow the KITTI convention: 16-bit single channel,
``disparity = raw / 256`` and ``raw == 0`` marks an invalid pixel.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

INVALID_DISPARITY = -1.0
CHECKPOINT_MAGIC = b"CSMD"
CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    """A file decoded but does not have the expected layout."""


@dataclass
class StereoSample:
    left: np.ndarray  # (H, W, 3) float
    right: np.ndarray  # (H, W', 3) float
    gt_disparity: np.ndarray  # (H, W) float, INVALID_DISPARITY where unknown
    valid_mask: np.ndarray  # (H, W) bool

    def __post_init__(self):
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
        if self.gt_disparity.shape != self.valid_mask.shape:
            raise ValueError("ground truth and mask shapes differ")
        if np.any(self.gt_disparity[self.valid_mask] < 0):
            raise ValueError("valid ground-truth disparities must be non-negative")


def atomic_write(path: str | Path, writer) -> None:
    """Call ``writer(tmp_path)`` and rename the result onto ``path`` only on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.stem}.", suffix=path.suffix or ".tmp")
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _open(path: str | Path) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
    except (OSError, UnidentifiedImageError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    return img


def load_image(path: str | Path) -> np.ndarray:
    """8-bit PNG/PPM to ``(H, W, 3)`` float32 in [0, 1]; gray is replicated to 3 channels."""
    img = _open(path)
    if img.mode in ("L", "P", "1"):
        img = img.convert("L")
    elif img.mode != "RGB":
        if img.mode in ("I;16", "I;16B", "I"):
            raise FormatError(f"{path}: expected an 8-bit image, got mode {img.mode}")
        img = img.convert("RGB")
    arr = np.asarray(img, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=-1)
    return arr


def save_image(image: np.ndarray, path: str | Path) -> None:
    """Write a [0, 1] float image as 8-bit PNG (or PPM by extension)."""
    arr = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    fmt = "PPM" if str(path).lower().endswith((".ppm", ".pnm")) else "PNG"
    atomic_write(path, lambda tmp: Image.fromarray(arr).save(tmp, format=fmt))


def normalize(image: np.ndarray) -> np.ndarray:
    """Zero mean, unit standard deviation over all pixels and channels jointly."""
    x = np.asarray(image, dtype=np.float64)
    std = x.std()
    out = (x - x.mean()) / max(std, 1e-8)
    return out.astype(np.float32)


def load_disparity_png(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(gt, mask)``; invalid pixels get ``INVALID_DISPARITY`` and mask False."""
    img = _open(path)
    if img.mode not in ("I;16", "I;16B", "I;16L", "I"):
        raise FormatError(f"{path}: expected a 16-bit single-channel PNG, got mode {img.mode}")
    raw = np.asarray(img)
    if raw.ndim != 2:
        raise FormatError(f"{path}: expected one channel, got shape {raw.shape}")
    if raw.min() < 0 or raw.max() > 65535:
        raise FormatError(f"{path}: values outside the 16-bit range")
    raw = raw.astype(np.uint16)
    mask = raw > 0
    gt = np.where(mask, raw.astype(np.float32) / 256.0, np.float32(INVALID_DISPARITY)).astype(np.float32)
    return gt, mask


def _disparity_raw(disparity: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    d = np.asarray(disparity, dtype=np.float64)
    raw = np.clip(np.rint(np.where(np.isfinite(d), d, 0.0) * 256.0), 0, 65535).astype(np.uint16)
    if mask is not None:
        raw[~np.asarray(mask, dtype=bool)] = 0
    return raw


def save_disparity_png(disparity: np.ndarray, path: str | Path, mask: np.ndarray | None = None) -> None:
    """Store ``round(d * 256)`` clamped to 16 bits; masked-out pixels are written as 0."""
    raw = _disparity_raw(disparity, mask)

    def write(tmp):
        Image.fromarray(raw).save(tmp, format="PNG")

    atomic_write(path, write)


def save_cost_heatmap(values: np.ndarray, path: str | Path) -> None:
    """Min-max scaled 8-bit grayscale rendering of a 2D map."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = np.nanmin(v), np.nanmax(v)
    scaled = np.zeros_like(v) if hi <= lo else (v - lo) / (hi - lo)
    arr = np.rint(scaled * 255.0).astype(np.uint8)
    atomic_write(path, lambda tmp: Image.fromarray(arr).save(tmp, format="PNG"))


# ---------------------------------------------------------------------------
# datasets on disk

DATASET_DIRS = ("left", "right", "disp")
IMAGE_SUFFIXES = (".png", ".ppm", ".pnm")


def pair_dataset(root: str | Path) -> list[tuple[Path, Path, Path]]:
    """Match ``left/``, ``right/`` and ``disp/`` files under ``root`` by basename.

    Every problem (missing directory, file present in one directory but not
    another) is collected and reported in a single ``FormatError``.
    """
    root = Path(root)
    problems = [f"missing directory {root / d}" for d in DATASET_DIRS if not (root / d).is_dir()]
    if problems:
        raise FormatError("; ".join(problems))
    stems = {
        d: {p.stem: p for p in sorted((root / d).iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}
        for d in DATASET_DIRS
    }
    names = sorted(set().union(*stems.values()))
    for name in names:
        for d in DATASET_DIRS:
            if name not in stems[d]:
                problems.append(f"{name}: no file in {root / d}")
    if problems:
        raise FormatError("unpaired files: " + "; ".join(problems))
    if not names:
        raise FormatError(f"no images found under {root}")
    return [tuple(stems[d][name] for d in DATASET_DIRS) for name in names]


def load_dataset(root: str | Path) -> list[StereoSample]:
    """Read every pair under ``root``; each image is normalized on its own."""
    samples = []
    for left_path, right_path, disp_path in pair_dataset(root):
        gt, mask = load_disparity_png(disp_path)
        left, right = load_image(left_path), load_image(right_path)
        if left.shape[:2] != gt.shape or right.shape[:2] != gt.shape:
            raise FormatError(f"{left_path.stem}: image sizes {left.shape[:2]}, {right.shape[:2]} and disparity {gt.shape} disagree")
        samples.append(StereoSample(normalize(left), normalize(right), gt, mask))
    return samples


# ---------------------------------------------------------------------------
# synthetic scenes

SCENES = ("constant", "ramp", "two_plane")


def disparity_field(height: int, width: int, max_disp: int, scene: str, value: int | None = None) -> np.ndarray:
    """Integer disparity map for one of the synthetic scene types."""
    if scene == "constant":
        c = max_disp // 2 if value is None else int(value)
        if not 0 <= c <= max_disp:
            raise ValueError(f"constant disparity {c} outside [0, {max_disp}]")
        return np.full((height, width), c, dtype=np.int64)
    if scene == "ramp":
        row = np.rint(np.linspace(0, max_disp, width)).astype(np.int64)
        return np.broadcast_to(row, (height, width)).copy()
    if scene == "two_plane":
        far = max_disp // 4 if value is None else int(value)
        near = max_disp
        field = np.full((height, width), far, dtype=np.int64)
        field[:, width // 2:] = near
        return field
    raise ValueError(f"unknown scene {scene!r}; expected one of {SCENES}")


def smooth_texture(height: int, width: int, seed: int, sigma: float = 1.0) -> np.ndarray:
    """Random ``(H, W, 3)`` texture in [0, 1], lightly blurred."""
    rng = np.random.default_rng(seed)
    noise = rng.random((height, width, 3))
    blurred = ndimage.gaussian_filter(noise, sigma=(sigma, sigma, 0), mode="reflect")
    lo, hi = blurred.min(), blurred.max()
    return ((blurred - lo) / (hi - lo)).astype(np.float32)


def generate_synthetic_pair(
    height: int,
    width: int,
    max_disp: int,
    scene: str = "constant",
    texture_seed: int = 0,
    value: int | None = None,
) -> StereoSample:
    """Rectified pair with exact integer ground truth.

    The right image is a random texture; the left image samples it at
    ``x - d(y, x)``. Pixels whose source column falls off the image keep the
    texture value at that location and are masked out.
    """
    if max_disp >= width:
        raise ValueError(f"max_disp ({max_disp}) must be smaller than width ({width})")
    right = smooth_texture(height, width, texture_seed)
    disp = disparity_field(height, width, max_disp, scene, value)
    ys, xs = np.mgrid[0:height, 0:width]
    src = xs - disp
    mask = src >= 0
    left = right.copy()
    left[mask] = right[ys[mask], src[mask]]
    return StereoSample(left, right, disp.astype(np.float32), mask)


def warp_right_to_left(right: np.ndarray, disparity: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample ``right[y, x - d]`` for integer ``d``; returns the warped image and the in-bounds mask."""
    h, w = disparity.shape
    ys, xs = np.mgrid[0:h, 0:w]
    src = xs - np.rint(disparity).astype(np.int64)
    ok = (src >= 0) & (src < w)
    out = np.zeros((h, w) + right.shape[2:], dtype=right.dtype)
    out[ok] = right[ys[ok], src[ok]]
    return out, ok


# ---------------------------------------------------------------------------
# checkpoints
#
# layout (little-endian):
#   "CSMD" | u32 version | u32 max_disparity | u32 len + utf-8 profile | u32 count
#   count x ( u32 len + utf-8 name | u32 rank | rank x u32 dims | float32 payload )


def _u32(value: int) -> bytes:
    return struct.pack("<I", value)


def _string(value: str) -> bytes:
    encoded = value.encode("utf-8")
    return _u32(len(encoded)) + encoded


def encode_checkpoint(state: dict[str, np.ndarray], max_disparity: int, profile: str) -> bytes:
    parts = [CHECKPOINT_MAGIC, _u32(CHECKPOINT_VERSION), _u32(max_disparity), _string(profile), _u32(len(state))]
    for name, arr in state.items():
        arr = np.asarray(arr)
        parts += [_string(name), _u32(arr.ndim), *(_u32(n) for n in arr.shape)]
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob, self.pos, self.path = blob, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(f"{self.path}: checkpoint truncated at byte {self.pos}")
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def decode_checkpoint(blob: bytes, path="<bytes>") -> tuple[dict[str, np.ndarray], int, str]:
    r = _Reader(blob, path)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    max_disparity = r.u32()
    profile = r.string()
    state = {}
    for _ in range(r.u32()):
        name = r.string()
        dims = tuple(r.u32() for _ in range(r.u32()))
        count = int(np.prod(dims)) if dims else 1
        state[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(blob):
        raise FormatError(f"{path}: {len(blob) - r.pos} trailing bytes after the last tensor")
    return state, max_disparity, profile


def save_checkpoint(weights, path: str | Path) -> None:
    """Write every weight array together with the model configuration."""
    blob = encode_checkpoint(weights.state_dict(), weights.config.max_disparity, weights.config.profile)
    atomic_write(path, lambda tmp: Path(tmp).write_bytes(blob))


def load_checkpoint(path: str | Path, config=None):
    """Load weights; with ``config`` given, the stored configuration must match it.

    Shape mismatches raise ``ShapeError`` naming the offending tensor.
    """
    from .net import ModelConfig, weights_from_state
    from .tensor import ShapeError

    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc}") from exc
    state, max_disparity, profile = decode_checkpoint(blob, path)
    stored = ModelConfig(max_disparity, profile)
    active = stored if config is None else config
    try:
        return weights_from_state(active, state)
    except ShapeError as exc:
        raise ShapeError(f"{path}: {exc} (checkpoint was saved for {stored})") from exc
