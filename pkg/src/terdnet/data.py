"""Synthetic change pairs, geometric perturbations and PNG I/O."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image
from scipy.ndimage import map_coordinates

from .config import SceneSpec
from .encoder import STRIDE
from .tensor import Tensor


# --------------------------------------------------------------------------
# scenes
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Shape:
    """An opaque object in world (canvas) coordinates."""

    kind: str  # "rect" | "disc"
    y: int
    x: int
    h: int
    w: int
    color: tuple[float, float, float]
    ident: int

    def mask(self, H: int, W: int) -> np.ndarray:
        yy, xx = np.mgrid[0:H, 0:W]
        if self.kind == "rect":
            return (yy >= self.y) & (yy < self.y + self.h) & (xx >= self.x) & (xx < self.x + self.w)
        cy, cx = self.y + (self.h - 1) / 2, self.x + (self.w - 1) / 2
        return ((yy - cy) / (self.h / 2)) ** 2 + ((xx - cx) / (self.w / 2)) ** 2 <= 1.0


@dataclass
class ChangePair:
    img_t0: np.ndarray  # (1, 3, H, W) in [0, 1]
    img_t1: np.ndarray
    gt: np.ndarray  # (H, W) uint8, 1 = change, w.r.t. t1
    seed: int

    def tensors(self, dtype=np.float32) -> tuple[Tensor, Tensor]:
        return Tensor(self.img_t0.astype(dtype)), Tensor(self.img_t1.astype(dtype))


def _texture(rng: np.random.Generator, H: int, W: int, amplitude: float) -> np.ndarray:
    base = rng.uniform(0.25, 0.75, size=3)
    coarse = rng.standard_normal((3, 6, 6))
    ys = np.linspace(0, 5, H)
    xs = np.linspace(0, 5, W)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    smooth = np.stack([map_coordinates(c, [yy, xx], order=1) for c in coarse])
    fine = rng.standard_normal((3, H, W)) * 0.3
    return np.clip(base[:, None, None] + amplitude * (smooth + fine), 0.0, 1.0)


def render(background: np.ndarray, shapes: list[Shape]) -> tuple[np.ndarray, np.ndarray]:
    """Paint shapes in order over ``background``; returns (image, object-id map)."""
    img = background.copy()
    ids = np.zeros(background.shape[1:], dtype=np.int32)
    H, W = ids.shape
    for s in shapes:
        m = s.mask(H, W)
        img[:, m] = np.asarray(s.color)[:, None]
        ids[m] = s.ident
    return img, ids


def _random_shape(rng: np.random.Generator, spec: SceneSpec, H: int, W: int, ident: int, margin: int) -> Shape:
    h = int(rng.integers(spec.min_size, spec.max_size + 1))
    w = int(rng.integers(spec.min_size, spec.max_size + 1))
    y = int(rng.integers(margin, margin + max(1, H - h + 1)))
    x = int(rng.integers(margin, margin + max(1, W - w + 1)))
    kind = "rect" if rng.random() < 0.6 else "disc"
    color = tuple(float(c) for c in rng.uniform(0.0, 1.0, size=3))
    return Shape(kind, y, x, h, w, color, ident)


def _jitter(img: np.ndarray, rng: np.random.Generator, amount: float) -> np.ndarray:
    if amount <= 0:
        return img
    gain = 1.0 + rng.uniform(-amount, amount)
    offset = rng.uniform(-amount, amount)
    return np.clip((img - 0.5) * gain + 0.5 + offset, 0.0, 1.0)


def _quantize(img: np.ndarray) -> np.ndarray:
    # images live on the 8-bit grid so PNG round trips are exact
    return np.round(img * 255.0) / 255.0


def render_pair(shapes_t0: list[Shape], shapes_t1: list[Shape], background: np.ndarray,
                H: int, W: int, shift: tuple[int, int] = (0, 0)) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Render both scenes over one background canvas.

    The t1 camera sees the canvas at offset (P, P) where P is the canvas
    margin; the t0 camera is displaced by ``shift``. Change marks every t1
    pixel whose world point holds a different object in the two scenes.
    """
    Hc, Wc = background.shape[1:]
    P = (Hc - H) // 2
    img0, ids0 = render(background, shapes_t0)
    img1, ids1 = render(background, shapes_t1)
    sy, sx = shift
    view1 = (slice(P, P + H), slice(P, P + W))
    view0 = (slice(P + sy, P + sy + H), slice(P + sx, P + sx + W))
    gt = (ids0[view1] != ids1[view1]).astype(np.uint8)
    return img0[:, view0[0], view0[1]], img1[:, view1[0], view1[1]], gt


def generate_pair(seed: int, H: int = 64, W: int = 64, spec: SceneSpec | None = None) -> ChangePair:
    """Deterministic synthetic change pair.

    t0 holds a few random rectangles and discs on a smooth texture; in t1
    each object is independently removed or moved with probability
    ``change_prob`` and up to ``max_added`` new objects may appear.
    """
    spec = spec or SceneSpec()
    spec.validate()
    if H % STRIDE or W % STRIDE:
        raise ValueError(f"image size must be a multiple of {STRIDE}, got {H}x{W}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    P = spec.camera_shift
    background = _texture(rng, H + 2 * P, W + 2 * P, spec.texture_amplitude)
    n = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    shapes_t0 = [_random_shape(rng, spec, H, W, i + 1, P) for i in range(n)]
    shapes_t1 = []
    next_id = n + 1
    for s in shapes_t0:
        if rng.random() < spec.change_prob:
            if rng.random() < 0.5:
                continue  # removed
            moved = _random_shape(rng, spec, H, W, s.ident, P)
            shapes_t1.append(replace(s, y=moved.y, x=moved.x))
        else:
            shapes_t1.append(s)
    if spec.change_prob > 0:
        for _ in range(int(rng.integers(0, spec.max_added + 1))):
            shapes_t1.append(_random_shape(rng, spec, H, W, next_id, P))
            next_id += 1
    shift = tuple(int(v) for v in rng.integers(-P, P + 1, size=2)) if P else (0, 0)
    img0, img1, gt = render_pair(shapes_t0, shapes_t1, background, H, W, shift)
    img0 = _quantize(_jitter(img0, rng, spec.photometric_jitter / 2))
    img1 = _quantize(_jitter(img1, rng, spec.photometric_jitter))
    return ChangePair(img0[None], img1[None], gt, seed)


def batch(pairs: list[ChangePair], dtype=np.float32) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    t0 = np.concatenate([p.img_t0 for p in pairs]).astype(dtype)
    t1 = np.concatenate([p.img_t1 for p in pairs]).astype(dtype)
    gt = np.stack([p.gt for p in pairs])
    return t0, t1, gt


# --------------------------------------------------------------------------
# perturbations
# --------------------------------------------------------------------------

PERTURBATION_KINDS = ("translation", "homography")


@dataclass(frozen=True)
class Perturbation:
    kind: str
    magnitude: float
    seed: int = 0
    angle: float | None = None  # translation direction in radians; random if None

    def __post_init__(self):
        if self.kind not in PERTURBATION_KINDS:
            raise ValueError(f"unknown perturbation {self.kind!r}; choose from {PERTURBATION_KINDS}")
        if self.magnitude < 0:
            raise ValueError(f"perturbation magnitude must be non-negative, got {self.magnitude}")

    def matrix(self, H: int, W: int) -> np.ndarray:
        """3x3 map from input pixel coords (x, y, 1) to output coords."""
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 2]))
        if self.kind == "translation":
            angle = self.angle if self.angle is not None else rng.uniform(0, 2 * math.pi)
            dx, dy = self.magnitude * math.cos(angle), self.magnitude * math.sin(angle)
            return np.array([[1.0, 0.0, dx], [0.0, 1.0, dy], [0.0, 0.0, 1.0]])
        src = np.array([[0, 0], [W - 1, 0], [W - 1, H - 1], [0, H - 1]], dtype=float)
        angles = rng.uniform(0, 2 * math.pi, size=4)
        dst = src + self.magnitude * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        return homography_from_points(src, dst)


def homography_from_points(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Exact 4-point homography with H[2, 2] = 1 mapping src -> dst."""
    A, b = [], []
    for (x, y), (u, v) in zip(src, dst):
        A.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        A.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        b += [u, v]
    h = np.linalg.solve(np.array(A), np.array(b))
    return np.append(h, 1.0).reshape(3, 3)


def warp_with_matrix(img: np.ndarray, M: np.ndarray) -> np.ndarray:
    """Inverse-map bilinear warp of a (..., H, W) image; outside pixels become 0."""
    H, W = img.shape[-2:]
    yy, xx = np.mgrid[0:H, 0:W].astype(float)
    pts = np.stack([xx.ravel(), yy.ravel(), np.ones(H * W)])
    src = np.linalg.solve(M, pts)
    sx = (src[0] / src[2]).reshape(H, W)
    sy = (src[1] / src[2]).reshape(H, W)
    flat = img.reshape(-1, H, W)
    out = np.stack([map_coordinates(c, [sy, sx], order=1, mode="constant", cval=0.0) for c in flat])
    return out.reshape(img.shape).astype(img.dtype, copy=False)


def warp(img, p: Perturbation):
    """Apply a perturbation to an image array or Tensor of shape (..., H, W)."""
    data = img.data if isinstance(img, Tensor) else np.asarray(img)
    H, W = data.shape[-2:]
    if p.magnitude >= min(H, W):
        raise ValueError(f"perturbation magnitude {p.magnitude} must be below the image size {min(H, W)}")
    out = data.copy() if p.magnitude == 0 else warp_with_matrix(data, p.matrix(H, W))
    return Tensor(out) if isinstance(img, Tensor) else out


def scaled_magnitudes(width: int, reference: tuple[float, ...] = (50.0, 100.0),
                      reference_width: float = 512.0) -> list[float]:
    return [m * width / reference_width for m in reference]


# --------------------------------------------------------------------------
# files
# --------------------------------------------------------------------------


def pad_to_multiple(img: np.ndarray, multiple: int = STRIDE) -> np.ndarray:
    H, W = img.shape[-2:]
    ph, pw = -H % multiple, -W % multiple
    if not ph and not pw:
        return img
    pad = [(0, 0)] * (img.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(img, pad, mode="reflect" if min(H, W) > max(ph, pw) else "symmetric")


def load_image(path: str | Path, dtype=np.float32) -> tuple[Tensor, tuple[int, int]]:
    """Read an 8-bit RGB PNG as a (1, 3, H', W') tensor padded to a multiple of 16.

    Returns the tensor and the original (H, W).
    """
    try:
        im = Image.open(path)
        im.load()
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    if im.mode not in ("RGB", "RGBA", "L", "P"):
        raise ValueError(f"{path}: unsupported image mode {im.mode!r} (need 8-bit RGB)")
    arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    size = arr.shape[:2]
    arr = pad_to_multiple(arr.transpose(2, 0, 1)[None])
    return Tensor(arr.astype(dtype)), size


def save_image(path: str | Path, img: np.ndarray) -> None:
    arr = np.asarray(img)
    if arr.ndim == 4:
        arr = arr[0]
    rgb = np.clip(np.round(arr.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(rgb, "RGB").save(path)


def _labels_of(mask) -> np.ndarray:
    from .upsampler import ChangeMask, predict

    if isinstance(mask, ChangeMask):
        mask = mask.logits
    if isinstance(mask, Tensor):
        mask = mask.data
    arr = np.asarray(mask)
    if arr.ndim == 4 and arr.shape[1] == 2:
        arr = predict(arr)
    while arr.ndim > 2:
        arr = arr[0]
    return arr.astype(np.uint8)


def save_mask(path: str | Path, mask, size: tuple[int, int] | None = None) -> None:
    """Write a 0/255 single-channel PNG, cropped to ``size`` when given."""
    labels = _labels_of(mask)
    if size is not None:
        labels = labels[: size[0], : size[1]]
    Image.fromarray((labels > 0).astype(np.uint8) * 255, "L").save(path)


def load_mask(path: str | Path) -> np.ndarray:
    im = Image.open(path)
    arr = np.asarray(im.convert("L"))
    return (arr > 127).astype(np.uint8)


# --------------------------------------------------------------------------
# dataset directories
# --------------------------------------------------------------------------


def write_dataset(root: str | Path, seeds: list[int], H: int = 64, W: int = 64,
                  spec: SceneSpec | None = None) -> Path:
    """Write ``pairs/<id>_{t0,t1,gt}.png`` plus ``manifest.json`` under ``root``."""
    spec = spec or SceneSpec()
    root = Path(root)
    (root / "pairs").mkdir(parents=True, exist_ok=True)
    ids = []
    for seed in seeds:
        pair = generate_pair(seed, H, W, spec)
        pid = f"{seed:08d}"
        save_image(root / "pairs" / f"{pid}_t0.png", pair.img_t0)
        save_image(root / "pairs" / f"{pid}_t1.png", pair.img_t1)
        save_mask(root / "pairs" / f"{pid}_gt.png", pair.gt)
        ids.append(pid)
    manifest = {"ids": ids, "seeds": list(seeds), "size": [H, W], "scene": asdict(spec)}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return root


def read_dataset(root: str | Path) -> Iterator[tuple[str, Path, Path, Path]]:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    for pid in manifest["ids"]:
        base = root / "pairs"
        yield pid, base / f"{pid}_t0.png", base / f"{pid}_t1.png", base / f"{pid}_gt.png"
