"""
Sequence ingestion, synthetic sequence generation and box files.

On disk a sequence uses the OTB layout:

    <dir>/img/0001.ppm, 0002.ppm, ...
    <dir>/groundtruth_rect.txt     one "x,y,w,h" line per frame
"""

import logging
import os
import re
from dataclasses import dataclass, field
from typing import List, Optional, Sequence as SequenceT, Tuple

import numpy as np
from PIL import Image, ImageDraw, UnidentifiedImageError
from scipy import ndimage

from app.errors import DataError
from app.tracker import BBox
from app.utils import array_digest, make_rng

logger = logging.getLogger(__name__)

GROUNDTRUTH_FILE = "groundtruth_rect.txt"
IMAGE_DIR = "img"
IMAGE_EXTENSIONS = (".ppm", ".pgm", ".pnm", ".png", ".jpg", ".jpeg", ".bmp")
_SEPARATORS = re.compile(r"[,\t ]+")


@dataclass
class Sequence:
    name: str
    frames: List[np.ndarray]
    boxes: List[BBox]
    frame_paths: List[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.frames) != len(self.boxes):
            raise DataError(f"sequence {self.name}: {len(self.frames)} frames but {len(self.boxes)} boxes")

    def __len__(self) -> int:
        return len(self.frames)

    def digest(self) -> str:
        boxes = np.array([b.to_xywh() for b in self.boxes])
        return array_digest(boxes, *self.frames)


# =====================================
# BOX FILES
# =====================================
def parse_box_line(line: str, path: str, line_no: int) -> BBox:
    parts = [p for p in _SEPARATORS.split(line.strip()) if p]
    if len(parts) != 4:
        raise DataError(f"{path}:{line_no}: expected 4 values 'x,y,w,h', got {line.strip()!r}")
    try:
        x, y, w, h = (float(p) for p in parts)
        return BBox.from_xywh(x, y, w, h)
    except ValueError as e:
        raise DataError(f"{path}:{line_no}: cannot parse {line.strip()!r}: {e}") from e


def read_boxes(path: str) -> List[BBox]:
    if not os.path.isfile(path):
        raise DataError(f"boxes file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        lines = [(i, line) for i, line in enumerate(fh, start=1) if line.strip()]
    return [parse_box_line(line, path, i) for i, line in lines]


def format_box(box: BBox, decimals: int = 6) -> str:
    return ",".join(f"{v:.{decimals}f}" for v in box.to_xywh())


def write_boxes(path: str, boxes: SequenceT[BBox]) -> None:
    """One 'x,y,w,h' line per box, 6 decimals."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(format_box(b) + "\n" for b in boxes)


# =====================================
# IMAGES
# =====================================
def read_frame(path: str) -> np.ndarray:
    """Decode to [3,H,W] float64 in 0..255."""
    ext = os.path.splitext(path)[1].lower()
    if ext not in IMAGE_EXTENSIONS:
        raise DataError(f"unsupported image format {ext!r}: {path}")
    try:
        with Image.open(path) as img:
            rgb = np.asarray(img.convert("RGB"), dtype=np.float64)
    except (OSError, UnidentifiedImageError) as e:
        raise DataError(f"cannot decode image {path}: {e}") from e
    return rgb.transpose(2, 0, 1).copy()


def to_uint8_image(frame: np.ndarray) -> Image.Image:
    pixels = np.clip(np.rint(frame), 0, 255).astype(np.uint8)
    if np.array_equal(pixels[0], pixels[1]) and np.array_equal(pixels[1], pixels[2]):
        return Image.fromarray(pixels[0])
    return Image.fromarray(np.ascontiguousarray(pixels.transpose(1, 2, 0)))


def write_frame(path: str, frame: np.ndarray) -> None:
    img = to_uint8_image(frame)
    # PGM for single-channel content, PPM otherwise
    if img.mode == "L" and path.lower().endswith(".ppm"):
        path = path[:-4] + ".pgm"
    img.save(path)


def load_sequence(path: str) -> Sequence:
    """
    Load an OTB-layout directory. Frames come in ascending filename order.

    Raises:
        DataError: missing ground truth, unreadable image, count mismatch
    """
    gt_path = os.path.join(path, GROUNDTRUTH_FILE)
    img_dir = os.path.join(path, IMAGE_DIR)
    if not os.path.isfile(gt_path):
        raise DataError(f"ground truth file not found: {gt_path}")
    if not os.path.isdir(img_dir):
        raise DataError(f"image folder not found: {img_dir}")

    names = sorted(n for n in os.listdir(img_dir) if not n.startswith("."))
    if not names:
        raise DataError(f"no frames in {img_dir}")
    frame_paths = [os.path.join(img_dir, n) for n in names]
    boxes = read_boxes(gt_path)
    if len(boxes) != len(frame_paths):
        raise DataError(f"{path}: {len(frame_paths)} frames but {len(boxes)} ground-truth lines")
    frames = [read_frame(p) for p in frame_paths]
    logger.debug(f"loaded {len(frames)} frames from {path}")
    return Sequence(os.path.basename(os.path.normpath(path)), frames, boxes, frame_paths)


def save_sequence(seq: Sequence, path: str) -> str:
    """Write `seq` in the OTB layout; returns the directory."""
    img_dir = os.path.join(path, IMAGE_DIR)
    os.makedirs(img_dir, exist_ok=True)
    width = max(4, len(str(len(seq))))
    for i, frame in enumerate(seq.frames, start=1):
        write_frame(os.path.join(img_dir, f"{i:0{width}d}.ppm"), frame)
    with open(os.path.join(path, GROUNDTRUTH_FILE), "w", encoding="utf-8") as fh:
        for box in seq.boxes:
            fh.write(",".join(np.format_float_positional(v, trim="-") for v in box.to_xywh()) + "\n")
    return path


def list_sequences(root: str) -> List[str]:
    """Sequence directories under `root` (or `root` itself when it is one)."""
    if os.path.isfile(os.path.join(root, GROUNDTRUTH_FILE)):
        return [root]
    if not os.path.isdir(root):
        raise DataError(f"dataset directory not found: {root}")
    found = sorted(
        os.path.join(root, n) for n in os.listdir(root)
        if os.path.isfile(os.path.join(root, n, GROUNDTRUTH_FILE))
    )
    if not found:
        raise DataError(f"no sequences under {root}")
    return found


# =====================================
# SYNTHETIC SEQUENCES
# =====================================
@dataclass(frozen=True)
class SynthSpec:
    """
    motion: constant_velocity | sinusoidal | scale_ramp
    texture: checker | noise
    drift: per-frame blend rate of the target texture toward a second texture
    """

    size: Tuple[int, int] = (120, 200)
    target_size: Tuple[float, float] = (24.0, 24.0)
    motion: str = "constant_velocity"
    velocity: Tuple[float, float] = (2.0, 0.0)
    amplitude: Tuple[float, float] = (20.0, 10.0)
    period: float = 32.0
    scale_end: float = 1.3
    texture: str = "checker"
    noise: float = 0.0
    frames: int = 64
    seed: int = 0
    drift: float = 0.0
    start: Optional[Tuple[float, float]] = None
    name: str = "synthetic"


def _texture(kind: str, rng: np.random.Generator) -> np.ndarray:
    """Target texture sampled on a 16x16 grid in [30, 230]."""
    if kind == "checker":
        cells = (np.add.outer(np.arange(16) // 4, np.arange(16) // 4) % 2).astype(np.float64)
        return 30.0 + 200.0 * cells
    if kind == "noise":
        return 30.0 + 200.0 * rng.random((16, 16))
    raise DataError(f"unknown texture {kind!r}")


def _background(height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    smooth = ndimage.gaussian_filter(rng.random((height, width)), sigma=4.0, mode="nearest")
    smooth = (smooth - smooth.min()) / max(float(np.ptp(smooth)), 1e-12)
    return 90.0 + 60.0 * smooth


def _trajectory(spec: SynthSpec) -> List[BBox]:
    height, width = spec.size
    n = spec.frames
    w0, h0 = spec.target_size
    t = np.arange(n, dtype=np.float64)
    if spec.motion == "constant_velocity":
        vx, vy = spec.velocity
        default = ((width - 1) / 2 - vx * (n - 1) / 2, (height - 1) / 2 - vy * (n - 1) / 2)
        cx0, cy0 = spec.start or default
        cx, cy = cx0 + vx * t, cy0 + vy * t
        sizes = np.ones(n)
    elif spec.motion == "sinusoidal":
        cx0, cy0 = spec.start or ((width - 1) / 2, (height - 1) / 2)
        phase = 2 * np.pi * t / spec.period
        cx, cy = cx0 + spec.amplitude[0] * np.sin(phase), cy0 + spec.amplitude[1] * np.sin(phase)
        sizes = np.ones(n)
    elif spec.motion == "scale_ramp":
        cx0, cy0 = spec.start or ((width - 1) / 2, (height - 1) / 2)
        cx, cy = np.full(n, cx0), np.full(n, cy0)
        sizes = spec.scale_end ** (t / max(n - 1, 1))
    else:
        raise DataError(f"unknown motion law {spec.motion!r}")

    boxes = []
    for i in range(n):
        box = BBox(float(cx[i]), float(cy[i]), w0 * float(sizes[i]), h0 * float(sizes[i]))
        left, top, right, bottom = box.corners()
        if left < -0.5 or top < -0.5 or right > width - 0.5 or bottom > height - 0.5:
            raise DataError(f"synthetic target leaves the {width}x{height} frame at frame {i}")
        boxes.append(box)
    return boxes


def _render(background: np.ndarray, texture: np.ndarray, box: BBox) -> np.ndarray:
    height, width = background.shape
    left, top, _, _ = box.corners()
    rows, cols = np.mgrid[0:height, 0:width].astype(np.float64)
    u = (cols - left) / box.w
    v = (rows - top) / box.h
    inside = (u >= 0) & (u < 1) & (v >= 0) & (v < 1)
    side = texture.shape[0]
    tex_rows = np.clip(v * side - 0.5, 0, side - 1)
    tex_cols = np.clip(u * side - 0.5, 0, side - 1)
    target = ndimage.map_coordinates(texture, [tex_rows, tex_cols], order=0, mode="nearest")
    return np.where(inside, target, background)


def synth_sequence(spec: SynthSpec) -> Sequence:
    """
    Deterministic synthetic sequence; ground truth is exact by construction.

    Raises:
        DataError: the target leaves the frame under the motion law
    """
    rng = make_rng(spec.seed)
    boxes = _trajectory(spec)
    height, width = spec.size
    background = _background(height, width, rng)
    tex_a = _texture(spec.texture, rng)
    tex_b = _texture("noise", rng)

    frames = []
    for i, box in enumerate(boxes):
        blend = min(1.0, spec.drift * i)
        texture = (1 - blend) * tex_a + blend * tex_b
        gray = _render(background, texture, box)
        if spec.noise > 0:
            gray = gray + rng.normal(0.0, spec.noise, gray.shape)
        gray = np.clip(np.rint(gray), 0, 255)
        frames.append(np.repeat(gray[None], 3, axis=0))
    logger.debug(f"synthesized {spec.name}: {len(frames)} frames, motion {spec.motion}")
    return Sequence(spec.name, frames, boxes)


def synth_corpus(count: int = 10, seed: int = 0, frames: int = 40,
                 size: Tuple[int, int] = (96, 128)) -> List[Sequence]:
    """Small translation corpus with per-sequence velocity and texture."""
    rng = make_rng(seed)
    corpus = []
    for i in range(count):
        velocity = (float(rng.uniform(-1.5, 1.5)), float(rng.uniform(-0.75, 0.75)))
        texture = "checker" if i % 2 == 0 else "noise"
        spec = SynthSpec(size=size, target_size=(20.0, 20.0), velocity=velocity, texture=texture,
                         frames=frames, seed=seed * 1000 + i, name=f"synthetic-{i:02d}")
        corpus.append(synth_sequence(spec))
    return corpus


# =====================================
# OVERLAYS
# =====================================
def write_overlays(out_dir: str, frames: SequenceT[np.ndarray], predicted: SequenceT[BBox],
                   truth: Optional[SequenceT[BBox]] = None) -> int:
    """One PNG per frame: predicted box in red, ground truth in green."""
    os.makedirs(out_dir, exist_ok=True)
    width = max(4, len(str(len(frames))))
    for i, frame in enumerate(frames):
        img = to_uint8_image(frame).convert("RGB")
        draw = ImageDraw.Draw(img)
        if truth is not None:
            draw.rectangle(truth[i].corners(), outline=(0, 255, 0))
        draw.rectangle(predicted[i].corners(), outline=(255, 0, 0))
        img.save(os.path.join(out_dir, f"{i + 1:0{width}d}.png"))
    return len(frames)
