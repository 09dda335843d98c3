"""Image/mask/flow loading, dataset scanning, the checkpoint container and config files."""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .backbone import BackboneConfig, make_divisible
from .gapblocks import CSAConfig
from .model import SUPERVISION_SETTINGS, ModelConfig
from .nnops import resize_bilinear
from .tensorcore import Tensor

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".ppm", ".pgm"}
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class DataError(ValueError):
    pass


class ImageReadError(DataError):
    pass


class MaskError(DataError):
    pass


class FlowError(DataError):
    pass


class FlowMagicError(FlowError):
    pass


class FlowTruncatedError(FlowError):
    pass


class CheckpointError(DataError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class ConfigError(DataError):
    pass


class DatasetError(DataError):
    pass


def _size2(size) -> tuple[int, int] | None:
    if size is None:
        return None
    if isinstance(size, int):
        return size, size
    return int(size[0]), int(size[1])


def read_image_array(path) -> np.ndarray:
    """8-bit pixels as stored: [H, W] or [H, W, C]."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode not in ("L", "RGB", "RGBA", "P", "LA"):
                im = im.convert("RGB")
            elif im.mode == "P":
                im = im.convert("RGB")
            arr = np.asarray(im)
    except (OSError, UnidentifiedImageError, SyntaxError) as exc:
        raise ImageReadError(f"cannot read image {path}: {exc}") from None
    if arr.dtype != np.uint8:
        raise ImageReadError(f"{path}: expected 8-bit pixels, got {arr.dtype}")
    return arr


def normalize_image(rgb01: np.ndarray, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> np.ndarray:
    """[3, H, W] in [0, 1] -> per-channel standardised float32."""
    m = np.asarray(mean, dtype=np.float32)[:, None, None]
    s = np.asarray(std, dtype=np.float32)[:, None, None]
    return ((rgb01 - m) / s).astype(np.float32)


def image_to_chw(arr: np.ndarray) -> np.ndarray:
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    elif arr.shape[2] == 2:  # gray + alpha
        arr = np.repeat(arr[:, :, :1], 3, axis=2)
    arr = arr[:, :, :3]
    return np.transpose(arr, (2, 0, 1)).astype(np.float32) / 255.0


def load_image(path, target_size=None, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> Tensor:
    """Channels-first [1, 3, H, W], scaled to [0, 1], resized, then standardised."""
    chw = image_to_chw(read_image_array(path))
    size = _size2(target_size)
    if size is not None and size != chw.shape[1:]:
        chw = resize_bilinear(chw[None], size)[0]
    return Tensor(normalize_image(chw, mean, std)[None])


def load_mask(path, threshold: int = 128) -> np.ndarray:
    """Binary uint8 mask at native extent: pixel >= threshold -> 1."""
    arr = read_image_array(path)
    if arr.ndim == 3:
        chans = arr[:, :, :3] if arr.shape[2] >= 3 else arr[:, :, :1]
        if not all(np.array_equal(chans[:, :, 0], chans[:, :, c]) for c in range(chans.shape[2])):
            raise MaskError(f"{path}: multi-channel mask with disagreeing channels")
        arr = chans[:, :, 0]
    return (arr >= threshold).astype(np.uint8)


def load_prediction(path, shape: tuple[int, int] | None = None) -> np.ndarray:
    """Grayscale prediction in [0, 1], bilinearly resized to ``shape``."""
    arr = read_image_array(path)
    if arr.ndim == 3:
        arr = arr[:, :, 0]
    p = arr.astype(np.float64) / 255.0
    if shape is not None and tuple(shape) != p.shape:
        p = resize_bilinear(p[None, None], tuple(shape))[0, 0]
    return p


def save_gray(path, values01: np.ndarray) -> None:
    """Write a [0, 1] map as 8-bit grayscale (255 = salient)."""
    v = np.clip(np.rint(np.asarray(values01, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(v, mode="L").save(path)


def save_palette(path, indices: np.ndarray, palette_values: dict[int, int]) -> None:
    """Paletted PNG whose palette entry i is the gray level ``palette_values[i]``."""
    im = Image.fromarray(np.asarray(indices, dtype=np.uint8), mode="P")
    pal = []
    for i in range(256):
        g = palette_values.get(i, 0)
        pal += [g, g, g]
    im.putpalette(pal)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    im.save(path)


# --- optical flow ---------------------------------------------------------

FLO_MAGIC = 202021.25


@dataclass
class FlowField:
    uv: np.ndarray  # [H, W, 2] float32

    @property
    def height(self) -> int:
        return self.uv.shape[0]

    @property
    def width(self) -> int:
        return self.uv.shape[1]


def read_flo(path) -> FlowField:
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise FlowTruncatedError(f"{path}: header needs 12 bytes, file has {len(data)}")
    (magic,) = struct.unpack("<f", data[:4])
    if magic != np.float32(FLO_MAGIC):
        raise FlowMagicError(f"{path}: bad magic {magic!r}, expected {FLO_MAGIC}")
    w, h = struct.unpack("<ii", data[4:12])
    if w <= 0 or h <= 0:
        raise FlowError(f"{path}: invalid extent {w}x{h}")
    expected = 12 + 8 * w * h
    if len(data) < expected:
        raise FlowTruncatedError(f"{path}: expected {expected} bytes, got {len(data)}")
    uv = np.frombuffer(data, dtype="<f4", count=2 * w * h, offset=12).reshape(h, w, 2).astype(np.float32)
    if not np.all(np.isfinite(uv)):
        raise FlowError(f"{path}: non-finite displacement")
    return FlowField(uv)


def write_flo(path, flow: FlowField | np.ndarray) -> None:
    uv = flow.uv if isinstance(flow, FlowField) else np.asarray(flow)
    h, w, _ = uv.shape
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(struct.pack("<f", FLO_MAGIC))
        f.write(struct.pack("<ii", w, h))
        f.write(np.ascontiguousarray(uv, dtype="<f4").tobytes())


def _minmax(x: np.ndarray) -> np.ndarray:
    lo, hi = x.min(), x.max()
    return (x - lo) / (hi - lo) if hi > lo else np.zeros_like(x)


def flow_to_image(flow: FlowField | np.ndarray) -> np.ndarray:
    """(u, v, |uv|) channels-first, each min-max normalised per frame."""
    uv = flow.uv if isinstance(flow, FlowField) else np.asarray(flow)
    u, v = uv[..., 0].astype(np.float64), uv[..., 1].astype(np.float64)
    mag = np.sqrt(u * u + v * v)
    return np.stack([_minmax(u), _minmax(v), _minmax(mag)]).astype(np.float32)


def flow_input(flow, target_size=None) -> Tensor:
    """Flow as a standardised 3-channel backbone input [1, 3, H, W]."""
    img = flow_to_image(flow)
    size = _size2(target_size)
    if size is not None and size != img.shape[1:]:
        img = resize_bilinear(img[None], size)[0]
    return Tensor(normalize_image(img)[None])


def load_flow(path, target_size=None) -> Tensor:
    return flow_input(read_flo(path), target_size)


# --- checkpoints ----------------------------------------------------------

CKPT_MAGIC = b"GAPN"
CKPT_VERSION = 1
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}  # 1 is a local extension


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    version: int = CKPT_VERSION


def checkpoint_write(path, tensors, dtype_code: int = 0) -> None:
    """Write named tensors; names must be unique (pairs are accepted to check that)."""
    items = list(tensors.items()) if isinstance(tensors, dict) else list(tensors)
    names = [n for n, _ in items]
    if len(set(names)) != len(names):
        dup = next(n for n in names if names.count(n) > 1)
        raise CheckpointError(f"duplicate tensor name {dup!r}")
    if dtype_code not in DTYPE_CODES:
        raise CheckpointError(f"unknown dtype code {dtype_code}")
    dt = DTYPE_CODES[dtype_code]
    out = bytearray(CKPT_MAGIC)
    out += struct.pack("<II", CKPT_VERSION, len(items))
    for name, arr in items:
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise CheckpointError(f"tensor {name!r} cannot be encoded")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += struct.pack("<B", dtype_code)
        out += np.ascontiguousarray(arr, dtype=dt).tobytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(bytes(out))
    tmp.replace(path)


def checkpoint_read(path) -> Checkpoint:
    data = Path(path).read_bytes()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated while reading {what} (need {n} bytes at {pos}, file {len(data)})")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if take(4, "magic") != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != CKPT_VERSION:
        raise CheckpointVersionError(f"{path}: unsupported checkpoint version {version} (expected {CKPT_VERSION})")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, "rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "extents"))
        (code,) = struct.unpack("<B", take(1, "dtype"))
        if code not in DTYPE_CODES:
            raise CheckpointError(f"{path}: tensor {name!r} has unknown dtype code {code}")
        dt = DTYPE_CODES[code]
        n = int(np.prod(shape, dtype=np.int64))
        raw = take(n * dt.itemsize, f"values of {name!r}")
        if name in tensors:
            raise CheckpointError(f"{path}: duplicate tensor name {name!r}")
        tensors[name] = np.frombuffer(raw, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return Checkpoint(tensors, version)


# --- datasets -------------------------------------------------------------


@dataclass(frozen=True)
class SampleRecord:
    image_path: Path
    mask_path: Path
    flow_path: Path | None = None
    clip_id: str | None = None
    frame_index: int | None = None


def _by_stem(d: Path, suffixes) -> dict[str, Path]:
    if not d.is_dir():
        return {}
    return {f.stem: f for f in sorted(d.iterdir()) if f.is_file() and f.suffix.lower() in suffixes}


def scan_dataset(root, mode: str = "image") -> list[SampleRecord]:
    """Records sorted by name; unmatched files raise a warning each."""
    root = Path(root)
    records: list[SampleRecord] = []
    if mode == "image":
        images = _by_stem(root / "images", IMAGE_SUFFIXES)
        masks = _by_stem(root / "masks", IMAGE_SUFFIXES)
        for stem in sorted(set(images) | set(masks)):
            if stem not in masks:
                warnings.warn(f"image without mask: {images[stem]}", stacklevel=2)
            elif stem not in images:
                warnings.warn(f"mask without image: {masks[stem]}", stacklevel=2)
            else:
                records.append(SampleRecord(images[stem], masks[stem]))
    elif mode == "video":
        clips = root / "clips"
        for clip in sorted(p for p in clips.iterdir() if p.is_dir()) if clips.is_dir() else []:
            frames = _by_stem(clip / "frames", IMAGE_SUFFIXES)
            flows = _by_stem(clip / "flow", {".flo"})
            masks = _by_stem(clip / "masks", IMAGE_SUFFIXES)
            for i, stem in enumerate(sorted(frames)):
                if stem not in masks:
                    warnings.warn(f"frame without mask: {frames[stem]}", stacklevel=2)
                elif stem not in flows:
                    warnings.warn(f"frame without flow: {frames[stem]}", stacklevel=2)
                else:
                    records.append(SampleRecord(frames[stem], masks[stem], flows[stem], clip.name, i))
            for stem in sorted((set(flows) | set(masks)) - set(frames)):
                warnings.warn(f"{clip.name}/{stem}: flow or mask without frame", stacklevel=2)
    else:
        raise DatasetError(f"unknown dataset mode {mode!r}")
    if not records:
        raise DatasetError(f"no usable samples under {root}")
    return records


# --- configuration ----------------------------------------------------------


@dataclass
class RunConfig:
    preset: str = "paper"
    width_multiplier: float | None = None  # None: the preset's own width
    csa_dim: int | None = None
    csa_heads: int = 1
    csa_ffn_expansion: int = 4
    gpc_m: int = 7
    gpc_atrous_rates: tuple[int, ...] = (8, 4, 2, 1)
    reduce_channels: tuple[int, ...] | None = None
    supervision_setting: str = "f"
    lr: float = 1.7e-4
    lr_power: float = 0.9
    epochs: int = 30
    batch_size: int = 32
    weight_decay: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    seed: int = 0
    train_sizes: tuple[int, ...] = (320, 352, 384)
    infer_size: int = 384
    mode: str = "image"
    wf_beta2: float = 1.0

    def model_config(self) -> ModelConfig:
        base = ModelConfig.preset(self.preset)
        bb = base.backbone
        if self.width_multiplier is not None and self.width_multiplier != bb.width_multiplier:
            bb = BackboneConfig(
                preset=self.preset,
                width_multiplier=self.width_multiplier,
                stem_channels=make_divisible(32 * self.width_multiplier),
            )
        csa = CSAConfig(
            dim=self.csa_dim if self.csa_dim is not None else base.csa.dim,
            heads=self.csa_heads,
            ffn_expansion=self.csa_ffn_expansion,
        )
        gpc = replace(base.gpc, m=self.gpc_m, atrous_rates=tuple(self.gpc_atrous_rates))
        cfg = replace(
            base,
            backbone=bb,
            csa=csa,
            gpc=gpc,
            gfe=replace(base.gfe, channels=bb.stage_channels[3]),
            reduce_channels=tuple(self.reduce_channels) if self.reduce_channels else base.reduce_channels,
            mode=self.mode,
            supervision_setting=self.supervision_setting,
        )
        cfg.validate()
        return cfg


CONFIG_KEYS = tuple(f.name for f in fields(RunConfig))


def _ints(text: str) -> tuple[int, ...]:
    parts = text.replace(",", " ").replace("/", " ").split()
    if not parts:
        raise ValueError("empty list")
    return tuple(int(p) for p in parts)


def _parse_value(key: str, text: str):
    if key in ("preset", "mode", "supervision_setting"):
        return text
    if key in ("gpc_atrous_rates", "reduce_channels", "train_sizes"):
        return _ints(text)
    if key in ("csa_dim", "csa_heads", "csa_ffn_expansion", "gpc_m", "epochs", "batch_size", "seed", "infer_size"):
        return int(text)
    return float(text)


def _check(cfg: RunConfig) -> None:
    if cfg.preset not in ("paper", "toy"):
        raise ConfigError(f"preset must be paper or toy, got {cfg.preset!r}")
    if cfg.mode not in ("image", "video"):
        raise ConfigError(f"mode must be image or video, got {cfg.mode!r}")
    if cfg.supervision_setting not in SUPERVISION_SETTINGS:
        raise ConfigError(f"supervision_setting must be one of a..f, got {cfg.supervision_setting!r}")
    if len(cfg.gpc_atrous_rates) != 4:
        raise ConfigError("gpc_atrous_rates needs four values")
    if cfg.reduce_channels is not None and len(cfg.reduce_channels) != 4:
        raise ConfigError("reduce_channels needs four values")
    for s in (*cfg.train_sizes, cfg.infer_size):
        if s <= 0 or s % 32:
            raise ConfigError(f"image size {s} must be a positive multiple of 32")
    if cfg.epochs < 1 or cfg.batch_size < 1:
        raise ConfigError("epochs and batch_size must be positive")


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _parse_value(key, val)
        except ValueError:
            raise ConfigError(f"{source}:{lineno}: cannot parse value {val!r} for {key!r}") from None
    cfg = RunConfig(**values)
    _check(cfg)
    return cfg


def parse_config(path) -> tuple[ModelConfig, RunConfig]:
    run = parse_config_text(Path(path).read_text(), str(path)) if path is not None else RunConfig()
    try:
        return run.model_config(), run
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def make_blob_dataset(root, n: int = 8, size: int = 64, seed: int = 0, video_frames: int = 0) -> Path:
    """Write ``n`` synthetic image/mask pairs with one elliptic salient blob each.

    With ``video_frames`` > 0 a video layout is written instead: ``n`` clips of
    that many frames, the blob drifting per frame, flow for every frame but the first.
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    def frame(cy, cx, ry, rx, fg_col, bg_col):
        mask = (((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1).astype(np.uint8)
        shade = 0.15 * (xx / size)[..., None]
        img = np.where(mask[..., None] == 1, fg_col, bg_col + shade)
        img = img + rng.normal(0, 0.03, img.shape)
        return (np.clip(img, 0, 1) * 255).round().astype(np.uint8), mask * 255

    for i in range(n):
        cy, cx = rng.uniform(0.3, 0.7, 2) * size
        ry, rx = rng.uniform(0.15, 0.3, 2) * size
        fg_col = rng.uniform(0.55, 1.0, 3)
        bg_col = rng.uniform(0.0, 0.4, 3)
        if video_frames <= 0:
            img, mask = frame(cy, cx, ry, rx, fg_col, bg_col)
            (root / "images").mkdir(parents=True, exist_ok=True)
            (root / "masks").mkdir(parents=True, exist_ok=True)
            Image.fromarray(img).save(root / "images" / f"blob_{i:03d}.png")
            Image.fromarray(mask).save(root / "masks" / f"blob_{i:03d}.png")
            continue
        clip = root / "clips" / f"clip_{i:02d}"
        dy, dx = rng.uniform(-1.5, 1.5, 2)
        for t in range(video_frames):
            img, mask = frame(cy + t * dy, cx + t * dx, ry, rx, fg_col, bg_col)
            for sub, arr in (("frames", img), ("masks", mask)):
                (clip / sub).mkdir(parents=True, exist_ok=True)
                Image.fromarray(arr).save(clip / sub / f"{t:05d}.png")
            if t > 0:
                uv = np.zeros((size, size, 2), np.float32)
                uv[..., 0] = dx * (mask > 0)
                uv[..., 1] = dy * (mask > 0)
                write_flo(clip / "flow" / f"{t:05d}.flo", uv)
    return root
