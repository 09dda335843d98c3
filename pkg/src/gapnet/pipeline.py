"""Adam with a polynomial schedule, the training loop and inference."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from .dataio import (
    Checkpoint,
    DataError,
    RunConfig,
    SampleRecord,
    checkpoint_read,
    checkpoint_write,
    flow_to_image,
    image_to_chw,
    normalize_image,
    read_flo,
    read_image_array,
    load_mask,
    save_gray,
    save_palette,
    scan_dataset,
)
from .labels import PALETTE, decompose, edt_squared, region_targets
from .losses import overall_loss
from .metrics import mae
from .model import GAPNet, ModelConfig, build_model
from .nnops import resize_bilinear
from .tensorcore import ShapeError, Tape, Tensor

VIDEO_LR_FACTOR = 0.1


@dataclass
class OptimState:
    lr: float = 1.7e-4
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    weight_decay: float = 1e-4
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: list[Tensor], grads: list[np.ndarray | None], state: OptimState) -> None:
    """Bias-corrected Adam with decoupled weight decay, in place."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.t
    c2 = 1 - b2**state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient {g.shape} does not match parameter {p.data.shape}")
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay:
            step = step + state.lr * state.weight_decay * p.data
        p.data -= step.astype(p.data.dtype)


def poly_lr(it: int, max_iter: int, base: float = 1.7e-4, power: float = 0.9) -> float:
    if not 0 <= it <= max_iter:
        raise ValueError(f"iteration {it} outside [0, {max_iter}]")
    return base * (1 - it / max_iter) ** power


def resize_nearest(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = mask.shape
    ys = np.minimum(((np.arange(size[0]) + 0.5) * h / size[0]).astype(np.int64), h - 1)
    xs = np.minimum(((np.arange(size[1]) + 0.5) * w / size[1]).astype(np.int64), w - 1)
    return mask[ys][:, xs]


@dataclass
class RunManifest:
    seed: int
    config: dict
    losses: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    steps: int = 0
    notes: dict = field(default_factory=dict)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=1))

    @classmethod
    def read(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


class SampleCache:
    """Decoded samples and per-(size, flip) region targets."""

    def __init__(self, records: list[SampleRecord]):
        self.records = records
        self.images = [image_to_chw(read_image_array(r.image_path)) for r in records]
        self.masks = [load_mask(r.mask_path) for r in records]
        self.flows = [read_flo(r.flow_path).uv if r.flow_path else None for r in records]
        self._targets: dict[tuple, dict] = {}

    def sample(self, i: int, size: int, flip: bool):
        img = resize_bilinear(self.images[i][None], (size, size))[0]
        key = (i, size, flip)
        if key not in self._targets:
            m = resize_nearest(self.masks[i], (size, size))
            if flip:
                m = m[:, ::-1]
            m = np.ascontiguousarray(m)
            self._targets[key] = region_targets(m, decompose(m, dist2=edt_squared(m)))
        if flip:
            img = img[:, :, ::-1]
        flow = None
        if self.flows[i] is not None:
            uv = self.flows[i]
            if flip:
                uv = uv[:, ::-1] * np.array([-1, 1], dtype=uv.dtype)
            flow = resize_bilinear(flow_to_image(uv)[None], (size, size))[0]
            flow = normalize_image(flow)
        return normalize_image(img), self._targets[key], flow


def _stack_targets(items: list[dict]) -> dict[str, np.ndarray]:
    return {k: np.stack([t[k] for t in items])[:, None].astype(np.float32) for k in items[0]}


def load_weights(model: GAPNet, ckpt: Checkpoint, strict: bool = True) -> list[str]:
    """Copy tensors into the model; returns model names absent from the checkpoint."""
    if strict:
        model.load_state_dict(ckpt.tensors)
        return []
    own = model.state_dict()
    missing = []
    for k, arr in own.items():
        if k in ckpt.tensors and ckpt.tensors[k].shape == arr.shape:
            arr[...] = ckpt.tensors[k]
        else:
            missing.append(k)
    return missing


def save_model(model: GAPNet, path) -> None:
    checkpoint_write(path, model.state_dict())


def train(
    dataset,
    run: RunConfig,
    out_dir,
    model_cfg: ModelConfig | None = None,
    flip: bool = True,
    max_steps: int | None = None,
    init_checkpoint=None,
    log=None,
) -> tuple[GAPNet, RunManifest]:
    """Train on a dataset root (or a record list); writes ``latest.gapn`` each epoch."""
    records = scan_dataset(dataset, run.mode) if not isinstance(dataset, list) else dataset
    if run.mode == "video" and any(r.flow_path is None for r in records):
        raise DataError("video mode needs a flow file for every record")
    model_cfg = model_cfg or run.model_config()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(run.seed)
    model = build_model(model_cfg, seed=run.seed)
    lr = run.lr
    manifest = RunManifest(seed=run.seed, config=asdict(run))
    manifest.notes["flip"] = flip
    if init_checkpoint is not None:
        missing = load_weights(model, checkpoint_read(init_checkpoint), strict=False)
        manifest.notes["init_missing"] = len(missing)
        if run.mode == "video":
            lr *= VIDEO_LR_FACTOR
    cache = SampleCache(records)
    params = model.parameters()
    state = OptimState(lr, run.adam_beta1, run.adam_beta2, weight_decay=run.weight_decay)
    per_epoch = -(-len(records) // run.batch_size)
    max_iter = run.epochs * per_epoch
    if max_steps is not None:
        max_iter = min(max_iter, max_steps)
    step = 0
    model.train()
    for epoch in range(run.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(records))
        for b in range(per_epoch):
            if step >= max_iter:
                break
            idx = order[b * run.batch_size : (b + 1) * run.batch_size]
            size = int(run.train_sizes[rng.integers(len(run.train_sizes))])
            flips = rng.random(len(idx)) < 0.5 if flip else np.zeros(len(idx), bool)
            batch = [cache.sample(int(i), size, bool(f)) for i, f in zip(idx, flips)]
            x = Tensor(np.stack([s[0] for s in batch]))
            flow = Tensor(np.stack([s[2] for s in batch])) if run.mode == "video" else None
            targets = _stack_targets([s[1] for s in batch])
            state.lr = poly_lr(step, max_iter, lr, run.lr_power)
            model.zero_grad()
            with Tape() as tape:
                outputs = model(x, flow)
                report = overall_loss(outputs, targets, model_cfg.supervision_setting)
                tape.backward(report.overall)
            adam_step(params, [p.grad for p in params], state)
            manifest.losses.append(float(report.overall.item()))
            step += 1
            if log is not None:
                log(f"epoch {epoch} step {step}/{max_iter} size {size} loss {manifest.losses[-1]:.5f}")
        manifest.epoch_seconds.append(time.perf_counter() - t0)
        manifest.steps = step
        save_model(model, out_dir / "latest.gapn")
        manifest.write(out_dir / "manifest.json")
        if step >= max_iter:
            break
    return model, manifest


def predict(model: GAPNet, image01: np.ndarray, size: int, flow_uv: np.ndarray | None = None):
    """Tape-free eval forward of one [3, H, W] image in [0, 1]; maps at the input extent."""
    h, w = image01.shape[1:]
    x = resize_bilinear(image01[None], (size, size))
    flow = None
    if flow_uv is not None:
        flow = Tensor(normalize_image(resize_bilinear(flow_to_image(flow_uv)[None], (size, size))[0])[None])
    model.eval()
    with tc.no_tape():
        out = model(Tensor(normalize_image(x[0])[None]), flow)
    maps = {}
    for name in ("p1", "p2", "p3"):
        m = getattr(out, name).data[:, :1].astype(np.float64)
        maps[name] = resize_bilinear(m, (h, w))[0, 0] if (h, w) != (size, size) else m[0, 0]
    return maps


def training_mae(model: GAPNet, records: list[SampleRecord], size: int) -> float:
    """Mean MAE of p3 against the training masks, eval mode."""
    vals = []
    for r in records:
        img = image_to_chw(read_image_array(r.image_path))
        flow = read_flo(r.flow_path).uv if (r.flow_path and model.cfg.mode == "video") else None
        p3 = predict(model, img, size, flow)["p3"]
        vals.append(mae(p3, load_mask(r.mask_path)))
    return float(np.mean(vals))


def infer(
    checkpoint,
    input_dir,
    out_dir,
    size: int = 384,
    model_cfg: ModelConfig | None = None,
    emit_sides: bool = False,
    emit_regions: bool = False,
) -> list[Path]:
    """Write p3 (and optionally p1/p2 and the regions of binarised p3) per input image."""
    model_cfg = model_cfg or ModelConfig.paper()
    model = build_model(model_cfg)
    load_weights(model, checkpoint_read(checkpoint), strict=True)
    input_dir, out_dir = Path(input_dir), Path(out_dir)
    jobs = []
    if model_cfg.mode == "video":
        for r in scan_dataset(input_dir, "video"):
            jobs.append((r.image_path, r.flow_path, out_dir / r.clip_id))
    else:
        from .dataio import IMAGE_SUFFIXES

        src = input_dir / "images" if (input_dir / "images").is_dir() else input_dir
        files = [f for f in sorted(src.iterdir()) if f.suffix.lower() in IMAGE_SUFFIXES]
        if not files:
            raise DataError(f"no images in {src}")
        jobs = [(f, None, out_dir) for f in files]
    written = []
    for img_path, flow_path, dst in jobs:
        img = image_to_chw(read_image_array(img_path))
        flow = read_flo(flow_path).uv if flow_path is not None else None
        maps = predict(model, img, size, flow)
        stem = img_path.stem
        outputs = {f"{stem}.png": maps["p3"]}
        if emit_sides:
            outputs[f"{stem}_p1.png"] = maps["p1"]
            outputs[f"{stem}_p2.png"] = maps["p2"]
        for name, m in outputs.items():
            save_gray(dst / name, m)
            written.append(dst / name)
        if emit_regions:
            label = decompose((maps["p3"] >= 0.5).astype(np.uint8))
            path = dst / f"{stem}_regions.png"
            save_palette(path, label.region, PALETTE)
            written.append(path)
    return written
