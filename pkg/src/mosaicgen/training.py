"""Training loop for the toy denoiser: batch assembly from the synthetic
corpus, RMSProp updates on the flow-matching loss, CSV logging, and a
binary checkpoint format.

Checkpoint layout: 8-byte magic, u32 version, u32 JSON-config length +
bytes, u32 tensor count, directory entries (u16 name length + utf-8 name,
u8 ndim, u32 dims..., u64 offset), then float32 little-endian tensor data.
"""

from __future__ import annotations

import csv
import json
import struct
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .denoiser import (
    BACKGROUND_CLASSES,
    Condition,
    ToyModelConfig,
    TransformerDenoiser,
    drop_condition,
    fm_loss,
)
from .grids import MosaicLayout, place_panel, to_latent, unfold
from .subjects import PANEL_SIZE, SubjectRecord, ViewParams, build_corpus, render_view, \
    segment_to_white

CHECKPOINT_MAGIC = b"TOYFMCK\x00"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"loss became non-finite at step {step}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    batch_size: int = 8
    lr: float = 1e-3
    rms_decay: float = 0.99
    rms_eps: float = 1e-8
    cond_dropout: float = 0.1  # null-condition rate enabling guidance
    attr_dropout: float = 0.5  # hue/texture hidden, like a minimal prompt
    ref_noise: float = 0.1  # iid noise on reference panels, teaches averaging
    grids: tuple[tuple[int, int], ...] = ((1, 2), (2, 2), (3, 3))
    grid_weights: tuple[float, ...] = (0.25, 0.25, 0.5)
    segment_prob: float = 0.5
    pose_prob: float = 0.2
    num_subjects: int = 512
    views_per_subject: int = 4
    panel_size: int = PANEL_SIZE
    corpus_seed: int = 1000
    seed: int = 0
    log_every: int = 50

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["grids"] = [list(g) for g in self.grids]
        d["grid_weights"] = list(self.grid_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["grids"] = tuple(tuple(g) for g in d["grids"])
        d["grid_weights"] = tuple(d["grid_weights"])
        return cls(**d)


def build_training_condition(record: SubjectRecord, background: str, pose: bool,
                             rng: np.random.Generator, cfg: TrainConfig) -> Condition:
    spec = record.spec
    hue = spec.hue
    texture = spec.texture[0] if spec.texture is not None else None
    if rng.random() < cfg.attr_dropout:
        hue, texture = None, None
    cond = Condition(shape_class=spec.shape_class, hue=hue, texture=texture,
                     background=background, pose=pose)
    return drop_condition(cond, rng, cfg.cond_dropout)


def _target_view_latent(record: SubjectRecord, background: str, pose: bool,
                        rng: np.random.Generator, size: int) -> np.ndarray:
    rotation = 45.0 if pose else 0.0
    noise_seed = int(rng.integers(0, 2 ** 31)) if background == "noise" else 0
    rgb, alpha = _composite_view(record, rotation, background, noise_seed, size)
    return to_latent(np.dstack([rgb, alpha])[:, :, :3])


_TARGET_RGBA_CACHE: dict[tuple[int, int, float, int], tuple[np.ndarray, np.ndarray]] = {}


def _composite_view(record: SubjectRecord, rotation: float, background: str,
                    noise_seed: int, size: int) -> tuple[np.ndarray, np.ndarray]:
    from .subjects import render_background

    key = (id(record), record.index, rotation, size)
    if key not in _TARGET_RGBA_CACHE:
        rgb, alpha = render_view(record.spec, ViewParams(rotation=rotation, background="plain"), size)
        if len(_TARGET_RGBA_CACHE) > 4096:
            _TARGET_RGBA_CACHE.clear()
        _TARGET_RGBA_CACHE[key] = (rgb.astype(np.float64) / 255.0, alpha.astype(np.float64) / 255.0)
    subj, a = _TARGET_RGBA_CACHE[key]
    bg = render_background(background, size, noise_seed=noise_seed)
    out = a[:, :, None] * subj + (1 - a)[:, :, None] * bg[:, :, None]
    rgb8 = np.round(np.clip(out, 0, 1) * 255).astype(np.uint8)
    return rgb8, np.round(a * 255).astype(np.uint8)


def reference_latents(record: SubjectRecord, segment: bool) -> list[np.ndarray]:
    """Per-view reference latents, background removed to white when
    segmenting."""
    outs = []
    for rgb, alpha in record.views:
        img = segment_to_white(rgb, alpha) if segment else rgb
        outs.append(to_latent(img))
    return outs


def assemble_training_mosaic(record: SubjectRecord, grid: tuple[int, int], segment: bool,
                             background: str, pose: bool, rng: np.random.Generator,
                             cfg: TrainConfig) -> np.ndarray:
    """Full mosaic with a clean conditioned view in the target slot and
    reference views elsewhere (slightly noised, training only)."""
    size = cfg.panel_size
    refs = reference_latents(record, segment)
    layout = MosaicLayout.build(grid[0], grid[1], size, size,
                                num_references=len(refs), mode="cycle")
    mosaic = unfold(refs, layout)
    if cfg.ref_noise > 0:
        noise = rng.normal(0.0, cfg.ref_noise, mosaic.shape).astype(np.float32)
        target_rows, target_cols = layout.panel_box(*layout.target)
        noise[target_rows, target_cols] = 0.0
        mosaic = mosaic + noise
    target = _target_view_latent(record, background, pose, rng, size)
    return place_panel(mosaic, layout, *layout.target, target)


def make_batch(records: list[SubjectRecord], cfg: TrainConfig, rng: np.random.Generator):
    """One training batch; all items share a grid shape so latents stack."""
    gi = rng.choice(len(cfg.grids), p=np.asarray(cfg.grid_weights) / sum(cfg.grid_weights))
    grid = cfg.grids[gi]
    latents, conds = [], []
    for _ in range(cfg.batch_size):
        record = records[rng.integers(0, len(records))]
        segment = rng.random() < cfg.segment_prob
        background = BACKGROUND_CLASSES[rng.integers(0, len(BACKGROUND_CLASSES))]
        pose = rng.random() < cfg.pose_prob
        latents.append(assemble_training_mosaic(record, grid, segment, background, pose, rng, cfg))
        conds.append(build_training_condition(record, background, pose, rng, cfg))
    return np.stack(latents), conds


@dataclass
class RmsPropState:
    cache: dict[str, np.ndarray] = field(default_factory=dict)

    def update(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               lr: float, decay: float, eps: float) -> None:
        for name, g in grads.items():
            if name not in self.cache:
                self.cache[name] = np.zeros_like(g)
            c = self.cache[name]
            c *= decay
            c += (1.0 - decay) * g * g
            params[name] -= (lr * g / (np.sqrt(c) + eps)).astype(params[name].dtype)


def train(
    model: TransformerDenoiser,
    records: list[SubjectRecord],
    cfg: TrainConfig,
    log_path: str | Path | None = None,
    start_step: int = 0,
    opt_state: RmsPropState | None = None,
    progress: bool = False,
):
    """Run cfg.steps of RMSProp on the flow-matching loss.

    Returns (model, history, opt_state); raises TrainingDiverged with the
    parameters rolled back to the last finite step.
    """
    if not records:
        raise ValueError("empty training corpus")
    rng = np.random.default_rng([cfg.seed, start_step])
    opt = opt_state or RmsPropState()
    history: list[tuple[int, float, float]] = []
    log_file = None
    writer = None
    if log_path is not None:
        new = not Path(log_path).exists()
        log_file = open(log_path, "a", newline="")
        writer = csv.writer(log_file)
        if new:
            writer.writerow(["step", "loss", "wall_ms"])
    last_good = {k: v.copy() for k, v in model.params.items()}
    try:
        for i in range(start_step, start_step + cfg.steps):
            t0 = time.perf_counter()
            latents, conds = make_batch(records, cfg, rng)
            loss, grads = fm_loss(model, latents, conds, rng)
            if not np.isfinite(loss):
                model.params.update(last_good)
                raise TrainingDiverged(i)
            opt.update(model.params, grads, cfg.lr, cfg.rms_decay, cfg.rms_eps)
            if not all(np.isfinite(v).all() for v in model.params.values()):
                model.params.update(last_good)
                raise TrainingDiverged(i)
            for k, v in model.params.items():
                np.copyto(last_good[k], v)
            wall_ms = (time.perf_counter() - t0) * 1e3
            history.append((i, loss, wall_ms))
            if writer is not None and (i % cfg.log_every == 0 or i == start_step + cfg.steps - 1):
                writer.writerow([i, f"{loss:.6f}", f"{wall_ms:.1f}"])
                log_file.flush()
            if progress and i % cfg.log_every == 0:
                print(f"step {i}: loss {loss:.4f} ({wall_ms:.0f} ms)", flush=True)
    finally:
        if log_file is not None:
            log_file.close()
    return model, history, opt


def training_corpus(cfg: TrainConfig) -> list[SubjectRecord]:
    return build_corpus(cfg.num_subjects, cfg.views_per_subject, cfg.corpus_seed,
                        cfg.panel_size)


# ---------------------------------------------------------------------------
# checkpoint IO
# ---------------------------------------------------------------------------

def save_checkpoint(
    path: str | Path,
    model: TransformerDenoiser,
    step: int,
    dataset_seed: int,
    train_config: TrainConfig | None = None,
    opt_state: RmsPropState | None = None,
) -> None:
    meta = {
        "model": model.config.to_dict(),
        "step": step,
        "dataset_seed": dataset_seed,
        "train": train_config.to_dict() if train_config is not None else None,
    }
    tensors: list[tuple[str, np.ndarray]] = sorted(model.params.items())
    if opt_state is not None:
        tensors += [(f"opt/{k}", v) for k, v in sorted(opt_state.cache.items())]
    blob = json.dumps(meta).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(tensors)))
        offset = 0
        for name, arr in tensors:
            enc = name.encode()
            f.write(struct.pack("<H", len(enc)))
            f.write(enc)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(struct.pack("<Q", offset))
            offset += arr.size * 4
        for _, arr in tensors:
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path):
    """Returns (model, meta, opt_state)."""
    with open(path, "rb") as f:
        if f.read(8) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<I", f.read(4))
        meta = json.loads(f.read(blob_len).decode())
        (count,) = struct.unpack("<I", f.read(4))
        directory = []
        for _ in range(count):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode()
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            (offset,) = struct.unpack("<Q", f.read(8))
            directory.append((name, shape, offset))
        data_start = f.tell()
        params: dict[str, np.ndarray] = {}
        opt = RmsPropState()
        for name, shape, offset in directory:
            size = int(np.prod(shape)) if shape else 1
            f.seek(data_start + offset)
            arr = np.frombuffer(f.read(size * 4), dtype="<f4").reshape(shape).astype(np.float32)
            if name.startswith("opt/"):
                opt.cache[name[4:]] = arr.copy()
            else:
                params[name] = arr.copy()
    config = ToyModelConfig.from_dict(meta["model"])
    expected = set(TransformerDenoiser.create(config, seed=0).params)
    if set(params) != expected:
        raise ValueError(f"{path}: tensor directory does not match the config")
    model = TransformerDenoiser(config, params)
    return model, meta, (opt if opt.cache else None)
