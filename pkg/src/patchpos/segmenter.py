"""Light transposed-convolution decoder, finetuning, and IoU metrics."""
from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass

import numpy as np

from .autodiff import (Tensor, conv2d, conv_transpose2d, cross_entropy_from_logits,
                       gather_rows, gelu)
from .checkpoint import check_config_hash, load_checkpoint, save_checkpoint
from .config import FinetuneConfig, PretrainConfig
from .data import DatasetReader, read_labels
from .encoder import Encoder, EncoderConfig
from .groups import GroupEmbedder, GroupPositionEncoding, build_group_setting
from .model import PretrainModel
from .nn import Linear
from .optim import AdamW, cosine_lr
from .views import patchify

log = logging.getLogger(__name__)


class LightDecoder:
    """Four upsampling layers (stride-2 transposed convolutions, padded out
    with stride-1 convolutions when the patch size needs fewer doublings)
    plus a final 1x1 classification convolution."""

    def __init__(self, rng, width: int, patch: int, classes: int, dtype=np.float32):
        ups = int(round(math.log2(patch)))
        if 2 ** ups != patch or ups > 4:
            raise ValueError(f"patch size {patch} must be a power of two <= 16")
        widths = [max(width // 2, 1), max(width // 4, 1), max(width // 8, 1), max(width // 8, 1)]
        self.layers: list[tuple[str, Tensor, Tensor]] = []
        c_in = width
        for i in range(4):
            c_out = widths[i]
            if i < ups:
                k = (rng.standard_normal((c_in, c_out, 2, 2)) * (2.0 / c_in) ** 0.5)
                self.layers.append(("up", Tensor(k.astype(dtype), requires_grad=True),
                                    Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)))
            else:
                k = (rng.standard_normal((c_out, c_in, 3, 3)) * (2.0 / (9 * c_in)) ** 0.5)
                self.layers.append(("same", Tensor(k.astype(dtype), requires_grad=True),
                                    Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)))
            c_in = c_out
        k = rng.standard_normal((classes, c_in, 1, 1)) * (2.0 / c_in) ** 0.5
        self.final = (Tensor(k.astype(dtype), requires_grad=True),
                      Tensor(np.zeros(classes, dtype=dtype), requires_grad=True))
        self.classes = classes
        self.patch = patch

    def params(self, prefix):
        out = {}
        for i, (_, w, b) in enumerate(self.layers):
            out[f"{prefix}.layer{i}.w"] = w
            out[f"{prefix}.layer{i}.b"] = b
        out[f"{prefix}.final.w"] = self.final[0]
        out[f"{prefix}.final.b"] = self.final[1]
        return out

    def __call__(self, grid: Tensor) -> Tensor:
        """(B, d, h, w) token grid -> (B, classes, h*patch, w*patch) logits."""
        x = grid
        for kind, w, b in self.layers:
            if kind == "up":
                x = conv_transpose2d(x, w, stride=2, padding=0)
            else:
                x = conv2d(x, w, stride=1, padding=1)
            x = gelu(x + b.reshape(1, b.shape[0], 1, 1))
        w, b = self.final
        return conv2d(x, w, stride=1, padding=0) + b.reshape(1, b.shape[0], 1, 1)


class SegmentationModel:
    """Grouped embedding + encoder (no group sampling) + light decoder."""

    def __init__(self, cfg: PretrainConfig, channel_tags: list[str], classes: int,
                 same_group_masking: bool = False, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.classes = classes
        self.same_group_masking = same_group_masking
        rng = np.random.default_rng([seed, 0x5E6])
        self.setting = build_group_setting(cfg.group_setting, channel_tags)
        self.enc_cfg = EncoderConfig(cfg.depth, cfg.width, cfg.heads, cfg.mlp_ratio,
                                     cfg.patch_size)
        self.embedder = GroupEmbedder(rng, self.setting, cfg.patch_size, cfg.width, dtype=dtype)
        self.encoding = GroupPositionEncoding(rng, self.setting.num_groups, cfg.width, dtype=dtype)
        self.encoder = Encoder(rng, self.enc_cfg, dtype=dtype)
        self.decoder = LightDecoder(rng, cfg.width, cfg.patch_size, classes, dtype=dtype)

    def params(self):
        out = {}
        out.update(self.embedder.params("embed"))
        out.update(self.encoding.params("encpos"))
        out.update(self.encoder.params("encoder"))
        out.update(self.decoder.params("decoder"))
        return out

    def load_pretrained(self, arrays: dict[str, np.ndarray]):
        """Copy every matching encoder-side parameter from a pretrain checkpoint."""
        own = self.params()
        loaded = 0
        for name, p in own.items():
            if name in arrays and arrays[name].shape == tuple(p.data.shape):
                p.data = np.asarray(arrays[name]).astype(p.data.dtype)
                loaded += 1
        log.info("loaded %d/%d parameters from pretrained checkpoint", loaded, len(own))

    def forward(self, images: np.ndarray) -> Tensor:
        """(B, C, H, W) standardized images -> (B, classes, H, W) logits."""
        cfg = self.cfg
        B, C, H, W = images.shape
        gh, gw = H // cfg.patch_size, W // cfg.patch_size
        if gh * cfg.patch_size != H or gw * cfg.patch_size != W:
            raise ValueError(f"{H}x{W} images not divisible by patch {cfg.patch_size}")
        patches = np.stack([
            patchify(_as_raster(images[i]), cfg.patch_size) for i in range(B)])
        tokens = self.embedder(patches)                      # (B, G*N, d)
        tokens = self.encoding(tokens, gh, gw)
        mode = "same-group-exclusion" if self.same_group_masking else "none"
        z = self.encoder(tokens, mask_mode=mode)             # (B, G*N, d)
        g = self.setting.num_groups
        n = gh * gw
        z = z.reshape(B, g, n, cfg.width).mean(axis=1)       # all groups kept, averaged
        grid = z.reshape(B, gh, gw, cfg.width).transpose((0, 3, 1, 2))
        return self.decoder(grid)


def _as_raster(x: np.ndarray):
    from .views import RasterImage
    return RasterImage(x, [f"c{i}" for i in range(x.shape[0])])


def pixel_cross_entropy(logits: Tensor, labels: np.ndarray, ignore_label: int = -1) -> Tensor:
    """Mean cross-entropy over non-ignored pixels."""
    B, K, H, W = logits.shape
    flat = logits.transpose((0, 2, 3, 1)).reshape(B * H * W, K)
    lab = labels.reshape(-1)
    valid = np.flatnonzero(lab != ignore_label)
    if valid.size == 0:
        return Tensor(np.zeros((), dtype=logits.dtype))
    picked = gather_rows(flat, valid)
    ce = cross_entropy_from_logits(picked, lab[valid].astype(np.int64))
    return ce.mean()


# -- metrics ----------------------------------------------------------------

class ConfusionMatrix:
    """classes x classes pixel counts; ignore-labeled pixels are excluded."""

    def __init__(self, classes: int, ignore_label: int = -1):
        self.classes = classes
        self.ignore_label = ignore_label
        self.counts = np.zeros((classes, classes), dtype=np.int64)

    def update(self, pred: np.ndarray, truth: np.ndarray):
        if pred.shape != truth.shape:
            raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
        keep = truth != self.ignore_label
        p = pred[keep].astype(np.int64)
        t = truth[keep].astype(np.int64)
        idx = t * self.classes + p
        self.counts += np.bincount(idx, minlength=self.classes ** 2).reshape(
            self.classes, self.classes)

    def iou(self) -> tuple[np.ndarray, float | None]:
        """Per-class IoU (nan where a class is absent from the truth) and the
        unweighted mean over classes present in the truth."""
        tp = np.diag(self.counts).astype(np.float64)
        fn = self.counts.sum(axis=1) - tp
        fp = self.counts.sum(axis=0) - tp
        denom = tp + fp + fn
        present = self.counts.sum(axis=1) > 0
        with np.errstate(invalid="ignore", divide="ignore"):
            iou = np.where(denom > 0, tp / np.maximum(denom, 1), np.nan)
        iou = np.where(present, iou, np.nan)
        if not present.any():
            return iou, None
        return iou, float(np.nanmean(iou[present]))


def iou_miou(pred: np.ndarray, truth: np.ndarray, classes: int,
             ignore_label: int = -1) -> tuple[np.ndarray, float | None]:
    cm = ConfusionMatrix(classes, ignore_label)
    cm.update(pred, truth)
    return cm.iou()


# -- finetuning --------------------------------------------------------------

@dataclass
class FinetuneResult:
    miou: float | None
    per_class_iou: np.ndarray
    train_miou: float | None
    steps_to_threshold: int | None
    model: SegmentationModel


def _standardized_images(reader: DatasetReader, ids) -> np.ndarray:
    return np.stack([reader.sample(int(i)).data for i in ids])


def evaluate(model: SegmentationModel, images: np.ndarray, labels: np.ndarray,
             ignore_label: int = -1, batch: int = 8):
    cm = ConfusionMatrix(model.classes, ignore_label)
    for i in range(0, len(images), batch):
        logits = model.forward(images[i:i + batch])
        pred = np.argmax(logits.data, axis=1)
        cm.update(pred, labels[i:i + batch])
    return cm.iou()


def finetune(cfg: FinetuneConfig, pretrain_cfg: PretrainConfig | None = None,
             seed: int | None = None, miou_threshold: float | None = None,
             log_stream=None) -> FinetuneResult:
    """End-to-end finetuning of one run; reports held-out IoU/mIoU."""
    seed = cfg.seed if seed is None else seed
    reader = DatasetReader(cfg.dataset)
    labels = read_labels(cfg.labels)
    if len(labels) != len(reader):
        raise ValueError(f"{len(reader)} images but {len(labels)} label maps")

    ckpt_arrays, ckpt_meta = (None, None)
    if cfg.checkpoint:
        ckpt_arrays, ckpt_meta = load_checkpoint(cfg.checkpoint)
        if pretrain_cfg is None:
            pretrain_cfg = PretrainConfig(**ckpt_meta["config"])
    if pretrain_cfg is None:
        raise ValueError("finetuning needs either a checkpoint or an explicit model config")

    model = SegmentationModel(pretrain_cfg, reader.channel_tags, cfg.classes,
                              same_group_masking=cfg.same_group_masking, seed=seed)
    if ckpt_arrays is not None:
        model.load_pretrained({k[len("param/"):]: v for k, v in ckpt_arrays.items()
                               if k.startswith("param/")})

    rng = np.random.default_rng([seed, 0xF1])
    n = len(reader)
    order = rng.permutation(n)
    n_val = int(round(cfg.val_fraction * n))
    val_ids, train_ids = order[:n_val], order[n_val:]
    if train_ids.size == 0:
        raise ValueError("no training samples left after the validation split")
    train_x = _standardized_images(reader, train_ids)
    train_y = labels[train_ids]
    val_x = _standardized_images(reader, val_ids) if n_val else None
    val_y = labels[val_ids] if n_val else None

    opt = AdamW(model.params(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    warmup = int(round(cfg.warmup_frac * cfg.steps))
    steps_to_threshold = None
    for step in range(cfg.steps):
        ids = rng.integers(0, len(train_x), size=min(cfg.batch_size, len(train_x)))
        logits = model.forward(train_x[ids])
        loss = pixel_cross_entropy(logits, train_y[ids], cfg.ignore_label)
        opt.zero_grad()
        loss.backward()
        opt.step(lr=cosine_lr(step, cfg.steps, cfg.lr, warmup))
        if (step + 1) % cfg.eval_every == 0:
            line = f"step={step + 1} train_loss={float(loss.data):.6f}"
            if val_x is not None and miou_threshold is not None and steps_to_threshold is None:
                _, vm = evaluate(model, val_x, val_y, cfg.ignore_label)
                line += f" val_miou={'none' if vm is None else f'{vm:.4f}'}"
                if vm is not None and vm >= miou_threshold:
                    steps_to_threshold = step + 1
            if log_stream is not None:
                print(line, file=log_stream)

    _, train_miou = evaluate(model, train_x, train_y, cfg.ignore_label)
    if val_x is not None:
        per_class, miou = evaluate(model, val_x, val_y, cfg.ignore_label)
    else:
        per_class, miou = evaluate(model, train_x, train_y, cfg.ignore_label)
    return FinetuneResult(miou, per_class, train_miou, steps_to_threshold, model)


def finetune_runs(cfg: FinetuneConfig, runs: int | None = None, log_stream=None):
    """Repeat finetuning with shifted seeds; returns results and mean mIoU."""
    runs = cfg.runs if runs is None else runs
    results = [finetune(cfg, seed=cfg.seed + r, log_stream=log_stream) for r in range(runs)]
    mious = [r.miou for r in results if r.miou is not None]
    return results, (float(np.mean(mious)) if mious else None)


def save_finetuned(path, model: SegmentationModel, cfg: FinetuneConfig):
    arrays = {f"param/{k}": v.data.copy() for k, v in model.params().items()}
    meta = {"config": model.cfg.to_dict(), "config_hash": model.cfg.hash(),
            "finetune": cfg.to_dict(), "classes": model.classes,
            "same_group_masking": model.same_group_masking}
    save_checkpoint(path, arrays, meta)


def load_finetuned(path, channel_tags: list[str]) -> SegmentationModel:
    arrays, meta = load_checkpoint(path)
    pcfg = PretrainConfig(**meta["config"])
    model = SegmentationModel(pcfg, channel_tags, int(meta["classes"]),
                              same_group_masking=bool(meta["same_group_masking"]))
    model.load_pretrained({k[len("param/"):]: v for k, v in arrays.items()
                           if k.startswith("param/")})
    return model


def write_pgm(path, mask: np.ndarray, classes: int):
    """Dump a predicted mask as a binary PGM for quick visual inspection."""
    scale = 255 // max(classes - 1, 1)
    img = (mask.astype(np.int32) * scale).clip(0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        f.write(img.tobytes())
