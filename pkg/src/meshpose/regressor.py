"""Patient-specific 6-DoF pose regression network and its training recipe.

Architecture: 3 blocks of (conv, conv, ReLU) with average pooling (stride 2)
after the first two blocks, then fully-connected 128-64-32 with ReLU and a
linear 6-unit head emitting [r_x, r_y, r_z, t_x, t_y, t_z]. Training uses
Adam for 200 epochs, mini-batches of 8, and a learning rate decaying
exponentially from 1e-3 to 1e-4 across epochs. The loss is the sum of two
unsquared L2 norms, translation and rotation handled separately.

Inputs are normalized with training-set channel statistics and pose targets
are scaled to zero mean / unit std per dimension; both transforms are stored
in the model bundle so prediction returns raw radians and millimetres.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as Fnn

from .geometry import Pose, matrix_to_rodrigues, rodrigues_to_matrix

log = logging.getLogger(__name__)

WEIGHTS_NAME = "weights.bin"
META_NAME = "meta.json"


@dataclass(frozen=True)
class RegressorConfig:
    input_size: int = 256
    block_channels: tuple[int, int, int] = (16, 32, 64)
    fc_sizes: tuple[int, int, int] = (128, 64, 32)
    epochs: int = 200
    batch_size: int = 8
    lr_start: float = 1e-3
    lr_end: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (self.lr_start >= self.lr_end > 0):
            raise ValueError("need lr_start >= lr_end > 0")
        if self.input_size % 4 != 0 or self.input_size < 4:
            raise ValueError("input_size must be divisible by 4 (two stride-2 poolings)")
        if len(self.block_channels) != 3 or len(self.fc_sizes) != 3:
            raise ValueError("block_channels and fc_sizes must each have 3 entries")


class PoseRegressorNet(nn.Module):
    def __init__(self, cfg: RegressorConfig):
        super().__init__()
        c1, c2, c3 = cfg.block_channels
        f1, f2, f3 = cfg.fc_sizes
        self.features = nn.Sequential(
            nn.Conv2d(3, c1, 3, padding=1), nn.Conv2d(c1, c1, 3, padding=1), nn.ReLU(),
            nn.AvgPool2d(2, 2),
            nn.Conv2d(c1, c2, 3, padding=1), nn.Conv2d(c2, c2, 3, padding=1), nn.ReLU(),
            nn.AvgPool2d(2, 2),
            nn.Conv2d(c2, c3, 3, padding=1), nn.Conv2d(c3, c3, 3, padding=1), nn.ReLU(),
        )
        flat = (cfg.input_size // 4) ** 2 * c3
        self.head = nn.Sequential(
            nn.Linear(flat, f1), nn.ReLU(),
            nn.Linear(f1, f2), nn.ReLU(),
            nn.Linear(f2, f3), nn.ReLU(),
            nn.Linear(f3, 6),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x).flatten(1))


def build_model(cfg: RegressorConfig) -> PoseRegressorNet:
    """Untrained network with seed-deterministic initialization."""
    torch.manual_seed(cfg.seed)
    return PoseRegressorNet(cfg)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def pose_loss(pred, gt):
    """||t_gt - t_pred||2 + ||r_gt - r_pred||2, averaged over the batch.

    Accepts (6,) vectors or (B, 6) batches; torch tensors keep autograd,
    numpy/list inputs return a float.
    """
    was_array = not isinstance(pred, torch.Tensor)
    p = torch.as_tensor(np.asarray(pred, dtype=np.float64)) if was_array else pred
    g = torch.as_tensor(np.asarray(gt, dtype=np.float64)) if not isinstance(gt, torch.Tensor) else gt
    if p.ndim == 1:
        p = p.unsqueeze(0)
    if g.ndim == 1:
        g = g.unsqueeze(0)
    r_err = torch.linalg.vector_norm(p[:, :3] - g[:, :3], dim=1)
    t_err = torch.linalg.vector_norm(p[:, 3:] - g[:, 3:], dim=1)
    loss = (t_err + r_err).mean()
    return float(loss.item()) if was_array else loss


@dataclass
class TrainedModel:
    model: PoseRegressorNet
    config: RegressorConfig
    image_mean: np.ndarray  # (3,) channel means of the training images
    image_std: np.ndarray
    pose_mean: np.ndarray  # (6,) target scaling
    pose_std: np.ndarray
    history: dict[str, list[float]] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("image_mean", "image_std", "pose_mean", "pose_std"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be finite")
            setattr(self, name, arr)

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        torch.save(self.model.state_dict(), directory / WEIGHTS_NAME)
        meta = {
            "config": {
                "input_size": self.config.input_size,
                "block_channels": list(self.config.block_channels),
                "fc_sizes": list(self.config.fc_sizes),
                "epochs": self.config.epochs,
                "batch_size": self.config.batch_size,
                "lr_start": self.config.lr_start,
                "lr_end": self.config.lr_end,
                "seed": self.config.seed,
            },
            "normalization": {
                "image_mean": self.image_mean.tolist(),
                "image_std": self.image_std.tolist(),
                "pose_mean": self.pose_mean.tolist(),
                "pose_std": self.pose_std.tolist(),
            },
            "history": self.history,
        }
        (directory / META_NAME).write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
        return directory

    @classmethod
    def load(cls, directory) -> "TrainedModel":
        directory = Path(directory)
        meta = json.loads((directory / META_NAME).read_text())
        c = meta["config"]
        cfg = RegressorConfig(
            input_size=c["input_size"],
            block_channels=tuple(c["block_channels"]),
            fc_sizes=tuple(c["fc_sizes"]),
            epochs=c["epochs"],
            batch_size=c["batch_size"],
            lr_start=c["lr_start"],
            lr_end=c["lr_end"],
            seed=c["seed"],
        )
        model = PoseRegressorNet(cfg)
        model.load_state_dict(torch.load(directory / WEIGHTS_NAME, weights_only=True))
        model.eval()
        n = meta["normalization"]
        return cls(
            model=model,
            config=cfg,
            image_mean=np.asarray(n["image_mean"]),
            image_std=np.asarray(n["image_std"]),
            pose_mean=np.asarray(n["pose_mean"]),
            pose_std=np.asarray(n["pose_std"]),
            history=meta["history"],
        )


def learning_rate(cfg: RegressorConfig, epoch: int) -> float:
    """Exponential decay hitting lr_start at epoch 0 and lr_end at the last epoch."""
    if cfg.epochs == 1:
        return cfg.lr_start
    frac = epoch / (cfg.epochs - 1)
    return cfg.lr_start * (cfg.lr_end / cfg.lr_start) ** frac


def _prepare_images(images: np.ndarray, size: int) -> torch.Tensor:
    """uint8/float (N, H, W, 3) -> float32 (N, 3, size, size) in [0, 1]."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.shape[-1] != 3:
        raise ValueError(f"expected 3 channels, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    x = torch.from_numpy(np.ascontiguousarray(arr.astype(np.float32))).permute(0, 3, 1, 2)
    if x.shape[2] != size or x.shape[3] != size:
        x = Fnn.interpolate(x, size=(size, size), mode="bilinear", align_corners=False,
                            antialias=True)
    return x


def _as_training_arrays(data) -> tuple[np.ndarray, np.ndarray]:
    if hasattr(data, "load_arrays"):
        return data.load_arrays()
    images, poses = data
    return np.asarray(images), np.asarray(poses, dtype=np.float64)


def train(model: PoseRegressorNet, train_data, val_data, cfg: RegressorConfig) -> TrainedModel:
    """Train on (images, poses) arrays or a CaseDataset; returns a TrainedModel.

    Deterministic for a fixed cfg.seed (seeded shuffling, no worker threads).
    Aborts with the offending batch index if the loss turns non-finite.
    """
    images, poses = _as_training_arrays(train_data)
    if len(images) == 0:
        raise ValueError("training set is empty")
    x = _prepare_images(images, cfg.input_size)
    image_mean = x.mean(dim=(0, 2, 3)).numpy().astype(np.float64)
    image_std = np.maximum(x.std(dim=(0, 2, 3)).numpy().astype(np.float64), 1e-6)
    pose_mean = poses.mean(axis=0)
    pose_std = np.maximum(poses.std(axis=0), 1e-8)

    mean_t = torch.tensor(image_mean, dtype=torch.float32).view(1, 3, 1, 1)
    std_t = torch.tensor(image_std, dtype=torch.float32).view(1, 3, 1, 1)
    x = (x - mean_t) / std_t
    y = torch.from_numpy(((poses - pose_mean) / pose_std).astype(np.float32))

    x_val = y_val = None
    if val_data is not None:
        v_images, v_poses = _as_training_arrays(val_data)
        if len(v_images):
            x_val = (_prepare_images(v_images, cfg.input_size) - mean_t) / std_t
            y_val = torch.from_numpy(((v_poses - pose_mean) / pose_std).astype(np.float32))

    gen = torch.Generator().manual_seed(cfg.seed)
    torch.manual_seed(cfg.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr_start)
    n = x.shape[0]
    history: dict[str, list[float]] = {"train_loss": [], "val_loss": [], "lr": []}
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        lr = learning_rate(cfg, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        model.train()
        perm = torch.randperm(n, generator=gen)
        total = 0.0
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start : start + cfg.batch_size]
            optimizer.zero_grad()
            loss = pose_loss(model(x[idx]), y[idx])
            if not torch.isfinite(loss):
                raise RuntimeError(f"non-finite loss at epoch {epoch}, batch {bi}")
            loss.backward()
            optimizer.step()
            total += float(loss.item()) * len(idx)
        history["train_loss"].append(total / n)
        history["lr"].append(lr)
        if x_val is not None:
            model.eval()
            with torch.no_grad():
                vl = 0.0
                for start in range(0, x_val.shape[0], 64):
                    xb = x_val[start : start + 64]
                    vl += float(pose_loss(model(xb), y_val[start : start + 64]).item()) * len(xb)
            history["val_loss"].append(vl / x_val.shape[0])
        else:
            history["val_loss"].append(float("nan"))
        if (epoch + 1) % 25 == 0 or epoch == cfg.epochs - 1:
            log.info(
                "epoch %d/%d lr=%.2e train=%.4f val=%.4f (%.1fs)",
                epoch + 1, cfg.epochs, lr, history["train_loss"][-1],
                history["val_loss"][-1], time.perf_counter() - t0,
            )
    model.eval()
    return TrainedModel(
        model=model,
        config=cfg,
        image_mean=image_mean,
        image_std=image_std,
        pose_mean=pose_mean,
        pose_std=pose_std,
        history=history,
    )


def _canonical_rotation_vector(r: np.ndarray) -> np.ndarray:
    """Wrap a rotation vector into the open ball ||r|| < pi."""
    norm = np.linalg.norm(r)
    if norm >= math.pi:
        r = matrix_to_rodrigues(rodrigues_to_matrix(r))
        norm = np.linalg.norm(r)
        if norm >= math.pi:  # matrix_to_rodrigues may return exactly pi
            r = r * ((math.pi - 1e-9) / norm)
    return r


def predict(trained: TrainedModel, image: np.ndarray) -> Pose:
    """Predict the 6-DoF pose of a single RGB image."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an RGB image (H, W, 3), got shape {arr.shape}")
    x = _prepare_images(arr[None], trained.config.input_size)
    mean_t = torch.tensor(trained.image_mean, dtype=torch.float32).view(1, 3, 1, 1)
    std_t = torch.tensor(trained.image_std, dtype=torch.float32).view(1, 3, 1, 1)
    trained.model.eval()
    with torch.no_grad():
        out = trained.model((x - mean_t) / std_t)[0].numpy().astype(np.float64)
    vec = out * trained.pose_std + trained.pose_mean
    return Pose(_canonical_rotation_vector(vec[:3]), vec[3:])
