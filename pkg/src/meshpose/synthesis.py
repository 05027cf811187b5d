"""Appearance synthesis: per-class masked Gram matching solved with L-BFGS.

Given a class LabelImage rendered from a pose and a texture exemplar (an RGB
image with its own class map), `synthesize_appearance` optimizes an output
image whose per-class feature statistics match the exemplar's, class by class
(background / parenchyma / vessel), at every configured extractor layer:

    loss = sum_l sum_c || G[l,c](exemplar) - G[l,c](candidate) ||_F^2

where G[l,c] is the Gram matrix of layer-l features restricted to the pixels
of class c, normalized by that class's pixel count at layer-l resolution.
Class masks are nearest-neighbor downsamples of the class maps. The module
also provides the elastic-deformation augmentation applied to finished
images.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from scipy.ndimage import map_coordinates

from .features import DEFAULT_LAYERS, FeatureExtractor, build_extractor
from .rasterizer import LabelImage

_CLASSES = (0, 1, 2)


class SynthesisError(RuntimeError):
    pass


@dataclass(frozen=True)
class TextureExemplar:
    """Texture source: an RGB image plus the class map describing its regions."""

    id: str
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    class_map: np.ndarray  # (H, W) uint8 in {0, 1, 2}

    def __post_init__(self):
        img = np.asarray(self.image)
        if img.dtype == np.uint8:
            img = img.astype(np.float32) / 255.0
        img = img.astype(np.float32)
        cm = np.asarray(self.class_map).astype(np.uint8)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError("exemplar image must be (H, W, 3)")
        if cm.shape != img.shape[:2]:
            raise ValueError("exemplar image and class_map dimensions differ")
        present = set(np.unique(cm).tolist())
        if not {0, 1, 2} <= present:
            raise ValueError(f"exemplar class_map must contain all three classes, has {sorted(present)}")
        img.setflags(write=False)
        cm.setflags(write=False)
        object.__setattr__(self, "image", img)
        object.__setattr__(self, "class_map", cm)


@dataclass(frozen=True)
class SynthesisConfig:
    layer_set: tuple[str, ...] = DEFAULT_LAYERS
    max_iterations: int = 100
    convergence_tol: float = 1e-6
    init_mode: str = "class-mean"  # or "noise"
    seed: int = 0
    extractor: str = "vgg19"  # "vgg19", "tiny" or "tiny:<seed>"

    def __post_init__(self):
        if not self.layer_set:
            raise ValueError("layer_set must be non-empty")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.init_mode not in ("noise", "class-mean"):
            raise ValueError("init_mode must be 'noise' or 'class-mean'")


def downsample_labels(labels: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor (center-sampled) downsample of a class map."""
    H, W = labels.shape
    h, w = shape
    iy = np.minimum((((np.arange(h) + 0.5) * H / h)).astype(int), H - 1)
    ix = np.minimum((((np.arange(w) + 0.5) * W / w)).astype(int), W - 1)
    return labels[iy][:, ix]


def masked_gram(features, mask):
    """Gram matrix of a (C, H, W) feature map over masked pixels.

    G_ij = sum_p mask(p) F_i(p) F_j(p) / sum_p mask(p); the zero matrix when
    the mask is empty. Accepts torch tensors (differentiable) or numpy arrays.
    """
    if isinstance(features, torch.Tensor):
        F = features
        m = mask if isinstance(mask, torch.Tensor) else torch.as_tensor(np.asarray(mask))
        m = m.to(F.dtype)
        n = m.sum()
        if float(n) == 0.0:
            return F.new_zeros((F.shape[0], F.shape[0]))
        return torch.einsum("chw,dhw->cd", F * m.unsqueeze(0), F) / n
    F = np.asarray(features, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    n = m.sum()
    if n == 0.0:
        return np.zeros((F.shape[0], F.shape[0]))
    return np.einsum("chw,dhw->cd", F * m[None], F) / n


def _class_masks(labels: np.ndarray, shape, device, dtype) -> list[torch.Tensor | None]:
    down = downsample_labels(labels, shape)
    masks: list[torch.Tensor | None] = []
    for c in _CLASSES:
        m = down == c
        masks.append(torch.as_tensor(m).to(device=device, dtype=dtype) if m.any() else None)
    return masks


def _to_tensor(image: np.ndarray, dtype) -> torch.Tensor:
    arr = np.asarray(image)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    return torch.as_tensor(arr).permute(2, 0, 1).unsqueeze(0).to(dtype)


class AppearanceSynthesizer:
    """Reusable synthesis context: caches the exemplar's per-class Grams."""

    def __init__(self, tex: TextureExemplar, cfg: SynthesisConfig,
                 extractor: FeatureExtractor | None = None):
        self.tex = tex
        self.cfg = cfg
        self.extractor = extractor if extractor is not None else build_extractor(cfg.extractor)
        self.dtype = next(self.extractor.parameters()).dtype
        layers = list(cfg.layer_set)
        with torch.no_grad():
            feats = self.extractor(_to_tensor(tex.image, self.dtype), layers)
        self.target_grams: dict[str, list[torch.Tensor | None]] = {}
        self._tex_masks: dict[str, list[torch.Tensor | None]] = {}
        for l in layers:
            F = feats[l][0]
            masks = _class_masks(tex.class_map, F.shape[1:], F.device, F.dtype)
            self._tex_masks[l] = masks
            zero = F.new_zeros((F.shape[0], F.shape[0]))
            self.target_grams[l] = [
                masked_gram(F, m) if m is not None else zero for m in masks
            ]

    def loss_tensor(self, candidate: torch.Tensor, label: LabelImage) -> torch.Tensor:
        """Differentiable loss for a (1, 3, H, W) candidate tensor.

        A class absent from the label image at a layer's resolution is
        skipped for that layer: its Gram cannot be influenced by the
        candidate, so it contributes zero rather than a constant offset.
        """
        feats = self.extractor(candidate, list(self.cfg.layer_set))
        total = candidate.new_zeros(())
        for l in self.cfg.layer_set:
            F = feats[l][0]
            masks = _class_masks(label.labels, F.shape[1:], F.device, F.dtype)
            for c in _CLASSES:
                if masks[c] is None:
                    continue
                G = masked_gram(F, masks[c])
                total = total + ((G - self.target_grams[l][c]) ** 2).sum()
        return total

    def loss_and_grad(self, candidate: np.ndarray, label: LabelImage):
        x = _to_tensor(candidate, self.dtype).requires_grad_(True)
        loss = self.loss_tensor(x, label)
        loss.backward()
        grad = x.grad[0].permute(1, 2, 0).numpy().astype(np.float64)
        return float(loss.item()), grad

    def initial_image(self, label: LabelImage, seed: int | None = None) -> np.ndarray:
        """Class-mean colors of the exemplar + Gaussian noise (sigma 0.05), or pure noise."""
        gen = torch.Generator().manual_seed(self.cfg.seed if seed is None else seed)
        H, W = label.labels.shape
        if self.cfg.init_mode == "noise":
            init = 0.5 + 0.25 * torch.randn((H, W, 3), generator=gen)
            return init.clamp(0.0, 1.0).numpy().astype(np.float32)
        init = np.zeros((H, W, 3), dtype=np.float32)
        for c in _CLASSES:
            sel = self.tex.class_map == c
            mean = self.tex.image[sel].mean(axis=0) if sel.any() else np.full(3, 0.5)
            init[label.labels == c] = mean
        noise = 0.05 * torch.randn((H, W, 3), generator=gen).numpy()
        return np.clip(init + noise, 0.0, 1.0).astype(np.float32)

    def synthesize(self, label: LabelImage, seed: int | None = None,
                   init_image: np.ndarray | None = None) -> "SynthesisResult":
        if init_image is None:
            init_image = self.initial_image(label, seed=seed)
        x = _to_tensor(init_image, self.dtype).clone().requires_grad_(True)
        optimizer = torch.optim.LBFGS(
            [x], max_iter=1, history_size=10, line_search_fn="strong_wolfe"
        )

        def closure():
            optimizer.zero_grad()
            loss = self.loss_tensor(x, label)
            loss.backward()
            return loss

        with torch.no_grad():
            initial = float(self.loss_tensor(x, label).item())
        if not math.isfinite(initial):
            raise SynthesisError(f"non-finite initial loss {initial}")
        history = [initial]
        iterations = 0
        if initial > 0.0:
            prev = initial
            for it in range(1, self.cfg.max_iterations + 1):
                optimizer.step(closure)
                with torch.no_grad():
                    cur = float(self.loss_tensor(x, label).item())
                if not math.isfinite(cur):
                    raise SynthesisError(
                        f"non-finite loss at iteration {it} (history: {history[-3:]})"
                    )
                history.append(cur)
                iterations = it
                if cur == 0.0:
                    break
                if abs(prev - cur) / max(prev, 1e-30) < self.cfg.convergence_tol:
                    break
                prev = cur
        image = x.detach()[0].permute(1, 2, 0).clamp(0.0, 1.0).numpy().astype(np.float32)
        return SynthesisResult(
            image=image,
            initial_loss=initial,
            final_loss=history[-1],
            iterations=iterations,
            loss_history=history,
        )


@dataclass
class SynthesisResult:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    initial_loss: float
    final_loss: float
    iterations: int
    loss_history: list[float] = field(repr=False, default_factory=list)


def synthesis_loss(candidate, label: LabelImage, tex: TextureExemplar,
                   cfg: SynthesisConfig, extractor: FeatureExtractor | None = None):
    """Scalar loss and its gradient w.r.t. the candidate image (H, W, 3)."""
    candidate = np.asarray(candidate)
    if candidate.shape[:2] != label.labels.shape:
        raise ValueError("candidate dimensions must match the label image")
    return AppearanceSynthesizer(tex, cfg, extractor).loss_and_grad(candidate, label)


def synthesize_appearance(label: LabelImage, tex: TextureExemplar, cfg: SynthesisConfig,
                          extractor: FeatureExtractor | None = None,
                          init_image: np.ndarray | None = None,
                          seed: int | None = None) -> SynthesisResult:
    """Optimize an image whose per-class texture statistics match the exemplar.

    Deterministic for fixed (label, tex, cfg, seed). The result records the
    loss trajectory and the number of L-BFGS iterations actually run.
    """
    return AppearanceSynthesizer(tex, cfg, extractor).synthesize(
        label, seed=seed, init_image=init_image
    )


# ---------------------------------------------------------------------------
# Elastic deformation augmentation


@dataclass(frozen=True)
class ElasticDeformConfig:
    grid_spacing: int = 32
    displacement_sigma: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.grid_spacing < 8:
            raise ValueError("grid_spacing must be >= 8 px")
        if self.displacement_sigma < 0:
            raise ValueError("displacement_sigma must be >= 0")


def sample_displacement_grid(shape: tuple[int, int], cfg: ElasticDeformConfig) -> np.ndarray:
    """Coarse (2, ny, nx) displacement grid ~ N(0, sigma^2), deterministic per seed.

    Knots sit every grid_spacing px starting at 0, covering the image; the
    two planes are (dy, dx).
    """
    H, W = shape
    ny = int(np.ceil((H - 1) / cfg.grid_spacing)) + 1
    nx = int(np.ceil((W - 1) / cfg.grid_spacing)) + 1
    rng = np.random.default_rng(cfg.seed)
    return rng.normal(0.0, cfg.displacement_sigma, size=(2, ny, nx)) if cfg.displacement_sigma > 0 \
        else np.zeros((2, ny, nx))


def dense_displacement_field(shape: tuple[int, int], cfg: ElasticDeformConfig) -> np.ndarray:
    """Bicubic interpolation of the coarse grid to a dense (2, H, W) field."""
    H, W = shape
    coarse = sample_displacement_grid(shape, cfg)
    yy, xx = np.meshgrid(
        np.arange(H) / cfg.grid_spacing, np.arange(W) / cfg.grid_spacing, indexing="ij"
    )
    dense = np.empty((2, H, W))
    for k in range(2):
        dense[k] = map_coordinates(coarse[k], [yy, xx], order=3, mode="nearest")
    return dense


def elastic_deform(image, cfg: ElasticDeformConfig):
    """Warp an image with a smooth random displacement field (backward warp,
    bilinear resampling, borders clamped). Zero sigma returns the input
    values unchanged; uint8 in gives uint8 out, float in gives float out.
    """
    arr = np.asarray(image)
    was_uint8 = arr.dtype == np.uint8
    H, W = arr.shape[:2]
    dense = dense_displacement_field((H, W), cfg)
    yy, xx = np.meshgrid(np.arange(H, dtype=float), np.arange(W, dtype=float), indexing="ij")
    coords = [yy + dense[0], xx + dense[1]]
    chans = arr[..., None] if arr.ndim == 2 else arr
    out = np.empty_like(chans, dtype=np.float64)
    for c in range(chans.shape[2]):
        out[..., c] = map_coordinates(
            chans[..., c].astype(np.float64), coords, order=1, mode="nearest"
        )
    if arr.ndim == 2:
        out = out[..., 0]
    if was_uint8:
        return np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return out.astype(arr.dtype)
