"""Software z-buffer rasterization of class-labeled meshes, plus AR overlays.

A pixel belongs to a triangle when its center (ix + 0.5, iy + 0.5) lies inside
the projected triangle; exact on-edge hits follow the top-left fill rule.
Depth is perspective-correct (1/z interpolated with screen barycentrics) and
compared at pixel centers; depth ties within 1e-9 go to the vessel class so
thin vessels survive coincident geometry.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import BACKGROUND, VESSEL, CameraIntrinsics, Pose, SurfaceMesh

_TIE_EPS = 1e-9
_AREA_EPS = 1e-12
_DEPTH_EPS = 1e-9


@dataclass
class RasterDiagnostics:
    degenerate_faces: int = 0
    clipped_faces: int = 0


@dataclass
class LabelImage:
    """Per-pixel class map: 0 background, 1 parenchyma, 2 vessel."""

    labels: np.ndarray
    diagnostics: RasterDiagnostics | None = field(default=None, compare=False)

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2:
            raise ValueError("labels must be a 2D array")
        if not np.all(np.isin(lab, (0, 1, 2))):
            raise ValueError("labels must take values in {0, 1, 2}")
        self.labels = lab.astype(np.uint8)

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    def class_mask(self, cls: int) -> np.ndarray:
        return self.labels == cls

    def pixel_counts(self) -> dict[int, int]:
        return {c: int((self.labels == c).sum()) for c in (0, 1, 2)}


def rasterize_labels(mesh: SurfaceMesh, intr: CameraIntrinsics, pose: Pose) -> LabelImage:
    """Project the mesh and z-buffer it into a LabelImage.

    Zero-area (degenerate) projected triangles are skipped and counted in the
    attached diagnostics, as are faces clipped for touching the camera plane.
    """
    H, W = intr.height, intr.width
    labels = np.zeros((H, W), dtype=np.uint8)
    zbuf = np.full((H, W), np.inf)
    diag = RasterDiagnostics()

    cam = pose.transform(mesh.vertices)
    z = cam[:, 2]
    ok = z > _DEPTH_EPS
    u = np.where(ok, intr.fx * cam[:, 0] / np.where(ok, z, 1.0) + intr.cx, 0.0)
    v = np.where(ok, intr.fy * cam[:, 1] / np.where(ok, z, 1.0) + intr.cy, 0.0)
    inv_z = np.where(ok, 1.0 / np.where(ok, z, 1.0), 0.0)

    for fi in range(mesh.n_faces):
        ia, ib, ic = mesh.faces[fi]
        if not (ok[ia] and ok[ib] and ok[ic]):
            diag.clipped_faces += 1
            continue
        pa = np.array([u[ia], v[ia]])
        pb = np.array([u[ib], v[ib]])
        pc = np.array([u[ic], v[ic]])
        wa, wb, wc = inv_z[ia], inv_z[ib], inv_z[ic]
        area2 = (pb[0] - pa[0]) * (pc[1] - pa[1]) - (pb[1] - pa[1]) * (pc[0] - pa[0])
        if abs(area2) < _AREA_EPS:
            diag.degenerate_faces += 1
            continue
        if area2 < 0:
            pb, pc = pc, pb
            wb, wc = wc, wb
            area2 = -area2

        x0 = max(int(np.floor(min(pa[0], pb[0], pc[0]) - 0.5)), 0)
        x1 = min(int(np.ceil(max(pa[0], pb[0], pc[0]) - 0.5)), W - 1)
        y0 = max(int(np.floor(min(pa[1], pb[1], pc[1]) - 0.5)), 0)
        y1 = min(int(np.ceil(max(pa[1], pb[1], pc[1]) - 0.5)), H - 1)
        if x1 < x0 or y1 < y0:
            continue

        xs = np.arange(x0, x1 + 1) + 0.5
        ys = np.arange(y0, y1 + 1) + 0.5
        px, py = np.meshgrid(xs, ys)

        inside = np.ones(px.shape, dtype=bool)
        edges = ((pa, pb), (pb, pc), (pc, pa))
        lam = []
        for (sa, sb) in edges:
            ex, ey = sb[0] - sa[0], sb[1] - sa[1]
            E = ex * (py - sa[1]) - ey * (px - sa[0])
            top_left = ey < 0 or (ey == 0 and ex > 0)
            inside &= (E > 0) | ((E == 0) & top_left)
            lam.append(E)
        if not inside.any():
            continue

        # E over edge (a,b) is proportional to the barycentric weight of c.
        lc, la, lb = (e / area2 for e in lam)
        interp_inv_z = la * wa + lb * wb + lc * wc
        with np.errstate(divide="ignore"):
            depth = np.where(interp_inv_z > 0, 1.0 / interp_inv_z, np.inf)

        sub_z = zbuf[y0 : y1 + 1, x0 : x1 + 1]
        sub_l = labels[y0 : y1 + 1, x0 : x1 + 1]
        cls = int(mesh.face_class[fi])
        closer = inside & (depth < sub_z - _TIE_EPS)
        sub_z[closer] = depth[closer]
        sub_l[closer] = cls
        if cls == VESSEL:
            tie = inside & ~closer & (np.abs(depth - sub_z) <= _TIE_EPS)
            if tie.any():
                sub_l[tie] = VESSEL
                sub_z[tie] = np.minimum(sub_z[tie], depth[tie])

    return LabelImage(labels, diagnostics=diag)


def render_overlay(image, mesh: SurfaceMesh, intr: CameraIntrinsics, pose: Pose,
                   color, opacity: float, classes=(1, 2)) -> np.ndarray:
    """Composite the mesh silhouette over an RGB image (uint8 in, uint8 out).

    Pixels covered by the selected classes blend linearly toward `color`;
    opacity 0 returns a bitwise copy of the input.
    """
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("image must be (H, W, 3) RGB")
    if img.shape[0] != intr.height or img.shape[1] != intr.width:
        raise ValueError(
            f"image size {img.shape[1]}x{img.shape[0]} does not match "
            f"intrinsics {intr.width}x{intr.height}"
        )
    if not 0.0 <= opacity <= 1.0:
        raise ValueError("opacity must be in [0, 1]")
    out = img.copy()
    if opacity == 0.0:
        return out
    label = rasterize_labels(mesh, intr, pose)
    mask = np.isin(label.labels, np.asarray(classes, dtype=np.uint8))
    col = np.asarray(color, dtype=float).reshape(3)
    blended = (1.0 - opacity) * img[mask].astype(float) + opacity * col
    out[mask] = np.clip(np.rint(blended), 0, 255).astype(img.dtype)
    return out


# Fig-style overlay colors: ground truth green, prediction blue.
GT_COLOR = (0, 200, 0)
PRED_COLOR = (40, 90, 255)


def save_label_png(label: LabelImage, path) -> None:
    """8-bit single-channel PNG with raw values {0, 1, 2}."""
    Image.fromarray(label.labels, mode="L").save(Path(path), format="PNG")


def load_label_png(path) -> LabelImage:
    arr = np.asarray(Image.open(Path(path)).convert("L"))
    return LabelImage(arr)


def save_rgb_png(image, path) -> None:
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(Path(path), format="PNG")


def load_rgb_png(path) -> np.ndarray:
    return np.asarray(Image.open(Path(path)).convert("RGB"))
