"""Procedural test scene: a dome of exposed surface with raised vessel tubes.

`make_synthetic_case` assembles everything the pipeline needs at desk scale:
a 35 mm-diameter spherical-cap mesh (parenchyma) carrying a few vessel tubes
swept along great-circle paths, camera intrinsics, procedural texture
exemplars and a hemisphere pose-sampling config sized so the whole mesh stays
in frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import (
    PARENCHYMA,
    VESSEL,
    CameraIntrinsics,
    PoseSamplingConfig,
    SurfaceMesh,
)
from .meshio import save_mesh_ply
from .synthesis import TextureExemplar
from .textures import make_procedural_textures, save_texture, write_texture_manifest


def make_dome_mesh(
    diameter_mm: float = 35.0,
    n_vessels: int = 4,
    seed: int = 0,
    cap_angle: float = math.radians(60.0),
    rings: int = 24,
    sectors: int = 48,
    tube_radius_mm: float = 1.1,
    tube_sides: int = 8,
) -> SurfaceMesh:
    """Spherical-cap dome (class parenchyma) with raised vessel tubes.

    The cap's rim diameter equals diameter_mm; vessels follow great-circle
    arcs on the cap, offset outward so they stand proud of the surface.
    """
    rng = np.random.default_rng(seed)
    rho = (diameter_mm / 2.0) / math.sin(cap_angle)

    vertices: list[np.ndarray] = []
    faces: list[tuple[int, int, int]] = []
    face_class: list[int] = []

    def sphere_point(theta, phi):
        return rho * np.array(
            [math.sin(theta) * math.cos(phi), math.sin(theta) * math.sin(phi), math.cos(theta)]
        )

    # Dome: apex fan plus ring strips.
    apex = len(vertices)
    vertices.append(sphere_point(0.0, 0.0))
    ring_start = []
    thetas = np.linspace(0.0, cap_angle, rings + 1)[1:]
    phis = np.linspace(0.0, 2.0 * math.pi, sectors, endpoint=False)
    for theta in thetas:
        ring_start.append(len(vertices))
        for phi in phis:
            vertices.append(sphere_point(theta, phi))
    for s in range(sectors):
        faces.append((apex, ring_start[0] + s, ring_start[0] + (s + 1) % sectors))
        face_class.append(PARENCHYMA)
    for r in range(len(thetas) - 1):
        a, b = ring_start[r], ring_start[r + 1]
        for s in range(sectors):
            s2 = (s + 1) % sectors
            faces.append((a + s, b + s, b + s2))
            faces.append((a + s, b + s2, a + s2))
            face_class.extend((PARENCHYMA, PARENCHYMA))

    # Vessels: great-circle sweeps with circular cross-sections.
    for _ in range(max(n_vessels, 1)):
        th0, th1 = rng.uniform(0.15, 0.85, size=2) * cap_angle
        ph0 = rng.uniform(0.0, 2.0 * math.pi)
        ph1 = ph0 + rng.uniform(0.6 * math.pi, 1.4 * math.pi) * rng.choice([-1.0, 1.0])
        p0, p1 = sphere_point(th0, ph0), sphere_point(th1, ph1)
        u0, u1 = p0 / rho, p1 / rho
        omega = math.acos(float(np.clip(u0 @ u1, -1.0, 1.0)))
        n_seg = max(int(omega / 0.05), 12)
        t = np.linspace(0.0, 1.0, n_seg + 1)
        if omega < 1e-6:
            path_dirs = np.outer(np.ones_like(t), u0)
        else:
            path_dirs = (
                np.outer(np.sin((1 - t) * omega), u0) + np.outer(np.sin(t * omega), u1)
            ) / math.sin(omega)
        centers = rho * path_dirs + 0.6 * tube_radius_mm * path_dirs

        ring_idx: list[int] = []
        prev_ring: list[int] | None = None
        alphas = np.linspace(0.0, 2.0 * math.pi, tube_sides, endpoint=False)
        for k in range(len(centers)):
            normal = path_dirs[k]
            if k < len(centers) - 1:
                tangent = centers[k + 1] - centers[k]
            else:
                tangent = centers[k] - centers[k - 1]
            tangent = tangent / max(np.linalg.norm(tangent), 1e-12)
            side = np.cross(tangent, normal)
            side /= max(np.linalg.norm(side), 1e-12)
            up = np.cross(side, tangent)
            ring = []
            for a in alphas:
                ring.append(len(vertices))
                vertices.append(
                    centers[k] + tube_radius_mm * (math.cos(a) * side + math.sin(a) * up)
                )
            if prev_ring is not None:
                for s in range(tube_sides):
                    s2 = (s + 1) % tube_sides
                    faces.append((prev_ring[s], ring[s], ring[s2]))
                    faces.append((prev_ring[s], ring[s2], prev_ring[s2]))
                    face_class.extend((VESSEL, VESSEL))
            prev_ring = ring
            ring_idx.append(ring[0])
        # End caps close the tube.
        for ring0, flip in ((ring_idx[0], True), (prev_ring[0], False)):
            for s in range(1, tube_sides - 1):
                tri = (ring0, ring0 + s, ring0 + s + 1)
                faces.append(tri[::-1] if flip else tri)
                face_class.append(VESSEL)

    verts = np.asarray(vertices)
    verts = verts - verts.mean(axis=0)
    return SurfaceMesh(verts, np.asarray(faces), np.asarray(face_class))


@dataclass
class SyntheticCase:
    case_id: str
    mesh: SurfaceMesh
    intrinsics: CameraIntrinsics
    textures: list[TextureExemplar]
    pose_cfg: PoseSamplingConfig


def make_synthetic_case(
    case_id: str = "dome",
    image_size: int = 128,
    n_textures: int = 12,
    n_poses: int = 100,
    n_vessels: int = 4,
    seed: int = 0,
) -> SyntheticCase:
    """Desk-scale analogue of a clinical case, fully procedural."""
    mesh = make_dome_mesh(n_vessels=n_vessels, seed=seed)
    intr = CameraIntrinsics.default(image_size, image_size)
    textures = make_procedural_textures(n_textures, seed=seed, size=image_size)
    pose_cfg = PoseSamplingConfig(
        n_poses=n_poses,
        radius_range=(70.0, 100.0),
        elevation_range=(0.55, 1.25),
        roll_range=(-0.3, 0.3),
        lookat_jitter=2.0,
        seed=seed + 1,
    )
    return SyntheticCase(case_id, mesh, intr, textures, pose_cfg)


def write_synthetic_case(directory, case: SyntheticCase) -> tuple[Path, Path]:
    """Write mesh.ply and the texture exemplars; returns (mesh_path, textures_dir)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    mesh_path = directory / "mesh.ply"
    save_mesh_ply(case.mesh, mesh_path)
    tex_dir = directory / "textures"
    for tex in case.textures:
        save_texture(tex, tex_dir)
    write_texture_manifest(
        tex_dir, [(t.id, "procedural", "synthetic") for t in case.textures]
    )
    return mesh_path, tex_dir
