"""Mesh file I/O: ASCII PLY (with a per-face integer `class` property) and OBJ.

PLY is the native format: faces carry `property int class` with 1 = parenchyma
and 2 = vessel. OBJ input encodes the class through `usemtl parenchyma` /
`usemtl vessel` statements applying to the faces that follow.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .geometry import PARENCHYMA, VESSEL, SurfaceMesh

_OBJ_MATERIALS = {"parenchyma": PARENCHYMA, "vessel": VESSEL}
_CLASS_NAMES = {PARENCHYMA: "parenchyma", VESSEL: "vessel"}


def save_mesh_ply(mesh: SurfaceMesh, path) -> None:
    """Write an ASCII PLY with full double-precision vertex coordinates."""
    path = Path(path)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {mesh.n_vertices}",
        "property double x",
        "property double y",
        "property double z",
        f"element face {mesh.n_faces}",
        "property list uchar int vertex_indices",
        "property int class",
        "end_header",
    ]
    for v in mesh.vertices:
        lines.append(f"{v[0]!r} {v[1]!r} {v[2]!r}")
    for f, c in zip(mesh.faces, mesh.face_class):
        lines.append(f"3 {f[0]} {f[1]} {f[2]} {c}")
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, path)


def load_mesh_ply(path) -> SurfaceMesh:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file")
    n_vertex = n_face = 0
    vertex_props: list[str] = []
    face_props: list[str] = []
    elements: list[tuple[str, int]] = []
    i = 1
    fmt_seen = False
    while i < len(lines):
        tok = lines[i].split()
        i += 1
        if not tok or tok[0] == "comment":
            continue
        if tok[0] == "format":
            if tok[1] != "ascii":
                raise ValueError(f"{path}: only ASCII PLY is supported")
            fmt_seen = True
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2])))
            if tok[1] == "vertex":
                n_vertex = int(tok[2])
            elif tok[1] == "face":
                n_face = int(tok[2])
        elif tok[0] == "property":
            if elements and elements[-1][0] == "vertex":
                vertex_props.append(tok[-1])
            elif elements and elements[-1][0] == "face":
                face_props.append(tok[-1])
        elif tok[0] == "end_header":
            break
    else:
        raise ValueError(f"{path}: missing end_header")
    if not fmt_seen:
        raise ValueError(f"{path}: missing format line")
    for need in ("x", "y", "z"):
        if need not in vertex_props:
            raise ValueError(f"{path}: vertex property {need} missing")
    list_prop = next((p for p in face_props if p in ("vertex_indices", "vertex_index")), None)
    if list_prop is None:
        raise ValueError(f"{path}: face vertex index list missing")
    if "class" not in face_props:
        raise ValueError(f"{path}: face property `class` missing")

    ix, iy, iz = (vertex_props.index(k) for k in ("x", "y", "z"))
    vertices = np.empty((n_vertex, 3))
    for row in range(n_vertex):
        vals = lines[i + row].split()
        vertices[row] = (float(vals[ix]), float(vals[iy]), float(vals[iz]))
    i += n_vertex

    # Face rows: the index list first (count then indices), scalar props after,
    # in declared order. Only triangles are accepted.
    scalar_props = [p for p in face_props if p != list_prop]
    class_pos = scalar_props.index("class")
    faces = np.empty((n_face, 3), dtype=np.int64)
    face_class = np.empty(n_face, dtype=np.int64)
    for row in range(n_face):
        vals = lines[i + row].split()
        count = int(vals[0])
        if count != 3:
            raise ValueError(f"{path}: face {row} has {count} vertices; triangles only")
        faces[row] = (int(vals[1]), int(vals[2]), int(vals[3]))
        face_class[row] = int(vals[1 + count + class_pos])
    return SurfaceMesh(vertices, faces, face_class)


def load_mesh_obj(path) -> SurfaceMesh:
    vertices: list[tuple[float, float, float]] = []
    faces: list[tuple[int, int, int]] = []
    face_class: list[int] = []
    current = None
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        tok = raw.split()
        if not tok or tok[0].startswith("#"):
            continue
        if tok[0] == "v":
            vertices.append((float(tok[1]), float(tok[2]), float(tok[3])))
        elif tok[0] == "usemtl":
            name = tok[1].lower()
            if name not in _OBJ_MATERIALS:
                raise ValueError(
                    f"{path}:{lineno}: unknown material {tok[1]!r}; expected parenchyma or vessel"
                )
            current = _OBJ_MATERIALS[name]
        elif tok[0] == "f":
            if len(tok) != 4:
                raise ValueError(f"{path}:{lineno}: triangles only")
            if current is None:
                raise ValueError(f"{path}:{lineno}: face before any usemtl parenchyma/vessel")
            idx = [int(t.split("/")[0]) for t in tok[1:]]
            faces.append(tuple(i - 1 if i > 0 else len(vertices) + i for i in idx))
            face_class.append(current)
    return SurfaceMesh(np.asarray(vertices), np.asarray(faces), np.asarray(face_class))


def save_mesh_obj(mesh: SurfaceMesh, path) -> None:
    path = Path(path)
    out = []
    for v in mesh.vertices:
        out.append(f"v {v[0]!r} {v[1]!r} {v[2]!r}")
    order = np.argsort(mesh.face_class, kind="stable")
    last = None
    for fi in order:
        c = int(mesh.face_class[fi])
        if c != last:
            out.append(f"usemtl {_CLASS_NAMES[c]}")
            last = c
        f = mesh.faces[fi]
        out.append(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}")
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text("\n".join(out) + "\n")
    os.replace(tmp, path)


def load_mesh(path) -> SurfaceMesh:
    """Dispatch on extension: .ply or .obj."""
    suffix = Path(path).suffix.lower()
    if suffix == ".ply":
        return load_mesh_ply(path)
    if suffix == ".obj":
        return load_mesh_obj(path)
    raise ValueError(f"unsupported mesh format {suffix!r} (use .ply or .obj)")
