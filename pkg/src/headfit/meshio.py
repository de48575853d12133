"""OBJ and binary PLY mesh files."""

import os

import numpy as np

from .errors import HeadfitError
from .geometry import vertex_normals
from .model import HeadMesh, build_topology


class MeshFileError(HeadfitError):
    pass


def write_obj(path, mesh, normals=None):
    """Vertices, per-vertex normals and faces; 1-based ``f v//vn`` records."""
    if normals is None:
        normals = vertex_normals(mesh)
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    lines += [f"vn {x:.17g} {y:.17g} {z:.17g}" for x, y, z in normals]
    lines += [f"f {a}//{a} {b}//{b} {c}//{c}" for a, b, c in mesh.faces + 1]
    with open(path, "w") as fh:
        fh.write("# headfit mesh\n")
        fh.write("\n".join(lines))
        fh.write("\n")


def read_obj(path):
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(p) for p in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                # fan-triangulate polygons
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
    if not verts or not faces:
        raise MeshFileError(f"{path}: no vertices or faces")
    v = np.array(verts, dtype=np.float64)
    return HeadMesh(v, build_topology(np.array(faces, dtype=np.int64), len(v)))


def write_ply(path, mesh, normals=None):
    """Binary little-endian PLY with float64 positions, float32 normals, uint32 faces."""
    if normals is None:
        normals = vertex_normals(mesh)
    n, f = len(mesh.vertices), len(mesh.faces)
    header = (
        "ply\nformat binary_little_endian 1.0\ncomment headfit mesh\n"
        f"element vertex {n}\n"
        "property double x\nproperty double y\nproperty double z\n"
        "property float nx\nproperty float ny\nproperty float nz\n"
        f"element face {f}\n"
        "property list uchar uint vertex_indices\nend_header\n"
    )
    vdt = np.dtype([("p", "<f8", 3), ("n", "<f4", 3)])
    vbuf = np.empty(n, dtype=vdt)
    vbuf["p"] = mesh.vertices
    vbuf["n"] = normals
    fdt = np.dtype([("k", "u1"), ("i", "<u4", 3)])
    fbuf = np.empty(f, dtype=fdt)
    fbuf["k"] = 3
    fbuf["i"] = mesh.faces
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(vbuf.tobytes())
        fh.write(fbuf.tobytes())


_PLY_TYPES = {"char": "i1", "uchar": "u1", "short": "<i2", "ushort": "<u2", "int": "<i4",
              "uint": "<u4", "float": "<f4", "double": "<f8", "int8": "i1", "uint8": "u1",
              "int32": "<i4", "uint32": "<u4", "float32": "<f4", "float64": "<f8"}


def read_ply(path):
    """Reads binary little-endian PLY files with triangle faces."""
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise MeshFileError(f"{path}: not a PLY file")
    header = data[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise MeshFileError(f"{path}: only binary little-endian PLY is supported")
    elements = []
    for line in header:
        p = line.split()
        if p[0] == "element":
            elements.append([p[1], int(p[2]), []])
        elif p[0] == "property":
            elements[-1][2].append(p[1:])
    pos = end + len(b"end_header\n")
    verts = faces = None
    for name, count, props in elements:
        if name == "vertex":
            dt = np.dtype([(p[1], _PLY_TYPES[p[0]]) for p in props])
            arr = np.frombuffer(data, dtype=dt, count=count, offset=pos)
            pos += arr.nbytes
            verts = np.stack([arr["x"], arr["y"], arr["z"]], axis=1).astype(np.float64)
        elif name == "face":
            _, ct, it, _ = props[0]
            dt = np.dtype([("k", _PLY_TYPES[ct]), ("i", _PLY_TYPES[it], 3)])
            arr = np.frombuffer(data, dtype=dt, count=count, offset=pos)
            if np.any(arr["k"] != 3):
                raise MeshFileError(f"{path}: only triangle faces are supported")
            pos += arr.nbytes
            faces = arr["i"].astype(np.int64)
        else:
            raise MeshFileError(f"{path}: unsupported element {name}")
    if verts is None or faces is None:
        raise MeshFileError(f"{path}: missing vertex or face element")
    return HeadMesh(verts, build_topology(faces, len(verts)))


def write_mesh(path, mesh):
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".obj":
        write_obj(path, mesh)
    elif ext == ".ply":
        write_ply(path, mesh)
    else:
        raise MeshFileError(f"unknown mesh extension {ext!r} (use .obj or .ply)")


def read_mesh(path):
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".obj":
        return read_obj(path)
    if ext == ".ply":
        return read_ply(path)
    raise MeshFileError(f"unknown mesh extension {ext!r} (use .obj or .ply)")
