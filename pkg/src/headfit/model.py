"""PCA morphable head model: procedural generation, instantiation and file I/O.

Coordinates are millimetres in a right-handed, Y-up frame.  The face of the
procedural head looks towards -z, so an identity camera pose (camera looking
down +z) sees the face.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, ModelFileError

N_LANDMARKS = 24
N_ANCHORS = 6

HEAD_SEMI_AXES = (90.0, 130.0, 110.0)  # width (x), height (y), depth (z)
SIGMA_SCALE = 25.0
SIGMA_DECAY = 0.8
# landmark candidates lie within ~53 degrees of the frontal axis
FRONT_CAP_COS = 0.6

MODEL_MAGIC = b"MMHEAD\x00\x01"
MODEL_FORMAT_VERSION = "1.0.0"


def _frozen(a, dtype):
    a = np.ascontiguousarray(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Topology:
    """Triangle connectivity plus cyclically ordered one-rings.

    ``ring_offsets``/``ring_indices`` form a CSR list: the neighbours of
    vertex ``i`` are ``ring_indices[ring_offsets[i]:ring_offsets[i+1]]`` in
    counter-clockwise order seen from outside.  ``ring_closed[i]`` is False
    for boundary vertices, whose ring is not wrapped around.
    """

    n_vertices: int
    faces: np.ndarray
    ring_offsets: np.ndarray
    ring_indices: np.ndarray
    ring_closed: np.ndarray
    # consecutive ring pairs (center, a, b), sorted by center
    pair_center: np.ndarray = field(repr=False)
    pair_a: np.ndarray = field(repr=False)
    pair_b: np.ndarray = field(repr=False)

    def ring(self, i):
        return self.ring_indices[self.ring_offsets[i]:self.ring_offsets[i + 1]]

    @property
    def edges(self):
        """Unique undirected edges as an (E, 2) array with ``i < j``."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)


def build_topology(faces, n_vertices):
    """Derive one-rings from a consistently wound triangle list."""
    faces = np.asarray(faces, dtype=np.int64)
    if faces.ndim != 2 or faces.shape[1] != 3:
        raise ConfigError("faces must be an (F, 3) index array")
    if faces.size and (faces.min() < 0 or faces.max() >= n_vertices):
        raise ConfigError("face index out of range")
    if np.any((faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2]) | (faces[:, 0] == faces[:, 2])):
        raise ConfigError("face with repeated vertex")

    # for face (v, a, b) the ring of v steps a -> b
    succ = [dict() for _ in range(n_vertices)]
    for f in faces:
        for k in range(3):
            v, a, b = f[k], f[(k + 1) % 3], f[(k + 2) % 3]
            if a in succ[v]:
                raise ConfigError(f"non-manifold or inconsistently wound mesh at vertex {v}")
            succ[v][a] = b

    offsets = [0]
    indices = []
    closed = np.zeros(n_vertices, dtype=bool)
    for v in range(n_vertices):
        nxt = succ[v]
        if not nxt:
            offsets.append(len(indices))
            continue
        targets = set(nxt.values())
        starts = sorted(a for a in nxt if a not in targets)
        if len(starts) > 1:
            raise ConfigError(f"vertex {v} has a non-manifold fan")
        start = starts[0] if starts else min(nxt)
        ring = [start]
        cur = start
        while cur in nxt:
            cur = nxt[cur]
            if cur == start:
                closed[v] = True
                break
            ring.append(cur)
        if len(ring) != len(nxt) + (0 if closed[v] else 1):
            raise ConfigError(f"vertex {v} has a non-manifold fan")
        indices.extend(ring)
        offsets.append(len(indices))

    offsets = np.asarray(offsets, dtype=np.int64)
    indices = np.asarray(indices, dtype=np.int64)
    return _make_topology(faces, n_vertices, offsets, indices, closed)


def _make_topology(faces, n_vertices, offsets, indices, closed):
    centers, pa, pb = [], [], []
    for v in range(n_vertices):
        ring = indices[offsets[v]:offsets[v + 1]]
        m = len(ring)
        if m < 2:
            continue
        n_pairs = m if closed[v] else m - 1
        j = np.arange(n_pairs)
        centers.append(np.full(n_pairs, v))
        pa.append(ring[j])
        pb.append(ring[(j + 1) % m])
    cat = (lambda xs: np.concatenate(xs) if xs else np.zeros(0, dtype=np.int64))
    return Topology(
        n_vertices=int(n_vertices),
        faces=_frozen(faces, np.int64),
        ring_offsets=_frozen(offsets, np.int64),
        ring_indices=_frozen(indices, np.int64),
        ring_closed=_frozen(closed, bool),
        pair_center=_frozen(cat(centers), np.int64),
        pair_a=_frozen(cat(pa), np.int64),
        pair_b=_frozen(cat(pb), np.int64),
    )


@dataclass(frozen=True, eq=False)
class MorphableModel:
    mean_vertices: np.ndarray   # (N_X, 3) mm
    basis: np.ndarray           # (3 N_X, N_y), row 3*i + c is coordinate c of vertex i
    singular_values: np.ndarray  # (N_y,) mm
    topology: Topology
    landmark_indices: np.ndarray  # (24,)
    eval_anchor_indices: np.ndarray  # (6,)
    seed: int = -1
    n_subdiv: int = -1

    def __post_init__(self):
        n = self.mean_vertices.shape[0]
        if self.mean_vertices.shape != (n, 3):
            raise ConfigError("mean_vertices must be (N, 3)")
        if self.basis.ndim != 2 or self.basis.shape[0] != 3 * n:
            raise ConfigError("basis must be (3 N_X, N_y)")
        if self.singular_values.shape != (self.basis.shape[1],):
            raise ConfigError("singular_values length must equal N_y")
        s = self.singular_values
        if np.any(s <= 0) or np.any(np.diff(s) > 0):
            raise ConfigError("singular values must be positive and non-increasing")
        if self.topology.n_vertices != n:
            raise ConfigError("topology vertex count mismatch")
        for name, idx in (("landmark", self.landmark_indices), ("anchor", self.eval_anchor_indices)):
            if np.any(idx < 0) or np.any(idx >= n) or len(np.unique(idx)) != len(idx):
                raise ConfigError(f"{name} indices must be distinct and < N_X")

    @property
    def n_vertices(self):
        return self.mean_vertices.shape[0]

    @property
    def n_components(self):
        return self.basis.shape[1]

    @property
    def basis_per_vertex(self):
        """Basis viewed as (N_X, 3, N_y)."""
        return self.basis.reshape(self.n_vertices, 3, self.n_components)

    def mean_mesh(self):
        return HeadMesh(self.mean_vertices, self.topology)


@dataclass(frozen=True, eq=False)
class HeadMesh:
    vertices: np.ndarray  # (N_X, 3) mm
    topology: Topology

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 3 or v.shape[0] != self.topology.n_vertices:
            raise ConfigError("vertex array does not match topology")
        if not np.all(np.isfinite(v)):
            raise ConfigError("mesh has non-finite coordinates")
        object.__setattr__(self, "vertices", _frozen(v, np.float64))

    @property
    def faces(self):
        return self.topology.faces

    def transformed(self, rotation, translation):
        """Copy with ``x -> R x + t`` applied to every vertex."""
        v = self.vertices @ np.asarray(rotation).T + np.asarray(translation)
        return HeadMesh(v, self.topology)


# ---------------------------------------------------------------------------
# procedural generation

def icosphere(n_subdiv):
    """Unit icosphere with outward counter-clockwise faces.

    Vertex count is ``10 * 4**n + 2``, face count ``20 * 4**n``.
    """
    phi = (1.0 + 5.0 ** 0.5) / 2.0
    verts = [
        (-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
        (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
        (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]

    for _ in range(n_subdiv):
        cache = {}

        def midpoint(i, j):
            key = (i, j) if i < j else (j, i)
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces

    v = np.array(verts)
    f = np.array(faces, dtype=np.int64)
    # orient outward
    cen = v[f].mean(axis=1)
    nrm = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    flip = np.einsum("ij,ij->i", nrm, cen) < 0
    f[flip] = f[flip][:, [0, 2, 1]]
    return v, f


def _averaging_operator(topology):
    n = topology.n_vertices
    e = topology.edges
    rows = np.concatenate([e[:, 0], e[:, 1], np.arange(n)])
    cols = np.concatenate([e[:, 1], e[:, 0], np.arange(n)])
    a = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    deg = np.asarray(a.sum(axis=1)).ravel()
    return sp.diags(1.0 / deg) @ a


def _rigid_fields(points):
    """Orthonormal basis (3N, 6) of infinitesimal rigid motions of ``points``."""
    n = len(points)
    c = points - points.mean(axis=0)
    cols = []
    for k in range(3):
        f = np.zeros((n, 3))
        f[:, k] = 1.0
        cols.append(f.ravel())
    for k in range(3):
        axis = np.zeros(3)
        axis[k] = 1.0
        cols.append(np.cross(axis, c).ravel())
    q, _ = np.linalg.qr(np.stack(cols, axis=1))
    return q


def smoothing_rounds(n_subdiv):
    """Neighbour-averaging rounds giving a fixed angular smoothing length."""
    return max(3, 4 ** n_subdiv // 5)


def _farthest_point_sample(points, candidates, k, start):
    chosen = [start]
    d = np.linalg.norm(points[candidates] - points[start], axis=1)
    for _ in range(k - 1):
        nxt = candidates[int(np.argmax(d))]
        chosen.append(nxt)
        d = np.minimum(d, np.linalg.norm(points[candidates] - points[nxt], axis=1))
    return np.array(chosen, dtype=np.int64)


def generate_procedural_model(n_subdiv=4, n_components=30, seed=0):
    """Build a seeded PCA head model on an ellipsoidal icosphere.

    The deformation basis is made of random per-vertex fields smoothed by
    repeated neighbour averaging, stripped of rigid motions and
    orthonormalised.  Singular values decay as ``25 * k**-0.8`` mm.
    """
    if not isinstance(n_subdiv, (int, np.integer)) or n_subdiv < 2:
        raise ConfigError("n_subdiv must be an integer >= 2")
    if not isinstance(n_components, (int, np.integer)) or n_components < 1:
        raise ConfigError("n_components must be an integer >= 1")
    unit, faces = icosphere(int(n_subdiv))
    n = len(unit)
    if n_components > 3 * n - 6:
        raise ConfigError("n_components exceeds the available deformation dimensions")

    mean = unit * np.array(HEAD_SEMI_AXES)
    topo = build_topology(faces, n)

    rng = np.random.default_rng(seed)
    fields = rng.standard_normal((n, 3 * n_components))
    avg = _averaging_operator(topo)
    for _ in range(smoothing_rounds(n_subdiv)):
        fields = avg @ fields
    # (n, 3*Ny) -> (3n, Ny) with row 3*i + c
    fields = fields.reshape(n, 3, n_components).reshape(3 * n, n_components)
    rigid = _rigid_fields(mean)
    fields = fields - rigid @ (rigid.T @ fields)
    q, r = np.linalg.qr(fields)
    q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
    # second pass removes residual rounding in the Gram matrix
    q, r = np.linalg.qr(q)
    q = q * np.where(np.diag(r) < 0, -1.0, 1.0)

    k = np.arange(1, n_components + 1, dtype=np.float64)
    sigma = SIGMA_SCALE * k ** (-SIGMA_DECAY)

    front = np.flatnonzero(-unit[:, 2] >= FRONT_CAP_COS)
    tip = int(np.argmin(mean[:, 2]))
    landmarks = _farthest_point_sample(mean, front, N_LANDMARKS, tip)
    anchors = landmarks[:N_ANCHORS].copy()

    return MorphableModel(
        mean_vertices=_frozen(mean, np.float64),
        basis=_frozen(q, np.float64),
        singular_values=_frozen(sigma, np.float64),
        topology=topo,
        landmark_indices=_frozen(landmarks, np.int64),
        eval_anchor_indices=_frozen(anchors, np.int64),
        seed=int(seed),
        n_subdiv=int(n_subdiv),
    )


# ---------------------------------------------------------------------------
# instantiation

def check_shape_params(model, y):
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (model.n_components,):
        raise ConfigError(f"expected {model.n_components} shape parameters, got shape {y.shape}")
    if not np.all(np.isfinite(y)):
        raise ConfigError("shape parameters must be finite")
    return y


def instantiate(model, y):
    """Mesh for shape vector ``y``: ``mean + basis @ y``."""
    y = check_shape_params(model, y)
    v = model.mean_vertices + (model.basis @ y).reshape(-1, 3)
    return HeadMesh(v, model.topology)


def sample_shape(model, rng, scale=1.0):
    """Draw ``y_k ~ N(0, (scale * sigma_k)^2)``."""
    return rng.standard_normal(model.n_components) * model.singular_values * scale


def landmark_points(mesh, model):
    return mesh.vertices[model.landmark_indices]


def anchor_points(mesh, model):
    return mesh.vertices[model.eval_anchor_indices]


# ---------------------------------------------------------------------------
# .mmhead files
#
# layout: magic (8 bytes) | uint32 LE header length | JSON header (UTF-8) |
# f8 mean (N*3) | f8 basis (3N*Ny) | f8 sigma (Ny) | u4 faces (F*3) |
# u4 landmarks (24) | u4 anchors (6) | u4 ring offsets (N+1) |
# u4 ring indices (R) | u1 ring closed flags (N)

def _payload_size(h):
    n, ny, nf, nr = h["n_vertices"], h["n_components"], h["n_faces"], h["n_ring_entries"]
    return (8 * (3 * n + 3 * n * ny + ny)
            + 4 * (3 * nf + h["n_landmarks"] + h["n_anchors"] + n + 1 + nr)
            + n)


def model_to_bytes(model):
    topo = model.topology
    header = {
        "format": "mmhead",
        "version": MODEL_FORMAT_VERSION,
        "n_vertices": model.n_vertices,
        "n_components": model.n_components,
        "n_faces": int(len(topo.faces)),
        "n_ring_entries": int(len(topo.ring_indices)),
        "n_landmarks": int(len(model.landmark_indices)),
        "n_anchors": int(len(model.eval_anchor_indices)),
        "seed": model.seed,
        "n_subdiv": model.n_subdiv,
        "units": "mm",
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [
        MODEL_MAGIC,
        struct.pack("<I", len(hb)),
        hb,
        model.mean_vertices.astype("<f8").tobytes(),
        model.basis.astype("<f8").tobytes(),
        model.singular_values.astype("<f8").tobytes(),
        topo.faces.astype("<u4").tobytes(),
        model.landmark_indices.astype("<u4").tobytes(),
        model.eval_anchor_indices.astype("<u4").tobytes(),
        topo.ring_offsets.astype("<u4").tobytes(),
        topo.ring_indices.astype("<u4").tobytes(),
        topo.ring_closed.astype("u1").tobytes(),
    ]
    return b"".join(parts)


def model_from_bytes(data):
    if len(data) < len(MODEL_MAGIC) + 4 or data[:len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise ModelFileError("corrupt model file: bad magic number")
    pos = len(MODEL_MAGIC)
    (hlen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if pos + hlen > len(data):
        raise ModelFileError("corrupt model file: truncated header")
    try:
        h = json.loads(data[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFileError(f"corrupt model file: unreadable header ({exc})") from None
    pos += hlen
    keys = ("n_vertices", "n_components", "n_faces", "n_ring_entries", "n_landmarks", "n_anchors")
    if h.get("format") != "mmhead" or not all(isinstance(h.get(k), int) and h[k] >= 0 for k in keys):
        raise ModelFileError("corrupt model file: malformed header")
    if h["version"].split(".")[0] != MODEL_FORMAT_VERSION.split(".")[0]:
        raise ModelFileError(f"unsupported model file version {h['version']}")
    expected = _payload_size(h)
    actual = len(data) - pos
    if actual < expected:
        raise ModelFileError(
            f"corrupt model file: truncated payload ({actual} bytes, header implies {expected})")
    if actual > expected:
        raise ModelFileError(
            f"corrupt model file: header dimensions inconsistent with payload "
            f"({actual} bytes, header implies {expected})")

    def take(dtype, count):
        nonlocal pos
        a = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
        pos += a.nbytes
        return a

    n, ny = h["n_vertices"], h["n_components"]
    mean = take("<f8", 3 * n).reshape(n, 3)
    basis = take("<f8", 3 * n * ny).reshape(3 * n, ny)
    sigma = take("<f8", ny)
    faces = take("<u4", 3 * h["n_faces"]).reshape(-1, 3).astype(np.int64)
    lmk = take("<u4", h["n_landmarks"]).astype(np.int64)
    anc = take("<u4", h["n_anchors"]).astype(np.int64)
    offsets = take("<u4", n + 1).astype(np.int64)
    rings = take("<u4", h["n_ring_entries"]).astype(np.int64)
    closed = take("u1", n).astype(bool)
    if offsets[0] != 0 or offsets[-1] != len(rings) or np.any(np.diff(offsets) < 0):
        raise ModelFileError("corrupt model file: bad ring offsets")
    if (faces.size and faces.max() >= n) or (rings.size and rings.max() >= n):
        raise ModelFileError("corrupt model file: index out of range")
    try:
        topo = _make_topology(faces, n, offsets, rings, closed)
        return MorphableModel(
            mean_vertices=_frozen(mean, np.float64),
            basis=_frozen(basis, np.float64),
            singular_values=_frozen(sigma, np.float64),
            topology=topo,
            landmark_indices=_frozen(lmk, np.int64),
            eval_anchor_indices=_frozen(anc, np.int64),
            seed=int(h.get("seed", -1)),
            n_subdiv=int(h.get("n_subdiv", -1)),
        )
    except ConfigError as exc:
        raise ModelFileError(f"corrupt model file: {exc}") from None


def save_model(model, path):
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model))


def load_model(path):
    with open(path, "rb") as fh:
        data = fh.read()
    return model_from_bytes(data)
