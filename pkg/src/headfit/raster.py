"""Z-buffered software rendering of normal maps and landmark maps.

Pixel ``(col, row)`` is sampled at its centre ``(col + 0.5, row + 0.5)`` in
the continuous image coordinates used by :func:`headfit.geometry.project`.
Normals stored in a :class:`NormalMap` are world-frame (model-frame) unit
normals, i.e. independent of the camera pose.
"""

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import BehindCameraError, EmptyRenderError, MapFileError
from .geometry import Z_MIN, project, to_camera, vertex_normals
from .model import N_LANDMARKS, landmark_points

OCCLUSION_TOLERANCE = 2.0  # mm
LANDMARK_THRESHOLD = 0.5

NMAP_MAGIC = b"NMAPv001"


@dataclass(frozen=True, eq=False)
class NormalMap:
    normals: np.ndarray  # (H, W, 3), zero where masked out
    mask: np.ndarray     # (H, W) bool
    depth: np.ndarray    # (H, W) camera z in mm, inf where masked out
    frame: str = "world"
    meta: dict = field(default_factory=dict)

    @property
    def height(self):
        return self.mask.shape[0]

    @property
    def width(self):
        return self.mask.shape[1]

    @property
    def coverage(self):
        return float(self.mask.mean())


@dataclass(frozen=True)
class Detection:
    channel: int
    u: float
    v: float
    visible: bool


@dataclass(frozen=True, eq=False)
class LandmarkMap:
    width: int
    height: int
    detections: tuple

    def __post_init__(self):
        object.__setattr__(self, "detections", tuple(sorted(self.detections, key=lambda d: d.channel)))
        channels = [d.channel for d in self.detections]
        if len(set(channels)) != len(channels):
            raise ValueError("at most one detection per channel")
        for d in self.detections:
            if d.visible and not (0 <= d.u < self.width and 0 <= d.v < self.height):
                raise ValueError(f"visible landmark {d.channel} lies outside the image")

    def visible(self):
        return [d for d in self.detections if d.visible]

    def arrays(self):
        """Channels (k,) and pixel positions (k, 2) of visible detections."""
        vis = self.visible()
        ch = np.array([d.channel for d in vis], dtype=np.int64)
        uv = np.array([[d.u, d.v] for d in vis], dtype=np.float64).reshape(-1, 2)
        return ch, uv

    def dense(self, n_channels=N_LANDMARKS):
        """Dense (n_channels, H, W) map with 1.0 at each visible detection's pixel."""
        img = np.zeros((n_channels, self.height, self.width))
        for d in self.visible():
            img[d.channel, int(math.floor(d.v)), int(math.floor(d.u))] = 1.0
        return img

    def shifted(self, du, dv):
        """Copy with every detection moved by (du, dv); ones leaving the image become invisible."""
        out = []
        for d in self.detections:
            u, v = d.u + du, d.v + dv
            vis = d.visible and 0 <= u < self.width and 0 <= v < self.height
            out.append(Detection(d.channel, u, v, vis))
        return LandmarkMap(self.width, self.height, tuple(out))


# ---------------------------------------------------------------------------
# rasterisation

@dataclass(frozen=True, eq=False)
class Fragments:
    """Per-pixel winning face and perspective-correct barycentrics."""

    face: np.ndarray  # (H, W) int, -1 where empty
    bary: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W)


def rasterize(mesh, pose, K, width, height):
    """Z-buffer the front-facing triangles of ``mesh``.

    Ties in depth go to the lowest face index, so the result does not depend
    on evaluation order.
    """
    X = to_camera(mesh.vertices, pose)
    faces = mesh.faces
    z = X[:, 2]
    ok = np.all(z[faces] > Z_MIN, axis=1)
    Xf = X[faces]
    nf = np.cross(Xf[:, 1] - Xf[:, 0], Xf[:, 2] - Xf[:, 0])
    front = np.einsum("ij,ij->i", nf, Xf.mean(axis=1)) < 0
    fid = np.flatnonzero(ok & front)

    face_buf = np.full((height, width), -1, dtype=np.int64)
    bary_buf = np.zeros((height, width, 3))
    depth_buf = np.full((height, width), np.inf)
    if len(fid) == 0:
        return Fragments(face_buf, bary_buf, depth_buf)

    zs = np.where(z > Z_MIN, z, 1.0)
    u = K.f * X[:, 0] / zs + K.u0
    v = K.f * X[:, 1] / zs + K.v0
    tri = faces[fid]
    tu, tv, tz = u[tri], v[tri], z[tri]

    c0 = np.ceil(tu.min(axis=1) - 0.5).clip(0, width - 1).astype(np.int64)
    c1 = np.floor(tu.max(axis=1) - 0.5).clip(-1, width - 1).astype(np.int64)
    r0 = np.ceil(tv.min(axis=1) - 0.5).clip(0, height - 1).astype(np.int64)
    r1 = np.floor(tv.max(axis=1) - 0.5).clip(-1, height - 1).astype(np.int64)
    # faces wholly off-screen get empty boxes
    c1 = np.where(tu.max(axis=1) < 0.5, -1, c1)
    r1 = np.where(tv.max(axis=1) < 0.5, -1, r1)
    nc = np.maximum(c1 - c0 + 1, 0)
    nr = np.maximum(r1 - r0 + 1, 0)
    counts = nc * nr
    total = int(counts.sum())
    if total == 0:
        return Fragments(face_buf, bary_buf, depth_buf)

    owner = np.repeat(np.arange(len(fid)), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    col = c0[owner] + local % nc[owner]
    row = r0[owner] + local // nc[owner]
    pu = col + 0.5
    pv = row + 0.5

    au, av = tu[owner], tv[owner]
    area = ((au[:, 1] - au[:, 0]) * (av[:, 2] - av[:, 0])
            - (au[:, 2] - au[:, 0]) * (av[:, 1] - av[:, 0]))

    def edge(i, j):
        return (au[:, j] - au[:, i]) * (pv - av[:, i]) - (av[:, j] - av[:, i]) * (pu - au[:, i])

    with np.errstate(divide="ignore", invalid="ignore"):
        l0 = edge(1, 2) / area
        l1 = edge(2, 0) / area
        l2 = edge(0, 1) / area
    inside = (area != 0) & (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
    lam = np.stack([l0, l1, l2], axis=1)[inside]
    owner = owner[inside]
    col, row = col[inside], row[inside]
    if len(owner) == 0:
        return Fragments(face_buf, bary_buf, depth_buf)

    w = lam / tz[owner]
    inv_depth = w.sum(axis=1)
    depth = 1.0 / inv_depth
    mu = w / inv_depth[:, None]

    pix = row * width + col
    order = np.lexsort((fid[owner], depth, pix))
    pix_sorted = pix[order]
    first = order[np.r_[True, pix_sorted[1:] != pix_sorted[:-1]]]

    face_buf.ravel()[pix[first]] = fid[owner[first]]
    bary_buf.reshape(-1, 3)[pix[first]] = mu[first]
    depth_buf.ravel()[pix[first]] = depth[first]
    return Fragments(face_buf, bary_buf, depth_buf)


def render_normal_map(mesh, pose, K, width, height, normals=None):
    """Smooth-shaded world-frame normal map of ``mesh`` seen from ``pose``."""
    if normals is None:
        normals = vertex_normals(mesh)
    frags = rasterize(mesh, pose, K, width, height)
    mask = frags.face >= 0
    if not mask.any():
        raise EmptyRenderError("no visible triangles in the image")
    out = np.zeros((height, width, 3))
    tri = mesh.faces[frags.face[mask]]
    n = np.einsum("pk,pkj->pj", frags.bary[mask], normals[tri])
    out[mask] = n / np.linalg.norm(n, axis=1, keepdims=True)
    meta = {
        "pose": {"r": list(pose.r), "t": list(pose.t)},
        "intrinsics": {"f": K.f, "u0": K.u0, "v0": K.v0},
    }
    return NormalMap(out, mask, frags.depth, "world", meta)


def render_landmark_map(mesh, model, pose, K, width, height,
                        depth=None, tolerance=OCCLUSION_TOLERANCE):
    """Project the 24 landmark vertices and flag the unoccluded ones.

    ``depth`` may be a precomputed z-buffer for the same scene.
    """
    if depth is None:
        frags = rasterize(mesh, pose, K, width, height)
        if not np.any(frags.face >= 0):
            raise EmptyRenderError("no visible triangles in the image")
        depth = frags.depth
    pts = landmark_points(mesh, model)
    zc = to_camera(pts, pose)[:, 2]
    dets = []
    for ch, (p, zj) in enumerate(zip(pts, zc)):
        try:
            u, v = project(p, pose, K)
        except BehindCameraError:
            dets.append(Detection(ch, math.nan, math.nan, False))
            continue
        visible = 0 <= u < width and 0 <= v < height
        if visible:
            zb = depth[int(math.floor(v)), int(math.floor(u))]
            visible = bool(zj <= zb + tolerance)
        dets.append(Detection(ch, float(u), float(v), visible))
    return LandmarkMap(width, height, tuple(dets))


def render_views(mesh, model, pose, K, width, height):
    """Normal map and landmark map for one camera, sharing one z-buffer."""
    nmap = render_normal_map(mesh, pose, K, width, height)
    lmk = render_landmark_map(mesh, model, pose, K, width, height, depth=nmap.depth)
    return nmap, lmk


_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


def extract_landmarks(dense, threshold=LANDMARK_THRESHOLD):
    """Sub-pixel detections from a (C, H, W) landmark image.

    Each channel reports the value-weighted centroid of the 8-connected
    component (above ``threshold``) containing its maximum.  Ties between
    maxima resolve to the smallest ``(v, u)``.
    """
    dense = np.asarray(dense, dtype=np.float64)
    nch, h, w = dense.shape
    dets = []
    for ch in range(nch):
        img = dense[ch]
        k = int(np.argmax(img))
        r, c = divmod(k, w)
        if img[r, c] < threshold:
            dets.append(Detection(ch, math.nan, math.nan, False))
            continue
        labels, _ = ndimage.label(img >= threshold, structure=_EIGHT_CONNECTED)
        comp = labels == labels[r, c]
        rows, cols = np.nonzero(comp)
        wts = img[rows, cols]
        u = float(np.sum(wts * (cols + 0.5)) / wts.sum())
        v = float(np.sum(wts * (rows + 0.5)) / wts.sum())
        dets.append(Detection(ch, u, v, True))
    return LandmarkMap(w, h, tuple(dets))


# ---------------------------------------------------------------------------
# files

def normal_map_to_bytes(nmap):
    h, w = nmap.height, nmap.width
    header = {"format": "nmap", "version": "1.0.0", "width": w, "height": h,
              "frame": nmap.frame, "units": "mm", "meta": nmap.meta}
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    planes = [nmap.normals[..., k] for k in range(3)] + [nmap.depth]
    body = b"".join(np.ascontiguousarray(p, dtype="<f4").tobytes() for p in planes)
    return NMAP_MAGIC + struct.pack("<I", len(hb)) + hb + body + nmap.mask.astype("u1").tobytes()


def normal_map_from_bytes(data):
    if data[:len(NMAP_MAGIC)] != NMAP_MAGIC or len(data) < len(NMAP_MAGIC) + 4:
        raise MapFileError("corrupt normal map: bad magic number")
    pos = len(NMAP_MAGIC)
    (hlen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    try:
        h = json.loads(data[pos:pos + hlen].decode("utf-8"))
        w, ht = int(h["width"]), int(h["height"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError):
        raise MapFileError("corrupt normal map: unreadable header") from None
    pos += hlen
    npix = w * ht
    if len(data) - pos != 17 * npix:
        raise MapFileError("corrupt normal map: payload size does not match header")
    planes = np.frombuffer(data, dtype="<f4", count=4 * npix, offset=pos).astype(np.float64)
    planes = planes.reshape(4, ht, w)
    mask = np.frombuffer(data, dtype="u1", count=npix, offset=pos + 16 * npix).reshape(ht, w).astype(bool)
    normals = np.moveaxis(planes[:3], 0, -1).copy()
    # float32 storage is not exactly unit length; restore unit norm
    ln = np.linalg.norm(normals[mask], axis=1, keepdims=True)
    if np.any(ln == 0):
        raise MapFileError("corrupt normal map: zero normal inside mask")
    normals[mask] = normals[mask] / ln
    normals[~mask] = 0.0
    depth = planes[3].copy()
    depth[~mask] = np.inf
    return NormalMap(normals, mask, depth, h.get("frame", "world"), h.get("meta", {}))


def save_normal_map(nmap, path):
    with open(path, "wb") as fh:
        fh.write(normal_map_to_bytes(nmap))


def load_normal_map(path):
    with open(path, "rb") as fh:
        return normal_map_from_bytes(fh.read())


def landmarks_to_json(lmk):
    """JSON list of ``{channel, u, v, visible}``; unprojectable landmarks carry null u/v."""
    items = []
    for d in lmk.detections:
        nan = math.isnan(d.u)
        items.append({"channel": d.channel, "u": None if nan else d.u,
                      "v": None if nan else d.v, "visible": d.visible})
    return json.dumps(items, indent=1)


def landmarks_from_json(text, width, height):
    try:
        doc = json.loads(text)
        if not isinstance(doc, list):
            raise TypeError("expected a JSON list")
        dets = []
        for item in doc:
            u = math.nan if item["u"] is None else float(item["u"])
            v = math.nan if item["v"] is None else float(item["v"])
            dets.append(Detection(int(item["channel"]), u, v, bool(item["visible"])))
        return LandmarkMap(int(width), int(height), tuple(dets))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise MapFileError(f"corrupt landmark file: {exc}") from None


def save_landmarks(lmk, path):
    with open(path, "w") as fh:
        fh.write(landmarks_to_json(lmk))


def load_landmarks(path, width, height):
    with open(path) as fh:
        return landmarks_from_json(fh.read(), width, height)


def normal_map_to_rgb8(nmap):
    """Visualisation only: ``round(255 (n + 1) / 2)`` per channel, black background."""
    img = np.rint(255.0 * (nmap.normals + 1.0) / 2.0).astype(np.uint8)
    img[~nmap.mask] = 0
    return img
