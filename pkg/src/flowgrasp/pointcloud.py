"""Procedural object surfaces, partial-view simulation and BPS encoding.

Objects are desk-scale analytic shapes (meters). A partial view keeps the
camera-facing hemisphere of surface points, which creates the seen/unseen
asymmetry the introspection analyses rely on. Point clouds are encoded
against a frozen basis point set: feature i is the distance from basis
point i to its nearest cloud point.
"""

import dataclasses
import struct
import zlib
from typing import Optional, Tuple

import numpy as np

from .errors import ContractError, DataError, SerializationError

FAMILIES = ("box", "cylinder", "sphere", "capsule", "lshape")

# sizes per family:
#   sphere   (radius,)
#   box      (sx, sy, sz)
#   cylinder (radius, height)
#   capsule  (radius, cylinder_height)
#   lshape   (sx, sy, sz, tx, tz)  two boxes sharing a corner, L in the xz plane
_N_SIZES = {"sphere": 1, "box": 3, "cylinder": 2, "capsule": 2, "lshape": 5}


@dataclasses.dataclass(frozen=True)
class ShapeSpec:
    family: str
    sizes: Tuple[float, ...]
    rotation: Optional[np.ndarray] = None  # 3x3, local -> world
    translation: Optional[np.ndarray] = None
    n_points: int = 2048

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ContractError(f"unsupported shape family {self.family!r}")
        if len(self.sizes) != _N_SIZES[self.family]:
            raise ContractError(
                f"{self.family} expects {_N_SIZES[self.family]} sizes, got {len(self.sizes)}")
        if any(s <= 0 for s in self.sizes):
            raise ContractError("shape sizes must be positive")
        if self.n_points < 256:
            raise ContractError("n_points must be >= 256")

    def pose(self):
        R = np.eye(3) if self.rotation is None else np.asarray(self.rotation, dtype=np.float64)
        t = np.zeros(3) if self.translation is None else np.asarray(self.translation, dtype=np.float64)
        return R, t


@dataclasses.dataclass
class PointCloud:
    points: np.ndarray                     # (N, 3) float64
    normals: Optional[np.ndarray] = None   # (N, 3) unit vectors

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3 or self.points.shape[0] < 1:
            raise ContractError("points must be a non-empty (N, 3) array")
        if not np.isfinite(self.points).all():
            raise ContractError("points contain non-finite values")
        if self.normals is not None:
            self.normals = np.ascontiguousarray(self.normals, dtype=np.float64)
            if self.normals.shape != self.points.shape:
                raise ContractError("normals must match points shape")
            norms = np.linalg.norm(self.normals, axis=1)
            if not np.allclose(norms, 1.0, atol=1e-6):
                raise ContractError("normals must have unit length")

    def __len__(self):
        return self.points.shape[0]


# --------------------------------------------------------------------------
# signed distance functions (local frame), shared with the grasp label oracle


def _sdf_box(p, half):
    q = np.abs(p) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(np.max(q, axis=-1), 0.0)
    return outside + inside


def _sdf_local(family, sizes, p):
    p = np.atleast_2d(p)
    if family == "sphere":
        return np.linalg.norm(p, axis=-1) - sizes[0]
    if family == "box":
        return _sdf_box(p, np.asarray(sizes) / 2.0)
    if family == "cylinder":
        r, h = sizes
        dr = np.linalg.norm(p[:, :2], axis=-1) - r
        dz = np.abs(p[:, 2]) - h / 2.0
        d = np.stack([dr, dz], axis=-1)
        return (np.minimum(np.max(d, axis=-1), 0.0)
                + np.linalg.norm(np.maximum(d, 0.0), axis=-1))
    if family == "capsule":
        r, h = sizes
        q = p.copy()
        q[:, 2] = q[:, 2] - np.clip(q[:, 2], -h / 2.0, h / 2.0)
        return np.linalg.norm(q, axis=-1) - r
    if family == "lshape":
        b1_half, b1_c, b2_half, b2_c = _lshape_boxes(sizes)
        return np.minimum(_sdf_box(p - b1_c, b1_half), _sdf_box(p - b2_c, b2_half))
    raise ContractError(f"unsupported shape family {family!r}")


def _lshape_boxes(sizes):
    # two axis-aligned boxes sharing the corner at the AABB origin,
    # re-centered so the union's bounding box is centered at 0
    sx, sy, sz, tx, tz = sizes
    center = np.array([max(sx, tx) / 2.0, sy / 2.0, max(sz, tz) / 2.0])
    b1_half = np.array([sx, sy, tz]) / 2.0
    b1_c = b1_half - center
    b2_half = np.array([tx, sy, sz]) / 2.0
    b2_c = b2_half - center
    return b1_half, b1_c, b2_half, b2_c


def shape_sdf(spec: ShapeSpec, points: np.ndarray) -> np.ndarray:
    """Signed distance from world-frame points to the shape surface."""
    R, t = spec.pose()
    local = (np.atleast_2d(points) - t) @ R
    return _sdf_local(spec.family, spec.sizes, local)


def shape_surface_normal(spec: ShapeSpec, points: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Outward normal at (or near) the surface, via the SDF gradient."""
    p = np.atleast_2d(points)
    grad = np.zeros_like(p)
    for k in range(3):
        dp = np.zeros(3)
        dp[k] = h
        grad[:, k] = (shape_sdf(spec, p + dp) - shape_sdf(spec, p - dp)) / (2 * h)
    n = np.linalg.norm(grad, axis=-1, keepdims=True)
    return grad / np.maximum(n, 1e-12)


# --------------------------------------------------------------------------
# surface sampling


def _uniform_sphere_dirs(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _sample_box(rng, sizes, n):
    sx, sy, sz = sizes
    areas = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy])
    half = np.array(sizes) / 2.0
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-1, 1, size=(n, 3)) * half
    pts = u.copy()
    normals = np.zeros((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    pts[np.arange(n), axis] = sign * half[axis]
    normals[np.arange(n), axis] = sign
    return pts, normals


def _sample_cylinder(rng, sizes, n, caps=True):
    r, h = sizes
    a_side = 2 * np.pi * r * h
    a_cap = np.pi * r * r
    areas = np.array([a_side, a_cap, a_cap]) if caps else np.array([a_side])
    part = rng.choice(len(areas), size=n, p=areas / areas.sum())
    theta = rng.uniform(0, 2 * np.pi, size=n)
    pts = np.zeros((n, 3))
    normals = np.zeros((n, 3))
    side = part == 0
    pts[side, 0] = r * np.cos(theta[side])
    pts[side, 1] = r * np.sin(theta[side])
    pts[side, 2] = rng.uniform(-h / 2, h / 2, size=side.sum())
    normals[side, 0] = np.cos(theta[side])
    normals[side, 1] = np.sin(theta[side])
    if caps:
        for part_id, zsign in ((1, 1.0), (2, -1.0)):
            m = part == part_id
            rr = r * np.sqrt(rng.uniform(0, 1, size=m.sum()))
            pts[m, 0] = rr * np.cos(theta[m])
            pts[m, 1] = rr * np.sin(theta[m])
            pts[m, 2] = zsign * h / 2
            normals[m, 2] = zsign
    return pts, normals


def _sample_capsule(rng, sizes, n):
    r, h = sizes
    a_side = 2 * np.pi * r * h
    a_sphere = 4 * np.pi * r * r
    n_sphere = int(round(n * a_sphere / (a_side + a_sphere)))
    pts_c, nrm_c = _sample_cylinder(rng, (r, h), n - n_sphere, caps=False)
    dirs = _uniform_sphere_dirs(rng, n_sphere)
    offset = np.where(dirs[:, 2:3] >= 0, h / 2.0, -h / 2.0)
    pts_s = dirs * r
    pts_s[:, 2] += offset[:, 0]
    pts = np.concatenate([pts_c, pts_s])
    normals = np.concatenate([nrm_c, dirs])
    perm = rng.permutation(n)
    return pts[perm], normals[perm]


def _sample_lshape(rng, sizes, n):
    b1_half, b1_c, b2_half, b2_c = _lshape_boxes(sizes)
    a1 = 8 * (b1_half[0] * b1_half[1] + b1_half[1] * b1_half[2] + b1_half[0] * b1_half[2])
    a2 = 8 * (b2_half[0] * b2_half[1] + b2_half[1] * b2_half[2] + b2_half[0] * b2_half[2])
    pts_list, nrm_list = [], []
    need = n
    while need > 0:
        batch = max(2 * need, 256)
        which = rng.choice(2, size=batch, p=np.array([a1, a2]) / (a1 + a2))
        p1, n1 = _sample_box(rng, tuple(2 * b1_half), batch)
        p2, n2 = _sample_box(rng, tuple(2 * b2_half), batch)
        pts = np.where(which[:, None] == 0, p1 + b1_c, p2 + b2_c)
        nrm = np.where(which[:, None] == 0, n1, n2)
        # drop points strictly inside the other box of the union
        other_sdf = np.where(
            which == 0,
            _sdf_box(pts - b2_c, b2_half),
            _sdf_box(pts - b1_c, b1_half),
        )
        keep = other_sdf > 1e-12
        pts_list.append(pts[keep])
        nrm_list.append(nrm[keep])
        need = n - sum(len(p) for p in pts_list)
    pts = np.concatenate(pts_list)[:n]
    normals = np.concatenate(nrm_list)[:n]
    return pts, normals


def sample_shape(spec: ShapeSpec, seed: int) -> PointCloud:
    """Uniform surface samples with outward normals, deterministic per seed."""
    rng = np.random.default_rng(seed)
    n = spec.n_points
    if spec.family == "sphere":
        dirs = _uniform_sphere_dirs(rng, n)
        pts, normals = dirs * spec.sizes[0], dirs
    elif spec.family == "box":
        pts, normals = _sample_box(rng, spec.sizes, n)
    elif spec.family == "cylinder":
        pts, normals = _sample_cylinder(rng, spec.sizes, n)
    elif spec.family == "capsule":
        pts, normals = _sample_capsule(rng, spec.sizes, n)
    elif spec.family == "lshape":
        pts, normals = _sample_lshape(rng, spec.sizes, n)
    else:
        raise ContractError(f"unsupported shape family {spec.family!r}")
    R, t = spec.pose()
    return PointCloud(points=pts @ R.T + t, normals=normals @ R.T)


def partial_view(cloud: PointCloud, view_dir: np.ndarray) -> PointCloud:
    """Keep the points whose surface faces the camera (normal . view_dir < 0)."""
    if cloud.normals is None:
        raise ContractError("partial_view requires normals")
    d = np.asarray(view_dir, dtype=np.float64)
    d = d / np.linalg.norm(d)
    keep = cloud.normals @ d < 0.0
    if not keep.any():
        raise DataError("degenerate view: no camera-facing points")
    return PointCloud(points=cloud.points[keep], normals=cloud.normals[keep])


# --------------------------------------------------------------------------
# basis point set


@dataclasses.dataclass(frozen=True)
class BpsBasis:
    points: np.ndarray   # (s, 3), all within radius of the origin
    radius: float
    seed: int

    @property
    def size(self) -> int:
        return self.points.shape[0]


def make_basis(s: int, radius: float, seed: int) -> BpsBasis:
    """s points uniform in the ball of the given radius, frozen per seed."""
    if s < 8:
        raise ContractError("basis size must be >= 8")
    if radius <= 0:
        raise ContractError("radius must be > 0")
    rng = np.random.default_rng(seed)
    dirs = _uniform_sphere_dirs(rng, s)
    radii = radius * rng.uniform(0, 1, size=s) ** (1.0 / 3.0)
    return BpsBasis(points=dirs * radii[:, None], radius=float(radius), seed=int(seed))


def bps_encode(cloud: PointCloud, basis: BpsBasis) -> np.ndarray:
    """Per basis point, the distance to the nearest cloud point.

    Permutation-invariant in the cloud order and 1-Lipschitz per entry
    under single-point perturbations.
    """
    diff = basis.points[:, None, :] - cloud.points[None, :, :]
    return np.sqrt((diff ** 2).sum(-1)).min(axis=1)


def canonicalize(cloud: PointCloud, fit_radius: float = 0.12):
    """Center the cloud on its centroid and scale it into the basis ball.

    Returns (canonical cloud, center, scale). Grasp translations must be
    mapped through the same transform: t' = (t - center) * scale.
    """
    center = cloud.points.mean(axis=0)
    max_norm = np.linalg.norm(cloud.points - center, axis=1).max()
    scale = fit_radius / max(max_norm, 1e-9)
    return (
        PointCloud(points=(cloud.points - center) * scale, normals=cloud.normals),
        center,
        float(scale),
    )


# --------------------------------------------------------------------------
# binary formats (layout documented in docs/formats.md)

_CLOUD_MAGIC = b"FGCLOUD1"
_BASIS_MAGIC = b"FGBASIS1"


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise SerializationError(f"truncated file while reading {what}")
    return buf


def save_cloud(cloud: PointCloud, path) -> None:
    with open(path, "wb") as f:
        f.write(_CLOUD_MAGIC)
        f.write(struct.pack("<QB", len(cloud), 1 if cloud.normals is not None else 0))
        f.write(cloud.points.tobytes())
        if cloud.normals is not None:
            f.write(cloud.normals.tobytes())


def load_cloud(path) -> PointCloud:
    with open(path, "rb") as f:
        if _read_exact(f, 8, "magic") != _CLOUD_MAGIC:
            raise SerializationError("not a point cloud file (bad magic)")
        n, has_normals = struct.unpack("<QB", _read_exact(f, 9, "header"))
        pts = np.frombuffer(_read_exact(f, n * 24, "points"), dtype="<f8").reshape(n, 3)
        normals = None
        if has_normals:
            normals = np.frombuffer(_read_exact(f, n * 24, "normals"), dtype="<f8").reshape(n, 3)
        if f.read(1):
            raise SerializationError("trailing bytes after point cloud data")
    return PointCloud(points=pts.copy(), normals=None if normals is None else normals.copy())


def save_basis(basis: BpsBasis, path) -> None:
    with open(path, "wb") as f:
        f.write(_BASIS_MAGIC)
        f.write(struct.pack("<QdQ", basis.size, basis.radius, basis.seed))
        f.write(np.ascontiguousarray(basis.points).tobytes())


def load_basis(path) -> BpsBasis:
    with open(path, "rb") as f:
        if _read_exact(f, 8, "magic") != _BASIS_MAGIC:
            raise SerializationError("not a basis file (bad magic)")
        s, radius, seed = struct.unpack("<QdQ", _read_exact(f, 24, "header"))
        pts = np.frombuffer(_read_exact(f, s * 24, "basis points"), dtype="<f8").reshape(s, 3)
        if f.read(1):
            raise SerializationError("trailing bytes after basis data")
    return BpsBasis(points=pts.copy(), radius=radius, seed=seed)


def basis_to_bytes(basis: BpsBasis) -> bytes:
    pts = np.ascontiguousarray(basis.points).tobytes()
    return struct.pack("<QdQ", basis.size, basis.radius, basis.seed) + pts


def basis_from_bytes(buf: bytes) -> BpsBasis:
    if len(buf) < 24:
        raise SerializationError("basis block too short")
    s, radius, seed = struct.unpack("<QdQ", buf[:24])
    if len(buf) != 24 + s * 24:
        raise SerializationError("basis block length mismatch")
    pts = np.frombuffer(buf[24:], dtype="<f8").reshape(s, 3)
    return BpsBasis(points=pts.copy(), radius=radius, seed=seed)


def cloud_checksum(cloud: PointCloud) -> int:
    h = zlib.crc32(cloud.points.tobytes())
    if cloud.normals is not None:
        h = zlib.crc32(cloud.normals.tobytes(), h)
    return h
