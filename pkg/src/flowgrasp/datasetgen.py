"""Synthetic grasp dataset: procedural objects, partial views, heuristic
grasp proposals and a deterministic geometric feasibility oracle.

The hand is approximated by spheres: a palm plate (five spheres) and five
fingers with three spheres each along a single-link closing arc. A grasp is
labeled by pure geometry against the analytic shape: palm/finger
penetration -> collision; closed fingertips all farther than 1 cm from the
surface -> no_contact; otherwise feasible iff at least two fingertip
contacts have opposing surface normals (antipodal proxy).

Records are stored as JSON lines referencing binary cloud blobs; grasps
are expressed in the canonical (centered, scaled) frame used for BPS
encoding, with the per-view transform kept in the record.
"""

import dataclasses
import hashlib
import json
import pathlib
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractError, DataError, SerializationError
from .grasps import JOINT_MAX, JOINT_MIN, N_JOINTS, GraspConfig, grasp_from_vector
from .pointcloud import (FAMILIES, PointCloud, ShapeSpec, canonicalize,
                         load_cloud, partial_view, sample_shape, save_cloud,
                         shape_sdf, shape_surface_normal)

LABEL_REASONS = ("ok", "collision", "no_contact", "unreachable_closure")


@dataclasses.dataclass(frozen=True)
class GraspLabel:
    feasible: bool
    reason: str

    def __post_init__(self):
        if self.reason not in LABEL_REASONS:
            raise ContractError(f"unknown label reason {self.reason!r}")
        if self.feasible != (self.reason == "ok"):
            raise ContractError("feasible must be equivalent to reason == 'ok'")


# --------------------------------------------------------------------------
# hand proxy (palm frame: +z is the approach direction)

PALM_SPHERE_RADIUS = 0.015
FINGER_SPHERE_RADIUS = 0.008
FINGER_LENGTH = 0.08
CONTACT_TOL = 0.01       # "miss the surface by > 1 cm" -> no contact
TOUCH_TOL = 0.002        # closing stops when the tip is this close
ANTIPODAL_DOT = -0.3
_PALM_OFFSETS = np.array([
    [0.0, 0.0, -0.015],
    [0.02, 0.025, -0.015],
    [0.02, -0.025, -0.015],
    [-0.02, 0.025, -0.015],
    [-0.02, -0.025, -0.015],
])
# four fingers on one side of the palm, thumb opposing; the +-0.045 spread
# lets the fingers straddle desk-scale objects before closing
_FINGER_BASES = np.array([
    [0.045, -0.036, 0.0],
    [0.045, -0.012, 0.0],
    [0.045, 0.012, 0.0],
    [0.045, 0.036, 0.0],
    [-0.045, 0.0, 0.0],
])
_FINGER_INWARD = np.array([
    [-1.0, 0.0, 0.0],
    [-1.0, 0.0, 0.0],
    [-1.0, 0.0, 0.0],
    [-1.0, 0.0, 0.0],
    [1.0, 0.0, 0.0],
])


def finger_angles(joints: np.ndarray) -> np.ndarray:
    """Per-finger closure angle: the mean of that finger's three joints."""
    return np.asarray(joints, dtype=np.float64).reshape(5, 3).mean(axis=1)


def finger_points_local(theta: np.ndarray, fractions=(1 / 3, 2 / 3, 1.0)) -> np.ndarray:
    """Sphere centers along each finger at the given closure angles, palm frame."""
    out = np.zeros((5, len(fractions), 3))
    for f in range(5):
        direction = (np.cos(theta[f]) * np.array([0.0, 0.0, 1.0])
                     + np.sin(theta[f]) * _FINGER_INWARD[f])
        for j, frac in enumerate(fractions):
            out[f, j] = _FINGER_BASES[f] + FINGER_LENGTH * frac * direction
    return out


def hand_proxy_spheres(grasp: GraspConfig) -> Tuple[np.ndarray, np.ndarray]:
    """World-frame (centers, radii) of all proxy spheres at the given joints."""
    R, t = grasp.rotation, grasp.translation
    palm = _PALM_OFFSETS @ R.T + t
    fingers = finger_points_local(finger_angles(grasp.joints)).reshape(-1, 3) @ R.T + t
    centers = np.concatenate([palm, fingers])
    radii = np.concatenate([
        np.full(len(palm), PALM_SPHERE_RADIUS),
        np.full(len(fingers), FINGER_SPHERE_RADIUS),
    ])
    return centers, radii


# --------------------------------------------------------------------------
# grasp proposals


def propose_grasps(cloud: PointCloud, n: int, seed: int,
                   standoff_range=(0.02, 0.06),
                   preshape_angles=(0.05, 0.15, 0.25),
                   align_fraction=0.5) -> List[GraspConfig]:
    """Heuristic surface-normal proposals.

    Approach along -normal with the palm at a sampled stand-off and a
    jittered preshape. Half of the rolls (by default) orient the finger
    spread across the cloud's principal elongation axis, where the hand can
    straddle the object; the rest roll uniformly.
    """
    if cloud.normals is None:
        raise ContractError("propose_grasps requires normals")
    rng = np.random.default_rng(seed)
    centered = cloud.points - cloud.points.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    long_axis = vt[0]
    out = []
    for _ in range(n):
        i = int(rng.integers(len(cloud)))
        p, normal = cloud.points[i], cloud.normals[i]
        approach = -normal
        standoff = rng.uniform(*standoff_range)
        origin = p + normal * standoff
        aligned = rng.uniform() < align_fraction
        y_ref = long_axis - (long_axis @ approach) * approach
        if aligned and np.linalg.norm(y_ref) > 1e-6:
            # finger row along the elongation, closing across the thin side
            y_axis = y_ref / np.linalg.norm(y_ref)
            if rng.uniform() < 0.5:
                y_axis = -y_axis
            x_axis = np.cross(y_axis, approach)
        else:
            ref = np.array([1.0, 0.0, 0.0])
            if abs(approach @ ref) > 0.9:
                ref = np.array([0.0, 1.0, 0.0])
            x0 = ref - (ref @ approach) * approach
            x0 /= np.linalg.norm(x0)
            roll = rng.uniform(0, 2 * np.pi)
            x_axis = np.cos(roll) * x0 + np.sin(roll) * np.cross(approach, x0)
            y_axis = np.cross(approach, x_axis)
        R = np.stack([x_axis, y_axis, approach], axis=1)
        theta = rng.choice(preshape_angles)
        joints = np.clip(theta + rng.normal(0, 0.05, size=N_JOINTS),
                         JOINT_MIN, JOINT_MAX)
        out.append(GraspConfig(rotation=R, translation=origin, joints=joints))
    return out


# --------------------------------------------------------------------------
# feasibility oracle


def _close_finger(spec: ShapeSpec, R, t, finger: int, theta_start: float,
                  step: float = 0.02):
    """Sweep the closure angle until the fingertip touches the surface.

    Returns (tip position, signed distance) at the stopping angle.
    """
    theta = theta_start
    best = None
    while theta <= JOINT_MAX + 1e-9:
        tip_local = finger_points_local(np.full(5, theta))[finger, -1]
        tip = R @ tip_local + t
        d = float(shape_sdf(spec, tip)[0])
        best = (tip, d)
        if d <= TOUCH_TOL:
            break
        theta += step
    return best


def label_grasp(spec: ShapeSpec, grasp: GraspConfig) -> GraspLabel:
    """Deterministic geometric label of one grasp against an analytic shape."""
    centers, radii = hand_proxy_spheres(grasp)
    sdf = shape_sdf(spec, centers)
    n_palm = len(_PALM_OFFSETS)
    # palm too close / inside, or any pre-closure finger sphere inside
    if (sdf[:n_palm] < 0.5 * PALM_SPHERE_RADIUS).any() or (sdf[n_palm:] < 0.0).any():
        return GraspLabel(False, "collision")
    theta0 = finger_angles(grasp.joints)
    contacts = []
    for f in range(5):
        tip, d = _close_finger(spec, grasp.rotation, grasp.translation, f, theta0[f])
        if d <= CONTACT_TOL:
            surface_point = tip  # tip is within 1 cm of the surface
            normal = shape_surface_normal(spec, surface_point)[0]
            contacts.append(normal)
    if not contacts:
        return GraspLabel(False, "no_contact")
    for i in range(len(contacts)):
        for j in range(i + 1, len(contacts)):
            if contacts[i] @ contacts[j] < ANTIPODAL_DOT:
                return GraspLabel(True, "ok")
    return GraspLabel(False, "unreachable_closure")


# --------------------------------------------------------------------------
# dataset construction

SPLITS = ("train", "similar", "novel")
TRAIN_FAMILIES = ("box", "cylinder")
NOVEL_FAMILIES = ("lshape", "capsule")


@dataclasses.dataclass(frozen=True)
class DatasetConfig:
    n_train_objects: int = 48
    n_similar_objects: int = 8
    n_novel_objects: int = 8
    views_per_object: int = 8
    grasps_per_view: int = 32
    points_per_cloud: int = 1024
    seed: int = 5

    def to_dict(self):
        return dataclasses.asdict(self)


def _sample_spec(family: str, rng, n_points: int, size_scale: float = 1.0) -> ShapeSpec:
    if family == "box":
        sizes = (rng.uniform(0.03, 0.06) * size_scale,
                 rng.uniform(0.03, 0.06) * size_scale,
                 rng.uniform(0.06, 0.14) * size_scale)
    elif family == "cylinder":
        sizes = (rng.uniform(0.015, 0.035) * size_scale,
                 rng.uniform(0.08, 0.16) * size_scale)
    elif family == "sphere":
        sizes = (rng.uniform(0.025, 0.045) * size_scale,)
    elif family == "capsule":
        # rounded blob proportions: clearly distinct from the elongated,
        # flat-ended cylinders even after canonical rescaling
        sizes = (rng.uniform(0.025, 0.04) * size_scale,
                 rng.uniform(0.02, 0.05) * size_scale)
    elif family == "lshape":
        sizes = (rng.uniform(0.07, 0.12), rng.uniform(0.03, 0.05),
                 rng.uniform(0.07, 0.12), rng.uniform(0.025, 0.045),
                 rng.uniform(0.025, 0.045))
    else:
        raise ContractError(f"unsupported family {family!r}")
    return ShapeSpec(family=family, sizes=sizes, n_points=n_points)


def _object_plan(config: DatasetConfig):
    plan = []
    for k in range(config.n_train_objects):
        plan.append(("train", TRAIN_FAMILIES[k % len(TRAIN_FAMILIES)], 1.0))
    # similar: same families, sizes drawn 15% larger than the training range
    for k in range(config.n_similar_objects):
        plan.append(("similar", TRAIN_FAMILIES[k % len(TRAIN_FAMILIES)], 1.15))
    for k in range(config.n_novel_objects):
        plan.append(("novel", NOVEL_FAMILIES[k % len(NOVEL_FAMILIES)], 1.0))
    return plan


@dataclasses.dataclass
class DatasetRecord:
    object_id: int
    split: str
    family: str
    sizes: Tuple[float, ...]
    view_id: int
    view_dir: Tuple[float, float, float]
    cloud_file: str
    center: Tuple[float, float, float]
    scale: float
    grasp: np.ndarray          # (24,) canonical frame
    feasible: bool
    reason: str

    def shape_spec(self, n_points: int = 2048) -> ShapeSpec:
        return ShapeSpec(family=self.family, sizes=tuple(self.sizes),
                         n_points=n_points)

    def grasp_world(self) -> GraspConfig:
        """Undo the canonical transform (for labeling in the object frame)."""
        g, _ = grasp_from_vector(self.grasp)
        t = np.asarray(g.translation) / self.scale + np.asarray(self.center)
        return GraspConfig(rotation=g.rotation, translation=t, joints=g.joints)

    def to_json(self) -> str:
        d = {
            "object_id": self.object_id, "split": self.split,
            "family": self.family, "sizes": list(self.sizes),
            "view_id": self.view_id, "view_dir": list(self.view_dir),
            "cloud_file": self.cloud_file, "center": list(self.center),
            "scale": self.scale, "grasp": [float(v) for v in self.grasp],
            "feasible": self.feasible, "reason": self.reason,
        }
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @staticmethod
    def from_json(line: str) -> "DatasetRecord":
        try:
            d = json.loads(line)
            return DatasetRecord(
                object_id=d["object_id"], split=d["split"], family=d["family"],
                sizes=tuple(d["sizes"]), view_id=d["view_id"],
                view_dir=tuple(d["view_dir"]), cloud_file=d["cloud_file"],
                center=tuple(d["center"]), scale=float(d["scale"]),
                grasp=np.asarray(d["grasp"], dtype=np.float64),
                feasible=bool(d["feasible"]), reason=d["reason"])
        except (ValueError, KeyError, TypeError) as e:
            raise SerializationError(f"invalid dataset record: {e}") from e


def _canonical_grasp(grasp: GraspConfig, center: np.ndarray, scale: float) -> np.ndarray:
    t = (grasp.translation - center) * scale
    return GraspConfig(rotation=grasp.rotation, translation=t,
                       joints=grasp.joints).to_vector()


def build_dataset(config: DatasetConfig, out_dir) -> dict:
    """Generate the full dataset under out_dir; returns the manifest dict.

    Deterministic per seed: same config -> byte-identical records, clouds
    and manifest.
    """
    out = pathlib.Path(out_dir)
    clouds_dir = out / "clouds"
    clouds_dir.mkdir(parents=True, exist_ok=True)
    plan = _object_plan(config)
    records: List[DatasetRecord] = []
    counts = {s: 0 for s in SPLITS}
    feasible_counts = {s: 0 for s in SPLITS}
    family_split: Dict[str, set] = {s: set() for s in SPLITS}
    for obj_id, (split, family, size_scale) in enumerate(plan):
        rng = np.random.default_rng([config.seed, obj_id])
        spec = _sample_spec(family, rng, config.points_per_cloud, size_scale)
        full = sample_shape(spec, seed=int(rng.integers(2 ** 31)))
        family_split[split].add(family)
        for view_id in range(config.views_per_object):
            v = rng.normal(size=3)
            v /= np.linalg.norm(v)
            view = partial_view(full, v)
            canon, center, scale = canonicalize(view)
            cloud_file = f"clouds/obj{obj_id:04d}_view{view_id:02d}.fgc"
            save_cloud(canon, out / cloud_file)
            proposals = propose_grasps(view, config.grasps_per_view,
                                       seed=int(rng.integers(2 ** 31)))
            for grasp in proposals:
                label = label_grasp(spec, grasp)
                records.append(DatasetRecord(
                    object_id=obj_id, split=split, family=family,
                    sizes=tuple(float(s) for s in spec.sizes),
                    view_id=view_id, view_dir=tuple(float(x) for x in v),
                    cloud_file=cloud_file,
                    center=tuple(float(c) for c in center), scale=scale,
                    grasp=_canonical_grasp(grasp, center, scale),
                    feasible=label.feasible, reason=label.reason))
                counts[split] += 1
                feasible_counts[split] += int(label.feasible)
    with open(out / "records.jsonl", "w") as f:
        for rec in records:
            f.write(rec.to_json() + "\n")
    cfg_dict = config.to_dict()
    manifest = {
        "config": cfg_dict,
        "config_hash": hashlib.sha256(
            json.dumps(cfg_dict, sort_keys=True).encode()).hexdigest(),
        "seed": config.seed,
        "records": len(records),
        "counts": counts,
        "feasible_counts": feasible_counts,
        "positive_rate": {s: (feasible_counts[s] / counts[s]) if counts[s] else 0.0
                          for s in SPLITS},
        "family_split": {s: sorted(family_split[s]) for s in SPLITS},
    }
    novel_overlap = set(manifest["family_split"]["novel"]) & set(
        manifest["family_split"]["train"])
    if novel_overlap:
        raise DataError(f"novel families leak into train: {novel_overlap}")
    train_rate = manifest["positive_rate"]["train"]
    if not 0.1 <= train_rate <= 0.6:
        raise DataError(
            f"train-split positive rate {train_rate:.3f} outside [0.1, 0.6]; "
            "adjust the dataset config")
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)
        f.write("\n")
    return manifest


class GraspDataset:
    """Loaded view of a generated dataset directory."""

    def __init__(self, root, records: List[DatasetRecord], manifest: dict):
        self.root = pathlib.Path(root)
        self.records = records
        self.manifest = manifest
        self._cloud_cache: Dict[str, PointCloud] = {}

    @staticmethod
    def load(root) -> "GraspDataset":
        root = pathlib.Path(root)
        try:
            with open(root / "manifest.json") as f:
                manifest = json.load(f)
        except FileNotFoundError:
            raise DataError(f"no manifest.json under {root}")
        except ValueError as e:
            raise SerializationError(f"invalid manifest: {e}") from e
        records = []
        with open(root / "records.jsonl") as f:
            for line in f:
                if line.strip():
                    records.append(DatasetRecord.from_json(line))
        if len(records) != manifest.get("records"):
            raise SerializationError("record count does not match manifest")
        return GraspDataset(root, records, manifest)

    def cloud(self, cloud_file: str) -> PointCloud:
        if cloud_file not in self._cloud_cache:
            self._cloud_cache[cloud_file] = load_cloud(self.root / cloud_file)
        return self._cloud_cache[cloud_file]

    def views(self, split: Optional[str] = None,
              families: Optional[Sequence[str]] = None):
        """Records grouped per (cloud_file), preserving record order."""
        groups: Dict[str, List[DatasetRecord]] = {}
        for rec in self.records:
            if split is not None and rec.split != split:
                continue
            if families is not None and rec.family not in families:
                continue
            groups.setdefault(rec.cloud_file, []).append(rec)
        return groups

    def training_pairs(self, split: str = "train", feasible_only: bool = True):
        """(clouds, grasp arrays) aligned lists for the generative samplers."""
        clouds, grasps = [], []
        for cloud_file, recs in self.views(split).items():
            rows = [r.grasp for r in recs if r.feasible or not feasible_only]
            if rows:
                clouds.append(self.cloud(cloud_file))
                grasps.append(np.stack(rows))
        if not clouds:
            raise DataError(f"no usable records in split {split!r}")
        return clouds, grasps

    def labeled_pairs(self, split: str = "train"):
        """(clouds, grasp arrays, label arrays) for the evaluator."""
        clouds, grasps, labels = [], [], []
        for cloud_file, recs in self.views(split).items():
            clouds.append(self.cloud(cloud_file))
            grasps.append(np.stack([r.grasp for r in recs]))
            labels.append(np.array([r.feasible for r in recs], dtype=np.float64))
        return clouds, grasps, labels


def _random_rotation_jitter(rng, sigma: float) -> np.ndarray:
    """Small random rotation: axis uniform, angle |N(0, sigma)|."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = abs(rng.normal(0, sigma))
    k = np.array([[0, -axis[2], axis[1]],
                  [axis[2], 0, -axis[0]],
                  [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def mine_evaluator_pairs(dataset: GraspDataset, split: str = "train",
                         per_positive: int = 3, free_per_view: int = 6,
                         seed: int = 0,
                         translation_sigma: float = 0.02,
                         rotation_sigma: float = 0.4):
    """Labeled evaluator pairs with mined negatives.

    Besides the dataset's own labeled proposals, each feasible grasp is
    perturbed `per_positive` times (pose jitter in the object frame) and
    `free_per_view` random free-space poses are added per view; every mined
    grasp is re-labeled by the geometric oracle, so jittered grasps that
    stay feasible remain positives. Returns (clouds, grasps, labels) in the
    canonical frame, aligned per view.
    """
    rng = np.random.default_rng(seed)
    clouds, grasps, labels = [], [], []
    for cloud_file, recs in dataset.views(split).items():
        spec = recs[0].shape_spec()
        center = np.asarray(recs[0].center)
        scale = recs[0].scale
        rows = [r.grasp for r in recs]
        labs = [float(r.feasible) for r in recs]
        for rec in recs:
            if not rec.feasible:
                continue
            base = rec.grasp_world()
            for _ in range(per_positive):
                world = GraspConfig(
                    rotation=_random_rotation_jitter(rng, rotation_sigma)
                    @ base.rotation,
                    translation=base.translation
                    + rng.normal(0, translation_sigma, size=3),
                    joints=np.clip(base.joints
                                   + rng.normal(0, 0.1, size=N_JOINTS),
                                   JOINT_MIN, JOINT_MAX))
                rows.append(_canonical_grasp(world, center, scale))
                labs.append(float(label_grasp(spec, world).feasible))
        for _ in range(free_per_view):
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            world = GraspConfig(
                rotation=_random_rotation_jitter(rng, np.pi),
                translation=center + direction * rng.uniform(0.15, 0.3),
                joints=np.clip(rng.uniform(0.0, 0.4, size=N_JOINTS),
                               JOINT_MIN, JOINT_MAX))
            rows.append(_canonical_grasp(world, center, scale))
            labs.append(float(label_grasp(spec, world).feasible))
        clouds.append(dataset.cloud(cloud_file))
        grasps.append(np.stack(rows))
        labels.append(np.asarray(labs, dtype=np.float64))
    if not clouds:
        raise DataError(f"no usable records in split {split!r}")
    return clouds, grasps, labels
