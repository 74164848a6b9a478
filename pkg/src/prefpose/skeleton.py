"""Synthetic skeleton world: topology, kinematics, camera and observations.

Camera frame: x right, y down, z forward (into the scene), millimetres.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import _kernels
from .rng import stream

JOINT_NAMES = (
    "pelvis",
    "spine",
    "neck",
    "head",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
    "l_hip",
    "l_knee",
    "l_ankle",
    "r_hip",
    "r_knee",
    "r_ankle",
)

_UP = (0.0, -1.0, 0.0)
_DOWN = (0.0, 1.0, 0.0)
_LEFT = (1.0, 0.0, 0.0)
_RIGHT = (-1.0, 0.0, 0.0)

# (parent, bone length mm, rest direction) per joint
_LAYOUT = (
    (-1, 0.0, (0.0, 0.0, 0.0)),
    (0, 250.0, _UP),
    (1, 250.0, _UP),
    (2, 150.0, _UP),
    (2, 170.0, _LEFT),
    (4, 280.0, _DOWN),
    (5, 250.0, _DOWN),
    (2, 170.0, _RIGHT),
    (7, 280.0, _DOWN),
    (8, 250.0, _DOWN),
    (0, 100.0, _LEFT),
    (10, 430.0, _DOWN),
    (11, 420.0, _DOWN),
    (0, 100.0, _RIGHT),
    (13, 430.0, _DOWN),
    (14, 420.0, _DOWN),
)

# per-joint uniform prior on axis-angle components, (lo, hi) for x, y, z
_ANGLE_PRIOR = (
    ((-0.3, 0.3), (-1.2, 1.2), (-0.2, 0.2)),  # pelvis: global orientation
    ((-0.3, 0.4), (-0.4, 0.4), (-0.2, 0.2)),
    ((-0.3, 0.3), (-0.3, 0.3), (-0.2, 0.2)),
    ((-0.2, 0.2), (-0.2, 0.2), (-0.2, 0.2)),
    ((-1.0, 1.0), (-0.5, 0.5), (-0.3, 1.2)),  # l_shoulder
    ((-1.8, 0.0), (-0.2, 0.2), (-0.2, 0.2)),  # l_elbow
    ((-0.2, 0.2), (-0.2, 0.2), (-0.2, 0.2)),
    ((-1.0, 1.0), (-0.5, 0.5), (-1.2, 0.3)),  # r_shoulder
    ((-1.8, 0.0), (-0.2, 0.2), (-0.2, 0.2)),  # r_elbow
    ((-0.2, 0.2), (-0.2, 0.2), (-0.2, 0.2)),
    ((-1.0, 0.5), (-0.3, 0.3), (-0.1, 0.4)),  # l_hip
    ((0.0, 1.6), (-0.1, 0.1), (-0.1, 0.1)),  # l_knee
    ((-0.2, 0.2), (-0.2, 0.2), (-0.2, 0.2)),
    ((-1.0, 0.5), (-0.3, 0.3), (-0.4, 0.1)),  # r_hip
    ((0.0, 1.6), (-0.1, 0.1), (-0.1, 0.1)),  # r_knee
    ((-0.2, 0.2), (-0.2, 0.2), (-0.2, 0.2)),
)


@dataclass(frozen=True)
class SkeletonTopology:
    parent: np.ndarray
    bone_length_mm: np.ndarray
    rest_direction: np.ndarray
    names: tuple[str, ...] = ()

    def __post_init__(self):
        J = len(self.parent)
        if self.parent[0] != -1:
            raise ValueError("joint 0 must be the root")
        for j in range(1, J):
            if not 0 <= self.parent[j] < j:
                raise ValueError(f"joint {j}: parent {self.parent[j]} breaks topological order")
            if self.bone_length_mm[j] <= 0:
                raise ValueError(f"joint {j}: bone length must be positive")
            if abs(np.linalg.norm(self.rest_direction[j]) - 1.0) > 1e-12:
                raise ValueError(f"joint {j}: rest direction is not unit norm")

    @property
    def num_joints(self) -> int:
        return len(self.parent)


def default_topology() -> SkeletonTopology:
    parent = np.array([p for p, _, _ in _LAYOUT], dtype=np.int64)
    bone = np.array([b for _, b, _ in _LAYOUT])
    rest = np.array([d for _, _, d in _LAYOUT], dtype=np.float64)
    return SkeletonTopology(parent, bone, rest, JOINT_NAMES)


def angle_prior() -> np.ndarray:
    """(J, 3, 2) array of uniform (lo, hi) bounds."""
    return np.array(_ANGLE_PRIOR, dtype=np.float64)


@dataclass(frozen=True)
class Camera:
    focal_px: float = 1000.0
    principal_point_px: tuple[float, float] = (600.0, 600.0)
    image_size_px: tuple[float, float] = (1200.0, 1200.0)

    def __post_init__(self):
        if self.focal_px <= 0:
            raise ValueError("focal length must be positive")
        cx, cy = self.principal_point_px
        w, h = self.image_size_px
        if not (0 <= cx <= w and 0 <= cy <= h):
            raise ValueError("principal point outside the image")

    def as_array(self) -> np.ndarray:
        return np.array([self.focal_px, *self.principal_point_px, *self.image_size_px])

    @classmethod
    def from_array(cls, a) -> "Camera":
        a = [float(x) for x in a]
        return cls(a[0], (a[1], a[2]), (a[3], a[4]))


@dataclass(frozen=True)
class Pose:
    joint_angles: np.ndarray  # (J, 3) axis-angle, radians
    root_position_mm: np.ndarray  # (3,)


@dataclass(frozen=True)
class Observation:
    uv_px: np.ndarray  # (J, 2), zeros where occluded
    visibility: np.ndarray  # (J,) bool
    noise_sigma_px: float = float("nan")


@dataclass(frozen=True)
class Sample:
    id: int
    pose: Pose
    camera: Camera
    observation: Observation
    corrupted: bool
    joints3d: np.ndarray
    vertices3d: np.ndarray


# ---------------------------------------------------------------------------
# geometry


def canonicalize_angles(angles: np.ndarray) -> np.ndarray:
    """Map each axis-angle vector to the same rotation with magnitude <= pi."""
    a = np.asarray(angles, dtype=np.float64)
    theta = np.linalg.norm(a, axis=-1, keepdims=True)
    wrapped = np.mod(theta + np.pi, 2.0 * np.pi) - np.pi
    scale = np.where(theta > np.pi, wrapped / np.where(theta > 0, theta, 1.0), 1.0)
    return a * scale


def forward_kinematics(topology: SkeletonTopology, angles, root) -> np.ndarray:
    """Joint positions (mm, camera frame) for one pose ``(J,3)`` or a batch ``(n,J,3)``."""
    angles = np.asarray(angles, dtype=np.float64)
    root = np.asarray(root, dtype=np.float64)
    single = angles.ndim == 2
    if single:
        angles, root = angles[None], root[None]
    out = _kernels.forward_kinematics_batch(
        angles, root, topology.parent, topology.bone_length_mm, topology.rest_direction
    )
    return out[0] if single else out


def impose_bone_lengths(joints3d, topology: SkeletonTopology) -> np.ndarray:
    """Rebuild ``(..., J, 3)`` joints outward from the root with the topology's bone lengths.

    Each bone keeps the direction it has in the input; a zero-length bone
    takes its rest direction. Poses that already have the right lengths are
    returned unchanged up to round-off.
    """
    X = np.asarray(joints3d, dtype=np.float64)
    out = np.empty_like(X)
    out[..., 0, :] = X[..., 0, :]
    for j in range(1, topology.num_joints):
        p = topology.parent[j]
        d = X[..., j, :] - X[..., p, :]
        n = np.linalg.norm(d, axis=-1, keepdims=True)
        d = np.where(n > 0, d / np.where(n > 0, n, 1.0), topology.rest_direction[j])
        out[..., j, :] = out[..., p, :] + topology.bone_length_mm[j] * d
    return out


def project(joints3d, camera: Camera | np.ndarray) -> np.ndarray:
    """``(..., J, 3)`` camera-frame joints -> ``(..., J, 3)`` UVD.

    ``camera`` is a Camera or an array ``(..., 5)`` of [f, cx, cy, w, h].
    d is the depth relative to joint 0 in metres.
    """
    X = np.asarray(joints3d, dtype=np.float64)
    cam = camera.as_array() if isinstance(camera, Camera) else np.asarray(camera, dtype=np.float64)
    z = X[..., 2]
    if np.any(z <= 0):
        raise ValueError("point behind the camera (z <= 0)")
    f = cam[..., 0:1]
    cx = cam[..., 1:2]
    cy = cam[..., 2:3]
    u = f * X[..., 0] / z + cx
    v = f * X[..., 1] / z + cy
    d = (z - z[..., 0:1]) / 1000.0
    return np.stack([u, v, d], axis=-1)


def densify_vertices(joints3d, topology: SkeletonTopology, points_per_bone: int = 4) -> np.ndarray:
    """Proxy surface: points at fractions k/(ppb+1) along every bone."""
    X = np.asarray(joints3d, dtype=np.float64)
    child = np.arange(1, topology.num_joints)
    par = topology.parent[1:]
    fr = np.arange(1, points_per_bone + 1) / (points_per_bone + 1)
    a = X[..., par, :][..., :, None, :]
    b = X[..., child, :][..., :, None, :]
    pts = a + fr[:, None] * (b - a)
    return pts.reshape(*X.shape[:-2], (topology.num_joints - 1) * points_per_bone, 3)


def perturb_pose(pose: Pose, sigma_rad: float, rng: np.random.Generator) -> Pose:
    """I.i.d. Gaussian noise on every axis-angle component; root unchanged."""
    if sigma_rad < 0:
        raise ValueError("sigma must be non-negative")
    noise = rng.normal(0.0, 1.0, size=pose.joint_angles.shape) * sigma_rad
    if sigma_rad == 0:
        return pose
    return replace(pose, joint_angles=canonicalize_angles(pose.joint_angles + noise))


# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class GenConfig:
    n_samples: int = 1000
    obs_noise_px: float = 3.0
    p_occ: float = 0.15
    depth_range_mm: tuple[float, float] = (2500.0, 5500.0)
    lateral_range_mm: tuple[float, float] = (300.0, 200.0)
    corruption_fraction: float = 0.0
    corruption_sigma_rad: float = 0.3
    camera: Camera = field(default_factory=Camera)


@dataclass
class Dataset:
    """Column-oriented sample store; ``ds[i]`` returns a :class:`Sample`."""

    ids: np.ndarray
    angles: np.ndarray
    root: np.ndarray
    camera: np.ndarray
    uv: np.ndarray
    visibility: np.ndarray
    corrupted: np.ndarray
    topology: SkeletonTopology = field(default_factory=default_topology)

    def __post_init__(self):
        self.joints3d = forward_kinematics(self.topology, self.angles, self.root)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def vertices3d(self) -> np.ndarray:
        return densify_vertices(self.joints3d, self.topology)

    def __getitem__(self, i: int) -> Sample:
        return Sample(
            id=int(self.ids[i]),
            pose=Pose(self.angles[i], self.root[i]),
            camera=Camera.from_array(self.camera[i]),
            observation=Observation(self.uv[i], self.visibility[i]),
            corrupted=bool(self.corrupted[i]),
            joints3d=self.joints3d[i],
            vertices3d=densify_vertices(self.joints3d[i], self.topology),
        )

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(
            self.ids[rows],
            self.angles[rows],
            self.root[rows],
            self.camera[rows],
            self.uv[rows],
            self.visibility[rows],
            self.corrupted[rows],
            self.topology,
        )

    def with_angles(self, angles) -> "Dataset":
        return Dataset(
            self.ids, np.asarray(angles), self.root, self.camera, self.uv, self.visibility, self.corrupted, self.topology
        )

    def row_of(self, sample_id: int) -> int:
        hits = np.flatnonzero(self.ids == sample_id)
        if len(hits) != 1:
            raise KeyError(f"sample id {sample_id} not in dataset")
        return int(hits[0])


def _sample_one(cfg: GenConfig, topo: SkeletonTopology, prior: np.ndarray, rng: np.random.Generator):
    angles = rng.uniform(prior[..., 0], prior[..., 1])
    lx, ly = cfg.lateral_range_mm
    z = rng.uniform(*cfg.depth_range_mm)
    root = np.array([rng.uniform(-lx, lx), rng.uniform(-ly, ly), z])
    joints = forward_kinematics(topo, angles, root)
    uv = project(joints, cfg.camera)[:, :2] + rng.normal(0.0, cfg.obs_noise_px, size=(topo.num_joints, 2))
    occ_draw = rng.uniform(size=topo.num_joints)
    w, h = cfg.camera.image_size_px
    inside = (uv[:, 0] >= 0) & (uv[:, 0] <= w) & (uv[:, 1] >= 0) & (uv[:, 1] <= h)
    vis = (occ_draw >= cfg.p_occ) & inside
    uv = np.where(vis[:, None], uv, 0.0)
    return angles, root, uv, vis


def generate_dataset(cfg: GenConfig, seed: int, split: str = "train", topology: SkeletonTopology | None = None) -> Dataset:
    """Deterministic in ``(cfg, seed, split)``; sample ``i`` draws only from its own stream."""
    topo = topology or default_topology()
    prior = angle_prior()
    n = cfg.n_samples
    J = topo.num_joints
    angles = np.empty((n, J, 3))
    root = np.empty((n, 3))
    uv = np.empty((n, J, 2))
    vis = np.empty((n, J), dtype=bool)
    for i in range(n):
        angles[i], root[i], uv[i], vis[i] = _sample_one(cfg, topo, prior, stream(seed, f"data/{split}", i))
    corrupted = np.zeros(n, dtype=bool)
    n_bad = int(math.floor(cfg.corruption_fraction * n + 1e-9))
    if n_bad:
        pick = stream(seed, f"corrupt-select/{split}").permutation(n)[:n_bad]
        corrupted[pick] = True
        for i in np.sort(pick):
            noise = stream(seed, f"corrupt/{split}", int(i)).normal(0.0, cfg.corruption_sigma_rad, size=(J, 3))
            angles[i] = canonicalize_angles(angles[i] + noise)
    cams = np.tile(cfg.camera.as_array(), (n, 1))
    return Dataset(np.arange(n, dtype=np.int64), angles, root, cams, uv, vis, corrupted, topo)


# ---------------------------------------------------------------------------
# file format: one JSON object per line


def fmt_float(x: float) -> str:
    return format(float(x), ".17g")


def fmt_floats(a) -> str:
    a = np.asarray(a)
    if a.ndim == 0:
        return fmt_float(a)
    return "[" + ",".join(fmt_floats(x) for x in a) + "]"


def save_dataset(path, ds: Dataset) -> None:
    lines = []
    for i in range(len(ds)):
        cam = ds.camera[i]
        cam_s = (
            f'{{"focal":{fmt_float(cam[0])},"principal":{fmt_floats(cam[1:3])},"size":{fmt_floats(cam[3:5])}}}'
        )
        vis_s = "[" + ",".join("true" if v else "false" for v in ds.visibility[i]) + "]"
        lines.append(
            f'{{"id":{int(ds.ids[i])},"angles":{fmt_floats(ds.angles[i])},"root":{fmt_floats(ds.root[i])},'
            f'"camera":{cam_s},"uv":{fmt_floats(ds.uv[i])},"visibility":{vis_s},'
            f'"corrupted":{"true" if ds.corrupted[i] else "false"}}}'
        )
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


_FIELDS = {"id", "angles", "root", "camera", "uv", "visibility", "corrupted"}


def load_dataset(path, topology: SkeletonTopology | None = None) -> Dataset:
    recs = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        rec = json.loads(line)
        if set(rec) != _FIELDS:
            raise ValueError(f"{path}:{lineno}: fields {sorted(rec)} != {sorted(_FIELDS)}")
        recs.append(rec)
    topo = topology or default_topology()
    J = topo.num_joints
    if not recs:
        z = np.zeros
        return Dataset(z(0, np.int64), z((0, J, 3)), z((0, 3)), z((0, 5)), z((0, J, 2)), z((0, J), bool), z(0, bool), topo)
    return Dataset(
        np.array([r["id"] for r in recs], dtype=np.int64),
        np.array([r["angles"] for r in recs], dtype=np.float64),
        np.array([r["root"] for r in recs], dtype=np.float64),
        np.array([[r["camera"]["focal"], *r["camera"]["principal"], *r["camera"]["size"]] for r in recs]),
        np.array([r["uv"] for r in recs], dtype=np.float64),
        np.array([r["visibility"] for r in recs], dtype=bool),
        np.array([r["corrupted"] for r in recs], dtype=bool),
        topo,
    )
