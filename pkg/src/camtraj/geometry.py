"""SE(3) pose utilities: rotation representations, midpoint-relative encoding,
frame conversion, gravity projection and resampling.

Rotations are stored as 3x3 matrices. Quaternions appear only at I/O and
interpolation boundaries and are ordered (w, x, y, z) everywhere except in
TUM files, which use (qx, qy, qz, qw).
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .errors import InvalidInputError, MissingGravityError, TrajectoryFormatError

# Aria (x left, y up, z forward) <-> OpenCV (x right, y down, z forward).
FRAME_FLIP = np.diag([-1.0, -1.0, 1.0])

IDENTITY_ROW = np.array([0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


class Frame(str, enum.Enum):
    ARIA = "aria"
    OPENCV = "opencv"


# ---------------------------------------------------------------------------
# rotation representations


def quat_to_matrix(q) -> np.ndarray:
    """Unit-normalize ``q`` (..., 4) in (w, x, y, z) order and return (..., 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm < 1e-12):
        raise InvalidInputError("zero-norm quaternion")
    w, x, y, z = np.moveaxis(q / norm, -1, 0)
    R = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return R.reshape(q.shape[:-1] + (3, 3))


def matrix_to_quat(R) -> np.ndarray:
    """Rotation matrices (..., 3, 3) to canonical unit quaternions (w >= 0)."""
    R = np.asarray(R, dtype=np.float64)
    m = R.reshape(-1, 3, 3)
    out = np.empty((m.shape[0], 4))
    tr = m[:, 0, 0] + m[:, 1, 1] + m[:, 2, 2]
    # Shepperd: pivot on the largest of (trace, diagonal entries).
    diag = np.stack([tr, m[:, 0, 0], m[:, 1, 1], m[:, 2, 2]], axis=1)
    pivot = np.argmax(diag, axis=1)
    for k in range(4):
        sel = pivot == k
        if not np.any(sel):
            continue
        a = m[sel]
        if k == 0:
            s = 2.0 * np.sqrt(1.0 + tr[sel])
            out[sel] = np.stack(
                [0.25 * s, (a[:, 2, 1] - a[:, 1, 2]) / s,
                 (a[:, 0, 2] - a[:, 2, 0]) / s, (a[:, 1, 0] - a[:, 0, 1]) / s], axis=1)
        elif k == 1:
            s = 2.0 * np.sqrt(1.0 + a[:, 0, 0] - a[:, 1, 1] - a[:, 2, 2])
            out[sel] = np.stack(
                [(a[:, 2, 1] - a[:, 1, 2]) / s, 0.25 * s,
                 (a[:, 0, 1] + a[:, 1, 0]) / s, (a[:, 0, 2] + a[:, 2, 0]) / s], axis=1)
        elif k == 2:
            s = 2.0 * np.sqrt(1.0 + a[:, 1, 1] - a[:, 0, 0] - a[:, 2, 2])
            out[sel] = np.stack(
                [(a[:, 0, 2] - a[:, 2, 0]) / s, (a[:, 0, 1] + a[:, 1, 0]) / s,
                 0.25 * s, (a[:, 1, 2] + a[:, 2, 1]) / s], axis=1)
        else:
            s = 2.0 * np.sqrt(1.0 + a[:, 2, 2] - a[:, 0, 0] - a[:, 1, 1])
            out[sel] = np.stack(
                [(a[:, 1, 0] - a[:, 0, 1]) / s, (a[:, 0, 2] + a[:, 2, 0]) / s,
                 (a[:, 1, 2] + a[:, 2, 1]) / s, 0.25 * s], axis=1)
    out /= np.linalg.norm(out, axis=1, keepdims=True)
    return canonicalize(out).reshape(R.shape[:-2] + (4,))


def canonicalize(q) -> np.ndarray:
    """Flip quaternions into the w >= 0 hemisphere."""
    q = np.array(q, dtype=np.float64)
    sign = np.where(q[..., :1] < 0, -1.0, 1.0)
    return q * sign


def matrix_to_6d(R) -> np.ndarray:
    """First two columns of ``R``, concatenated: (..., 3, 3) -> (..., 6)."""
    R = np.asarray(R)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def sixd_to_matrix(v, eps: float = 1e-12) -> np.ndarray:
    """Gram-Schmidt decode of a 6D rotation vector (..., 6) -> (..., 3, 3)."""
    v = np.asarray(v, dtype=np.float64)
    a1, a2 = v[..., :3], v[..., 3:6]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if np.any(n1 < eps):
        raise InvalidInputError("6D rotation has a zero first column")
    b1 = a1 / n1
    u2 = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    n2 = np.linalg.norm(u2, axis=-1, keepdims=True)
    if np.any(n2 < eps * np.maximum(1.0, np.linalg.norm(a2, axis=-1, keepdims=True))):
        raise InvalidInputError("6D rotation columns are parallel or zero")
    b2 = u2 / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def axis_angle_to_matrix(axis, angle) -> np.ndarray:
    """Rodrigues formula; ``angle`` in radians, may be an array."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    angle = np.asarray(angle, dtype=np.float64)
    half = 0.5 * angle[..., None]
    q = np.concatenate([np.cos(half), np.sin(half) * axis], axis=-1)
    return quat_to_matrix(q)


def rotation_angle(R) -> np.ndarray:
    R = np.asarray(R)
    c = (np.trace(R, axis1=-2, axis2=-1) - 1.0) / 2.0
    return np.arccos(np.clip(c, -1.0, 1.0))


def random_rotations(rng: np.random.Generator, n: int) -> np.ndarray:
    """Uniformly distributed rotations (n, 3, 3)."""
    q = rng.standard_normal((n, 4))
    return quat_to_matrix(q)


def slerp(q0, q1, t) -> np.ndarray:
    """Spherical interpolation between unit quaternions, shortest arc.

    ``q0``/``q1`` are (..., 4), ``t`` broadcasts against their batch shape.
    """
    q0 = canonicalize(q0)
    q1 = canonicalize(q1)
    t = np.asarray(t, dtype=np.float64)[..., None]
    dot = np.sum(q0 * q1, axis=-1, keepdims=True)
    q1 = np.where(dot < 0, -q1, q1)
    dot = np.abs(dot)
    theta = np.arccos(np.clip(dot, -1.0, 1.0))
    sin_t = np.sin(theta)
    small = sin_t < 1e-9
    safe = np.where(small, 1.0, sin_t)
    w0 = np.where(small, 1.0 - t, np.sin((1.0 - t) * theta) / safe)
    w1 = np.where(small, t, np.sin(t * theta) / safe)
    q = w0 * q0 + w1 * q1
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# trajectory types


@dataclass(frozen=True)
class Pose:
    translation: np.ndarray
    rotation: np.ndarray
    timestamp: float


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Timestamped absolute poses stored as arrays.

    ``translations`` is (N, 3) in meters, ``rotations`` is (N, 3, 3) and maps
    camera coordinates to world coordinates (camera-to-world).
    """

    timestamps: np.ndarray
    translations: np.ndarray
    rotations: np.ndarray
    frame: Frame = Frame.ARIA
    sample_rate_hz: float = 20.0
    gravity_world: Optional[np.ndarray] = None
    uniform: bool = False

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
        tr = np.asarray(self.translations, dtype=np.float64).reshape(-1, 3)
        rot = np.asarray(self.rotations, dtype=np.float64).reshape(-1, 3, 3)
        if not (len(ts) == len(tr) == len(rot)):
            raise InvalidInputError(
                f"inconsistent pose counts: {len(ts)} timestamps, {len(tr)} translations, "
                f"{len(rot)} rotations")
        if not np.all(np.isfinite(ts)):
            raise InvalidInputError("non-finite timestamp")
        if len(ts) > 1 and np.any(np.diff(ts) <= 0):
            raise InvalidInputError("timestamps must be strictly increasing")
        if not self.sample_rate_hz > 0:
            raise InvalidInputError("sample_rate_hz must be positive")
        if self.uniform and len(ts) > 1:
            if np.max(np.abs(np.diff(ts) - 1.0 / self.sample_rate_hz)) > 1e-6:
                raise InvalidInputError("trajectory marked uniform but deltas deviate from 1/rate")
        g = self.gravity_world
        if g is not None:
            g = np.asarray(g, dtype=np.float64).reshape(3)
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "translations", tr)
        object.__setattr__(self, "rotations", rot)
        object.__setattr__(self, "frame", Frame(self.frame))
        object.__setattr__(self, "sample_rate_hz", float(self.sample_rate_hz))
        object.__setattr__(self, "gravity_world", g)

    def __len__(self) -> int:
        return len(self.timestamps)

    def __iter__(self) -> Iterator[Pose]:
        return iter(self.poses)

    @property
    def poses(self) -> list:
        return [Pose(self.translations[i], self.rotations[i], float(self.timestamps[i]))
                for i in range(len(self))]

    @property
    def extent(self) -> tuple:
        return float(self.timestamps[0]), float(self.timestamps[-1])

    def replace(self, **changes) -> "Trajectory":
        kw = dict(timestamps=self.timestamps, translations=self.translations,
                  rotations=self.rotations, frame=self.frame,
                  sample_rate_hz=self.sample_rate_hz, gravity_world=self.gravity_world,
                  uniform=self.uniform)
        kw.update(changes)
        return Trajectory(**kw)

    @classmethod
    def from_poses(cls, poses, **kw) -> "Trajectory":
        return cls(
            timestamps=np.array([p.timestamp for p in poses]),
            translations=np.array([p.translation for p in poses]),
            rotations=np.array([p.rotation for p in poses]),
            **kw,
        )


@dataclass(frozen=True, eq=False)
class RelativePoseSequence:
    rows: np.ndarray
    midpoint_index: int
    gravity_ref: Optional[np.ndarray] = field(default=None)

    def __len__(self) -> int:
        return len(self.rows)


def transform_trajectory(traj: Trajectory, R, t) -> Trajectory:
    """Left-compose every pose with the rigid transform (R, t).

    Gravity is a world-frame vector and rotates with the world.
    """
    R = np.asarray(R, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    g = None if traj.gravity_world is None else R @ traj.gravity_world
    return traj.replace(
        translations=traj.translations @ R.T + t,
        rotations=np.einsum("ij,njk->nik", R, traj.rotations),
        gravity_world=g,
    )


# ---------------------------------------------------------------------------
# encodings


def midpoint_index(n: int) -> int:
    return n // 2


def relative_to_midpoint(traj: Trajectory, use_gravity: bool = False) -> RelativePoseSequence:
    """Encode each pose as T_mid^-1 * T_i, i.e. (t, 6D rotation) in the midpoint camera frame."""
    n = len(traj)
    if n == 0:
        raise InvalidInputError("empty trajectory")
    if use_gravity and traj.gravity_world is None:
        raise MissingGravityError("gravity requested but trajectory has no gravity_world")
    mid = midpoint_index(n)
    R_mid = traj.rotations[mid]
    t_rel = (traj.translations - traj.translations[mid]) @ R_mid
    R_rel = np.einsum("ji,njk->nik", R_mid, traj.rotations)
    rows = np.concatenate([t_rel, matrix_to_6d(R_rel)], axis=1)
    # the reference pose is identity by definition; pin it against round-off
    rows[mid] = IDENTITY_ROW
    g_ref = R_mid.T @ traj.gravity_world if use_gravity else None
    return RelativePoseSequence(rows=rows, midpoint_index=mid, gravity_ref=g_ref)


def gravity_in_reference(traj: Trajectory) -> np.ndarray:
    if traj.gravity_world is None:
        raise MissingGravityError("trajectory has no gravity_world")
    R_mid = traj.rotations[midpoint_index(len(traj))]
    return R_mid.T @ traj.gravity_world


def convert_frame(traj: Trajectory, target) -> Trajectory:
    """Re-express poses by conjugation with diag(-1, -1, 1).

    Camera and world axes are flipped together, so gravity flips as well.
    """
    target = Frame(target)
    if traj.frame == target:
        return traj
    S = FRAME_FLIP
    return traj.replace(
        translations=traj.translations * np.diag(S),
        rotations=S @ traj.rotations @ S,
        gravity_world=None if traj.gravity_world is None else S @ traj.gravity_world,
        frame=target,
    )


def interpolate(traj: Trajectory, times) -> Trajectory:
    """Poses at arbitrary ``times`` inside the trajectory extent.

    Translation is interpolated linearly, rotation by slerp. Times that hit a
    sample exactly reproduce it without round-off.
    """
    times = np.asarray(times, dtype=np.float64).reshape(-1)
    ts = traj.timestamps
    if len(ts) < 2:
        raise InvalidInputError("interpolation needs at least 2 poses")
    tol = 1e-9
    if times.size and (times[0] < ts[0] - tol or times[-1] > ts[-1] + tol):
        raise InvalidInputError(
            f"query times [{times[0]}, {times[-1]}] outside trajectory [{ts[0]}, {ts[-1]}]")
    idx = np.clip(np.searchsorted(ts, times, side="right") - 1, 0, len(ts) - 2)
    alpha = np.clip((times - ts[idx]) / (ts[idx + 1] - ts[idx]), 0.0, 1.0)
    trans = (1 - alpha)[:, None] * traj.translations[idx] + alpha[:, None] * traj.translations[idx + 1]
    q = matrix_to_quat(traj.rotations)
    rots = quat_to_matrix(slerp(q[idx], q[idx + 1], alpha))
    exact0 = alpha <= 1e-12
    exact1 = alpha >= 1 - 1e-12
    trans[exact0] = traj.translations[idx[exact0]]
    rots[exact0] = traj.rotations[idx[exact0]]
    trans[exact1] = traj.translations[idx[exact1] + 1]
    rots[exact1] = traj.rotations[idx[exact1] + 1]
    return traj.replace(timestamps=times, translations=trans, rotations=rots, uniform=False)


def resample(traj: Trajectory, target_hz: float) -> Trajectory:
    """Uniform resampling at ``target_hz`` over [first, last] timestamp."""
    if len(traj) < 2:
        raise InvalidInputError("resampling needs at least 2 poses")
    if not target_hz > 0:
        raise InvalidInputError("target_hz must be positive")
    t0, t1 = traj.extent
    n = int(np.floor((t1 - t0) * target_hz + 1e-6)) + 1
    times = t0 + np.arange(n) / target_hz
    times[-1] = min(times[-1], t1)
    out = interpolate(traj, times)
    return out.replace(sample_rate_hz=float(target_hz), uniform=True)


# ---------------------------------------------------------------------------
# TUM text format + JSON sidecar


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def write_tum(traj: Trajectory, path, extra_meta: Optional[dict] = None) -> None:
    """Write ``timestamp tx ty tz qx qy qz qw`` lines plus the JSON sidecar."""
    path = Path(path)
    q = matrix_to_quat(traj.rotations)
    lines = ["# timestamp tx ty tz qx qy qz qw"]
    for ts, t, (w, x, y, z) in zip(traj.timestamps, traj.translations, q):
        vals = (ts, t[0], t[1], t[2], x, y, z, w)
        lines.append(" ".join(repr(float(v)) for v in vals))
    path.write_text("\n".join(lines) + "\n")
    meta = {
        "frame": traj.frame.value,
        "sample_rate_hz": traj.sample_rate_hz,
        "uniform": bool(traj.uniform),
        "gravity_world": None if traj.gravity_world is None else [float(v) for v in traj.gravity_world],
    }
    if extra_meta:
        meta.update(extra_meta)
    sidecar_path(path).write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def read_tum(path, frame=None, sample_rate_hz=None) -> Trajectory:
    """Read a TUM trajectory; sidecar metadata fills in frame, rate and gravity.

    Explicit ``frame``/``sample_rate_hz`` arguments win over the sidecar. A
    missing frame with no sidecar is an error rather than a guess.
    """
    path = Path(path)
    rows = []
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise TrajectoryFormatError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError as exc:
            raise TrajectoryFormatError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise TrajectoryFormatError(f"{path}: no poses")
    arr = np.array(rows)
    meta = {}
    side = sidecar_path(path)
    if side.exists():
        meta = json.loads(side.read_text())
    frame = frame or meta.get("frame")
    if frame is None:
        raise TrajectoryFormatError(f"{path}: frame convention unknown (no sidecar)")
    rate = sample_rate_hz or meta.get("sample_rate_hz")
    if rate is None:
        if len(arr) < 2:
            raise TrajectoryFormatError(f"{path}: cannot infer sample rate from one pose")
        rate = 1.0 / float(np.median(np.diff(arr[:, 0])))
    g = meta.get("gravity_world")
    quat_wxyz = arr[:, [7, 4, 5, 6]]
    try:
        return Trajectory(
            timestamps=arr[:, 0],
            translations=arr[:, 1:4],
            rotations=quat_to_matrix(quat_wxyz),
            frame=Frame(frame),
            sample_rate_hz=float(rate),
            gravity_world=None if g is None else np.asarray(g, dtype=np.float64),
            uniform=bool(meta.get("uniform", False)),
        )
    except InvalidInputError as exc:
        raise TrajectoryFormatError(f"{path}: {exc}") from None
