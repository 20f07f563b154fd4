"""Synthetic visual-inertial scenarios with exact ground truth.

Ground-truth states are the midpoint integral of the noise-free IMU stream,
so noiseless preintegration reproduces them to rounding error whatever the
trajectory shape. The designed world acceleration and body rate only shape
the motion.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InvalidScenario
from .evaluation import Trajectory, mean_acceleration
from .geometry import PinholeCamera, Pose, UnitQuaternion, matrix_to_quat, so3_exp
from .imu import ImuData, NoiseModel, gravity_vector
from .io import Calibration, Dataset, quantize_image
from .monodepth import DepthMap
from .state import Feature, ScaleShift

KINDS = ("hover", "arc", "excited")
DEFAULT_CAMERA = PinholeCamera(460.0, 460.0, 320.0, 240.0, 640, 480)
# camera z (optical axis) along IMU x, camera x along -IMU y, camera y along -IMU z
DEFAULT_EXTRINSICS = Pose(
    UnitQuaternion.from_matrix(np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])),
    np.array([0.05, 0.01, -0.02]),
)
T0_NS = 1_000_000_000
BACKGROUND_DEPTH = 30.0
SPLAT_RADIUS = 4


@dataclass(frozen=True)
class Scenario:
    kind: str = "excited"
    duration: float = 1.0  # s
    imu_rate: float = 200.0
    cam_rate: float = 10.0
    landmarks_per_frame: int = 40
    depth_range: tuple = (2.0, 10.0)
    imu_noise: bool = False
    track_noise_px: float = 0.0
    accel_bias: tuple = (0.0, 0.0, 0.0)
    gyro_bias: tuple = (0.0, 0.0, 0.0)
    depth_scale: Optional[float] = 1.0  # a*; None draws U(0.8, 1.25)
    depth_shift: Optional[float] = 0.0  # b*; None draws U(-0.03, 0.03)
    scale_jitter: float = 0.0  # per-frame log-normal std on a*
    shift_jitter: float = 0.0  # per-frame std on b*
    depth_noise: float = 0.0  # additive std on the relative inverse depth
    outlier_fraction: float = 0.0
    with_depth: bool = True
    with_images: bool = False
    hover_drift: float = 0.12  # m/s
    hover_amplitude: float = 1e-3  # m, per-axis sway
    hover_freq: tuple = (0.4, 0.8)  # Hz
    gravity: float = 9.81
    seed: int = 0
    camera: PinholeCamera = DEFAULT_CAMERA
    extrinsics: Pose = DEFAULT_EXTRINSICS
    noise: NoiseModel = field(default_factory=NoiseModel)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidScenario(f"kind must be one of {KINDS}")
        if not (self.imu_rate > 0 and self.cam_rate > 0):
            raise InvalidScenario("rates must be positive")
        ratio = self.imu_rate / self.cam_rate
        if abs(ratio - round(ratio)) > 1e-9:
            raise InvalidScenario("IMU rate must be an integer multiple of the camera rate")
        if (1e9 / self.imu_rate) % 1 != 0:
            raise InvalidScenario("IMU period must be a whole number of nanoseconds")
        lo, hi = self.depth_range
        if not 0 < lo < hi:
            raise InvalidScenario("depth range must be positive and increasing")
        if not 0.0 <= self.outlier_fraction < 1.0:
            raise InvalidScenario("outlier fraction must lie in [0, 1)")
        if not self.duration > 2.0 / self.cam_rate:
            raise InvalidScenario("duration must cover at least two frames")
        if self.landmarks_per_frame < 1:
            raise InvalidScenario("need at least one landmark per frame")
        for name in ("track_noise_px", "depth_noise", "scale_jitter", "shift_jitter"):
            if getattr(self, name) < 0:
                raise InvalidScenario(f"{name} must be non-negative")


@dataclass(eq=False)
class SimResult:
    """Full generated sequence plus everything a test needs to score it."""

    scenario: Scenario
    dataset: Dataset
    trajectory: Trajectory  # ground truth at IMU rate
    accel_world: np.ndarray  # designed linear acceleration at IMU rate
    landmarks: np.ndarray  # (L, 3) world points
    outliers: frozenset  # landmark ids chosen for decoy depth
    occluded: frozenset  # (landmark id, frame ts) whose depth sample belongs to another surface
    decoyed: frozenset  # (landmark id, frame ts) tracked with decoy depth
    a_star: np.ndarray  # per frame
    b_star: np.ndarray

    @property
    def times(self):
        return (self.trajectory.timestamps - self.trajectory.timestamps[0]) * 1e-9

    def window(self, start_index=0, count=5, use_depth=None):
        if use_depth is None:
            use_depth = self.dataset.depth_maps is not None
        return self.dataset.window(start_index, count, use_depth=use_depth)

    def truth(self, start_index=0, count=5):
        ts = self.dataset.frame_timestamps[start_index : start_index + count]
        in_window = set(int(t) for t in ts)
        idx = self.trajectory.index_of(ts)
        states = self.trajectory.states_at(ts)
        span = slice(int(idx[0]), int(idx[-1]) + 1)
        return GroundTruth(
            states=states,
            landmarks=self.landmarks,
            # only landmarks whose depth is actually corrupted inside the window count
            outliers=frozenset(lid for lid, t in self.decoyed if t in in_window),
            occluded=frozenset(o for o in self.occluded if o[1] in in_window),
            a_star=self.a_star[start_index : start_index + count].copy(),
            b_star=self.b_star[start_index : start_index + count].copy(),
            mean_acceleration=mean_acceleration(self.times[span], accelerations=self.accel_world[span]),
            extrinsics=self.dataset.calibration.extrinsics,
        )


@dataclass(eq=False)
class GroundTruth:
    states: list  # KeyframeState per keyframe
    landmarks: np.ndarray
    outliers: frozenset  # landmarks with decoy depth in at least one window frame
    occluded: frozenset
    a_star: np.ndarray
    b_star: np.ndarray
    mean_acceleration: float
    extrinsics: Pose

    def scale_shifts(self):
        return [ScaleShift.from_scale(a, b) for a, b in zip(self.a_star, self.b_star)]

    def feature(self, landmark_id, anchor_kf, observations=()):
        """Exact inverse-depth parameters of a landmark in a keyframe camera."""
        s = self.states[anchor_kf]
        Rc, pc = self.extrinsics.R, self.extrinsics.translation
        Xi = s.R.T @ (self.landmarks[landmark_id] - s.p)
        Xc = Rc.T @ (Xi - pc)
        return Feature(int(landmark_id), anchor_kf, Xc[0] / Xc[2], Xc[1] / Xc[2], 1.0 / Xc[2], tuple(observations))


def _rng_streams(seed, n):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(int(seed)).spawn(n)]


def _random_unit(rng):
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def _yaw_tilt(rng, tilt=0.05):
    yaw = rng.uniform(-math.pi, math.pi)
    Rz = so3_exp(np.array([0.0, 0.0, yaw]))
    return Rz @ so3_exp(np.array([rng.uniform(-tilt, tilt), rng.uniform(-tilt, tilt), 0.0])), yaw


def design_motion(sc: Scenario, t, rng):
    """World acceleration, body rate, initial rotation and velocity."""
    n = len(t)
    R0, yaw = _yaw_tilt(rng)
    if sc.kind == "hover":
        amp = sc.hover_amplitude
        freq = rng.uniform(*sc.hover_freq, size=3)
        phase = rng.uniform(0, 2 * math.pi, size=3)
        w = 2 * math.pi * freq
        acc = -amp * w**2 * np.sin(w * t[:, None] + phase)
        heading = rng.uniform(-math.pi, math.pi)
        v0 = sc.hover_drift * np.array([math.cos(heading), math.sin(heading), 0.0])
        v0 = v0 + amp * w * np.cos(phase)
        wf = rng.uniform(0.3, 0.7, size=3)
        wp = rng.uniform(0, 2 * math.pi, size=3)
        omega = 0.02 * np.sin(2 * math.pi * wf * t[:, None] + wp)
    elif sc.kind == "arc":
        speed, rate = 1.0, 0.3
        psi = yaw + rate * t
        acc = speed * rate * np.stack([-np.sin(psi), np.cos(psi), np.zeros(n)], axis=1)
        v0 = speed * np.array([math.cos(yaw), math.sin(yaw), 0.0])
        omega = np.tile(R0.T @ np.array([0.0, 0.0, rate]), (n, 1))
    else:
        amp = rng.uniform(1.0, 2.5, size=3)
        freq = rng.uniform(0.8, 1.5, size=3)
        phase = rng.uniform(0, 2 * math.pi, size=3)
        acc = amp * np.sin(2 * math.pi * freq * t[:, None] + phase)
        wamp = rng.uniform(0.3, 0.6, size=3)
        wfreq = rng.uniform(0.5, 1.0, size=3)
        wphase = rng.uniform(0, 2 * math.pi, size=3)
        omega = wamp * np.sin(2 * math.pi * wfreq * t[:, None] + wphase)
        v0 = _random_unit(rng) * 0.5
    return acc, omega, R0, v0


def integrate_truth(acc, omega, R0, v0, dt, g):
    """Midpoint integral of the clean IMU stream; returns R, p, v and specific force."""
    n = len(acc)
    gv = gravity_vector(g)
    R = np.empty((n, 3, 3))
    R[0] = R0
    for m in range(n - 1):
        R[m + 1] = R[m] @ so3_exp(0.5 * (omega[m] + omega[m + 1]) * dt)
    f = np.einsum("nba,nb->na", R, acc - gv)
    p = np.zeros((n, 3))
    v = np.zeros((n, 3))
    v[0] = v0
    for m in range(n - 1):
        a_mid = 0.5 * (R[m] @ f[m] + R[m + 1] @ f[m + 1]) + gv
        p[m + 1] = p[m] + v[m] * dt + 0.5 * a_mid * dt * dt
        v[m + 1] = v[m] + a_mid * dt
    return R, p, v, f


def _camera_points(R_wi, p_wi, ext: Pose, X):
    Rc, pc = ext.R, ext.translation
    Xi = (X - p_wi) @ R_wi
    return (Xi - pc) @ Rc


def generate_sequence(sc: Scenario) -> SimResult:
    rng_motion, rng_land, rng_imu, rng_track, rng_depth, rng_out = _rng_streams(sc.seed, 6)
    dt_ns = int(round(1e9 / sc.imu_rate))
    dt = dt_ns * 1e-9
    n_imu = int(round(sc.duration * sc.imu_rate)) + 1
    t = np.arange(n_imu) * dt
    imu_ts = T0_NS + np.arange(n_imu, dtype=np.int64) * dt_ns
    acc, omega, R0, v0 = design_motion(sc, t, rng_motion)
    R, p, v, f = integrate_truth(acc, omega, R0, v0, dt, sc.gravity)

    ba = np.asarray(sc.accel_bias, dtype=float)
    bg = np.asarray(sc.gyro_bias, dtype=float)
    gyro = omega + bg
    accel = f + ba
    if sc.imu_noise:
        gyro = gyro + rng_imu.normal(scale=sc.noise.gyro_noise / math.sqrt(dt), size=gyro.shape)
        accel = accel + rng_imu.normal(scale=sc.noise.accel_noise / math.sqrt(dt), size=accel.shape)
    imu = ImuData(imu_ts, gyro, accel)
    traj = Trajectory(imu_ts, p, matrix_to_quat(R), v, np.tile(ba, (n_imu, 1)), np.tile(bg, (n_imu, 1)))

    step = int(round(sc.imu_rate / sc.cam_rate))
    frame_idx = np.arange(0, n_imu - 1, step)
    n_frames = len(frame_idx)
    frame_ts = imu_ts[frame_idx]
    cam = sc.camera
    ext = sc.extrinsics

    # landmarks: spawned inside each frame's frustum
    lo, hi = sc.depth_range
    pts = []
    margin = 10.0
    for m in frame_idx:
        k = sc.landmarks_per_frame
        px = np.stack(
            [rng_land.uniform(margin, cam.width - 1 - margin, k), rng_land.uniform(margin, cam.height - 1 - margin, k)],
            axis=1,
        )
        z = rng_land.uniform(lo, hi, k)
        Xc = np.concatenate([cam.normalize(px), np.ones((k, 1))], axis=1) * z[:, None]
        Xi = Xc @ ext.R.T + ext.translation
        pts.append(Xi @ R[m].T + p[m])
    landmarks = np.concatenate(pts, axis=0)
    n_land = len(landmarks)
    n_out = int(math.floor(sc.outlier_fraction * n_land))
    outliers = frozenset(int(i) for i in rng_out.choice(n_land, size=n_out, replace=False)) if n_out else frozenset()

    a_base = rng_depth.uniform(0.8, 1.25) if sc.depth_scale is None else float(sc.depth_scale)
    b_base = rng_depth.uniform(-0.03, 0.03) if sc.depth_shift is None else float(sc.depth_shift)
    a_star = a_base * np.exp(sc.scale_jitter * rng_depth.normal(size=n_frames))
    b_star = b_base + sc.shift_jitter * rng_depth.normal(size=n_frames)
    shade = rng_depth.uniform(0.1, 0.9, n_land)

    ids, tts, pix = [], [], []
    depth_maps = {} if sc.with_depth else None
    images = {} if sc.with_images else None
    occluded = set()
    decoyed = set()
    for fi, m in enumerate(frame_idx):
        Xc = _camera_points(R[m], p[m], ext, landmarks)
        z = Xc[:, 2]
        front = z > 0.1
        uv = np.zeros((n_land, 2))
        uv[front] = cam.denormalize(Xc[front, :2] / z[front, None])
        cand = np.nonzero(front & cam.contains(uv))[0]

        # z-buffered splats; a landmark is tracked only where it is the visible surface
        zinv = np.full((cam.height, cam.width), 1.0 / BACKGROUND_DEPTH)
        hit = set()
        owner = np.full((cam.height, cam.width), -1, dtype=np.int64)
        gray = np.full((cam.height, cam.width), 0.5)
        centers = np.floor(uv[cand] + 0.5).astype(np.int64)
        for idx in np.argsort(-z[cand], kind="stable"):  # far to near, nearer splats win
            lid = cand[idx]
            c, r = centers[idx]
            r0, r1 = max(r - SPLAT_RADIUS, 0), min(r + SPLAT_RADIUS + 1, cam.height)
            c0, c1 = max(c - SPLAT_RADIUS, 0), min(c + SPLAT_RADIUS + 1, cam.width)
            value = 1.0 / z[lid]
            if lid in outliers and rng_out.random() < 0.5:
                value *= math.exp(rng_out.choice([-1.0, 1.0]) * rng_out.uniform(0.5, 1.2))
                hit.add(int(lid))
            zinv[r0:r1, c0:c1] = value
            owner[r0:r1, c0:c1] = lid
            gray[r0:r1, c0:c1] = shade[lid]
        vid = cand[owner[centers[:, 1], centers[:, 0]] == cand]
        obs = uv[vid]
        if sc.track_noise_px > 0:
            obs = obs + rng_track.normal(scale=sc.track_noise_px, size=obs.shape)
        ids.append(vid)
        tts.append(np.full(len(vid), frame_ts[fi], dtype=np.int64))
        pix.append(obs)
        if sc.with_depth:
            d = (zinv - b_star[fi]) / a_star[fi]
            if sc.depth_noise > 0:
                d = d + rng_depth.normal(scale=sc.depth_noise, size=d.shape)
            depth_maps[int(frame_ts[fi])] = DepthMap(d.astype(np.float32))
        if sc.with_images:
            images[int(frame_ts[fi])] = quantize_image(gray)
        decoyed.update((int(lid), int(frame_ts[fi])) for lid in vid if int(lid) in hit)
        for lid, px in zip(vid, obs):
            c = int(math.floor(px[0] + 0.5))
            r = int(math.floor(px[1] + 0.5))
            if 0 <= r < cam.height and 0 <= c < cam.width and owner[r, c] != lid:
                occluded.add((int(lid), int(frame_ts[fi])))

    calib = Calibration(cam, ext, sc.noise, sc.gravity, sc.cam_rate)
    dataset = Dataset(
        calib,
        imu,
        frame_ts,
        np.concatenate(ids),
        np.concatenate(tts),
        np.concatenate(pix, axis=0),
        depth_maps,
        images,
        traj,
    )
    return SimResult(sc, dataset, traj, acc, landmarks, outliers, frozenset(occluded), frozenset(decoyed), a_star, b_star)


def generate(scenario: Scenario, num_keyframes=5, start_index=0):
    """Window of ``num_keyframes`` keyframes and its ground truth."""
    seq = generate_sequence(scenario)
    return seq.window(start_index, num_keyframes), seq.truth(start_index, num_keyframes)


def preset(kind, seed=0, **overrides) -> Scenario:
    """Named configurations used by the experiments.

    ``noisy-hover``: low-motion window with 0.5 px tracks, EuRoC-like IMU
    noise and a seeded affine corruption of the depth maps.
    """
    if kind == "noisy-hover":
        base = dict(
            kind="hover",
            duration=0.6,
            imu_noise=True,
            track_noise_px=0.5,
            depth_scale=None,
            depth_shift=None,
            scale_jitter=0.01,
            shift_jitter=0.002,
            depth_noise=0.002,
        )
    elif kind in KINDS:
        base = dict(kind=kind)
    else:
        raise InvalidScenario(f"unknown preset {kind!r}")
    base.update(overrides)
    return Scenario(seed=seed, **base)
