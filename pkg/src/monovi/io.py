"""On-disk dataset layout, calibration/config files and window extraction.

Layout of a dataset directory::

    calibration.yaml
    imu.csv            timestamp_ns,gx,gy,gz,ax,ay,az
    frames.csv         timestamp_ns
    tracks.csv         feature_id,timestamp_ns,px,py
    depth/<ts>.pfm     relative inverse depth per frame (optional)
    images/<ts>.pgm    16-bit grayscale per frame (optional)
    groundtruth.csv    timestamp_ns,px,py,pz,qw,qx,qy,qz,vx,vy,vz,bax,bay,baz,bgx,bgy,bgz (optional)

Floats are written with 17 significant digits so reads are bit-exact.
"""
from __future__ import annotations

import csv
import os
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .errors import (
    CalibrationParseError,
    DatasetError,
    EmptySegment,
    MissingDepthMap,
    NonMonotonicTimestamps,
    WindowOutOfRange,
)
from .evaluation import Trajectory
from .geometry import PinholeCamera, Pose, UnitQuaternion
from .imu import ImuData, NoiseModel
from .monodepth import read_pfm, write_pfm
from .state import InitWindow, Observation, Track

FLOAT_FMT = "%.17g"


@dataclass(frozen=True)
class Calibration:
    camera: PinholeCamera
    extrinsics: Pose  # camera to IMU
    noise: NoiseModel = field(default_factory=NoiseModel)
    gravity_magnitude: float = 9.81
    camera_rate: float = 10.0

    def to_dict(self):
        c = self.camera
        n = self.noise
        return {
            "camera": {"fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy, "width": c.width, "height": c.height},
            "extrinsics": {
                "q_wxyz": [float(x) for x in self.extrinsics.rotation.as_array()],
                "p": [float(x) for x in self.extrinsics.translation],
            },
            "noise": {
                "gyro_noise": n.gyro_noise,
                "accel_noise": n.accel_noise,
                "gyro_walk": n.gyro_walk,
                "accel_walk": n.accel_walk,
            },
            "gravity_magnitude": float(self.gravity_magnitude),
            "camera_rate": float(self.camera_rate),
        }

    @classmethod
    def from_dict(cls, d):
        try:
            cam = d["camera"]
            camera = PinholeCamera(
                float(cam["fx"]), float(cam["fy"]), float(cam["cx"]), float(cam["cy"]), int(cam["width"]), int(cam["height"])
            )
            ext = d["extrinsics"]
            extrinsics = Pose(UnitQuaternion.from_array(np.asarray(ext["q_wxyz"], dtype=float)), np.asarray(ext["p"], dtype=float))
            noise = NoiseModel(**{k: float(v) for k, v in d.get("noise", {}).items()})
            return cls(
                camera,
                extrinsics,
                noise,
                float(d.get("gravity_magnitude", 9.81)),
                float(d.get("camera_rate", 10.0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise CalibrationParseError(f"bad calibration: {exc}") from exc


def write_calibration(path, calib: Calibration):
    with open(path, "w") as fh:
        yaml.safe_dump(calib.to_dict(), fh, sort_keys=False)


def read_calibration(path) -> Calibration:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except FileNotFoundError as exc:
        raise CalibrationParseError(f"missing calibration file {path}") from exc
    except yaml.YAMLError as exc:
        raise CalibrationParseError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise CalibrationParseError(f"{path}: expected a mapping")
    return Calibration.from_dict(data)


def load_config(path):
    """Flat YAML key/value file -> PipelineConfig."""
    from .pipeline import PipelineConfig

    try:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise DatasetError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise DatasetError(f"{path}: config must be a key/value mapping")
    try:
        return PipelineConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise DatasetError(f"{path}: {exc}") from exc


# --- images --------------------------------------------------------------


def write_pgm(path, image):
    """Values in [0, 1] stored as 16-bit big-endian PGM."""
    img = np.asarray(image, dtype=float)
    q = np.clip(np.rint(img * 65535.0), 0, 65535).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n65535\n".encode())
        fh.write(q.tobytes())


def read_pgm(path):
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        tokens.append(data[pos:end].decode("ascii"))
        pos = end
    pos += 1
    if tokens[0] != "P5":
        raise DatasetError(f"{path}: only binary PGM is supported")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    dtype = ">u2" if maxval > 255 else "u1"
    arr = np.frombuffer(data, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    return arr.astype(float) / maxval


def quantize_image(image):
    """The exact values a PGM round trip yields."""
    return np.clip(np.rint(np.asarray(image, dtype=float) * 65535.0), 0, 65535) / 65535.0


# --- dataset ---------------------------------------------------------------


class LazyFrames(Mapping):
    """Timestamp-keyed files read on first access."""

    def __init__(self, directory: Path, suffix: str, reader):
        self.directory = directory
        self.suffix = suffix
        self.reader = reader
        self._cache = {}
        self._keys = sorted(int(p.stem) for p in directory.glob(f"*{suffix}")) if directory.is_dir() else []
        self._keyset = set(self._keys)

    def __getitem__(self, ts):
        ts = int(ts)
        if ts not in self._keyset:
            raise KeyError(ts)
        if ts not in self._cache:
            self._cache[ts] = self.reader(self.directory / f"{ts}{self.suffix}")
        return self._cache[ts]

    def __iter__(self):
        return iter(self._keys)

    def __len__(self):
        return len(self._keys)


@dataclass(eq=False)
class Dataset:
    calibration: Calibration
    imu: ImuData
    frame_timestamps: np.ndarray  # int64 ns
    track_ids: np.ndarray  # int64, one row per observation
    track_ts: np.ndarray  # int64 ns
    track_px: np.ndarray  # (n, 2)
    depth_maps: Optional[Mapping] = None  # ts -> DepthMap
    images: Optional[Mapping] = None  # ts -> float image
    groundtruth: Optional[Trajectory] = None

    def __post_init__(self):
        self.frame_timestamps = np.asarray(self.frame_timestamps, dtype=np.int64)
        self.track_ids = np.asarray(self.track_ids, dtype=np.int64)
        self.track_ts = np.asarray(self.track_ts, dtype=np.int64)
        self.track_px = np.asarray(self.track_px, dtype=float).reshape(-1, 2)
        if np.any(np.diff(self.frame_timestamps) <= 0):
            raise NonMonotonicTimestamps("frame timestamps must be strictly increasing")
        if np.any(np.diff(self.imu.timestamps) <= 0):
            raise NonMonotonicTimestamps("IMU timestamps must be strictly increasing")

    @property
    def num_frames(self):
        return len(self.frame_timestamps)

    @property
    def span(self):
        """Dataset length in seconds as counted in camera frames."""
        return self.num_frames / self.calibration.camera_rate

    def frame_index(self, ts):
        idx = int(np.searchsorted(self.frame_timestamps, ts))
        if idx >= self.num_frames:
            raise WindowOutOfRange(f"no frame at or after {ts}")
        return idx

    def window(self, start_index: int, count: int, use_depth=True, use_images=True) -> InitWindow:
        """``count`` consecutive frames as keyframes starting at ``start_index``."""
        if count < 2:
            raise ValueError("a window needs at least two keyframes")
        if start_index < 0 or start_index + count > self.num_frames:
            raise WindowOutOfRange(
                f"frames [{start_index}, {start_index + count}) exceed the {self.num_frames} available"
            )
        ts = self.frame_timestamps[start_index : start_index + count]
        try:
            segments = [self.imu.slice_time(int(ts[k]), int(ts[k + 1])) for k in range(count - 1)]
        except EmptySegment as exc:
            raise WindowOutOfRange(str(exc)) from exc
        interval = int(round(1e9 / self.calibration.camera_rate))
        tail_end = min(int(ts[-1]) + interval, int(self.imu.timestamps[-1]))
        trailing = None
        if tail_end > ts[-1]:
            trailing = self.imu.slice_time(int(ts[-1]), tail_end)

        depth_list = None
        if use_depth and self.depth_maps is not None:
            missing = [int(t) for t in ts if int(t) not in self.depth_maps]
            if missing:
                raise MissingDepthMap(f"no depth map for frames {missing}")
            depth_list = [self.depth_maps[int(t)] for t in ts]
        elif use_depth:
            raise MissingDepthMap("dataset has no depth maps")
        image_list = None
        if use_images and self.images is not None and all(int(t) in self.images for t in ts):
            image_list = [self.images[int(t)] for t in ts]

        kf_of = {int(t): k for k, t in enumerate(ts)}
        sel = np.isin(self.track_ts, ts)
        by_feature = {}
        for fid, t, px in zip(self.track_ids[sel], self.track_ts[sel], self.track_px[sel]):
            k = kf_of[int(t)]
            pixel = (float(px[0]), float(px[1]))
            d = None
            if depth_list is not None:
                try:
                    d = depth_list[k].sample(pixel)
                except IndexError:
                    d = None
            by_feature.setdefault(int(fid), []).append(Observation(k, pixel, d))
        tracks = [
            Track(fid, tuple(sorted(obs, key=lambda o: o.keyframe))) for fid, obs in sorted(by_feature.items())
        ]
        return InitWindow(
            timestamps=[int(t) for t in ts],
            imu_segments=segments,
            tracks=tracks,
            camera=self.calibration.camera,
            extrinsics=self.calibration.extrinsics,
            noise=self.calibration.noise,
            gravity_magnitude=self.calibration.gravity_magnitude,
            depth_maps=depth_list,
            images=image_list,
            trailing_imu=trailing,
            camera_rate=self.calibration.camera_rate,
            meta={"start_index": int(start_index)},
        )

    def window_at(self, start_ts, count, use_depth=True):
        idx = 0 if start_ts is None else self.frame_index(int(start_ts))
        return self.window(idx, count, use_depth=use_depth)


def _write_rows(path, header, columns):
    """Integer columns verbatim, float columns at full precision."""
    n = len(columns[0])
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        parts = []
        for col in columns:
            col = np.asarray(col)
            if col.dtype.kind in "iu":
                parts.append([str(int(x)) for x in col])
            else:
                parts.append([FLOAT_FMT % x for x in col])
        for i in range(n):
            fh.write(",".join(p[i] for p in parts) + "\n")


def _read_rows(path, int_cols):
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"missing file {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        rows = [r for r in reader if r]
    if header is None:
        raise DatasetError(f"{path} is empty")
    ncol = len(header)
    out = []
    for c in range(ncol):
        try:
            if c in int_cols:
                out.append(np.array([int(r[c]) for r in rows], dtype=np.int64))
            else:
                out.append(np.array([float(r[c]) for r in rows], dtype=float))
        except (ValueError, IndexError) as exc:
            raise DatasetError(f"{path}: malformed row ({exc})") from exc
    return out


def write_trajectory(path, traj: Trajectory):
    header = ["timestamp_ns", "px", "py", "pz", "qw", "qx", "qy", "qz", "vx", "vy", "vz"]
    header += ["bax", "bay", "baz", "bgx", "bgy", "bgz"]
    cols = [traj.timestamps] + [traj.p[:, i] for i in range(3)] + [traj.q[:, i] for i in range(4)]
    cols += [traj.v[:, i] for i in range(3)] + [traj.ba[:, i] for i in range(3)] + [traj.bg[:, i] for i in range(3)]
    _write_rows(path, header, cols)


def read_trajectory(path) -> Trajectory:
    cols = _read_rows(path, {0})
    if len(cols) < 17:
        raise DatasetError(f"{path}: expected 17 trajectory columns")
    return Trajectory(
        cols[0],
        np.stack(cols[1:4], axis=1),
        np.stack(cols[4:8], axis=1),
        np.stack(cols[8:11], axis=1),
        np.stack(cols[11:14], axis=1),
        np.stack(cols[14:17], axis=1),
    )


def write_dataset(dataset: Dataset, root):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    write_calibration(root / "calibration.yaml", dataset.calibration)
    imu = dataset.imu
    _write_rows(
        root / "imu.csv",
        ["timestamp_ns", "gx", "gy", "gz", "ax", "ay", "az"],
        [imu.timestamps] + [imu.gyro[:, i] for i in range(3)] + [imu.accel[:, i] for i in range(3)],
    )
    _write_rows(root / "frames.csv", ["timestamp_ns"], [dataset.frame_timestamps])
    _write_rows(
        root / "tracks.csv",
        ["feature_id", "timestamp_ns", "px", "py"],
        [dataset.track_ids, dataset.track_ts, dataset.track_px[:, 0], dataset.track_px[:, 1]],
    )
    if dataset.depth_maps is not None:
        (root / "depth").mkdir(exist_ok=True)
        for ts in dataset.depth_maps:
            write_pfm(root / "depth" / f"{int(ts)}.pfm", dataset.depth_maps[ts])
    if dataset.images is not None:
        (root / "images").mkdir(exist_ok=True)
        for ts in dataset.images:
            write_pgm(root / "images" / f"{int(ts)}.pgm", dataset.images[ts])
    if dataset.groundtruth is not None:
        write_trajectory(root / "groundtruth.csv", dataset.groundtruth)


def read_dataset(root) -> Dataset:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"{root} is not a directory")
    calib = read_calibration(root / "calibration.yaml")
    ts, gx, gy, gz, ax, ay, az = _read_rows(root / "imu.csv", {0})
    imu = ImuData(ts, np.stack([gx, gy, gz], axis=1), np.stack([ax, ay, az], axis=1))
    (frames,) = _read_rows(root / "frames.csv", {0})
    fid, tts, px, py = _read_rows(root / "tracks.csv", {0, 1})
    depth = LazyFrames(root / "depth", ".pfm", read_pfm) if (root / "depth").is_dir() else None
    images = LazyFrames(root / "images", ".pgm", read_pgm) if (root / "images").is_dir() else None
    gt = read_trajectory(root / "groundtruth.csv") if (root / "groundtruth.csv").exists() else None
    return Dataset(calib, imu, frames, fid, tts, np.stack([px, py], axis=1), depth, images, gt)


def load_window(root, start_ts=None, kf_count=5, use_depth=True) -> InitWindow:
    """Window of ``kf_count`` keyframes beginning at the first frame ``>= start_ts``."""
    return read_dataset(root).window_at(start_ts, kf_count, use_depth=use_depth)


def window_starts(dataset: Dataset, stride_s: float):
    """Frame indices of evenly spaced attempts; ``floor(span / stride)`` of them."""
    count = int(np.floor(dataset.span / stride_s + 1e-9))
    rate = dataset.calibration.camera_rate
    return [int(round(i * stride_s * rate)) for i in range(count)]


def ensure_parent(path):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
