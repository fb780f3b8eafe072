"""Altitude-difference imaging: LiDAR (or depth) geometry to a 2-D raster.

The pipeline is project -> neighborhood height differences -> min/max
normalize to 8 bits. All stages are plain numpy (no gradients needed);
heights are taken in the rectified camera frame, negated so up is positive.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

__all__ = [
    "PointCloud",
    "Calibration",
    "ProjectedPoints",
    "AltitudeField",
    "AltitudeDifferenceImage",
    "AdiConfig",
    "project_points",
    "altitude_difference",
    "normalize_adi",
    "replicate_channels",
    "cloud_to_adi",
    "depth_to_adi",
    "load_velodyne",
    "load_calibration",
    "write_adi_png",
    "read_adi_png",
    "dilate_adi",
]

DEFAULT_NEIGHBORHOOD = 11


@dataclass
class PointCloud:
    """LiDAR returns in the sensor frame; reflectance is carried but unused."""

    points: np.ndarray  # [N, 3] float
    reflectance: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(self.points).all():
            raise ValueError("point cloud contains non-finite coordinates")

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class Calibration:
    """Camera projection (3x4) plus the 4x4 sensor-to-camera transform."""

    projection: np.ndarray          # K, 3x4
    velo_to_cam: np.ndarray         # [R|t] as 4x4
    rectification: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        self.projection = np.asarray(self.projection, dtype=np.float64).reshape(3, 4)
        self.velo_to_cam = np.asarray(self.velo_to_cam, dtype=np.float64).reshape(4, 4)
        self.rectification = np.asarray(self.rectification, dtype=np.float64).reshape(4, 4)
        R = self.velo_to_cam[:3, :3]
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-5:
            raise ValueError("extrinsic rotation block is not orthonormal (tolerance 1e-5)")
        if self.projection[0, 0] <= 0 or self.projection[1, 1] <= 0:
            raise ValueError("projection matrix must have positive focal terms")


@dataclass
class ProjectedPoints:
    """Per-pixel height of the nearest projected point, dense with a mask."""

    height: np.ndarray  # [H, W] float64
    valid: np.ndarray   # [H, W] bool

    @property
    def extents(self) -> tuple[int, int]:
        return self.height.shape


@dataclass
class AltitudeField:
    """Pre-normalization neighborhood height differences."""

    values: np.ndarray  # [H, W] float64, 0 where invalid
    valid: np.ndarray   # [H, W] bool


@dataclass
class AltitudeDifferenceImage:
    values: np.ndarray        # [H, W] uint8, 0 where invalid
    valid: np.ndarray         # [H, W] bool
    neighborhood: int

    @property
    def extents(self) -> tuple[int, int]:
        return self.values.shape


@dataclass
class AdiConfig:
    neighborhood: int = DEFAULT_NEIGHBORHOOD
    dilate: int = 0   # visualization-only max-pool dilation radius


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def project_points(cloud: PointCloud, calib: Calibration, extents: tuple[int, int]) -> ProjectedPoints:
    """Project onto the image plane, keeping the nearest height per pixel.

    Points behind the camera or outside the raster are dropped. Among points
    landing on one pixel the smaller camera depth wins; exact depth ties go
    to the larger height, so the result is independent of point order.
    """
    H, W = int(extents[0]), int(extents[1])
    height = np.zeros((H, W), dtype=np.float64)
    valid = np.zeros((H, W), dtype=bool)
    if len(cloud) == 0:
        return ProjectedPoints(height, valid)

    pts = np.concatenate([cloud.points, np.ones((len(cloud), 1))], axis=1)  # [N,4]
    cam = (calib.rectification @ calib.velo_to_cam @ pts.T)  # [4,N]
    img = calib.projection @ cam  # [3,N]
    depth = img[2]
    keep = depth > 1e-9
    u = np.where(keep, img[0] / np.where(keep, depth, 1.0), -1.0)
    v = np.where(keep, img[1] / np.where(keep, depth, 1.0), -1.0)
    ui = _round_half_away(u).astype(np.int64)
    vi = _round_half_away(v).astype(np.int64)
    keep &= (ui >= 0) & (ui < W) & (vi >= 0) & (vi < H)
    if not keep.any():
        return ProjectedPoints(height, valid)

    ui, vi = ui[keep], vi[keep]
    z = -cam[1, keep]          # camera y points down; negate for height
    d = depth[keep]
    order = np.lexsort((z, -d))  # write far-to-near; final value = nearest (height-tiebreak)
    ui, vi, z = ui[order], vi[order], z[order]
    height[vi, ui] = z
    valid[vi, ui] = True
    return ProjectedPoints(height, valid)


def altitude_difference(proj: ProjectedPoints, neighborhood: int = DEFAULT_NEIGHBORHOOD) -> AltitudeField:
    """Distance-weighted mean |height difference| over the K x K window.

    The window excludes its center; pixels whose window holds no other valid
    point are marked invalid.
    """
    k = int(neighborhood)
    if k < 3 or k % 2 == 0:
        raise ValueError(f"neighborhood size must be odd and >= 3, got {k}")
    H, W = proj.height.shape
    r = k // 2
    hpad = np.zeros((H + 2 * r, W + 2 * r), dtype=np.float64)
    vpad = np.zeros((H + 2 * r, W + 2 * r), dtype=bool)
    hpad[r : r + H, r : r + W] = proj.height
    vpad[r : r + H, r : r + W] = proj.valid

    acc = np.zeros((H, W), dtype=np.float64)
    count = np.zeros((H, W), dtype=np.int64)
    for dv in range(-r, r + 1):
        for du in range(-r, r + 1):
            if dv == 0 and du == 0:
                continue
            nh = hpad[r + dv : r + dv + H, r + du : r + du + W]
            nv = vpad[r + dv : r + dv + H, r + du : r + du + W]
            pair = proj.valid & nv
            dist = np.sqrt(float(du * du + dv * dv))
            acc += np.where(pair, np.abs(proj.height - nh), 0.0) / dist
            count += pair

    valid = proj.valid & (count > 0)
    values = np.where(valid, acc / np.maximum(count, 1), 0.0)
    return AltitudeField(values, valid)


def normalize_adi(field: AltitudeField, neighborhood: int = DEFAULT_NEIGHBORHOOD) -> AltitudeDifferenceImage:
    """Affine map of the valid values onto [0, 255], rounding half up.

    A constant field (or an empty one) maps to all zeros.
    """
    out = np.zeros(field.values.shape, dtype=np.uint8)
    if field.valid.any():
        vals = field.values[field.valid]
        vmin, vmax = vals.min(), vals.max()
        if vmax > vmin:
            scaled = (field.values - vmin) / (vmax - vmin) * 255.0
            out[field.valid] = np.floor(scaled[field.valid] + 0.5).astype(np.uint8)
    return AltitudeDifferenceImage(out, field.valid.copy(), neighborhood)


def replicate_channels(adi: AltitudeDifferenceImage) -> "Tensor":
    """Three identical channels in [0, 1] as a [1, 3, H, W] float32 tensor.

    Per-channel mean/std normalization (shared with the RGB stream) is applied
    by the data pipeline, after this call, so the channels here stay equal.
    """
    from .tensor import Tensor

    plane = adi.values.astype(np.float32) / 255.0
    return Tensor(np.repeat(plane[None, None], 3, axis=1))


def cloud_to_adi(cloud: PointCloud, calib: Calibration, extents: tuple[int, int],
                 config: AdiConfig | None = None) -> AltitudeDifferenceImage:
    config = config or AdiConfig()
    proj = project_points(cloud, calib, extents)
    field = altitude_difference(proj, config.neighborhood)
    adi = normalize_adi(field, config.neighborhood)
    if config.dilate > 0:
        adi = dilate_adi(adi, config.dilate)
    return adi


def depth_to_adi(depth: np.ndarray, intrinsics: np.ndarray,
                 config: AdiConfig | None = None,
                 valid: Optional[np.ndarray] = None) -> AltitudeDifferenceImage:
    """ADI from a dense depth map: back-project every valid pixel, then the
    same neighborhood-difference and normalization stages.

    ``intrinsics`` is the 3x3 pinhole matrix of the depth camera (fx, fy,
    cx, cy); depth is in meters along the optical axis, camera y down.
    """
    config = config or AdiConfig()
    depth = np.asarray(depth, dtype=np.float64)
    K = np.asarray(intrinsics, dtype=np.float64).reshape(3, 3)
    ok = np.isfinite(depth) & (depth > 0)
    if valid is not None:
        ok &= np.asarray(valid, dtype=bool)
    H, W = depth.shape
    vs, us = np.mgrid[0:H, 0:W]
    y = (vs - K[1, 2]) * depth / K[1, 1]
    height = np.where(ok, -y, 0.0)
    proj = ProjectedPoints(height, ok)
    field = altitude_difference(proj, config.neighborhood)
    adi = normalize_adi(field, config.neighborhood)
    if config.dilate > 0:
        adi = dilate_adi(adi, config.dilate)
    return adi


def dilate_adi(adi: AltitudeDifferenceImage, radius: int) -> AltitudeDifferenceImage:
    """Max-pool dilation for visualization of sparse rasters only."""
    H, W = adi.values.shape
    out = adi.values.copy()
    mask = adi.valid.copy()
    for dv in range(-radius, radius + 1):
        for du in range(-radius, radius + 1):
            if dv == 0 and du == 0:
                continue
            src_v = slice(max(0, -dv), min(H, H - dv))
            src_u = slice(max(0, -du), min(W, W - du))
            dst_v = slice(max(0, dv), min(H, H + dv))
            dst_u = slice(max(0, du), min(W, W + du))
            shifted = np.zeros_like(adi.values)
            shifted[dst_v, dst_u] = adi.values[src_v, src_u]
            shifted_mask = np.zeros_like(adi.valid)
            shifted_mask[dst_v, dst_u] = adi.valid[src_v, src_u]
            out = np.maximum(out, np.where(shifted_mask, shifted, 0))
            mask |= shifted_mask
    return AltitudeDifferenceImage(out, mask, adi.neighborhood)


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------


def load_velodyne(path: str | Path) -> PointCloud:
    """Little-endian float32 quadruplets (x, y, z, reflectance)."""
    raw = np.fromfile(str(path), dtype="<f4")
    if raw.size % 4:
        raise ValueError(f"velodyne file {path} has {raw.size} floats, not a multiple of 4")
    pts = raw.reshape(-1, 4)
    return PointCloud(pts[:, :3].astype(np.float64), pts[:, 3].copy())


def load_calibration(path: str | Path) -> Calibration:
    """Whitespace-separated `P2:` / `R0_rect:` / `Tr_velo_to_cam:` rows."""
    rows: dict[str, np.ndarray] = {}
    for line in Path(path).read_text().splitlines():
        if ":" not in line:
            continue
        key, body = line.split(":", 1)
        body = body.strip()
        if body:
            rows[key.strip()] = np.array([float(tok) for tok in body.split()])
    missing = [k for k in ("P2", "Tr_velo_to_cam") if k not in rows]
    if missing:
        raise ValueError(f"calibration file {path} is missing rows: {', '.join(missing)}")
    P2 = rows["P2"].reshape(3, 4)
    tr = np.eye(4)
    tr[:3, :4] = rows["Tr_velo_to_cam"].reshape(3, 4)
    rect = np.eye(4)
    if "R0_rect" in rows:
        rect[:3, :3] = rows["R0_rect"].reshape(3, 3)
    return Calibration(P2, tr, rect)


def write_adi_png(adi: AltitudeDifferenceImage, path: str | Path) -> None:
    Image.fromarray(adi.values, mode="L").save(str(path))


def read_adi_png(path: str | Path, neighborhood: int = DEFAULT_NEIGHBORHOOD) -> AltitudeDifferenceImage:
    values = np.asarray(Image.open(str(path)).convert("L"), dtype=np.uint8)
    return AltitudeDifferenceImage(values, values > 0, neighborhood)
