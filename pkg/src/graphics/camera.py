"""
Pinhole camera rig mounted on the ego vehicle.

Frames: the ego frame is x forward, y left, z up; a camera frame is
x right, y down, z along the optical axis. Pixel (u, v) has its centre at
(u + 0.5, v + 0.5) in image coordinates.
"""

import logging
import math

import numpy as np

from ..core.errors import ConfigurationError

logger = logging.getLogger(__name__)

WORLD_UP = np.array([0.0, 0.0, 1.0])


class Camera:
    """Intrinsics plus the camera-to-ego rigid transform of one camera."""

    def __init__(self, name, position, yaw_deg, pitch_deg, focal, image_size):
        self.name = name
        self.position = np.asarray(position, dtype=np.float64)
        self.yaw = float(yaw_deg)
        self.pitch = float(pitch_deg)
        self.focal = float(focal)
        self.image_size = tuple(image_size)
        self.front = self.forward_vector(self.yaw, self.pitch)
        self.ego_from_camera = self.look_at(self.position, self.position + self.front, WORLD_UP)
        self.intrinsics = self.intrinsic_matrix(self.focal, self.image_size)

    @classmethod
    def from_spec(cls, spec, image_size):
        return cls(spec.name, spec.position, spec.yaw_deg, spec.pitch_deg, spec.focal, image_size)

    @staticmethod
    def forward_vector(yaw_deg, pitch_deg):
        yaw, pitch = math.radians(yaw_deg), math.radians(pitch_deg)
        return np.array([math.cos(yaw) * math.cos(pitch), math.sin(yaw) * math.cos(pitch), math.sin(pitch)])

    @staticmethod
    def intrinsic_matrix(focal, image_size):
        height, width = image_size
        return np.array([[focal, 0.0, width / 2.0],
                         [0.0, focal, height / 2.0],
                         [0.0, 0.0, 1.0]])

    @staticmethod
    def normalize(vector):
        norm = np.linalg.norm(vector)
        if norm == 0:
            return vector
        return vector / norm

    @staticmethod
    def look_at(position, target, up):
        """4x4 ego-from-camera transform for a camera at `position` facing `target`."""
        forward = Camera.normalize(np.asarray(target, dtype=np.float64) - position)
        right = Camera.normalize(np.cross(forward, up))
        if not np.any(right):
            raise ConfigurationError("camera optical axis is parallel to the up vector")
        down = np.cross(forward, right)
        transform = np.eye(4)
        transform[:3, 0] = right
        transform[:3, 1] = down
        transform[:3, 2] = forward
        transform[:3, 3] = position
        return transform

    @property
    def camera_from_ego(self):
        return invert_rigid(self.ego_from_camera)

    def pixel_rays(self, height=None, width=None, stride=1):
        """Ego-frame ray directions through pixel centres, scaled so camera-frame z == 1.

        With `stride` > 1 the rays go through the centres of stride x stride patches.
        """
        height = height or self.image_size[0] // stride
        width = width or self.image_size[1] // stride
        v, u = np.meshgrid((np.arange(height) + 0.5) * stride, (np.arange(width) + 0.5) * stride, indexing="ij")
        pixels = np.stack([u, v, np.ones_like(u)], axis=-1)
        directions = pixels @ np.linalg.inv(self.intrinsics).T
        return directions @ self.ego_from_camera[:3, :3].T

    def project(self, points_ego):
        """Ego points [..., 3] -> (u, v, depth) image coordinates."""
        camera = transform_points(self.camera_from_ego, points_ego)
        depth = camera[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = (camera @ self.intrinsics.T)[..., :2] / depth[..., None]
        return uv[..., 0], uv[..., 1], depth

    def unproject(self, u, v, depth):
        """Image coordinates and optical-axis depth -> ego points [..., 3]."""
        return unproject(self.intrinsics, self.ego_from_camera, u, v, depth)


def check_intrinsics(intrinsics):
    intrinsics = np.asarray(intrinsics, dtype=np.float64)
    if intrinsics.shape != (3, 3) or abs(np.linalg.det(intrinsics)) < 1e-12:
        raise ConfigurationError(f"intrinsics are singular or malformed: {intrinsics.tolist()}")
    return intrinsics


def unproject(intrinsics, ego_from_camera, u, v, depth):
    intrinsics = check_intrinsics(intrinsics)
    u, v, depth = np.broadcast_arrays(np.asarray(u, float), np.asarray(v, float), np.asarray(depth, float))
    pixels = np.stack([u * depth, v * depth, depth], axis=-1)
    camera = pixels @ np.linalg.inv(intrinsics).T
    return transform_points(ego_from_camera, camera)


def transform_points(transform, points):
    points = np.asarray(points, dtype=np.float64)
    return points @ transform[:3, :3].T + transform[:3, 3]


def invert_rigid(transform):
    inverse = np.eye(4)
    rotation = transform[:3, :3]
    inverse[:3, :3] = rotation.T
    inverse[:3, 3] = -rotation.T @ transform[:3, 3]
    return inverse


def translation(offset):
    transform = np.eye(4)
    transform[:3, 3] = offset
    return transform


def build_rig(scene_config):
    """Camera objects for every CameraSpec of a scene config."""
    return [Camera.from_spec(spec, scene_config.image_size) for spec in scene_config.cameras]
