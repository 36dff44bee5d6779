"""
Ego vehicle carrying the camera rig
"""

import numpy as np

from ..graphics.camera import build_rig, translation


class EgoVehicle:
    """Moves along its x axis at constant speed; the pose at the current time is the identity."""

    def __init__(self, scene_config, speed=0.0):
        self.speed = float(speed)
        self.velocity = np.array([self.speed, 0.0, 0.0])
        self.cameras = build_rig(scene_config)

    def pose_at(self, time):
        """World-from-ego rigid transform `time` seconds from the current frame."""
        return translation(self.velocity * time)

    @property
    def num_cameras(self):
        return len(self.cameras)

    def intrinsics(self):
        return np.stack([camera.intrinsics for camera in self.cameras])

    def extrinsics(self):
        """Camera-to-ego transforms, [M, 4, 4]."""
        return np.stack([camera.ego_from_camera for camera in self.cameras])
