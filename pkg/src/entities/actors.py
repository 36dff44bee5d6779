"""
Semantic scene actors: axis-aligned boxes with constant velocity
"""

import numpy as np


class SceneObject:
    """A semantic box in the world frame; `center` is its position at the current time."""

    def __init__(self, class_id, center, size, velocity=(0.0, 0.0, 0.0), dynamic=None):
        self.class_id = int(class_id)
        self.center = np.asarray(center, dtype=np.float64)
        self.size = np.asarray(size, dtype=np.float64)
        self.velocity = np.asarray(velocity, dtype=np.float64)
        self.dynamic = bool(np.any(self.velocity)) if dynamic is None else bool(dynamic)

    def center_at(self, time):
        """Centre `time` seconds from the current frame (negative = past)."""
        return self.center + self.velocity * time

    def box_at(self, time):
        center = self.center_at(time)
        half = self.size / 2.0
        return center - half, center + half

    def overlaps(self, other, margin=0.0):
        """Footprint overlap test at the current time, padded by `margin`."""
        gap = np.abs(self.center - other.center)[:2] - (self.size + other.size)[:2] / 2.0
        return bool(np.all(gap < margin))

    def to_dict(self):
        return {
            "class_id": self.class_id,
            "center": self.center.tolist(),
            "size": self.size.tolist(),
            "velocity": self.velocity.tolist(),
            "dynamic": self.dynamic,
        }

    @classmethod
    def from_dict(cls, record):
        return cls(record["class_id"], record["center"], record["size"], record["velocity"], record.get("dynamic"))

    def __repr__(self):
        return (f"SceneObject(class_id={self.class_id}, center={self.center.tolist()}, "
                f"size={self.size.tolist()}, velocity={self.velocity.tolist()})")
