from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics in pixels.

    Pixel ``(u, v)`` addresses column ``u`` and row ``v``; the ray for a pixel
    passes through its integer coordinate, so ``(cx, cy)`` is the principal ray.
    """

    fx: float = 600.0
    fy: float = 600.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def from_K(cls, K, width: int, height: int) -> "CameraModel":
        K = np.asarray(K, dtype=np.float64)
        return cls(float(K[0, 0]), float(K[1, 1]), float(K[0, 2]), float(K[1, 2]), int(width), int(height))

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def pixel_grid(self) -> tuple[np.ndarray, np.ndarray]:
        v, u = np.mgrid[0 : self.height, 0 : self.width]
        return u.astype(np.float64), v.astype(np.float64)

    def rays(self, u, v) -> np.ndarray:
        """Camera-frame ray directions with unit z component, so ray parameter = z-depth."""
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)

    def unproject(self, u, v, depth) -> np.ndarray:
        return self.rays(u, v) * np.asarray(depth, dtype=np.float64)[..., None]

    def project(self, points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Camera-frame points -> (u, v, z). Points with z <= 0 get NaN pixels."""
        p = np.asarray(points, dtype=np.float64)
        z = p[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            safe = np.where(z > 0, z, np.nan)
            u = self.fx * p[..., 0] / safe + self.cx
            v = self.fy * p[..., 1] / safe + self.cy
        return u, v, z

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        if "K" in d:
            return cls.from_K(d["K"], d["width"], d["height"])
        return cls(**{k: d[k] for k in ("fx", "fy", "cx", "cy", "width", "height") if k in d})
