"""Ego-motion estimation with point-to-point ICP."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .cloud import RigidTransform, TimedPointCloud, as_points
from .spatial import SpatialIndex

logger = logging.getLogger(__name__)


class DegenerateGeometryError(ValueError):
    pass


class RegistrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class IcpConfig:
    max_iterations: int = 50
    convergence_tol: float = 1e-5
    max_correspondence_dist: float = 1.0

    def __post_init__(self):
        if self.max_iterations <= 0 or self.convergence_tol <= 0 or self.max_correspondence_dist <= 0:
            raise ValueError("IcpConfig fields must be positive")


def kabsch(source_pts, target_pts) -> RigidTransform:
    """Least-squares rigid transform mapping ``source_pts`` onto ``target_pts``.

    Centroid subtraction followed by the SVD solution of the orthogonal
    Procrustes problem, with a determinant fix so reflections never come out.
    """
    src = as_points(source_pts)
    dst = as_points(target_pts)
    if len(src) == 0 or src.shape != dst.shape:
        raise ValueError("point lists must be non-empty and of equal length")
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    a = src - cs
    b = dst - cd
    sv = np.linalg.svd(a, compute_uv=False)
    scale = max(sv[0], np.abs(src).max(), 1.0)
    # rotation is only determined up to a spin about the line for collinear input
    if len(sv) < 2 or sv[1] <= 1e-12 * scale:
        raise DegenerateGeometryError("source points are coincident or collinear")
    u, _, vt = np.linalg.svd(a.T @ b)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    if d == 0:
        d = 1.0
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    # re-orthonormalise away the last few ulps so the invariant check holds exactly
    uu, _, vv = np.linalg.svd(rot)
    rot = uu @ vv
    return RigidTransform(rot, cd - rot @ cs)


def apply_transform(cloud: TimedPointCloud, t: RigidTransform) -> TimedPointCloud:
    """Move every point by ``t``; annotations (including gt flow) are carried unchanged."""
    return cloud.with_points(t.apply(cloud.points))


def icp(source: TimedPointCloud, target: TimedPointCloud, config: IcpConfig = IcpConfig(),
        trace: list | None = None):
    """Align ``source`` to ``target``.

    Returns ``(transform, residual)`` where ``residual`` is the mean distance of
    the inlier correspondences under the returned transform. When ``trace`` is
    given, the mean inlier distance of every iteration is appended to it.
    """
    src = source.points if isinstance(source, TimedPointCloud) else as_points(source)
    dst = target.points if isinstance(target, TimedPointCloud) else as_points(target)
    if len(src) == 0 or len(dst) == 0:
        raise ValueError("icp needs non-empty clouds")
    index = SpatialIndex(dst)
    transform = RigidTransform.identity()
    prev = np.inf

    def correspond(t):
        nn, d = index.nearest_many(t.apply(src))
        inl = d <= config.max_correspondence_dist
        if not inl.any():
            raise RegistrationError(
                f"no correspondences within {config.max_correspondence_dist} m")
        return nn, d, inl

    for it in range(config.max_iterations):
        nn, d, inl = correspond(transform)
        err = float(d[inl].mean())
        if trace is not None:
            trace.append(err)
        if abs(prev - err) < config.convergence_tol:
            logger.debug("icp converged after %d iterations, residual %.3g", it + 1, err)
            return transform, err
        prev = err
        transform = kabsch(src[inl], dst[nn[inl]])
    nn, d, inl = correspond(transform)
    err = float(d[inl].mean())
    if trace is not None:
        trace.append(err)
    logger.debug("icp hit max_iterations, residual %.3g", err)
    return transform, err
