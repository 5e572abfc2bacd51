"""Deterministic synthetic LiDAR-like scenes with exact ground-truth flow."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .cloud import RigidTransform, TimedPointCloud

BACKGROUND, VEHICLE, PEDESTRIAN = 0, 1, 2
SHAPES = ("box", "cylinder", "wall")


@dataclass(frozen=True)
class ObjectSpec:
    """One rigid object.

    ``pose`` places the object-local shape (centred at the origin) in the
    world at frame 0. ``motion`` is applied once per frame in world axes about
    the object's current centre: rotate about the centre, then translate.
    ``occlusion`` removes points whose local coordinate ``axis`` lies in
    ``[lo, hi]`` in the frames listed by ``occluded_frames`` (all if None).
    A ``wall`` is sampled on its one large face that looks towards the
    sensor origin at frame 0, as a scanner would see it. ``foreground``
    defaults to True for every shape but walls.
    """

    shape: str
    size: Tuple[float, float, float]
    pose: RigidTransform = field(default_factory=RigidTransform.identity)
    motion: RigidTransform = field(default_factory=RigidTransform.identity)
    points_per_object: int = 100
    class_id: int = VEHICLE
    occlusion: Optional[Tuple[int, float, float]] = None
    occluded_frames: Optional[Tuple[int, ...]] = None
    foreground: Optional[bool] = None

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.points_per_object <= 0 or min(self.size) <= 0:
            raise ValueError("sizes and point counts must be positive")

    @property
    def is_foreground(self) -> bool:
        return self.shape != "wall" if self.foreground is None else self.foreground


@dataclass(frozen=True)
class SceneSpec:
    objects: Sequence[ObjectSpec]
    num_frames: int = 5
    ego_motion: RigidTransform = field(default_factory=RigidTransform.identity)
    noise_sigma: float = 0.0
    rng_seed: int = 0
    # draw fresh surface samples every frame, as a scanner does, instead of tracking fixed points
    resample: bool = False

    def __post_init__(self):
        if self.num_frames <= 0 or not self.objects:
            raise ValueError("need at least one object and one frame")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")


def _sample_box(rng, size, n):
    sx, sy, sz = size
    # faces as (fixed axis, sign, area)
    faces = [(0, s, sy * sz) for s in (-1, 1)] + [(1, s, sx * sz) for s in (-1, 1)] + \
            [(2, s, sx * sy) for s in (-1, 1)]
    areas = np.array([a for _, _, a in faces])
    counts = rng.multinomial(n, areas / areas.sum())
    half = np.asarray(size) / 2.0
    out = []
    for (axis, sign, _), c in zip(faces, counts):
        pts = rng.uniform(-half, half, size=(c, 3))
        pts[:, axis] = sign * half[axis]
        out.append(pts)
    return np.concatenate(out)


def _sample_cylinder(rng, size, n):
    radius = size[0] / 2.0
    height = size[2]
    areas = np.array([2 * np.pi * radius * height, np.pi * radius ** 2, np.pi * radius ** 2])
    c_side, c_top, c_bot = rng.multinomial(n, areas / areas.sum())
    ang = rng.uniform(0, 2 * np.pi, c_side)
    side = np.stack([radius * np.cos(ang), radius * np.sin(ang),
                     rng.uniform(-height / 2, height / 2, c_side)], axis=1)
    caps = []
    for c, z in ((c_top, height / 2), (c_bot, -height / 2)):
        r = radius * np.sqrt(rng.uniform(0, 1, c))
        a = rng.uniform(0, 2 * np.pi, c)
        caps.append(np.stack([r * np.cos(a), r * np.sin(a), np.full(c, z)], axis=1))
    return np.concatenate([side] + caps)


def _sample_wall(rng, obj):
    axis = int(np.argmin(obj.size))
    half = np.asarray(obj.size) / 2.0
    offset = np.zeros(3)
    offset[axis] = half[axis]
    # the face whose centre is nearer the sensor at frame 0
    near, far = np.linalg.norm(obj.pose.apply([offset, -offset]), axis=1)
    sign = 1.0 if near <= far else -1.0
    pts = rng.uniform(-half, half, size=(obj.points_per_object, 3))
    pts[:, axis] = sign * half[axis]
    return pts


def sample_surface(rng, obj: ObjectSpec) -> np.ndarray:
    """Object-local surface samples, uniform by area."""
    if obj.shape == "cylinder":
        return _sample_cylinder(rng, obj.size, obj.points_per_object)
    if obj.shape == "wall":
        return _sample_wall(rng, obj)
    return _sample_box(rng, obj.size, obj.points_per_object)


def object_poses(obj: ObjectSpec, num_poses: int) -> List[RigidTransform]:
    poses = [obj.pose]
    r_m, t_m = obj.motion.rotation, obj.motion.translation
    for _ in range(num_poses - 1):
        prev = poses[-1]
        poses.append(RigidTransform(r_m @ prev.rotation, prev.translation + t_m))
    return poses


def _frame_samples(spec: SceneSpec):
    """Object-local surface samples of every frame, plus the generator used for noise.

    Frame 0 draws from ``rng_seed``; resampled frames draw from their own
    ``(rng_seed, frame)`` streams so any frame can be replayed alone.
    """
    rng = np.random.default_rng(spec.rng_seed)
    first = [sample_surface(rng, obj) for obj in spec.objects]
    samples = [first]
    for t in range(1, spec.num_frames):
        if spec.resample:
            frame_rng = np.random.default_rng([spec.rng_seed, t])
            samples.append([sample_surface(frame_rng, obj) for obj in spec.objects])
        else:
            samples.append(first)
    return samples, rng


def _visible(obj: ObjectSpec, local: np.ndarray, frame: int) -> np.ndarray:
    keep = np.ones(len(local), dtype=bool)
    if obj.occlusion is not None and (obj.occluded_frames is None or frame in obj.occluded_frames):
        axis, lo, hi = obj.occlusion
        keep = ~((local[:, axis] >= lo) & (local[:, axis] <= hi))
    return keep


def generate(spec: SceneSpec) -> List[TimedPointCloud]:
    """Render every frame of ``spec`` in sensor coordinates.

    ``gt_flow`` of frame ``t`` is each point's displacement to frame ``t+1``
    after the source frame has been moved into frame ``t+1``'s sensor
    coordinates (ego motion removed). The last frame's flow continues the
    same motions one more step.
    """
    samples, rng = _frame_samples(spec)
    n_frames = spec.num_frames
    # sensor pose E_t with E_{t+1} = E_t ∘ ego_motion
    sensor = [RigidTransform.identity()]
    for _ in range(n_frames):
        sensor.append(sensor[-1].compose(spec.ego_motion))
    step = spec.ego_motion.inverse()  # frame t sensor coords -> frame t+1 sensor coords
    poses = [object_poses(obj, n_frames + 1) for obj in spec.objects]

    frames = []
    for t in range(n_frames):
        pts, flow, cls, fg = [], [], [], []
        to_sensor_now = sensor[t].inverse()
        to_sensor_next = sensor[t + 1].inverse()
        for obj, local, pose in zip(spec.objects, samples[t], poses):
            y = local[_visible(obj, local, t)]
            now = to_sensor_now.apply(pose[t].apply(y))
            nxt = to_sensor_next.apply(pose[t + 1].apply(y))
            pts.append(now)
            flow.append(nxt - step.apply(now))
            cls.append(np.full(len(y), obj.class_id))
            fg.append(np.full(len(y), obj.is_foreground))
        points = np.concatenate(pts)
        if spec.noise_sigma > 0:
            points = points + rng.normal(0.0, spec.noise_sigma, size=points.shape)
        frames.append(TimedPointCloud(points, t, np.concatenate(flow),
                                      np.concatenate(cls), np.concatenate(fg)))
    return frames


def object_ids(spec: SceneSpec, frame: int = 0) -> np.ndarray:
    """Index of the generating object for every point of ``frame``."""
    samples, _ = _frame_samples(spec)
    return np.concatenate([np.full(int(_visible(obj, local, frame).sum()), k)
                           for k, (obj, local) in enumerate(zip(spec.objects, samples[frame]))])


def _at(x, y, z=0.0, yaw=0.0) -> RigidTransform:
    return RigidTransform.from_rotvec([0.0, 0.0, np.deg2rad(yaw)], [x, y, z])


def _move(dx=0.0, dy=0.0, yaw=0.0) -> RigidTransform:
    return RigidTransform.from_rotvec([0.0, 0.0, np.deg2rad(yaw)], [dx, dy, 0.0])


def fig2_scene(separation: float = 0.5, speed: float = 0.2, points_per_object: int = 100,
               rng_seed: int = 0) -> SceneSpec:
    """Two vertical boxes ``separation`` apart (facing-face gap) moving apart along x."""
    w, h = 0.5, 1.8
    half_gap = separation / 2.0
    left = ObjectSpec("box", (w, w, h), _at(5.0 - half_gap - w / 2, 0.0, h / 2),
                      _move(-speed), points_per_object, PEDESTRIAN)
    right = ObjectSpec("box", (w, w, h), _at(5.0 + half_gap + w / 2, 0.0, h / 2),
                       _move(speed), points_per_object, PEDESTRIAN)
    return SceneSpec([left, right], num_frames=5, rng_seed=rng_seed)


def static_room(rng_seed: int = 0, points: int = 900, ego_motion: Optional[RigidTransform] = None,
                num_frames: int = 5) -> SceneSpec:
    """Closed room with two pieces of furniture; nothing moves but the sensor."""
    walls = [
        ((10.0, 0.2, 3.0), _at(0.0, 4.0, 1.5)),
        ((10.0, 0.2, 3.0), _at(0.0, -4.0, 1.5)),
        ((0.2, 8.0, 3.0), _at(5.0, 0.0, 1.5)),
        ((0.2, 8.0, 3.0), _at(-5.0, 0.0, 1.5)),
    ]
    per_wall = int(points * 0.19)
    objs = [ObjectSpec("wall", size, pose, points_per_object=per_wall, class_id=BACKGROUND)
            for size, pose in walls]
    rest = max(points - 4 * per_wall, 2)
    objs.append(ObjectSpec("box", (2.0, 1.0, 0.8), _at(2.0, 2.0, 0.4, 20.0),
                           points_per_object=rest // 2, class_id=BACKGROUND, foreground=False))
    objs.append(ObjectSpec("box", (1.2, 1.2, 1.2), _at(-2.5, -1.5, 0.6, -35.0),
                           points_per_object=rest - rest // 2, class_id=BACKGROUND, foreground=False))
    if ego_motion is None:
        ego_motion = RigidTransform.from_rotvec([0.0, 0.0, np.deg2rad(1.0)], [0.15, 0.03, 0.0])
    return SceneSpec(objs, num_frames=num_frames, ego_motion=ego_motion, rng_seed=rng_seed)


_EGO_STEP = RigidTransform.from_rotvec([0.0, 0.0, np.deg2rad(0.5)], [0.3, 0.0, 0.0])


def _backdrop() -> List[ObjectSpec]:
    """Static street: two side walls, an end wall across x and four pillars.

    The end wall and pillars pin ICP along the walls; the background carries
    most of the points, as in real scans.
    """
    out = [
        ObjectSpec("wall", (14.0, 0.2, 2.5), _at(2.0, 6.0, 1.25), points_per_object=140,
                   class_id=BACKGROUND),
        ObjectSpec("wall", (14.0, 0.2, 2.5), _at(2.0, -5.0, 1.25), points_per_object=140,
                   class_id=BACKGROUND),
        ObjectSpec("wall", (0.2, 11.0, 2.5), _at(9.0, 0.5, 1.25), points_per_object=150,
                   class_id=BACKGROUND),
    ]
    for x, y in ((-3.0, -2.5), (4.0, -2.5), (-4.5, 4.5), (6.0, 4.5)):
        out.append(ObjectSpec("box", (0.4, 0.4, 2.5), _at(x, y, 1.25), points_per_object=30,
                              class_id=BACKGROUND, foreground=False))
    return out


def _car(pose: RigidTransform, motion: RigidTransform, **kw) -> ObjectSpec:
    return ObjectSpec("box", (2.6, 1.4, 1.2), pose, motion, kw.pop("points_per_object", 280),
                      VEHICLE, **kw)


def single_mover(rng_seed: int = 0) -> SceneSpec:
    car = _car(_at(0.0, 2.5, 0.6), _move(0.5))
    return SceneSpec([car] + _backdrop(), ego_motion=_EGO_STEP, rng_seed=rng_seed)


def crowd_scene(rng_seed: int = 0, points_per_pedestrian: int = 80) -> SceneSpec:
    """Four pedestrians walking along a wall, 0.6 m from its face, in an otherwise static street.

    The gap to the wall sits between the default clustering radius (0.3) and
    the wide radii that merge everyone into the wall. The swept paths of the
    pedestrians stay at least 0.45 m apart over the generated frames, so
    stacking frames in time never bridges two of them.
    """
    wall = ObjectSpec("wall", (8.0, 0.2, 2.5), _at(0.0, 6.0, 1.25), points_per_object=320,
                      class_id=BACKGROUND)
    y = 6.0 - 0.1 - 0.6 - 0.25
    peds = []
    for x, vx in ((-2.6, -0.2), (-0.9, -0.15), (0.4, 0.15), (2.1, 0.2)):
        peds.append(ObjectSpec("cylinder", (0.5, 0.5, 1.7), _at(x, y, 0.85), _move(vx),
                               points_per_pedestrian, PEDESTRIAN))
    # the backdrop minus its own wall along y = 6
    return SceneSpec([wall] + peds + _backdrop()[1:], rng_seed=rng_seed)


def occlusion_split(rng_seed: int = 0, num_frames: int = 5) -> SceneSpec:
    """A car whose middle is hidden in every frame but the last, splitting it in two."""
    car = _car(_at(0.0, 2.5, 0.6), _move(0.4), occlusion=(0, -0.35, 0.35),
               occluded_frames=tuple(range(num_frames - 1)))
    return SceneSpec([car] + _backdrop(), num_frames=num_frames, ego_motion=_EGO_STEP,
                     rng_seed=rng_seed)


def rotating_vehicle(rng_seed: int = 0) -> SceneSpec:
    car = _car(_at(0.0, 2.5, 0.6, 10.0), _move(0.4, 0.1, 5.0))
    return SceneSpec([car] + _backdrop(), ego_motion=_EGO_STEP, rng_seed=rng_seed)


SCENES = {
    "static_room": static_room,
    "single_mover": single_mover,
    "fig2_0.25": lambda rng_seed=0: fig2_scene(0.25, rng_seed=rng_seed),
    "fig2_0.5": lambda rng_seed=0: fig2_scene(0.5, rng_seed=rng_seed),
    "crowd": crowd_scene,
    "occlusion_split": occlusion_split,
    "rotating_vehicle": rotating_vehicle,
}
SCENES["fig2"] = SCENES["fig2_0.5"]


def make_scene(name: str, seed: int = 0) -> SceneSpec:
    try:
        return SCENES[name](rng_seed=seed)
    except KeyError:
        raise KeyError(f"unknown scene {name!r}; choose from {sorted(SCENES)}") from None


def benchmark_suite(seed: int = 0) -> List[Tuple[SceneSpec, str]]:
    """The fixed seven-scene catalogue used for ablations."""
    names = ["static_room", "single_mover", "fig2_0.25", "fig2_0.5", "crowd",
             "occlusion_split", "rotating_vehicle"]
    return [(make_scene(name, seed), name) for name in names]
