"""Synthetic 2-D floor-plan worlds: maps, scans, trajectories, beliefs.

A floor map is a multi-channel cell grid.  Channel 0 holds the walls the
filter is allowed to know about.  A separate hidden clutter grid holds
obstacles that the range sensor can see but the map does not show; the
mismatch between the two is the central difficulty the learned
observation model has to cope with.

Everything here is a pure function of (seed, spec) and bit-reproducible.

Grid conventions: cell (row, col) covers the metric square
[col*res, (col+1)*res) x [row*res, (row+1)*res); rows grow with +y.
Pose angles are radians in [-pi, pi), 0 pointing +x.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * math.pi


class WorldError(ValueError):
    """Invalid world spec or impossible geometric request."""


def wrap_angle(a):
    return np.mod(a + np.pi, TWO_PI) - np.pi


@dataclass
class Pose:
    x: float
    y: float
    phi: float

    def as_array(self):
        return np.array([self.x, self.y, self.phi], dtype=np.float64)


@dataclass
class FloorMap:
    resolution: float
    channels: np.ndarray  # (C, H, W), channel 0 = walls, values in [0, 1]
    clutter: np.ndarray  # (H, W) hidden obstacle grid, never overlaps walls
    rooms: list  # list of {"id": int, "cells": [[r, c], ...]}
    doors: list = field(default_factory=list)  # [[r, c], ...]

    @property
    def walls(self):
        return self.channels[0]

    @property
    def height(self):
        return self.channels.shape[1]

    @property
    def width(self):
        return self.channels.shape[2]

    @property
    def extent(self):
        """(x_max, y_max) in meters."""
        return self.width * self.resolution, self.height * self.resolution

    def occupancy(self, include_clutter=False):
        occ = self.walls > 0.5
        if include_clutter:
            occ = occ | (self.clutter > 0.5)
        return occ

    def free_cells(self, include_clutter=False):
        """(N, 2) array of [row, col] for unoccupied cells."""
        return np.argwhere(~self.occupancy(include_clutter))


@dataclass
class MapSpec:
    width: int = 32
    height: int = 32
    rooms: int = 4
    clutter_density: float = 0.0
    resolution: float = 0.2
    min_room: int = 4  # smallest room side, in cells
    semantic: bool = False
    room_categories: int = 4


@dataclass
class InitialBeliefSpec:
    """Exactly one localization mode is active.

    tracking: Gaussian cloud; ``center`` may be pre-resolved (stored with
    the dataset so every method shares it) or None, in which case it is
    drawn by perturbing the true pose with the same covariance.
    one-room / n-rooms: uniform over the free cells of ``room_ids``.
    global: uniform over all free cells.
    """

    mode: str = "tracking"
    sigma: tuple = (0.3, 0.3, math.radians(30.0))
    center: tuple | None = None
    room_ids: tuple = ()

    def __post_init__(self):
        if self.mode not in ("tracking", "one-room", "n-rooms", "global"):
            raise WorldError(f"unknown belief mode {self.mode!r}")
        if self.mode == "one-room" and len(self.room_ids) != 1:
            raise WorldError("one-room mode needs exactly one room id")
        if self.mode == "n-rooms" and len(self.room_ids) < 1:
            raise WorldError("n-rooms mode needs at least one room id")

    def to_json(self):
        d = {"mode": self.mode}
        if self.mode == "tracking":
            d["sigma"] = list(self.sigma)
            if self.center is not None:
                d["center"] = list(self.center)
        elif self.mode in ("one-room", "n-rooms"):
            d["rooms"] = list(self.room_ids)
        return d

    @staticmethod
    def from_json(d):
        mode = d["mode"]
        if mode == "tracking":
            return InitialBeliefSpec(
                mode=mode,
                sigma=tuple(d.get("sigma", (0.3, 0.3, math.radians(30.0)))),
                center=tuple(d["center"]) if "center" in d else None,
            )
        if mode in ("one-room", "n-rooms"):
            return InitialBeliefSpec(mode=mode, room_ids=tuple(d["rooms"]))
        return InitialBeliefSpec(mode=mode)


@dataclass
class SensorSpec:
    beams: int = 54
    fov: float = math.radians(60.0)
    max_range: float = 5.0
    noise_std: float = 0.0
    patch_size: int = 0  # 0 disables the visual-patch modality

    def to_json(self):
        return {
            "beams": self.beams,
            "fov": self.fov,
            "max_range": self.max_range,
            "noise_std": self.noise_std,
            "patch_size": self.patch_size,
        }

    @staticmethod
    def from_json(d):
        return SensorSpec(**d)


@dataclass
class Episode:
    map_id: str
    poses: np.ndarray  # (T+1, 3) true poses
    odometry: np.ndarray  # (T, 3) relative motion in robot frame (+ noise)
    scans: np.ndarray  # (T+1, B); row t belongs to pose t, row 0 unused by filters
    patches: np.ndarray | None  # (T+1, P, P) or None
    init: InitialBeliefSpec
    seed: int = 0

    @property
    def steps(self):
        return len(self.odometry)


# ---------------------------------------------------------------------------
# map generation


def _split_region(rng, regions, min_room):
    """Split the largest splittable region in two; returns the wall cells
    and the door cell carved through the new wall."""
    order = sorted(range(len(regions)), key=lambda i: (-_area(regions[i]), regions[i]))
    for idx in order:
        r0, c0, r1, c1 = regions[idx]
        h, w = r1 - r0 + 1, c1 - c0 + 1
        vertical = w >= h  # split the longer side
        span = w if vertical else h
        if span < 2 * min_room + 1:
            continue
        lo = (c0 if vertical else r0) + min_room
        hi = (c1 if vertical else r1) - min_room
        cut = int(rng.integers(lo, hi + 1))
        regions.pop(idx)
        if vertical:
            wall = [(r, cut) for r in range(r0, r1 + 1)]
            door = (int(rng.integers(r0, r1 + 1)), cut)
            regions.append((r0, c0, r1, cut - 1))
            regions.append((r0, cut + 1, r1, c1))
        else:
            wall = [(cut, c) for c in range(c0, c1 + 1)]
            door = (cut, int(rng.integers(c0, c1 + 1)))
            regions.append((r0, c0, cut - 1, c1))
            regions.append((cut + 1, c0, r1, c1))
        return wall, door
    return None


def _area(region):
    r0, c0, r1, c1 = region
    return (r1 - r0 + 1) * (c1 - c0 + 1)


def _connected_components(free):
    h, w = free.shape
    labels = np.full((h, w), -1, dtype=np.int64)
    n = 0
    for r in range(h):
        for c in range(w):
            if free[r, c] and labels[r, c] < 0:
                stack = [(r, c)]
                labels[r, c] = n
                while stack:
                    rr, cc = stack.pop()
                    for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                        r2, c2 = rr + dr, cc + dc
                        if 0 <= r2 < h and 0 <= c2 < w and free[r2, c2] and labels[r2, c2] < 0:
                            labels[r2, c2] = n
                            stack.append((r2, c2))
                n += 1
    return labels, n


def generate_map(seed, spec: MapSpec | None = None) -> FloorMap:
    """Axis-aligned rooms joined by door gaps, plus hidden clutter.

    Deterministic per (seed, spec).  Raises WorldError when the requested
    rooms cannot fit.
    """
    spec = spec or MapSpec()
    if spec.width < 8 or spec.height < 8:
        raise WorldError("map must be at least 8x8 cells")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x6D61]))

    h, w = spec.height, spec.width
    walls = np.zeros((h, w), dtype=np.float64)
    walls[0, :] = walls[-1, :] = 1.0
    walls[:, 0] = walls[:, -1] = 1.0

    regions = [(1, 1, h - 2, w - 2)]
    doors = []
    while len(regions) < spec.rooms:
        split = _split_region(rng, regions, spec.min_room)
        if split is None:
            raise WorldError(f"cannot fit {spec.rooms} rooms of side >= {spec.min_room} in {h}x{w}")
        wall, door = split
        for r, c in wall:
            walls[r, c] = 1.0
        walls[door] = 0.0
        doors.append(door)

    # a later wall may sit flush against an earlier door; reopen until the
    # free space is one component
    free = walls < 0.5
    labels, n = _connected_components(free)
    while n > 1:
        reopened = False
        for r in range(1, h - 1):
            for c in range(1, w - 1):
                if walls[r, c] > 0.5:
                    neigh = set()
                    for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                        if free[r + dr, c + dc]:
                            neigh.add(labels[r + dr, c + dc])
                    if len(neigh) > 1:
                        walls[r, c] = 0.0
                        doors.append((r, c))
                        reopened = True
                        break
            if reopened:
                break
        if not reopened:  # pragma: no cover - BSP always leaves an opening
            raise WorldError("disconnected free space could not be repaired")
        free = walls < 0.5
        labels, n = _connected_components(free)

    rooms = []
    for rid, (r0, c0, r1, c1) in enumerate(sorted(regions)):
        cells = [
            [r, c]
            for r in range(r0, r1 + 1)
            for c in range(c0, c1 + 1)
            if walls[r, c] < 0.5
        ]
        rooms.append({"id": rid, "cells": cells})

    clutter = np.zeros((h, w), dtype=np.float64)
    n_free = int((walls < 0.5).sum())
    door_set = set(doors)
    if spec.clutter_density > 0:
        target = spec.clutter_density * n_free
        attempts = 0
        while clutter.sum() < target and attempts < 200 * (target + 1):
            attempts += 1
            ch = int(rng.integers(1, 3))
            cw = int(rng.integers(1, 3))
            r = int(rng.integers(1, h - 1 - ch + 1))
            c = int(rng.integers(1, w - 1 - cw + 1))
            block = np.s_[r : r + ch, c : c + cw]
            if walls[block].max() > 0.5 or clutter[block].max() > 0.5:
                continue
            if any((rr, cc) in door_set for rr in range(r, r + ch) for cc in range(c, c + cw)):
                continue
            clutter[block] = 1.0

    chans = [walls]
    if spec.semantic:
        door_chan = np.zeros((h, w))
        for r, c in doors:
            door_chan[r, c] = 1.0
        chans.append(door_chan)
        for cat in range(spec.room_categories):
            chan = np.zeros((h, w))
            for room in rooms:
                if room["id"] % spec.room_categories == cat:
                    for r, c in room["cells"]:
                        chan[r, c] = 1.0
            chans.append(chan)

    return FloorMap(
        resolution=spec.resolution,
        channels=np.stack(chans),
        clutter=clutter,
        rooms=rooms,
        doors=[list(d) for d in doors],
    )


# ---------------------------------------------------------------------------
# raycasting


def raycast_batch(occ, resolution, xs, ys, angles, max_range):
    """Grid traversal for many rays at once.

    Returns (ranges, origin_blocked): rays starting inside an occupied
    cell get range 0 and the blocked flag instead of raising, so particle
    scoring can treat impossible poses gracefully.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    angles = np.asarray(angles, dtype=np.float64)
    n = xs.size
    h, w = occ.shape
    res = resolution

    ix = np.floor(xs / res).astype(np.int64)
    iy = np.floor(ys / res).astype(np.int64)
    inside = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
    blocked = np.ones(n, dtype=bool)
    blocked[inside] = occ[iy[inside], ix[inside]]

    ranges = np.zeros(n, dtype=np.float64)
    active = ~blocked

    dx = np.cos(angles)
    dy = np.sin(angles)
    with np.errstate(divide="ignore", invalid="ignore"):
        tdx = np.where(dx != 0.0, res / np.abs(dx), np.inf)
        tdy = np.where(dy != 0.0, res / np.abs(dy), np.inf)
        tmx = np.where(
            dx > 0.0,
            ((ix + 1) * res - xs) / dx,
            np.where(dx < 0.0, (ix * res - xs) / dx, np.inf),
        )
        tmy = np.where(
            dy > 0.0,
            ((iy + 1) * res - ys) / dy,
            np.where(dy < 0.0, (iy * res - ys) / dy, np.inf),
        )
    sx = np.where(dx > 0, 1, -1)
    sy = np.where(dy > 0, 1, -1)

    ix = ix.copy()
    iy = iy.copy()
    while active.any():
        step_x = tmx <= tmy
        t_new = np.where(step_x, tmx, tmy)
        ix = np.where(active & step_x, ix + sx, ix)
        iy = np.where(active & ~step_x, iy + sy, iy)
        tmx = np.where(active & step_x, tmx + tdx, tmx)
        tmy = np.where(active & ~step_x, tmy + tdy, tmy)

        over = active & (t_new >= max_range)
        ranges[over] = max_range
        active &= ~over

        out = active & ((ix < 0) | (ix >= w) | (iy < 0) | (iy >= h))
        ranges[out] = max_range
        active &= ~out

        cur = active.nonzero()[0]
        if cur.size:
            hit = occ[iy[cur], ix[cur]]
            hit_idx = cur[hit]
            ranges[hit_idx] = np.minimum(t_new[hit_idx], max_range)
            active[hit_idx] = False

    return ranges, blocked


def beam_angles(phi, beams, fov):
    """Beam directions spanning [phi - fov/2, phi + fov/2] inclusive."""
    if beams == 1:
        return np.array([phi], dtype=np.float64)
    return phi + np.linspace(-fov / 2.0, fov / 2.0, beams)


def raycast(fmap: FloorMap, pose: Pose, beams=54, fov=math.radians(60.0), max_range=5.0, include_clutter=False):
    """Range to the first occupied cell per beam, capped at max_range."""
    occ = fmap.occupancy(include_clutter)
    angles = beam_angles(pose.phi, beams, fov)
    ranges, blocked = raycast_batch(
        occ,
        fmap.resolution,
        np.full(beams, pose.x),
        np.full(beams, pose.y),
        angles,
        max_range,
    )
    if blocked.any():
        raise WorldError(f"raycast pose ({pose.x:.3f}, {pose.y:.3f}) is inside an occupied cell")
    return ranges


def scan_at(fmap, xs, ys, phis, sensor: SensorSpec, include_clutter=True):
    """Batched scans for many poses; (N, beams) ranges, plus blocked flags."""
    xs = np.atleast_1d(np.asarray(xs, dtype=np.float64))
    n = xs.size
    ys = np.atleast_1d(np.asarray(ys, dtype=np.float64))
    phis = np.atleast_1d(np.asarray(phis, dtype=np.float64))
    offs = beam_angles(0.0, sensor.beams, sensor.fov)
    angs = (phis[:, None] + offs[None, :]).reshape(-1)
    ranges, blocked = raycast_batch(
        fmap.occupancy(include_clutter),
        fmap.resolution,
        np.repeat(xs, sensor.beams),
        np.repeat(ys, sensor.beams),
        angs,
        sensor.max_range,
    )
    return ranges.reshape(n, sensor.beams), blocked.reshape(n, sensor.beams)[:, 0]


# ---------------------------------------------------------------------------
# egocentric crops (shared geometry for the patch observation and the
# model-side local map; models re-expresses the same formula on the tape)


def crop_grid_offsets(size, resolution, anchor_row=None):
    """(forward, lateral) metric offsets for each crop cell, flattened.

    The robot sits at row ``anchor_row`` (default size-4) of the size x
    size crop and faces toward row 0, so most of the crop lies ahead.
    Columns left of center are to the robot's left.
    """
    if size < 2:
        raise WorldError("crop size must be >= 2")
    if anchor_row is None:
        anchor_row = size - 4
    rows, cols = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    forward = (anchor_row - rows) * resolution
    lateral = ((size - 1) / 2.0 - cols) * resolution
    return forward.reshape(-1), lateral.reshape(-1)


def crop_world_points(pose_xyphi, size, resolution, anchor_row=None):
    """World (x, y) sample points of the egocentric crop around one pose."""
    x, y, phi = pose_xyphi
    f, l = crop_grid_offsets(size, resolution, anchor_row)
    wx = x + np.cos(phi) * f - np.sin(phi) * l
    wy = y + np.sin(phi) * f + np.cos(phi) * l
    return wx, wy


def _bilinear_grid(grid, rows, cols):
    h, w = grid.shape
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    fr = rows - r0
    fc = cols - c0
    out = np.zeros_like(rows)
    for dr, dc, wgt in (
        (0, 0, (1 - fr) * (1 - fc)),
        (0, 1, (1 - fr) * fc),
        (1, 0, fr * (1 - fc)),
        (1, 1, fr * fc),
    ):
        ri = r0 + dr
        ci = c0 + dc
        valid = (ri >= 0) & (ri < h) & (ci >= 0) & (ci < w)
        vals = grid[np.clip(ri, 0, h - 1), np.clip(ci, 0, w - 1)] * valid
        out += vals * wgt
    return out


def render_patch(fmap: FloorMap, pose_xyphi, size, anchor_row=None):
    """Egocentric top-down view of walls+clutter, the 'camera' stand-in."""
    wx, wy = crop_world_points(pose_xyphi, size, fmap.resolution, anchor_row)
    grid = np.maximum(fmap.walls, fmap.clutter)
    rows = wy / fmap.resolution - 0.5
    cols = wx / fmap.resolution - 0.5
    return _bilinear_grid(grid, rows, cols).reshape(size, size)


# ---------------------------------------------------------------------------
# trajectories


FORWARD_PROB = 0.8
FORWARD_RANGE = (0.2, 0.8)  # meters
TURN_RANGE = (math.radians(15.0), math.radians(60.0))
CONTACT_STANDOFF = 0.02  # meters kept between robot and obstacle on contact


def _random_free_pose(fmap, rng):
    cells = fmap.free_cells(include_clutter=True)
    if len(cells) == 0:
        raise WorldError("map has no free space")
    r, c = cells[rng.integers(len(cells))]
    res = fmap.resolution
    x = (c + 0.5 + rng.uniform(-0.3, 0.3)) * res
    y = (r + 0.5 + rng.uniform(-0.3, 0.3)) * res
    phi = rng.uniform(-math.pi, math.pi)
    return np.array([x, y, phi])


def sample_trajectory(
    fmap: FloorMap,
    seed,
    steps,
    sensor: SensorSpec | None = None,
    odom_noise_std=(0.0, 0.0, 0.0),
    init_spec: InitialBeliefSpec | None = None,
    map_id="map",
) -> Episode:
    """Random-walk trajectory: move forward with p=0.8 (distance uniform in
    [0.2 m, 0.8 m]) or turn (angle uniform in [15 deg, 60 deg], random
    sign).  Forward moves that would hit a wall or clutter stop just
    short of contact.  Odometry is the true relative motion plus optional
    Gaussian noise."""
    sensor = sensor or SensorSpec()
    ss = np.random.SeedSequence([int(seed), 0x45504953])
    r_traj, r_odom, r_scan, r_init = [np.random.default_rng(s) for s in ss.spawn(4)]

    occ = fmap.occupancy(include_clutter=True)
    pose = _random_free_pose(fmap, r_traj)
    poses = [pose.copy()]
    for _ in range(steps):
        if r_traj.random() < FORWARD_PROB:
            d = r_traj.uniform(*FORWARD_RANGE)
            free_dist, blocked = raycast_batch(
                occ,
                fmap.resolution,
                np.array([pose[0]]),
                np.array([pose[1]]),
                np.array([pose[2]]),
                d + 1.0,
            )
            allowed = d if free_dist[0] > d else max(0.0, free_dist[0] - CONTACT_STANDOFF)
            pose = pose + np.array([math.cos(pose[2]) * allowed, math.sin(pose[2]) * allowed, 0.0])
        else:
            turn = r_traj.uniform(*TURN_RANGE) * (1.0 if r_traj.random() < 0.5 else -1.0)
            pose = pose.copy()
            pose[2] = wrap_angle(pose[2] + turn)
        poses.append(pose.copy())
    poses = np.array(poses)

    # odometry in the frame of the previous pose
    diffs = poses[1:] - poses[:-1]
    cph = np.cos(poses[:-1, 2])
    sph = np.sin(poses[:-1, 2])
    odom = np.stack(
        [
            cph * diffs[:, 0] + sph * diffs[:, 1],
            -sph * diffs[:, 0] + cph * diffs[:, 1],
            wrap_angle(diffs[:, 2]),
        ],
        axis=1,
    )
    std = np.asarray(odom_noise_std, dtype=np.float64)
    if std.any():
        odom = odom + r_odom.normal(0.0, 1.0, odom.shape) * std[None, :]

    scans, _ = scan_at(fmap, poses[:, 0], poses[:, 1], poses[:, 2], sensor, include_clutter=True)
    if sensor.noise_std > 0:
        scans = scans + r_scan.normal(0.0, sensor.noise_std, scans.shape)

    patches = None
    if sensor.patch_size:
        patches = np.stack([render_patch(fmap, p, sensor.patch_size) for p in poses])

    init = init_spec or InitialBeliefSpec()
    if init.mode == "tracking" and init.center is None:
        center = poses[0] + r_init.normal(0.0, 1.0, 3) * np.asarray(init.sigma)
        center[2] = wrap_angle(center[2])
        init = InitialBeliefSpec(mode="tracking", sigma=init.sigma, center=tuple(center))

    return Episode(
        map_id=map_id,
        poses=poses,
        odometry=odom,
        scans=scans,
        patches=patches,
        init=init,
        seed=int(seed),
    )


# ---------------------------------------------------------------------------
# initial beliefs


def sample_initial_belief(spec: InitialBeliefSpec, fmap: FloorMap, true_pose, K, seed):
    """Particle states (K, 3) and uniform log-weights (K,) for a mode.

    tracking: Gaussian around the (possibly pre-resolved) center.
    one-room / n-rooms: uniform over the free cells of the rooms.
    global: uniform over all free cells.  Headings are uniform for the
    room and global modes.
    """
    if K < 1:
        raise WorldError("need at least one particle")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x62656C]))
    res = fmap.resolution

    if spec.mode == "tracking":
        sigma = np.asarray(spec.sigma, dtype=np.float64)
        if spec.center is None:
            center = np.asarray(true_pose, dtype=np.float64) + rng.normal(0.0, 1.0, 3) * sigma
        else:
            center = np.asarray(spec.center, dtype=np.float64)
        states = center[None, :] + rng.normal(0.0, 1.0, (K, 3)) * sigma[None, :]
    else:
        if spec.mode == "global":
            cells = fmap.free_cells()
        else:
            by_id = {room["id"]: room["cells"] for room in fmap.rooms}
            cells = []
            for rid in spec.room_ids:
                if rid not in by_id:
                    raise WorldError(f"unknown room id {rid}")
                cells.extend(by_id[rid])
            cells = np.asarray(cells)
        pick = rng.integers(len(cells), size=K)
        rc = np.asarray(cells)[pick]
        states = np.empty((K, 3))
        states[:, 0] = (rc[:, 1] + rng.uniform(0.0, 1.0, K)) * res
        states[:, 1] = (rc[:, 0] + rng.uniform(0.0, 1.0, K)) * res
        states[:, 2] = rng.uniform(-math.pi, math.pi, K)

    states[:, 2] = wrap_angle(states[:, 2])
    log_weights = np.full(K, -math.log(K))
    return states, log_weights


# ---------------------------------------------------------------------------
# file formats


def save_map(path, fmap: FloorMap):
    doc = {
        "resolution": fmap.resolution,
        "width": fmap.width,
        "height": fmap.height,
        "channels": [[[float(v) for v in row] for row in chan] for chan in fmap.channels],
        "clutter": [[float(v) for v in row] for row in fmap.clutter],
        "rooms": fmap.rooms,
        "doors": fmap.doors,
    }
    with open(path, "w") as f:
        json.dump(doc, f)
        f.write("\n")


def load_map(path) -> FloorMap:
    with open(path) as f:
        doc = json.load(f)
    return FloorMap(
        resolution=float(doc["resolution"]),
        channels=np.asarray(doc["channels"], dtype=np.float64),
        clutter=np.asarray(doc["clutter"], dtype=np.float64),
        rooms=doc["rooms"],
        doors=doc.get("doors", []),
    )


def save_episode(path, ep: Episode):
    """JSON lines, one record per step; step 0 carries the initial pose."""
    with open(path, "w") as f:
        for t in range(len(ep.poses)):
            rec = {
                "t": t,
                "pose": [float(v) for v in ep.poses[t]],
                "odom": [float(v) for v in (ep.odometry[t - 1] if t > 0 else (0.0, 0.0, 0.0))],
                "scan": [float(v) for v in ep.scans[t]],
            }
            if ep.patches is not None:
                rec["patch"] = [[float(v) for v in row] for row in ep.patches[t]]
            f.write(json.dumps(rec))
            f.write("\n")


def room_of_cell(fmap: FloorMap, r, c):
    """Room id containing the cell; door cells borrow a neighbor's room."""
    for room in fmap.rooms:
        if [r, c] in room["cells"]:
            return room["id"]
    for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        for room in fmap.rooms:
            if [r + dr, c + dc] in room["cells"]:
                return room["id"]
    raise WorldError(f"cell ({r}, {c}) belongs to no room")


def resolve_init_spec(mode, fmap: FloorMap, pose0, rng, n_rooms=2, sigma=(0.3, 0.3, math.radians(30.0))):
    """Turn a mode name into a concrete per-episode InitialBeliefSpec.

    Room modes pick the room containing the true start pose plus, for
    n-rooms, extra distinct rooms drawn at random; the tracking center is
    resolved later (by sample_trajectory) so it perturbs the true pose.
    """
    if mode == "tracking":
        return InitialBeliefSpec(mode="tracking", sigma=tuple(sigma))
    if mode == "global":
        return InitialBeliefSpec(mode="global")
    r = int(pose0[1] / fmap.resolution)
    c = int(pose0[0] / fmap.resolution)
    home = room_of_cell(fmap, r, c)
    if mode == "one-room":
        return InitialBeliefSpec(mode="one-room", room_ids=(home,))
    others = [room["id"] for room in fmap.rooms if room["id"] != home]
    rng.shuffle(others)
    picks = (home, *others[: max(0, n_rooms - 1)])
    return InitialBeliefSpec(mode="n-rooms", room_ids=tuple(sorted(picks)))


# ---------------------------------------------------------------------------
# datasets (a directory of maps + episodes + manifest)


DATASET_FORMAT = "driftfilter-dataset v1"


@dataclass
class Dataset:
    maps: dict  # map id -> FloorMap
    episodes: list  # Episode objects with map_id/init/seed attached
    sensor: SensorSpec
    meta: dict = field(default_factory=dict)

    @property
    def map_channels(self):
        first = next(iter(self.maps.values()))
        return first.channels.shape[0]


def generate_dataset(
    out_dir,
    seed,
    n_maps,
    episodes_per_map,
    steps,
    map_spec: MapSpec | None = None,
    sensor: SensorSpec | None = None,
    init_mode="tracking",
    n_rooms=2,
    odom_noise_std=(0.0, 0.0, 0.0),
):
    """Write maps/, episodes/ and manifest.json; returns the manifest."""
    import os

    map_spec = map_spec or MapSpec()
    sensor = sensor or SensorSpec()
    os.makedirs(os.path.join(out_dir, "maps"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "episodes"), exist_ok=True)
    seeder = np.random.default_rng(np.random.SeedSequence([int(seed), 0x64617461]))

    manifest = {
        "format": DATASET_FORMAT,
        "seed": int(seed),
        "steps": int(steps),
        "map_spec": {
            "width": map_spec.width,
            "height": map_spec.height,
            "rooms": map_spec.rooms,
            "clutter_density": map_spec.clutter_density,
            "resolution": map_spec.resolution,
            "semantic": map_spec.semantic,
        },
        "sensor": sensor.to_json(),
        "odom_noise_std": list(odom_noise_std),
        "init_mode": init_mode,
        "maps": [],
        "episodes": [],
    }
    for i in range(n_maps):
        map_seed = int(seeder.integers(2**63))
        fmap = generate_map(map_seed, map_spec)
        map_id = f"map_{i:03d}"
        rel = f"maps/{map_id}.json"
        save_map(os.path.join(out_dir, rel), fmap)
        manifest["maps"].append({"id": map_id, "file": rel, "seed": map_seed})
        for j in range(episodes_per_map):
            ep_seed = int(seeder.integers(2**63))
            init = resolve_init_spec(init_mode, fmap, None, seeder, n_rooms) if init_mode in ("tracking", "global") else None
            ep = sample_trajectory(
                fmap,
                seed=ep_seed,
                steps=steps,
                sensor=sensor,
                odom_noise_std=odom_noise_std,
                init_spec=init,
                map_id=map_id,
            )
            if init is None:  # room modes need the sampled start pose
                init = resolve_init_spec(init_mode, fmap, ep.poses[0], seeder, n_rooms)
                ep = Episode(ep.map_id, ep.poses, ep.odometry, ep.scans, ep.patches, init, ep.seed)
            idx = i * episodes_per_map + j
            rel_ep = f"episodes/ep_{idx:05d}.jsonl"
            save_episode(os.path.join(out_dir, rel_ep), ep)
            manifest["episodes"].append(
                {"file": rel_ep, "map": map_id, "seed": ep_seed, "init": ep.init.to_json()}
            )
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1)
        f.write("\n")
    return manifest


def load_dataset(path) -> Dataset:
    import os

    manifest_path = os.path.join(path, "manifest.json")
    try:
        with open(manifest_path) as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise WorldError(f"{path}: not a dataset directory (no manifest.json)")
    if manifest.get("format") != DATASET_FORMAT:
        raise WorldError(f"{path}: unsupported dataset format {manifest.get('format')!r}")
    maps = {}
    for entry in manifest["maps"]:
        maps[entry["id"]] = load_map(os.path.join(path, entry["file"]))
    episodes = []
    for entry in manifest["episodes"]:
        episodes.append(
            load_episode(
                os.path.join(path, entry["file"]),
                map_id=entry["map"],
                init=InitialBeliefSpec.from_json(entry["init"]),
                seed=entry["seed"],
            )
        )
    return Dataset(maps=maps, episodes=episodes, sensor=SensorSpec.from_json(manifest["sensor"]), meta=manifest)


def load_episode(path, map_id="map", init=None, seed=0) -> Episode:
    poses, odoms, scans, patches = [], [], [], []
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            poses.append(rec["pose"])
            odoms.append(rec["odom"])
            scans.append(rec["scan"])
            if "patch" in rec:
                patches.append(rec["patch"])
    return Episode(
        map_id=map_id,
        poses=np.asarray(poses, dtype=np.float64),
        odometry=np.asarray(odoms, dtype=np.float64)[1:],
        scans=np.asarray(scans, dtype=np.float64),
        patches=np.asarray(patches, dtype=np.float64) if patches else None,
        init=init or InitialBeliefSpec(),
        seed=seed,
    )
