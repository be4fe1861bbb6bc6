"""Deterministic closed-loop scenario engine.

Runs a fixed-step simulation of the two-agent system: the primary agent
moves on a scripted pattern and "detects" the secondary agent (plus optional
hovering false targets) with configurable noise, rate, processing delay and
wall occlusion; the secondary agent is a first-order plant that tracks
streamed references in its own drifting VIO frame; the guider closes the
loop on board the primary.  All randomness comes from named sub-streams of
one seed, so a fixed config+seed reproduces the event log byte for byte.

True frame relation maintained by the engine:

    p_V(t) = Rz(theta0) @ p_L(t) + t0 + o(t)

with (t0, theta0) the initial VIO frame offset and o(t) the accumulated
position drift.  Until the guider initializes, the engine streams references
through this true transform (operator-assisted start); afterwards the guider
streams through its own estimate.

The event log is a chronological, replayable record stream; serialized form
is line-delimited ``TAG field ...`` text with shortest-round-trip floats.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import numpy as np

from .config import ConfigError, ScenarioConfig, format_value
from .geometry import Detection, Frame, TimedPose, rot_z, wrap_heading
from .guider import Guider, Trajectory, TrajectoryPoint


class LogParseError(ValueError):
    """Raised on corrupt or truncated event log files."""

    def __init__(self, message: str, lineno: int):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


# ---------------------------------------------------------------------------
# event log


class EventLog:
    """Time-ordered record stream of one scenario run.

    Record kinds (fields after the tag):
        H    key value               -- effective config echo
        TP   t x y z heading         -- primary ground-truth pose (L)
        TS   t x y z heading         -- secondary ground-truth pose (L)
        DR   t ox oy oz              -- accumulated VIO drift offset
        DET  t_meas t_arrive track x y z sigma
        VIO  t_meas t_arrive x y z vx vy vz phi omega   -- V-frame sample
        REF  t_emit t_arrive n (stamp x y z heading)*n  -- streamed refs (V)
        EST  t status x y z phi tx ty tz theta          -- guider output
        FAIL t                       -- abort-radius failure
        END  t
    """

    def __init__(self):
        self.records: list[tuple] = []

    def append(self, record: tuple) -> None:
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def iter_tag(self, tag: str) -> Iterator[tuple]:
        return (r for r in self.records if r[0] == tag)

    # -- typed accessors -----------------------------------------------------

    def config_echo(self) -> dict[str, str]:
        return {r[1]: r[2] for r in self.iter_tag("H")}

    def truth(self, tag: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(stamps, positions (N,3), headings) for tag TS or TP."""
        rows = [r[1:] for r in self.iter_tag(tag)]
        if not rows:
            return np.empty(0), np.empty((0, 3)), np.empty(0)
        arr = np.asarray(rows, dtype=float)
        return arr[:, 0], arr[:, 1:4], arr[:, 4]

    def estimates(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, list[str]]:
        """(stamps, positions (N,3), headings, statuses) from EST records."""
        recs = list(self.iter_tag("EST"))
        if not recs:
            return np.empty(0), np.empty((0, 3)), np.empty(0), []
        stamps = np.array([r[1] for r in recs])
        pos = np.array([r[3:6] for r in recs], dtype=float)
        head = np.array([r[6] for r in recs], dtype=float)
        statuses = [r[2] for r in recs]
        return stamps, pos, head, statuses

    def detection_stamps(self, track_id: int) -> np.ndarray:
        return np.array([r[1] for r in self.iter_tag("DET") if r[3] == track_id])

    @property
    def failed(self) -> bool:
        return any(r[0] == "FAIL" for r in self.records)

    # -- serialization -------------------------------------------------------

    @staticmethod
    def _format_field(x) -> str:
        if isinstance(x, float):
            return repr(x)
        return str(x)

    def dumps(self) -> str:
        lines = []
        for rec in self.records:
            if rec[0] == "REF":
                tag, t_emit, t_arrive, pts = rec
                flat = [tag, repr(t_emit), repr(t_arrive), str(len(pts))]
                for p in pts:
                    flat += [repr(float(v)) for v in p]
                lines.append(" ".join(flat))
            else:
                lines.append(" ".join(self._format_field(x) for x in rec))
        return "\n".join(lines) + "\n"

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "EventLog":
        log = cls()
        lineno = 0
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            parts = line.split()
            tag = parts[0]
            try:
                if tag == "H":
                    rec = ("H", parts[1], parts[2] if len(parts) > 2 else "")
                elif tag in ("TP", "TS"):
                    rec = (tag, *map(float, parts[1:6]))
                    if len(parts) != 6:
                        raise ValueError("expected 5 fields")
                elif tag == "DR":
                    if len(parts) != 5:
                        raise ValueError("expected 4 fields")
                    rec = (tag, *map(float, parts[1:5]))
                elif tag == "DET":
                    if len(parts) != 8:
                        raise ValueError("expected 7 fields")
                    rec = (tag, float(parts[1]), float(parts[2]), int(parts[3]),
                           float(parts[4]), float(parts[5]), float(parts[6]),
                           float(parts[7]))
                elif tag == "VIO":
                    if len(parts) != 11:
                        raise ValueError("expected 10 fields")
                    rec = (tag, *map(float, parts[1:11]))
                elif tag == "REF":
                    n = int(parts[3])
                    vals = list(map(float, parts[4:]))
                    if len(vals) != 5 * n:
                        raise ValueError(f"expected {5 * n} point fields")
                    pts = tuple(tuple(vals[5 * i:5 * i + 5]) for i in range(n))
                    rec = (tag, float(parts[1]), float(parts[2]), pts)
                elif tag == "EST":
                    if len(parts) != 11:
                        raise ValueError("expected 10 fields")
                    rec = (tag, float(parts[1]), parts[2],
                           *map(float, parts[3:11]))
                elif tag in ("FAIL", "END"):
                    rec = (tag, float(parts[1]))
                else:
                    raise ValueError(f"unknown record tag {tag!r}")
            except (ValueError, IndexError) as exc:
                raise LogParseError(str(exc), lineno) from exc
            log.append(rec)
        if not log.records or log.records[-1][0] != "END":
            raise LogParseError("log is truncated: no END record", lineno + 1)
        return log

    @classmethod
    def load(cls, path: str) -> "EventLog":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.loads(fh.read())


# ---------------------------------------------------------------------------
# drift models


class DriftModel:
    """Accumulated position drift of the VIO frame; base class is drift-free."""

    def __init__(self):
        self.offset = np.zeros(3)
        self.rate = np.zeros(3)

    def step(self, dt: float, rng: np.random.Generator) -> None:
        pass


class ConstantVelocityDrift(DriftModel):
    def __init__(self, rate: Sequence[float]):
        super().__init__()
        self.rate = np.asarray(rate, dtype=float)

    def step(self, dt: float, rng: np.random.Generator) -> None:
        self.offset = self.offset + self.rate * dt


class RandomWalkDrift(DriftModel):
    def __init__(self, sigma: float):
        super().__init__()
        self.sigma = float(sigma)

    def step(self, dt: float, rng: np.random.Generator) -> None:
        self.offset = self.offset + self.sigma * math.sqrt(dt) * rng.standard_normal(3)


def make_drift(values) -> DriftModel:
    model = values["vio_drift.model"]
    if model == "constant_velocity":
        return ConstantVelocityDrift([values["vio_drift.x"], values["vio_drift.y"],
                                      values["vio_drift.z"]])
    if model == "random_walk":
        return RandomWalkDrift(values["vio_drift.sigma"])
    return DriftModel()


def vio_sample(
    truth: TimedPose,
    theta0: float,
    t0: Sequence[float],
    drift: DriftModel,
    rng: Optional[np.random.Generator] = None,
    noise_sigma: float = 0.0,
) -> TimedPose:
    """Map a ground-truth pose through the drifted VIO frame transform."""
    R0 = rot_z(theta0)
    pos = R0 @ truth.position + np.asarray(t0, float) + drift.offset
    if noise_sigma > 0.0 and rng is not None:
        pos = pos + rng.normal(0.0, noise_sigma, 3)
    return TimedPose(
        truth.stamp, Frame.VIO, pos,
        wrap_heading(truth.heading + theta0),
        R0 @ truth.velocity + drift.rate,
        truth.heading_rate,
    )


# ---------------------------------------------------------------------------
# occlusion and detection


def _segments_intersect(p1, p2, q1, q2) -> bool:
    """2D segment intersection (touching counts as intersecting)."""
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1 = orient(q1, q2, p1)
    d2 = orient(q1, q2, p2)
    d3 = orient(p1, p2, q1)
    d4 = orient(p1, p2, q2)
    if ((d1 > 0) != (d2 > 0) or d1 == 0 or d2 == 0) and \
       ((d3 > 0) != (d4 > 0) or d3 == 0 or d4 == 0):
        # possible intersection incl. collinear overlap; confirm with boxes
        if d1 == 0 and d2 == 0 and d3 == 0 and d4 == 0:
            return (min(p1[0], p2[0]) <= max(q1[0], q2[0])
                    and min(q1[0], q2[0]) <= max(p1[0], p2[0])
                    and min(p1[1], p2[1]) <= max(q1[1], q2[1])
                    and min(q1[1], q2[1]) <= max(p1[1], p2[1]))
        return ((d1 > 0) != (d2 > 0) and (d3 > 0) != (d4 > 0)) or \
            d1 == 0 or d2 == 0 or d3 == 0 or d4 == 0
    return False


def line_of_sight(primary_xy, target_xy, walls) -> bool:
    """True when no wall segment crosses the primary->target sightline (xy)."""
    for wall in walls:
        if _segments_intersect(primary_xy, target_xy, wall[0:2], wall[2:4]):
            return False
    return True


def lidar_detect(
    stamp: float,
    truth_secondary: np.ndarray,
    truth_primary: np.ndarray,
    false_targets: Sequence[Sequence[float]],
    walls: Sequence[Sequence[float]],
    rng: np.random.Generator,
    sigma: float,
) -> list[Detection]:
    """One detection per visible target, with isotropic Gaussian noise.

    Track id 0 is the secondary agent; false targets get ids 1..n in order.
    Walls occlude in the xy plane (modeled as full-height).
    """
    out = []
    p_xy = truth_primary[0:2]
    targets = [(0, truth_secondary)]
    targets += [(i + 1, np.asarray(ft, float)) for i, ft in enumerate(false_targets)]
    for track_id, pos in targets:
        if walls and not line_of_sight(p_xy, pos[0:2], walls):
            continue
        noisy = pos + rng.normal(0.0, sigma, 3)
        out.append(Detection(stamp, noisy, sigma, track_id))
    return out


# ---------------------------------------------------------------------------
# primary motion and desired trajectories


def primary_pose(values, t: float) -> tuple[np.ndarray, float]:
    """Scripted primary-agent pose (position, heading) at time t."""
    cx, cy, cz = values["primary.center"]
    pattern = values["primary.pattern"]
    size = values["primary.size"]
    speed = values["primary.speed"]
    if pattern == "static" or size <= 0 or speed <= 0:
        return np.array([cx, cy, cz]), 0.0
    if pattern == "line":
        cycle = 2.0 * size
        m = (speed * t) % cycle
        u = m if m <= size else cycle - m
        heading = 0.0 if m <= size else math.pi
        return np.array([cx - 0.5 * size + u, cy, cz]), heading
    # square perimeter, counterclockwise from the lower-left corner
    half = 0.5 * size
    s = (speed * t) % (4.0 * size)
    k = int(s // size)
    r = s - k * size
    if k == 0:
        pos = (cx - half + r, cy - half)
        heading = 0.0
    elif k == 1:
        pos = (cx + half, cy - half + r)
        heading = math.pi / 2
    elif k == 2:
        pos = (cx + half - r, cy + half)
        heading = math.pi
    else:
        pos = (cx - half, cy + half - r)
        heading = -math.pi / 2
    return np.array([pos[0], pos[1], cz]), heading


def generate_trajectory(values) -> Trajectory:
    """Desired secondary-agent trajectory in frame L from the config."""
    pattern = values["trajectory.pattern"]
    speed = values["trajectory.speed"]
    spacing = values["trajectory.spacing"]
    start = values["trajectory.start"]
    cx, cy, cz = values["trajectory.center"]
    if pattern == "circle":
        radius = values["trajectory.radius"]
        laps = values["trajectory.laps"]
        total = laps * 2.0 * math.pi * radius / speed
        omega = speed / radius
        pts = []
        n = int(math.floor(total / spacing))
        for k in range(n + 1):
            ts = k * spacing
            ang = omega * ts
            pts.append(TrajectoryPoint(
                start + ts,
                np.array([cx + radius * math.cos(ang),
                          cy + radius * math.sin(ang), cz]),
                wrap_heading(ang + math.pi / 2),
            ))
        return Trajectory(Frame.LIDAR, tuple(pts))
    if pattern == "eight":
        radius = values["trajectory.radius"]
        laps = values["trajectory.laps"]
        # Gerono lemniscate, arc-length parameterized numerically.
        u = np.linspace(0.0, 2.0 * math.pi, 4001)
        x = radius * np.sin(u)
        y = radius * np.sin(u) * np.cos(u)
        seg = np.hypot(np.diff(x), np.diff(y))
        arc = np.concatenate([[0.0], np.cumsum(seg)])
        lap_len = arc[-1]
        total = laps * lap_len / speed
        n = int(math.floor(total / spacing))
        pts = []
        for k in range(n + 1):
            ts = k * spacing
            s = (speed * ts) % lap_len
            ui = float(np.interp(s, arc, u))
            px = cx + radius * math.sin(ui)
            py = cy + radius * math.sin(ui) * math.cos(ui)
            dx = math.cos(ui)
            dy = math.cos(2.0 * ui)
            pts.append(TrajectoryPoint(
                start + ts, np.array([px, py, cz]),
                math.atan2(dy, dx),
            ))
        return Trajectory(Frame.LIDAR, tuple(pts))
    # waypoints: constant-speed polyline
    wps = values["trajectory.waypoints"]
    if isinstance(wps[0], float):
        wps = (wps,)
    wp = np.asarray(wps, dtype=float)
    if wp.ndim != 2 or wp.shape[1] != 3 or wp.shape[0] < 2:
        raise ConfigError("trajectory.waypoints must contain at least two x,y,z points")
    seg_vec = np.diff(wp, axis=0)
    seg_len = np.linalg.norm(seg_vec, axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg_len)])
    total = arc[-1] / speed
    n = int(math.floor(total / spacing))
    pts = []
    for k in range(n + 1):
        ts = k * spacing
        s = min(speed * ts, arc[-1])
        i = min(int(np.searchsorted(arc, s, side="right")) - 1, len(seg_len) - 1)
        u = (s - arc[i]) / seg_len[i] if seg_len[i] > 0 else 0.0
        pos = wp[i] + u * seg_vec[i]
        heading = math.atan2(seg_vec[i][1], seg_vec[i][0])
        pts.append(TrajectoryPoint(start + ts, pos, heading))
    return Trajectory(Frame.LIDAR, tuple(pts))


# ---------------------------------------------------------------------------
# reference path distance (abort checks and evaluation share the formula)


class ReferencePath:
    """Geometric form of the desired path for point-to-path distance queries."""

    def __init__(self, values, trajectory: Trajectory):
        self.kind = values["trajectory.pattern"]
        if self.kind == "circle":
            self.center = np.asarray(values["trajectory.center"], float)
            self.radius = values["trajectory.radius"]
            self.polyline = None
        else:
            self.polyline = np.array([p.position for p in trajectory.points])
            self.center = None
            self.radius = 0.0

    def distance(self, point: np.ndarray) -> float:
        if self.kind == "circle":
            dxy = math.hypot(point[0] - self.center[0], point[1] - self.center[1])
            dz = point[2] - self.center[2]
            return math.hypot(dxy - self.radius, dz)
        return polyline_distance(self.polyline, point)


def polyline_distance(polyline: np.ndarray, point: np.ndarray) -> float:
    """Minimum distance from a point to an (N,3) polyline."""
    a = polyline[:-1]
    b = polyline[1:]
    ab = b - a
    denom = np.einsum("ij,ij->i", ab, ab)
    denom[denom == 0.0] = 1.0
    u = np.clip(np.einsum("ij,ij->i", point - a, ab) / denom, 0.0, 1.0)
    proj = a + u[:, None] * ab
    d = np.linalg.norm(proj - point, axis=1)
    return float(d.min())


# ---------------------------------------------------------------------------
# secondary-agent plant


@dataclass(frozen=True)
class PlantParams:
    time_constant: float = 0.5
    max_speed: float = 2.0
    max_heading_rate: float = 1.5


@dataclass
class PlantState:
    """Pose tracked by the secondary agent's controller, in frame V."""

    position: np.ndarray
    heading: float
    velocity: np.ndarray
    heading_rate: float


def _interp_refs(refs: Sequence[TrajectoryPoint], t: float) -> tuple[np.ndarray, float]:
    if t <= refs[0].stamp:
        return refs[0].position, refs[0].heading
    if t >= refs[-1].stamp:
        return refs[-1].position, refs[-1].heading
    lo, hi = 0, len(refs) - 1
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if refs[mid].stamp <= t:
            lo = mid
        else:
            hi = mid
    a, b = refs[lo], refs[hi]
    u = (t - a.stamp) / (b.stamp - a.stamp)
    pos = a.position + u * (b.position - a.position)
    heading = wrap_heading(a.heading + u * wrap_heading(b.heading - a.heading))
    return pos, heading


def plant_step(
    state: PlantState,
    pending_refs: Sequence[TrajectoryPoint],
    t: float,
    dt: float,
    params: PlantParams,
) -> PlantState:
    """First-order lag toward the interpolated reference, velocity-saturated."""
    if dt <= 0.0:
        raise ValueError("plant_step requires dt > 0")
    if not pending_refs:
        return PlantState(state.position, state.heading, np.zeros(3), 0.0)
    target, target_heading = _interp_refs(pending_refs, t)
    # scalar math: this runs at the tick rate
    inv_tau = 1.0 / params.time_constant
    px, py, pz = state.position
    vx = (target[0] - px) * inv_tau
    vy = (target[1] - py) * inv_tau
    vz = (target[2] - pz) * inv_tau
    speed = math.sqrt(vx * vx + vy * vy + vz * vz)
    if speed > params.max_speed:
        scale = params.max_speed / speed
        vx *= scale
        vy *= scale
        vz *= scale
    rate = wrap_heading(target_heading - state.heading) * inv_tau
    rate = max(-params.max_heading_rate, min(params.max_heading_rate, rate))
    return PlantState(
        np.array([px + vx * dt, py + vy * dt, pz + vz * dt]),
        wrap_heading(state.heading + rate * dt),
        np.array([vx, vy, vz]),
        rate,
    )


# ---------------------------------------------------------------------------
# scenario loop


_STREAM_DET_NOISE = 1
_STREAM_DET_DELAY = 2
_STREAM_VIO_NOISE = 3
_STREAM_VIO_DELAY = 4
_STREAM_REF_DELAY = 5
_STREAM_DRIFT = 6


def _stream_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream]))


def run_scenario(config: ScenarioConfig) -> EventLog:
    """Run one closed-loop scenario and return its event log."""
    v = config.values
    seed = v["scenario.seed"]
    tick_rate = v["scenario.tick_rate"]
    dt = 1.0 / tick_rate
    desired = generate_trajectory(v)
    path = ReferencePath(v, desired)
    traj_start = desired.points[0].stamp
    traj_end = desired.points[-1].stamp
    duration = v["scenario.duration"] or (traj_end + 5.0)
    n_ticks = int(round(duration * tick_rate))

    det_noise_rng = _stream_rng(seed, _STREAM_DET_NOISE)
    det_delay_rng = _stream_rng(seed, _STREAM_DET_DELAY)
    vio_noise_rng = _stream_rng(seed, _STREAM_VIO_NOISE)
    vio_delay_rng = _stream_rng(seed, _STREAM_VIO_DELAY)
    ref_delay_rng = _stream_rng(seed, _STREAM_REF_DELAY)
    drift_rng = _stream_rng(seed, _STREAM_DRIFT)

    drift = make_drift(v)
    theta0 = v["vio.initial_heading"]
    t0 = np.asarray(v["vio.initial_offset"], float)
    R0 = rot_z(theta0)

    walls = v["nlos.walls"]
    if walls and isinstance(walls[0], float):
        walls = (walls,)
    false_targets = v["false_targets.positions"]
    if false_targets and isinstance(false_targets[0], float):
        false_targets = (false_targets,)

    guider = Guider(config.alignment, config.tracker, config.guider)

    first = desired.points[0]
    plant = PlantState(R0 @ first.position + t0,
                       wrap_heading(first.heading + theta0),
                       np.zeros(3), 0.0)
    plant_params = PlantParams(v["plant.time_constant"], v["plant.max_speed"],
                               v["plant.max_heading_rate"])
    pending_refs: tuple[TrajectoryPoint, ...] = ()

    log = EventLog()
    for key, value in config.effective_items():
        log.append(("H", key, format_value(value)))

    det_period = 1.0 / v["detection.rate"]
    vio_period = 1.0 / v["vio.rate"]
    ref_period = 1.0 / v["guider.ref_rate"]
    decim = v["scenario.truth_log_decimation"]
    det_sigma = v["detection.sigma"]
    det_delay_mean = v["detection.delay_mean"]
    det_delay_jitter = v["detection.delay_jitter"]
    comm_mean = v["comm.delay_mean"]
    comm_jitter = v["comm.delay_jitter"]
    vio_noise = v["vio.noise_sigma"]
    abort_radius = v["scenario.abort_radius"]
    horizon = v["guider.stream_horizon"]

    next_det = 0.0
    next_vio = 0.0
    next_ref = 0.0
    eps = 1e-9
    events: list[tuple[float, int, str, object]] = []
    seq = 0
    t = 0.0

    abort_every = max(1, int(round(tick_rate / 10.0)))
    c0 = math.cos(-theta0)
    s0 = math.sin(-theta0)
    t0x, t0y, t0z = t0

    for k in range(n_ticks + 1):
        t = k * dt
        if k:
            drift.step(dt, drift_rng)
            plant = plant_step(plant, pending_refs, t, dt, plant_params)

        # ground truth of the secondary in L, derived from the plant's V pose
        # (scalar form of R0_inv @ (p - t0 - offset); this runs per tick)
        off = drift.offset
        dx = plant.position[0] - t0x - off[0]
        dy = plant.position[1] - t0y - off[1]
        dz = plant.position[2] - t0z - off[2]
        truth_pos = np.array([c0 * dx - s0 * dy, s0 * dx + c0 * dy, dz])
        truth_heading = wrap_heading(plant.heading - theta0)

        # deliver due events
        while events and events[0][0] <= t + eps:
            _, _, kind, payload = heapq.heappop(events)
            if kind == "det":
                guider.ingest_detections(payload)
            elif kind == "vio":
                guider.ingest_vio(payload)
            else:
                pending_refs = payload

        # sensor sampling on the tick grid
        if t >= next_det - eps:
            next_det += det_period
            prim_pos, _ = primary_pose(v, t)
            dets = lidar_detect(t, truth_pos, prim_pos, false_targets, walls,
                                det_noise_rng, det_sigma)
            if dets:
                arrival = t + det_delay_mean + det_delay_jitter * float(det_delay_rng.random())
                for d in dets:
                    log.append(("DET", t, arrival, d.track_id,
                                float(d.position[0]), float(d.position[1]),
                                float(d.position[2]), det_sigma))
                seq += 1
                heapq.heappush(events, (arrival, seq, "det", dets))

        if t >= next_vio - eps:
            next_vio += vio_period
            pos = plant.position
            if vio_noise > 0.0:
                pos = pos + vio_noise_rng.normal(0.0, vio_noise, 3)
            pose = TimedPose(t, Frame.VIO, pos, plant.heading,
                             plant.velocity, plant.heading_rate)
            arrival = t + comm_mean + comm_jitter * float(vio_delay_rng.random())
            log.append(("VIO", t, arrival,
                        float(pose.position[0]), float(pose.position[1]),
                        float(pose.position[2]), float(pose.velocity[0]),
                        float(pose.velocity[1]), float(pose.velocity[2]),
                        pose.heading, pose.heading_rate))
            log.append(("DR", t, float(drift.offset[0]), float(drift.offset[1]),
                        float(drift.offset[2])))
            seq += 1
            heapq.heappush(events, (arrival, seq, "vio", pose))

        if t >= next_ref - eps:
            next_ref += ref_period
            streamed: Optional[Trajectory] = None
            if guider.initialized:
                out = guider.current_output(t)
                T = out.transform_l_to_s
                log.append(("EST", t, out.status.value,
                            float(out.secondary_pose_in_l.position[0]),
                            float(out.secondary_pose_in_l.position[1]),
                            float(out.secondary_pose_in_l.position[2]),
                            out.secondary_pose_in_l.heading,
                            float(T.translation[0]), float(T.translation[1]),
                            float(T.translation[2]), T.heading))
                streamed = guider.transform_and_stream(desired, t)
            else:
                # operator-assisted start: true transform until initialization
                pts = tuple(
                    TrajectoryPoint(p.stamp,
                                    R0 @ p.position + t0 + drift.offset,
                                    p.heading + theta0)
                    for p in desired.slice_window(t, t + horizon)
                )
                if pts:
                    streamed = Trajectory(Frame.VIO, pts)
            if streamed is not None and len(streamed):
                arrival = t + comm_mean + comm_jitter * float(ref_delay_rng.random())
                log.append(("REF", t, arrival,
                            tuple((p.stamp, float(p.position[0]),
                                   float(p.position[1]), float(p.position[2]),
                                   p.heading) for p in streamed.points)))
                seq += 1
                heapq.heappush(events, (arrival, seq, "ref", streamed.points))

        if k % decim == 0:
            prim_pos, prim_heading = primary_pose(v, t)
            log.append(("TP", t, float(prim_pos[0]), float(prim_pos[1]),
                        float(prim_pos[2]), prim_heading))
            log.append(("TS", t, float(truth_pos[0]), float(truth_pos[1]),
                        float(truth_pos[2]), truth_heading))

        if (t >= traj_start and k % abort_every == 0
                and path.distance(truth_pos) > abort_radius):
            log.append(("FAIL", t))
            break

    log.append(("END", t))
    return log
