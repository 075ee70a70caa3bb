"""Procedural indoor scenes: paired RGB rasters, 360-beam range scans, and
exact traversability masks, plus episode sampling over generated pools.

World model: the camera and laser sit at the origin of a rectangular room,
facing +y, camera h_cam above the floor with focal length W/2 pixels (a 90
degree horizontal field of view). Obstacles are vertical boxes standing on
rectangular footprints; their height always exceeds the camera height so a
column's view of the floor ends at the nearest obstruction. Rendering is
per-column analytic perspective (no sampling error), ray casting is
analytic segment intersection, and both derive from the same plan, so the
scan and the image agree exactly.

Domains are floor styles. Wall styles and obstacle palettes are shared
across domains, and some obstacle colors deliberately collide with floor
and wall colors, so appearance alone is ambiguous where geometry is not.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .depth import DepthScan, load_scan, save_scan
from .errors import ContractError, SamplingError, ValidationError
from .fusion import RgbImage, load_ppm, save_ppm
from .prototypes import SupportMask, load_pgm, save_pgm

H_CAM = 0.35
MAX_RANGE = 5.0
BEAMS = 360
FOV_NOMINAL = (135, 225)
FOV_JITTER = 3

FLOOR_STYLES = ("carpet_dark", "tile_white", "plastic_color", "wood")
FLOOR_BASE = {
    "carpet_dark": ((0.17, 0.16, 0.19), 0.030),
    "tile_white": ((0.88, 0.88, 0.85), 0.020),
    "plastic_color": ((0.21, 0.46, 0.62), 0.040),
    "wood": ((0.50, 0.35, 0.21), 0.045),
}
WALL_STYLES = ("white_flat", "beige_flat", "gray_flat")
WALL_BASE = {
    "white_flat": ((0.90, 0.90, 0.87), 0.012),
    "beige_flat": ((0.70, 0.62, 0.50), 0.012),
    "gray_flat": ((0.47, 0.48, 0.50), 0.012),
}
BOX_PALETTE = ((0.23, 0.22, 0.24), (0.52, 0.36, 0.22),
               (0.84, 0.84, 0.80), (0.22, 0.30, 0.58))
LEG_PALETTE = ((0.13, 0.13, 0.14), (0.55, 0.56, 0.58), (0.80, 0.79, 0.76))

SPLIT_CODES = {"train": 0, "support": 1, "query": 2}


@dataclass(frozen=True)
class Obstacle:
    kind: str  # "box" or "thin_leg"
    cx: float
    cy: float
    half_w: float
    half_d: float
    height: float
    color: tuple[float, float, float]

    def bounds(self) -> tuple[float, float, float, float]:
        return (self.cx - self.half_w, self.cx + self.half_w,
                self.cy - self.half_d, self.cy + self.half_d)

    def contains(self, x: float, y: float) -> bool:
        x0, x1, y0, y1 = self.bounds()
        return x0 <= x <= x1 and y0 <= y <= y1


@dataclass(frozen=True)
class RoomBox:
    front: float      # wall at y = front
    half_x: float     # walls at x = +/- half_x
    back: float       # wall at y = -back


@dataclass(frozen=True)
class ScenePlan:
    seed: int
    floor_style: str
    wall_style: str
    room: RoomBox
    obstacles: tuple[Obstacle, ...]
    fov_jitter: tuple[int, int]

    def __post_init__(self):
        if self.floor_style not in FLOOR_STYLES:
            raise ValidationError(f"unknown floor style {self.floor_style!r}")
        if self.wall_style not in WALL_STYLES:
            raise ValidationError(f"unknown wall style {self.wall_style!r}")
        r = self.room
        if r.front <= 0.5 or r.half_x <= 0.5 or r.back <= 0.1:
            raise ValidationError(f"degenerate room {r}")
        for obs in self.obstacles:
            x0, x1, y0, y1 = obs.bounds()
            if x0 < -r.half_x + 0.02 or x1 > r.half_x - 0.02 or \
                    y1 > r.front - 0.02 or y0 < -r.back + 0.02:
                raise ValidationError(f"obstacle outside room bounds: {obs}")
            if y0 < 0.35 and obs.contains(0.0, 0.0):
                raise ValidationError(f"obstacle contains the sensor origin: {obs}")
            if obs.height <= H_CAM:
                raise ValidationError(
                    f"obstacle height {obs.height} must exceed camera height {H_CAM}")


def wall_segments(room: RoomBox) -> np.ndarray:
    """Four wall segments as [4, 2(endpoint), 2(xy)]."""
    f, hx, b = room.front, room.half_x, room.back
    return np.array([
        [[-hx, f], [hx, f]],
        [[hx, f], [hx, -b]],
        [[hx, -b], [-hx, -b]],
        [[-hx, -b], [-hx, f]],
    ], dtype=np.float64)


def obstacle_segments(obs: Obstacle) -> np.ndarray:
    x0, x1, y0, y1 = obs.bounds()
    return np.array([
        [[x0, y0], [x1, y0]],
        [[x1, y0], [x1, y1]],
        [[x1, y1], [x0, y1]],
        [[x0, y1], [x0, y0]],
    ], dtype=np.float64)


def plan_segments(plan: ScenePlan) -> np.ndarray:
    segs = [wall_segments(plan.room)]
    segs.extend(obstacle_segments(o) for o in plan.obstacles)
    return np.concatenate(segs, axis=0)


def _ray_batch(dirs: np.ndarray, segments: np.ndarray, max_range: float) -> np.ndarray:
    """Nearest intersection distance per unit direction, clipped to max_range.

    Rays start at the origin. Analytic: solve t*d = A + s*(B-A) per segment.
    """
    a = segments[:, 0]
    e = segments[:, 1] - segments[:, 0]
    denom = dirs[:, 0:1] * e[None, :, 1] - dirs[:, 1:2] * e[None, :, 0]
    cross_ae = a[:, 0] * e[:, 1] - a[:, 1] * e[:, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = cross_ae[None, :] / denom
        s = (a[None, :, 0] * dirs[:, 1:2] - a[None, :, 1] * dirs[:, 0:1]) / denom
    valid = (np.abs(denom) > 1e-15) & (t > 1e-9) & (s >= 0.0) & (s <= 1.0)
    t = np.where(valid, t, np.inf)
    return np.minimum(t.min(axis=1), max_range)


def raycast(plan: ScenePlan, origin: tuple[float, float], angle: float,
            max_range: float = MAX_RANGE) -> float:
    """Distance from origin along bearing `angle` (radians, 0 = +y, positive
    toward +x) to the nearest wall or obstacle edge, clipped to max_range.
    """
    ox, oy = origin
    r = plan.room
    if not (-r.half_x < ox < r.half_x and -r.back < oy < r.front):
        raise ValidationError(f"ray origin {origin} outside the room")
    for obs in plan.obstacles:
        if obs.contains(ox, oy):
            raise ContractError(f"ray origin lies inside obstacle {obs}")
    segs = plan_segments(plan) - np.array([ox, oy])
    d = np.array([[math.sin(angle), math.cos(angle)]])
    return float(_ray_batch(d, segs, max_range)[0])


def scan_plan(plan: ScenePlan, beams: int = BEAMS,
              max_range: float = MAX_RANGE) -> np.ndarray:
    """All-beam range ring; beam b points at bearing (b - beams/2) degrees."""
    bearing = np.deg2rad(np.arange(beams) - beams / 2.0)
    dirs = np.stack([np.sin(bearing), np.cos(bearing)], axis=1)
    return _ray_batch(dirs, plan_segments(plan), max_range)


def plan_from_seed(seed: int, floor_style: str | None = None,
                   height: int = 60, width: int = 80) -> ScenePlan:
    """Deterministic scene layout; thin-leg pixel budget kept below 1%."""
    rng = np.random.default_rng(seed)
    floor = floor_style or FLOOR_STYLES[int(rng.integers(len(FLOOR_STYLES)))]
    wall = WALL_STYLES[int(rng.integers(len(WALL_STYLES)))]
    room = RoomBox(front=float(rng.uniform(2.3, 4.0)),
                   half_x=float(rng.uniform(1.7, 3.0)),
                   back=float(rng.uniform(0.6, 1.2)))
    f_pix = width / 2.0
    obstacles: list[Obstacle] = []

    n_box = 1 + int(rng.random() < 0.45)
    for _ in range(n_box):
        bearing = rng.uniform(-0.62, 0.62)
        y = float(rng.uniform(0.9, min(room.front - 0.5, 3.2)))
        cx = float(math.tan(bearing) * y)
        half_w = float(rng.uniform(0.09, 0.28))
        half_d = float(rng.uniform(0.09, 0.28))
        h = float(rng.uniform(0.45, 0.75))
        if rng.random() < 0.7:  # camouflaged against the floor
            base = np.array(FLOOR_BASE[floor][0])
            color = tuple(np.clip(base + rng.uniform(-0.05, 0.05, 3), 0.02, 0.98))
        else:
            color = BOX_PALETTE[int(rng.integers(len(BOX_PALETTE)))]
        cx = float(np.clip(cx, -room.half_x + half_w + 0.05,
                           room.half_x - half_w - 0.05))
        obstacles.append(Obstacle("box", cx, y, half_w, half_d, h, tuple(color)))

    leg_budget = 0.0098 * height * width
    n_leg = int(rng.choice([0, 1, 2], p=[0.10, 0.40, 0.50]))
    leg_px = 0.0
    for _ in range(n_leg):
        bearing = rng.uniform(-0.55, 0.55)
        y = float(rng.uniform(1.7, min(room.front - 0.35, 3.2)))
        target_px = rng.uniform(1.0, 1.1)
        half_w = float(target_px * y / f_pix / 2.0)
        # Height stays just above the scan plane so the beam sees the leg.
        h = float(rng.uniform(0.37, 0.42))
        # Conservative painted-pixel estimate: columns swell by sec^2 of the
        # bearing (up to 1.4 at the FOV edge), rows span f*h/y_near.
        est = (target_px * 1.4 + 1) * (f_pix * h / (y - half_w) + 1.5)
        if leg_px + est > leg_budget:
            continue
        leg_px += est
        cx = float(math.tan(bearing) * y)
        cx = float(np.clip(cx, -room.half_x + half_w + 0.05,
                           room.half_x - half_w - 0.05))
        if rng.random() < 0.9:  # scan-only legs: rgb matches the floor
            base = np.array(FLOOR_BASE[floor][0])
            color = tuple(np.clip(base + rng.uniform(-0.04, 0.04, 3), 0.02, 0.98))
        else:
            color = LEG_PALETTE[int(rng.integers(len(LEG_PALETTE)))]
        obstacles.append(Obstacle("thin_leg", cx, y, half_w, half_w, h,
                                  tuple(color)))

    jit = (int(rng.integers(-FOV_JITTER, FOV_JITTER + 1)),
           int(rng.integers(-FOV_JITTER, FOV_JITTER + 1)))
    return ScenePlan(seed, floor, wall, room, tuple(obstacles), jit)


@dataclass
class Sample:
    rgb: RgbImage
    scan: DepthScan
    truth: SupportMask
    domain_tag: str
    meta: dict = field(default_factory=dict)

    @property
    def eligible(self) -> bool:
        """Both label polarities present, as episodic supports require."""
        m = self.truth.mask
        return bool(m.any() and (1 - m).any())


def _ray_rect(dx: float, dy: float, bounds) -> tuple[float, float] | None:
    """Slab intersection of the origin ray with an axis-aligned rectangle."""
    x0, x1, y0, y1 = bounds
    t0, t1 = 0.0, math.inf
    for d, lo, hi in ((dx, x0, x1), (dy, y0, y1)):
        if abs(d) < 1e-12:
            if not lo <= 0.0 <= hi:
                return None
        else:
            ta, tb = lo / d, hi / d
            if ta > tb:
                ta, tb = tb, ta
            t0, t1 = max(t0, ta), min(t1, tb)
    if t0 > t1 or t1 <= 1e-9:
        return None
    return t0, t1


def _dilate8(mask: np.ndarray) -> np.ndarray:
    """Binary dilation with the 3x3 structuring element."""
    out = mask.copy()
    out[1:, :] |= mask[:-1, :]
    out[:-1, :] |= mask[1:, :]
    out[:, 1:] |= out[:, :-1].copy()
    out[:, :-1] |= out[:, 1:].copy()
    return out


def generate_scene(plan: ScenePlan, height: int = 60, width: int = 80) -> Sample:
    """Render the plan: RGB raster, range scan, exact traversability mask.

    The mask marks visible floor as 1, everything else 0, with obstacle
    pixels expanded by a 1-pixel safety dilation.
    """
    f = width / 2.0
    floor_base, floor_noise = FLOOR_BASE[plan.floor_style]
    wall_base, wall_noise = WALL_BASE[plan.wall_style]

    base = np.zeros((3, height, width), dtype=np.float64)
    level = np.zeros((height, width), dtype=np.float64)
    mask = np.zeros((height, width), dtype=np.uint8)
    obst_px = np.zeros((height, width), dtype=bool)
    leg_px = np.zeros((height, width), dtype=bool)

    vr = np.arange(height) + 0.5 - height / 2.0
    wall_segs = wall_segments(plan.room)
    for u in range(width):
        dx = (u + 0.5 - width / 2.0) / f
        inv_norm = 1.0 / math.sqrt(1.0 + dx * dx)
        d = np.array([[dx * inv_norm, inv_norm]])
        r_wall = float(_ray_batch(d, wall_segs, math.inf)[0])
        y_wall = r_wall * inv_norm
        vr_wall = f * H_CAM / y_wall

        is_floor = vr > vr_wall
        base[:, is_floor, u] = np.array(floor_base)[:, None]
        level[is_floor, u] = floor_noise
        base[:, ~is_floor, u] = np.array(wall_base)[:, None]
        level[~is_floor, u] = wall_noise
        mask[is_floor, u] = 1

        hits = []
        for obs in plan.obstacles:
            span = _ray_rect(dx * inv_norm, inv_norm, obs.bounds())
            if span is not None:
                hits.append((span[0], obs))
        for t_in, obs in sorted(hits, key=lambda h: -h[0]):
            y_in = t_in * inv_norm
            top = f * (H_CAM - obs.height) / y_in
            bottom = f * H_CAM / y_in
            rows = (vr >= top) & (vr <= bottom)
            base[:, rows, u] = np.array(obs.color)[:, None]
            level[rows, u] = 0.02
            mask[rows, u] = 0
            obst_px[rows, u] = True
            leg_px[rows, u] = obs.kind == "thin_leg"

    mask[_dilate8(obst_px)] = 0

    noise = np.random.default_rng([plan.seed, 3]).uniform(-1.0, 1.0, (height, width))
    rgb = np.clip(base * (1.0 + level[None] * noise[None]), 0.0, 1.0)

    ranges = scan_plan(plan)
    fov = (FOV_NOMINAL[0] + plan.fov_jitter[0], FOV_NOMINAL[1] + plan.fov_jitter[1])
    scan = DepthScan(ranges, fov[0], fov[1], MAX_RANGE)

    leg_total = int(leg_px.sum())
    if leg_total >= 0.01 * height * width:
        raise ValidationError(
            f"scene {plan.seed}: thin legs cover {leg_total} px, over the 1% budget")

    meta = {
        "seed": plan.seed, "floor_style": plan.floor_style,
        "wall_style": plan.wall_style, "fov_start": fov[0], "fov_end": fov[1],
        "n_box": sum(o.kind == "box" for o in plan.obstacles),
        "n_leg": sum(o.kind == "thin_leg" for o in plan.obstacles),
        "leg_runs": encode_runs(leg_px), "height": height, "width": width,
    }
    return Sample(RgbImage(rgb), scan, SupportMask(mask), plan.floor_style, meta)


def encode_runs(px: np.ndarray) -> str:
    """Column runs of a boolean map as 'u:v0:v1;...' (v1 inclusive)."""
    runs = []
    for u in range(px.shape[1]):
        col = px[:, u]
        v = 0
        while v < col.size:
            if col[v]:
                v0 = v
                while v + 1 < col.size and col[v + 1]:
                    v += 1
                runs.append(f"{u}:{v0}:{v}")
            v += 1
    return ";".join(runs)


def decode_runs(s: str, height: int, width: int) -> np.ndarray:
    px = np.zeros((height, width), dtype=bool)
    if s:
        for item in s.split(";"):
            u, v0, v1 = (int(x) for x in item.split(":"))
            px[v0:v1 + 1, u] = True
    return px


# --------------------------------------------------------------------------
# Dataset directory IO


def save_sample(scene_dir: str | Path, sample: Sample) -> None:
    d = Path(scene_dir)
    d.mkdir(parents=True, exist_ok=True)
    save_ppm(d / "rgb.ppm", sample.rgb)
    save_scan(d / "scan.txt", sample.scan)
    save_pgm(d / "mask.pgm", sample.truth)
    lines = [f"{k}={sample.meta[k]}" for k in sorted(sample.meta)]
    (d / "meta.txt").write_text("\n".join(lines) + "\n")


def load_sample(scene_dir: str | Path) -> Sample:
    d = Path(scene_dir)
    meta: dict = {}
    for ln in (d / "meta.txt").read_text().splitlines():
        if ln.strip():
            k, v = ln.split("=", 1)
            meta[k] = v
    for key in ("seed", "fov_start", "fov_end", "n_box", "n_leg", "height", "width"):
        meta[key] = int(meta[key])
    return Sample(load_ppm(d / "rgb.ppm"), load_scan(d / "scan.txt"),
                  load_pgm(d / "mask.pgm"), meta["floor_style"], meta)


def scene_seed(base_seed: int, index: int, split: str) -> int:
    """Split-coded seeds: distinct splits can never share a scene seed."""
    if split not in SPLIT_CODES:
        raise ValidationError(f"unknown split {split!r}")
    return 3 * (base_seed + index) + SPLIT_CODES[split]


def gen_dataset(out_root: str | Path, count: int, split: str, base_seed: int,
                height: int = 60, width: int = 80,
                styles: tuple[str, ...] | None = None) -> list[Path]:
    """Write `count` scenes under out_root/scenes/<split>/<seed>/.

    Floor styles cycle deterministically so every included domain is
    represented; scene geometry stays split-disjoint through scene_seed.
    Domain shift is enforced at episode sampling time (support and query
    floors always differ), not by holding styles out of pretraining.
    """
    if count < 1:
        raise ValidationError(f"scene count must be positive, got {count}")
    if styles is None:
        styles = FLOOR_STYLES
    for s in styles:
        if s not in FLOOR_STYLES:
            raise ValidationError(f"unknown floor style {s!r}")
    dirs = []
    for i in range(count):
        seed = scene_seed(base_seed, i, split)
        style = styles[i % len(styles)]
        sample = generate_scene(plan_from_seed(seed, style, height, width),
                                height, width)
        d = Path(out_root) / "scenes" / split / str(seed)
        save_sample(d, sample)
        dirs.append(d)
    return dirs


def load_split(root: str | Path, split: str) -> list[Sample]:
    base = Path(root) / "scenes" / split
    if not base.is_dir():
        raise ValidationError(f"no such split directory: {base}")
    dirs = sorted((p for p in base.iterdir() if p.is_dir()),
                  key=lambda p: int(p.name))
    if not dirs:
        raise ValidationError(f"split {split!r} is empty under {base}")
    return [load_sample(d) for d in dirs]


# --------------------------------------------------------------------------
# Episodes


@dataclass
class EpisodePool:
    """Disjoint sample pools episodes draw from (supports vs queries)."""

    support: list[Sample]
    query: list[Sample]

    @classmethod
    def from_root(cls, root: str | Path) -> "EpisodePool":
        return cls(load_split(root, "support"), load_split(root, "query"))


@dataclass
class Episode:
    support: list[Sample]
    query: list[Sample]
    k: int
    seed: int
    support_domain: str
    query_domain: str


def _by_domain(samples: list[Sample]) -> dict[str, list[Sample]]:
    groups: dict[str, list[Sample]] = {}
    for s in samples:
        groups.setdefault(s.domain_tag, []).append(s)
    return groups


def sample_episode(pool: EpisodePool, k: int, seed: int, m: int = 4) -> Episode:
    """Deterministic episode draw: m queries from one domain, then k
    eligible supports from a different domain.

    Queries are drawn before supports from the same stream, so episodes
    with equal seeds but different k share their query sets exactly.
    """
    if k not in (1, 5):
        raise ValidationError(f"shot count must be 1 or 5, got {k}")
    if m < 1:
        raise ValidationError(f"query count must be positive, got {m}")
    q_groups = _by_domain(pool.query)
    s_groups = _by_domain(pool.support)
    q_domains = sorted(t for t, g in q_groups.items() if len(g) >= m)
    if not q_domains:
        raise SamplingError(f"no query domain holds {m} samples")
    rng = np.random.default_rng(seed)
    for _ in range(100):
        qd = q_domains[int(rng.integers(len(q_domains)))]
        q_pick = rng.choice(len(q_groups[qd]), size=m, replace=False)
        s_domains = sorted(t for t, g in s_groups.items()
                           if t != qd and len(g) >= k)
        if not s_domains:
            continue
        sd = s_domains[int(rng.integers(len(s_domains)))]
        s_pick = rng.choice(len(s_groups[sd]), size=k, replace=False)
        supports = [s_groups[sd][i] for i in s_pick]
        if all(s.eligible for s in supports):
            queries = [q_groups[qd][i] for i in q_pick]
            return Episode(supports, queries, k, seed, sd, qd)
    raise SamplingError(
        f"episode seed {seed}: no eligible support draw in 100 attempts "
        f"(domains support={sorted(s_groups)}, query={sorted(q_groups)})")
