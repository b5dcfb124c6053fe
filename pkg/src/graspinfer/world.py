"""A desk-scale 2D grasp world with an exact success oracle.

Objects are rectangles, ellipses or capsules inside the unit square.  A
grasp is ``theta = (gx, gy, psi, h)``: the point midway between the two
fingertips, the direction of the closing axis, and the half-opening.
Fingertips sit at ``(gx, gy) +- h * (cos psi, sin psi)``.
"""

from __future__ import annotations

import io
import math
import os
from dataclasses import dataclass, field, replace
from functools import partial

import numpy as np

GRID = 32
CELL = 1.0 / GRID
N_CHANNELS = 4
THETA_DIM = 4
SDF_CLAMP = 0.2
NORMAL_BAND = 0.05
KINDS = ("rectangle", "ellipse", "capsule")

OUTCOME_REASONS = ("no-contact", "too-narrow", "too-wide", "off-center", "finger-collision")


@dataclass(frozen=True)
class Calibration:
    """Knobs of the oracle, the heuristic and data collection."""

    slack: float = 0.06  # allowed excess of the opening over the object width
    offset_frac: float = 0.5  # allowed centre-line offset, as a fraction of min(a, b)
    standoff: float = 0.03  # palm distance outside the bounding-box face
    reach: float = 0.10  # palm to fingertip-midpoint distance
    normal_noise: float = 0.002
    opening_noise: float = 0.02
    explore_xy: float = 0.018  # extra data-collection perturbation of the heuristic
    explore_psi: float = 0.2
    explore_h: float = 0.02

    def items(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


DEFAULT_CALIBRATION = Calibration()


def f32(x):
    """Round to the nearest float32 value, returned as float64."""
    return np.asarray(x, dtype=np.float32).astype(np.float64)


# ---------------------------------------------------------------------------
# Shapes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ObjectShape:
    kind: str
    cx: float
    cy: float
    phi: float
    a: float  # half-extent along the local x axis (a >= b)
    b: float
    family_id: int = 0

    @property
    def shape_id(self):
        return KINDS.index(self.kind)

    @property
    def area(self):
        if self.kind == "rectangle":
            return 4.0 * self.a * self.b
        if self.kind == "ellipse":
            return math.pi * self.a * self.b
        return 4.0 * (self.a - self.b) * self.b + math.pi * self.b**2

    def to_local(self, x, y):
        c, s = math.cos(self.phi), math.sin(self.phi)
        dx, dy = np.asarray(x) - self.cx, np.asarray(y) - self.cy
        return c * dx + s * dy, -s * dx + c * dy

    def to_world_dir(self, lx, ly):
        c, s = math.cos(self.phi), math.sin(self.phi)
        return c * lx - s * ly, s * lx + c * ly

    def mirrored(self):
        """Reflection ``x -> 1 - x``; all three kinds are symmetric about their axes."""
        return replace(self, cx=1.0 - self.cx, phi=_wrap(-self.phi))

    def rotated(self, angle, pivot=(0.5, 0.5)):
        c, s = math.cos(angle), math.sin(angle)
        dx, dy = self.cx - pivot[0], self.cy - pivot[1]
        return replace(
            self,
            cx=pivot[0] + c * dx - s * dy,
            cy=pivot[1] + s * dx + c * dy,
            phi=_wrap(self.phi + angle),
        )


def _wrap(angle):
    return (angle + math.pi) % (2.0 * math.pi) - math.pi


def inside(shape, x, y):
    """Closed membership test (boundary counts as inside)."""
    lx, ly = shape.to_local(x, y)
    a, b = shape.a, shape.b
    if shape.kind == "rectangle":
        return (np.abs(lx) <= a) & (np.abs(ly) <= b)
    if shape.kind == "ellipse":
        return (lx / a) ** 2 + (ly / b) ** 2 <= 1.0
    core = a - b
    qx = np.maximum(np.abs(lx) - core, 0.0)
    return qx**2 + ly**2 <= b * b


def signed_distance(shape, x, y):
    """Signed distance (negative inside) and outward unit normals in world frame.

    The ellipse distance is a first-order approximation with exact sign;
    its normal is the normalized gradient of the implicit function.
    """
    lx, ly = shape.to_local(x, y)
    lx, ly = np.asarray(lx, dtype=float), np.asarray(ly, dtype=float)
    a, b = shape.a, shape.b
    sx = np.where(lx >= 0, 1.0, -1.0)
    sy = np.where(ly >= 0, 1.0, -1.0)
    if shape.kind == "rectangle":
        qx, qy = np.abs(lx) - a, np.abs(ly) - b
        ox, oy = np.maximum(qx, 0.0), np.maximum(qy, 0.0)
        outer = np.hypot(ox, oy)
        d = outer + np.minimum(np.maximum(qx, qy), 0.0)
        safe = np.where(outer > 0, outer, 1.0)
        x_face = qx >= qy
        nx = np.where(outer > 0, sx * ox / safe, np.where(x_face, sx, 0.0))
        ny = np.where(outer > 0, sy * oy / safe, np.where(x_face, 0.0, sy))
    elif shape.kind == "ellipse":
        k0 = np.hypot(lx / a, ly / b)
        k1 = np.hypot(lx / a**2, ly / b**2)
        safe_k1 = np.where(k1 > 0, k1, 1.0)
        d = np.where(k1 > 0, k0 * (k0 - 1.0) / safe_k1, -b)
        gx, gy = lx / a**2, ly / b**2
        norm = np.hypot(gx, gy)
        safe = np.where(norm > 0, norm, 1.0)
        nx = np.where(norm > 0, gx / safe, 0.0)
        ny = np.where(norm > 0, gy / safe, 0.0)
    else:
        core = a - b
        px = np.clip(lx, -core, core)
        rx, ry = lx - px, ly
        r = np.hypot(rx, ry)
        d = r - b
        safe = np.where(r > 0, r, 1.0)
        nx = np.where(r > 0, rx / safe, 0.0)
        ny = np.where(r > 0, ry / safe, 1.0)
    wx, wy = shape.to_world_dir(nx, ny)
    return d, wx, wy


def chord(shape, px, py, dx, dy):
    """Parameter interval ``[t0, t1]`` where ``p + t * d`` lies in the shape, or None.

    ``d`` must be a unit vector.  All shapes are convex, so the
    intersection is a single interval.
    """
    lx, ly = shape.to_local(px, py)
    c, s = math.cos(shape.phi), math.sin(shape.phi)
    ux, uy = c * dx + s * dy, -s * dx + c * dy
    a, b = shape.a, shape.b
    if shape.kind == "rectangle":
        return _slab(lx, ly, ux, uy, a, b)
    if shape.kind == "ellipse":
        return _ellipse_chord(lx, ly, ux, uy, a, b)
    core = a - b
    pieces = [
        _slab(lx, ly, ux, uy, core, b) if core > 0 else None,
        _ellipse_chord(lx - core, ly, ux, uy, b, b),
        _ellipse_chord(lx + core, ly, ux, uy, b, b),
    ]
    pieces = [p for p in pieces if p is not None]
    if not pieces:
        return None
    return min(p[0] for p in pieces), max(p[1] for p in pieces)


def _slab(lx, ly, ux, uy, a, b):
    t0, t1 = -math.inf, math.inf
    for p, u, half in ((lx, ux, a), (ly, uy, b)):
        if abs(u) < 1e-15:
            if abs(p) > half:
                return None
            continue
        ta, tb = (-half - p) / u, (half - p) / u
        t0, t1 = max(t0, min(ta, tb)), min(t1, max(ta, tb))
    if t0 > t1:
        return None
    return t0, t1


def _ellipse_chord(lx, ly, ux, uy, a, b):
    qa = (ux / a) ** 2 + (uy / b) ** 2
    qb = 2.0 * (lx * ux / a**2 + ly * uy / b**2)
    qc = (lx / a) ** 2 + (ly / b) ** 2 - 1.0
    disc = qb * qb - 4.0 * qa * qc
    if disc < 0:
        return None
    root = math.sqrt(disc)
    return (-qb - root) / (2.0 * qa), (-qb + root) / (2.0 * qa)


# ---------------------------------------------------------------------------
# Families and scenes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Family:
    family_id: int
    kind: str
    a: float
    b: float


def default_families(n=24):
    """``n`` object families cycling through the three kinds and a size ladder."""
    fams = []
    for i in range(n):
        kind = KINDS[i % 3]
        step = i // 3
        a = 0.07 + 0.017 * (step % 8)
        aspect = (0.45, 0.8, 0.6, 1.0, 0.5, 0.7, 0.9, 0.55)[(i * 5) % 8]
        b = max(0.035, min(a, a * aspect))
        fams.append(Family(i, kind, round(a, 4), round(b, 4)))
    return fams


def render(shape):
    """Render a ``(4, GRID, GRID)`` observation grid, float32-valued."""
    centers = (np.arange(GRID) + 0.5) * CELL
    x, y = np.meshgrid(centers, centers)  # rows index y, columns index x
    d, nx, ny = signed_distance(shape, x, y)
    band = np.abs(d) <= NORMAL_BAND
    grid = np.stack(
        [
            (d <= 0).astype(float),
            np.clip(d, -SDF_CLAMP, SDF_CLAMP),
            np.where(band, nx, 0.0),
            np.where(band, ny, 0.0),
        ]
    )
    return f32(grid)


def generate_scene(rng, families=None):
    """Draw a family, jitter its size, place it uniformly and render it."""
    families = families or default_families()
    fam = families[int(rng.integers(len(families)))]
    a = fam.a * rng.uniform(0.85, 1.15)
    b = fam.b * rng.uniform(0.85, 1.15)
    a = min(max(a, 0.03), 0.25)
    b = min(max(b, 0.03), a)
    phi = rng.uniform(-math.pi, math.pi)
    cx, cy = rng.uniform(0.4, 0.6, size=2)
    cx = min(max(cx, a), 1.0 - a)
    cy = min(max(cy, a), 1.0 - a)
    vals = f32([cx, cy, phi, a, b])
    shape = ObjectShape(fam.kind, *map(float, vals), family_id=fam.family_id)
    return shape, render(shape)


# ---------------------------------------------------------------------------
# Oracle
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GraspOutcome:
    success: int
    reason: str | None = None


def oracle_execute(shape, theta, calib=DEFAULT_CALIBRATION):
    """Decide grasp success from geometry alone.

    Checks run in order: fingertip collision, contact of the closing
    segment, opening versus object width, centre-line offset.  For convex
    objects a too-narrow opening always collides first, so that reason
    only appears if the collision test is bypassed.
    """
    gx, gy, psi, h = (float(v) for v in theta)
    ex, ey = math.cos(psi), math.sin(psi)
    tips = np.array([[gx + h * ex, gy + h * ey], [gx - h * ex, gy - h * ey]])
    if np.any(inside(shape, tips[:, 0], tips[:, 1])):
        return GraspOutcome(0, "finger-collision")
    span = chord(shape, gx, gy, ex, ey)
    if span is None or span[1] < -h or span[0] > h:
        return GraspOutcome(0, "no-contact")
    width = span[1] - span[0]
    if 2.0 * h < width:
        return GraspOutcome(0, "too-narrow")
    if 2.0 * h > width + calib.slack:
        return GraspOutcome(0, "too-wide")
    offset = abs(-(shape.cx - gx) * ey + (shape.cy - gy) * ex)
    if offset > calib.offset_frac * min(shape.a, shape.b):
        return GraspOutcome(0, "off-center")
    return GraspOutcome(1)


# ---------------------------------------------------------------------------
# Heuristic initial grasps
# ---------------------------------------------------------------------------


def canonical_angle(psi):
    """Closing axes are undirected; map an angle into ``[-pi/2, pi/2)``."""
    return (psi + math.pi / 2) % math.pi - math.pi / 2


@dataclass(frozen=True)
class BoxFit:
    center: np.ndarray
    major: np.ndarray
    minor: np.ndarray
    half_major: float
    half_minor: float


def occupancy_centroid(grid):
    occ = np.asarray(grid)[0] > 0.5
    if not occ.any():
        raise ValueError("observation has no occupied cells")
    rows, cols = np.nonzero(occ)
    return np.array([(cols.mean() + 0.5) * CELL, (rows.mean() + 0.5) * CELL])


def fit_box(grid):
    """Oriented bounding box of the occupied cells via principal axes."""
    occ = np.asarray(grid)[0] > 0.5
    if not occ.any():
        raise ValueError("observation has no occupied cells")
    rows, cols = np.nonzero(occ)
    pts = np.stack([(cols + 0.5) * CELL, (rows + 0.5) * CELL], axis=1)
    mean = pts.mean(axis=0)
    centered = pts - mean
    if len(pts) > 1:
        _, vecs = np.linalg.eigh(centered.T @ centered)
        major = vecs[:, 1]
    else:
        major = np.array([1.0, 0.0])
    if major[0] < 0 or (major[0] == 0 and major[1] < 0):
        major = -major
    minor = np.array([-major[1], major[0]])
    pu, pv = centered @ major, centered @ minor
    center = mean + 0.5 * (pu.max() + pu.min()) * major + 0.5 * (pv.max() + pv.min()) * minor
    return BoxFit(
        center,
        major,
        minor,
        0.5 * (pu.max() - pu.min()) + 0.5 * CELL,
        0.5 * (pv.max() - pv.min()) + 0.5 * CELL,
    )


def opening_limits(grid, psi, spread=DEFAULT_CALIBRATION.opening_noise):
    """Range of openings the heuristic would draw for a closing axis ``psi``.

    The lower end is the half-width of the fitted box measured along the
    closing axis; the heuristic adds at most ``spread`` on top of it.
    """
    box = fit_box(grid)
    e = np.array([math.cos(psi), math.sin(psi)])
    lo = abs(e @ box.major) * box.half_major + abs(e @ box.minor) * box.half_minor
    return float(lo), float(lo + spread)


FACES = ("major+", "major-", "minor+")


def heuristic_inits(grid, rng, calib=DEFAULT_CALIBRATION, normal_noise=None, opening_noise=None):
    """Three candidate grasps, one per bounding-box face in ``FACES``.

    The palm sits ``standoff`` outside the face centre along its normal
    (plus Gaussian noise); the fingertip midpoint lies ``reach`` further in,
    and the fingers close parallel to the face, across the box.
    """
    sigma = calib.normal_noise if normal_noise is None else normal_noise
    spread = calib.opening_noise if opening_noise is None else opening_noise
    box = fit_box(grid)
    faces = (
        (box.major, box.minor, box.half_major, box.half_minor),
        (-box.major, box.minor, box.half_major, box.half_minor),
        (box.minor, box.major, box.half_minor, box.half_major),
    )
    inits = []
    for normal, across, depth, half_across in faces:
        dist = depth + calib.standoff + rng.normal(0.0, sigma) - calib.reach
        center = box.center + dist * normal
        psi = canonical_angle(math.atan2(across[1], across[0]))
        h = half_across + rng.uniform(0.0, spread)
        inits.append(f32([center[0], center[1], psi, h]))
    return inits


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    grids: np.ndarray  # (M, C, H, W)
    thetas: np.ndarray  # (M, D)
    labels: np.ndarray  # (M,) uint8
    shapes: list
    seed: int = 0
    calib: Calibration = field(default_factory=Calibration)

    def __post_init__(self):
        self.grids = np.asarray(self.grids, dtype=np.float64)
        self.thetas = np.asarray(self.thetas, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        m = len(self.labels)
        if self.grids.shape[0] != m or self.thetas.shape[0] != m or len(self.shapes) != m:
            raise ValueError("dataset fields disagree on sample count")
        if m and not set(np.unique(self.labels)) <= {0, 1}:
            raise ValueError("labels must be 0 or 1")

    def __len__(self):
        return len(self.labels)

    @property
    def family_ids(self):
        return np.array([s.family_id for s in self.shapes], dtype=np.int64)

    @property
    def positive_rate(self):
        return float(self.labels.mean()) if len(self) else 0.0

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            self.grids[idx],
            self.thetas[idx],
            self.labels[idx],
            [self.shapes[i] for i in idx],
            self.seed,
            self.calib,
        )


def trial_rng(seed, index):
    return np.random.default_rng([seed, index])


def collect_trial(seed, index, families, calib=DEFAULT_CALIBRATION):
    rng = trial_rng(seed, index)
    shape, grid = generate_scene(rng, families)
    inits = heuristic_inits(grid, rng, calib)
    theta = inits[int(rng.integers(3))].copy()
    theta[:2] += rng.normal(0.0, calib.explore_xy, size=2)
    theta[2] += rng.normal(0.0, calib.explore_psi)
    theta[3] = max(theta[3] + rng.normal(0.0, calib.explore_h), 0.01)
    theta = f32(theta)
    outcome = oracle_execute(shape, theta, calib)
    return shape, grid, theta, outcome.success


def ordered_map(fn, items, workers=1):
    """``map`` over processes; results come back in input order."""
    if workers <= 1:
        return [fn(x) for x in items]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(workers) as pool:
        return list(pool.map(fn, items, chunksize=8))


def collect_dataset(n, seed=0, families=None, calib=DEFAULT_CALIBRATION, workers=1):
    """Run ``n`` independent simulated grasp trials.

    Each trial has its own generator derived from ``(seed, index)``, so
    trials can be produced in any order with identical results.
    """
    if n < 1:
        raise ValueError("need at least one trial")
    families = families or default_families()
    job = partial(collect_trial, seed, families=families, calib=calib)
    trials = ordered_map(job, range(n), workers)
    return Dataset(
        np.stack([t[1] for t in trials]),
        np.stack([t[2] for t in trials]),
        np.array([t[3] for t in trials]),
        [t[0] for t in trials],
        seed,
        calib,
    )


# -- file format ------------------------------------------------------------

DATASET_MAGIC = "graspinfer-dataset"
DATASET_VERSION = 1
_LE = "<f4"


def _record_dtype(d):
    return np.dtype(
        [
            ("shape", _LE, (6,)),
            ("kind", "<i4"),
            ("family", "<i4"),
            ("grid", _LE, (N_CHANNELS, GRID, GRID)),
            ("theta", _LE, (d,)),
            ("label", "u1"),
        ]
    )


def dataset_bytes(ds):
    d = ds.thetas.shape[1] if len(ds) else THETA_DIM
    header = [
        f"{DATASET_MAGIC} {DATASET_VERSION}",
        f"grid={N_CHANNELS}x{GRID}x{GRID}",
        f"dim={d}",
        f"n={len(ds)}",
        f"seed={ds.seed}",
    ]
    header += [f"calib.{k}={v!r}" for k, v in ds.calib.items().items()]
    header.append("end")
    rec = np.zeros(len(ds), dtype=_record_dtype(d))
    rec["shape"] = [[s.cx, s.cy, s.phi, s.a, s.b, s.area] for s in ds.shapes] if len(ds) else []
    rec["kind"] = [s.shape_id for s in ds.shapes]
    rec["family"] = [s.family_id for s in ds.shapes]
    rec["grid"] = ds.grids
    rec["theta"] = ds.thetas
    rec["label"] = ds.labels
    return ("\n".join(header) + "\n").encode("ascii") + rec.tobytes()


def atomic_write(path, data):
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_dataset(ds, path):
    atomic_write(path, dataset_bytes(ds))


class FormatError(ValueError):
    """Raised for malformed dataset or checkpoint files."""


def load_dataset(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    buf = io.BytesIO(raw)
    first = buf.readline().decode("ascii", "replace").split()
    if len(first) != 2 or first[0] != DATASET_MAGIC:
        raise FormatError(f"{path}: not a dataset file")
    if int(first[1]) != DATASET_VERSION:
        raise FormatError(f"{path}: unsupported dataset version {first[1]}")
    meta, calib = {}, {}
    while True:
        line = buf.readline().decode("ascii", "replace").strip()
        if not line:
            raise FormatError(f"{path}: truncated header")
        if line == "end":
            break
        key, _, val = line.partition("=")
        if key.startswith("calib."):
            calib[key[6:]] = float(val)
        else:
            meta[key] = val
    try:
        d, n, seed = int(meta["dim"]), int(meta["n"]), int(meta["seed"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: bad header ({exc})") from None
    if meta.get("grid") != f"{N_CHANNELS}x{GRID}x{GRID}":
        raise FormatError(f"{path}: unsupported grid {meta.get('grid')}")
    body = raw[buf.tell() :]
    dtype = _record_dtype(d)
    if len(body) != n * dtype.itemsize:
        raise FormatError(f"{path}: expected {n} records, body has {len(body)} bytes")
    rec = np.frombuffer(body, dtype=dtype)
    shapes = []
    for r in rec:
        cx, cy, phi, a, b, _ = (float(v) for v in r["shape"])
        shapes.append(ObjectShape(KINDS[int(r["kind"])], cx, cy, phi, a, b, int(r["family"])))
    known = Calibration.__dataclass_fields__
    cal = Calibration(**{k: v for k, v in calib.items() if k in known})
    return Dataset(
        rec["grid"].astype(np.float64),
        rec["theta"].astype(np.float64),
        rec["label"].copy(),
        shapes,
        seed,
        cal,
    )


def mirror_grid(grid):
    """Left-right reflection of an observation; the normal-x channel flips sign."""
    out = np.array(grid[..., ::-1], dtype=np.float64)
    out[..., 2, :, :] *= -1.0
    return out + 0.0


def mirror_theta(theta):
    t = np.array(theta, dtype=np.float64)
    t[0] = 1.0 - t[0]
    t[2] = -t[2]
    return t + 0.0
