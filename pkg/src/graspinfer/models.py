"""Network architectures, patch extraction and checkpoints.

Three models share one calling convention: ``predict(grid, thetas)``
scores many grasps on one observation, ``batch_inputs(grids, thetas)``
builds the graph inputs for training.  Object patches and grasp
parameters are expressed in the observed object frame (occupancy
centroid plus principal axis), so the networks do not have to learn
where the object sits or how it is turned.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np

from . import world
from .autodiff import (
    Concat,
    Conv2d,
    Dense,
    Dropout,
    Flatten,
    Graph,
    LinearHeads,
    Logistic,
    MaxPool2d,
    ReLU,
    TileConcat,
)

# world units -> network units for (gx, gy, psi, h)
CONFIG_SCALE = np.array([10.0, 10.0, 1.0, 10.0])
# aligned grasp angles live in [-PSI_WRAP, pi - PSI_WRAP): closing across
# either box axis (0 or pi/2) stays clear of the wrap
PSI_WRAP = math.pi / 4


# ---------------------------------------------------------------------------
# Patch extraction
# ---------------------------------------------------------------------------


def sample_patch(grid, center, size, angle=0.0, interp="bilinear"):
    """Resample a ``size`` x ``size`` patch of ``grid`` centred at a world point.

    Patch cells have the same pitch as scene cells; the patch frame is
    rotated by ``angle``.  Samples falling outside the scene read as 0.
    """
    offsets = np.arange(size) - (size - 1) / 2.0
    u, v = np.meshgrid(offsets, offsets)
    c, s = math.cos(angle), math.sin(angle)
    # continuous (column, row) coordinates of every patch cell in the scene grid
    col = center[0] * world.GRID - 0.5 + (c * u - s * v)
    row = center[1] * world.GRID - 0.5 + (s * u + c * v)
    grid = np.asarray(grid)
    n_rows, n_cols = grid.shape[1], grid.shape[2]

    def fetch(r, q):
        ok = (r >= 0) & (r < n_rows) & (q >= 0) & (q < n_cols)
        vals = grid[:, np.clip(r, 0, n_rows - 1), np.clip(q, 0, n_cols - 1)]
        return vals * ok

    if interp == "nearest":
        return fetch(np.floor(row + 0.5).astype(int), np.floor(col + 0.5).astype(int))
    if interp != "bilinear":
        raise ValueError(f"unknown interpolation {interp!r}")
    r0, q0 = np.floor(row), np.floor(col)
    fr, fq = row - r0, col - q0
    r0, q0 = r0.astype(int), q0.astype(int)
    return (
        fetch(r0, q0) * ((1 - fr) * (1 - fq))
        + fetch(r0, q0 + 1) * ((1 - fr) * fq)
        + fetch(r0 + 1, q0) * (fr * (1 - fq))
        + fetch(r0 + 1, q0 + 1) * (fr * fq)
    )


def fingertips(theta):
    gx, gy, psi, h = (float(t) for t in theta[:4])
    ex, ey = math.cos(psi), math.sin(psi)
    return [(gx + h * ex, gy + h * ey), (gx - h * ex, gy - h * ey)]


@dataclass(frozen=True)
class ObjectFrame:
    """Observed object pose: occupancy centroid and, when aligned, the
    direction of the principal axis (in ``(-pi/2, pi/2]``)."""

    origin: tuple
    angle: float = 0.0
    aligned: bool = False


def object_frame(grid, align=True):
    origin = tuple(float(v) for v in world.occupancy_centroid(grid))
    if not align:
        return ObjectFrame(origin)
    major = world.fit_box(grid).major
    return ObjectFrame(origin, math.atan2(major[1], major[0]), True)


def rotate_normals(patch, angle):
    """Express the normal channels of a patch sampled at ``angle`` in the patch frame."""
    if angle == 0.0:
        return patch
    c, s = math.cos(angle), math.sin(angle)
    nx, ny = patch[2].copy(), patch[3].copy()
    patch[2] = c * nx + s * ny
    patch[3] = -s * nx + c * ny
    return patch


@dataclass(frozen=True)
class PatchExtractor:
    """Patches tied to a grasp: one palm patch plus one per fingertip.

    Every patch is rotated to the closing-axis angle.
    """

    palm_size: int = 16
    finger_size: int = 8
    interp: str = "bilinear"

    def __call__(self, grid, theta):
        psi = float(theta[2])
        patches = [sample_patch(grid, (theta[0], theta[1]), self.palm_size, psi, self.interp)]
        for tip in fingertips(theta):
            patches.append(sample_patch(grid, tip, self.finger_size, psi, self.interp))
        return patches


@dataclass(frozen=True)
class ObjectPatchExtractor:
    """Whole-object patch; ``fixed`` anchors it at the occupancy centroid,
    ``palm-tracked`` recentres it on the grasp point.

    With ``align`` the patch is also turned to the object's principal axis
    (normal channels included); the angle depends on the observation only.
    """

    size: int = 32
    mode: str = "fixed"
    interp: str = "bilinear"
    align: bool = True

    def __call__(self, grid, theta):
        frame = object_frame(grid, self.align)
        if self.mode == "fixed":
            center = frame.origin
        elif self.mode == "palm-tracked":
            center = (float(theta[0]), float(theta[1]))
        else:
            raise ValueError(f"unknown object patch mode {self.mode!r}")
        patch = sample_patch(grid, center, self.size, frame.angle, self.interp)
        return [rotate_normals(patch, frame.angle)]

    @property
    def theta_dependent(self):
        return self.mode != "fixed"


def extract_object_patch(grid, theta, mode="fixed", interp="bilinear", size=32, align=True):
    return ObjectPatchExtractor(size, mode, interp, align)(grid, theta)[0]


def extract_grasp_patches(grid, theta, interp="bilinear", palm_size=16, finger_size=8):
    return PatchExtractor(palm_size, finger_size, interp)(grid, theta)


def encode_config(thetas, frame):
    """Grasp parameters in network units, expressed in an ``ObjectFrame``."""
    t = np.atleast_2d(np.asarray(thetas, dtype=np.float64)).copy()
    c, s = math.cos(frame.angle), math.sin(frame.angle)
    dx, dy = t[:, 0] - frame.origin[0], t[:, 1] - frame.origin[1]
    t[:, 0], t[:, 1] = c * dx + s * dy, -s * dx + c * dy
    if frame.aligned:
        t[:, 2] = (t[:, 2] - frame.angle + PSI_WRAP) % math.pi - PSI_WRAP
    return t * CONFIG_SCALE[: t.shape[1]]


def decode_config(encoded, frame):
    """Inverse of ``encode_config`` (angles come back modulo pi)."""
    t = np.atleast_2d(np.asarray(encoded, dtype=np.float64)) / CONFIG_SCALE
    c, s = math.cos(frame.angle), math.sin(frame.angle)
    u, v = t[:, 0].copy(), t[:, 1].copy()
    t[:, 0] = frame.origin[0] + c * u - s * v
    t[:, 1] = frame.origin[1] + s * u + c * v
    if frame.aligned:
        t[:, 2] += frame.angle
    return t


def config_jacobian(frame, dim=world.THETA_DIM):
    """d encode_config / d theta; constant for a given observation (away from the angle wrap)."""
    c, s = math.cos(frame.angle), math.sin(frame.angle)
    jac = np.eye(dim)
    jac[:2, :2] = [[c, s], [-s, c]]
    return CONFIG_SCALE[:dim, None] * jac


# ---------------------------------------------------------------------------
# Architectures
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConfigNetSpec:
    patch_size: int = 32
    channels: int = world.N_CHANNELS
    dim_theta: int = world.THETA_DIM
    conv1: tuple = (5, 8)  # (kernel, filters)
    conv2: tuple = (3, 8)
    config_units: int = 8
    conv3: tuple = (3, 8)
    fc: tuple = (32, 16)
    keep: float = 0.75
    same_padding: bool = True
    patch_mode: str = "fixed"
    align: bool = True


@dataclass(frozen=True)
class PatchNetSpec:
    palm_size: int = 16
    finger_size: int = 8
    n_fingers: int = 2
    channels: int = world.N_CHANNELS
    conv: tuple = ((3, 8), (3, 8))
    fc1: int = 16
    merge_units: int = 32
    keep: float = 0.75


@dataclass(frozen=True)
class RegressionNetSpec:
    patch_size: int = 32
    channels: int = world.N_CHANNELS
    dim_theta: int = world.THETA_DIM
    conv1: tuple = (5, 8)
    conv2: tuple = (3, 8)
    fc: tuple = (32, 16)
    keep: float = 0.75
    same_padding: bool = True
    align: bool = True


def _image_channel(g, spec, rng, slot="image"):
    for name, (k, f) in (("conv1", spec.conv1), ("conv2", spec.conv2)):
        pad = k // 2 if spec.same_padding else 0
        g.add(name, Conv2d(f, k, padding=pad), g.output if g.nodes else slot, rng=rng)
        g.add(f"{name}_relu", ReLU())
    return g.add("pool1", MaxPool2d(2))


def _dense_tail(g, units, keep, rng):
    for i, n in enumerate(units, start=1):
        g.add(f"fc{i}", Dense(n), rng=rng)
        g.add(f"fc{i}_relu", ReLU())
        g.add(f"fc{i}_drop", Dropout(keep))


def build_config_net(spec=ConfigNetSpec(), seed=0):
    """Image channel and grasp channel merged by point-wise tiling."""
    rng = np.random.default_rng(seed)
    g = Graph(
        {
            "image": (spec.channels, spec.patch_size, spec.patch_size),
            "config": (spec.dim_theta,),
        }
    )
    pool1 = _image_channel(g, spec, rng)
    g.add("fc_config", Dense(spec.config_units), "config", rng=rng)
    cfg = g.add("fc_config_relu", ReLU())
    g.add("tile", TileConcat(), pool1, cfg)
    k, f = spec.conv3
    g.add("conv3", Conv2d(f, k, padding=k // 2 if spec.same_padding else 0), rng=rng)
    g.add("conv3_relu", ReLU())
    g.add("pool2", MaxPool2d(2))
    g.add("flat", Flatten())
    _dense_tail(g, spec.fc, spec.keep, rng)
    g.add("out", Logistic(), rng=rng)
    return g


def patch_slots(spec):
    slots = {"palm": (spec.channels, spec.palm_size, spec.palm_size)}
    for i in range(spec.n_fingers):
        slots[f"finger{i}"] = (spec.channels, spec.finger_size, spec.finger_size)
    return slots


def build_patch_net(spec=PatchNetSpec(), seed=0):
    """One identical conv stack per palm/fingertip patch, merged by concatenation."""
    rng = np.random.default_rng(seed)
    slots = patch_slots(spec)
    g = Graph(slots)
    heads = []
    for slot in slots:
        src = slot
        for j, (k, f) in enumerate(spec.conv, start=1):
            g.add(f"{slot}_conv{j}", Conv2d(f, k), src, rng=rng)
            src = g.add(f"{slot}_conv{j}_relu", ReLU())
        g.add(f"{slot}_pool", MaxPool2d(2))
        g.add(f"{slot}_flat", Flatten())
        heads.append(g.add(f"{slot}_fc1", Dense(spec.fc1), rng=rng))
    g.add("merge", Concat(len(heads)), *heads)
    g.add("fc2", Dense(spec.merge_units), rng=rng)
    g.add("fc2_relu", ReLU())
    g.add("fc2_drop", Dropout(spec.keep))
    g.add("out", Logistic(), rng=rng)
    return g


def build_regression_net(spec=RegressionNetSpec(), seed=0):
    rng = np.random.default_rng(seed)
    g = Graph({"image": (spec.channels, spec.patch_size, spec.patch_size)})
    _image_channel(g, spec, rng)
    g.add("flat", Flatten())
    _dense_tail(g, spec.fc, spec.keep, rng)
    g.add("heads", LinearHeads(spec.dim_theta), rng=rng)
    return g


# ---------------------------------------------------------------------------
# Model wrappers
# ---------------------------------------------------------------------------


class ConfigNetModel:
    arch = "config-net"
    classifier = True

    def __init__(self, graph, patch_mode="fixed", interp="bilinear", seed=0, align=True):
        self.graph = graph
        self.seed = seed
        size = graph.slots["image"][1]
        self.extractor = ObjectPatchExtractor(size, patch_mode, interp, align)
        self.dim_theta = graph.slots["config"][0]

    @classmethod
    def build(cls, spec=ConfigNetSpec(), seed=0, interp="bilinear"):
        return cls(build_config_net(spec, seed), spec.patch_mode, interp, seed, spec.align)

    def frame(self, grid):
        return object_frame(grid, self.extractor.align)

    @property
    def patch_mode(self):
        return self.extractor.mode

    def image(self, grid, theta):
        return self.extractor(grid, theta)[0]

    def batch_inputs(self, grids, thetas):
        grids = np.asarray(grids)
        images = np.stack([self.image(g, t) for g, t in zip(grids, thetas)])
        config = np.concatenate([encode_config(t, self.frame(g)) for g, t in zip(grids, thetas)])
        return {"image": images, "config": config}

    def predict(self, grid, thetas):
        """Success probabilities of many grasps on one observation."""
        thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
        if self.extractor.theta_dependent:
            images = np.stack([self.image(grid, t) for t in thetas])
        else:
            images = np.broadcast_to(self.image(grid, thetas[0]), (len(thetas),) + self.graph.slots["image"])
        out = self.graph.forward({"image": images, "config": encode_config(thetas, self.frame(grid))})
        return out[:, 0]


class PatchNetModel:
    arch = "patch-net"
    classifier = True

    def __init__(self, graph, interp="bilinear", seed=0):
        self.graph = graph
        self.seed = seed
        self.slot_names = list(graph.slots)
        palm = graph.slots["palm"][1]
        finger = graph.slots["finger0"][1]
        self.extractor = PatchExtractor(palm, finger, interp)
        self.dim_theta = world.THETA_DIM
        self.patch_mode = "grasp-patches"

    @classmethod
    def build(cls, spec=PatchNetSpec(), seed=0, interp="bilinear"):
        return cls(build_patch_net(spec, seed), interp, seed)

    def patch_inputs(self, grid, thetas):
        per = [self.extractor(grid, t) for t in thetas]
        return {name: np.stack([p[i] for p in per]) for i, name in enumerate(self.slot_names)}

    def batch_inputs(self, grids, thetas):
        per = [self.extractor(g, t) for g, t in zip(grids, thetas)]
        return {name: np.stack([p[i] for p in per]) for i, name in enumerate(self.slot_names)}

    def predict(self, grid, thetas):
        thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
        return self.graph.forward(self.patch_inputs(grid, thetas))[:, 0]


class RegressionModel:
    arch = "regression"
    classifier = False

    def __init__(self, graph, interp="bilinear", seed=0, align=True):
        self.graph = graph
        self.seed = seed
        size = graph.slots["image"][1]
        self.extractor = ObjectPatchExtractor(size, "fixed", interp, align)
        self.dim_theta = graph.output_shape[0]
        self.patch_mode = "fixed"

    @classmethod
    def build(cls, spec=RegressionNetSpec(), seed=0, interp="bilinear"):
        return cls(build_regression_net(spec, seed), interp, seed, spec.align)

    def frame(self, grid):
        return object_frame(grid, self.extractor.align)

    def batch_inputs(self, grids, thetas=None):
        return {"image": np.stack([self.extractor(g, None)[0] for g in grids])}

    def targets(self, grids, thetas):
        return np.concatenate([encode_config(t, self.frame(g)) for g, t in zip(grids, thetas)])

    def predict_theta(self, grid):
        out = self.graph.forward(self.batch_inputs([grid]))
        return decode_config(out, self.frame(grid))[0]


MODEL_TYPES = {cls.arch: cls for cls in (ConfigNetModel, PatchNetModel, RegressionModel)}


def build_model(arch, seed=0, patch_mode="fixed", interp="bilinear", align=True):
    if arch == "config-net":
        return ConfigNetModel.build(ConfigNetSpec(patch_mode=patch_mode, align=align), seed, interp)
    if arch == "patch-net":
        return PatchNetModel.build(PatchNetSpec(), seed, interp)
    if arch == "regression":
        return RegressionModel.build(RegressionNetSpec(align=align), seed, interp)
    raise ValueError(f"unknown architecture {arch!r}")


# ---------------------------------------------------------------------------
# Checkpoints
#
#   graspinfer-checkpoint 1
#   spec <n-bytes>
#   <n bytes of text: key=value lines, then graph slot/layer lines>
#   params <count>
#   param <name> <d1>x<d2>...      then prod(shape) little-endian float32
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = "graspinfer-checkpoint"


def checkpoint_bytes(model):
    meta = {
        "arch": model.arch,
        "dim_theta": model.dim_theta,
        "seed": model.seed,
        "patch_mode": model.patch_mode,
        "interp": model.extractor.interp,
        "align": int(getattr(model.extractor, "align", False)),
    }
    spec_text = "\n".join([f"{k}={v}" for k, v in meta.items()] + model.graph.describe()) + "\n"
    spec_raw = spec_text.encode("ascii")
    out = io.BytesIO()
    out.write(f"{CHECKPOINT_MAGIC} 1\nspec {len(spec_raw)}\n".encode("ascii"))
    out.write(spec_raw)
    out.write(f"params {len(model.graph.params)}\n".encode("ascii"))
    for name, p in model.graph.params.items():
        dims = "x".join(str(d) for d in p.shape)
        out.write(f"param {name} {dims}\n".encode("ascii"))
        out.write(np.ascontiguousarray(p.values, dtype="<f4").tobytes())
    return out.getvalue()


def save_checkpoint(model, path):
    world.atomic_write(path, checkpoint_bytes(model))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        return _parse_checkpoint(raw, path)
    except world.FormatError:
        raise
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise world.FormatError(f"{path}: malformed checkpoint ({exc})") from None


def _parse_checkpoint(raw, path):
    buf = io.BytesIO(raw)

    def line():
        raw = buf.readline()
        if not raw.endswith(b"\n"):
            raise world.FormatError(f"{path}: truncated checkpoint")
        return raw.decode("ascii").strip().split()

    head = line()
    if head[:1] != [CHECKPOINT_MAGIC]:
        raise world.FormatError(f"{path}: not a checkpoint")
    kind, n = line()
    if kind != "spec":
        raise world.FormatError(f"{path}: missing spec block")
    spec_text = buf.read(int(n)).decode("ascii")
    meta, graph_lines = {}, []
    for ln in spec_text.splitlines():
        if ln.startswith(("slot ", "layer ")):
            graph_lines.append(ln)
        elif "=" in ln:
            key, _, val = ln.partition("=")
            meta[key] = val
    graph = Graph.from_description(graph_lines)
    kind, count = line()
    if kind != "params":
        raise world.FormatError(f"{path}: missing parameter block")
    for _ in range(int(count)):
        tag, name, dims = line()
        shape = tuple(int(d) for d in dims.split("x"))
        nbytes = 4 * int(np.prod(shape))
        raw = buf.read(nbytes)
        if tag != "param" or len(raw) != nbytes or name not in graph.params:
            raise world.FormatError(f"{path}: bad parameter record {name!r}")
        graph.params[name].values = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)
    arch = meta.get("arch")
    seed = int(meta.get("seed", 0))
    interp = meta.get("interp", "bilinear")
    align = meta.get("align", "0") == "1"
    if arch == "config-net":
        return ConfigNetModel(graph, meta.get("patch_mode", "fixed"), interp, seed, align)
    if arch == "patch-net":
        return PatchNetModel(graph, interp, seed)
    if arch == "regression":
        return RegressionModel(graph, interp, seed, align)
    raise world.FormatError(f"{path}: unknown architecture {arch!r}")

