"""Procedural CSG solids evaluated as signed-distance fields.

A model is a left-deep Boolean expression tree over sized, posed primitives
(sphere, cube, cone, cylinder). Distances are exact for primitive leaves and
a conservative bound for composites (union=min, intersection=max,
difference=max(d_left, -d_right)), which is sufficient for voxel occupancy
and for sphere-traced rendering.
"""

from __future__ import annotations

import gzip
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

PRIMITIVE_KINDS = ("sphere", "cube", "cone", "cylinder")
BOOLEAN_OPS = ("union", "intersection", "difference")

# number of size scalars per primitive kind
SIZE_ARITY = {"sphere": 1, "cube": 1, "cone": 2, "cylinder": 2}

# primitive centres are placed uniformly inside this box
PLACEMENT_BOX = (np.array([-0.5, -0.5, -0.5]), np.array([0.5, 0.5, 0.5]))
# each size scalar is uniform in this range (fraction of the unit box)
SIZE_RANGE = (0.1, 0.35)

SCHEMA_VERSION = 1

# occupancy-check grid: fixed domain covering every reachable primitive
# (centre at box corner plus the largest circumscribed extent, cube 0.35*sqrt(3))
_CHECK_DOMAIN = (np.full(3, -1.15), np.full(3, 1.15))
_CHECK_RES = 48


class GenerationError(RuntimeError):
    """Raised when model generation exhausts its retry budget."""


class EmptyResultError(ValueError):
    """Raised when a Boolean operation would produce an empty solid."""


@dataclass
class PrimitiveSpec:
    """One sized, posed primitive.

    ``size`` is kind-specific: (radius,) for sphere, (half_extent,) for cube,
    (radius, height) for cone and cylinder. ``rotation`` maps local to world
    coordinates; cone and cylinder axes run along local +z.
    """

    kind: str
    center: np.ndarray
    size: tuple
    rotation: np.ndarray

    def __post_init__(self):
        if self.kind not in PRIMITIVE_KINDS:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        self.center = np.asarray(self.center, dtype=np.float64)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.size = tuple(float(s) for s in self.size)
        if len(self.size) != SIZE_ARITY[self.kind]:
            raise ValueError(f"{self.kind} expects {SIZE_ARITY[self.kind]} size scalars")
        if any(s <= 0 for s in self.size):
            raise ValueError("size scalars must be positive")
        if self.center.shape != (3,) or self.rotation.shape != (3, 3):
            raise ValueError("center must be a 3-vector and rotation a 3x3 matrix")


@dataclass
class BooleanNode:
    op: str
    left: "CsgNode"
    right: "CsgNode"

    def __post_init__(self):
        if self.op not in BOOLEAN_OPS:
            raise ValueError(f"unknown Boolean op {self.op!r}")


CsgNode = Union[PrimitiveSpec, BooleanNode]


@dataclass
class CsgModel:
    """A Boolean expression tree with bookkeeping for generation provenance."""

    root: CsgNode
    primitive_count: int
    seed: int = 0
    model_id: str = ""
    # SDF values on the shared occupancy-check grid, filled lazily
    _check_values: np.ndarray | None = field(default=None, repr=False, compare=False)
    _frame_cache: tuple | None = field(default=None, repr=False, compare=False)

    def sample(self, points: np.ndarray) -> np.ndarray:
        return evaluate_sdf(self, points)

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return model_bounds(self)


# --------------------------------------------------------------------------
# primitive signed distances (exact)
# --------------------------------------------------------------------------

def _to_local(prim: PrimitiveSpec, points: np.ndarray) -> np.ndarray:
    # row-vector form of R^T (p - c)
    return (points - prim.center.astype(points.dtype)) @ prim.rotation.astype(points.dtype)


def _sdf_sphere(local, radius):
    return np.linalg.norm(local, axis=-1) - radius


def _sdf_cube(local, half):
    q = np.abs(local) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(np.max(q, axis=-1), 0.0)
    return outside + inside


def _sdf_cylinder(local, radius, height):
    d_rad = np.hypot(local[..., 0], local[..., 1]) - radius
    d_ax = np.abs(local[..., 2]) - 0.5 * height
    outside = np.hypot(np.maximum(d_rad, 0.0), np.maximum(d_ax, 0.0))
    inside = np.minimum(np.maximum(d_rad, d_ax), 0.0)
    return outside + inside


def _sdf_cone(local, radius, height):
    # capped cone, base radius at z=-h/2 tapering to a point at z=+h/2
    h = 0.5 * height
    qx = np.hypot(local[..., 0], local[..., 1])
    qy = local[..., 2]
    k2x, k2y = -radius, 2.0 * h
    cax = qx - np.minimum(qx, np.where(qy < 0.0, radius, 0.0))
    cay = np.abs(qy) - h
    t = np.clip((-qx * k2x + (h - qy) * k2y) / (k2x * k2x + k2y * k2y), 0.0, 1.0)
    cbx = qx + t * k2x
    cby = qy - h + t * k2y
    s = np.where((cbx < 0.0) & (cay < 0.0), -1.0, 1.0)
    d2 = np.minimum(cax * cax + cay * cay, cbx * cbx + cby * cby)
    return (s * np.sqrt(d2)).astype(local.dtype, copy=False)


def primitive_sdf(prim: PrimitiveSpec, points: np.ndarray) -> np.ndarray:
    """Exact signed distance from ``points`` (..., 3) to the primitive surface."""
    local = _to_local(prim, np.asarray(points))
    if prim.kind == "sphere":
        return _sdf_sphere(local, prim.size[0])
    if prim.kind == "cube":
        return _sdf_cube(local, prim.size[0])
    if prim.kind == "cylinder":
        return _sdf_cylinder(local, *prim.size)
    return _sdf_cone(local, *prim.size)


def _combine(op: str, d_left: np.ndarray, d_right: np.ndarray) -> np.ndarray:
    if op == "union":
        return np.minimum(d_left, d_right)
    if op == "intersection":
        return np.maximum(d_left, d_right)
    return np.maximum(d_left, -d_right)


def evaluate_sdf(model: CsgModel | CsgNode, points: np.ndarray) -> np.ndarray:
    """Signed distance of the model at ``points``; negative means inside.

    Accepts a single 3-vector or an (..., 3) array and preserves the input
    dtype: float32 points keep the hot rendering path cheap.
    """
    node = model.root if isinstance(model, CsgModel) else model
    points = np.asarray(points)
    single = points.ndim == 1
    if single:
        points = points[None, :]

    def _eval(n):
        if isinstance(n, PrimitiveSpec):
            return primitive_sdf(n, points)
        return _combine(n.op, _eval(n.left), _eval(n.right))

    values = _eval(node)
    return values[0] if single else values


# --------------------------------------------------------------------------
# bounds
# --------------------------------------------------------------------------

def primitive_extent(prim: PrimitiveSpec) -> np.ndarray:
    """Conservative world-axis half-extents of the primitive around its centre."""
    if prim.kind == "sphere":
        local = np.full(3, prim.size[0])
    elif prim.kind == "cube":
        local = np.full(3, prim.size[0])
    else:  # cone, cylinder: radius in local xy, half height along local z
        r, h = prim.size
        local = np.array([r, r, 0.5 * h])
    return np.abs(prim.rotation) @ local


def model_bounds(model: CsgModel | CsgNode) -> tuple[np.ndarray, np.ndarray]:
    """Axis-aligned box guaranteed to contain the model's occupancy."""
    node = model.root if isinstance(model, CsgModel) else model
    lo = np.full(3, np.inf)
    hi = np.full(3, -np.inf)
    stack = [node]
    while stack:
        n = stack.pop()
        if isinstance(n, PrimitiveSpec):
            ext = primitive_extent(n)
            lo = np.minimum(lo, n.center - ext)
            hi = np.maximum(hi, n.center + ext)
        else:
            stack.extend((n.left, n.right))
    return lo, hi


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------

def _cube_rotations() -> np.ndarray:
    """The 24 proper rotations of the axis-aligned cube."""
    mats = []
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product((1.0, -1.0), repeat=3):
            m = np.zeros((3, 3))
            for row, (col, s) in enumerate(zip(perm, signs)):
                m[row, col] = s
            if np.linalg.det(m) > 0:
                mats.append(m)
    return np.array(mats)


_CUBE_ROTATIONS = _cube_rotations()


def sample_rotation(rng: np.random.Generator, continuous: bool = False) -> np.ndarray:
    """A random rotation: one of the 24 axis-aligned 90-degree orientations by
    default, or uniform over SO(3) via a random quaternion when continuous."""
    if not continuous:
        return _CUBE_ROTATIONS[rng.integers(len(_CUBE_ROTATIONS))].copy()
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def as_rng(rng_or_seed) -> np.random.Generator:
    if isinstance(rng_or_seed, np.random.Generator):
        return rng_or_seed
    return np.random.default_rng(rng_or_seed)


def sample_primitive(
    rng,
    bounds: tuple[np.ndarray, np.ndarray] = PLACEMENT_BOX,
    size_range: tuple[float, float] = SIZE_RANGE,
    continuous_rotation: bool = False,
) -> PrimitiveSpec:
    """Sample a primitive of uniform random kind, centre uniform in ``bounds``
    and size scalars uniform in ``size_range``."""
    rng = as_rng(rng)
    lo, hi = np.asarray(bounds[0], dtype=float), np.asarray(bounds[1], dtype=float)
    if not np.all(hi > lo):
        raise ValueError("placement bounds must be non-degenerate")
    kind = PRIMITIVE_KINDS[rng.integers(len(PRIMITIVE_KINDS))]
    center = rng.uniform(lo, hi)
    size = tuple(rng.uniform(*size_range) for _ in range(SIZE_ARITY[kind]))
    rotation = sample_rotation(rng, continuous=continuous_rotation)
    return PrimitiveSpec(kind=kind, center=center, size=size, rotation=rotation)


# --------------------------------------------------------------------------
# generation with occupancy rejection
# --------------------------------------------------------------------------

_check_points_cache: np.ndarray | None = None


def _check_axis() -> np.ndarray:
    # symmetric about 0 so that mirrored models occupy mirrored cells exactly
    half_span = float(_CHECK_DOMAIN[1][0])
    cell = 2 * half_span / (_CHECK_RES - 1)
    return (np.arange(_CHECK_RES) - (_CHECK_RES - 1) / 2) * cell


def _check_points() -> np.ndarray:
    global _check_points_cache
    if _check_points_cache is None:
        ax = _check_axis().astype(np.float32)
        grid = np.meshgrid(ax, ax, ax, indexing="ij")
        _check_points_cache = np.stack([g.ravel() for g in grid], axis=-1)
    return _check_points_cache


def _check_values(model: CsgModel) -> np.ndarray:
    if model._check_values is None:
        model._check_values = evaluate_sdf(model, _check_points())
    return model._check_values


def occupied_check_bounds(model: CsgModel, pad_cells: float = 2.0):
    """Box around occupied cells of the shared check grid, padded by
    ``pad_cells`` cell widths; None when no cell is occupied.

    Mirror-exact: a model reflected across X=0 yields the reflected box.
    """
    mask = (_check_values(model) < 0).reshape(_CHECK_RES, _CHECK_RES, _CHECK_RES)
    if not mask.any():
        return None
    ax = _check_axis()
    pad = pad_cells * (ax[1] - ax[0])
    idx = np.nonzero(mask)
    lo = np.array([ax[idx[i].min()] for i in range(3)]) - pad
    hi = np.array([ax[idx[i].max()] for i in range(3)]) + pad
    return lo, hi


def sample_group_count(rng, group: str) -> int:
    """Primitive count for a complexity group: '3-5' draws from {3,4,5},
    any other group name is a literal count."""
    rng = as_rng(rng)
    if group == "3-5":
        return int(rng.integers(3, 6))
    return int(group)


def generate_model(
    rng_or_seed,
    primitive_count: int,
    *,
    size_range: tuple[float, float] = SIZE_RANGE,
    continuous_rotation: bool = False,
    max_step_attempts: int = 100,
    max_model_restarts: int = 100,
) -> CsgModel:
    """Build a left-deep Boolean tree of ``primitive_count`` sampled primitives.

    Each step resamples (op, primitive) until the accumulated occupancy stays
    non-empty on the shared check grid; an exhausted step restarts the whole
    model. Deterministic given an integer seed.
    """
    if primitive_count < 1:
        raise ValueError("primitive_count must be >= 1")
    seed = int(rng_or_seed) if not isinstance(rng_or_seed, np.random.Generator) else 0
    rng = as_rng(rng_or_seed)
    pts = _check_points()

    for _ in range(max(1, max_model_restarts)):
        root: CsgNode = sample_primitive(rng, size_range=size_range,
                                         continuous_rotation=continuous_rotation)
        values = primitive_sdf(root, pts)
        if not (values < 0).any():
            continue
        count = 1
        failed = False
        while count < primitive_count:
            for _ in range(max(1, max_step_attempts)):
                op = BOOLEAN_OPS[rng.integers(len(BOOLEAN_OPS))]
                prim = sample_primitive(rng, size_range=size_range,
                                        continuous_rotation=continuous_rotation)
                new_values = _combine(op, values, primitive_sdf(prim, pts))
                if (new_values < 0).any():
                    root = BooleanNode(op=op, left=root, right=prim)
                    values = new_values
                    count += 1
                    break
            else:
                failed = True
                break
        if not failed:
            return CsgModel(root=root, primitive_count=count, seed=seed,
                            _check_values=values)
    raise GenerationError(
        f"no non-empty model with {primitive_count} primitives after "
        f"{max_model_restarts} restarts")


def apply_boolean(model: CsgModel, op: str, primitive: PrimitiveSpec) -> CsgModel:
    """Combine ``model`` with one more primitive; the input is unmodified.

    Raises EmptyResultError when the result has empty occupancy on the check
    grid, so callers can resample the primitive.
    """
    if op not in BOOLEAN_OPS:
        raise ValueError(f"unknown Boolean op {op!r}")
    values = _combine(op, _check_values(model), primitive_sdf(primitive, _check_points()))
    if not (values < 0).any():
        raise EmptyResultError(f"{op} with {primitive.kind} empties the model")
    return CsgModel(root=BooleanNode(op=op, left=model.root, right=primitive),
                    primitive_count=model.primitive_count + 1,
                    seed=model.seed, model_id=model.model_id,
                    _check_values=values)


def modify_model(
    model: CsgModel,
    rng,
    *,
    size_range: tuple[float, float] = SIZE_RANGE,
    bounds: tuple[np.ndarray, np.ndarray] = PLACEMENT_BOX,
    max_attempts: int = 100,
) -> CsgModel:
    """One random Boolean operation with one random primitive, resampling both
    until the result is non-empty."""
    rng = as_rng(rng)
    for _ in range(max_attempts):
        op = BOOLEAN_OPS[rng.integers(len(BOOLEAN_OPS))]
        prim = sample_primitive(rng, bounds=bounds, size_range=size_range)
        try:
            return apply_boolean(model, op, prim)
        except EmptyResultError:
            continue
    raise GenerationError(f"no non-empty modification after {max_attempts} attempts")


def augment_pair(model: CsgModel, rng, **kwargs) -> tuple[CsgModel, CsgModel]:
    """Two independently modified copies of ``model`` (branch 1, branch 2)."""
    rng = as_rng(rng)
    return modify_model(model, rng, **kwargs), modify_model(model, rng, **kwargs)


def mirror_x(model: CsgModel) -> CsgModel:
    """The model reflected across the X=0 plane (exact for all primitives)."""
    flip = np.diag([-1.0, 1.0, 1.0])

    def _mirror(node):
        if isinstance(node, PrimitiveSpec):
            return PrimitiveSpec(kind=node.kind, center=flip @ node.center,
                                 size=node.size, rotation=flip @ node.rotation @ flip)
        return BooleanNode(op=node.op, left=_mirror(node.left), right=_mirror(node.right))

    return CsgModel(root=_mirror(model.root), primitive_count=model.primitive_count,
                    seed=model.seed, model_id=model.model_id)


# --------------------------------------------------------------------------
# voxelization
# --------------------------------------------------------------------------

@dataclass
class ScalarField:
    """Signed distances sampled on a regular grid; negative means inside."""

    bounds_lo: np.ndarray
    bounds_hi: np.ndarray
    values: np.ndarray  # (nx, ny, nz), float32

    def __post_init__(self):
        self.bounds_lo = np.asarray(self.bounds_lo, dtype=np.float64)
        self.bounds_hi = np.asarray(self.bounds_hi, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 3 or min(self.values.shape) < 2:
            raise ValueError("field needs resolution >= 2 per axis")
        if not np.isfinite(self.values).all():
            raise ValueError("field values must be finite")

    @property
    def resolution(self) -> tuple[int, int, int]:
        return self.values.shape

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.bounds_lo, self.bounds_hi

    def grid_axes(self) -> list[np.ndarray]:
        return [np.linspace(self.bounds_lo[i], self.bounds_hi[i], self.values.shape[i])
                for i in range(3)]

    def sample(self, points: np.ndarray) -> np.ndarray:
        """Trilinear interpolation; points outside the box clamp to the edge."""
        points = np.asarray(points)
        single = points.ndim == 1
        pts = points[None, :] if single else points
        shape = np.array(self.values.shape)
        span = (self.bounds_hi - self.bounds_lo).astype(pts.dtype)
        rel = (pts - self.bounds_lo.astype(pts.dtype)) / span * (shape - 1).astype(pts.dtype)
        rel = np.clip(rel, 0.0, (shape - 1) - 1e-6)
        i0 = rel.astype(np.int64)
        f = rel - i0
        x0, y0, z0 = i0[:, 0], i0[:, 1], i0[:, 2]
        fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
        v = self.values
        c00 = v[x0, y0, z0] * (1 - fx) + v[x0 + 1, y0, z0] * fx
        c10 = v[x0, y0 + 1, z0] * (1 - fx) + v[x0 + 1, y0 + 1, z0] * fx
        c01 = v[x0, y0, z0 + 1] * (1 - fx) + v[x0 + 1, y0, z0 + 1] * fx
        c11 = v[x0, y0 + 1, z0 + 1] * (1 - fx) + v[x0 + 1, y0 + 1, z0 + 1] * fx
        c0 = c00 * (1 - fy) + c10 * fy
        c1 = c01 * (1 - fy) + c11 * fy
        out = c0 * (1 - fz) + c1 * fz
        return out[0] if single else out

    def occupied_fraction(self) -> float:
        return float((self.values < 0).mean())

    def occupied_bounds(self) -> tuple[np.ndarray, np.ndarray] | None:
        """Tight box around grid points with negative distance, or None."""
        mask = self.values < 0
        if not mask.any():
            return None
        axes = self.grid_axes()
        idx = np.nonzero(mask)
        lo = np.array([axes[i][idx[i].min()] for i in range(3)])
        hi = np.array([axes[i][idx[i].max()] for i in range(3)])
        return lo, hi


def voxelize(model: CsgModel, resolution: int, bounds=None) -> ScalarField:
    """Sample the model SDF on a regular grid over its bounds padded by 10%."""
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    if bounds is None:
        lo, hi = model_bounds(model)
        center = 0.5 * (lo + hi)
        half = 0.5 * (hi - lo) * 1.1
        lo, hi = center - half, center + half
    else:
        lo, hi = np.asarray(bounds[0], float), np.asarray(bounds[1], float)
    axes = [np.linspace(lo[i], hi[i], resolution, dtype=np.float32) for i in range(3)]
    grid = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([g.ravel() for g in grid], axis=-1)
    values = evaluate_sdf(model, pts).reshape(resolution, resolution, resolution)
    return ScalarField(bounds_lo=lo, bounds_hi=hi, values=values)


# --------------------------------------------------------------------------
# model archive (models/<group>/<index>.json.gz)
# --------------------------------------------------------------------------

def _node_to_dict(node: CsgNode) -> dict:
    if isinstance(node, PrimitiveSpec):
        return {"kind": node.kind, "center": node.center.tolist(),
                "size": list(node.size), "rotation": node.rotation.tolist()}
    return {"op": node.op, "left": _node_to_dict(node.left),
            "right": _node_to_dict(node.right)}


def _node_from_dict(d: dict) -> CsgNode:
    if "kind" in d:
        return PrimitiveSpec(kind=d["kind"], center=np.array(d["center"]),
                             size=tuple(d["size"]), rotation=np.array(d["rotation"]))
    return BooleanNode(op=d["op"], left=_node_from_dict(d["left"]),
                       right=_node_from_dict(d["right"]))


def model_to_dict(model: CsgModel) -> dict:
    lo, hi = model_bounds(model)
    return {"schema_version": SCHEMA_VERSION, "seed": model.seed,
            "model_id": model.model_id, "primitive_count": model.primitive_count,
            "bounds": [lo.tolist(), hi.tolist()], "root": _node_to_dict(model.root)}


def model_from_dict(d: dict) -> CsgModel:
    if d.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported model schema {d.get('schema_version')!r}")
    return CsgModel(root=_node_from_dict(d["root"]),
                    primitive_count=d["primitive_count"],
                    seed=d["seed"], model_id=d.get("model_id", ""))


def save_model(model: CsgModel, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = json.dumps(model_to_dict(model), sort_keys=True).encode()
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as raw:
        # fixed mtime and no embedded name keep archives byte-identical across runs
        with gzip.GzipFile(filename="", fileobj=raw, mode="wb",
                           compresslevel=6, mtime=0) as f:
            f.write(data)
    tmp.replace(path)


def load_model(path) -> CsgModel:
    with gzip.open(path, "rb") as f:
        return model_from_dict(json.loads(f.read().decode()))


def write_model_archive(models, root_dir, group: str) -> list[Path]:
    """Write one gzipped JSON per model under ``root_dir``/models/<group>/."""
    out = Path(root_dir) / "models" / group
    paths = []
    for i, model in enumerate(models):
        if not model.model_id:
            model.model_id = f"{group}/{i}"
        p = out / f"{i}.json.gz"
        save_model(model, p)
        paths.append(p)
    return paths


def read_model_archive(group_dir) -> list[CsgModel]:
    files = sorted(Path(group_dir).glob("*.json.gz"), key=lambda p: int(p.stem.split(".")[0]))
    return [load_model(p) for p in files]
