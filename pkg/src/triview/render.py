"""Orthographic line-drawing renderer.

Sphere-traces a signed-distance sampler along parallel rays, then extracts
visible edges (silhouettes, depth jumps, normal creases) into anti-aliased
one-pixel strokes on a white background. Three canonical views (front, right,
top) plus eight isometric poses pointing at the cube corners.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from . import geometry

IMAGE_SIZE = 200
N_ISO_POSES = 8
VIEW_TAGS = ("f", "r", "t") + tuple(f"iso{k}" for k in range(N_ISO_POSES))

MAX_MARCH_STEPS = 512
CONVERGENCE_FRAC = 1e-3   # of scene diagonal
DEPTH_EDGE_FRAC = 0.02    # of scene diagonal
NORMAL_EDGE_DEG = 25.0
FRAME_MARGIN = 1.1        # scene fit margin
STROKE_SIGMA = 0.5
STROKE_GAIN = 1.8
INK_THRESHOLD = 250       # 8-bit values below this count as inked


@dataclass(frozen=True)
class Camera:
    """Orthographic camera orientation; ``pose_id`` set for isometric views."""

    tag: str
    direction: np.ndarray
    right: np.ndarray
    up: np.ndarray
    pose_id: int | None = None


def _orient(direction: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    up_ref = np.array([0.0, 0.0, 1.0])
    if abs(float(direction @ up_ref)) > 0.99:
        up_ref = np.array([0.0, 1.0, 0.0])
    right = np.cross(direction, up_ref)
    right /= np.linalg.norm(right)
    up = np.cross(right, direction)
    up /= np.linalg.norm(up)
    return right, up


def iso_direction(pose_id: int) -> np.ndarray:
    """Unit viewing direction toward cube corner ``pose_id``: bit 2 -> x sign,
    bit 1 -> y sign, bit 0 -> z sign (0 maps to -1)."""
    if not 0 <= pose_id < N_ISO_POSES:
        raise ValueError(f"pose id must be in [0, {N_ISO_POSES}), got {pose_id}")
    signs = np.array([(pose_id >> b) & 1 for b in (2, 1, 0)], dtype=float) * 2 - 1
    return signs / np.sqrt(3.0)


def camera_for_view(view: str) -> Camera:
    """Camera for a view tag: 'f' (-Y), 'r' (+X), 't' (+Z) or 'iso<k>'."""
    fixed = {"f": np.array([0.0, -1.0, 0.0]),
             "r": np.array([1.0, 0.0, 0.0]),
             "t": np.array([0.0, 0.0, 1.0])}
    if view in fixed:
        direction = fixed[view]
        pose_id = None
    elif view.startswith("iso"):
        pose_id = int(view[3:])
        direction = iso_direction(pose_id)
    else:
        raise ValueError(f"unknown view tag {view!r}")
    right, up = _orient(direction)
    return Camera(tag=view, direction=direction, right=right, up=up, pose_id=pose_id)


# --------------------------------------------------------------------------
# scene framing
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SceneFrame:
    """Bounding sphere used to aim every camera of one model identically."""

    center: np.ndarray
    radius: float

    @property
    def diagonal(self) -> float:
        return 2.0 * self.radius


def frame_from_bounds(lo, hi, margin: float = FRAME_MARGIN) -> SceneFrame:
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    center = 0.5 * (lo + hi)
    radius = 0.5 * float(np.linalg.norm(hi - lo))
    return SceneFrame(center=center, radius=max(radius, 1e-6) * margin)


def model_frame(model: geometry.CsgModel) -> SceneFrame:
    """Frame a model around its actual occupancy (falls back to tree bounds),
    identical for every view of the model."""
    occ = geometry.occupied_check_bounds(model)
    if occ is None:
        lo, hi = geometry.model_bounds(model)
    else:
        lo, hi = occ
    return frame_from_bounds(lo, hi)


def _frame_for(field) -> SceneFrame:
    if isinstance(field, geometry.CsgModel):
        return model_frame(field)
    if isinstance(field, geometry.ScalarField):
        occ = field.occupied_bounds()
        lo, hi = occ if occ is not None else field.bounds
        return frame_from_bounds(lo, hi)
    return frame_from_bounds(*field.bounds)


# --------------------------------------------------------------------------
# sphere tracing
# --------------------------------------------------------------------------

def render_depth(field, camera: Camera, size: int = IMAGE_SIZE,
                 frame: SceneFrame | None = None):
    """Orthographic first-hit depth and unit surface normals.

    ``field`` is anything with a ``sample(points) -> signed distance`` method
    (a CsgModel or a ScalarField). Misses get depth +inf and zero normals.
    Depth is measured from a start plane two frame-radii before the centre.
    """
    if frame is None:
        frame = _frame_for(field)
    eps = CONVERGENCE_FRAC * frame.diagonal
    half_w = frame.radius
    t_max = 4.0 * frame.radius

    # pixel grid: x left->right, y top->bottom
    coords = (np.arange(size, dtype=np.float32) + 0.5) / size * 2.0 - 1.0
    sx = coords[None, :] * half_w
    sy = -coords[:, None] * half_w
    base = (frame.center - 2.0 * frame.radius * camera.direction).astype(np.float32)
    origins = (base[None, None, :]
               + sx[..., None] * camera.right.astype(np.float32)
               + sy[..., None] * camera.up.astype(np.float32)).reshape(-1, 3)
    direction = camera.direction.astype(np.float32)

    n = origins.shape[0]
    t = np.zeros(n, dtype=np.float32)
    depth = np.full(n, np.inf, dtype=np.float32)
    alive = np.arange(n)
    for _ in range(MAX_MARCH_STEPS):
        if alive.size == 0:
            break
        pts = origins[alive] + t[alive, None] * direction
        d = np.asarray(field.sample(pts), dtype=np.float32)
        hit = d < eps
        if hit.any():
            idx = alive[hit]
            depth[idx] = t[idx] + d[hit]  # one last correction toward the surface
        new_t = t[alive] + d
        keep = ~hit & (new_t <= t_max)
        t[alive[keep]] = new_t[keep]
        alive = alive[keep]

    normals = np.zeros((n, 3), dtype=np.float32)
    hit_mask = np.isfinite(depth)
    if hit_mask.any():
        p = origins[hit_mask] + depth[hit_mask, None] * direction
        h = np.float32(max(1e-3 * frame.radius, 1e-6))
        grad = np.empty_like(p)
        for k in range(3):
            step = np.zeros(3, dtype=np.float32)
            step[k] = h
            grad[:, k] = (np.asarray(field.sample(p + step), dtype=np.float32)
                          - np.asarray(field.sample(p - step), dtype=np.float32))
        norm = np.linalg.norm(grad, axis=-1, keepdims=True)
        normals[hit_mask] = grad / np.maximum(norm, 1e-12)

    return depth.reshape(size, size), normals.reshape(size, size, 3)


# --------------------------------------------------------------------------
# line extraction
# --------------------------------------------------------------------------

@dataclass
class LineDrawing:
    """Grayscale line drawing: white background (255), dark strokes."""

    gray: np.ndarray  # (H, W) uint8

    def __post_init__(self):
        self.gray = np.asarray(self.gray, dtype=np.uint8)
        if self.gray.ndim != 2:
            raise ValueError("drawing must be a 2-D grayscale array")

    @property
    def pixels(self) -> np.ndarray:
        """Float view in [0, 1], replicated to H x W x 3."""
        g = self.gray.astype(np.float32) / 255.0
        return np.repeat(g[:, :, None], 3, axis=2)

    @property
    def size(self) -> tuple[int, int]:
        return self.gray.shape

    def ink_fraction(self) -> float:
        return float((self.gray < INK_THRESHOLD).mean())

    def background_fraction(self) -> float:
        return 1.0 - self.ink_fraction()


def extract_lines(depth: np.ndarray, normals: np.ndarray, scene_diag: float,
                  depth_frac: float = DEPTH_EDGE_FRAC,
                  normal_angle_deg: float = NORMAL_EDGE_DEG,
                  sigma: float = STROKE_SIGMA, gain: float = STROKE_GAIN) -> LineDrawing:
    """Mark pixels on the near side of depth jumps, silhouettes against the
    background, and normal creases; blur into anti-aliased strokes."""
    if depth.shape != normals.shape[:2]:
        raise ValueError("depth and normals disagree on image size")
    tau_d = depth_frac * scene_diag
    cos_tau = np.cos(np.deg2rad(normal_angle_deg))
    mask = np.zeros(depth.shape, dtype=bool)
    for axis in (0, 1):
        if axis == 0:
            sl_a = (slice(None, -1), slice(None))
            sl_b = (slice(1, None), slice(None))
        else:
            sl_a = (slice(None), slice(None, -1))
            sl_b = (slice(None), slice(1, None))
        da, db = depth[sl_a], depth[sl_b]
        fa, fb = np.isfinite(da), np.isfinite(db)
        # silhouette: exactly one of the pair hits
        mask[sl_a] |= fa & ~fb
        mask[sl_b] |= fb & ~fa
        both = fa & fb
        with np.errstate(invalid="ignore"):  # inf - inf on double misses
            jump = both & (np.abs(da - db) > tau_d)
        ndot = np.sum(normals[sl_a] * normals[sl_b], axis=-1)
        edge = jump | (both & (ndot < cos_tau))
        near_a = da <= db
        mask[sl_a] |= edge & near_a
        mask[sl_b] |= edge & ~near_a
    ink = np.clip(gaussian_filter(mask.astype(np.float32), sigma) * gain, 0.0, 1.0)
    gray = np.round((1.0 - ink) * 255.0).astype(np.uint8)
    return LineDrawing(gray=gray)


# --------------------------------------------------------------------------
# view sets
# --------------------------------------------------------------------------

@dataclass
class ViewSet:
    """Front, right, top and one isometric drawing of a single model."""

    F: LineDrawing
    R: LineDrawing
    T: LineDrawing
    I: LineDrawing
    iso_pose: int
    model_ref: str = ""

    def drawings(self) -> dict[str, LineDrawing]:
        return {"f": self.F, "r": self.R, "t": self.T, f"iso{self.iso_pose}": self.I}


def render_view(model, view: str, size: int = IMAGE_SIZE,
                frame: SceneFrame | None = None) -> LineDrawing:
    if frame is None:
        frame = _frame_for(model)
    camera = camera_for_view(view)
    depth, normals = render_depth(model, camera, size=size, frame=frame)
    return extract_lines(depth, normals, frame.diagonal)


def render_viewset(model: geometry.CsgModel, iso_pose: int,
                   size: int = IMAGE_SIZE) -> ViewSet:
    """The three canonical drawings plus the isometric drawing at ``iso_pose``,
    all framed identically; deterministic per (model, pose, size)."""
    if not 0 <= iso_pose < N_ISO_POSES:
        raise ValueError(f"pose id must be in [0, {N_ISO_POSES}), got {iso_pose}")
    frame = _frame_for(model)
    f, r, t, i = (render_view(model, v, size=size, frame=frame)
                  for v in ("f", "r", "t", f"iso{iso_pose}"))
    ref = model.model_id if isinstance(model, geometry.CsgModel) else ""
    return ViewSet(F=f, R=r, T=t, I=i, iso_pose=iso_pose, model_ref=ref)


# --------------------------------------------------------------------------
# PNG I/O
# --------------------------------------------------------------------------

def save_drawing(drawing: LineDrawing, path) -> None:
    """8-bit RGB PNG with deterministic bytes for identical drawings."""
    rgb = np.repeat(drawing.gray[:, :, None], 3, axis=2)
    from pathlib import Path
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(rgb, mode="RGB").save(path, format="PNG", optimize=False)


def load_drawing(path) -> LineDrawing:
    with Image.open(path) as im:
        gray = np.asarray(im.convert("L"))
    return LineDrawing(gray=gray)


def save_viewset(viewset: ViewSet, out_dir, model_name: str) -> dict[str, str]:
    """Write ``<model>_<view>.png`` files; returns view tag -> file name."""
    written = {}
    for tag, drawing in viewset.drawings().items():
        name = f"{model_name}_{tag}.png"
        save_drawing(drawing, f"{out_dir}/{name}")
        written[tag] = name
    return written
