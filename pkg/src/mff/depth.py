"""Depth maps: LiDAR rendering, affinity inpainting, affine fitting and error metrics.

Depth values are camera-frame z in meters; NaN marks invalid pixels.
"""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy import ndimage

from mff import kernels
from mff.geometry import CameraIntrinsics, PointCloud, RigidTransform

DMAP_MAGIC = b"DMAP"
_DMAP_HEADER = struct.Struct("<4sII")
DEFAULT_PNG_SCALE = 1.0 / 256.0


class DepthError(ValueError):
    pass


class DepthFormatError(DepthError):
    pass


class DegenerateFitError(DepthError):
    pass


class InpaintConvergenceError(ArithmeticError):
    def __init__(self, residual: float, iterations: int):
        super().__init__(f"inpainting did not converge after {iterations} iterations (relative residual {residual:.3e})")
        self.residual = residual
        self.iterations = iterations


@dataclass
class DepthMap:
    """``(height, width)`` metric z-depth with NaN for invalid pixels."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise DepthError(f"depth map must be 2-D, got shape {v.shape}")
        if not np.issubdtype(v.dtype, np.floating):
            v = v.astype(np.float64)
        finite = np.isfinite(v)
        if np.any(v[finite] <= 0):
            raise DepthError("finite depth values must be positive")
        if np.any(np.isinf(v)):
            raise DepthError("depth map contains infinities")
        self.values = v

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.values)

    def check_camera(self, k: CameraIntrinsics) -> None:
        if (self.width, self.height) != (k.width, k.height):
            raise DepthError(f"depth map is {self.width}x{self.height}, camera is {k.width}x{k.height}")


class SparseDepth(DepthMap):
    @property
    def known_fraction(self) -> float:
        return float(np.count_nonzero(self.valid)) / self.values.size


# ---------------------------------------------------------------- file formats


def write_dmap(path, values) -> None:
    """Write any 2-D float raster as DMAP (f32 little-endian, row-major)."""
    v = np.asarray(values)
    h, w = v.shape
    with open(path, "wb") as fh:
        fh.write(_DMAP_HEADER.pack(DMAP_MAGIC, w, h))
        fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def read_dmap(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _DMAP_HEADER.size or not raw.startswith(DMAP_MAGIC):
        raise DepthFormatError(f"{path}: not a DMAP file")
    _, w, h = _DMAP_HEADER.unpack_from(raw, 0)
    need = _DMAP_HEADER.size + 4 * w * h
    if len(raw) != need:
        raise DepthFormatError(f"{path}: expected {need} bytes for {w}x{h}, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f4", offset=_DMAP_HEADER.size).reshape(h, w).astype(np.float64)


def save_depth(path, depth: DepthMap) -> None:
    write_dmap(path, depth.values)


def load_depth(path, sparse: bool = False) -> DepthMap:
    cls = SparseDepth if sparse else DepthMap
    return cls(read_dmap(path))


def write_depth_png(path, depth: DepthMap, scale: float = DEFAULT_PNG_SCALE) -> None:
    """16-bit PNG, ``meters = value * scale``; 0 encodes invalid."""
    from PIL import Image

    v = depth.values
    units = np.zeros(v.shape, dtype=np.uint16)
    ok = np.isfinite(v)
    units[ok] = np.clip(np.rint(v[ok] / scale), 1, 65535).astype(np.uint16)
    Image.fromarray(units).save(path, format="PNG")


def read_depth_png(path, scale: float = DEFAULT_PNG_SCALE) -> DepthMap:
    from PIL import Image

    with Image.open(path) as im:
        units = np.asarray(im, dtype=np.float64)
    if units.ndim != 2:
        raise DepthFormatError(f"{path}: expected a single-channel depth PNG")
    values = units * scale
    values[units == 0] = np.nan
    return DepthMap(values)


#: heatmap ramp stops (fraction of vmax -> RGB); invalid pixels are black
HEATMAP_RAMP = (
    (0.00, (0, 0, 128)),
    (0.25, (0, 0, 255)),
    (0.50, (0, 255, 255)),
    (0.75, (255, 255, 0)),
    (1.00, (255, 0, 0)),
)


def colorize(values, vmax: float | None = None) -> np.ndarray:
    """Map a raster to ``(H, W, 3)`` uint8 through :data:`HEATMAP_RAMP`."""
    v = np.asarray(values, dtype=np.float64)
    ok = np.isfinite(v)
    if vmax is None:
        vmax = float(v[ok].max()) if ok.any() else 1.0
    vmax = vmax if vmax > 0 else 1.0
    t = np.clip(np.where(ok, v, 0.0) / vmax, 0.0, 1.0)
    xs = [s for s, _ in HEATMAP_RAMP]
    rgb = np.zeros(v.shape + (3,), dtype=np.uint8)
    for ch in range(3):
        ys = [c[ch] for _, c in HEATMAP_RAMP]
        rgb[..., ch] = np.rint(np.interp(t, xs, ys)).astype(np.uint8)
    rgb[~ok] = 0
    return rgb


def write_heatmap(prefix, values, vmax: float | None = None) -> tuple[Path, Path]:
    """Write ``<prefix>.dmap`` and an 8-bit ``<prefix>.png`` colour rendering."""
    from PIL import Image

    prefix = Path(prefix)
    dmap_path = prefix.with_suffix(".dmap")
    png_path = prefix.with_suffix(".png")
    write_dmap(dmap_path, values)
    Image.fromarray(colorize(values, vmax)).save(png_path, format="PNG")
    return dmap_path, png_path


# ---------------------------------------------------------------- rendering


def pixel_index(u, v):
    """Pixel containing a continuous image coordinate (pixel centres are integers)."""
    return np.floor(np.asarray(v) + 0.5).astype(np.int64), np.floor(np.asarray(u) + 0.5).astype(np.int64)


def render_sparse_depth(cloud: PointCloud, sensor_to_camera: RigidTransform, k: CameraIntrinsics) -> SparseDepth:
    """Project a sensor-frame cloud into the camera; nearest depth wins per pixel."""
    if len(cloud) == 0:
        return SparseDepth(np.full((k.height, k.width), np.nan))
    cam = sensor_to_camera.apply(cloud.points)
    front = cam[:, 2] > 0
    cam = cam[front]
    z = cam[:, 2]
    u = k.cx + k.fx * cam[:, 0] / z
    v = k.cy + k.fy * cam[:, 1] / z
    rows, cols = pixel_index(u, v)
    inside = (rows >= 0) & (rows < k.height) & (cols >= 0) & (cols < k.width)
    img = kernels.zbuffer_min(rows[inside], cols[inside], z[inside], k.height, k.width)
    return SparseDepth(img)


# ---------------------------------------------------------------- inpainting


@dataclass(frozen=True)
class InpaintConfig:
    """Inpainting parameters.

    ``solver="cg"`` runs conjugate gradients on the normal equations; its
    iteration count grows with image size, so ``"direct"`` (sparse LU) is
    offered for full-resolution frames. Both solve the same system.
    """

    sigma_floor: float = 1e-4
    solver_tolerance: float = 1e-6
    max_iterations: int = 10_000
    neighborhood: int = 3
    solver: str = "cg"

    def __post_init__(self):
        if not self.sigma_floor > 0:
            raise ValueError("sigma_floor must be positive")
        if not (0 < self.solver_tolerance <= 1e-2):
            raise ValueError("solver_tolerance must lie in (0, 1e-2]")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.neighborhood != 3:
            raise ValueError("only the 3x3 neighborhood is supported")
        if self.solver not in ("cg", "direct"):
            raise ValueError(f"unknown solver {self.solver!r}")


_OFFSETS = [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1) if (dr, dc) != (0, 0)]


def affinity_matrix(guide: np.ndarray, sigma_floor: float) -> sp.csr_matrix:
    """Row-normalised 3x3 intensity affinities ``W`` (zero diagonal).

    ``w_pq = exp(-(Y_p - Y_q)^2 / (2 sigma_p^2))`` with ``sigma_p^2`` the intensity
    variance over p's window (floored), normalised so each row sums to 1.
    """
    g = np.asarray(guide, dtype=np.float64)
    h, w = g.shape
    n = h * w
    padded = np.pad(g, 1, constant_values=np.nan)
    shifted = np.stack([padded[1 + dr : 1 + dr + h, 1 + dc : 1 + dc + w] for dr, dc in _OFFSETS])
    inb = np.isfinite(shifted)
    window = np.concatenate([shifted, g[None]], axis=0)
    var = np.nanvar(window, axis=0)
    sigma2 = np.maximum(var, sigma_floor)
    diff = np.where(inb, shifted - g[None], 0.0)
    wts = np.where(inb, np.exp(-(diff**2) / (2.0 * sigma2[None])), 0.0)
    wts /= wts.sum(axis=0, keepdims=True)

    idx = np.arange(n).reshape(h, w)
    rows, cols, vals = [], [], []
    for k, (dr, dc) in enumerate(_OFFSETS):
        m = inb[k]
        r_idx = idx[m]
        q = (np.arange(h)[:, None] + dr) * w + (np.arange(w)[None, :] + dc)
        rows.append(r_idx)
        cols.append(q[m])
        vals.append(wts[k][m])
    mat = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    return mat.tocsr()


def inpaint_system(sparse: DepthMap, guide=None, cfg: InpaintConfig = InpaintConfig()):
    """Reduced linear system ``A x = b`` over unknown pixels.

    Each unknown pixel must equal the affinity-weighted mean of its neighbours;
    known pixels are eliminated as constants. Returns ``(A, b, unknown_mask)``.
    """
    d = sparse.values
    if guide is None:
        guide = np.zeros(d.shape)
    guide = np.asarray(guide, dtype=np.float64)
    if guide.shape != d.shape:
        raise DepthError(f"guide shape {guide.shape} does not match depth shape {d.shape}")
    known = np.isfinite(d).reshape(-1)
    if not known.any():
        raise DepthError("inpainting needs at least one known pixel")
    unknown = ~known
    wmat = affinity_matrix(guide, cfg.sigma_floor)
    w_uu = wmat[unknown][:, unknown]
    w_uk = wmat[unknown][:, known]
    a = (sp.identity(int(unknown.sum()), format="csr") - w_uu).tocsr()
    b = w_uk @ d.reshape(-1)[known].astype(np.float64)
    return a, b, unknown.reshape(d.shape)


def cgnr(a: sp.csr_matrix, b: np.ndarray, x0: np.ndarray, tol: float, max_iter: int):
    """Conjugate gradients on the normal equations ``A^T A x = A^T b``.

    Stops when ``||b - A x|| <= tol * ||b||``. Returns ``(x, relative_residual, iterations)``.
    """
    at = a.T.tocsr()
    x = x0.astype(np.float64).copy()
    bnorm = float(np.linalg.norm(b)) or 1.0
    r = b - a @ x
    rel = float(np.linalg.norm(r)) / bnorm
    if rel <= tol:
        return x, rel, 0
    z = at @ r
    p = z.copy()
    zz = float(z @ z)
    for it in range(1, max_iter + 1):
        ap = a @ p
        denom = float(ap @ ap)
        if denom == 0.0:
            break
        alpha = zz / denom
        x += alpha * p
        r -= alpha * ap
        rel = float(np.linalg.norm(r)) / bnorm
        if rel <= tol:
            return x, rel, it
        z = at @ r
        zz_new = float(z @ z)
        p = z + (zz_new / zz) * p
        zz = zz_new
    # recompute from scratch before reporting
    rel = float(np.linalg.norm(b - a @ x)) / bnorm
    if rel <= tol:
        return x, rel, max_iter
    raise InpaintConvergenceError(rel, max_iter)


def inpaint_depth(sparse: DepthMap, guide=None, cfg: InpaintConfig = InpaintConfig()) -> DepthMap:
    """Densify a sparse depth map; known pixels are kept exactly.

    ``guide`` is a grayscale image in [0, 1] of the same shape; ``None`` means
    a uniform guide (pure smoothness interpolation).
    """
    d = np.asarray(sparse.values, dtype=np.float64)
    a, b, unknown = inpaint_system(sparse, guide, cfg)
    out = d.copy()
    if not unknown.any():
        return DepthMap(out)
    if cfg.solver == "direct":
        x = spla.spsolve(a.tocsc(), b)
        rel = float(np.linalg.norm(b - a @ x)) / (float(np.linalg.norm(b)) or 1.0)
        if not (np.all(np.isfinite(x)) and rel <= cfg.solver_tolerance):
            raise InpaintConvergenceError(rel, 1)
    else:
        # nearest known value as the starting point
        idx = ndimage.distance_transform_edt(unknown, return_distances=False, return_indices=True)
        x0 = d[idx[0], idx[1]][unknown]
        x, _, _ = cgnr(a, b, x0, cfg.solver_tolerance, cfg.max_iterations)
    out[unknown] = x
    return DepthMap(out)


# ---------------------------------------------------------------- fitting & metrics


@dataclass(frozen=True)
class AffineDepthFit:
    scale: float
    shift: float
    residual_mae: float

    def apply(self, relative: DepthMap) -> np.ndarray:
        return self.scale * relative.values + self.shift


def fit_affine_depth(relative: DepthMap, sparse_gt: DepthMap) -> AffineDepthFit:
    """Least-squares ``gt ~ scale * relative + shift`` over pixels valid in both."""
    rel = np.asarray(relative.values, dtype=np.float64)
    gt = np.asarray(sparse_gt.values, dtype=np.float64)
    if rel.shape != gt.shape:
        raise DepthError("relative and ground-truth maps differ in shape")
    m = np.isfinite(rel) & np.isfinite(gt)
    x, y = rel[m], gt[m]
    if x.size < 2 or np.ptp(x) == 0:
        raise DegenerateFitError("affine fit needs at least two known pixels with distinct relative depth")
    design = np.column_stack([x, np.ones_like(x)])
    (scale, shift), *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = float(np.mean(np.abs(scale * x + shift - y)))
    return AffineDepthFit(float(scale), float(shift), resid)


@dataclass
class DepthErrorReport:
    mae: float
    abs_rel: float
    valid_pixel_count: int
    error_map: np.ndarray
    normalized_mae: float = 0.0


def _minmax(v: np.ndarray) -> np.ndarray:
    span = np.ptp(v)
    return np.zeros_like(v) if span == 0 else (v - v.min()) / span


def depth_errors(pred: DepthMap, gt: DepthMap) -> DepthErrorReport:
    """MAE and AbsRel over pixels valid in both maps.

    ``normalized_mae`` compares min-max normalised maps over the same pixels,
    a scale-free score for relative depth.
    """
    p = np.asarray(pred.values, dtype=np.float64)
    g = np.asarray(gt.values, dtype=np.float64)
    if p.shape != g.shape:
        raise DepthError(f"shape mismatch {p.shape} vs {g.shape}")
    m = np.isfinite(p) & np.isfinite(g)
    n = int(np.count_nonzero(m))
    if n == 0:
        raise DepthError("prediction and ground truth share no valid pixel")
    err = np.full(p.shape, np.nan)
    err[m] = np.abs(p[m] - g[m])
    return DepthErrorReport(
        mae=float(np.mean(err[m])),
        abs_rel=float(np.mean(err[m] / g[m])),
        valid_pixel_count=n,
        error_map=err,
        normalized_mae=float(np.mean(np.abs(_minmax(p[m]) - _minmax(g[m])))),
    )


def aggregate_error_heatmap(reports) -> np.ndarray:
    """Per-pixel mean error over the frames where the pixel is valid (NaN elsewhere)."""
    reports = list(reports)
    if not reports:
        raise DepthError("no error reports to aggregate")
    shape = reports[0].error_map.shape
    if any(r.error_map.shape != shape for r in reports):
        raise DepthError("error maps differ in shape")
    stack = np.stack([r.error_map for r in reports])
    count = np.isfinite(stack).sum(axis=0)
    total = np.where(np.isfinite(stack), stack, 0.0).sum(axis=0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        out = np.where(count > 0, total / np.maximum(count, 1), np.nan)
    return out


def quantization_step(depth: float) -> float:
    """Spacing of float32 depth values around ``depth`` (DMAP resolution)."""
    return float(np.spacing(np.float32(depth)))


