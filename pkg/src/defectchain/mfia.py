"""Misalignment extraction from grayscale B-scan images.

The core primitive is the trial fibre: a segment of length H centered at
a pixel, rotated until the gray-scale variance along it is minimal.  The
minimizing angle is the local ply orientation.  Angle estimates are
collected with a hierarchical quadtree scheme that concentrates samples
in cells showing high mean absolute misalignment.

Pixel pitches may be anisotropic; angle search runs in pixel coordinates
and results are converted to physical angles via
tan(phi_phys) = (pitch_x3 / pitch_x1) * tan(phi_pix).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter1d, map_coordinates

from .errors import DataError, DomainError, ParameterError
from .klfield import (DecaySpec, GeometrySpec, KLBasis, WrinkleParams,
                      default_jacobian_grid, eval_wrinkle, jacobian_positive,
                      wrinkle_gradient)

__all__ = [
    "GrayImage",
    "TrialFibreConfig",
    "SampleAllocationTree",
    "MisalignmentSamples",
    "fibre_variance",
    "estimate_angle",
    "pixel_to_physical_angle",
    "physical_to_pixel_angle",
    "hierarchical_sample",
    "unwrap_corner",
    "wrap_corner",
    "synth_bscan",
    "GroundTruthField",
]

_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass
class GrayImage:
    """8-bit grayscale image with physical pixel pitches (mm/px)."""

    pixels: np.ndarray
    pitch_x1: float
    pitch_x3: float

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.dtype != np.uint8:
            self.pixels = np.clip(np.round(self.pixels), 0, 255).astype(np.uint8)
        if self.pixels.ndim != 2:
            raise ParameterError("pixels must be a 2D array")
        if min(self.pixels.shape) < 16:
            raise ParameterError("image must be at least 16x16 pixels")
        if self.pitch_x1 <= 0 or self.pitch_x3 <= 0:
            raise ParameterError("pixel pitches must be positive")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def to_pgm(self, path):
        """Write binary (P5) PGM."""
        with open(path, "wb") as fh:
            fh.write(f"P5\n{self.width} {self.height}\n255\n".encode())
            fh.write(self.pixels.tobytes())

    @classmethod
    def from_pgm(cls, path, pitch_x1: float, pitch_x3: float) -> "GrayImage":
        with open(path, "rb") as fh:
            data = fh.read()
        tokens = []
        i = 0
        # header = 4 whitespace-separated tokens, '#' comments allowed
        while len(tokens) < 4:
            while i < len(data) and data[i:i + 1].isspace():
                i += 1
            if data[i:i + 1] == b"#":
                while i < len(data) and data[i:i + 1] != b"\n":
                    i += 1
                continue
            j = i
            while j < len(data) and not data[j:j + 1].isspace():
                j += 1
            tokens.append(data[i:j])
            i = j
        if tokens[0] != b"P5":
            raise DataError("not a binary PGM (P5) file")
        width, height, maxval = (int(t) for t in tokens[1:4])
        if maxval != 255:
            raise DataError("only 8-bit PGM supported")
        i += 1  # single whitespace after maxval
        raster = np.frombuffer(data[i:i + width * height], dtype=np.uint8)
        if raster.size != width * height:
            raise DataError("truncated PGM raster")
        return cls(raster.reshape(height, width).copy(), pitch_x1, pitch_x3)

    @classmethod
    def from_png(cls, path, pitch_x1: float, pitch_x3: float) -> "GrayImage":
        from PIL import Image

        arr = np.asarray(Image.open(path).convert("L"))
        return cls(arr.copy(), pitch_x1, pitch_x3)

    @classmethod
    def load(cls, path, pitch_x1: float, pitch_x3: float) -> "GrayImage":
        path = str(path)
        if path.lower().endswith(".png"):
            return cls.from_png(path, pitch_x1, pitch_x3)
        return cls.from_pgm(path, pitch_x1, pitch_x3)


@dataclass(frozen=True)
class TrialFibreConfig:
    """Trial-fibre search settings (pixel units)."""

    fibre_length: float = 21.0
    theta_min: float = -np.pi / 4
    theta_max: float = np.pi / 4
    step: float = 0.5
    coarse_step_deg: float = 1.0
    refine_tol_deg: float = 0.05
    min_fraction: float = 0.6

    def __post_init__(self):
        if self.fibre_length < 3:
            raise ParameterError("fibre_length must be >= 3 pixels")
        if not (-np.pi / 2 < self.theta_min < self.theta_max < np.pi / 2):
            raise ParameterError("theta range must lie inside (-pi/2, pi/2)")
        if self.step <= 0:
            raise ParameterError("integration step must be positive")

    @classmethod
    def for_ply(cls, ply_thickness_px: float, **kw) -> "TrialFibreConfig":
        """H = 3t rule: fibre three ply thicknesses long."""
        return cls(fibre_length=max(3.0, 3.0 * ply_thickness_px), **kw)


def pixel_to_physical_angle(phi_pix, img: GrayImage):
    return np.arctan((img.pitch_x3 / img.pitch_x1) * np.tan(phi_pix))


def physical_to_pixel_angle(phi_phys, img: GrayImage):
    return np.arctan((img.pitch_x1 / img.pitch_x3) * np.tan(phi_phys))


def _fibre_offsets(cfg: TrialFibreConfig) -> np.ndarray:
    half = cfg.fibre_length / 2.0
    n = int(np.floor(cfg.fibre_length / cfg.step)) + 1
    return np.linspace(-half, half, n)


def _fibre_variances(img: GrayImage, x, thetas: np.ndarray,
                     cfg: TrialFibreConfig) -> np.ndarray:
    """Gray-scale variance along the trial fibre for each theta.

    Fibres are clipped to the image; variance is normalized over the
    retained samples.  NaN where less than min_fraction of H survives.
    """
    col, row = float(x[0]), float(x[1])
    h = _fibre_offsets(cfg)
    thetas = np.atleast_1d(np.asarray(thetas, dtype=float))
    cols = col + np.outer(np.cos(thetas), h)
    rows = row + np.outer(np.sin(thetas), h)
    inside = ((cols >= 0) & (cols <= img.width - 1)
              & (rows >= 0) & (rows <= img.height - 1))
    vals = map_coordinates(img.pixels.astype(float),
                           [rows.ravel(), cols.ravel()],
                           order=1, mode="nearest").reshape(rows.shape)
    counts = inside.sum(axis=1)
    ok = counts * cfg.step >= cfg.min_fraction * cfg.fibre_length
    vals = np.where(inside, vals, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = vals.sum(axis=1) / counts
        var = (np.where(inside, (vals - mean[:, None]) ** 2, 0.0).sum(axis=1)
               / counts)
    var[~ok] = np.nan
    return var


def fibre_variance(img: GrayImage, x, theta: float,
                   cfg: TrialFibreConfig) -> float:
    """Variance of gray values along one trial fibre (gray^2)."""
    v = _fibre_variances(img, x, theta, cfg)[0]
    if np.isnan(v):
        raise DomainError("trial fibre lies (almost) fully outside the image")
    return float(v)


def _golden_refine(f, lo: float, hi: float, tol: float) -> float:
    c = hi - _GOLDEN * (hi - lo)
    d = lo + _GOLDEN * (hi - lo)
    fc, fd = f(c), f(d)
    while hi - lo > tol:
        if fc < fd:
            hi, d, fd = d, c, fc
            c = hi - _GOLDEN * (hi - lo)
            fc = f(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + _GOLDEN * (hi - lo)
            fd = f(d)
    return 0.5 * (lo + hi)


def estimate_angle(img: GrayImage, x, cfg: TrialFibreConfig) -> float:
    """Pixel-space misalignment at x = (col, row): argmin of fibre variance.

    Coarse grid scan followed by golden-section refinement; flat variance
    landscapes tie-break toward theta = 0.
    """
    step = np.deg2rad(cfg.coarse_step_deg)
    thetas = np.arange(cfg.theta_min, cfg.theta_max + step / 2, step)
    variances = _fibre_variances(img, x, thetas, cfg)
    if np.all(np.isnan(variances)):
        raise DomainError("trial fibre lies (almost) fully outside the image")
    vmin = np.nanmin(variances)
    vmax = np.nanmax(variances)
    if vmax - vmin <= 1e-12:
        return 0.0  # constant landscape: tie-break toward zero

    def f(t):
        v = _fibre_variances(img, x, t, cfg)[0]
        return np.inf if np.isnan(v) else v

    # refine every coarse basin whose floor is close to the global
    # minimum: near-tied minima can differ by less than the coarse
    # resolution, so refining only the lowest grid point may pick the
    # wrong basin
    candidates = np.where(variances <= vmin + 1e-3 * (vmax - vmin))[0]
    tol = np.deg2rad(cfg.refine_tol_deg)
    best_theta, best_v = None, np.inf
    for i in candidates:
        lo = thetas[max(i - 1, 0)]
        hi = thetas[min(i + 1, thetas.size - 1)]
        # the bracket spans two coarse steps and can hold more than one
        # local minimum; a fine pre-scan localizes the best sub-basin so
        # the golden-section search runs on a unimodal interval
        sub = np.linspace(lo, hi, 21)
        vsub = _fibre_variances(img, x, sub, cfg)
        j = int(np.nanargmin(vsub))
        lo = sub[max(j - 1, 0)]
        hi = sub[min(j + 1, sub.size - 1)]
        t = _golden_refine(f, lo, hi, tol)
        v = f(t)
        if (v < best_v - 1e-12
                or (abs(v - best_v) <= 1e-12
                    and (best_theta is None or abs(t) < abs(best_theta)))):
            best_theta, best_v = t, v
    return float(best_theta)


@dataclass
class MisalignmentSamples:
    """Measured (x1, x3, phi) triples in physical units (mm, rad)."""

    x1: np.ndarray
    x3: np.ndarray
    phi: np.ndarray
    source: str = ""

    def __post_init__(self):
        self.x1 = np.asarray(self.x1, dtype=float)
        self.x3 = np.asarray(self.x3, dtype=float)
        self.phi = np.asarray(self.phi, dtype=float)
        if not (self.x1.shape == self.x3.shape == self.phi.shape):
            raise DataError("x1, x3, phi must have matching shapes")
        if np.any(np.abs(self.phi) >= np.pi / 2):
            raise DataError("misalignment angles must satisfy |phi| < pi/2")

    def __len__(self):
        return self.x1.size

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x1_mm", "x3_mm", "phi_rad"])
            for a, b, c in zip(self.x1, self.x3, self.phi):
                writer.writerow([f"{a:.12g}", f"{b:.12g}", f"{c:.12g}"])

    @classmethod
    def from_csv(cls, path, source: str = "") -> "MisalignmentSamples":
        rows = np.genfromtxt(path, delimiter=",", skip_header=1, ndmin=2)
        if rows.size == 0:
            raise DataError(f"no samples in {path}")
        return cls(rows[:, 0], rows[:, 1], rows[:, 2],
                   source=source or str(path))


@dataclass
class _Cell:
    row0: int
    row1: int
    col0: int
    col1: int
    n_points: int = 0
    mean_abs_phi: float = 0.0
    gamma: float = 0.0

    def contains(self, row, col):
        return (self.row0 <= row < self.row1) and (self.col0 <= col < self.col1)

    def as_dict(self):
        return {
            "bounds_px": [int(self.row0), int(self.row1),
                          int(self.col0), int(self.col1)],
            "n_points": self.n_points,
            "mean_abs_phi": self.mean_abs_phi,
            "gamma": self.gamma,
        }


@dataclass
class SampleAllocationTree:
    """Per-level cell statistics of the hierarchical sampling scheme."""

    m0_rows: int
    m0_cols: int
    levels: list = field(default_factory=list)

    def to_json(self, path):
        payload = {
            "m0": self.m0_rows * self.m0_cols,
            "m0_grid": [self.m0_rows, self.m0_cols],
            "levels": [[c.as_dict() for c in level] for level in self.levels],
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _coarse_grid(height: int, width: int, m0: int):
    """Split m0 into rows x cols so that cells are as square as possible."""
    best = (1, m0)
    best_score = np.inf
    for r in range(1, m0 + 1):
        if m0 % r:
            continue
        c = m0 // r
        score = abs(np.log((height / r) / (width / c)))
        if score < best_score:
            best_score = score
            best = (r, c)
    return best


def _cell_bounds(height, width, rows, cols):
    r_edges = np.linspace(0, height, rows + 1).astype(int)
    c_edges = np.linspace(0, width, cols + 1).astype(int)
    cells = []
    for i in range(rows):
        for j in range(cols):
            cells.append(_Cell(r_edges[i], r_edges[i + 1],
                               c_edges[j], c_edges[j + 1]))
    return cells


def _sample_cell_pixels(cell: _Cell, n: int, taken: set, rng) -> list:
    """Up to n distinct pixel positions inside the cell, avoiding `taken`."""
    h = cell.row1 - cell.row0
    w = cell.col1 - cell.col0
    total = h * w
    avail = total - sum(1 for p in taken
                        if cell.row0 <= p[0] < cell.row1
                        and cell.col0 <= p[1] < cell.col1)
    n = min(n, avail)
    if n <= 0:
        return []
    out = []
    # rejection loop is fine: budgets are far below cell pixel counts
    while len(out) < n:
        flat = rng.integers(0, total, size=2 * (n - len(out)))
        for f in flat:
            r = cell.row0 + int(f // w)
            c = cell.col0 + int(f % w)
            if (r, c) not in taken:
                taken.add((r, c))
                out.append((r, c))
                if len(out) == n:
                    break
    return out


def hierarchical_sample(img: GrayImage, cfg: TrialFibreConfig, levels: int,
                        budgets, rng, m0: int = 12, source: str = ""):
    """Adaptive multi-level sampling of misalignment angles.

    Level 0 spreads its budget uniformly over m0 coarse cells; each later
    level refines every cell into four children and allocates
    ceil(gamma_i * N_level) new points to the children of cell i, where
    gamma_i is the cell's share of the total mean absolute misalignment.
    Returns (SampleAllocationTree, MisalignmentSamples).
    """
    if levels < 1:
        raise ParameterError("levels must be >= 1")
    budgets = list(budgets)
    if len(budgets) == 1:
        budgets = budgets * levels
    if len(budgets) != levels:
        raise ParameterError("need one budget per level")
    rows0, cols0 = _coarse_grid(img.height, img.width, m0)
    if img.height < rows0 or img.width < cols0:
        raise ParameterError("coarse mesh does not fit in the image")

    tree = SampleAllocationTree(m0_rows=rows0, m0_cols=cols0)
    pts: list[tuple[int, int]] = []
    phis: list[float] = []
    prev_cells = None

    for level in range(levels):
        rows, cols = rows0 * 2 ** level, cols0 * 2 ** level
        cells = _cell_bounds(img.height, img.width, rows, cols)
        taken_this_level: set = set()

        if level == 0:
            per_cell = int(np.ceil(budgets[0] / len(cells)))
            alloc = [per_cell] * len(cells)
            targets = cells
        else:
            # each parent's allocation goes to the union of its 4 children
            alloc = [int(np.ceil(c.gamma * budgets[level])) for c in prev_cells]
            targets = prev_cells

        for cell, n in zip(targets, alloc):
            got = 0
            attempts = 0
            # pixels whose fibre falls outside the image are skipped and
            # replaced by a fresh draw within the same cell
            while got < n and attempts < 20 * max(n, 1):
                pix = _sample_cell_pixels(cell, 1, taken_this_level, rng)
                if not pix:
                    break
                attempts += 1
                r, c = pix[0]
                try:
                    phi_pix = estimate_angle(img, (c + 0.5, r + 0.5), cfg)
                except DomainError:
                    continue
                phi = float(pixel_to_physical_angle(phi_pix, img))
                pts.append((r, c))
                phis.append(phi)
                got += 1

        # statistics over all points accumulated so far, on this level's mesh
        abs_sums = np.zeros(len(cells))
        counts = np.zeros(len(cells), dtype=int)
        c_per_row = cols
        h_cell = img.height / rows
        w_cell = img.width / cols
        for (r, c), phi in zip(pts, phis):
            i = min(int(r / h_cell), rows - 1) * c_per_row \
                + min(int(c / w_cell), cols - 1)
            abs_sums[i] += abs(phi)
            counts[i] += 1
        mean_abs = np.where(counts > 0, abs_sums / np.maximum(counts, 1), 0.0)
        total = mean_abs.sum()
        if total > 0:
            gammas = mean_abs / total
        else:
            gammas = np.full(len(cells), 1.0 / len(cells))  # uniform fallback
        for cell, n, m, g in zip(cells, counts, mean_abs, gammas):
            cell.n_points = int(n)
            cell.mean_abs_phi = float(m)
            cell.gamma = float(g)
        tree.levels.append(cells)
        prev_cells = cells

    rs = np.array([p[0] for p in pts], dtype=float) + 0.5
    cs = np.array([p[1] for p in pts], dtype=float) + 0.5
    samples = MisalignmentSamples(
        x1=cs * img.pitch_x1, x3=rs * img.pitch_x3,
        phi=np.array(phis), source=source)
    return tree, samples


def unwrap_corner(img: GrayImage, geom: GeometrySpec, focus_radius: float,
                  out_pitch_x1: float | None = None,
                  out_pitch_x3: float | None = None,
                  flat: bool = False) -> GrayImage:
    """Polar-to-Cartesian resample of a corner B-scan.

    Wrapped-image convention: the center of curvature sits at the pixel
    origin, the annulus [R, R + t] spans polar angles [0, pi/2] measured
    from the column axis toward the row axis.  Output columns are arc
    length along the focus radius; rows are depth from the inner radius.
    With flat=True (radius -> infinity) the image is returned unchanged.
    """
    if flat or not np.isfinite(geom.radius):
        return GrayImage(img.pixels.copy(), img.pitch_x1, img.pitch_x3)
    t = geom.total_thickness
    if not (geom.radius <= focus_radius <= geom.radius + t):
        raise ParameterError("focus_radius must lie inside the annulus")
    p1 = out_pitch_x1 if out_pitch_x1 is not None else img.pitch_x1
    p3 = out_pitch_x3 if out_pitch_x3 is not None else img.pitch_x3
    arc = (np.pi / 2.0) * focus_radius
    n_cols = int(np.ceil(arc / p1))
    n_rows = int(np.ceil(t / p3))
    s = (np.arange(n_cols) + 0.5) * p1
    d = (np.arange(n_rows) + 0.5) * p3
    alpha = s / focus_radius
    rho = geom.radius + d
    xx = np.outer(rho, np.cos(alpha))
    zz = np.outer(rho, np.sin(alpha))
    out = map_coordinates(img.pixels.astype(float),
                          [(zz / img.pitch_x3 - 0.5).ravel(),
                           (xx / img.pitch_x1 - 0.5).ravel()],
                          order=1, mode="nearest").reshape(n_rows, n_cols)
    return GrayImage(out, p1, p3)


def wrap_corner(img_flat: GrayImage, geom: GeometrySpec, focus_radius: float,
                out_pitch_x1: float | None = None,
                out_pitch_x3: float | None = None,
                background: int = 0) -> GrayImage:
    """Inverse of :func:`unwrap_corner`: bend a flat image around the corner."""
    t = geom.total_thickness
    p1 = out_pitch_x1 if out_pitch_x1 is not None else img_flat.pitch_x1
    p3 = out_pitch_x3 if out_pitch_x3 is not None else img_flat.pitch_x3
    extent = geom.radius + t
    n_cols = int(np.ceil(extent / p1)) + 1
    n_rows = int(np.ceil(extent / p3)) + 1
    x = (np.arange(n_cols) + 0.5) * p1
    z = (np.arange(n_rows) + 0.5) * p3
    xx, zz = np.meshgrid(x, z)
    rho = np.hypot(xx, zz)
    alpha = np.arctan2(zz, xx)
    d = rho - geom.radius
    s = alpha * focus_radius
    inside = (d >= 0) & (d <= t) & (alpha >= 0) & (alpha <= np.pi / 2)
    vals = map_coordinates(img_flat.pixels.astype(float),
                           [(d / img_flat.pitch_x3 - 0.5).ravel(),
                            (s / img_flat.pitch_x1 - 0.5).ravel()],
                           order=1, mode="nearest").reshape(d.shape)
    out = np.where(inside, vals, float(background))
    return GrayImage(out, p1, p3)


@dataclass
class GroundTruthField:
    """Dense ground-truth misalignment on a pixel-center grid."""

    x1: np.ndarray
    x3: np.ndarray
    phi: np.ndarray  # shape (len(x3), len(x1))

    def interp(self, x1, x3):
        from scipy.interpolate import RegularGridInterpolator

        f = RegularGridInterpolator((self.x3, self.x1), self.phi,
                                    bounds_error=False, fill_value=None)
        return f(np.column_stack([np.atleast_1d(x3), np.atleast_1d(x1)]))

    def to_samples(self, source: str = "") -> MisalignmentSamples:
        xx1, xx3 = np.meshgrid(self.x1, self.x3)
        return MisalignmentSamples(xx1.ravel(), xx3.ravel(),
                                   self.phi.ravel(), source=source)


def synth_bscan(xi: WrinkleParams, basis: KLBasis, decay: DecaySpec,
                geom: GeometrySpec, pitch_x1: float, pitch_x3: float,
                noise_sigma: float = 0.0, rng=None,
                blur_rate: float = 0.0, focus_depth: float = 4.8,
                length: float | None = None):
    """Render a flat synthetic B-scan of the deformed ply stack.

    Ply/interply layers are drawn as a smooth periodic gray profile in
    the undeformed coordinate z0, recovered at each pixel by inverting
    z = z0 + W(x1, z0) with a few Newton steps.  Returns
    (GrayImage, GroundTruthField) where the truth angle at a pixel is the
    misalignment of the ply passing through it, arctan(dW/dx1 at z0).
    """
    if length is None:
        length = geom.arc_length
    x1j, x3j = default_jacobian_grid(geom, length)
    if not jacobian_positive(xi, basis, decay, x1j, x3j):
        raise ParameterError("wrinkle is inadmissible (self-intersecting)")
    t = geom.total_thickness
    n_cols = int(np.ceil(length / pitch_x1))
    n_rows = int(np.ceil(t / pitch_x3))
    x1 = (np.arange(n_cols) + 0.5) * pitch_x1
    x3 = (np.arange(n_rows) + 0.5) * pitch_x3
    x1 = np.minimum(x1, length)
    x3 = np.minimum(x3, t)

    g1s = decay.g1(x1) * (basis.mode_values(x1) @ xi.amplitudes)
    z0 = np.tile(x3[:, None], (1, n_cols))
    for _ in range(6):
        w = g1s[None, :] * decay.g3(z0)
        dw = g1s[None, :] * decay.g3.deriv(z0)
        z0 = z0 - (z0 + w - x3[:, None]) / (1.0 + dw)
    period = geom.layer_period
    gray = 127.5 + 105.0 * np.cos(2.0 * np.pi * z0 / period)

    if blur_rate > 0:
        # depth-of-focus model: vertical blur grows away from the focus band
        sigmas = blur_rate * np.abs(x3 - focus_depth) / pitch_x3
        bands = np.clip(np.round(sigmas / 0.5).astype(int), 0, 8)
        blurred = {0: gray}
        for b in np.unique(bands):
            if b > 0:
                blurred[b] = gaussian_filter1d(gray, 0.5 * b, axis=0)
        gray = np.vstack([blurred[bands[i]][i] for i in range(n_rows)])

    if noise_sigma > 0:
        if rng is None:
            raise ParameterError("rng required when noise_sigma > 0")
        gray = gray + rng.normal(0.0, noise_sigma, size=gray.shape)

    img = GrayImage(gray, pitch_x1, pitch_x3)
    d1, _ = wrinkle_gradient(xi, basis, decay,
                             np.tile(x1[None, :], (n_rows, 1)),
                             z0)
    truth = GroundTruthField(x1=x1, x3=x3, phi=np.arctan(d1))
    return img, truth
