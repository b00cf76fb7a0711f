"""Gridded 2D fields and probability masses over a bounded square domain.

Grids are node-based: node (i, j) sits at (x_min + i dx, y_min + j dy) with
dx = (x_max - x_min) / (nx - 1). A pmf assigns each node the mass of the
node-centred cell around it (clipped to the domain). Arrays are indexed
``values[i, j]`` with i along x.
"""
import struct
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.special import logsumexp

from .rng import as_generator, substream

DOMAIN = (-3.5, 3.5, -3.5, 3.5)
_MAGIC = b"TF2D"
_VERSION = 1


@dataclass(frozen=True)
class Geometry:
    x_min: float = DOMAIN[0]
    x_max: float = DOMAIN[1]
    y_min: float = DOMAIN[2]
    y_max: float = DOMAIN[3]
    nx: int = 256
    ny: int = 256

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise ValueError("grid needs at least 2 nodes per axis")
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError("empty domain")

    @property
    def dx(self):
        return (self.x_max - self.x_min) / (self.nx - 1)

    @property
    def dy(self):
        return (self.y_max - self.y_min) / (self.ny - 1)

    @property
    def shape(self):
        return (self.nx, self.ny)

    def axes(self):
        return (np.linspace(self.x_min, self.x_max, self.nx),
                np.linspace(self.y_min, self.y_max, self.ny))

    def nodes(self):
        """All node coordinates as an (nx * ny, 2) array in row-major order."""
        xs, ys = self.axes()
        X, Y = np.meshgrid(xs, ys, indexing="ij")
        return np.column_stack([X.ravel(), Y.ravel()])

    def clamp(self, X):
        X = np.asarray(X, dtype=np.float64)
        return np.stack([np.clip(X[..., 0], self.x_min, self.x_max),
                         np.clip(X[..., 1], self.y_min, self.y_max)], axis=-1)

    def nearest_index(self, X):
        X = self.clamp(X)
        i = np.rint((X[..., 0] - self.x_min) / self.dx).astype(np.int64)
        j = np.rint((X[..., 1] - self.y_min) / self.dy).astype(np.int64)
        return np.clip(i, 0, self.nx - 1), np.clip(j, 0, self.ny - 1)

    def with_resolution(self, nx, ny=None):
        return Geometry(self.x_min, self.x_max, self.y_min, self.y_max,
                        int(nx), int(nx if ny is None else ny))


def _check_same(a, b):
    if a.geometry != b.geometry:
        raise ValueError("geometry mismatch")


@dataclass(frozen=True)
class GridField:
    """Scalar field sampled on grid nodes."""

    geometry: Geometry
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != self.geometry.shape:
            raise ValueError(f"values shape {v.shape} != grid {self.geometry.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("field has non-finite values")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def interp(self, X):
        return interp(self, X)

    def interp_grad(self, X):
        return interp_grad(self, X)

    def resample(self, geometry):
        """Bilinear re-evaluation of this field on the nodes of another grid."""
        vals = interp(self, geometry.nodes()).reshape(geometry.shape)
        return GridField(geometry, vals)


@dataclass(frozen=True)
class GridPmf:
    """Normalized nonnegative masses, one per grid node cell."""

    geometry: Geometry
    mass: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mass, dtype=np.float64)
        if m.shape != self.geometry.shape:
            raise ValueError(f"mass shape {m.shape} != grid {self.geometry.shape}")
        if np.any(m < 0) or not np.all(np.isfinite(m)):
            raise ValueError("pmf must be finite and nonnegative")
        if abs(m.sum() - 1.0) > 1e-12:
            raise ValueError(f"pmf sums to {m.sum()!r}, not 1")
        m.setflags(write=False)
        object.__setattr__(self, "mass", m)

    def log_mass(self):
        with np.errstate(divide="ignore"):
            return np.log(self.mass)


def _normalize(logits):
    logits = np.asarray(logits, dtype=np.float64)
    mass = np.exp(logits - logsumexp(logits))
    return mass / mass.sum()


def pmf_from_logits(geometry, logits):
    return GridPmf(geometry, _normalize(logits))


@dataclass
class WorldSpec:
    """Recipe for a synthetic world: density generator plus cost generator."""

    seed: int = 0
    geometry: Geometry = field(default_factory=Geometry)
    density_kind: str = "grf-potential"
    cost_kind: str = "grf"
    length_scale: float = 0.7
    field_std: float = 1.0
    density_scale: float = 1.5
    cost_length_scale: float = 0.9
    n_rbf: int = 8
    rbf_width: Tuple[float, float] = (0.4, 1.0)
    mixture: List[Tuple[Tuple[float, float], Tuple[Tuple[float, float], Tuple[float, float]], float]] = field(
        default_factory=lambda: [((-1.5, -1.0), ((0.5, 0.1), (0.1, 0.4)), 0.4),
                                 ((1.5, 0.5), ((0.4, -0.15), (-0.15, 0.6)), 0.35),
                                 ((0.0, 2.0), ((0.6, 0.0), (0.0, 0.25)), 0.25)])

    def __post_init__(self):
        if self.density_kind not in ("grf-potential", "gaussian-mixture"):
            raise ValueError(f"unknown density_kind {self.density_kind!r}")
        if self.cost_kind not in ("grf", "rbf-sum"):
            raise ValueError(f"unknown cost_kind {self.cost_kind!r}")
        w = np.array([c[2] for c in self.mixture], dtype=float)
        if self.density_kind == "gaussian-mixture" and (np.any(w < 0) or abs(w.sum() - 1) > 1e-9):
            raise ValueError("mixture weights must be nonnegative and sum to 1")


def _standardize(values, std):
    v = values - values.mean()
    sd = v.std()
    if sd == 0:
        raise ValueError("cannot standardize a constant field")
    return v * (std / sd)


def make_grf(spec, length_scale=None, tag="density"):
    """Smooth Gaussian random field: blurred white noise, standardized."""
    length_scale = spec.length_scale if length_scale is None else length_scale
    if length_scale <= 0 or spec.field_std <= 0:
        raise ValueError("length_scale and field_std must be positive")
    g = spec.geometry
    rng = substream(spec.seed, "world." + tag)
    noise = rng.standard_normal(g.shape)
    sig = (length_scale / g.dx, length_scale / g.dy)
    smooth = gaussian_filter(noise, sigma=sig, mode="reflect", truncate=4.0)
    return GridField(g, _standardize(smooth, spec.field_std))


def rbf_sum(spec, tag="cost"):
    """Raw (unstandardized) sum of signed Gaussian bumps, plus its parameters."""
    if spec.n_rbf < 1:
        raise ValueError("n_rbf must be >= 1")
    g = spec.geometry
    rng = substream(spec.seed, "world." + tag)
    centers = np.column_stack([rng.uniform(g.x_min, g.x_max, spec.n_rbf),
                               rng.uniform(g.y_min, g.y_max, spec.n_rbf)])
    widths = rng.uniform(spec.rbf_width[0], spec.rbf_width[1], spec.n_rbf)
    signs = rng.choice([-1.0, 1.0], spec.n_rbf)
    nodes = g.nodes()
    d2 = ((nodes[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
    raw = (signs * np.exp(-0.5 * d2 / widths ** 2)).sum(-1).reshape(g.shape)
    return raw, centers, widths, signs


def make_rbf_cost(spec):
    raw = rbf_sum(spec)[0]
    return GridField(spec.geometry, _standardize(raw, spec.field_std))


def make_cost(spec):
    if spec.cost_kind == "grf":
        return make_grf(spec, spec.cost_length_scale, tag="cost")
    return make_rbf_cost(spec)


def density_from_potential(potential, scale):
    """Truncated density proportional to exp(scale * potential) on the grid."""
    scale = float(scale)
    if not np.isfinite(scale):
        raise ValueError("scale must be finite")
    return pmf_from_logits(potential.geometry, scale * potential.values)


def mixture_logpdf(spec, X):
    X = np.asarray(X, dtype=np.float64)
    comps = []
    for mean, cov, weight in spec.mixture:
        cov = np.asarray(cov, dtype=np.float64)
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise ValueError("covariance not SPD") from None
        if not np.allclose(cov, cov.T):
            raise ValueError("covariance not SPD")
        z = np.linalg.solve(chol, (X - np.asarray(mean)).T)
        logdet = 2 * np.log(np.diag(chol)).sum()
        with np.errstate(divide="ignore"):
            lw = np.log(weight)
        comps.append(lw - 0.5 * (z * z).sum(0) - 0.5 * logdet - np.log(2 * np.pi))
    return logsumexp(np.stack(comps), axis=0)


def mixture_pmf(spec, geometry=None):
    geometry = spec.geometry if geometry is None else geometry
    logp = mixture_logpdf(spec, geometry.nodes()).reshape(geometry.shape)
    return pmf_from_logits(geometry, logp)


def data_log_potential(spec):
    """Unnormalized log-density field of the world's data law."""
    if spec.density_kind == "grf-potential":
        pot = make_grf(spec, tag="density")
        return GridField(pot.geometry, spec.density_scale * pot.values)
    g = spec.geometry
    return GridField(g, mixture_logpdf(spec, g.nodes()).reshape(g.shape))


def tilt(p, cost, lam):
    """q proportional to p * exp(-lam * cost), renormalized."""
    if p.geometry != cost.geometry:
        raise ValueError("geometry mismatch")
    if lam == 0:
        return p
    logits = p.log_mass() - lam * cost.values
    return pmf_from_logits(p.geometry, logits)


def sample(p, n, rng):
    """Multinomial node draw, uniform jitter within the cell, clamp to domain."""
    n = int(n)
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = as_generator(rng, "field2d.sample")
    g = p.geometry
    flat = p.mass.ravel()
    cdf = np.cumsum(flat)
    cdf /= cdf[-1]
    idx = np.searchsorted(cdf, rng.random(n), side="right")
    idx = np.minimum(idx, flat.size - 1)
    i, j = np.divmod(idx, g.ny)
    jitter = rng.random((n, 2)) - 0.5
    pts = np.column_stack([g.x_min + (i + jitter[:, 0]) * g.dx,
                           g.y_min + (j + jitter[:, 1]) * g.dy])
    return g.clamp(pts)


def _cell(field_, X):
    g = field_.geometry
    X = np.asarray(X, dtype=np.float64)
    Xc = g.clamp(X)
    fx = (Xc[..., 0] - g.x_min) / g.dx
    fy = (Xc[..., 1] - g.y_min) / g.dy
    i = np.clip(np.floor(fx).astype(np.int64), 0, g.nx - 2)
    j = np.clip(np.floor(fy).astype(np.int64), 0, g.ny - 2)
    return X, Xc, i, j, fx - i, fy - j


def interp(field_, X):
    """Bilinear interpolation with border padding (queries clamped to the box)."""
    _, _, i, j, tx, ty = _cell(field_, X)
    v = field_.values
    return ((1 - tx) * (1 - ty) * v[i, j] + tx * (1 - ty) * v[i + 1, j]
            + (1 - tx) * ty * v[i, j + 1] + tx * ty * v[i + 1, j + 1])


def interp_grad(field_, X):
    """Gradient of the bilinear patch; zero along axes where the query was clamped."""
    X, Xc, i, j, tx, ty = _cell(field_, X)
    g = field_.geometry
    v = field_.values
    gx = ((1 - ty) * (v[i + 1, j] - v[i, j]) + ty * (v[i + 1, j + 1] - v[i, j + 1])) / g.dx
    gy = ((1 - tx) * (v[i, j + 1] - v[i, j]) + tx * (v[i + 1, j + 1] - v[i + 1, j])) / g.dy
    gx = np.where(X[..., 0] == Xc[..., 0], gx, 0.0)
    gy = np.where(X[..., 1] == Xc[..., 1], gy, 0.0)
    return np.stack([gx, gy], axis=-1)


def kl(a, b):
    _check_same(a, b)
    am, bm = a.mass, b.mass
    pos = am > 0
    if np.any(bm[pos] <= 0):
        raise ValueError("absolute continuity violated")
    return float(np.sum(am[pos] * (np.log(am[pos]) - np.log(bm[pos]))))


def skl(a, b):
    """Half the symmetric KL sum, the grid evaluation metric."""
    return 0.5 * (kl(a, b) + kl(b, a))


def histogram(points, geometry):
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(points) < 1:
        raise ValueError("histogram needs at least one point")
    i, j = geometry.nearest_index(points)
    counts = np.zeros(geometry.shape)
    np.add.at(counts, (i, j), 1.0)
    return GridPmf(geometry, counts / counts.sum())


def log_density_field(p, floor=1e-300):
    """Log of the per-area density of a pmf, as a field for interpolation."""
    g = p.geometry
    return GridField(g, np.log(np.maximum(p.mass, floor) / (g.dx * g.dy)))


# -- serialization ---------------------------------------------------------

def to_bytes(obj):
    g = obj.geometry
    vals = obj.values if isinstance(obj, GridField) else obj.mass
    kind = 0 if isinstance(obj, GridField) else 1
    header = _MAGIC + struct.pack("<I", _VERSION | (kind << 16))
    header += struct.pack("<4d", g.x_min, g.x_max, g.y_min, g.y_max)
    header += struct.pack("<2I", g.nx, g.ny)
    return header + np.ascontiguousarray(vals, dtype="<f8").tobytes()


def from_bytes(data):
    if data[:4] != _MAGIC:
        raise ValueError("not a TF2D file")
    (ver,) = struct.unpack_from("<I", data, 4)
    version, kind = ver & 0xFFFF, ver >> 16
    if version != _VERSION:
        raise ValueError(f"unsupported TF2D version {version}")
    bounds = struct.unpack_from("<4d", data, 8)
    nx, ny = struct.unpack_from("<2I", data, 40)
    g = Geometry(*bounds, nx, ny)
    vals = np.frombuffer(data, dtype="<f8", count=nx * ny, offset=48).reshape(nx, ny).copy()
    return GridField(g, vals) if kind == 0 else GridPmf(g, vals)


def save(obj, path):
    with open(path, "wb") as fh:
        fh.write(to_bytes(obj))


def load(path):
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


def to_pgm(values):
    """8-bit grayscale PGM, min-max scaled, y axis pointing up."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    scaled = np.zeros_like(v) if hi == lo else (v - lo) / (hi - lo)
    img = np.rint(scaled * 255).astype(np.uint8).T[::-1]
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def save_pgm(obj, path):
    vals = obj.values if isinstance(obj, GridField) else obj.mass
    with open(path, "wb") as fh:
        fh.write(to_pgm(vals))
