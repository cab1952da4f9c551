"""TSDF volumes and the PCA shape subspace.

Volumes live in the object canonical frame (x along the car length, y along
height pointing down as in the camera frame, z along the width). Values are
stored flat in x-fastest order: ``flat = i + nx * (j + ny * k)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_DIMS = (60, 40, 60)
DEFAULT_TRUNCATION = 0.2
BOX_MARGIN = 1.25


def _f32(x) -> float:
    return float(np.float32(x))


class ShapeModelError(ValueError):
    """Raised for malformed volumes, bases, or a failed PCA fit."""


@dataclass(frozen=True)
class VolumeMeta:
    dims: tuple[int, int, int]
    extent: tuple[float, float, float]
    origin: tuple[float, float, float]
    truncation: float = DEFAULT_TRUNCATION

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        # float32-representable so the binary formats round-trip exactly
        object.__setattr__(self, "extent", tuple(_f32(e) for e in self.extent))
        object.__setattr__(self, "origin", tuple(_f32(o) for o in self.origin))
        object.__setattr__(self, "truncation", _f32(self.truncation))
        if len(self.dims) != 3 or min(self.dims) < 2:
            raise ShapeModelError(f"dims must be three counts >= 2, got {self.dims}")
        if min(self.extent) <= 0:
            raise ShapeModelError(f"extent must be positive, got {self.extent}")
        if self.truncation <= 0:
            raise ShapeModelError("truncation must be positive")

    @classmethod
    def centered(cls, extent, dims=DEFAULT_DIMS, truncation=DEFAULT_TRUNCATION):
        """Grid of ``dims`` voxel centers covering ``extent``, centered on the origin."""
        extent = np.asarray(extent, dtype=float)
        spacing = extent / np.asarray(dims, dtype=float)
        origin = -extent / 2 + spacing / 2
        return cls(tuple(dims), tuple(extent), tuple(origin), truncation)

    @classmethod
    def for_box(cls, box_dims, dims=DEFAULT_DIMS, truncation=DEFAULT_TRUNCATION,
                margin=BOX_MARGIN):
        """Volume for a (length, width, height) box, padded by ``margin``."""
        length, width, height = box_dims
        return cls.centered(np.array([length, height, width]) * margin, dims, truncation)

    @property
    def size(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def spacing(self) -> np.ndarray:
        return np.asarray(self.extent) / np.asarray(self.dims)

    def node_position(self, ijk) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(ijk, dtype=float) * self.spacing

    def voxel_centers(self) -> np.ndarray:
        """(N, 3) canonical coordinates of every voxel center in flat order."""
        nx, ny, nz = self.dims
        k, j, i = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
        ijk = np.stack([i.ravel(), j.ravel(), k.ravel()], axis=1)
        return self.node_position(ijk)

    def flat_index(self, i, j, k):
        nx, ny, _ = self.dims
        return np.asarray(i) + nx * (np.asarray(j) + ny * np.asarray(k))


@dataclass(frozen=True, eq=False)
class TsdfVolume:
    meta: VolumeMeta
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).ravel()
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        if values.size != self.meta.size:
            raise ShapeModelError(
                f"volume has {values.size} values, dims {self.meta.dims} need {self.meta.size}")

    @property
    def grid(self) -> np.ndarray:
        """Values as an (nx, ny, nz) array."""
        nx, ny, nz = self.meta.dims
        return self.values.reshape(nz, ny, nx).transpose(2, 1, 0)

    def is_truncated(self, atol=0.0) -> bool:
        return bool(np.all(np.abs(self.values) <= self.meta.truncation + atol))


@dataclass(frozen=True, eq=False)
class ShapeBasis:
    """PCA shape subspace: ``mean + basis @ z``.

    ``sigma`` holds the per-component standard deviation of the training
    coefficients (square root of the covariance eigenvalue), sorted descending.
    """

    meta: VolumeMeta
    mean: np.ndarray
    basis: np.ndarray
    sigma: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).ravel()
        basis = np.asarray(self.basis, dtype=float)
        if basis.ndim == 1:
            basis = basis[:, None]
        sigma = np.asarray(self.sigma, dtype=float).ravel()
        for arr in (mean, basis, sigma):
            arr.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "sigma", sigma)
        if mean.size != self.meta.size or basis.shape[0] != self.meta.size:
            raise ShapeModelError("mean/basis length does not match volume dims")
        if basis.shape[1] != sigma.size:
            raise ShapeModelError(
                f"basis has {basis.shape[1]} columns but {sigma.size} eigenvalues")
        if np.any(sigma <= 0):
            raise ShapeModelError("eigenvalues must be positive")
        if np.any(np.diff(sigma) > 0):
            raise ShapeModelError("eigenvalues must be sorted descending")

    @property
    def K(self) -> int:
        return self.basis.shape[1]

    @property
    def variance(self) -> np.ndarray:
        return self.sigma ** 2

    def check_z(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float).ravel()
        if z.size != self.K:
            raise ShapeModelError(f"expected {self.K} shape coefficients, got {z.size}")
        if not np.all(np.isfinite(z)):
            raise ShapeModelError("shape coefficients must be finite")
        return z

    def project(self, volume: TsdfVolume) -> np.ndarray:
        """Coefficients of ``volume`` in the subspace (orthogonal projection)."""
        if volume.meta != self.meta:
            raise ShapeModelError("volume metadata differs from the basis")
        return self.basis.T @ (volume.values - self.mean)


def decode(basis: ShapeBasis, z, clamp: bool = True) -> TsdfVolume:
    """Dense volume ``basis @ z + mean``, clamped to the truncation band."""
    z = basis.check_z(z)
    values = basis.basis @ z + basis.mean
    if clamp:
        tau = basis.meta.truncation
        values = np.clip(values, -tau, tau)
    return TsdfVolume(basis.meta, values)


def trilinear_weights(meta: VolumeMeta, points):
    """Corner indices and weights for trilinear interpolation.

    Queries outside the grid of voxel centers are clamped onto its boundary.

    Returns
    -------
    idx : (P, 8) int array of flat voxel indices
    w : (P, 8) float array of weights summing to one per row
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[-1] != 3:
        raise ShapeModelError("points must have shape (P, 3)")
    if not np.all(np.isfinite(pts)):
        raise ShapeModelError("query points must be finite")
    dims = np.asarray(meta.dims)
    g = (pts - np.asarray(meta.origin)) / meta.spacing
    g = np.clip(g, 0.0, dims - 1)
    i0 = np.minimum(np.floor(g).astype(np.int64), dims - 2)
    t = g - i0
    nx, ny, _ = meta.dims
    idx = np.empty((pts.shape[0], 8), dtype=np.int64)
    w = np.empty((pts.shape[0], 8))
    c = 0
    for dk in (0, 1):
        wk = t[:, 2] if dk else 1.0 - t[:, 2]
        for dj in (0, 1):
            wj = t[:, 1] if dj else 1.0 - t[:, 1]
            for di in (0, 1):
                wi = t[:, 0] if di else 1.0 - t[:, 0]
                idx[:, c] = (i0[:, 0] + di) + nx * ((i0[:, 1] + dj) + ny * (i0[:, 2] + dk))
                w[:, c] = wi * wj * wk
                c += 1
    return idx, w


def interpolate(meta: VolumeMeta, field_values, points) -> np.ndarray:
    """Trilinear interpolation of one flat field (or an (N, K) stack) at points."""
    idx, w = trilinear_weights(meta, points)
    field_values = np.asarray(field_values)
    if field_values.ndim == 1:
        return np.einsum("pc,pc->p", w, field_values[idx])
    return np.einsum("pc,pck->pk", w, field_values[idx])


def phi_linear_terms(basis: ShapeBasis, points):
    """Offsets and slopes with ``phi(x, z) = offset + slope @ z``."""
    idx, w = trilinear_weights(basis.meta, points)
    offset = np.einsum("pc,pc->p", w, basis.mean[idx])
    slope = np.einsum("pc,pck->pk", w, basis.basis[idx])
    return offset, slope


def phi(basis: ShapeBasis, z, points) -> np.ndarray:
    """Interpolated signed distance of the unclamped field at each point."""
    z = basis.check_z(z)
    offset, slope = phi_linear_terms(basis, points)
    out = offset + slope @ z
    return out if np.ndim(points) > 1 else out[0]


def phi_grad_z(basis: ShapeBasis, z, points) -> np.ndarray:
    """Gradient of ``phi`` with respect to ``z``; (P, K), or (K,) for one point."""
    basis.check_z(z)
    _, slope = phi_linear_terms(basis, points)
    return slope if np.ndim(points) > 1 else slope[0]


def pca_fit(volumes, K: int) -> ShapeBasis:
    """Fit mean and top-``K`` principal components of a set of TSDF volumes.

    Uses the M x M Gram matrix of the centered samples, which is cheap
    because the voxel count is far larger than the number of shapes.
    """
    volumes = list(volumes)
    K = int(K)
    M = len(volumes)
    if K < 1:
        raise ShapeModelError("K must be at least 1")
    if M < K + 1:
        raise ShapeModelError(
            f"need at least K+1={K + 1} volumes, got {M} (rank < K)")
    meta = volumes[0].meta
    for n, vol in enumerate(volumes[1:], start=1):
        if vol.meta != meta:
            raise ShapeModelError(f"volume {n} metadata differs from volume 0")

    X = np.stack([v.values for v in volumes])
    mean = X.mean(axis=0)
    Xc = X - mean
    gram = Xc @ Xc.T
    evals, evecs = np.linalg.eigh(gram)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    tol = max(evals[0], 0.0) * M * np.finfo(float).eps * 10
    rank = int(np.sum(evals > tol))
    if rank < K:
        raise ShapeModelError(f"training volumes have rank {rank} (rank < K={K})")

    evals, evecs = evals[:K], evecs[:, :K]
    V = Xc.T @ evecs / np.sqrt(evals)
    # re-orthonormalize to wash out roundoff from the Gram route
    V, R = np.linalg.qr(V)
    V *= np.sign(np.diag(R))
    # deterministic sign: largest-magnitude entry of each column is positive
    pivot = np.argmax(np.abs(V), axis=0)
    V *= np.sign(V[pivot, np.arange(K)])
    sigma = np.sqrt(evals / (M - 1))
    return ShapeBasis(meta, mean, V, sigma)


def explained_variance_ratio(volumes, basis: ShapeBasis) -> np.ndarray:
    """Fraction of total training variance carried by each component."""
    X = np.stack([v.values for v in volumes])
    total = np.sum((X - X.mean(axis=0)) ** 2) / (len(volumes) - 1)
    return basis.variance / total
