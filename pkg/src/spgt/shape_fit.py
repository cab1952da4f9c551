"""Shape-coefficient fitting against an instance point cloud and its 3D box.

The total cost is ``w1 * L_pc + w2 * L_dim + w3 * L_z``:

* ``L_pc``: mean squared TSDF value at the observed points,
* ``L_dim``: squared hinge on negative TSDF at voxels outside the box,
* ``L_z``: squared coefficients scaled by the per-component spread.

It is minimized with Levenberg-Marquardt on a stacked residual vector whose
squared norm equals the total cost.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .shape_model import ShapeBasis, phi_linear_terms

CONVERGED = "converged"
MAX_ITERS = "max-iters"
FALLBACK = "fallback-mean-shape"

LAMBDA_CEILING = 1e8


def yaw_matrix(yaw: float) -> np.ndarray:
    """Rotation about the camera-frame vertical (Y) axis."""
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


@dataclass(frozen=True)
class Box3:
    """Oriented 3D box. ``dims`` is (length, width, height) in meters."""

    center: tuple[float, float, float]
    dims: tuple[float, float, float]
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "dims", tuple(float(d) for d in self.dims))
        if len(self.center) != 3 or len(self.dims) != 3:
            raise ValueError("center and dims need three components")
        if min(self.dims) <= 0:
            raise ValueError(f"box dims must be positive, got {self.dims}")
        # wrap into (-pi, pi]
        yaw = math.remainder(float(self.yaw), 2 * math.pi)
        if yaw == -math.pi:
            yaw = math.pi
        object.__setattr__(self, "yaw", yaw)

    @property
    def half_extents(self) -> np.ndarray:
        """Half sizes along the canonical axes (length, height, width)."""
        length, width, height = self.dims
        return np.array([length, height, width]) / 2

    @property
    def rotation(self) -> np.ndarray:
        return yaw_matrix(self.yaw)

    def to_canonical(self, points) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float))
        return (p - np.asarray(self.center)) @ self.rotation

    def to_world(self, points) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float))
        return p @ self.rotation.T + np.asarray(self.center)

    def contains_canonical(self, points) -> np.ndarray:
        """Closed-box membership for canonical-frame points."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        return np.all(np.abs(p) <= self.half_extents, axis=1)

    def contains(self, points) -> np.ndarray:
        return self.contains_canonical(self.to_canonical(points))

    def corners(self) -> np.ndarray:
        """(8, 3) world-frame corners."""
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
        return self.to_world(signs * self.half_extents)

    def to_dict(self) -> dict:
        return {"center": list(self.center), "dims": list(self.dims), "yaw": self.yaw}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["center"]), tuple(d["dims"]), float(d["yaw"]))


@dataclass(frozen=True)
class FitConfig:
    w1: float = 10.0 / 3.0
    w2: float = 1.0
    w3: float = 1.0
    max_iters: int = 50
    lm_lambda0: float = 1e-3
    lm_lambda_factor: float = 10.0
    tol_cost: float = 1e-8
    tol_step: float = 1e-10
    min_points: int = 10
    # "std" divides coefficients by sigma, "variance" by sigma**2
    sigma_mode: str = "std"

    def __post_init__(self):
        if min(self.w1, self.w2, self.w3) < 0:
            raise ValueError("cost weights must be nonnegative")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if self.lm_lambda_factor <= 1:
            raise ValueError("lm_lambda_factor must exceed 1")
        if self.lm_lambda0 <= 0:
            raise ValueError("lm_lambda0 must be positive")
        if self.min_points < 0:
            raise ValueError("min_points must be nonnegative")
        if self.sigma_mode not in ("std", "variance"):
            raise ValueError(f"sigma_mode must be 'std' or 'variance', got {self.sigma_mode!r}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown FitConfig keys: {', '.join(unknown)}")
        kwargs = dict(d)
        for key in ("max_iters", "min_points"):
            if key in kwargs:
                if float(kwargs[key]) != int(kwargs[key]):
                    raise ValueError(f"{key} must be an integer")
                kwargs[key] = int(kwargs[key])
        for key in ("w1", "w2", "w3", "lm_lambda0", "lm_lambda_factor", "tol_cost", "tol_step"):
            if key in kwargs:
                kwargs[key] = float(kwargs[key])
        return cls(**kwargs)

    @classmethod
    def from_json(cls, text: str) -> "FitConfig":
        return cls.from_dict(json.loads(text))


@dataclass
class FitResult:
    z: np.ndarray
    final_cost: float
    term_costs: tuple[float, float, float]
    iterations: int
    status: str
    n_points: int = 0
    history: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"z": [float(v) for v in self.z], "final_cost": float(self.final_cost),
                "term_costs": [float(v) for v in self.term_costs],
                "iterations": int(self.iterations), "status": self.status,
                "n_points": int(self.n_points),
                "history": [float(v) for v in self.history]}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["z"], dtype=float), float(d["final_cost"]),
                   tuple(d["term_costs"]), int(d["iterations"]), d["status"],
                   int(d.get("n_points", 0)), list(d.get("history", [])))


def filter_points(points, box: Box3) -> np.ndarray:
    """Points inside the (closed) box, expressed in the box's canonical frame."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    can = box.to_canonical(pts)
    return can[box.contains_canonical(can)]


def outside_voxels(basis: ShapeBasis, box: Box3) -> np.ndarray:
    """Flat indices of voxel centers lying outside the box half-extents."""
    centers = basis._cache.get("centers")
    if centers is None:
        centers = basis.meta.voxel_centers()
        basis._cache["centers"] = centers
    inside = np.all(np.abs(centers) <= box.half_extents, axis=1)
    return np.flatnonzero(~inside)


def _sigma(basis: ShapeBasis, cfg: FitConfig | None) -> np.ndarray:
    if cfg is not None and cfg.sigma_mode == "variance":
        return basis.variance
    return basis.sigma


def cost_pc(basis: ShapeBasis, z, P) -> float:
    P = np.asarray(P, dtype=float).reshape(-1, 3)
    if len(P) == 0:
        raise ValueError("empty point cloud: apply the mean-shape fallback first")
    z = basis.check_z(z)
    offset, slope = phi_linear_terms(basis, P)
    return float(np.mean((offset + slope @ z) ** 2))


def cost_dim(basis: ShapeBasis, z, box: Box3, out_idx=None) -> float:
    z = basis.check_z(z)
    if out_idx is None:
        out_idx = outside_voxels(basis, box)
    phi_out = basis.mean[out_idx] + basis.basis[out_idx] @ z
    return float(np.sum(np.maximum(-phi_out, 0.0) ** 2))


def cost_z(basis: ShapeBasis, z, cfg: FitConfig | None = None) -> float:
    z = basis.check_z(z)
    return float(np.sum((z / _sigma(basis, cfg)) ** 2))


def total_cost(basis: ShapeBasis, z, P, box: Box3, cfg: FitConfig):
    """Weighted total and the raw ``(L_pc, L_dim, L_z)`` terms."""
    terms = (cost_pc(basis, z, P), cost_dim(basis, z, box), cost_z(basis, z, cfg))
    return cfg.w1 * terms[0] + cfg.w2 * terms[1] + cfg.w3 * terms[2], terms


class FitProblem:
    """Residuals and Jacobian for one instance; everything z-independent is precomputed."""

    def __init__(self, basis: ShapeBasis, P, box: Box3, cfg: FitConfig):
        P = np.asarray(P, dtype=float).reshape(-1, 3)
        if len(P) == 0:
            raise ValueError("empty point cloud: apply the mean-shape fallback first")
        self.basis, self.box, self.cfg = basis, box, cfg
        self.n_points = len(P)
        self.pc_offset, self.pc_slope = phi_linear_terms(basis, P)
        out_idx = outside_voxels(basis, box)
        self.out_offset = basis.mean[out_idx]
        self.out_slope = basis.basis[out_idx]
        self.inv_sigma = 1.0 / _sigma(basis, cfg)
        self.s1 = math.sqrt(cfg.w1 / self.n_points)
        self.s2 = math.sqrt(cfg.w2)
        self.s3 = math.sqrt(cfg.w3)

    def residuals(self, z) -> np.ndarray:
        phi_pc = self.pc_offset + self.pc_slope @ z
        phi_out = self.out_offset + self.out_slope @ z
        return np.concatenate([
            self.s1 * phi_pc,
            self.s2 * np.maximum(-phi_out, 0.0),
            self.s3 * z * self.inv_sigma,
        ])

    def jacobian(self, z) -> np.ndarray:
        phi_out = self.out_offset + self.out_slope @ z
        # subgradient 0 on the hinge boundary phi == 0
        active = phi_out < 0
        hinge = np.zeros_like(self.out_slope)
        hinge[active] = -self.s2 * self.out_slope[active]
        return np.vstack([self.s1 * self.pc_slope, hinge, np.diag(self.s3 * self.inv_sigma)])

    def terms(self, z):
        phi_pc = self.pc_offset + self.pc_slope @ z
        phi_out = self.out_offset + self.out_slope @ z
        return (float(np.mean(phi_pc ** 2)),
                float(np.sum(np.maximum(-phi_out, 0.0) ** 2)),
                float(np.sum((z * self.inv_sigma) ** 2)))

    def cost(self, z) -> float:
        r = self.residuals(z)
        return float(r @ r)


def levenberg_marquardt(problem: FitProblem, z0, cfg: FitConfig):
    """Marquardt-scaled LM. Returns ``(z, cost, iterations, status, history)``."""
    z = np.array(z0, dtype=float)
    r = problem.residuals(z)
    J = problem.jacobian(z)
    cost = float(r @ r)
    history = [cost]
    lam = cfg.lm_lambda0
    status = MAX_ITERS
    it = 0
    while it < cfg.max_iters:
        it += 1
        g = J.T @ r
        if np.linalg.norm(g) <= 1e-15 * (1.0 + cost):
            status = CONVERGED
            break
        H = J.T @ J
        d = np.diag(H).copy()
        d = np.maximum(d, 1e-12 * max(d.max(), 1e-300))
        try:
            step = np.linalg.solve(H + lam * np.diag(d), -g)
            ok = bool(np.all(np.isfinite(step)))
        except np.linalg.LinAlgError:
            ok = False
        if not ok:
            lam *= cfg.lm_lambda_factor
            if lam > LAMBDA_CEILING:
                break
            continue
        small_step = np.linalg.norm(step) <= cfg.tol_step * (np.linalg.norm(z) + cfg.tol_step)
        z_new = z + step
        r_new = problem.residuals(z_new)
        cost_new = float(r_new @ r_new)
        if cost_new < cost:
            rel = (cost - cost_new) / max(cost, np.finfo(float).tiny)
            z, r, cost = z_new, r_new, cost_new
            J = problem.jacobian(z)
            history.append(cost)
            lam /= cfg.lm_lambda_factor
            if rel <= cfg.tol_cost or small_step:
                status = CONVERGED
                break
        else:
            lam *= cfg.lm_lambda_factor
            if small_step or lam > LAMBDA_CEILING:
                # no decrease reachable from here
                status = CONVERGED
                break
    return z, cost, it, status, history


def optimize_shape(basis: ShapeBasis, points, box: Box3, cfg: FitConfig | None = None) -> FitResult:
    """Fit shape coefficients to a world-frame cloud given the instance's 3D box.

    Only points inside the box are used. With fewer than ``cfg.min_points`` of
    them the mean shape (z = 0) is returned without optimization.
    """
    cfg = cfg or FitConfig()
    P = filter_points(points, box)
    z0 = np.zeros(basis.K)
    if len(P) < cfg.min_points or len(P) == 0:
        dim = cost_dim(basis, z0, box)
        return FitResult(z0, cfg.w2 * dim, (0.0, dim, 0.0), 0, FALLBACK, len(P), [])
    problem = FitProblem(basis, P, box, cfg)
    z, cost, iters, status, history = levenberg_marquardt(problem, z0, cfg)
    return FitResult(z, cost, problem.terms(z), iters, status, len(P), history)
