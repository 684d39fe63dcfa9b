"""Matern covariance and Karhunen-Loeve expansion of a Gaussian field on the unit square.

The field is defined on D = [0, 1]^2 with zero mean.  The KL eigenpairs of the
Matern covariance operator are computed with a Nystrom discretization on a
tensor-product Gauss-Legendre grid: the kernel matrix is scaled symmetrically
by the square roots of the quadrature weights, the resulting symmetric matrix
is diagonalized, and eigenfunctions are evaluated off the grid through the
Nystrom extension formula.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import eigh
from scipy.special import gamma as gamma_fn
from scipy.special import kv

logger = logging.getLogger(__name__)

# Relative distances below this threshold are treated as zero when
# evaluating the kernel (the analytic diagonal limit applies).
_R_TINY = 1e-12


@dataclass(frozen=True)
class MaternParams:
    """Parameters of the Matern covariance kernel.

    Attributes
    ----------
    variance : float
        Pointwise variance sigma^2, > 0.
    corr_length : float
        Correlation length, > 0.
    smoothness : float
        Matern smoothness nu, > 0.  The KL construction additionally
        requires nu >= 1 (enforced by :func:`build_kl_basis`, not here,
        so the kernel itself stays usable for the nu = 1/2 exponential
        special case).
    """

    variance: float
    corr_length: float
    smoothness: float

    def __post_init__(self):
        if not self.variance > 0:
            raise ValueError(f"variance must be > 0, got {self.variance}")
        if not self.corr_length > 0:
            raise ValueError(f"corr_length must be > 0, got {self.corr_length}")
        if not self.smoothness > 0:
            raise ValueError(f"smoothness must be > 0, got {self.smoothness}")

    @property
    def sobolev_index(self) -> float:
        # k = 2 nu + d on a two-dimensional domain; controls eigenvalue
        # decay lambda_m ~ m^(-k/d).
        return 2.0 * self.smoothness + 2.0


def matern_cov(x, y, params: MaternParams) -> float:
    """Evaluate the Matern covariance C(x, y) between two points.

    Uses the standard form
    C(x, y) = s2 / (2^(nu-1) Gamma(nu)) * z^nu * K_nu(z),
    z = sqrt(2 nu) ||x - y|| / corr_length,
    with the analytic limit C(x, x) = s2 on the diagonal.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    r = float(np.linalg.norm(x - y))
    return float(_matern_of_r(np.array([r]), params)[0])


def _matern_of_r(r: np.ndarray, params: MaternParams) -> np.ndarray:
    """Kernel as a function of distance, vectorized; exact s2 at r = 0."""
    nu = params.smoothness
    s2 = params.variance
    z = np.sqrt(2.0 * nu) * r / params.corr_length
    out = np.full(z.shape, s2, dtype=float)
    nz = z > _R_TINY
    zz = z[nz]
    out[nz] = s2 * (2.0 ** (1.0 - nu) / gamma_fn(nu)) * zz**nu * kv(nu, zz)
    return out


def matern_cov_pairwise(pts_a: np.ndarray, pts_b: np.ndarray, params: MaternParams) -> np.ndarray:
    """Kernel matrix C[i, j] = C(pts_a[i], pts_b[j]) for arrays of 2D points."""
    diff = pts_a[:, None, :] - pts_b[None, :, :]
    r = np.sqrt(np.sum(diff * diff, axis=-1))
    return _matern_of_r(r, params)


@dataclass(frozen=True)
class KLBasis:
    """Truncated KL basis of the Matern field on the unit square.

    Eigenvalues are sorted in descending order; eigenfunctions are stored
    by their values at the quadrature nodes and carry unit discrete L2
    norm (sum_j w_j b_m(x_j)^2 = 1).  `mean` is the constant prior mean
    of the log-field (zero for this model).
    """

    params: MaternParams
    n_quad: int
    truncation: int
    eigenvalues: np.ndarray      # (M,)
    eigenfunctions: np.ndarray   # (n_quad^2, M), values at quad nodes
    quad_nodes: np.ndarray       # (n_quad^2, 2)
    quad_weights: np.ndarray     # (n_quad^2,)
    mean: float = 0.0

    @property
    def pointwise_sqrt_eigenvalues(self) -> np.ndarray:
        return np.sqrt(self.eigenvalues)

    def extension_matrix(self, points: np.ndarray) -> np.ndarray:
        """Nystrom extension of all basis functions to arbitrary points.

        Returns B with B[i, m] = b_m(points[i]) computed as
        (1 / lambda_m) * sum_j w_j C(x_i, x_j) b_m(x_j).
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        C = matern_cov_pairwise(points, self.quad_nodes, self.params)
        return (C * self.quad_weights) @ self.eigenfunctions / self.eigenvalues

    def truncated_variance_deficit(self, m: int | None = None) -> float:
        """sigma^2 |D| minus the retained eigenvalue mass (Mercer remainder)."""
        m = self.truncation if m is None else m
        return self.params.variance - float(np.sum(self.eigenvalues[:m]))


@dataclass(frozen=True)
class GaussianFieldRealisation:
    """A realisation of the truncated field: a basis plus KL coefficients."""

    basis: KLBasis
    coefficients: np.ndarray  # (m,) with m <= basis.truncation

    def __post_init__(self):
        m = np.asarray(self.coefficients).shape[0]
        if m > self.basis.truncation:
            raise ValueError(
                f"realisation has {m} coefficients but basis holds {self.basis.truncation}"
            )


def gauss_legendre_grid(n_quad: int) -> tuple[np.ndarray, np.ndarray]:
    """Tensor-product Gauss-Legendre nodes and weights on [0, 1]^2."""
    x, w = np.polynomial.legendre.leggauss(n_quad)
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    X, Y = np.meshgrid(x, x, indexing="ij")
    nodes = np.column_stack([X.ravel(), Y.ravel()])
    weights = np.outer(w, w).ravel()
    return nodes, weights


def build_kl_basis(params: MaternParams, n_quad: int = 64, truncation: int = 150) -> KLBasis:
    """Compute the leading KL eigenpairs by Nystrom discretization.

    Parameters
    ----------
    params : MaternParams
        Kernel parameters; smoothness must be >= 1 here (the eigenvalue
        decay and field regularity arguments assume it).
    n_quad : int
        Gauss-Legendre points per dimension.  The default 64 resolves
        truncations up to a few hundred modes.
    truncation : int
        Number of modes M to retain; must satisfy M <= n_quad^2.

    Raises
    ------
    ValueError
        If the requested truncation exceeds the number of eigenvalues
        above the clamp tolerance, or if the discrete spectrum contains
        negative eigenvalues beyond tolerance (a sign the quadrature is
        too coarse).
    """
    if params.smoothness < 1.0:
        raise ValueError(
            f"KL construction requires smoothness >= 1, got {params.smoothness}"
        )
    if truncation < 1:
        raise ValueError("truncation must be >= 1")
    n_nodes = n_quad * n_quad
    if truncation > n_nodes:
        raise ValueError(f"truncation {truncation} exceeds quadrature size {n_nodes}")

    nodes, weights = gauss_legendre_grid(n_quad)
    C = matern_cov_pairwise(nodes, nodes, params)
    sw = np.sqrt(weights)
    A = C * np.outer(sw, sw)
    # Symmetrize explicitly: eigh assumes it, and rounding in the kernel
    # evaluation can leave ~1 ulp asymmetry.
    A = 0.5 * (A + A.T)

    eigvals, eigvecs = eigh(A, subset_by_index=[n_nodes - truncation, n_nodes - 1])
    order = np.argsort(eigvals)[::-1]
    eigvals = eigvals[order]
    eigvecs = eigvecs[:, order]

    eps_clamp = 1e-12 * eigvals[0]
    if eigvals[-1] < -eps_clamp:
        raise ValueError(
            f"negative eigenvalue {eigvals[-1]:.3e} beyond tolerance; "
            f"increase n_quad"
        )
    n_above = int(np.sum(eigvals > eps_clamp))
    if n_above < truncation:
        raise ValueError(
            f"only {n_above} eigenvalues above clamp tolerance, "
            f"requested truncation {truncation}"
        )

    # Undo the symmetric scaling; unit-norm eigenvectors of A then give
    # eigenfunctions with unit discrete L2 norm automatically.
    funcs = eigvecs / sw[:, None]
    # Deterministic sign: largest-magnitude node value is positive.
    idx = np.argmax(np.abs(funcs), axis=0)
    signs = np.sign(funcs[idx, np.arange(funcs.shape[1])])
    signs[signs == 0] = 1.0
    funcs = funcs * signs

    logger.info(
        "KL basis built: nu=%g, M=%d, n_quad=%d, lambda_1=%.4g, retained mass %.4f of %.4f",
        params.smoothness, truncation, n_quad, eigvals[0],
        float(np.sum(eigvals)), params.variance,
    )
    return KLBasis(
        params=params,
        n_quad=n_quad,
        truncation=truncation,
        eigenvalues=eigvals,
        eigenfunctions=funcs,
        quad_nodes=nodes,
        quad_weights=weights,
    )


def eval_field(realisation: GaussianFieldRealisation, points: np.ndarray) -> np.ndarray:
    """Evaluate the truncated Gaussian field at points in [0, 1]^2.

    g(x) = mean + sum_m sqrt(lambda_m) xi_m b_m(x), with b_m evaluated
    through the Nystrom extension.
    """
    basis = realisation.basis
    xi = np.asarray(realisation.coefficients, dtype=float)
    m = xi.shape[0]
    B = basis.extension_matrix(points)[:, :m]
    return basis.mean + B @ (np.sqrt(basis.eigenvalues[:m]) * xi)


def sample_coefficients(basis: KLBasis, rng: np.random.Generator, m: int | None = None) -> np.ndarray:
    """Draw iid standard normal KL coefficients for the prior field."""
    m = basis.truncation if m is None else m
    return rng.standard_normal(m)


def eigenvalue_decay_slope(eigenvalues: np.ndarray, m_low: int, m_high: int) -> float:
    """Least-squares slope of log(lambda_m) against log(m) over [m_low, m_high].

    Mode indices are 1-based.  The smoother the kernel, the steeper
    (more negative) the slope.
    """
    lam = np.asarray(eigenvalues, dtype=float)
    if not 1 <= m_low < m_high <= lam.shape[0]:
        raise ValueError(
            f"fit range [{m_low}, {m_high}] outside available 1..{lam.shape[0]}")
    window = lam[m_low - 1: m_high]
    if np.any(window <= 0):
        raise ValueError("eigenvalues in the fit range must be positive")
    x = np.log(np.arange(m_low, m_high + 1, dtype=float))
    return float(np.polyfit(x, np.log(window), 1)[0])


# ---------------------------------------------------------------------------
# On-disk cache.  A basis is keyed by the exact parameter tuple; arrays are
# stored uncompressed so the round trip is bit-identical.


def basis_cache_key(params: MaternParams, n_quad: int, truncation: int) -> str:
    raw = (
        f"{params.variance!r}|{params.corr_length!r}|{params.smoothness!r}"
        f"|{n_quad}|{truncation}"
    )
    return hashlib.sha256(raw.encode()).hexdigest()[:16]


def save_kl_basis(basis: KLBasis, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(
        path,
        variance=basis.params.variance,
        corr_length=basis.params.corr_length,
        smoothness=basis.params.smoothness,
        n_quad=basis.n_quad,
        truncation=basis.truncation,
        eigenvalues=basis.eigenvalues,
        eigenfunctions=basis.eigenfunctions,
        quad_nodes=basis.quad_nodes,
        quad_weights=basis.quad_weights,
        mean=basis.mean,
    )


def load_kl_basis(path: str | Path) -> KLBasis:
    with np.load(path) as z:
        params = MaternParams(
            variance=float(z["variance"]),
            corr_length=float(z["corr_length"]),
            smoothness=float(z["smoothness"]),
        )
        return KLBasis(
            params=params,
            n_quad=int(z["n_quad"]),
            truncation=int(z["truncation"]),
            eigenvalues=z["eigenvalues"],
            eigenfunctions=z["eigenfunctions"],
            quad_nodes=z["quad_nodes"],
            quad_weights=z["quad_weights"],
            mean=float(z["mean"]),
        )


def cached_kl_basis(
    params: MaternParams,
    n_quad: int,
    truncation: int,
    cache_dir: str | Path | None,
) -> KLBasis:
    """Build the basis, reusing an on-disk copy when the key matches."""
    if cache_dir is None:
        return build_kl_basis(params, n_quad=n_quad, truncation=truncation)
    key = basis_cache_key(params, n_quad, truncation)
    path = Path(cache_dir) / f"klbasis_{key}.npz"
    if path.exists():
        logger.info("loading KL basis from cache %s", path)
        basis = load_kl_basis(path)
        if (basis.params == params and basis.n_quad == n_quad
                and basis.truncation == truncation):
            return basis
        logger.warning("cache key collision at %s; rebuilding", path)
    basis = build_kl_basis(params, n_quad=n_quad, truncation=truncation)
    save_kl_basis(basis, path)
    return basis
