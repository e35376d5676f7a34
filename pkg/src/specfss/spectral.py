"""Annotation-free support-object estimation.

Pipeline: stack the encoder pyramid into a per-pixel hypercolumn, build the
zero-thresholded cosine affinity graph, decompose its normalized Laplacian,
discretize the Fiedler vector by sign, box the smaller region, and pool a
prototype vector per pyramid level inside the (rescaled) box.

All spectral math runs in float64 regardless of the feature dtype; the
tolerances on residuals and orthogonality assume it.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegeneratePartitionError, NonConvergenceError, ValidationError
from .tensorkit import Tensor, bilinear_resize

DENSE_SOLVER_LIMIT = 4096     # n above which eigendecompose switches to Lanczos
EIGENGAP_TOL = 1e-6           # lambda > lambda_0 + tol selects the Fiedler vector
SPREAD_TOL = 1e-8             # eigenvector flatter than this is degenerate
RESIDUAL_TOL = 1e-6           # ||L y - lam y|| <= tol * ||y||


@dataclass
class Hypercolumn:
    """Per-pixel stacked features: rows are HW pixels, columns channels.

    Rows are L2-normalized; all-zero pixels stay zero and are counted in
    `zero_rows`. Pixel order is row-major on the (grid_h, grid_w) grid.
    """

    features: np.ndarray
    grid_h: int
    grid_w: int
    level_dims: list
    zero_rows: int = 0

    def __post_init__(self):
        if self.features.ndim != 2:
            raise ValidationError(f"hypercolumn features must be 2-d, got {self.features.shape}")
        if self.grid_h * self.grid_w != self.features.shape[0]:
            raise ValidationError("hypercolumn grid does not match row count")


@dataclass
class AffinityMatrix:
    """Symmetric non-negative pixel affinities with unit self-similarity."""

    w: np.ndarray

    def __post_init__(self):
        m = self.w
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValidationError("affinity matrix must be square")
        if not np.array_equal(m, m.T):
            raise ValidationError("affinity matrix must be exactly symmetric")
        if m.min() < 0:
            raise ValidationError("affinity matrix must be non-negative")

    @property
    def n(self):
        return self.w.shape[0]


@dataclass
class Laplacian:
    """Graph Laplacian plus the degree vector needed for back-transforms."""

    matrix: np.ndarray
    degrees: np.ndarray
    mode: str  # symmetric | random_walk


@dataclass
class EigenSystem:
    """Ascending eigenpairs. `vectors[:, i]` pairs with `values[i]`."""

    values: np.ndarray
    vectors: np.ndarray
    laplacian_mode: str
    residuals: np.ndarray = field(default=None)

    @property
    def n_vectors(self):
        return self.values.shape[0]


@dataclass
class PartitionResult:
    """Sign discretization of the Fiedler vector on the pixel grid."""

    mask: np.ndarray          # bool [grid_h, grid_w], True = foreground
    bbox: tuple               # (row_min, row_max, col_min, col_max) inclusive
    fiedler_index: int


@dataclass
class PrototypeSet:
    """One pooled support vector per pyramid level, in pyramid order."""

    vectors: list
    provenance: str           # spectral | oracle_mask

    def __post_init__(self):
        if self.provenance not in ("spectral", "oracle_mask"):
            raise ValidationError(f"bad provenance {self.provenance!r}")

    @property
    def levels(self):
        return len(self.vectors)


def build_hypercolumn(pyramid, target_h=None, target_w=None):
    """Resize every pyramid level to a common grid and stack channels.

    pyramid: list of Tensor [1, M_l, H_l, W_l]. Default grid is the second
    level's resolution (the first level's when only one is given). Each
    pixel's stacked vector is L2-normalized afterwards.
    """
    if not pyramid:
        raise ValidationError("empty pyramid")
    for t in pyramid:
        if t.ndim != 4 or t.shape[0] != 1:
            raise ValidationError(f"pyramid levels must be [1,C,H,W], got {t.shape}")
    if target_h is None or target_w is None:
        ref = pyramid[1] if len(pyramid) > 1 else pyramid[0]
        target_h, target_w = ref.shape[2], ref.shape[3]

    planes = []
    level_dims = []
    for t in pyramid:
        r = bilinear_resize(t, target_h, target_w)
        planes.append(r.data[0])
        level_dims.append(t.shape[1])
    stacked = np.concatenate(planes, axis=0)                    # [M, th, tw]
    rows = stacked.reshape(stacked.shape[0], -1).T.copy()       # [HW, M]

    norms = np.linalg.norm(rows, axis=1)
    zero = norms == 0
    norms[zero] = 1.0
    rows /= norms[:, None]
    return Hypercolumn(rows, target_h, target_w, level_dims, zero_rows=int(zero.sum()))


def affinity_matrix(hc):
    """W = max(0, F F^T) on unit rows, symmetrized, diagonal forced to 1."""
    f = hc.features.astype(np.float64, copy=False)
    w = f @ f.T
    np.maximum(w, 0.0, out=w)
    w = (w + w.T) / 2.0
    np.fill_diagonal(w, 1.0)
    return AffinityMatrix(w)


def laplacian(affinity, mode="symmetric"):
    """Normalized graph Laplacian of the affinity matrix.

    symmetric: D^{-1/2} (D - W) D^{-1/2}; random_walk: D^{-1} (D - W).
    The unit diagonal guarantees positive degrees.
    """
    if mode not in ("symmetric", "random_walk"):
        raise ValidationError(f"laplacian mode must be symmetric|random_walk, got {mode!r}")
    w = affinity.w
    d = w.sum(axis=1)
    assert d.min() > 0, "zero-degree node despite unit diagonal"
    n = w.shape[0]
    if mode == "symmetric":
        dm = 1.0 / np.sqrt(d)
        m = np.eye(n) - (w * dm[:, None]) * dm[None, :]
        m = (m + m.T) / 2.0
    else:
        m = np.eye(n) - w / d[:, None]
    return Laplacian(m, d, mode)


def _lanczos_smallest(a, k, seed=0, tol=1e-10, max_iter=None):
    """Smallest-k eigenpairs of symmetric `a` by Lanczos with full reorthogonalization.

    Grows the Krylov basis until explicit residuals on the k smallest Ritz
    pairs drop below `tol * ||a||`, restarting with a fresh random direction
    on breakdown. Raises NonConvergenceError if the full basis is exhausted
    without reaching tolerance.
    """
    n = a.shape[0]
    rng = np.random.default_rng(seed)
    scale = max(np.abs(a).max(), 1e-30)
    m_cap = n if max_iter is None else min(max_iter, n)

    q_basis = np.zeros((n, m_cap))
    alphas = np.zeros(m_cap)
    betas = np.zeros(m_cap)      # betas[j] links vector j and j+1

    q = rng.standard_normal(n)
    q /= np.linalg.norm(q)
    q_basis[:, 0] = q
    m = 0
    check_at = min(m_cap, max(2 * k + 10, 20))

    while True:
        u = a @ q_basis[:, m]
        alphas[m] = q_basis[:, m] @ u
        r = u - alphas[m] * q_basis[:, m]
        if m > 0:
            r -= betas[m - 1] * q_basis[:, m - 1]
        # full reorthogonalization, twice for safety
        basis = q_basis[:, : m + 1]
        r -= basis @ (basis.T @ r)
        r -= basis @ (basis.T @ r)
        m += 1
        if m == m_cap:
            break
        beta = np.linalg.norm(r)
        if beta < 1e-13 * scale:
            # invariant subspace: restart with a random orthogonal direction
            r = rng.standard_normal(n)
            r -= basis @ (basis.T @ r)
            nrm = np.linalg.norm(r)
            if nrm < 1e-12:
                break
            betas[m - 1] = 0.0
            q_basis[:, m] = r / nrm
        else:
            betas[m - 1] = beta
            q_basis[:, m] = r / beta

        if m >= check_at or m == m_cap:
            vals, vecs, resid = _ritz(a, q_basis[:, :m], alphas[:m], betas[:m - 1], k)
            if resid.max() <= tol * scale:
                return vals, vecs
            check_at = min(m_cap, m + max(10, m // 2))

    vals, vecs, resid = _ritz(a, q_basis[:, :m], alphas[:m], betas[:m - 1], k)
    if resid.max() <= max(tol, 1e-8) * scale:
        return vals, vecs
    raise NonConvergenceError(m, float(resid.max()))


def _ritz(a, basis, alphas, betas, k):
    t = np.diag(alphas)
    if betas.size:
        t += np.diag(betas, 1) + np.diag(betas, -1)
    theta, s = np.linalg.eigh(t)
    kk = min(k, theta.shape[0])
    vecs = basis @ s[:, :kk]
    vecs /= np.linalg.norm(vecs, axis=0)
    resid = np.linalg.norm(a @ vecs - vecs * theta[:kk], axis=0)
    return theta[:kk], vecs, resid


def eigendecompose(lap, n_vectors, method="auto", seed=0):
    """The n_vectors smallest eigenpairs, ascending.

    Accepts a `Laplacian` or a plain symmetric ndarray. Dense solve below
    DENSE_SOLVER_LIMIT nodes, Lanczos above; `method` forces one path. The
    random-walk mode is solved via the similar symmetric problem
    D^{1/2} L_rw D^{-1/2} and back-transformed.
    """
    if isinstance(lap, Laplacian):
        mode, degrees = lap.mode, lap.degrees
        if mode == "random_walk":
            ds = np.sqrt(degrees)
            sym = lap.matrix * ds[:, None] / ds[None, :]
            sym = (sym + sym.T) / 2.0
        else:
            sym = lap.matrix
        check_matrix = lap.matrix
    else:
        mode = "symmetric"
        sym = np.asarray(lap, dtype=np.float64)
        if sym.ndim != 2 or sym.shape[0] != sym.shape[1]:
            raise ValidationError("eigendecompose needs a square matrix")
        if not np.allclose(sym, sym.T, atol=1e-12):
            raise ValidationError("matrix is not symmetric")
        sym = (sym + sym.T) / 2.0
        check_matrix = sym

    n = sym.shape[0]
    if n_vectors < 1 or n_vectors > n:
        raise ValidationError(f"n_vectors must be in [1, {n}], got {n_vectors}")
    if method not in ("auto", "dense", "lanczos"):
        raise ValidationError(f"unknown solver method {method!r}")
    if method == "auto":
        method = "dense" if n <= DENSE_SOLVER_LIMIT else "lanczos"

    if method == "dense":
        vals, vecs = np.linalg.eigh(sym)
        vals, vecs = vals[:n_vectors], vecs[:, :n_vectors]
    else:
        vals, vecs = _lanczos_smallest(sym, n_vectors, seed=seed)

    if mode == "random_walk":
        vecs = vecs / np.sqrt(degrees)[:, None]
        vecs /= np.linalg.norm(vecs, axis=0)

    resid = np.linalg.norm(check_matrix @ vecs - vecs * vals[None, :], axis=0)
    limit = RESIDUAL_TOL * np.linalg.norm(vecs, axis=0)
    if np.any(resid > limit):
        raise NonConvergenceError(n, float(resid.max()))
    return EigenSystem(vals, vecs, mode, residuals=resid)


def fiedler_partition(es, grid_h, grid_w):
    """Sign-discretize the first non-trivial eigenvector; smaller region wins.

    Picks the first eigenvector whose eigenvalue exceeds lambda_0 by more
    than EIGENGAP_TOL (robust to near-disconnected graphs). Pixels with
    y >= 0 form one region; the region with fewer pixels is foreground. An
    exact tie goes to the region whose centroid is nearer the grid center.
    """
    if es.n_vectors < 2:
        raise ValidationError("fiedler_partition needs at least 2 eigenpairs")
    if es.values.shape[0] != es.vectors.shape[1] or es.vectors.shape[0] != grid_h * grid_w:
        raise ValidationError("eigensystem does not match the grid")

    lam0 = es.values[0]
    idx = None
    for i in range(1, es.n_vectors):
        if es.values[i] > lam0 + EIGENGAP_TOL:
            idx = i
            break
    if idx is None:
        raise DegeneratePartitionError(
            "no eigenvalue above lambda_0 + tolerance; graph has no usable partition")

    y = es.vectors[:, idx]
    if y.max() - y.min() < SPREAD_TOL:
        raise DegeneratePartitionError("chosen eigenvector is numerically constant")

    pos = (y >= 0).reshape(grid_h, grid_w)
    n_pos = int(pos.sum())
    n_neg = pos.size - n_pos
    if n_pos < n_neg:
        fg = pos
    elif n_neg < n_pos:
        fg = ~pos
    else:
        center = np.array([(grid_h - 1) / 2.0, (grid_w - 1) / 2.0])

        def centroid_dist(m):
            rr, cc = np.nonzero(m)
            return float(np.hypot(rr.mean() - center[0], cc.mean() - center[1]))

        fg = pos if centroid_dist(pos) <= centroid_dist(~pos) else ~pos

    pr = PartitionResult(fg, (0, 0, 0, 0), idx)
    pr.bbox = smaller_region_bbox(pr)
    return pr


def smaller_region_bbox(pr):
    """Tight inclusive bounds of the foreground region."""
    rows, cols = np.nonzero(pr.mask)
    if rows.size == 0:
        raise ValidationError("empty foreground region")
    return (int(rows.min()), int(rows.max()), int(cols.min()), int(cols.max()))


def scale_bbox(bbox, src_h, src_w, dst_h, dst_w):
    """Rescale an inclusive bbox between grids, rounding outward."""
    r0, r1, c0, c1 = bbox
    fh, fw = dst_h / src_h, dst_w / src_w
    nr0 = int(math.floor(r0 * fh))
    nr1 = int(math.ceil((r1 + 1) * fh)) - 1
    nc0 = int(math.floor(c0 * fw))
    nc1 = int(math.ceil((c1 + 1) * fw)) - 1
    nr0, nr1 = max(nr0, 0), min(nr1, dst_h - 1)
    nc0, nc1 = max(nc0, 0), min(nc1, dst_w - 1)
    return (nr0, max(nr1, nr0), nc0, max(nc1, nc0))


def extract_prototype(pyramid, bbox, grid_h, grid_w, provenance="spectral"):
    """Masked average pooling of every pyramid level inside the scaled bbox.

    bbox is in (grid_h, grid_w) coordinates; it is rescaled proportionally
    to each level (outward rounding, never empty) and the level features
    are averaged over the box interior.
    """
    vectors = []
    for t in pyramid:
        _, _, lh, lw = t.shape
        r0, r1, c0, c1 = scale_bbox(bbox, grid_h, grid_w, lh, lw)
        vec = t.data[0, :, r0:r1 + 1, c0:c1 + 1].mean(axis=(1, 2))
        vectors.append(vec.astype(t.dtype, copy=False))
    return PrototypeSet(vectors, provenance)


def decompose_pyramid(pyramid, target_h=None, target_w=None, mode="symmetric",
                      n_vectors=5, solver="auto", seed=0):
    """Full spectral pipeline on one support pyramid.

    Returns (hypercolumn, eigensystem, partition). Featureless inputs (all
    pairwise affinities identical) are rejected as degenerate before the
    eigensolver sees them.
    """
    hc = build_hypercolumn(pyramid, target_h, target_w)
    aff = affinity_matrix(hc)
    if aff.w.max() - aff.w.min() < 1e-9:
        raise DegeneratePartitionError("featureless input: all pixel affinities identical")
    lap = laplacian(aff, mode)
    n = min(n_vectors, aff.n)
    es = eigendecompose(lap, n, method=solver, seed=seed)
    pr = fiedler_partition(es, hc.grid_h, hc.grid_w)
    return hc, es, pr
