"""Covariate outcome model with one intercept per (pair, arm) cell.

The linear predictor for patient k of arm c in pair p is

    eta = theta[p, c] + theta_cov' x

and the mean is h^-1(eta) for an identity or logit link. Coefficients are
estimated from the first-moment residuals y - h^-1(eta) (least squares for the
identity link, IRLS for logit) and their covariance is the heteroskedasticity
robust sandwich.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .core import ArmRole, CovariateSchema, Study
from .errors import ConfigError, InputError, NoConvergence, RankDeficient

RANK_TOL = 1e-8


class LinkFunction(str, enum.Enum):
    IDENTITY = "identity"
    LOGIT = "logit"

    def inverse(self, eta: np.ndarray) -> np.ndarray:
        if self is LinkFunction.IDENTITY:
            return np.asarray(eta, dtype=float)
        return special.expit(eta)

    def inverse_derivative(self, eta: np.ndarray) -> np.ndarray:
        """d h^-1 / d eta."""
        if self is LinkFunction.IDENTITY:
            return np.ones_like(np.asarray(eta, dtype=float))
        mu = special.expit(eta)
        return mu * (1.0 - mu)


class CovType(str, enum.Enum):
    HC0 = "HC0"
    HC1 = "HC1"
    CLUSTER = "cluster"


def encode_covariates(schema: CovariateSchema, continuous: np.ndarray, categorical: np.ndarray):
    """Continuous columns as-is, then reference-omitted indicators per categorical level.

    Returns the (n, k) encoded matrix and its column names.
    """
    n = continuous.shape[0]
    blocks = [np.asarray(continuous, dtype=float).reshape(n, schema.n_continuous)]
    names = list(schema.continuous)
    for j, (name, levels) in enumerate(schema.categorical):
        col = np.asarray(categorical[:, j]).astype(str)
        for level in levels[1:]:
            blocks.append((col == level).astype(float)[:, None])
            names.append(f"{name}[{level}]")
    return np.hstack(blocks) if blocks else np.empty((n, 0)), names


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    matrix: np.ndarray
    outcomes: np.ndarray
    weights: np.ndarray
    column_names: tuple[str, ...]
    cells: tuple[tuple[str, ArmRole], ...]
    row_cell: np.ndarray
    schema: CovariateSchema
    include_covariates: bool = True
    arm_specific_slopes: bool = False
    dropped_levels: dict = field(default_factory=dict)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def n_cov(self) -> int:
        """Number of encoded covariate columns per slope block."""
        k = self.matrix.shape[1] - self.n_cells
        return k // 2 if self.arm_specific_slopes else k

    def cell_index(self, pair_id: str, role: ArmRole) -> int:
        return self.cells.index((str(pair_id), ArmRole.parse(role)))

    def slope_columns(self, role: ArmRole) -> slice:
        start = self.n_cells
        if self.arm_specific_slopes and ArmRole.parse(role) is ArmRole.INTERVENTION:
            start += self.n_cov
        return slice(start, start + self.n_cov)

    def encode(self, continuous: np.ndarray, categorical: np.ndarray) -> np.ndarray:
        if not self.include_covariates:
            return np.empty((continuous.shape[0], 0))
        z, _ = encode_covariates(self.schema, continuous, categorical)
        return z

    def rows_for(self, pair_id: str, role: ArmRole, z: np.ndarray) -> np.ndarray:
        """Design rows that covariate points ``z`` would have in cell (pair_id, role)."""
        rows = np.zeros((z.shape[0], self.matrix.shape[1]))
        rows[:, self.cell_index(pair_id, role)] = 1.0
        rows[:, self.slope_columns(role)] = z
        return rows


def _check_rank(x: np.ndarray, names: list[str]) -> None:
    if x.shape[1] == 0:
        return
    if x.shape[0] < x.shape[1]:
        raise RankDeficient(names)
    _, s, vt = np.linalg.svd(x, full_matrices=False)
    small = s < RANK_TOL * s[0]
    if np.any(small):
        null = vt[small]
        involved = np.any(np.abs(null) > 1e-6, axis=0)
        raise RankDeficient([n for n, flag in zip(names, involved) if flag])


def build_design(
    study: Study,
    include_covariates: bool = True,
    arm_specific_slopes: bool = False,
    check_rank: bool = True,
) -> DesignMatrix:
    """Design matrix with deterministic column order.

    Columns are the cell intercepts (pairs in study order, control before
    intervention) followed by the encoded covariates in schema order. With
    ``arm_specific_slopes`` the covariate block is repeated, once for control
    rows and once for intervention rows.
    """
    schema = study.schema
    cells = []
    ys, ws, zs, cell_ids, roles = [], [], [], [], []
    for pair in study.pairs:
        for role in ArmRole:
            arm = pair.arm(role)
            cells.append((pair.pair_id, role))
            n = arm.n_sampled
            ys.append(arm.outcomes)
            ws.append(arm.weights if arm.weights is not None else np.ones(n))
            if include_covariates:
                z, cov_names = encode_covariates(schema, arm.continuous, arm.categorical)
            else:
                z, cov_names = np.empty((n, 0)), []
            zs.append(z)
            cell_ids.append(np.full(n, len(cells) - 1))
            roles.append(np.full(n, int(role)))
    if not include_covariates:
        cov_names = []
    elif not cells:
        cov_names = encode_covariates(schema, np.empty((0, schema.n_continuous)),
                                      np.empty((0, schema.n_categorical), dtype=object))[1]
    y = np.concatenate(ys)
    w = np.concatenate(ws)
    z = np.vstack(zs)
    row_cell = np.concatenate(cell_ids)
    row_role = np.concatenate(roles)

    intercepts = np.zeros((y.shape[0], len(cells)))
    intercepts[np.arange(y.shape[0]), row_cell] = 1.0
    names = [f"cell[{pid},{role.label}]" for pid, role in cells]
    if arm_specific_slopes and z.shape[1]:
        zc = z * (row_role == 1)[:, None]
        zt = z * (row_role == 2)[:, None]
        x = np.hstack([intercepts, zc, zt])
        names += [f"{c}:control" for c in cov_names] + [f"{c}:intervention" for c in cov_names]
    else:
        x = np.hstack([intercepts, z])
        names += list(cov_names)
    if check_rank:
        _check_rank(x, names)
    dropped = {name: levels[0] for name, levels in schema.categorical} if include_covariates else {}
    for arr in (x, y, w, row_cell):
        arr.setflags(write=False)
    return DesignMatrix(
        matrix=x,
        outcomes=y,
        weights=w,
        column_names=tuple(names),
        cells=tuple(cells),
        row_cell=row_cell,
        schema=schema,
        include_covariates=include_covariates,
        arm_specific_slopes=bool(arm_specific_slopes and z.shape[1]),
        dropped_levels=dropped,
    )


@dataclass(frozen=True, eq=False)
class CoefficientFit:
    theta: np.ndarray
    covariance: np.ndarray
    link: LinkFunction
    column_names: tuple[str, ...]
    design: DesignMatrix
    residuals: np.ndarray
    cov_type: CovType = CovType.HC0
    n_iter: int = 1

    def intercept(self, pair_id: str, role: ArmRole) -> float:
        return float(self.theta[self.design.cell_index(pair_id, role)])

    def slopes(self, role: ArmRole = ArmRole.CONTROL) -> np.ndarray:
        return self.theta[self.design.slope_columns(role)]

    def with_theta(self, theta: np.ndarray) -> "CoefficientFit":
        """Copy with replaced coefficients (covariance kept), e.g. to zero the slopes."""
        return CoefficientFit(np.asarray(theta, dtype=float), self.covariance, self.link,
                              self.column_names, self.design, self.residuals, self.cov_type, self.n_iter)


def _sandwich(x, scores, bread, cov_type: CovType, clusters, n_params):
    if cov_type is CovType.CLUSTER:
        groups = np.unique(clusters)
        summed = np.zeros((groups.shape[0], x.shape[1]))
        np.add.at(summed, np.searchsorted(groups, clusters), scores)
        meat = summed.T @ summed
    else:
        meat = scores.T @ scores
    cov = bread @ meat @ bread
    if cov_type is CovType.HC1:
        n = x.shape[0]
        cov *= n / max(n - n_params, 1)
    return 0.5 * (cov + cov.T)


def fit(
    design: DesignMatrix,
    outcomes: np.ndarray | None = None,
    link: LinkFunction | str = LinkFunction.IDENTITY,
    *,
    weights: np.ndarray | None = None,
    cov_type: CovType | str = CovType.HC0,
    clusters: np.ndarray | None = None,
    tol: float = 1e-10,
    max_iter: int = 100,
) -> CoefficientFit:
    """Fit the cell-intercept model and its robust coefficient covariance.

    ``cov_type="cluster"`` sums scores within ``clusters`` (default: the
    (pair, arm) cells) before forming the meat. Because every cell has its
    own intercept, the cell-sum of residuals is zero and the cluster meat is
    singular in the intercept directions; it is offered for the slopes only.
    """
    link = LinkFunction(link)
    cov_type = CovType(cov_type)
    x = design.matrix
    y = design.outcomes if outcomes is None else np.asarray(outcomes, dtype=float)
    w = design.weights if weights is None else np.asarray(weights, dtype=float)
    if y.shape[0] != x.shape[0] or w.shape[0] != x.shape[0]:
        raise InputError(f"design has {x.shape[0]} rows but got {y.shape[0]} outcomes / {w.shape[0]} weights")
    if np.any(w <= 0):
        raise InputError("weights must be positive")
    if cov_type is CovType.CLUSTER and clusters is None:
        clusters = design.row_cell
    p = x.shape[1]

    if link is LinkFunction.IDENTITY:
        sw = np.sqrt(w)
        theta, *_ = np.linalg.lstsq(x * sw[:, None], y * sw, rcond=None)
        resid = y - x @ theta
        bread = np.linalg.inv(x.T @ (x * w[:, None]))
        scores = x * (w * resid)[:, None]
        n_iter = 1
    else:
        if np.any((y <= 0) | (y >= 1)):
            raise InputError("logit link requires every outcome strictly inside (0, 1); rescale first")
        theta = np.zeros(p)
        for j in range(design.n_cells):
            m = float(np.average(y[design.row_cell == j], weights=w[design.row_cell == j]))
            theta[j] = special.logit(m)
        trace = []
        for n_iter in range(1, max_iter + 1):
            eta = x @ theta
            mu = special.expit(eta)
            var = np.maximum(mu * (1 - mu), 1e-300)
            z = eta + (y - mu) / var
            iw = np.sqrt(w * var)
            new, *_ = np.linalg.lstsq(x * iw[:, None], z * iw, rcond=None)
            change = float(np.max(np.abs(new - theta))) if p else 0.0
            trace.append(change)
            theta = new
            if change < tol:
                break
        else:
            raise NoConvergence(f"IRLS did not converge in {max_iter} iterations", trace)
        mu = special.expit(x @ theta)
        resid = y - mu
        bread = np.linalg.inv(x.T @ (x * (w * mu * (1 - mu))[:, None]))
        scores = x * (w * resid)[:, None]
    cov = _sandwich(x, scores, bread, cov_type, clusters, p)
    return CoefficientFit(
        theta=theta,
        covariance=cov,
        link=link,
        column_names=design.column_names,
        design=design,
        residuals=resid,
        cov_type=cov_type,
        n_iter=n_iter,
    )


def rescale_outcomes(y: np.ndarray, low: float, high: float) -> np.ndarray:
    if not high > low:
        raise ConfigError(f"outcome range must satisfy low < high, got ({low}, {high})")
    return (np.asarray(y, dtype=float) - low) / (high - low)
