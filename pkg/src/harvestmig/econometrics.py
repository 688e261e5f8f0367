"""Fixed-effects OLS with district-clustered standard errors.

Province and year effects enter as dummies (the lexicographically first
level of each is the reference) next to an intercept. Coefficients come
from a column-pivoted QR factorisation; the covariance is the CR1
cluster sandwich.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd
from scipy import linalg, stats

Z95 = 1.959963984540054
RANK_TOL = 1e-10


class RankError(ValueError):
    """Design matrix is rank deficient."""

    def __init__(self, message: str, dependent: list[str]):
        super().__init__(message)
        self.dependent = dependent


class ContrastError(ValueError):
    pass


class SpecError(ValueError):
    pass


@dataclass
class DesignMatrix:
    X: np.ndarray
    y: np.ndarray
    names: list[str]
    clusters: np.ndarray | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=float).ravel()
        if self.X.ndim != 2 or self.X.shape[0] != self.y.size:
            raise ValueError("X must be N x K with N matching y")
        if len(self.names) != self.X.shape[1]:
            raise ValueError("one name per column required")
        if not (np.isfinite(self.X).all() and np.isfinite(self.y).all()):
            raise ValueError("design contains non-finite values")
        if self.clusters is not None and len(self.clusters) != self.y.size:
            raise ValueError("one cluster id per row required")

    @property
    def shape(self):
        return self.X.shape


@dataclass
class FitResult:
    names: list[str]
    beta: np.ndarray
    cov: np.ndarray | None
    resid: np.ndarray
    n: int
    k: int
    g: int
    r2: float
    adj_r2: float
    xtx_inv: np.ndarray
    cov_type: str = "CR1"
    ci: str = "normal"
    metadata: dict = field(default_factory=dict)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"no term {name!r} in fit") from None

    def coef(self, name: str) -> float:
        return float(self.beta[self.index(name)])

    def se(self, name: str | None = None):
        se = np.sqrt(np.clip(np.diag(self.cov), 0, None))
        return se if name is None else float(se[self.index(name)])

    def _crit(self) -> float:
        return Z95 if self.ci == "normal" else float(stats.t.ppf(0.975, max(self.g - 1, 1)))

    def table(self) -> pd.DataFrame:
        se = self.se()
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(se > 0, self.beta / se, np.nan)
        p = 2 * stats.norm.sf(np.abs(z))
        c = self._crit()
        return pd.DataFrame({"term": self.names, "estimate": self.beta, "se": se, "z": z, "p": p,
                             "ci_lo": self.beta - c * se, "ci_hi": self.beta + c * se})


@dataclass(frozen=True)
class Contrast:
    label: str
    estimate: float
    se: float
    z: float
    p: float
    ci_lo: float
    ci_hi: float


def fit_ols(design: DesignMatrix, ci: str = "normal") -> FitResult:
    """Least squares via pivoted QR; clustered covariance when clusters are given."""
    X, y = design.X, design.y
    n, k = X.shape
    if n <= k:
        raise ValueError(f"need more rows than columns (N={n}, K={k})")
    Q, R, piv = linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > RANK_TOL * max(diag[0], 1e-300) * max(n, k)))
    if rank < k:
        _raise_rank(X, design.names, piv, rank)
    bp = linalg.solve_triangular(R, Q.T @ y)
    beta = np.empty(k)
    beta[piv] = bp
    Rinv = linalg.solve_triangular(R, np.eye(k))
    inv_p = Rinv @ Rinv.T
    xtx_inv = np.empty_like(inv_p)
    xtx_inv[np.ix_(piv, piv)] = inv_p
    resid = y - X @ beta
    ssr = float(resid @ resid)
    sst = float(((y - y.mean()) ** 2).sum())
    r2 = 1 - ssr / sst if sst > 0 else (1.0 if ssr == 0 else 0.0)
    adj = 1 - (1 - r2) * (n - 1) / (n - k)
    g = 0
    cov = None
    if design.clusters is not None:
        cov, g = cluster_cov(X, resid, design.clusters, xtx_inv)
    return FitResult(list(design.names), beta, cov, resid, n, k, g, r2, adj, xtx_inv, ci=ci)


def _raise_rank(X, names, piv, rank):
    indep = piv[:rank]
    dependent = []
    parts = []
    for j in piv[rank:]:
        coef, *_ = np.linalg.lstsq(X[:, indep], X[:, j], rcond=None)
        partners = [names[indep[i]] for i in np.flatnonzero(np.abs(coef) > 1e-8)]
        dependent.append(names[j])
        dependent.extend(p for p in partners if p not in dependent)
        parts.append(f"{names[j]} ~ {' + '.join(partners) or '0'}")
    raise RankError("rank-deficient design: " + "; ".join(parts), dependent)


def cluster_cov(X: np.ndarray, resid: np.ndarray, clusters, xtx_inv: np.ndarray) -> tuple[np.ndarray, int]:
    """CR1 sandwich with factor G/(G-1) * (N-1)/(N-K)."""
    n, k = X.shape
    codes, uniq = pd.factorize(np.asarray(clusters), sort=True)
    g = len(uniq)
    if g < 2:
        raise ValueError("cluster-robust covariance needs at least two clusters")
    scores = X * resid[:, None]
    S = np.zeros((g, k))
    np.add.at(S, codes, scores)
    meat = S.T @ S
    c = g / (g - 1) * (n - 1) / (n - k)
    V = c * xtx_inv @ meat @ xtx_inv
    return (V + V.T) / 2, g


DEGENERATE_VAR_RATIO = 1e-10


def contrast(fit: FitResult, weights, label: str = "") -> Contrast:
    """Linear combination c'beta with its clustered standard error."""
    c = np.asarray(weights, dtype=float)
    if c.shape != fit.beta.shape:
        raise ContrastError(f"weights length {c.size} != {fit.beta.size} coefficients")
    if fit.cov is None:
        raise ContrastError("fit has no covariance")
    if not c.any():
        raise ContrastError("zero contrast: z statistic undefined")
    var = float(c @ fit.cov @ c)
    scale = float(np.abs(c) @ np.abs(fit.cov) @ np.abs(c))
    if var < -1e-12 * max(scale, 1e-300):
        raise ContrastError(f"negative contrast variance {var:.3g}: covariance invalid")
    se = float(np.sqrt(max(var, 0.0)))
    est = float(c @ fit.beta)
    if se == 0:
        raise ContrastError("zero contrast variance: z statistic undefined")
    # Degenerate meat: e.g. as many cluster-invariant regressors as clusters
    # forces every cluster score sum to zero.
    sigma2 = float(fit.resid @ fit.resid) / max(fit.n - fit.k, 1)
    ref = sigma2 * float(c @ fit.xtx_inv @ c)
    if ref > 0 and var < DEGENERATE_VAR_RATIO * ref:
        raise ContrastError(f"clustered variance of {label or 'contrast'} is degenerate "
                            f"({fit.k} columns, {fit.g} clusters)")
    z = est / se
    crit = fit._crit()
    return Contrast(label, est, se, z, float(2 * stats.norm.sf(abs(z))), est - crit * se, est + crit * se)


def contrast_terms(fit: FitResult, terms: Sequence[str], label: str = "", minus: Sequence[str] = ()) -> Contrast:
    """Sum of named coefficients (minus another sum)."""
    c = np.zeros(fit.k)
    for t in terms:
        c[fit.index(t)] += 1
    for t in minus:
        c[fit.index(t)] -= 1
    return contrast(fit, c, label or "+".join(terms))


# ---------------------------------------------------------------------------
# specifications

H, L, V, T, RV, E = "high", "low", "violence", "taliban", "road_violence", "eradication"


def _ix(*parts: str) -> str:
    return ":".join(parts)


SPEC_TERMS: dict[str, list[str]] = {
    "eq2": [H, L],
    "eq1_cont": ["log_poppy"],
    "eq3_violence": [_ix(H, V), _ix(L, V), H, L, V],
    "eq3_taliban": [_ix(H, T), _ix(L, T), H, L, T],
    "eq4": [_ix(H, V, T), _ix(L, V, T), _ix(H, V), _ix(L, V), _ix(H, T), _ix(L, T), _ix(V, T), H, L, V, T],
    "eq5": [_ix(H, V, T), _ix(L, V, T), _ix(H, V), _ix(L, V), _ix(H, RV, T), _ix(L, RV, T), _ix(H, RV), _ix(L, RV),
            _ix(H, T), _ix(L, T), _ix(V, T), _ix(RV, T), H, L, V, RV, T],
    "erad": [H, L, E, _ix(H, E), _ix(L, E)],
}


@dataclass
class SpecResult:
    spec: str
    fit: FitResult
    contrasts: list[Contrast]

    def contrast_frame(self) -> pd.DataFrame:
        return pd.DataFrame([c.__dict__ for c in self.contrasts],
                            columns=["label", "estimate", "se", "z", "p", "ci_lo", "ci_hi"])

    def get(self, label: str) -> Contrast:
        for c in self.contrasts:
            if c.label == label:
                return c
        raise KeyError(label)


def _base_columns(frame: pd.DataFrame, violence_col: str) -> dict[str, np.ndarray]:
    cols = {}
    for name, src in ((H, "high"), (L, "low"), (V, violence_col), (T, "taliban"), (RV, "road_violence"),
                      ("log_poppy", "log_poppy")):
        if src in frame.columns:
            cols[name] = frame[src].to_numpy(dtype=float)
    if "eradication_pct" in frame.columns:
        # Undefined eradication (no cultivation, nothing eradicated) means none happened.
        cols[E] = frame["eradication_pct"].astype(float).fillna(0.0).to_numpy()
    return cols


def build_design(frame: pd.DataFrame, terms: Sequence[str], covariates: Sequence[str] = (),
                 outcome: str = "outcome", violence_col: str = "violence",
                 fixed_effects: Sequence[str] = ("province_id", "year"),
                 cluster: str = "district_id") -> tuple[DesignMatrix, list[str]]:
    """Intercept + terms + covariates + FE dummies; all-zero terms are dropped."""
    if len(frame) == 0:
        raise SpecError("empty panel")
    base = _base_columns(frame, violence_col)
    names, cols, dropped = ["const"], [np.ones(len(frame))], []
    missing = set()
    for term in terms:
        parts = term.split(":")
        miss = [p for p in parts if p not in base]
        if miss:
            missing.update(miss)
            continue
        col = np.prod([base[p] for p in parts], axis=0)
        if not np.any(col):
            dropped.append(term)
            continue
        names.append(term)
        cols.append(col)
    for cv in covariates:
        if cv not in frame.columns:
            missing.add(cv)
            continue
        col = frame[cv].to_numpy(dtype=float)
        if not np.any(col):
            dropped.append(cv)
            continue
        names.append(cv)
        cols.append(col)
    if missing:
        raise SpecError(f"panel lacks variables: {sorted(missing)}")
    for fe in fixed_effects:
        levels = sorted(frame[fe].astype(str).unique())
        vals = frame[fe].astype(str).to_numpy()
        for lev in levels[1:]:
            names.append(f"{fe.replace('_id', '')}[{lev}]")
            cols.append((vals == lev).astype(float))
    if outcome not in frame.columns:
        raise SpecError(f"panel lacks outcome column {outcome!r}")
    X = np.column_stack(cols)
    return DesignMatrix(X, frame[outcome].to_numpy(dtype=float), names,
                        frame[cluster].astype(str).to_numpy()), dropped


def _eq4_cells(fit: FitResult, cult: str) -> list[Contrast]:
    out = []
    for v, t in itertools.product((0, 1), (0, 1)):
        terms = [] if cult == "none" else [cult]
        if v:
            terms += [V] + ([_ix(cult, V)] if cult != "none" else [])
        if t:
            terms += [T] + ([_ix(cult, T)] if cult != "none" else [])
        if v and t:
            terms += [_ix(V, T)] + ([_ix(cult, V, T)] if cult != "none" else [])
        if not terms:
            continue
        out.append(_safe(fit, terms, f"{cult}|V{v}|T{t}"))
    return out


def _eq5_cells(fit: FitResult, cult: str) -> list[Contrast]:
    out = []
    for v, r, t in itertools.product((0, 1), (0, 1), (0, 1)):
        terms = [cult]
        if v:
            terms += [V, _ix(cult, V)]
        if r:
            terms += [RV, _ix(cult, RV)]
        if t:
            terms += [T, _ix(cult, T)]
        if v and t:
            terms += [_ix(V, T), _ix(cult, V, T)]
        if r and t:
            terms += [_ix(RV, T), _ix(cult, RV, T)]
        out.append(_safe(fit, terms, f"{cult}|V{v}|RV{r}|T{t}"))
    return out


def _safe(fit: FitResult, terms: Sequence[str], label: str, minus: Sequence[str] = ()) -> Contrast:
    """Contrast; NaN row when a term was dropped, NaN inference when its variance is degenerate."""
    if any(t not in fit.names for t in list(terms) + list(minus)):
        return Contrast(label, *([float("nan")] * 6))
    try:
        return contrast_terms(fit, terms, label, minus)
    except ContrastError:
        # Estimate is defined, inference is not (zero or degenerate variance).
        est = sum(fit.coef(t) for t in terms) - sum(fit.coef(t) for t in minus)
        return Contrast(label, est, *([float("nan")] * 5))


def spec_contrasts(spec: str, fit: FitResult) -> list[Contrast]:
    if spec in ("eq2",):
        return [_safe(fit, [H], H), _safe(fit, [L], L)]
    if spec == "eq1_cont":
        return [_safe(fit, ["log_poppy"], "log_poppy")]
    if spec == "eq3_violence":
        return [_safe(fit, [c] + ([V, _ix(c, V)] if v else []), f"{c}|V{v}") for c in (H, L) for v in (0, 1)]
    if spec == "eq3_taliban":
        return [_safe(fit, [c] + ([T, _ix(c, T)] if t else []), f"{c}|T{t}") for c in (H, L) for t in (0, 1)]
    if spec == "eq4":
        return _eq4_cells(fit, H) + _eq4_cells(fit, L) + _eq4_cells(fit, "none")
    if spec == "eq5":
        cells = _eq5_cells(fit, H) + _eq5_cells(fit, L)
        cells.append(_safe(fit, [RV, _ix(H, RV), _ix(RV, T), _ix(H, RV, T)], "high|T1|RV1-RV0"))
        return cells
    if spec == "erad":
        return [_safe(fit, [E, _ix(H, E)], "eradication|high"), _safe(fit, [E, _ix(L, E)], "eradication|low"),
                _safe(fit, [E], "eradication|none"), _safe(fit, [_ix(H, E)], "high:eradication")]
    raise SpecError(f"unknown spec {spec!r}")


def run_spec(frame: pd.DataFrame, spec: str, covariates: Sequence[str] = (), outcome: str = "outcome",
             violence_col: str = "violence", ci: str = "normal") -> SpecResult:
    """Build, fit and summarise one named specification."""
    if spec not in SPEC_TERMS:
        raise SpecError(f"unknown spec {spec!r}; choose from {sorted(SPEC_TERMS)}")
    design, dropped = build_design(frame, SPEC_TERMS[spec], covariates, outcome, violence_col)
    fit = fit_ols(design, ci=ci)
    fit.metadata.update({"spec": spec, "dropped_terms": dropped, "cov_type": "CR1",
                         "small_sample_factor": "G/(G-1)*(N-1)/(N-K)", "ci": ci,
                         "violence_col": violence_col, "outcome": outcome})
    return SpecResult(spec, fit, spec_contrasts(spec, fit))


def fit_metadata(res: SpecResult, extra: dict | None = None) -> dict:
    f = res.fit
    meta = {"spec": res.spec, "N": f.n, "K": f.k, "G": f.g, "r2": f.r2, "adj_r2": f.adj_r2}
    meta.update(f.metadata)
    if extra:
        meta.update(extra)
    return meta
