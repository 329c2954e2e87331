"""Joint observed log-likelihood: conditional longitudinal and multi-state
densities, Gaussian random effects, and the pseudo-adaptive Gauss-Hermite
integral over them.

Per-subject data is flattened into node/event/observation arrays once
(:func:`build_workspaces`), after which every likelihood evaluation is a
linear design pass plus one call into the backend kernels.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import solve_triangular

from . import _kernels
from .domain import (
    JointDataset,
    ModelSpec,
    NumericalError,
    ParameterVector,
    SpecError,
    SubjectData,
    eval_deriv_fixed,
    eval_deriv_random,
    eval_fixed_design,
    eval_random_design,
    zeta_by_transition,
)
from .numerics import gauss_hermite, gk15_points, pseudo_adaptive_nodes


# ---------------------------------------------------------------------------
# Model evaluation at a point
# ---------------------------------------------------------------------------

def true_level(b, theta: ParameterVector, t, covs, spec: ModelSpec):
    """Error-free marker level X(t)'beta + Z(t)'b."""
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    x = eval_fixed_design(spec, t_arr, covs)
    z = eval_random_design(spec, t_arr, covs)
    out = x @ theta.beta + z @ np.asarray(b, dtype=float)
    return float(out[0]) if np.isscalar(t) else out


def true_slope(b, theta: ParameterVector, t, covs, spec: ModelSpec):
    """Time derivative of the error-free marker level."""
    if not (spec.deriv_fixed or spec.deriv_random):
        raise SpecError("model spec has no derivative design")
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    dx = eval_deriv_fixed(spec, t_arr, covs)
    dz = eval_deriv_random(spec, t_arr, covs)
    out = dx @ theta.beta + dz @ np.asarray(b, dtype=float)
    return float(out[0]) if np.isscalar(t) else out


def _spline_offsets(spec: ModelSpec) -> np.ndarray:
    return np.concatenate([[0], np.cumsum([g.n_coef for g in spec.baseline_groups])])


def log_baseline(hk, t, theta: ParameterVector, spec: ModelSpec,
                 extrapolate="clamp"):
    """Log baseline intensity of transition ``hk`` at times ``t``."""
    gi = spec.group_index()[tuple(hk)]
    basis = spec.baseline_groups[gi].basis()
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    return basis.design_matrix(t_arr, extrapolate=extrapolate) @ theta.spline_coefs[gi]


def transition_intensity(h, k, t, b, theta: ParameterVector, covs,
                         spec: ModelSpec, extrapolate="clamp"):
    """Intensity of the transition h -> k at time(s) ``t`` given effects ``b``.

    The log intensity is the spline log-baseline plus the proportionality
    offset, the covariate term and the association terms selected by the
    transition's dependence form.  Always strictly positive.
    """
    hk = (int(h), int(k))
    if not spec.topology.is_allowed(*hk):
        raise SpecError("transition %d->%d not allowed" % hk)
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    log_lam = log_baseline(hk, t_arr, theta, spec, extrapolate=extrapolate)
    log_lam = log_lam + zeta_by_transition(theta, spec)[
        spec.topology.transition_index[hk] - 1]
    for j, term in enumerate(spec.gamma_terms):
        if hk in term.transitions:
            log_lam = log_lam + theta.gamma[j] * float(covs[term.covariate])
    form = spec.dependence_form(hk)
    idx = spec.topology.transition_index[hk] - 1
    if form in ("level", "both"):
        log_lam = log_lam + theta.eta_level[idx] * true_level(b, theta, t_arr, covs, spec)
    if form in ("slope", "both"):
        log_lam = log_lam + theta.eta_slope[idx] * true_slope(b, theta, t_arr, covs, spec)
    out = np.exp(log_lam)
    return float(out[0]) if np.isscalar(t) else out


def cumulative_intensity(h, k, t0, t1, b, theta, covs, spec):
    """Integral of the transition intensity over [t0, t1] (one Kronrod panel
    per configured sub-panel)."""
    total = 0.0
    edges = np.linspace(t0, t1, spec.gk_panels + 1)
    for a, bb in zip(edges[:-1], edges[1:]):
        x, w = gk15_points(a, bb)
        total += float(np.dot(w, transition_intensity(h, k, x, b, theta, covs, spec)))
    return total


# ---------------------------------------------------------------------------
# Workspaces
# ---------------------------------------------------------------------------

@dataclass
class SubjectWorkspace:
    """Flattened per-subject quantities entering the likelihood.

    Node arrays hold one row per Kronrod node of each transition at risk in
    each sojourn; event arrays hold one row per observed transition.  The
    empirical-Bayes mode and curvature factor are cached here once computed.
    """

    id: str
    spec: ModelSpec
    covariates: dict
    x_long: np.ndarray          # (n_i, p)
    z_long: np.ndarray          # (n_i, q)
    y: np.ndarray               # (n_i,)
    sojourns: tuple
    node_time: np.ndarray       # (n_nodes,)
    node_w: np.ndarray
    node_trans: np.ndarray      # 0-based transition index
    node_spl: np.ndarray        # (n_nodes, total spline coefficients)
    node_gam: np.ndarray
    node_xl: np.ndarray
    node_dxl: np.ndarray
    node_z: np.ndarray
    node_dz: np.ndarray
    ev_trans: np.ndarray
    ev_spl: np.ndarray
    ev_gam: np.ndarray
    ev_xl: np.ndarray
    ev_dxl: np.ndarray
    ev_z: np.ndarray
    ev_dz: np.ndarray
    eb_mode: np.ndarray | None = None
    eb_scale: np.ndarray | None = None
    eb_fallback: bool = False


def _design_block(spec: ModelSpec, bases, trans0, times, covs):
    """Design pieces shared by node and event rows."""
    times = np.asarray(times, dtype=float)
    trans0 = np.asarray(trans0, dtype=np.int64)
    n = times.size
    offsets = _spline_offsets(spec)
    spl = np.zeros((n, int(offsets[-1])))
    group_of = spec.group_index()
    pairs = spec.topology.allowed
    n_clamped = 0
    for g, basis in enumerate(bases):
        rows = np.flatnonzero(np.array(
            [group_of[pairs[tr]] == g for tr in trans0]))
        if rows.size:
            tt = times[rows]
            n_clamped += int(np.sum((tt < basis.lo) | (tt > basis.hi)))
            spl[rows, offsets[g]:offsets[g + 1]] = basis.design_matrix(
                tt, extrapolate="clamp")
    gam = np.zeros((n, spec.n_gamma))
    tindex = spec.topology.transition_index
    for j, term in enumerate(spec.gamma_terms):
        members = [tindex[hk] - 1 for hk in term.transitions]
        mask = np.isin(trans0, members)
        if np.any(mask):
            gam[mask, j] = float(covs[term.covariate])
    xl = eval_fixed_design(spec, times, covs)
    dxl = eval_deriv_fixed(spec, times, covs)
    z = eval_random_design(spec, times, covs)
    dz = eval_deriv_random(spec, times, covs)
    return spl, gam, xl, dxl, z, dz, n_clamped


def build_workspace(subject: SubjectData, spec: ModelSpec):
    """Build one subject's workspace; returns (workspace, n_clamped)."""
    bases = spec.bases()
    tindex = spec.topology.transition_index
    node_time, node_w, node_trans = [], [], []
    ev_trans, ev_time = [], []
    for state, t0, t1, to_state in subject.history.sojourns():
        for k, trans in spec.topology.out_transitions(state):
            edges = np.linspace(t0, t1, spec.gk_panels + 1)
            for a, b in zip(edges[:-1], edges[1:]):
                x, w = gk15_points(a, b)
                node_time.append(x)
                node_w.append(w)
                node_trans.append(np.full(x.size, trans - 1, dtype=np.int64))
        if to_state is not None:
            ev_trans.append(tindex[(state, to_state)] - 1)
            ev_time.append(t1)
    node_time = np.concatenate(node_time) if node_time else np.zeros(0)
    node_w = np.concatenate(node_w) if node_w else np.zeros(0)
    node_trans = (np.concatenate(node_trans) if node_trans
                  else np.zeros(0, dtype=np.int64))
    covs = subject.covariates
    spl, gam, xl, dxl, z, dz, clamped = _design_block(
        spec, bases, node_trans, node_time, covs)
    ev_trans = np.asarray(ev_trans, dtype=np.int64)
    espl, egam, exl, edxl, ez, edz, eclamped = _design_block(
        spec, bases, ev_trans, np.asarray(ev_time, dtype=float), covs)
    ws = SubjectWorkspace(
        id=subject.id, spec=spec, covariates=dict(covs),
        x_long=eval_fixed_design(spec, subject.times, covs),
        z_long=eval_random_design(spec, subject.times, covs),
        y=np.asarray(subject.y, dtype=float),
        sojourns=tuple(subject.history.sojourns()),
        node_time=node_time, node_w=node_w, node_trans=node_trans,
        node_spl=spl, node_gam=gam, node_xl=xl, node_dxl=dxl,
        node_z=z, node_dz=dz,
        ev_trans=ev_trans, ev_spl=espl, ev_gam=egam, ev_xl=exl,
        ev_dxl=edxl, ev_z=ez, ev_dz=edz)
    return ws, clamped + eclamped


class WorkspaceSet:
    """All subject workspaces with concatenated arrays for bulk evaluation."""

    def __init__(self, subjects: Sequence[SubjectWorkspace], spec: ModelSpec):
        self.spec = spec
        self.subjects = list(subjects)
        cat = self._cat

        def offs(counts):
            return np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)

        self.node_off = offs([w.node_w.size for w in subjects])
        self.ev_off = offs([w.ev_trans.size for w in subjects])
        self.obs_off = offs([w.y.size for w in subjects])
        self.node_time = cat([w.node_time for w in subjects])
        self.node_w = cat([w.node_w for w in subjects])
        self.node_trans = cat([w.node_trans for w in subjects], np.int64)
        for name in ("spl", "gam", "xl", "dxl", "z", "dz"):
            setattr(self, "node_" + name,
                    cat([getattr(w, "node_" + name) for w in subjects]))
            setattr(self, "ev_" + name,
                    cat([getattr(w, "ev_" + name) for w in subjects]))
        self.ev_trans = cat([w.ev_trans for w in subjects], np.int64)
        self.x_long = cat([w.x_long for w in subjects])
        self.z_long = cat([w.z_long for w in subjects])
        self.y = cat([w.y for w in subjects])
        self.n_obs = np.diff(self.obs_off)
        self.gh_order: int | None = None
        self.bgrid: np.ndarray | None = None
        self.logw: np.ndarray | None = None

    @staticmethod
    def _cat(arrays, dtype=float):
        arrays = [np.asarray(a, dtype=dtype) for a in arrays]
        if not arrays:
            return np.zeros(0, dtype=dtype)
        if arrays[0].ndim == 1:
            return np.ascontiguousarray(np.concatenate(arrays))
        return np.ascontiguousarray(np.vstack(arrays))

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

    def refresh_adaptive(self, theta: ParameterVector, gh_order: int) -> None:
        """Recompute empirical-Bayes modes/curvatures and the node grid."""
        rule = gauss_hermite(gh_order)
        q = self.spec.q
        n_grid = gh_order ** q
        bgrid = np.empty((self.n_subjects, n_grid, q))
        logw = np.empty((self.n_subjects, n_grid))
        for i, ws in enumerate(self.subjects):
            eb = empirical_bayes_mode(theta, ws)
            ws.eb_mode, ws.eb_scale = eb.mode, eb.scale
            ws.eb_fallback = not eb.converged
            nodes, weights = pseudo_adaptive_nodes(rule, eb.mode, eb.scale)
            bgrid[i] = nodes
            logw[i] = np.log(weights)
        self.gh_order = gh_order
        self.bgrid = np.ascontiguousarray(bgrid)
        self.logw = logw

    def ensure_grid(self, theta: ParameterVector, gh_order: int) -> None:
        if self.bgrid is None or self.gh_order != gh_order:
            self.refresh_adaptive(theta, gh_order)


def build_workspaces(dataset: JointDataset, spec: ModelSpec) -> WorkspaceSet:
    """Workspaces for every subject; warns once if evaluations were clamped
    to the spline knot range."""
    out, clamped = [], 0
    for subject in dataset.subjects:
        ws, c = build_workspace(subject, spec)
        out.append(ws)
        clamped += c
    if clamped:
        warnings.warn("%d intensity evaluation times outside the spline knot "
                      "range were clamped to the boundary" % clamped,
                      RuntimeWarning, stacklevel=2)
    return WorkspaceSet(out, spec)


# ---------------------------------------------------------------------------
# Parameter plumbing
# ---------------------------------------------------------------------------

@dataclass
class _ThetaParts:
    beta: np.ndarray
    sigma2: float
    chol: np.ndarray
    d_inv: np.ndarray
    logdet_d: float
    spl_flat: np.ndarray
    gamma: np.ndarray
    zeta_t: np.ndarray
    eta_l: np.ndarray
    eta_s: np.ndarray


def _theta_parts(theta: ParameterVector, spec: ModelSpec,
                 on_singular="raise") -> _ThetaParts | None:
    chol = theta.chol_matrix()
    diag = np.abs(np.diag(chol))
    if np.any(diag < 1e-10) or not np.all(np.isfinite(chol)):
        if on_singular == "none":
            return None
        raise NumericalError("singular random-effects covariance")
    logdet = 2.0 * float(np.sum(np.log(diag)))
    inv_chol = solve_triangular(chol, np.eye(spec.q), lower=True)
    d_inv = inv_chol.T @ inv_chol
    spl_flat = (np.concatenate(theta.spline_coefs) if theta.spline_coefs
                else np.zeros(0))
    return _ThetaParts(
        beta=np.asarray(theta.beta, dtype=float),
        sigma2=float(np.exp(2.0 * theta.log_sigma)),
        chol=chol, d_inv=d_inv, logdet_d=logdet,
        spl_flat=spl_flat, gamma=np.asarray(theta.gamma, dtype=float),
        zeta_t=zeta_by_transition(theta, spec),
        eta_l=np.asarray(theta.eta_level, dtype=float),
        eta_s=np.asarray(theta.eta_slope, dtype=float))


def _linear_parts(parts: _ThetaParts, ws):
    """theta-dependent node/event scalars and b-coefficients."""
    el = parts.eta_l[ws.node_trans]
    es = parts.eta_s[ws.node_trans]
    lvl = ws.node_xl @ parts.beta
    slp = ws.node_dxl @ parts.beta
    node_c = (ws.node_spl @ parts.spl_flat + ws.node_gam @ parts.gamma
              + parts.zeta_t[ws.node_trans] + el * lvl + es * slp)
    node_a = ws.node_z * el[:, None] + ws.node_dz * es[:, None]
    eel = parts.eta_l[ws.ev_trans]
    ees = parts.eta_s[ws.ev_trans]
    ev_lvl = ws.ev_xl @ parts.beta
    ev_slp = ws.ev_dxl @ parts.beta
    ev_c = (ws.ev_spl @ parts.spl_flat + ws.ev_gam @ parts.gamma
            + parts.zeta_t[ws.ev_trans] + eel * ev_lvl + ees * ev_slp)
    ev_a = ws.ev_z * eel[:, None] + ws.ev_dz * ees[:, None]
    resid = ws.y - ws.x_long @ parts.beta
    return node_c, node_a, ev_c, ev_a, resid, lvl, slp, ev_lvl, ev_slp


# ---------------------------------------------------------------------------
# Conditional densities at a fixed random effect
# ---------------------------------------------------------------------------

def conditional_longit_logdensity(b, theta: ParameterVector,
                                  workspace: SubjectWorkspace) -> float:
    """Gaussian log-density of the marker series given the random effects."""
    b = np.asarray(b, dtype=float)
    sigma2 = float(np.exp(2.0 * theta.log_sigma))
    resid = workspace.y - workspace.x_long @ theta.beta - workspace.z_long @ b
    n = workspace.y.size
    return float(-0.5 * n * np.log(2.0 * np.pi * sigma2)
                 - np.dot(resid, resid) / (2.0 * sigma2))


def conditional_mstate_logdensity(b, theta: ParameterVector,
                                  workspace: SubjectWorkspace) -> float:
    """Log-density of the event history given the random effects: per
    sojourn, minus the summed cumulative intensities of all transitions at
    risk plus the log intensity of the observed transition."""
    b = np.asarray(b, dtype=float)
    parts = _theta_parts(theta, workspace.spec)
    node_c, node_a, ev_c, ev_a, *_ = _linear_parts(parts, workspace)
    lam = np.exp(node_c + node_a @ b)
    if not np.all(np.isfinite(lam)):
        raise NumericalError("non-finite intensity for subject %s" % workspace.id)
    out = -float(np.dot(workspace.node_w, lam))
    if ev_c.size:
        out += float(np.sum(ev_c + ev_a @ b))
    return out


def random_effects_logdensity(b, theta: ParameterVector) -> float:
    """Multivariate Gaussian log-density of the random effects."""
    b = np.asarray(b, dtype=float)
    chol = theta.chol_matrix()
    diag = np.abs(np.diag(chol))
    if np.any(diag < 1e-12):
        raise NumericalError("singular random-effects covariance")
    half = solve_triangular(chol, b, lower=True)
    logdet = 2.0 * float(np.sum(np.log(diag)))
    return float(-0.5 * b.size * np.log(2.0 * np.pi) - 0.5 * logdet
                 - 0.5 * np.dot(half, half))


# ---------------------------------------------------------------------------
# Empirical-Bayes modes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EBResult:
    mode: np.ndarray
    scale: np.ndarray      # Cholesky factor of the inverse curvature
    converged: bool


def empirical_bayes_mode(theta: ParameterVector, workspace: SubjectWorkspace,
                         max_iter: int = 100, tol: float = 1e-8) -> EBResult:
    """Posterior mode of the random effects and its curvature factor.

    Newton iterations on the joint conditional log-density; on failure the
    prior mode (b = 0 with the covariance Cholesky as scale) is returned,
    flagged through ``converged=False``.
    """
    spec = workspace.spec
    parts = _theta_parts(theta, spec)
    node_c, node_a, ev_c, ev_a, resid, *_ = _linear_parts(parts, workspace)
    q = spec.q
    zz = workspace.z_long.T @ workspace.z_long
    ztr = workspace.z_long.T @ resid
    ev_grad = ev_a.sum(axis=0) if ev_a.size else np.zeros(q)

    def value(b):
        lam = np.exp(node_c + node_a @ b)
        val = -np.dot(workspace.node_w, lam)
        if ev_c.size:
            val += np.sum(ev_c + ev_a @ b)
        r = resid - workspace.z_long @ b
        val -= np.dot(r, r) / (2.0 * parts.sigma2)
        val -= 0.5 * b @ parts.d_inv @ b
        return val, lam

    b = np.zeros(q)
    val, lam = value(b)
    converged = False
    for _ in range(max_iter):
        wlam = workspace.node_w * lam
        grad = (-node_a.T @ wlam + ev_grad
                + (ztr - zz @ b) / parts.sigma2 - parts.d_inv @ b)
        hess = -(node_a.T * wlam) @ node_a - zz / parts.sigma2 - parts.d_inv
        if np.max(np.abs(grad)) < tol:
            converged = True
            break
        try:
            step = np.linalg.solve(-hess, grad)
        except np.linalg.LinAlgError:
            break
        # Backtracking on the conditional log-density.
        stepped = False
        for _ in range(30):
            cand = b + step
            cand_val, cand_lam = value(cand)
            if np.isfinite(cand_val) and cand_val >= val - 1e-12:
                b, val, lam = cand, cand_val, cand_lam
                stepped = True
                break
            step *= 0.5
        if not stepped:
            break
    if not converged:
        # Check stationarity one last time before falling back.
        wlam = workspace.node_w * lam
        grad = (-node_a.T @ wlam + ev_grad
                + (ztr - zz @ b) / parts.sigma2 - parts.d_inv @ b)
        converged = bool(np.max(np.abs(grad)) < 1e-4)
    if not converged:
        return EBResult(np.zeros(q), parts.chol.copy(), False)
    wlam = workspace.node_w * lam
    hess = -(node_a.T * wlam) @ node_a - zz / parts.sigma2 - parts.d_inv
    try:
        scale = np.linalg.cholesky(np.linalg.inv(-hess))
    except np.linalg.LinAlgError:
        return EBResult(np.zeros(q), parts.chol.copy(), False)
    return EBResult(b, scale, True)


# ---------------------------------------------------------------------------
# Quadrature over the random effects
# ---------------------------------------------------------------------------

def _logsumexp_rows(x: np.ndarray) -> np.ndarray:
    m = np.max(x, axis=1)
    out = np.full(x.shape[0], -np.inf)
    ok = np.isfinite(m)
    if np.any(ok):
        shifted = x[ok] - m[ok, None]
        out[ok] = m[ok] + np.log(np.sum(np.exp(shifted), axis=1))
    return out


def _grid_loglik(theta: ParameterVector, wset: WorkspaceSet):
    """Log-integrand on the adaptive grid; returns (ll, parts) with ``ll``
    of shape (N, K) or None when the covariance is numerically singular."""
    parts = _theta_parts(theta, wset.spec, on_singular="none")
    if parts is None:
        return None, None
    node_c, node_a, ev_c, ev_a, resid, *_ = _linear_parts(parts, wset)
    ll = _kernels.grid_loglik(
        node_c, np.ascontiguousarray(node_a), wset.node_w, wset.node_off,
        ev_c, np.ascontiguousarray(ev_a), wset.ev_off,
        resid, wset.z_long, wset.obs_off,
        wset.bgrid, parts.sigma2, parts.logdet_d, parts.d_inv)
    return ll, parts


def subject_logliks(theta: ParameterVector, wset: WorkspaceSet,
                    gh_order: int | None = None) -> np.ndarray:
    """Vector of per-subject marginal log-likelihood contributions."""
    gh_order = gh_order or wset.spec.gh_order
    wset.ensure_grid(theta, gh_order)
    ll, _ = _grid_loglik(theta, wset)
    if ll is None:
        return np.full(wset.n_subjects, -np.inf)
    return _logsumexp_rows(wset.logw + ll)


def subject_loglik(theta: ParameterVector, workspace: SubjectWorkspace,
                   gh_order: int | None = None) -> float:
    """Marginal log-likelihood contribution of a single subject."""
    mini = WorkspaceSet([workspace], workspace.spec)
    if workspace.eb_mode is not None:
        rule = gauss_hermite(gh_order or workspace.spec.gh_order)
        nodes, weights = pseudo_adaptive_nodes(rule, workspace.eb_mode,
                                               workspace.eb_scale)
        mini.gh_order = gh_order or workspace.spec.gh_order
        mini.bgrid = np.ascontiguousarray(nodes[None])
        mini.logw = np.log(weights)[None]
    out = float(subject_logliks(theta, mini, gh_order)[0])
    if out == -np.inf:
        warnings.warn("all quadrature evaluations underflowed for subject %s"
                      % workspace.id, RuntimeWarning, stacklevel=2)
    return out


def total_loglik(theta: ParameterVector, wset: WorkspaceSet,
                 gh_order: int | None = None) -> float:
    """Sum of per-subject contributions (fixed reduction order)."""
    per = subject_logliks(theta, wset, gh_order)
    bad = np.flatnonzero(~np.isfinite(per))
    if bad.size:
        warnings.warn("log-likelihood underflowed to -inf for subject %s"
                      % wset.subjects[bad[0]].id, RuntimeWarning, stacklevel=2)
        return -np.inf
    return float(np.sum(per))


# ---------------------------------------------------------------------------
# Posterior moments and the analytic score
# ---------------------------------------------------------------------------

def posterior_weights(theta: ParameterVector, wset: WorkspaceSet,
                      gh_order: int | None = None):
    """(total loglik, normalised posterior weights over the grid)."""
    gh_order = gh_order or wset.spec.gh_order
    wset.ensure_grid(theta, gh_order)
    ll, _ = _grid_loglik(theta, wset)
    if ll is None:
        raise NumericalError("singular covariance in posterior weights")
    lw = wset.logw + ll
    norms = _logsumexp_rows(lw)
    if not np.all(np.isfinite(norms)):
        bad = wset.subjects[int(np.flatnonzero(~np.isfinite(norms))[0])].id
        raise NumericalError("posterior weights underflowed for subject %s" % bad)
    wpost = np.exp(lw - norms[:, None])
    return float(np.sum(norms)), wpost


def posterior_moments(theta: ParameterVector, wset: WorkspaceSet,
                      gh_order: int | None = None):
    """Posterior mean and second moment of the random effects per subject,
    plus the posterior expected residual sum of squares."""
    total, wpost = posterior_weights(theta, wset, gh_order)
    parts = _theta_parts(theta, wset.spec)
    _, _, _, _, resid, *_ = _linear_parts(parts, wset)
    _, _, ssr_post, m_sub, s2_sub = _kernels.posterior_pass(
        np.zeros(0), np.zeros((0, wset.spec.q)), wset.node_off * 0,
        resid, wset.z_long, wset.obs_off, wset.bgrid, wpost)
    return total, m_sub, s2_sub, ssr_post


def score_given_weights(theta: ParameterVector, wset: WorkspaceSet,
                        wpost: np.ndarray, include_variance: bool = True):
    """Packed-parameter gradient of the posterior-weighted complete-data
    log-likelihood at ``theta`` with frozen weights ``wpost``.

    With weights computed at the same ``theta`` this is the exact score of
    the quadrature-approximated marginal likelihood (Fisher's identity).
    ``include_variance=False`` drops the log-sigma and covariance blocks
    (used for the M-step objective, where those are updated in closed form).
    """
    spec = wset.spec
    parts = _theta_parts(theta, spec)
    (node_c, node_a, ev_c, ev_a, resid, lvl, slp, ev_lvl, ev_slp) = \
        _linear_parts(parts, wset)
    s_node, m_node, ssr_post, m_sub, s2_sub = _kernels.posterior_pass(
        node_c, np.ascontiguousarray(node_a), wset.node_off,
        resid, wset.z_long, wset.obs_off, wset.bgrid, wpost)

    ws_node = wset.node_w * s_node
    sub_obs = np.repeat(np.arange(wset.n_subjects), wset.n_obs)
    r_eff = resid - np.einsum("nq,nq->n", wset.z_long, m_sub[sub_obs])
    sub_ev = np.repeat(np.arange(wset.n_subjects), np.diff(wset.ev_off))

    el = parts.eta_l[wset.node_trans]
    es = parts.eta_s[wset.node_trans]
    eel = parts.eta_l[wset.ev_trans]
    ees = parts.eta_s[wset.ev_trans]

    g_beta = wset.x_long.T @ r_eff / parts.sigma2
    g_beta -= (wset.node_xl * (ws_node * el)[:, None]
               + wset.node_dxl * (ws_node * es)[:, None]).sum(axis=0)
    if ev_c.size:
        g_beta += (wset.ev_xl * eel[:, None] + wset.ev_dxl * ees[:, None]).sum(axis=0)

    g_spl = -wset.node_spl.T @ ws_node
    g_gam = -wset.node_gam.T @ ws_node
    n_trans = spec.topology.n_transitions
    g_zeta_t = -np.bincount(wset.node_trans, weights=ws_node, minlength=n_trans)
    lvl_node_post = s_node * lvl + np.einsum("nq,nq->n", wset.node_z, m_node)
    slp_node_post = s_node * slp + np.einsum("nq,nq->n", wset.node_dz, m_node)
    g_eta_l_t = -np.bincount(wset.node_trans, weights=wset.node_w * lvl_node_post,
                             minlength=n_trans)
    g_eta_s_t = -np.bincount(wset.node_trans, weights=wset.node_w * slp_node_post,
                             minlength=n_trans)
    if ev_c.size:
        g_spl += wset.ev_spl.sum(axis=0)
        g_gam += wset.ev_gam.sum(axis=0)
        g_zeta_t += np.bincount(wset.ev_trans, minlength=n_trans)
        ev_lvl_post = ev_lvl + np.einsum("nq,nq->n", wset.ev_z, m_sub[sub_ev])
        ev_slp_post = ev_slp + np.einsum("nq,nq->n", wset.ev_dz, m_sub[sub_ev])
        g_eta_l_t += np.bincount(wset.ev_trans, weights=ev_lvl_post,
                                 minlength=n_trans)
        g_eta_s_t += np.bincount(wset.ev_trans, weights=ev_slp_post,
                                 minlength=n_trans)

    if include_variance:
        g_log_sigma = float(np.sum(-wset.n_obs + ssr_post / parts.sigma2))
        s_total = s2_sub.sum(axis=0)
        grad_l = (-wset.n_subjects * parts.d_inv
                  + parts.d_inv @ s_total @ parts.d_inv) @ parts.chol
        g_dchol = grad_l[np.tril_indices(spec.q)]
    else:
        g_log_sigma = 0.0
        g_dchol = np.zeros(spec.q * (spec.q + 1) // 2)

    tindex = spec.topology.transition_index
    g_zeta = np.array([g_zeta_t[tindex[hk] - 1] for hk in spec.zeta_transitions()])
    g_eta = []
    for hk in spec.topology.allowed:
        form = spec.dependence_form(hk)
        if form in ("level", "both"):
            g_eta.append(g_eta_l_t[tindex[hk] - 1])
        if form in ("slope", "both"):
            g_eta.append(g_eta_s_t[tindex[hk] - 1])
    return np.concatenate([g_beta, [g_log_sigma], g_dchol, g_gam, g_zeta,
                           g_eta, g_spl])


def total_loglik_and_score(theta: ParameterVector, wset: WorkspaceSet,
                           gh_order: int | None = None):
    """Joint log-likelihood and its packed analytic gradient."""
    total, wpost = posterior_weights(theta, wset, gh_order)
    return total, score_given_weights(theta, wset, wpost)
