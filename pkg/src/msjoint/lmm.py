"""Linear mixed sub-model fit by maximum likelihood, used to initialise the
longitudinal block of the joint fit."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from ._optutil import central_diff_grad
from .domain import (
    JointDataset,
    ModelSpec,
    NumericalError,
    eval_fixed_design,
    eval_random_design,
)


@dataclass
class _LmmStats:
    """Per-subject sufficient statistics of the marginal Gaussian likelihood."""

    n_i: np.ndarray       # (N,)
    yty: np.ndarray       # (N,)
    xty: np.ndarray       # (N, p)
    xtx: np.ndarray       # (N, p, p)
    ztz: np.ndarray       # (N, q, q)
    ztx: np.ndarray       # (N, q, p)
    zty: np.ndarray       # (N, q)
    x_stack: np.ndarray   # stacked fixed design, for OLS initialisation
    y_stack: np.ndarray

    @classmethod
    def from_dataset(cls, dataset: JointDataset, spec: ModelSpec):
        n = dataset.n_subjects
        p, q = spec.p, spec.q
        stats = cls(np.zeros(n), np.zeros(n), np.zeros((n, p)),
                    np.zeros((n, p, p)), np.zeros((n, q, q)),
                    np.zeros((n, q, p)), np.zeros((n, q)),
                    np.zeros((0, p)), np.zeros(0))
        xs, ys = [], []
        for i, s in enumerate(dataset.subjects):
            x = eval_fixed_design(spec, s.times, s.covariates)
            z = eval_random_design(spec, s.times, s.covariates)
            y = s.y
            stats.n_i[i] = y.size
            stats.yty[i] = y @ y
            stats.xty[i] = x.T @ y
            stats.xtx[i] = x.T @ x
            stats.ztz[i] = z.T @ z
            stats.ztx[i] = z.T @ x
            stats.zty[i] = z.T @ y
            xs.append(x)
            ys.append(y)
        stats.x_stack = np.vstack(xs)
        stats.y_stack = np.concatenate(ys)
        return stats

    def gls_beta(self, log_sigma, d_cholesky):
        """Exact maximiser of the marginal likelihood over beta at fixed
        variance parameters (generalised least squares)."""
        sigma2 = float(np.exp(2.0 * log_sigma))
        q = self.ztz.shape[1]
        p = self.xtx.shape[1]
        if q == 0:
            return np.linalg.solve(self.xtx.sum(axis=0), self.xty.sum(axis=0))
        chol = np.zeros((q, q))
        chol[np.tril_indices(q)] = np.asarray(d_cholesky, dtype=float)
        cmat = np.eye(q)[None] + (chol.T @ self.ztz @ chol) / sigma2
        ltzx = chol.T @ self.ztx                       # (N, q, p)
        ltzy = self.zty @ chol                         # (N, q)
        sol_x = np.linalg.solve(cmat, ltzx)
        sol_y = np.linalg.solve(cmat, ltzy[..., None])[..., 0]
        lhs = self.xtx.sum(axis=0) - np.einsum("nqp,nqr->pr", ltzx, sol_x) / sigma2
        rhs = self.xty.sum(axis=0) - np.einsum("nq,nqp->p", sol_y, ltzx) / sigma2
        return np.linalg.solve(lhs, rhs)

    def loglik(self, beta, log_sigma, d_cholesky):
        beta = np.asarray(beta, dtype=float)
        sigma2 = float(np.exp(2.0 * log_sigma))
        if sigma2 < 1e-280:
            raise NumericalError("singular marginal covariance (sigma ~ 0)")
        q = self.ztz.shape[1]
        rtr = self.yty - 2.0 * self.xty @ beta \
            + np.einsum("p,npr,r->n", beta, self.xtx, beta)
        n_total = float(self.n_i.sum())
        base = -0.5 * n_total * np.log(2.0 * np.pi * sigma2)
        if q == 0:
            return float(base - 0.5 * np.sum(rtr) / sigma2)
        chol = np.zeros((q, q))
        chol[np.tril_indices(q)] = np.asarray(d_cholesky, dtype=float)
        ztr = self.zty - np.einsum("nqp,p->nq", self.ztx, beta)
        u = ztr @ chol                                    # (N, q) = L' Z' r
        cmat = np.eye(q)[None] + (chol.T @ self.ztz @ chol) / sigma2
        try:
            cf = np.linalg.cholesky(cmat)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("singular marginal covariance") from exc
        logdet = 2.0 * np.sum(np.log(np.diagonal(cf, axis1=1, axis2=2)), axis=1)
        w = np.linalg.solve(cmat, u[..., None])[..., 0]
        quad = (rtr - np.einsum("nq,nq->n", u, w) / sigma2) / sigma2
        return float(base - 0.5 * np.sum(logdet) - 0.5 * np.sum(quad))


def lmm_marginal_loglik(beta, log_sigma, d_cholesky, dataset: JointDataset,
                        spec: ModelSpec) -> float:
    """Closed-form marginal Gaussian log-likelihood
    ``sum_i log N(y_i; X_i beta, Z_i D Z_i' + sigma^2 I)``."""
    return _LmmStats.from_dataset(dataset, spec).loglik(beta, log_sigma,
                                                        d_cholesky)


@dataclass
class LmmFit:
    beta: np.ndarray
    log_sigma: float
    d_cholesky: np.ndarray
    loglik: float
    converged: bool
    n_iter: int
    grad_norm: float
    boundary: bool      # sigma (or a covariance diagonal) collapsed to ~0


def fit_lmm(dataset: JointDataset, spec: ModelSpec, gtol: float = 1e-5,
            max_iter: int = 500) -> LmmFit:
    """Maximise the marginal likelihood by BFGS with central-difference
    gradients, initialised from ordinary least squares; beta is polished by
    generalised least squares at the fitted variance parameters."""
    stats = _LmmStats.from_dataset(dataset, spec)
    p, q = spec.p, spec.q
    n_chol = q * (q + 1) // 2
    if stats.n_i.sum() < p + n_chol + 1:
        raise NumericalError("not enough observations to fit the mixed model")

    # Order-invariant least-squares initialisation from summed moments.
    beta0 = np.linalg.solve(stats.xtx.sum(axis=0), stats.xty.sum(axis=0))
    rss = float(stats.yty.sum() - 2 * stats.xty.sum(axis=0) @ beta0
                + beta0 @ stats.xtx.sum(axis=0) @ beta0)
    dof = max(1, int(stats.n_i.sum()) - p)
    sigma0 = max(np.sqrt(max(rss, 0.0) / dof), 1e-4)
    chol0 = np.sqrt(0.1) * np.eye(q)
    x0 = np.concatenate([beta0, [np.log(sigma0)], chol0[np.tril_indices(q)]])

    def split(x):
        return x[:p], float(x[p]), x[p + 1:]

    def negll(x):
        try:
            return -stats.loglik(*split(x))
        except NumericalError:
            return np.inf

    def grad(x):
        return central_diff_grad(negll, x, rel_step=1e-5, abs_step=1e-6)

    res = minimize(negll, x0, jac=grad, method="BFGS",
                   options={"gtol": gtol, "maxiter": max_iter})
    beta, log_sigma, d_chol = split(res.x)
    beta = stats.gls_beta(log_sigma, d_chol)
    x_hat = np.concatenate([beta, [log_sigma], d_chol])
    loglik = -negll(x_hat)
    grad_norm = float(np.max(np.abs(grad(x_hat))))
    chol = np.zeros((q, q))
    chol[np.tril_indices(q)] = d_chol
    boundary = bool(log_sigma < -8.0 or (q and np.any(np.abs(np.diag(chol)) < 1e-5)))
    return LmmFit(beta=beta, log_sigma=log_sigma, d_cholesky=d_chol,
                  loglik=loglik,
                  converged=bool(res.success) or grad_norm <= gtol or boundary,
                  n_iter=int(res.nit), grad_norm=grad_norm, boundary=boundary)
