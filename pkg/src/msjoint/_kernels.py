"""Hot numeric kernels for the joint log-likelihood.

Two interchangeable backends: numba-compiled loops (default when numba is
importable) and a pure-numpy fallback.  Set the environment variable
``MSJOINT_NO_NUMBA`` to any non-empty value to force the numpy path; see
``benchmarks/bench_kernels.py`` for a timing comparison.

Array layout shared by both backends: per-subject segments of the flattened
node/event/observation arrays are addressed CSR-style through ``*_off``
offset vectors of length ``n_subjects + 1``.
"""

import os

import numpy as np

NUMBA_ENABLED = False
if not os.environ.get("MSJOINT_NO_NUMBA", ""):
    try:
        from numba import njit
        NUMBA_ENABLED = True
    except ImportError:   # pragma: no cover - numba is a hard dependency
        pass


def _grid_loglik_numpy(node_c, node_a, node_w, node_off,
                       ev_c, ev_a, ev_off,
                       resid, z_obs, obs_off,
                       bgrid, sigma2, logdet_d, d_inv):
    """Per-subject, per-quadrature-node joint log-density.

    Returns ``ll`` of shape ``(N, K)`` holding, for subject i at random
    effect ``bgrid[i, k]``, the sum of the conditional longitudinal
    log-density, the conditional multi-state log-density and the Gaussian
    random-effects log-density.
    """
    n_sub, n_grid, q = bgrid.shape
    ll = np.zeros((n_sub, n_grid))

    sub_of = np.repeat(np.arange(n_sub), np.diff(node_off))
    if node_c.size:
        expo = np.exp(node_c[:, None]
                      + np.einsum("nq,nkq->nk", node_a, bgrid[sub_of]))
        cum = np.vstack([np.zeros(n_grid),
                         np.cumsum(node_w[:, None] * expo, axis=0)])
        ll -= cum[node_off[1:]] - cum[node_off[:-1]]

    sub_ev = np.repeat(np.arange(n_sub), np.diff(ev_off))
    if ev_c.size:
        evv = ev_c[:, None] + np.einsum("nq,nkq->nk", ev_a, bgrid[sub_ev])
        cum = np.vstack([np.zeros(n_grid), np.cumsum(evv, axis=0)])
        ll += cum[ev_off[1:]] - cum[ev_off[:-1]]

    sub_obs = np.repeat(np.arange(n_sub), np.diff(obs_off))
    n_i = np.diff(obs_off)
    if resid.size:
        r = resid[:, None] - np.einsum("nq,nkq->nk", z_obs, bgrid[sub_obs])
        cum = np.vstack([np.zeros(n_grid), np.cumsum(r * r, axis=0)])
        ssr = cum[obs_off[1:]] - cum[obs_off[:-1]]
    else:
        ssr = np.zeros((n_sub, n_grid))
    ll += -0.5 * n_i[:, None] * np.log(2.0 * np.pi * sigma2) \
        - ssr / (2.0 * sigma2)

    quad = np.einsum("ikq,qr,ikr->ik", bgrid, d_inv, bgrid)
    ll += -0.5 * q * np.log(2.0 * np.pi) - 0.5 * logdet_d - 0.5 * quad
    return ll


def _posterior_pass_numpy(node_c, node_a, node_off,
                          resid, z_obs, obs_off,
                          bgrid, w_post):
    """Posterior-weighted aggregates used by the E-step and the score.

    ``w_post`` holds normalised posterior weights over the quadrature grid.
    Returns ``(s_node, m_node, ssr_post, m_sub, s2_sub)`` where ``s_node``
    and ``m_node`` are the posterior-weighted intensity mass and its
    b-moment per quadrature node, and the remaining entries are per-subject
    posterior moments.
    """
    n_sub, n_grid, q = bgrid.shape
    sub_of = np.repeat(np.arange(n_sub), np.diff(node_off))
    if node_c.size:
        expo = np.exp(node_c[:, None]
                      + np.einsum("nq,nkq->nk", node_a, bgrid[sub_of]))
        wexpo = expo * w_post[sub_of]
        s_node = wexpo.sum(axis=1)
        m_node = np.einsum("nk,nkq->nq", wexpo, bgrid[sub_of])
    else:
        s_node = np.zeros(0)
        m_node = np.zeros((0, q))

    m_sub = np.einsum("ik,ikq->iq", w_post, bgrid)
    s2_sub = np.einsum("ik,ikq,ikr->iqr", w_post, bgrid, bgrid)

    sub_obs = np.repeat(np.arange(n_sub), np.diff(obs_off))
    if resid.size:
        r = resid[:, None] - np.einsum("nq,nkq->nk", z_obs, bgrid[sub_obs])
        rw = (r * r) * w_post[sub_obs]
        cum = np.vstack([np.zeros(n_grid), np.cumsum(rw, axis=0)])
        ssr_post = (cum[obs_off[1:]] - cum[obs_off[:-1]]).sum(axis=1)
    else:
        ssr_post = np.zeros(n_sub)
    return s_node, m_node, ssr_post, m_sub, s2_sub


if NUMBA_ENABLED:

    @njit(cache=True)
    def _grid_loglik_numba(node_c, node_a, node_w, node_off,
                           ev_c, ev_a, ev_off,
                           resid, z_obs, obs_off,
                           bgrid, sigma2, logdet_d, d_inv):
        n_sub, n_grid, q = bgrid.shape
        ll = np.zeros((n_sub, n_grid))
        log_two_pi = np.log(2.0 * np.pi)
        for i in range(n_sub):
            b = bgrid[i]
            for n in range(node_off[i], node_off[i + 1]):
                c = node_c[n]
                w = node_w[n]
                for k in range(n_grid):
                    dot = 0.0
                    for r in range(q):
                        dot += node_a[n, r] * b[k, r]
                    ll[i, k] -= w * np.exp(c + dot)
            for n in range(ev_off[i], ev_off[i + 1]):
                c = ev_c[n]
                for k in range(n_grid):
                    dot = 0.0
                    for r in range(q):
                        dot += ev_a[n, r] * b[k, r]
                    ll[i, k] += c + dot
            n_i = obs_off[i + 1] - obs_off[i]
            base = -0.5 * n_i * np.log(2.0 * np.pi * sigma2)
            for k in range(n_grid):
                ssr = 0.0
                for n in range(obs_off[i], obs_off[i + 1]):
                    rr = resid[n]
                    for r in range(q):
                        rr -= z_obs[n, r] * b[k, r]
                    ssr += rr * rr
                ll[i, k] += base - ssr / (2.0 * sigma2)
            for k in range(n_grid):
                quad = 0.0
                for r in range(q):
                    acc = 0.0
                    for s in range(q):
                        acc += d_inv[r, s] * b[k, s]
                    quad += b[k, r] * acc
                ll[i, k] += -0.5 * q * log_two_pi - 0.5 * logdet_d - 0.5 * quad
        return ll

    @njit(cache=True)
    def _posterior_pass_numba(node_c, node_a, node_off,
                              resid, z_obs, obs_off,
                              bgrid, w_post):
        n_sub, n_grid, q = bgrid.shape
        n_node = node_c.shape[0]
        s_node = np.zeros(n_node)
        m_node = np.zeros((n_node, q))
        ssr_post = np.zeros(n_sub)
        m_sub = np.zeros((n_sub, q))
        s2_sub = np.zeros((n_sub, q, q))
        for i in range(n_sub):
            b = bgrid[i]
            w = w_post[i]
            for n in range(node_off[i], node_off[i + 1]):
                c = node_c[n]
                for k in range(n_grid):
                    dot = 0.0
                    for r in range(q):
                        dot += node_a[n, r] * b[k, r]
                    e = w[k] * np.exp(c + dot)
                    s_node[n] += e
                    for r in range(q):
                        m_node[n, r] += e * b[k, r]
            for k in range(n_grid):
                for r in range(q):
                    m_sub[i, r] += w[k] * b[k, r]
                    for s in range(q):
                        s2_sub[i, r, s] += w[k] * b[k, r] * b[k, s]
            for n in range(obs_off[i], obs_off[i + 1]):
                for k in range(n_grid):
                    rr = resid[n]
                    for r in range(q):
                        rr -= z_obs[n, r] * b[k, r]
                    ssr_post[i] += w[k] * rr * rr
        return s_node, m_node, ssr_post, m_sub, s2_sub

    grid_loglik = _grid_loglik_numba
    posterior_pass = _posterior_pass_numba
else:
    grid_loglik = _grid_loglik_numpy
    posterior_pass = _posterior_pass_numpy
