"""Core domain types: transition topology, joint datasets, model
specification and the named parameter packing shared by every module."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .numerics import BSplineBasis


class DataError(ValueError):
    """Invalid input data (rejected at validation)."""


class SpecError(ValueError):
    """Inconsistent model specification."""


class NumericalError(RuntimeError):
    """Numerical failure during evaluation or fitting."""


def _frozen(a, dtype=float):
    out = np.asarray(a, dtype=dtype).copy()
    out.flags.writeable = False
    return out


# ---------------------------------------------------------------------------
# Time bases and design columns
# ---------------------------------------------------------------------------

def make_time_bases(alpha: float | None = None, nu: float | None = None
                    ) -> dict[str, Callable]:
    """Named functions of time usable as design-column factors.

    ``t`` (identity) is always available.  When ``alpha`` is given, ``f1``
    with ``f1(t) = (1+t)^alpha - 1`` and its derivative ``df1`` are added;
    when ``nu`` is given, ``f2`` with ``f2(t) = t^(1+nu) / (1+t)^nu`` and
    ``df2`` are added.
    """
    bases: dict[str, Callable] = {"t": lambda t: np.asarray(t, dtype=float)}
    if alpha is not None:
        a = float(alpha)
        bases["f1"] = lambda t: (1.0 + np.asarray(t, float)) ** a - 1.0
        bases["df1"] = lambda t: a * (1.0 + np.asarray(t, float)) ** (a - 1.0)
    if nu is not None:
        v = float(nu)

        def f2(t, v=v):
            t = np.asarray(t, float)
            return t ** (1.0 + v) / (1.0 + t) ** v

        def df2(t, v=v):
            t = np.asarray(t, float)
            return ((1.0 + v) * t ** v * (1.0 + t) ** (-v)
                    - v * t ** (1.0 + v) * (1.0 + t) ** (-v - 1.0))

        bases["f2"] = f2
        bases["df2"] = df2
    return bases


@dataclass(frozen=True)
class ColumnExpr:
    """Product of factors, each a covariate name, a time-basis name or "1"."""

    factors: tuple[str, ...]

    @classmethod
    def parse(cls, expr: str) -> "ColumnExpr":
        factors = tuple(f.strip() for f in expr.split("*"))
        if not factors or any(not f for f in factors):
            raise SpecError("malformed column expression %r" % expr)
        return cls(factors)

    @property
    def label(self) -> str:
        return "*".join(self.factors)

    def covariate_names(self, bases: Mapping[str, Callable]):
        return {f for f in self.factors if f != "1" and f not in bases}

    def eval(self, t, covs: Mapping[str, float], bases: Mapping[str, Callable]):
        t = np.asarray(t, dtype=float)
        out = np.ones_like(t)
        for f in self.factors:
            if f == "1":
                continue
            if f in bases:
                out = out * bases[f](t)
            elif f in covs:
                out = out * float(covs[f])
            else:
                raise DataError("unknown covariate column %r" % f)
        return out


def _as_columns(exprs: Sequence) -> tuple[ColumnExpr, ...]:
    out = []
    for e in exprs:
        out.append(e if isinstance(e, ColumnExpr) else ColumnExpr.parse(str(e)))
    return tuple(out)


# ---------------------------------------------------------------------------
# Topology and observed data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TransitionTopology:
    """Finite state space with the set of allowed directed transitions."""

    n_states: int
    allowed: tuple[tuple[int, int], ...]
    transition_index: dict = field(init=False, repr=False)
    absorbing: frozenset = field(init=False)

    def __post_init__(self):
        pairs = tuple(sorted((int(h), int(k)) for h, k in self.allowed))
        if len(set(pairs)) != len(pairs):
            raise SpecError("duplicate transitions")
        for h, k in pairs:
            if not (0 <= h < self.n_states and 0 <= k < self.n_states):
                raise SpecError("transition (%d,%d) outside state space" % (h, k))
            if h == k:
                raise SpecError("self-transition (%d,%d) not allowed" % (h, k))
        index = {hk: i + 1 for i, hk in enumerate(pairs)}
        origins = {h for h, _ in pairs}
        absorbing = frozenset(h for h in range(self.n_states) if h not in origins)
        object.__setattr__(self, "allowed", pairs)
        object.__setattr__(self, "transition_index", index)
        object.__setattr__(self, "absorbing", absorbing)

    @property
    def n_transitions(self) -> int:
        return len(self.allowed)

    def out_transitions(self, h: int):
        """Transitions leaving state h as (to_state, transition_index) pairs."""
        return tuple((k, self.transition_index[(hh, k)])
                     for hh, k in self.allowed if hh == h)

    def is_allowed(self, h: int, k: int) -> bool:
        return (h, k) in self.transition_index


@dataclass(frozen=True)
class SubjectHistory:
    """Observed event history of one subject.

    ``times`` are the observed times after entry; ``states[r]`` is the state
    occupied from ``times[r]`` on, and ``delta[r]`` indicates whether a
    transition happened at ``times[r]``.  When the final state is not
    absorbing the last time is the censoring time (with ``delta = 0``).
    """

    id: str
    t_entry: float
    initial_state: int
    times: np.ndarray
    states: np.ndarray
    delta: np.ndarray
    censor_time: float

    def __post_init__(self):
        object.__setattr__(self, "times", _frozen(self.times))
        object.__setattr__(self, "states", _frozen(self.states, dtype=int))
        object.__setattr__(self, "delta", _frozen(self.delta, dtype=int))

    def validate(self, topology: TransitionTopology) -> None:
        sid = self.id
        m = self.times.size
        if m < 1:
            raise DataError("subject %s: no observed times" % sid)
        if self.states.size != m or self.delta.size != m:
            raise DataError("subject %s: ragged history arrays" % sid)
        if np.any(np.diff(self.times) <= 0):
            raise DataError("subject %s: non-increasing event times" % sid)
        if not self.t_entry < self.times[0]:
            raise DataError("subject %s: entry time not before first time" % sid)
        prev = self.initial_state
        for r in range(m):
            cur = int(self.states[r])
            changed = cur != prev
            if bool(self.delta[r]) != changed:
                raise DataError("subject %s: transition indicator inconsistent "
                                "with state sequence at t=%g" % (sid, self.times[r]))
            if changed and not topology.is_allowed(prev, cur):
                raise DataError("subject %s: transition not allowed (%d->%d)"
                                % (sid, prev, cur))
            prev = cur
        last = int(self.states[-1])
        if last not in topology.absorbing:
            if self.delta[-1] != 0:
                raise DataError("subject %s: non-absorbing final state must end "
                                "with a censoring record" % sid)
            if self.censor_time != self.times[-1]:
                raise DataError("subject %s: censoring time must equal the last "
                                "observed time" % sid)

    def sojourns(self):
        """(state, t_start, t_stop, to_state or None) per occupied interval."""
        out = []
        prev_state, prev_time = self.initial_state, self.t_entry
        for r in range(self.times.size):
            to = int(self.states[r]) if self.delta[r] else None
            out.append((prev_state, prev_time, float(self.times[r]), to))
            prev_state, prev_time = int(self.states[r]), float(self.times[r])
        return out


@dataclass(frozen=True)
class LongitudinalRecord:
    id: str
    t: float
    y: float
    covariates: Mapping[str, float]


@dataclass(frozen=True)
class SubjectData:
    """Validated per-subject view: marker series plus event history."""

    id: str
    covariates: Mapping[str, float]
    times: np.ndarray
    y: np.ndarray
    history: SubjectHistory

    def __post_init__(self):
        object.__setattr__(self, "times", _frozen(self.times))
        object.__setattr__(self, "y", _frozen(self.y))


@dataclass(frozen=True)
class JointDataset:
    topology: TransitionTopology
    subjects: tuple[SubjectData, ...]
    covariate_names: tuple[str, ...]

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

    def to_records(self):
        """Decompose back into (longitudinal records, histories)."""
        records, histories = [], []
        for s in self.subjects:
            for t, y in zip(s.times, s.y):
                records.append(LongitudinalRecord(s.id, float(t), float(y),
                                                  dict(s.covariates)))
            histories.append(s.history)
        return records, histories


def validate_dataset(longitudinal: Sequence[LongitudinalRecord],
                     histories: Sequence[SubjectHistory],
                     topology: TransitionTopology) -> JointDataset:
    """Check every invariant and assemble a validated dataset.

    Subjects are ordered by first appearance in ``histories``; each subject
    needs at least one longitudinal record, marker times must not exceed the
    last event time, and covariates must be time-fixed with a consistent
    column set across the whole dataset.
    """
    by_id: dict[str, list[LongitudinalRecord]] = {}
    for rec in longitudinal:
        by_id.setdefault(str(rec.id), []).append(rec)

    cov_names: tuple[str, ...] | None = None
    subjects = []
    seen = set()
    for hist in histories:
        sid = str(hist.id)
        if sid in seen:
            raise DataError("duplicate history for subject %s" % sid)
        seen.add(sid)
        hist.validate(topology)
        recs = by_id.pop(sid, None)
        if not recs:
            raise DataError("subject %s has no longitudinal record" % sid)
        times = np.array([r.t for r in recs], dtype=float)
        if np.any(np.diff(times) < 0):
            raise DataError("subject %s: non-increasing measurement times" % sid)
        if times[-1] > hist.times[-1]:
            raise DataError("subject %s: longitudinal time after last event time"
                            % sid)
        covs = dict(recs[0].covariates)
        keys = tuple(sorted(covs))
        if cov_names is None:
            cov_names = keys
        elif keys != cov_names:
            raise DataError("subject %s: unknown covariate column set %s"
                            % (sid, list(keys)))
        for r in recs[1:]:
            if tuple(sorted(r.covariates)) != cov_names:
                raise DataError("subject %s: unknown covariate column" % sid)
            for k in cov_names:
                if r.covariates[k] != covs[k]:
                    raise DataError("subject %s: covariate %r varies over time "
                                    "(baseline covariates only)" % (sid, k))
        y = np.array([r.y for r in recs], dtype=float)
        subjects.append(SubjectData(sid, covs, times, y, hist))
    if by_id:
        raise DataError("longitudinal records for unknown subjects: %s"
                        % sorted(by_id))
    return JointDataset(topology, tuple(subjects), cov_names or ())


# ---------------------------------------------------------------------------
# Model specification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GammaTerm:
    """One shared proportional-hazards coefficient and the transitions it
    applies to."""

    covariate: str
    transitions: tuple[tuple[int, int], ...]

    @property
    def label(self) -> str:
        trans = ",".join("%d->%d" % hk for hk in self.transitions)
        return "%s:%s" % (self.covariate, trans)


@dataclass(frozen=True)
class BaselineGroup:
    """Transitions sharing one B-spline log-baseline up to log-offsets."""

    transitions: tuple[tuple[int, int], ...]
    reference: tuple[int, int]
    degree: int = 3
    n_interior: int = 3
    knots: tuple[float, ...] | None = None   # (lo, interior..., hi) once resolved

    @property
    def n_coef(self) -> int:
        return self.n_interior + self.degree + 1

    def basis(self) -> BSplineBasis:
        if self.knots is None:
            raise SpecError("baseline knots not resolved yet")
        lo, hi = self.knots[0], self.knots[-1]
        return BSplineBasis.from_interior(self.degree, lo, hi, self.knots[1:-1])


DEPENDENCE_FORMS = ("none", "level", "slope", "both")


@dataclass(frozen=True)
class ModelSpec:
    """Design assignments binding a topology to the joint model."""

    topology: TransitionTopology
    fixed: tuple[ColumnExpr, ...]
    random: tuple[ColumnExpr, ...]
    deriv_fixed: tuple[tuple[ColumnExpr, int], ...] = ()
    deriv_random: tuple[tuple[ColumnExpr, int], ...] = ()
    gamma_terms: tuple[GammaTerm, ...] = ()
    dependence: tuple[tuple[tuple[int, int], str], ...] = ()
    baseline_groups: tuple[BaselineGroup, ...] = ()
    time_bases: Mapping[str, Callable] = field(default_factory=make_time_bases)
    gh_order: int = 9
    gk_panels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "fixed", _as_columns(self.fixed))
        object.__setattr__(self, "random", _as_columns(self.random))
        object.__setattr__(self, "deriv_fixed", tuple(
            (c if isinstance(c, ColumnExpr) else ColumnExpr.parse(str(c)), int(i))
            for c, i in self.deriv_fixed))
        object.__setattr__(self, "deriv_random", tuple(
            (c if isinstance(c, ColumnExpr) else ColumnExpr.parse(str(c)), int(i))
            for c, i in self.deriv_random))
        self._validate()

    def _validate(self):
        topo = self.topology
        if not self.fixed:
            raise SpecError("fixed design must have at least one column")
        for _, i in self.deriv_fixed:
            if not 0 <= i < len(self.fixed):
                raise SpecError("deriv_fixed index %d out of range" % i)
        for _, i in self.deriv_random:
            if not 0 <= i < len(self.random):
                raise SpecError("deriv_random index %d out of range" % i)
        dep = dict(self.dependence)
        for hk in topo.allowed:
            form = dep.get(hk, "none")
            if form not in DEPENDENCE_FORMS:
                raise SpecError("unknown dependence form %r" % form)
            if form in ("slope", "both") and not (self.deriv_fixed or self.deriv_random):
                raise SpecError("dependence on the slope requires derivative "
                                "designs")
        for hk in dep:
            if hk not in topo.transition_index:
                raise SpecError("dependence names unknown transition %s" % (hk,))
        for term in self.gamma_terms:
            for hk in term.transitions:
                if hk not in topo.transition_index:
                    raise SpecError("covariate term on unknown transition %s"
                                    % (hk,))
        covered = {}
        for gi, grp in enumerate(self.baseline_groups):
            if not grp.transitions:
                raise SpecError("empty baseline group")
            if grp.reference not in grp.transitions:
                raise SpecError("group reference %s not a member" % (grp.reference,))
            for hk in grp.transitions:
                if hk not in topo.transition_index:
                    raise SpecError("baseline group on unknown transition %s"
                                    % (hk,))
                if hk in covered:
                    raise SpecError("transition %s in two baseline groups" % (hk,))
                covered[hk] = gi
        missing = [hk for hk in topo.allowed if hk not in covered]
        if self.baseline_groups and missing:
            raise SpecError("transitions without a baseline group: %s" % missing)

    # -- derived sizes ------------------------------------------------------

    @property
    def p(self) -> int:
        return len(self.fixed)

    @property
    def q(self) -> int:
        return len(self.random)

    @property
    def n_gamma(self) -> int:
        return len(self.gamma_terms)

    def dependence_form(self, hk) -> str:
        return dict(self.dependence).get(tuple(hk), "none")

    def group_index(self) -> dict:
        out = {}
        for gi, grp in enumerate(self.baseline_groups):
            for hk in grp.transitions:
                out[hk] = gi
        return out

    def zeta_transitions(self) -> tuple[tuple[int, int], ...]:
        """Transitions carrying a proportionality offset (non-reference
        members of their baseline group)."""
        out = []
        for grp in self.baseline_groups:
            for hk in grp.transitions:
                if hk != grp.reference:
                    out.append(hk)
        return tuple(out)

    def with_knots(self, knots_per_group: Sequence[Sequence[float]]) -> "ModelSpec":
        if len(knots_per_group) != len(self.baseline_groups):
            raise SpecError("one knot vector per baseline group required")
        groups = tuple(replace(g, knots=tuple(float(x) for x in kn))
                       for g, kn in zip(self.baseline_groups, knots_per_group))
        return replace(self, baseline_groups=groups)

    def bases(self) -> tuple[BSplineBasis, ...]:
        return tuple(g.basis() for g in self.baseline_groups)

    def required_covariates(self) -> set:
        need = set()
        for col in list(self.fixed) + list(self.random):
            need |= col.covariate_names(self.time_bases)
        for col, _ in list(self.deriv_fixed) + list(self.deriv_random):
            need |= col.covariate_names(self.time_bases)
        for term in self.gamma_terms:
            need.add(term.covariate)
        return need


# -- design evaluation -------------------------------------------------------

def eval_columns(cols, t, covs, bases):
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if not cols:
        return np.zeros((t.size, 0))
    return np.stack([c.eval(t, covs, bases) for c in cols], axis=1)


def eval_fixed_design(spec: ModelSpec, t, covs):
    return eval_columns(spec.fixed, t, covs, spec.time_bases)


def eval_random_design(spec: ModelSpec, t, covs):
    return eval_columns(spec.random, t, covs, spec.time_bases)


def _eval_deriv(cols_with_index, width, t, covs, bases):
    t = np.atleast_1d(np.asarray(t, dtype=float))
    out = np.zeros((t.size, width))
    for col, i in cols_with_index:
        out[:, i] += col.eval(t, covs, bases)
    return out


def eval_deriv_fixed(spec: ModelSpec, t, covs):
    """Time derivative of the fixed design, scattered to the beta indices."""
    return _eval_deriv(spec.deriv_fixed, spec.p, t, covs, spec.time_bases)


def eval_deriv_random(spec: ModelSpec, t, covs):
    return _eval_deriv(spec.deriv_random, spec.q, t, covs, spec.time_bases)


# ---------------------------------------------------------------------------
# Parameter packing
# ---------------------------------------------------------------------------

def d_cholesky_from_matrix(d: np.ndarray) -> np.ndarray:
    """Lower-triangular Cholesky entries (row-major) of a covariance matrix."""
    chol = np.linalg.cholesky(np.asarray(d, dtype=float))
    return chol[np.tril_indices(chol.shape[0])]


@dataclass(frozen=True)
class ParameterVector:
    """Structured model parameters with a flat, named packing.

    The random-effects covariance is carried as the row-major entries of its
    lower-triangular Cholesky factor so the packed vector is unconstrained;
    the residual scale is carried as ``log_sigma``.
    """

    beta: np.ndarray
    log_sigma: float
    d_cholesky: np.ndarray
    gamma: np.ndarray
    zeta: np.ndarray
    eta_level: np.ndarray
    eta_slope: np.ndarray
    spline_coefs: tuple[np.ndarray, ...]

    def __post_init__(self):
        object.__setattr__(self, "beta", _frozen(self.beta))
        object.__setattr__(self, "gamma", _frozen(self.gamma))
        object.__setattr__(self, "zeta", _frozen(self.zeta))
        object.__setattr__(self, "eta_level", _frozen(self.eta_level))
        object.__setattr__(self, "eta_slope", _frozen(self.eta_slope))
        object.__setattr__(self, "spline_coefs",
                           tuple(_frozen(c) for c in self.spline_coefs))

    @property
    def sigma(self) -> float:
        return float(np.exp(self.log_sigma))

    @property
    def q(self) -> int:
        n = self.d_cholesky.size
        return int(round((np.sqrt(8 * n + 1) - 1) / 2))

    def chol_matrix(self) -> np.ndarray:
        q = self.q
        chol = np.zeros((q, q))
        chol[np.tril_indices(q)] = self.d_cholesky
        return chol

    def d_matrix(self) -> np.ndarray:
        chol = self.chol_matrix()
        return chol @ chol.T


def _eta_slots(spec: ModelSpec):
    """(transition, kind) pairs carrying an association coefficient."""
    slots = []
    for hk in spec.topology.allowed:
        form = spec.dependence_form(hk)
        if form in ("level", "both"):
            slots.append((hk, "level"))
        if form in ("slope", "both"):
            slots.append((hk, "slope"))
    return slots


def parameter_names(spec: ModelSpec) -> list[str]:
    names = ["beta[%s]" % c.label for c in spec.fixed]
    names.append("log_sigma")
    q = spec.q
    for i, j in zip(*np.tril_indices(q)):
        names.append("d_chol[%d,%d]" % (i, j))
    names += ["gamma[%s]" % t.label for t in spec.gamma_terms]
    names += ["zeta[%d->%d]" % hk for hk in spec.zeta_transitions()]
    for hk, kind in _eta_slots(spec):
        names.append("eta_%s[%d->%d]" % (kind, hk[0], hk[1]))
    for gi, grp in enumerate(spec.baseline_groups):
        label = "+".join("%d->%d" % hk for hk in grp.transitions)
        names += ["spline[%s][%d]" % (label, j) for j in range(grp.n_coef)]
    return names


def packed_length(spec: ModelSpec) -> int:
    return (spec.p + 1 + spec.q * (spec.q + 1) // 2 + spec.n_gamma
            + len(spec.zeta_transitions()) + len(_eta_slots(spec))
            + sum(g.n_coef for g in spec.baseline_groups))


def pack(theta: ParameterVector, spec: ModelSpec) -> np.ndarray:
    """Flatten structured parameters into the canonical packed vector."""
    tindex = spec.topology.transition_index
    if theta.beta.size != spec.p:
        raise SpecError("beta has length %d, expected %d"
                        % (theta.beta.size, spec.p))
    if theta.d_cholesky.size != spec.q * (spec.q + 1) // 2:
        raise SpecError("d_cholesky has wrong length for q=%d" % spec.q)
    if theta.gamma.size != spec.n_gamma:
        raise SpecError("gamma has length %d, expected %d"
                        % (theta.gamma.size, spec.n_gamma))
    parts = [theta.beta, [theta.log_sigma], theta.d_cholesky, theta.gamma]
    zt = spec.zeta_transitions()
    if theta.zeta.size != len(zt):
        raise SpecError("zeta has length %d, expected %d"
                        % (theta.zeta.size, len(zt)))
    parts.append(theta.zeta)
    eta = []
    for hk, kind in _eta_slots(spec):
        arr = theta.eta_level if kind == "level" else theta.eta_slope
        eta.append(arr[tindex[hk] - 1])
    parts.append(eta)
    if len(theta.spline_coefs) != len(spec.baseline_groups):
        raise SpecError("expected %d spline coefficient blocks"
                        % len(spec.baseline_groups))
    for grp, coefs in zip(spec.baseline_groups, theta.spline_coefs):
        if coefs.size != grp.n_coef:
            raise SpecError("spline block has length %d, expected %d"
                            % (coefs.size, grp.n_coef))
        parts.append(coefs)
    return np.concatenate([np.asarray(p, dtype=float).ravel() for p in parts])


def unpack(vector: np.ndarray, spec: ModelSpec) -> ParameterVector:
    """Rebuild structured parameters from a packed vector."""
    vector = np.asarray(vector, dtype=float).ravel()
    if vector.size != packed_length(spec):
        raise SpecError("packed vector has length %d, expected %d"
                        % (vector.size, packed_length(spec)))
    tindex = spec.topology.transition_index
    n_trans = spec.topology.n_transitions
    pos = 0

    def take(n):
        nonlocal pos
        out = vector[pos:pos + n]
        pos += n
        return out

    beta = take(spec.p)
    log_sigma = float(take(1)[0])
    d_chol = take(spec.q * (spec.q + 1) // 2)
    gamma = take(spec.n_gamma)
    zeta = take(len(spec.zeta_transitions()))
    eta_level = np.zeros(n_trans)
    eta_slope = np.zeros(n_trans)
    for hk, kind in _eta_slots(spec):
        val = float(take(1)[0])
        if kind == "level":
            eta_level[tindex[hk] - 1] = val
        else:
            eta_slope[tindex[hk] - 1] = val
    coefs = tuple(take(grp.n_coef) for grp in spec.baseline_groups)
    return ParameterVector(beta, log_sigma, d_chol, gamma, zeta,
                           eta_level, eta_slope, coefs)


def zeta_by_transition(theta: ParameterVector, spec: ModelSpec) -> np.ndarray:
    """Per-transition log-proportionality offsets (zero on references)."""
    out = np.zeros(spec.topology.n_transitions)
    for hk, z in zip(spec.zeta_transitions(), theta.zeta):
        out[spec.topology.transition_index[hk] - 1] = z
    return out
