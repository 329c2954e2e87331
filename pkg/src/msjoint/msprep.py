"""Expansion of subject histories into one row per transition at risk, and
of covariates into per-transition design columns."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .domain import DataError, JointDataset, ModelSpec, TransitionTopology


@dataclass(frozen=True)
class TransitionRow:
    """One transition at risk during one sojourn of one subject."""

    id: str
    trans: int             # transition index, 1..K
    from_state: int
    to_state: int
    t_start: float
    t_stop: float
    status: int            # 1 iff this transition occurred at t_stop
    covariates: Mapping[str, float]


def expand_transitions(dataset: JointDataset,
                       topology: TransitionTopology | None = None
                       ) -> list[TransitionRow]:
    """One row per allowed transition out of each sojourn's state.

    All rows of a sojourn share (t_start, t_stop); status is 1 exactly on
    the observed transition.  Rows are ordered by (subject, t_start, trans).
    """
    topo = topology or dataset.topology
    rows: list[TransitionRow] = []
    for subject in dataset.subjects:
        per_subject = []
        for state, t0, t1, to_state in subject.history.sojourns():
            if t1 <= t0:
                raise DataError("subject %s: zero-length sojourn at t=%g"
                                % (subject.id, t0))
            for k, trans in topo.out_transitions(state):
                per_subject.append(TransitionRow(
                    subject.id, trans, state, k, t0, t1,
                    int(to_state == k), subject.covariates))
        per_subject.sort(key=lambda r: (r.t_start, r.trans))
        rows.extend(per_subject)
    return rows


def expand_covariates(rows: Sequence[TransitionRow], spec: ModelSpec):
    """Per-transition covariate columns implementing shared coefficients.

    Each :class:`~msjoint.domain.GammaTerm` becomes one column equal to the
    covariate value on rows whose transition belongs to the term and zero
    elsewhere.  Returns ``(matrix, column_labels)``.
    """
    tindex = spec.topology.transition_index
    out = np.zeros((len(rows), spec.n_gamma))
    for j, term in enumerate(spec.gamma_terms):
        members = {tindex[hk] for hk in term.transitions}
        for i, row in enumerate(rows):
            if row.trans in members:
                if term.covariate not in row.covariates:
                    raise DataError("covariate %r missing on a row of subject %s"
                                    % (term.covariate, row.id))
                out[i, j] = float(row.covariates[term.covariate])
    labels = [t.label for t in spec.gamma_terms]
    return out, labels


def transition_count_matrix(dataset: JointDataset) -> np.ndarray:
    """Observed direct-transition counts; the diagonal counts subjects whose
    follow-up ended in that state, so row h sums to the number of subjects
    who ever occupied state h."""
    n = dataset.topology.n_states
    out = np.zeros((n, n), dtype=int)
    for subject in dataset.subjects:
        hist = subject.history
        prev = hist.initial_state
        for r in range(hist.times.size):
            cur = int(hist.states[r])
            if hist.delta[r]:
                out[prev, cur] += 1
            prev = cur
        out[prev, prev] += 1
    return out
