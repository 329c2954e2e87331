"""Tests for the transition-at-risk expansion."""

import numpy as np
import pytest

from msjoint.domain import BaselineGroup, DataError, GammaTerm, ModelSpec, validate_dataset
from msjoint.msprep import expand_covariates, expand_transitions, transition_count_matrix

from conftest import make_history, make_records, tiny_dataset


def one_subject_dataset(topo, history, times=(0.0,), **covs):
    recs = make_records(history.id, times, **covs)
    return validate_dataset(recs, [history], topo)


class TestExpandTransitions:
    def test_censored_in_initial_state(self, topo3):
        ds = one_subject_dataset(topo3, make_history("c", [], censor=5.0))
        rows = expand_transitions(ds)
        assert [(r.from_state, r.to_state, r.t_start, r.t_stop, r.status)
                for r in rows] == [(0, 1, 0.0, 5.0, 0), (0, 2, 0.0, 5.0, 0)]

    def test_two_transition_path(self, topo3):
        ds = one_subject_dataset(topo3, make_history("p", [(2.0, 1), (4.0, 2)]))
        rows = expand_transitions(ds)
        assert [(r.from_state, r.to_state, r.t_start, r.t_stop, r.status)
                for r in rows] == [(0, 1, 0.0, 2.0, 1), (0, 2, 0.0, 2.0, 0),
                                   (1, 2, 2.0, 4.0, 1)]

    def test_row_count_equals_out_degree_sum(self, topo3):
        ds = tiny_dataset(topo3)
        rows = expand_transitions(ds)
        expected = 0
        for s in ds.subjects:
            for state, *_ in s.history.sojourns():
                expected += len(topo3.out_transitions(state))
        assert len(rows) == expected

    def test_sojourns_tile_follow_up(self, topo3):
        ds = tiny_dataset(topo3)
        for s in ds.subjects:
            spans = s.history.sojourns()
            assert spans[0][1] == s.history.t_entry
            assert spans[-1][2] == s.history.times[-1]
            for (a, b) in zip(spans[:-1], spans[1:]):
                assert a[2] == b[1]

    def test_deterministic(self, topo3):
        ds = tiny_dataset(topo3)
        assert expand_transitions(ds) == expand_transitions(ds)

    def test_status_sums_match_count_matrix(self, topo3):
        ds = tiny_dataset(topo3)
        rows = expand_transitions(ds)
        counts = transition_count_matrix(ds)
        for (h, k), idx in topo3.transition_index.items():
            assert counts[h, k] == sum(r.status for r in rows if r.trans == idx)

    def test_zero_length_sojourn_rejected(self, topo3):
        hist = make_history("z", [(2.0, 1)], censor=5.0)
        object.__setattr__(hist, "times", np.array([2.0, 2.0]))
        ds = tiny_dataset(topo3)
        bad = type(ds.subjects[0])("z", {"X": 0.0}, np.array([0.0]),
                                   np.array([0.0]), hist)
        ds2 = type(ds)(topo3, (bad,), ("X",))
        with pytest.raises(DataError, match="zero-length"):
            expand_transitions(ds2)


class TestExpandCovariates:
    def make_spec(self, topo, terms):
        return ModelSpec(topology=topo, fixed=("1",), random=("1",),
                         gamma_terms=terms,
                         baseline_groups=tuple(
                             BaselineGroup((hk,), hk) for hk in topo.allowed))

    def test_single_transition_column(self, topo3):
        ds = one_subject_dataset(topo3, make_history("a", [(2.0, 1)], censor=5.0),
                                 X=2.0)
        rows = expand_transitions(ds)
        spec = self.make_spec(topo3, (GammaTerm("X", ((0, 1),)),))
        mat, labels = expand_covariates(rows, spec)
        assert labels == ["X:0->1"]
        by_trans = {r.trans: v for r, v in zip(rows, mat[:, 0])}
        assert by_trans[1] == 2.0 and by_trans[2] == 0.0

    def test_shared_column(self, topo3):
        ds = one_subject_dataset(topo3, make_history("a", [(2.0, 1), (4.0, 2)]),
                                 X=1.5)
        rows = expand_transitions(ds)
        spec = self.make_spec(topo3, (GammaTerm("X", ((0, 2), (1, 2))),))
        mat, _ = expand_covariates(rows, spec)
        vals = {r.trans: v for r, v in zip(rows, mat[:, 0])}
        assert vals == {1: 0.0, 2: 1.5, 3: 1.5}

    def test_empty_sharing_map(self, topo3):
        ds = tiny_dataset(topo3)
        rows = expand_transitions(ds)
        mat, labels = expand_covariates(rows, self.make_spec(topo3, ()))
        assert mat.shape == (len(rows), 0) and labels == []

    def test_missing_covariate(self, topo3):
        ds = one_subject_dataset(topo3, make_history("a", [], censor=1.0))
        rows = expand_transitions(ds)
        spec = self.make_spec(topo3, (GammaTerm("W", ((0, 1),)),))
        with pytest.raises(DataError, match="missing"):
            expand_covariates(rows, spec)
