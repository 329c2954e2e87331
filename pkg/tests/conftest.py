"""Shared fixtures: the 3-state validation topology and small datasets."""

import numpy as np
import pytest

from msjoint.domain import (
    LongitudinalRecord,
    SubjectHistory,
    TransitionTopology,
    validate_dataset,
)


@pytest.fixture
def topo3():
    """Three states, transitions 0->1, 0->2, 1->2 (state 2 absorbing)."""
    return TransitionTopology(3, [(0, 1), (0, 2), (1, 2)])


def make_history(sid, moves, censor=None, initial=0, entry=0.0):
    """Build a SubjectHistory from (time, new_state) moves plus a censoring
    time for subjects ending in a non-absorbing state."""
    times = [t for t, _ in moves]
    states = [s for _, s in moves]
    delta = [1] * len(moves)
    if censor is not None:
        times.append(censor)
        states.append(states[-1] if states else initial)
        delta.append(0)
    last = censor if censor is not None else (times[-1] if times else None)
    return SubjectHistory(sid, entry, initial, np.array(times),
                          np.array(states), np.array(delta), float(last))


def make_records(sid, times, ys=None, **covs):
    ys = ys if ys is not None else [0.0] * len(times)
    return [LongitudinalRecord(sid, float(t), float(y), dict(covs))
            for t, y in zip(times, ys)]


def tiny_dataset(topo):
    """Two subjects: one 0->1 then censored, one direct 0->2."""
    histories = [
        make_history("a", [(2.0, 1)], censor=5.0),
        make_history("b", [(3.0, 2)]),
    ]
    records = make_records("a", [0.0, 1.0, 2.0], [1.0, 1.2, 0.9], X=2.0) + \
        make_records("b", [0.0, 2.5], [0.4, 0.6], X=-1.0)
    return validate_dataset(records, histories, topo)
