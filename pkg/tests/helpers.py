"""Fixtures-as-functions shared by the unit and acceptance tests."""

import contextlib

import numpy as np

from pcql.data import RawSurgery

CLIN = {"age": 50.0, "sex": 1, "height": 170.0, "weight": 70.0, "bmi": 24.2215, "asa": 2}


def surgery(n=40, sid="S0", maps=None, doses=None, **kw):
    t = np.arange(n, dtype=float)
    m = np.full(n, 90.0) if maps is None else np.asarray(maps, float)
    p = np.full(n, 4.0) if doses is None else np.asarray(doses, float)
    p = p.copy()
    p[-1] = np.nan
    return RawSurgery(sid, t, m + 30, m - 15, m, p, np.full(n, 0.1), clinical=dict(CLIN), **kw)


@contextlib.contextmanager
def replayed_targets(*nets):
    """Make ConstraintNet.predict replay its first-call outputs.

    Detached targets then stay fixed while finite differences perturb the
    parameters, matching what backprop differentiates.
    """
    tape, state = [], {"i": 0, "record": True}
    originals = [(n, n.predict) for n in nets]

    def wrap(fn):
        def replay(x, y):
            if state["record"]:
                tape.append(fn(x, y))
                return tape[-1]
            state["i"] += 1
            return tape[state["i"] - 1]

        return replay

    for n, fn in originals:
        n.predict = wrap(fn)

    def run(loss_fn):
        def go():
            state["i"] = 0
            try:
                return loss_fn()
            finally:
                state["record"] = False

        return go

    try:
        yield run
    finally:
        for n, _ in originals:
            del n.predict


ACCEPTANCE_LINES: list = []


def record(criterion: int, label: str, ok: bool, detail: str) -> bool:
    """Store one PASS/FAIL line for the end-of-session acceptance summary."""
    line = f"criterion {criterion:>2} {'PASS' if ok else 'FAIL'}  {label}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok
