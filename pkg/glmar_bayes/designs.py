"""Event-related design matrices for the preset scenarios.

Four conditions (U1, U2, F1, F2) with deterministic onsets are convolved with
the canonical double-gamma HRF, optionally with its temporal and dispersion
derivatives, and a constant column is appended last.
"""

import numpy as np
from scipy.stats import gamma

CONDITIONS = ("U1", "U2", "F1", "F2")
SCANS = 351
TR = 2.0
MICROTIME = 16
# onsets every SOA seconds, conditions cycled in this order
SOA = 6.5
FIRST_ONSET = 10.0
ORDER = (0, 2, 1, 3, 2, 0, 3, 1)


def canonical_hrf(dt, length=32.0, dispersion=1.0):
    """Gamma response with mode at 5 s, undershoot at 15 s with 1/6 amplitude; unit peak.

    A single event therefore moves its regressor by about 1, on the scale of the
    constant column.
    """
    t = np.arange(0.0, length, dt)
    h = (gamma.pdf(t, 6.0 / dispersion, scale=dispersion)
         - gamma.pdf(t, 16.0 / dispersion, scale=dispersion) / 6.0)
    return h / h.max()


def hrf_basis(dt, derivatives=False):
    hrf = canonical_hrf(dt)
    if not derivatives:
        return [hrf]
    shift = int(round(1.0 / dt))
    temporal = hrf - np.concatenate([np.zeros(shift), hrf[:-shift]])
    dispersion = (hrf - canonical_hrf(dt, dispersion=1.01)) / 0.01
    return [hrf, temporal, dispersion]


def event_onsets(scans=SCANS, tr=TR):
    """Onset times (seconds) per condition."""
    times = np.arange(FIRST_ONSET, scans * tr - 20.0, SOA)
    labels = np.array([ORDER[i % len(ORDER)] for i in range(times.size)])
    return {name: times[labels == c] for c, name in enumerate(CONDITIONS)}


def design_matrix(derivatives=False, scans=SCANS, tr=TR):
    """Return (Xfull, column names); K = 5 without derivatives, 13 with."""
    dt = tr / MICROTIME
    fine = scans * MICROTIME
    basis = hrf_basis(dt, derivatives)
    suffixes = ("", "_dt", "_disp")[:len(basis)]
    columns, names = [], []
    for name, onsets in event_onsets(scans, tr).items():
        stick = np.zeros(fine)
        stick[np.round(onsets / dt).astype(int)] = 1.0
        for kernel, suffix in zip(basis, suffixes):
            signal = np.convolve(stick, kernel)[:fine]
            columns.append(signal[::MICROTIME])
            names.append(name + suffix)
    columns.append(np.ones(scans))
    names.append("constant")
    return np.column_stack(columns), names
