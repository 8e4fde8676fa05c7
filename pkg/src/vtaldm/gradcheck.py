"""Central-difference audit of analytic gradients."""

from __future__ import annotations

import numpy as np

ZERO_GRAD = 1e-10


def relative_error(analytic: float, numeric: float) -> float:
    denom = max(abs(analytic), abs(numeric))
    if denom < ZERO_GRAD:
        return abs(analytic - numeric)
    return abs(analytic - numeric) / denom


def finite_difference_check(values: dict, grads: dict, loss_at, groups: dict, h: float = 1e-4,
                            n_probes: int = 20, seed: int = 0) -> dict:
    """Probe ``n_probes`` random scalars per group.

    ``values`` maps parameter name to its array, ``grads`` to the analytic
    gradient, and ``loss_at(name, index, value)`` evaluates the loss with one
    scalar replaced (restoring it afterwards).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    rng = np.random.default_rng(seed)
    report = {"h": h, "n_probes": n_probes, "max_rel_error": 0.0, "worst": None, "groups": {}}
    for group, names in groups.items():
        sizes = np.array([values[n].size for n in names])
        total = int(sizes.sum())
        picks = rng.choice(total, size=min(n_probes, total), replace=False)
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        worst = 0.0
        for flat in np.sort(picks):
            k = int(np.searchsorted(offsets, flat, side="right") - 1)
            name = names[k]
            idx = np.unravel_index(int(flat - offsets[k]), values[name].shape)
            x = float(values[name][idx])
            numeric = (loss_at(name, idx, x + h) - loss_at(name, idx, x - h)) / (2 * h)
            analytic = float(grads[name][idx])
            err = relative_error(analytic, numeric)
            worst = max(worst, err)
            if err >= report["max_rel_error"]:
                report["max_rel_error"] = err
                report["worst"] = {"param": name, "index": [int(i) for i in idx],
                                   "analytic": analytic, "numeric": numeric}
        report["groups"][group] = worst
    return report
