"""Unconditional stacked three-LSTM fusion model in plain numpy (float64).

Shares the parameter layout of :class:`~hcms.model.HcmsParams` but none of
its code: used as the oracle for the all-gates-on equivalence check.
"""

import numpy as np

from .dataio import FeatureSequence


def _sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def _lstm(w_ih, w_hh, b, x, h, c):
    H = h.shape[0]
    z = w_ih @ x + w_hh @ h + b
    i, f, g, o = _sig(z[:H]), _sig(z[H : 2 * H]), np.tanh(z[2 * H : 3 * H]), _sig(z[3 * H :])
    c = f * c + i * g
    return o * np.tanh(c), c


def stacked_forward(arrays: dict[str, np.ndarray], order, seq: FeatureSequence) -> np.ndarray:
    """Class probabilities after running all three tiers at every step."""
    P = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}
    tiers = ("base", "mid", "top")
    states = [
        (np.zeros(P[f"lstm.{t}.w_hh"].shape[1]), np.zeros(P[f"lstm.{t}.w_hh"].shape[1])) for t in tiers
    ]
    for step in range(seq.T):
        xs = []
        for k, t in enumerate(tiers):
            m = order[k]
            raw = np.asarray(seq.stream(m)[step], dtype=np.float64)
            xs.append(P[f"proj.{m}.weight"] @ raw + P[f"proj.{m}.bias"])
            h, c = states[k]
            states[k] = _lstm(P[f"lstm.{t}.w_ih"], P[f"lstm.{t}.w_hh"], P[f"lstm.{t}.bias"], np.concatenate(xs), h, c)
    logits = P["classifier.weight"] @ states[2][0] + P["classifier.bias"]
    e = np.exp(logits - logits.max())
    return e / e.sum()
