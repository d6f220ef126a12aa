"""Input checks shared by the estimators."""
import numpy as np
from sklearn.utils.validation import check_array, check_consistent_length

N_TRANSITION_COLS = 15


def check_transitions(X, y=None):
    """Validate ``[s_h, a_h]`` rows (and optional ``(n, 2)`` next positions)."""
    X = check_array(X, dtype=np.float64, ensure_2d=True)
    if X.shape[1] != N_TRANSITION_COLS:
        raise ValueError(f"transition rows need {N_TRANSITION_COLS} columns, got {X.shape[1]}")
    if y is None:
        return X
    y = check_array(y, dtype=np.float64, ensure_2d=True)
    if y.shape[1] != 2:
        raise ValueError(f"next-position targets need 2 columns, got {y.shape[1]}")
    check_consistent_length(X, y)
    return X, y


def check_states(S, n_cols=12):
    S = check_array(S, dtype=np.float64, ensure_2d=True)
    if S.shape[1] != n_cols:
        raise ValueError(f"expected {n_cols} state columns, got {S.shape[1]}")
    return S


def check_features(X, n_features):
    X = check_array(X, dtype=np.float64, ensure_2d=True)
    if X.shape[1] != n_features:
        raise ValueError(f"X has {X.shape[1]} features, expected {n_features}")
    return X
