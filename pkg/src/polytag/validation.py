"""Input checks shared by the estimator facade."""

from __future__ import annotations

from sklearn.exceptions import NotFittedError


def check_token_sequences(X):
    """Validate and normalize X into a list of token lists."""
    if isinstance(X, str):
        raise ValueError("X must be a sequence of token sequences, not a string")
    X = list(X)
    if not X:
        raise ValueError("X is empty")
    out = []
    for i, sent in enumerate(X):
        if isinstance(sent, str):
            raise ValueError(f"X[{i}] must be a sequence of tokens, not a string")
        sent = list(sent)
        if not sent:
            raise ValueError(f"X[{i}] is empty")
        for j, tok in enumerate(sent):
            if not isinstance(tok, str):
                raise ValueError(f"X[{i}][{j}] must be a string, got {type(tok).__name__}")
        out.append(sent)
    return out


def check_label_sequences(X, y):
    """y must align with X sentence by sentence and token by token."""
    if y is None:
        raise ValueError("y is required")
    y = list(y)
    if len(y) != len(X):
        raise ValueError(f"X has {len(X)} sentences but y has {len(y)}")
    out = []
    for i, labels in enumerate(y):
        labels = list(labels)
        if len(labels) != len(X[i]):
            raise ValueError(
                f"sentence {i}: {len(X[i])} tokens but {len(labels)} labels"
            )
        for tag in labels:
            if not isinstance(tag, str):
                raise ValueError(f"y[{i}] must contain string tags")
        out.append(labels)
    return out


def check_languages(X, languages):
    """One language code per sentence; a single code broadcasts."""
    if languages is None:
        raise ValueError("languages is required: one code per sentence, or one code")
    if isinstance(languages, str):
        return [languages] * len(X)
    languages = list(languages)
    if len(languages) != len(X):
        raise ValueError(f"X has {len(X)} sentences but languages has {len(languages)}")
    for code in languages:
        if not isinstance(code, str) or not code:
            raise ValueError("language codes must be non-empty strings")
    return languages


def check_is_fitted(estimator, attributes=("model_",)):
    missing = [a for a in attributes if not hasattr(estimator, a)]
    if missing:
        raise NotFittedError(
            f"This {type(estimator).__name__} instance is not fitted yet. "
            "Call 'fit' with appropriate arguments before using this estimator."
        )
