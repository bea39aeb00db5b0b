"""Span-answer metrics: exact match and token-bag F1 with the usual
answer normalization (lowercase, strip punctuation and articles,
collapse whitespace)."""

from __future__ import annotations

import re
import string
from collections import Counter
from typing import Iterable

from .errors import DataError

_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = set(string.punctuation)


def normalize_answer(text: str) -> str:
    text = text.lower()
    text = "".join(ch for ch in text if ch not in _PUNCT)
    text = _ARTICLES.sub(" ", text)
    return " ".join(text.split())


def exact_match(prediction: str, gold: str) -> float:
    return float(normalize_answer(prediction) == normalize_answer(gold))


def f1_score(prediction: str, gold: str) -> float:
    """Harmonic mean of token precision/recall over normalized bags.

    Both answers empty counts as a correct no-answer (1.0); exactly one
    empty is a miss (0.0).
    """
    pred_tokens = normalize_answer(prediction).split()
    gold_tokens = normalize_answer(gold).split()
    if not pred_tokens or not gold_tokens:
        return float(pred_tokens == gold_tokens)
    common = Counter(pred_tokens) & Counter(gold_tokens)
    overlap = sum(common.values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred_tokens)
    recall = overlap / len(gold_tokens)
    return 2.0 * precision * recall / (precision + recall)


def evaluate_pairs(pairs: Iterable[tuple[str, str]]) -> dict[str, float]:
    """Macro-averaged EM and F1 over (prediction, gold) pairs."""
    pairs = list(pairs)
    if not pairs:
        raise DataError("cannot evaluate an empty dataset")
    em_total = 0.0
    f1_total = 0.0
    for prediction, gold in pairs:
        em_total += exact_match(prediction, gold)
        f1_total += f1_score(prediction, gold)
    return {"em": em_total / len(pairs), "f1": f1_total / len(pairs)}
