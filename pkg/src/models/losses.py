"""
Future state alignment (Huber + cosine) and the total training objective
"""

import logging
from dataclasses import dataclass

from ..autograd import functional as F
from ..autograd.tensor import Tensor, as_tensor
from ..core.config import HUBER_DELTA
from ..core.errors import ConfigurationError, DimensionError

logger = logging.getLogger(__name__)


@dataclass
class AlignmentPair:
    """Synthesised F2D and frozen-encoder G2D of one horizon, both [M, C, h, w]."""

    predicted: Tensor
    observed: Tensor
    horizon: float

    def __post_init__(self):
        self.predicted = as_tensor(self.predicted)
        # The observed side never receives gradient
        self.observed = as_tensor(self.observed).detach()
        if self.predicted.shape != self.observed.shape:
            raise DimensionError("aligned features must share a shape", self.predicted.shape, self.observed.shape)


def _horizon_mean(terms):
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total * (1.0 / len(terms))


def huber_alignment(pairs, delta=HUBER_DELTA, granularity="location"):
    """Huber penalty of feature-difference norms, averaged over locations, cameras and horizons."""
    if not pairs:
        raise ConfigurationError("alignment needs at least one horizon")
    terms = []
    for pair in pairs:
        diff = pair.predicted - pair.observed
        if granularity == "location":
            terms.append(F.huber_norm(diff, delta, axis=1).mean())
        elif granularity == "tensor":
            terms.append(F.huber_norm(diff.reshape(1, -1), delta, axis=-1).mean())
        else:
            raise ConfigurationError(f"unknown Huber granularity {granularity!r}")
    return _horizon_mean(terms)


def cosine_alignment(pairs):
    """Mean (1 - cos) between predicted and observed channel vectors."""
    if not pairs:
        raise ConfigurationError("alignment needs at least one horizon")
    terms = [(1.0 - F.cosine_similarity(pair.predicted, pair.observed, axis=1)).mean() for pair in pairs]
    return _horizon_mean(terms)


def fsa_loss(pairs, delta=HUBER_DELTA, use_huber=True, use_cosine=True, granularity="location"):
    """(total, huber, cosine); disabled terms are reported as None."""
    huber = huber_alignment(pairs, delta, granularity) if use_huber else None
    cosine = cosine_alignment(pairs) if use_cosine else None
    if huber is None and cosine is None:
        raise ConfigurationError("FSA loss needs the Huber or the cosine term")
    if huber is None:
        return cosine, None, cosine
    if cosine is None:
        return huber, huber, None
    return huber + cosine, huber, cosine


def total_loss(task, fsa, alpha):
    """L = L_task + alpha * L_FSA, skipping absent terms."""
    if task is None and fsa is None:
        raise ConfigurationError("no loss term is enabled")
    if fsa is None:
        return task
    if task is None:
        return fsa * alpha
    return task + fsa * alpha
