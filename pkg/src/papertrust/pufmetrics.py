"""PUF quality metrics, similarity scores and equal error rate."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from itertools import combinations
from typing import List, Sequence

import numpy as np

from .errors import (EmptyScores, IndexOutOfRange, InsufficientPopulation, LengthMismatch,
                     ZeroVariance)
from .features import Pipeline, PufResponse, QuantizerConfig
from .optics import AcquisitionPlan, acquire
from .surface import SurfaceParams, degrade_surface, generate_surface


def hamming_distance(a: PufResponse, b: PufResponse) -> int:
    if a.length != b.length:
        raise LengthMismatch(f"responses differ in length ({a.length} vs {b.length})")
    return int(np.count_nonzero(a.bits != b.bits))


def fractional_hd(a: PufResponse, b: PufResponse) -> float:
    return hamming_distance(a, b) / a.length


@dataclass
class EvaluationBatch:
    """K surfaces evaluated T times each, plus one ideal response per surface."""
    responses: List[List[PufResponse]]  # [k][t]
    ideal: List[PufResponse]

    def __post_init__(self):
        if not self.responses or not self.responses[0]:
            raise InsufficientPopulation("batch needs at least one surface and one trial")
        t = len(self.responses[0])
        if any(len(row) != t for row in self.responses):
            raise IndexOutOfRange("every surface needs the same number of trials")
        if len(self.ideal) != len(self.responses):
            raise IndexOutOfRange("one ideal response per surface is required")
        lengths = {r.length for row in self.responses for r in row} | {r.length for r in self.ideal}
        if len(lengths) != 1:
            raise LengthMismatch("all responses in a batch must share L")

    @property
    def K(self) -> int:
        return len(self.responses)

    @property
    def T(self) -> int:
        return len(self.responses[0])

    @property
    def L(self) -> int:
        return self.ideal[0].length


def _check_k(batch, k):
    if not 0 <= k < batch.K:
        raise IndexOutOfRange(f"surface index {k} outside [0, {batch.K})")


def _check_t(batch, t):
    if not 0 <= t < batch.T:
        raise IndexOutOfRange(f"trial index {t} outside [0, {batch.T})")


def robustness(batch: EvaluationBatch, k: int) -> float:
    _check_k(batch, k)
    ideal = batch.ideal[k]
    total = sum(hamming_distance(ideal, r) for r in batch.responses[k])
    return 1.0 - total / (batch.T * batch.L)


def uniqueness(batch: EvaluationBatch, t: int = 0) -> float:
    """Mean pairwise fractional HD across surfaces at a fixed trial index."""
    if batch.K < 2:
        raise InsufficientPopulation("uniqueness needs at least two surfaces")
    _check_t(batch, t)
    bits = np.stack([row[t].bits for row in batch.responses]).astype(np.int64)
    # pairwise HD = ones_i*(1-ones_j) + (1-ones_i)*ones_j summed over bits
    ones = bits @ bits.T
    pop = bits.sum(axis=1)
    hd = pop[:, None] + pop[None, :] - 2 * ones
    iu = np.triu_indices(batch.K, k=1)
    return float(hd[iu].mean() / batch.L)


def mean_uniqueness(batch: EvaluationBatch) -> float:
    """Uniqueness averaged over every trial index (extension of the fixed-t form)."""
    return float(np.mean([uniqueness(batch, t) for t in range(batch.T)]))


def uniformity(batch: EvaluationBatch, k: int, t: int) -> float:
    _check_k(batch, k)
    _check_t(batch, t)
    r = batch.responses[k][t]
    return float(r.bits.sum()) / r.length


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size:
        raise LengthMismatch("pearson needs equal-length vectors")
    if a.size < 2:
        raise ZeroVariance("pearson needs at least two samples")
    da = a - a.mean()
    db = b - b.mean()
    sa = np.sqrt(np.dot(da, da))
    sb = np.sqrt(np.dot(db, db))
    if sa == 0 or sb == 0:
        raise ZeroVariance("pearson is undefined for a constant vector")
    return float(np.clip(np.dot(da, db) / (sa * sb), -1.0, 1.0))


# error rates --------------------------------------------------------------------

@dataclass
class ScoreReport:
    genuine_scores: List[float]
    impostor_scores: List[float]
    eer: float
    threshold_at_eer: float
    polarity: str = "distance"

    def summary(self) -> dict:
        return {
            "eer": self.eer,
            "threshold": self.threshold_at_eer,
            "n_genuine": len(self.genuine_scores),
            "n_impostor": len(self.impostor_scores),
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["score", "label"])
        for s in self.genuine_scores:
            w.writerow([repr(float(s)), "genuine"])
        for s in self.impostor_scores:
            w.writerow([repr(float(s)), "impostor"])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(self.summary(), sort_keys=True, indent=2)

    def separation(self) -> float:
        """Gap between class means in units of the pooled standard deviation."""
        g = np.asarray(self.genuine_scores, dtype=float)
        i = np.asarray(self.impostor_scores, dtype=float)
        pooled = np.sqrt((g.var(ddof=1) + i.var(ddof=1)) / 2)
        gap = abs(i.mean() - g.mean())
        return float("inf") if pooled == 0 else float(gap / pooled)


def error_rates(genuine, impostor, thresholds, polarity="distance"):
    """FAR and FRR at each threshold; distance scores accept when score <= t."""
    g = np.sort(np.asarray(genuine, dtype=float))
    i = np.sort(np.asarray(impostor, dtype=float))
    thresholds = np.asarray(thresholds, dtype=float)
    if polarity == "distance":
        far = np.searchsorted(i, thresholds, side="right") / i.size
        frr = 1.0 - np.searchsorted(g, thresholds, side="right") / g.size
    elif polarity == "similarity":
        far = 1.0 - np.searchsorted(i, thresholds, side="left") / i.size
        frr = np.searchsorted(g, thresholds, side="left") / g.size
    else:
        raise ValueError(f"unknown polarity {polarity!r}")
    return far, frr


def eer(genuine: Sequence[float], impostor: Sequence[float], polarity: str = "distance") -> ScoreReport:
    """Equal error rate by an exhaustive sweep over the pooled scores.

    The FAR - FRR curve is evaluated at every distinct score; the crossing is
    located between adjacent thresholds and the rates are interpolated
    linearly there.
    """
    if len(genuine) == 0 or len(impostor) == 0:
        raise EmptyScores("both genuine and impostor scores are required")
    pooled = np.unique(np.concatenate([np.asarray(genuine, float), np.asarray(impostor, float)]))
    if polarity == "distance":
        thresholds = np.concatenate([[-np.inf], pooled])
    else:
        thresholds = np.concatenate([pooled, [np.inf]])
    far, frr = error_rates(genuine, impostor, thresholds, polarity)
    diff = far - frr
    # diff is monotone along the sweep: increasing for distance, decreasing for similarity
    if polarity == "similarity":
        diff = -diff
    j = int(np.searchsorted(diff, 0.0, side="left"))
    if j < diff.size and diff[j] == 0:
        rate, thr = far[j], thresholds[j]
        # a flat stretch of exact equality: take its midpoint threshold when finite
        k = j
        while k + 1 < diff.size and diff[k + 1] == 0:
            k += 1
        if k != j and np.isfinite(thresholds[j]) and np.isfinite(thresholds[k]):
            thr = 0.5 * (thresholds[j] + thresholds[k])
    else:
        lo, hi = j - 1, j
        w = diff[lo] / (diff[lo] - diff[hi])
        rate = far[lo] + w * (far[hi] - far[lo])
        t_lo, t_hi = thresholds[lo], thresholds[hi]
        if not np.isfinite(t_lo):
            thr = t_hi
        elif not np.isfinite(t_hi):
            thr = t_lo
        else:
            thr = t_lo + w * (t_hi - t_lo)
    return ScoreReport(list(map(float, genuine)), list(map(float, impostor)),
                       float(rate), float(thr), polarity)


def genuine_impostor_scores(batch: EvaluationBatch):
    """Fractional HD scores: genuine = trial vs own ideal, impostor = ideal vs other trials."""
    genuine = [fractional_hd(batch.ideal[k], r) for k in range(batch.K) for r in batch.responses[k]]
    impostor = [
        fractional_hd(batch.ideal[k], batch.responses[j][t])
        for k, j in combinations(range(batch.K), 2)
        for t in range(batch.T)
    ]
    return genuine, impostor


# simulated populations ------------------------------------------------------------

def simulate_batch(K: int, T: int, noise: float, size: int = 64, correlation_length: float = 3.0,
                   slope_scale: float = 0.2, quantizer=None, mode: str = "scanner",
                   seed: int = 0, degradation=None) -> EvaluationBatch:
    """Run K synthetic surfaces through acquisition and feature extraction.

    The ideal response of each surface comes from a noiseless, aligned
    acquisition of the pristine surface; the T trials use ``noise`` and, when
    given, a degradation applied to the surface first.
    """
    pipe = Pipeline(quantizer or QuantizerConfig())
    rng = np.random.default_rng(seed)
    responses, ideal = [], []
    for k in range(K):
        s_surf, s_deg, s_acq = (int(x) for x in rng.integers(0, 2**62, 3))
        nm = generate_surface(SurfaceParams(size, size, correlation_length, slope_scale, s_surf))
        ideal.append(pipe.response(acquire(nm, AcquisitionPlan(mode=mode)), origin=(k, -1)))
        probe = nm if degradation is None else degrade_surface(nm, degradation(s_deg))
        trial_seeds = np.random.default_rng(s_acq).integers(0, 2**62, T)
        responses.append([
            pipe.response(acquire(probe, AcquisitionPlan(mode=mode, noise=noise, seed=int(ts))), origin=(k, t))
            for t, ts in enumerate(trial_seeds)
        ])
    return EvaluationBatch(responses, ideal)
