"""Per-client poisoning scores from adapter spectra, with adaptive flagging.

Each client's score combines two per-layer spectral indicators of its LoRA-A
matrices: the top-k energy ratio (concentration along dominant directions)
and the spectral entropy (dispersion across directions). Both are reduced to
absolute deviations from round-wise reference statistics, so the score is
insensitive to matrix shape and to anything shared by the whole round's
population. Only LoRA-A is read; LoRA-B is deliberately never touched here
(an optional ablation source exists for comparison experiments).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Mapping

import numpy as np

from .lora import ClientUpdate, LayerId
from .spectral import percentile, spectral_entropy, thin_svd, topk_energy_ratio

__all__ = [
    "MatrixSource",
    "LayerFeatures",
    "SpectralFeatures",
    "HopsScore",
    "Percentile",
    "TopM",
    "DetectionMode",
    "RoundDetection",
    "client_features",
    "hops_scores",
    "flag_clients",
    "detect_round",
]

log = logging.getLogger(__name__)

SIGMA_GUARD = 1e-12


class MatrixSource(str, Enum):
    """Which adapter factor feeds detection. A is the default; B exists only
    for ablation runs."""

    A = "a"
    B = "b"


@dataclass(frozen=True)
class LayerFeatures:
    entropy_h: float
    ratio_rk: float
    k_used: int


@dataclass(frozen=True)
class SpectralFeatures:
    """Per-layer spectral indicators for one client's submission."""

    layers: Mapping[LayerId, LayerFeatures]

    def __post_init__(self):
        object.__setattr__(self, "layers", dict(self.layers))


@dataclass(frozen=True)
class HopsScore:
    """A client's outlier score: the mean of its per-layer sub-scores."""

    client_id: int
    score: float
    per_layer: Mapping[LayerId, float]

    def __post_init__(self):
        object.__setattr__(self, "per_layer", dict(self.per_layer))


@dataclass(frozen=True)
class Percentile:
    p: float


@dataclass(frozen=True)
class TopM:
    m: int


DetectionMode = Percentile | TopM


@dataclass(frozen=True)
class RoundDetection:
    """Outcome of one round of detection."""

    scores: Mapping[int, HopsScore]
    threshold_theta: float
    flagged: frozenset[int]
    mode: DetectionMode
    skipped: bool = False

    def __post_init__(self):
        object.__setattr__(self, "scores", dict(self.scores))
        object.__setattr__(self, "flagged", frozenset(self.flagged))


def client_features(
    u: ClientUpdate, k: int, source: MatrixSource = MatrixSource.A
) -> SpectralFeatures:
    """Spectral entropy and top-k energy ratio per instrumented layer.

    Features are computed from the SVD of the layer's A matrix alone
    (``source=B`` swaps in the B matrix for ablation runs). ``k`` is clamped
    to the nominal rank.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    feats: dict[LayerId, LayerFeatures] = {}
    for lid, pair in u.layers.items():
        m = pair.a if source is MatrixSource.A else pair.b
        _, spectrum, _ = thin_svd(m)
        k_used = min(k, spectrum.nominal_rank)
        feats[lid] = LayerFeatures(
            entropy_h=spectral_entropy(spectrum),
            ratio_rk=topk_energy_ratio(spectrum, k_used),
            k_used=k_used,
        )
    return SpectralFeatures(layers=feats)


def hops_scores(
    features: Mapping[int, SpectralFeatures], lam: float
) -> dict[int, HopsScore]:
    """Outlier scores as absolute deviations from round-wise statistics.

    Per layer, with deviations d_c = 1 - R_k and entropies H_c over the
    participating clients:

        sub_c = lam * |d_c - mean(d)| + (1 - lam) * |(H_c - mean(H)) / std(H)|

    where std is the population form (divisor n). If std(H) is below the
    degeneracy guard the entropy term is zero for everyone. The client score
    is the arithmetic mean of its two layer sub-scores.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    if len(features) < 2:
        raise ValueError("round statistics need at least 2 participating clients")
    cids = sorted(features)
    per_layer_subs: dict[LayerId, np.ndarray] = {}
    for lid in LayerId:
        dev = np.array([1.0 - features[c].layers[lid].ratio_rk for c in cids])
        ent = np.array([features[c].layers[lid].entropy_h for c in cids])
        mu_r = dev.mean()
        mu_h = ent.mean()
        sigma_h = ent.std()
        energy_term = np.abs(dev - mu_r)
        if sigma_h <= SIGMA_GUARD:
            entropy_term = np.zeros_like(ent)
        else:
            entropy_term = np.abs((ent - mu_h) / sigma_h)
        per_layer_subs[lid] = lam * energy_term + (1.0 - lam) * entropy_term
    out: dict[int, HopsScore] = {}
    for i, c in enumerate(cids):
        subs = {lid: float(per_layer_subs[lid][i]) for lid in LayerId}
        score = float(np.mean([subs[lid] for lid in LayerId]))
        out[c] = HopsScore(client_id=c, score=score, per_layer=subs)
    return out


def flag_clients(
    scores: Mapping[int, HopsScore], mode: DetectionMode
) -> RoundDetection:
    """Flag outliers either above an adaptive percentile or as the top m scores.

    Percentile mode flags strictly above the threshold. TopM mode flags the
    min(m, n) highest scores, breaking ties toward lower client ids, and
    reports the highest unflagged score as the threshold.
    """
    if not scores:
        raise ValueError("flag_clients requires a non-empty score map")
    if isinstance(mode, Percentile):
        theta = percentile([s.score for s in scores.values()], mode.p)
        flagged = frozenset(c for c, s in scores.items() if s.score > theta)
    elif isinstance(mode, TopM):
        if mode.m < 0:
            raise ValueError(f"top-m count must be >= 0, got {mode.m}")
        ordered = sorted(scores.values(), key=lambda s: (-s.score, s.client_id))
        m = min(mode.m, len(ordered))
        flagged = frozenset(s.client_id for s in ordered[:m])
        theta = ordered[m].score if m < len(ordered) else float("-inf")
    else:
        raise TypeError(f"unknown detection mode: {mode!r}")
    return RoundDetection(
        scores=scores, threshold_theta=float(theta), flagged=flagged, mode=mode
    )


def detect_round(
    features: Mapping[int, SpectralFeatures], lam: float, mode: DetectionMode
) -> RoundDetection:
    """Score and flag one round's population, skipping degenerate rounds.

    With fewer than two participants there are no round statistics to deviate
    from; detection is skipped and every client passes.
    """
    if len(features) < 2:
        log.warning(
            "detection skipped: %d participant(s), need at least 2", len(features)
        )
        zero = {
            c: HopsScore(c, 0.0, {lid: 0.0 for lid in LayerId}) for c in features
        }
        return RoundDetection(
            scores=zero,
            threshold_theta=float("inf"),
            flagged=frozenset(),
            mode=mode,
            skipped=True,
        )
    return flag_clients(hops_scores(features, lam), mode)
