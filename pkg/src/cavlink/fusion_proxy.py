"""Feature fusion and the proxy detection metric.

Fusion combines the ego map with the processed CAV maps either by the
arithmetic mean or by a per-pixel softmax over per-map salience (the channel
L2 norm). Scoring extracts non-maximum-suppressed peaks from the fused map's
channel mean and matches them greedily against the planted object centers,
yielding an 11-point interpolated average precision at pixel-distance
thresholds. The strict threshold (1 px) and loose threshold (2 px) play the
role a strict/loose box-overlap pair would in a full detector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .feature_core import FeatureMap

DEFAULT_THRESHOLDS = (2.0, 1.0)


@dataclass(frozen=True)
class FusionConfig:
    mode: str = "mean"
    temperature: float = 1.0

    def __post_init__(self):
        if self.mode not in ("mean", "softmax_attention"):
            raise ConfigurationError(f"bad fusion mode {self.mode!r}")
        if self.temperature <= 0:
            raise ConfigurationError("attention temperature must be > 0")


@dataclass(frozen=True)
class DetectionResult:
    """Scored peaks plus proxy-AP values per distance threshold."""

    peaks: tuple[tuple[float, float, float], ...]
    matched: dict
    ap: dict

    def __post_init__(self):
        scores = [p[2] for p in self.peaks]
        if any(b > a for a, b in zip(scores, scores[1:])):
            raise ConfigurationError("peaks must be sorted by score")
        for v in self.ap.values():
            if not 0.0 <= v <= 1.0:
                raise ConfigurationError("proxy-AP outside [0, 1]")


def fuse(cfg: FusionConfig, f_ego: FeatureMap,
         cav_maps: list[FeatureMap]) -> FeatureMap:
    """Combine the ego map with processed CAV maps into one fused map."""
    maps = [f_ego] + list(cav_maps)
    for f in maps[1:]:
        if f.shape != f_ego.shape:
            raise ConfigurationError("fusion inputs must share one shape")
    stack = np.stack([f.data for f in maps])          # (K+1, C, H, W)
    if cfg.mode == "mean":
        fused = stack.mean(axis=0)
    else:
        salience = np.sqrt(np.sum(stack ** 2, axis=1))  # (K+1, H, W)
        logits = salience / cfg.temperature
        logits -= logits.max(axis=0, keepdims=True)
        w = np.exp(logits)
        w /= w.sum(axis=0, keepdims=True)
        fused = np.sum(w[:, None, :, :] * stack, axis=0)
    return f_ego.with_data(fused)


def find_peaks(det_map: np.ndarray, sigma_gain: float = 2.0
               ) -> list[tuple[int, int, float]]:
    """Strict 8-neighborhood local maxima above mean + sigma_gain * std."""
    h, w = det_map.shape
    padded = np.full((h + 2, w + 2), -np.inf)
    padded[1:-1, 1:-1] = det_map
    center = padded[1:-1, 1:-1]
    is_max = np.ones((h, w), dtype=bool)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            is_max &= center > padded[1 + di:1 + di + h, 1 + dj:1 + dj + w]
    thr = det_map.mean() + sigma_gain * det_map.std()
    rows, cols = np.nonzero(is_max & (center > thr))
    peaks = [(int(r), int(c), float(det_map[r, c]))
             for r, c in zip(rows, cols)]
    peaks.sort(key=lambda p: -p[2])
    return peaks


def _eleven_point_ap(tp_flags: list[bool], num_truth: int) -> float:
    if num_truth == 0:
        return 1.0 if not tp_flags else 0.0
    if not tp_flags:
        return 0.0
    tps = np.cumsum(np.asarray(tp_flags, dtype=np.float64))
    ranks = np.arange(1, len(tp_flags) + 1)
    precision = tps / ranks
    recall = tps / num_truth
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 11):
        mask = recall >= r - 1e-12
        ap += precision[mask].max() if np.any(mask) else 0.0
    return float(ap / 11.0)


def detect_and_score(f_fusion: FeatureMap,
                     truth: list[tuple[float, float]],
                     thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS
                     ) -> DetectionResult:
    """Extract peaks from the fused map and score them against the truth.

    Detections are matched greedily in score order to the nearest unmatched
    true center within each distance threshold. An empty scene with no
    detections scores a vacuous 1.0; spurious detections on an empty scene
    score 0.0.
    """
    if f_fusion.data.size == 0:
        raise ConfigurationError("cannot score an empty map")
    det_map = f_fusion.data.mean(axis=0)
    peaks = find_peaks(det_map)
    matched = {}
    ap = {}
    for thr in thresholds:
        taken = [False] * len(truth)
        flags = []
        for r, c, _score in peaks:
            best, best_d = -1, float("inf")
            for gi, (tr, tc) in enumerate(truth):
                if taken[gi]:
                    continue
                d = float(np.hypot(r - tr, c - tc))
                if d <= thr and d < best_d:
                    best, best_d = gi, d
            if best >= 0:
                taken[best] = True
                flags.append(True)
            else:
                flags.append(False)
        matched[thr] = flags
        ap[thr] = _eleven_point_ap(flags, len(truth))
    return DetectionResult(tuple((float(r), float(c), s)
                                 for r, c, s in peaks), matched, ap)
