"""Per-segment quality decisions: feature -> codebook symbol -> nearest profile."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator

from .codebook import QualityModel, quantize
from .errors import ModelUnloaded
from .features import SegmentFeature


@dataclass(frozen=True, slots=True)
class ClassifiedSegment:
    flow_id: int
    peak_index: int
    symbol: int
    label: int
    distance: float
    timestamp: float

    def to_row(self, model: QualityModel) -> dict:
        return {
            "ts": self.timestamp,
            "flow_id": self.flow_id,
            "peak_index": self.peak_index,
            "label": self.label,
            "label_name": model.label_name(self.label),
            "symbol": self.symbol,
            "distance": self.distance,
        }


OUTPUT_COLUMNS = ("ts", "flow_id", "peak_index", "label", "label_name", "symbol", "distance")


def nearest_label(x: float, model: QualityModel) -> tuple[int, float]:
    best, best_d = None, None
    for p in model.profiles:  # sorted by label, so strict < keeps the lower label on ties
        d = abs(x - p.scalar_center)
        if best_d is None or d < best_d:
            best, best_d = p.label, d
    return best, best_d


def classify_value(value: float, model: QualityModel | None,
                   bypass_quantization: bool = False) -> tuple[int, int, float]:
    """Return (symbol, label, distance) for one feature value."""
    if model is None:
        raise ModelUnloaded("no model loaded")
    sym = quantize(value, model.codebook)
    probe = value if bypass_quantization else model.codebook.centers[sym]
    label, _ = nearest_label(probe, model)
    center = model.profiles[[p.label for p in model.profiles].index(label)].scalar_center
    return sym, label, abs(value - center)


def classify_feature(f: SegmentFeature, model: QualityModel | None,
                     bypass_quantization: bool = False) -> ClassifiedSegment:
    sym, label, dist = classify_value(f.value, model, bypass_quantization)
    return ClassifiedSegment(f.flow_id, f.peak_index, sym, label, dist, f.end)


def classify_stream(features: Iterable[SegmentFeature], model: QualityModel | None,
                    bypass_quantization: bool = False) -> Iterator[ClassifiedSegment]:
    """Classify each feature on its own, yielding results as features arrive."""
    if model is None:
        raise ModelUnloaded("no model loaded")
    for f in features:
        yield classify_feature(f, model, bypass_quantization)
