"""
Pick success probability models: the hidden-world oracle used by the simulator and
the PSP surrogate used for ranking, labeling and optimization.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional

import numpy as np
from scipy.special import expit

from config import FEATURE_DIM, GeometryConfig, PspConfig, SuccessModelConfig
from picking.common import ConfigError
from picking.features import (
    DEFAULT_GEOMETRY,
    FEATURE_INDEX,
    PhiLike,
    as_array,
    compute_features,
)
from picking.geometry import AdjacencyInfo, adjacency_graph
from picking.pick import DEFAULT_EOAT, EoatModel, PickAction
from picking.scene import PackageKind, SensorFrame

logger = logging.getLogger(__name__)

LOGIT_LIMIT = 30.0
EDGE_FEATURE = FEATURE_INDEX["edge_distance"]
KIND_OFFSET = FEATURE_INDEX["kind_box"]


@dataclass(frozen=True, eq=False)
class TrueSuccessModel:
    """Logistic-linear success probability over the feature vector"""
    weights: Mapping[str, float]
    bias: float
    kind_penalties: Mapping[PackageKind, float]
    edge_margin: float = 0.05
    edge_deficit_weight: float = -3.0
    eoat: EoatModel = field(default=DEFAULT_EOAT, repr=False)
    geometry: GeometryConfig = field(default=DEFAULT_GEOMETRY, repr=False)
    _weight_vector: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        unknown = sorted(set(self.weights) - set(FEATURE_INDEX))
        if unknown:
            raise ConfigError(f"success model weights name unknown features: {unknown}")
        vector = np.zeros(FEATURE_DIM, dtype=float)
        for name, weight in self.weights.items():
            vector[FEATURE_INDEX[name]] = weight
        for kind, penalty in self.kind_penalties.items():
            vector[KIND_OFFSET + kind.index] += penalty
        object.__setattr__(self, "_weight_vector", vector)

    @classmethod
    def from_config(cls, config: SuccessModelConfig, eoat: EoatModel = DEFAULT_EOAT,
                    geometry: GeometryConfig = DEFAULT_GEOMETRY) -> "TrueSuccessModel":
        return cls(
            weights=dict(config.weights),
            bias=config.bias,
            kind_penalties={PackageKind(k): v for k, v in config.kind_penalties.items()},
            edge_margin=config.edge_margin,
            edge_deficit_weight=config.edge_deficit_weight,
            eoat=eoat,
            geometry=geometry,
        )

    def logit(self, phi: PhiLike) -> float:
        values = as_array(phi)
        deficit = max(0.0, self.edge_margin - float(values[EDGE_FEATURE]))
        return self.bias + float(self._weight_vector @ values) + self.edge_deficit_weight * deficit

    def prob(self, phi: PhiLike) -> float:
        return float(expit(np.clip(self.logit(phi), -LOGIT_LIMIT, LOGIT_LIMIT)))

    def features(self, frame: SensorFrame, action: PickAction,
                 adjacency: Optional[Mapping[int, AdjacencyInfo]] = None) -> np.ndarray:
        if adjacency is None:
            adjacency = adjacency_graph(frame, self.geometry.adjacency_gap)
        return compute_features(frame, adjacency, action, self.eoat, self.geometry).values

    def prob_for_action(self, frame: SensorFrame, action: PickAction,
                        adjacency: Optional[Mapping[int, AdjacencyInfo]] = None) -> float:
        return self.prob(self.features(frame, action, adjacency))


def pseudo_noise(phi: PhiLike) -> float:
    """Fixed pseudo-random value in [-1, 1) keyed by the exact feature bytes"""
    digest = hashlib.blake2b(as_array(phi).astype(np.float64).tobytes(), digest_size=8).digest()
    return 2.0 * (int.from_bytes(digest, "little") / 2.0 ** 64) - 1.0


@dataclass(frozen=True, eq=False)
class PspModel:
    """Degraded view of the oracle: bounded deterministic noise plus output quantization"""
    base: TrueSuccessModel
    noise_amplitude: float = 0.03
    smoothing: float = 0.01

    def __post_init__(self):
        if self.noise_amplitude < 0 or self.smoothing < 0:
            raise ConfigError("PSP noise_amplitude and smoothing must be non-negative")

    @classmethod
    def from_config(cls, config: PspConfig, eoat: EoatModel = DEFAULT_EOAT,
                    geometry: GeometryConfig = DEFAULT_GEOMETRY) -> "PspModel":
        return cls(
            base=TrueSuccessModel.from_config(config.base, eoat, geometry),
            noise_amplitude=config.noise_amplitude,
            smoothing=config.smoothing,
        )

    def prob(self, phi: PhiLike) -> float:
        p = self.base.prob(phi)
        if self.noise_amplitude > 0:
            p += self.noise_amplitude * pseudo_noise(phi)
        p = min(max(p, 0.0), 1.0)
        if self.smoothing > 0:
            p = min(max(round(p / self.smoothing) * self.smoothing, 0.0), 1.0)
        return float(p)

    def features(self, frame: SensorFrame, action: PickAction,
                 adjacency: Optional[Mapping[int, AdjacencyInfo]] = None) -> np.ndarray:
        return self.base.features(frame, action, adjacency)

    def prob_for_action(self, frame: SensorFrame, action: PickAction,
                        adjacency: Optional[Mapping[int, AdjacencyInfo]] = None) -> float:
        return self.prob(self.features(frame, action, adjacency))


def true_prob(model: TrueSuccessModel, phi: PhiLike) -> float:
    return model.prob(phi)


def psp_prob(model: PspModel, phi: PhiLike) -> float:
    return model.prob(phi)


def describe(model: TrueSuccessModel) -> Dict[str, float]:
    """Non-zero weights by feature name, for logging"""
    return {name: float(model._weight_vector[i]) for name, i in FEATURE_INDEX.items()
            if model._weight_vector[i] != 0.0}
