"""
Training pairs for the refinement chain: perturb executed picks, score both poses with
the PSP model and point the target delta from the worse pose toward the better one.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from prometheus_client import Counter

from config import FEATURE_DIM, FORMAT_VERSION, NoiseConfig, PickConfig
from picking.common import (
    MASK_64,
    DataFormatError,
    EmptyDatasetError,
    PerturbationRejected,
    SegmentMismatchError,
    lattice_angle,
    read_jsonl,
    substream,
    to_lattice,
    write_jsonl,
)
from picking.features import FEATURE_NAMES
from picking.geometry import AdjacencyInfo, adjacency_graph
from picking.pick import DEFAULT_EOAT, DEFAULT_PICK_CONFIG, EoatModel, PickAction, make_action
from picking.scene import SensorFrame
from picking.success import PspModel

logger = logging.getLogger(__name__)

DATASET_KIND = "dataset"
SPLIT_TAG = 0x53504C4954

TRAINING_PAIRS = Counter("pickopt_training_pairs_total", "Training pairs generated", ["split"])
REJECTED_PERTURBATIONS = Counter("pickopt_rejected_perturbations_total", "Perturbations that left their segment")

Provenance = Tuple[int, int, int]


@dataclass(frozen=True, eq=False)
class TrainingPair:
    """phi is taken at the lower-probability pose `origin`; origin + delta is the higher one"""
    phi: np.ndarray
    delta: Tuple[float, float, float]
    p_low: float
    p_high: float
    provenance: Provenance
    origin: Tuple[float, float, float]
    target_segment: int

    def to_dict(self, split: str) -> Dict[str, Any]:
        return {
            "split": split,
            "phi": [float(v) for v in self.phi],
            "delta": list(self.delta),
            "p_low": self.p_low,
            "p_high": self.p_high,
            "provenance": list(self.provenance),
            "origin": list(self.origin),
            "target_segment": self.target_segment,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TrainingPair":
        phi = np.asarray(data["phi"], dtype=float)
        if phi.shape != (FEATURE_DIM,):
            raise DataFormatError(f"training pair has {phi.shape[0]} features, expected {FEATURE_DIM}")
        return cls(
            phi=phi,
            delta=tuple(float(v) for v in data["delta"]),
            p_low=float(data["p_low"]),
            p_high=float(data["p_high"]),
            provenance=tuple(int(v) for v in data["provenance"]),
            origin=tuple(float(v) for v in data["origin"]),
            target_segment=int(data["target_segment"]),
        )


@dataclass(frozen=True)
class ExecutedPick:
    scene_seed: int
    pick_index: int
    frame: SensorFrame = field(compare=False)
    action: PickAction


@dataclass(frozen=True, eq=False)
class Dataset:
    train: List[TrainingPair]
    test: List[TrainingPair]
    noise: NoiseConfig
    seed: int
    split_fraction: float
    feature_dim: int = FEATURE_DIM

    @property
    def total(self) -> int:
        return len(self.train) + len(self.test)


def perturb(frame: SensorFrame, action: PickAction, noise: NoiseConfig, rng: np.random.Generator,
            eoat: EoatModel = DEFAULT_EOAT, settings: PickConfig = DEFAULT_PICK_CONFIG) -> PickAction:
    """Gaussian pose noise; three draws per call, rejected if the pose leaves the target segment"""
    eps = rng.normal(0.0, 1.0, size=3) * np.array([noise.sigma_pos, noise.sigma_pos, noise.sigma_rot])
    x, y = to_lattice(action.x + float(eps[0])), to_lattice(action.y + float(eps[1]))
    if not frame.in_bounds(x, y):
        raise PerturbationRejected(f"perturbed pick ({x:.4f}, {y:.4f}) left the conveyor")
    row, col = frame.cell_of(x, y)
    if int(frame.segmentgrid[row, col]) != action.target_segment:
        raise PerturbationRejected(f"perturbed pick ({x:.4f}, {y:.4f}) left segment {action.target_segment}")
    return make_action(frame, x, y, action.r + float(eps[2]), action.target_segment, eoat, settings)


def label_pair(psp: PspModel, frame: SensorFrame, a_i: PickAction, a_j: PickAction,
               adjacency: Optional[Mapping[int, AdjacencyInfo]] = None,
               provenance: Provenance = (0, 0, 0)) -> TrainingPair:
    """Delta points from the lower-scoring pose to the higher one; ties go a_i -> a_j"""
    if a_i.target_segment != a_j.target_segment:
        raise SegmentMismatchError(
            f"pair poses target segments {a_i.target_segment} and {a_j.target_segment}; both must match")
    if adjacency is None:
        adjacency = adjacency_graph(frame, psp.base.geometry.adjacency_gap)
    phi_i = psp.features(frame, a_i, adjacency)
    phi_j = psp.features(frame, a_j, adjacency)
    p_i, p_j = psp.prob(phi_i), psp.prob(phi_j)
    if p_i > p_j:
        low, high, phi, p_low, p_high = a_j, a_i, phi_j, p_j, p_i
    else:
        low, high, phi, p_low, p_high = a_i, a_j, phi_i, p_i, p_j
    delta = (high.x - low.x, high.y - low.y, lattice_angle(high.r - low.r))
    return TrainingPair(phi=phi, delta=delta, p_low=p_low, p_high=p_high, provenance=provenance,
                        origin=low.pose, target_segment=low.target_segment)


def apply_delta(pose: Tuple[float, float, float], delta: Sequence[float]) -> Tuple[float, float, float]:
    return pose[0] + delta[0], pose[1] + delta[1], lattice_angle(pose[2] + delta[2])


def split_counts(total: int, split_fraction: float) -> Tuple[int, int]:
    """Train gets floor(total * fraction) pairs"""
    if not 0.0 < split_fraction < 1.0:
        raise ValueError(f"split_fraction must lie in (0, 1), got {split_fraction}")
    n_train = int(math.floor(total * split_fraction))
    return n_train, total - n_train


def _pairs_for_pick(pick: ExecutedPick, noise: NoiseConfig, psp: PspModel, seed: int,
                    eoat: EoatModel, settings: PickConfig) -> Tuple[List[TrainingPair], int]:
    rng = substream(seed, pick.pick_index)
    adjacency = adjacency_graph(pick.frame, psp.base.geometry.adjacency_gap)
    pairs, rejected = [], 0
    for n in range(noise.n_perturb):
        try:
            perturbed = perturb(pick.frame, pick.action, noise, rng, eoat, settings)
        except PerturbationRejected:
            rejected += 1
            continue
        pairs.append(label_pair(psp, pick.frame, pick.action, perturbed, adjacency,
                                provenance=(pick.scene_seed, pick.pick_index, n)))
    return pairs, rejected


def split_by_pick(groups: Sequence[List[TrainingPair]], split_fraction: float,
                  seed: int) -> Tuple[List[TrainingPair], List[TrainingPair]]:
    """Whole picks go to one side; picks are visited in seeded random order and fill train up to its quota"""
    total = sum(len(g) for g in groups)
    quota, _ = split_counts(total, split_fraction)
    order = np.random.default_rng([int(seed) & MASK_64, SPLIT_TAG]).permutation(len(groups))
    train, test = [], []
    for idx in order:
        group = groups[int(idx)]
        if len(train) + len(group) <= quota:
            train.extend(group)
        else:
            test.extend(group)
    train.sort(key=lambda p: p.provenance[1:])
    test.sort(key=lambda p: p.provenance[1:])
    return train, test


def build_dataset(picks: Sequence[ExecutedPick], noise: NoiseConfig, psp: PspModel, split_fraction: float,
                  seed: int, eoat: EoatModel = DEFAULT_EOAT, settings: PickConfig = DEFAULT_PICK_CONFIG,
                  threads: int = 1) -> Dataset:
    if not picks:
        raise EmptyDatasetError("no executed picks to build a dataset from")
    if not 0.0 < split_fraction < 1.0:
        raise ValueError(f"split_fraction must lie in (0, 1), got {split_fraction}")

    def work(pick: ExecutedPick) -> Tuple[List[TrainingPair], int]:
        return _pairs_for_pick(pick, noise, psp, seed, eoat, settings)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, picks))
    else:
        results = [work(p) for p in picks]

    groups = [pairs for pairs, _ in results]
    rejected = sum(r for _, r in results)
    train, test = split_by_pick(groups, split_fraction, seed)
    if not train and not test:
        raise EmptyDatasetError("every perturbation was rejected; dataset is empty")

    TRAINING_PAIRS.labels(split="train").inc(len(train))
    TRAINING_PAIRS.labels(split="test").inc(len(test))
    REJECTED_PERTURBATIONS.inc(rejected)
    if rejected:
        logger.warning(f"Rejected {rejected} of {len(picks) * noise.n_perturb} perturbations (left their segment)")
    logger.info(f"Built dataset: {len(train)} train / {len(test)} test pairs from {len(picks)} picks")
    return Dataset(train=train, test=test, noise=noise, seed=int(seed), split_fraction=split_fraction)


def save_dataset(path: Path, dataset: Dataset) -> None:
    header = {
        "kind": DATASET_KIND,
        "format_version": FORMAT_VERSION,
        "feature_dim": dataset.feature_dim,
        "feature_names": list(FEATURE_NAMES),
        "noise": dataset.noise.model_dump(),
        "seed": dataset.seed,
        "split_fraction": dataset.split_fraction,
        "n_train": len(dataset.train),
        "n_test": len(dataset.test),
    }
    records = [p.to_dict("train") for p in dataset.train] + [p.to_dict("test") for p in dataset.test]
    write_jsonl(path, header, records)
    logger.info(f"Saved dataset to {path}")


def load_dataset(path: Path) -> Dataset:
    header, records = read_jsonl(path, DATASET_KIND, FORMAT_VERSION)
    if header.get("feature_dim") != FEATURE_DIM:
        raise DataFormatError(f"{path}: feature_dim {header.get('feature_dim')} != {FEATURE_DIM}")
    train, test = [], []
    for record in records:
        split = record.get("split")
        if split not in ("train", "test"):
            raise DataFormatError(f"{path}: unknown split {split!r}")
        (train if split == "train" else test).append(TrainingPair.from_dict(record))
    return Dataset(
        train=train,
        test=test,
        noise=NoiseConfig.model_validate(header["noise"]),
        seed=int(header["seed"]),
        split_fraction=float(header["split_fraction"]),
    )
