"""
Common utilities shared by the picking modules: error hierarchy, seed derivation,
the action coordinate lattice and JSON-lines persistence.
"""

import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Tuple

import numpy as np

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA_FORMAT = 3
EXIT_RUNTIME = 4

# Action coordinates live on multiples of 2**-30 so sums and differences are exact
LATTICE_SCALE = float(2 ** 30)
TWO_PI = 2.0 * math.pi
MASK_64 = (1 << 64) - 1


class PickOptError(Exception):
    """Base exception for pipeline errors."""
    exit_code = EXIT_RUNTIME


class ConfigError(PickOptError):
    """Raised when a configuration value is missing or out of range."""
    exit_code = EXIT_CONFIG


class DataFormatError(PickOptError):
    """Raised when a persisted file cannot be parsed."""
    exit_code = EXIT_DATA_FORMAT


class FormatVersionError(DataFormatError):
    """Raised when a file carries an unknown format version."""
    pass


class DegenerateGeometryError(PickOptError):
    """Raised when too few or collinear points are given to a plane fit."""
    pass


class OutOfBoundsError(PickOptError):
    """Raised when a query point lies outside the conveyor bounds."""
    pass


class MissingSegmentError(PickOptError):
    """Raised when a pick targets a segment not visible in the frame."""
    pass


class SegmentMismatchError(PickOptError):
    """Raised when two poses of one training pair target different segments."""
    pass


class PerturbationRejected(PickOptError):
    """Raised when a perturbed pick leaves its target segment."""
    pass


class EmptyDatasetError(PickOptError):
    """Raised when dataset building receives no executed picks."""
    pass


class DivergenceError(PickOptError):
    """Raised when training produces a non-finite loss."""
    pass


class DimensionMismatchError(PickOptError):
    """Raised when a feature vector has the wrong length for a model."""
    pass


class UndefinedBaselineError(PickOptError):
    """Raised when a relative reduction is asked of a zero baseline."""
    pass


class ModelLoadError(PickOptError):
    """Raised when a model or model config cannot be loaded."""
    pass


def derive_seed(master: int, tag: int) -> int:
    """Stage seed = master XOR stage tag, kept to 64 bits."""
    return (int(master) ^ int(tag)) & MASK_64


def substream(seed: int, index: int) -> np.random.Generator:
    """Independent random stream for item `index` of a stage; schedule-independent."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & MASK_64, int(index)]))


def substreams(seed: int, index: int, count: int) -> List[np.random.Generator]:
    """`count` independent streams for item `index` (e.g. scene, sampler, outcome)."""
    children = np.random.SeedSequence([int(seed) & MASK_64, int(index)]).spawn(count)
    return [np.random.default_rng(child) for child in children]


def to_lattice(value: float) -> float:
    return round(float(value) * LATTICE_SCALE) / LATTICE_SCALE


def wrap_angle(angle: float) -> float:
    """Wrap to (-pi, pi]."""
    wrapped = float(angle) - TWO_PI * math.floor((float(angle) + math.pi) / TWO_PI)
    if wrapped <= -math.pi:
        wrapped += TWO_PI
    if wrapped > math.pi:
        wrapped -= TWO_PI
    return wrapped


def lattice_angle(angle: float) -> float:
    """Wrapped and snapped rotation; stays inside (-pi, pi]."""
    return to_lattice(wrap_angle(angle))


def write_jsonl(path: Path, header: Dict[str, Any], records: Iterable[Dict[str, Any]]) -> int:
    """Write a header line plus one JSON object per record; returns the record count."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for record in records:
            f.write(json.dumps(record, sort_keys=True) + "\n")
            count += 1
    logger.debug(f"Wrote {count} records to {path}")
    return count


def read_jsonl(path: Path, kind: str, version: int) -> Tuple[Dict[str, Any], Iterator[Dict[str, Any]]]:
    """Read a header-first JSON-lines file, checking its kind and format version."""
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"{kind} file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        raise DataFormatError(f"{path} is empty; expected a {kind} header line")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{path}: header is not valid JSON: {e}") from e
    check_header(header, kind, version, str(path))

    def records() -> Iterator[Dict[str, Any]]:
        for lineno, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as e:
                raise DataFormatError(f"{path}:{lineno}: invalid JSON record: {e}") from e

    return header, records()


def check_header(header: Dict[str, Any], kind: str, version: int, source: str) -> None:
    if header.get("kind") != kind:
        raise DataFormatError(f"{source}: expected a '{kind}' file, found '{header.get('kind')}'")
    if header.get("format_version") != version:
        raise FormatVersionError(
            f"{source}: unsupported format_version {header.get('format_version')!r} (expected {version})"
        )


def write_json(path: Path, payload: Dict[str, Any]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, sort_keys=True)
        f.write("\n")


def read_json(path: Path, kind: str, version: int) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ModelLoadError(f"{kind} file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            payload = json.load(f)
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{path}: invalid JSON: {e}") from e
    check_header(payload, kind, version, str(path))
    return payload
