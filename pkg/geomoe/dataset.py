"""Binary dataset files and the plain-text correspondence format."""
from __future__ import annotations

from collections.abc import Iterable, Iterator
from pathlib import Path
import struct
from typing import BinaryIO

import numpy as np

from .const import DATASET_FORMAT_VERSION, DATASET_MAGIC, DEFAULT_FRUSTUM_BOUND
from .exceptions import DatasetFormatException, InvalidInputException
from .models import (
    CorrespondenceSet,
    EssentialMatrix,
    GeneratedPair,
    Homography,
    RelativePose,
)

_FILE_HEADER = struct.Struct("<4sIQ")
_RECORD_HEADER = struct.Struct("<QIB")

FLAG_LABELS = 1
FLAG_HOMOGRAPHY = 2
FLAG_INJECTED = 4

_LABEL_BIT = 1
_INJECTED_BIT = 2

_TRUE_TOKENS = {"1", "true", "True", "inlier"}
_FALSE_TOKENS = {"0", "false", "False", "outlier"}


def record_size(count: int, has_homography: bool) -> int:
    """Return the byte size of one record of ``count`` correspondences."""
    doubles = 4 * count + 9 + 12 + (9 if has_homography else 0)
    return _RECORD_HEADER.size + 8 * doubles + count


def dataset_size(counts: Iterable[int], homographies: Iterable[bool]) -> int:
    """Return the byte size of a dataset file."""
    return _FILE_HEADER.size + sum(
        record_size(count, has_h) for count, has_h in zip(counts, homographies)
    )


def _doubles(values: np.ndarray) -> bytes:
    return np.ascontiguousarray(values, dtype="<f8").tobytes()


def encode_pair(pair: GeneratedPair) -> bytes:
    """Serialize one pair as a dataset record."""
    corrs = pair.correspondences
    count = len(corrs)
    flags = 0
    marks = np.zeros(count, dtype=np.uint8)
    if corrs.labels is not None:
        flags |= FLAG_LABELS
        marks |= corrs.labels.astype(np.uint8) * _LABEL_BIT
    if pair.injected_outliers is not None:
        flags |= FLAG_INJECTED
        marks |= pair.injected_outliers.astype(np.uint8) * _INJECTED_BIT
    if pair.gt_homography is not None:
        flags |= FLAG_HOMOGRAPHY

    parts = [
        _RECORD_HEADER.pack(pair.pair_id, count, flags),
        _doubles(corrs.as_array()),
        marks.tobytes(),
        _doubles(pair.gt_essential.e),
        _doubles(pair.gt_pose.rotation),
        _doubles(pair.gt_pose.translation),
    ]
    if pair.gt_homography is not None:
        parts.append(_doubles(pair.gt_homography.h))
    return b"".join(parts)


def write_dataset(pairs: Iterable[GeneratedPair], path: str | Path) -> int:
    """Write pairs to a dataset file and return the number of records."""
    pairs = list(pairs)
    with Path(path).open("wb") as handle:
        handle.write(
            _FILE_HEADER.pack(DATASET_MAGIC, DATASET_FORMAT_VERSION, len(pairs))
        )
        for pair in pairs:
            handle.write(encode_pair(pair))
    return len(pairs)


class _RecordReader:
    """Reads exact byte counts and reports truncation with the record index."""

    def __init__(self, handle: BinaryIO) -> None:
        self.handle = handle
        self.complete = -1

    def read(self, size: int) -> bytes:
        chunk = self.handle.read(size)
        if len(chunk) != size:
            raise DatasetFormatException(
                "Dataset file is truncated",
                self.complete if self.complete >= 0 else None,
            )
        return chunk

    def doubles(self, count: int) -> np.ndarray:
        return np.frombuffer(self.read(8 * count), dtype="<f8").astype(np.float64)


def _decode_pair(reader: _RecordReader) -> GeneratedPair:
    pair_id, count, flags = _RECORD_HEADER.unpack(reader.read(_RECORD_HEADER.size))
    coordinates = reader.doubles(4 * count).reshape(count, 4)
    marks = np.frombuffer(reader.read(count), dtype=np.uint8)
    essential = reader.doubles(9).reshape(3, 3)
    rotation = reader.doubles(9).reshape(3, 3)
    translation = reader.doubles(3)
    homography = None
    if flags & FLAG_HOMOGRAPHY:
        homography = Homography(reader.doubles(9).reshape(3, 3))

    labels = (marks & _LABEL_BIT).astype(bool) if flags & FLAG_LABELS else None
    injected = (marks & _INJECTED_BIT).astype(bool) if flags & FLAG_INJECTED else None
    try:
        corrs = CorrespondenceSet(
            coordinates[:, :2], coordinates[:, 2:], labels, bound=np.inf
        )
    except InvalidInputException as err:
        raise DatasetFormatException(
            f"Record {reader.complete + 1} holds invalid coordinates: {err}",
            reader.complete if reader.complete >= 0 else None,
        ) from err
    return GeneratedPair(
        pair_id=pair_id,
        correspondences=corrs,
        gt_essential=EssentialMatrix(essential),
        gt_pose=RelativePose(rotation, translation),
        gt_homography=homography,
        injected_outliers=injected,
    )


def iter_dataset(path: str | Path) -> Iterator[GeneratedPair]:
    """Stream the pairs of a dataset file one record at a time."""
    try:
        handle = Path(path).open("rb")
    except OSError as err:
        raise DatasetFormatException(f"Cannot read {path}: {err}") from err
    with handle:
        header = handle.read(_FILE_HEADER.size)
        if len(header) != _FILE_HEADER.size:
            raise DatasetFormatException("Dataset file has no header")
        magic, version, count = _FILE_HEADER.unpack(header)
        if magic != DATASET_MAGIC:
            raise DatasetFormatException(f"Not a dataset file (magic {magic!r})")
        if version != DATASET_FORMAT_VERSION:
            raise DatasetFormatException(f"Unsupported dataset version {version}")

        reader = _RecordReader(handle)
        for index in range(count):
            pair = _decode_pair(reader)
            reader.complete = index
            yield pair
        if handle.read(1):
            raise DatasetFormatException(
                "Trailing bytes after the last record", reader.complete
            )


def read_dataset(path: str | Path) -> list[GeneratedPair]:
    """Read every pair of a dataset file."""
    return list(iter_dataset(path))


def _parse_label(token: str, line: int) -> bool:
    if token in _TRUE_TOKENS:
        return True
    if token in _FALSE_TOKENS:
        return False
    raise InvalidInputException(f"Unreadable label {token!r}", line)


def read_correspondences_text(
    path: str | Path, *, bound: float = DEFAULT_FRUSTUM_BOUND
) -> CorrespondenceSet:
    """Read ``x1 y1 x2 y2 [label]`` lines; blank lines and ``#`` comments skip."""
    rows = []
    labels = []
    for line_number, line in enumerate(
        Path(path).read_text(encoding="utf-8").splitlines(), start=1
    ):
        tokens = line.split("#", 1)[0].split()
        if not tokens:
            continue
        if len(tokens) not in (4, 5):
            raise InvalidInputException(
                f"Expected 4 or 5 values, got {len(tokens)}", line_number
            )
        try:
            rows.append([float(token) for token in tokens[:4]])
        except ValueError as err:
            raise InvalidInputException(str(err), line_number) from err
        label = tokens[4] if len(tokens) == 5 else None
        labels.append(None if label is None else _parse_label(label, line_number))

    if any(label is None for label in labels) and not all(
        label is None for label in labels
    ):
        raise InvalidInputException("Labels must be given on every line or none")
    values = np.array(rows, dtype=np.float64).reshape(-1, 4)
    label_array = None if not labels or labels[0] is None else np.array(labels)
    return CorrespondenceSet(values[:, :2], values[:, 2:], label_array, bound=bound)


def write_correspondences_text(corrs: CorrespondenceSet, path: str | Path) -> None:
    """Write a set in the text format with round-trippable floats."""
    lines = []
    for index, row in enumerate(corrs.as_array()):
        values = " ".join(repr(float(v)) for v in row)
        if corrs.labels is not None:
            values += f" {int(corrs.labels[index])}"
        lines.append(values)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_weights_text(path: str | Path) -> np.ndarray:
    """Read one weight per line (the first value of each line)."""
    values = []
    for line_number, line in enumerate(
        Path(path).read_text(encoding="utf-8").splitlines(), start=1
    ):
        tokens = line.split("#", 1)[0].split()
        if not tokens:
            continue
        try:
            values.append(float(tokens[0]))
        except ValueError as err:
            raise InvalidInputException(str(err), line_number) from err
    return np.array(values, dtype=np.float64)


_POSE_ROTATION = "R"
_POSE_TRANSLATION = "t"


def write_weights_text(
    weights: np.ndarray,
    path: str | Path,
    *,
    pose: RelativePose | None = None,
    header: str | None = None,
) -> None:
    """Write one weight per line; the pose goes on two trailing comment lines."""
    lines = [f"# {line}".rstrip() for line in (header or "").splitlines()]
    lines.extend(repr(float(w)) for w in weights)
    if pose is not None:
        for tag, values in (
            (_POSE_ROTATION, pose.rotation.reshape(-1)),
            (_POSE_TRANSLATION, pose.translation),
        ):
            lines.append(f"# {tag} " + " ".join(repr(float(v)) for v in values))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_pose_text(path: str | Path) -> RelativePose | None:
    """Read the pose lines of a weights file, or None when it has none."""
    found: dict[str, np.ndarray] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        tokens = line.lstrip("#").split()
        if line.startswith("#") and tokens and tokens[0] in (
            _POSE_ROTATION,
            _POSE_TRANSLATION,
        ):
            found[tokens[0]] = np.array([float(v) for v in tokens[1:]])
    if not found:
        return None
    if len(found) != 2:
        raise InvalidInputException("Weights file holds half a pose")
    return RelativePose(
        found[_POSE_ROTATION].reshape(3, 3), found[_POSE_TRANSLATION]
    )
