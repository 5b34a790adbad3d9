"""Building samples, manifest CSV + PPM image I/O, and dataset summaries."""
from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .structured import CONTINUOUS, StructuredRecord, fit_stats

MANIFEST_HEADER = ("id", "image_path", "evac_zone", "building_age_years", "building_value_usd",
                   "dist_track_km", "wind_speed_mph", "label")
_FIELD_OF_COLUMN = {
    "building_age_years": "building_age",
    "building_value_usd": "building_value",
    "dist_track_km": "dist_track",
    "wind_speed_mph": "wind_speed",
}
LABELS = (0, 1, 2)


class ManifestError(ValueError):
    pass


@dataclass
class BuildingSample:
    id: str
    image: np.ndarray              # [H, W, 3] float64 in [0, 1]
    record: StructuredRecord
    label: int
    image_path: str = ""


@dataclass
class Dataset:
    samples: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def __iter__(self):
        return iter(self.samples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    @property
    def records(self) -> list:
        return [s.record for s in self.samples]

    def images(self, indices: Optional[Sequence[int]] = None) -> np.ndarray:
        chosen = self.samples if indices is None else [self.samples[i] for i in indices]
        return np.stack([s.image for s in chosen]) if chosen else np.zeros((0, 0, 0, 3))

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset([self.samples[i] for i in indices])


# PPM (P6, 8-bit)

def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    pixels = to_uint8(image) if image.dtype != np.uint8 else image
    h, w, _ = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_ppm(path) -> np.ndarray:
    """Pixels of a binary P6 file as float64 in [0, 1]."""
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PPM header")
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (P6) file")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM is supported")
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos)
    return data.reshape(h, w, 3).astype(np.float64) / 255.0


# Manifest

def _fmt(value: float) -> str:
    return repr(float(value))


def load_manifest(path, image_size: Optional[int] = None) -> Dataset:
    """Materialize every row of a manifest, in file order."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    root = path.parent
    samples, seen = [], set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{path}: empty file, expected a header") from None
        if tuple(header) != MANIFEST_HEADER:
            raise ManifestError(f"{path}:1: header must be {','.join(MANIFEST_HEADER)}")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_HEADER):
                raise ManifestError(f"{path}:{line_no}: expected {len(MANIFEST_HEADER)} fields,"
                                    f" got {len(row)}")
            cols = dict(zip(MANIFEST_HEADER, row))
            try:
                values = {_FIELD_OF_COLUMN[c]: float(cols[c]) for c in _FIELD_OF_COLUMN}
                label = int(cols["label"])
            except ValueError as exc:
                raise ManifestError(f"{path}:{line_no}: malformed value ({exc})") from None
            if label not in LABELS:
                raise ManifestError(f"{path}:{line_no}: label {label} out of range {{0,1,2}}")
            if cols["id"] in seen:
                raise ManifestError(f"{path}:{line_no}: duplicate id {cols['id']!r}")
            seen.add(cols["id"])
            record = StructuredRecord(evac_zone=cols["evac_zone"], **values)
            try:
                record.validate()
            except ValueError as exc:
                raise ManifestError(f"{path}:{line_no}: {exc}") from None
            image_file = root / cols["image_path"]
            if not image_file.exists():
                raise FileNotFoundError(f"{path}:{line_no}: image not found: {image_file}")
            image = read_ppm(image_file)
            if image_size is not None and image.shape[:2] != (image_size, image_size):
                raise ManifestError(f"{path}:{line_no}: image is {image.shape[0]}x{image.shape[1]},"
                                    f" expected {image_size}x{image_size}")
            samples.append(BuildingSample(cols["id"], image, record, label, cols["image_path"]))
    return Dataset(samples)


def manifest_text(dataset: Dataset) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_HEADER)
    for s in dataset:
        r = s.record
        writer.writerow([s.id, s.image_path, r.evac_zone, _fmt(r.building_age),
                         _fmt(r.building_value), _fmt(r.dist_track), _fmt(r.wind_speed), s.label])
    return buf.getvalue()


def write_manifest(dataset: Dataset, path, write_images: bool = True) -> None:
    """Write the manifest (and, optionally, every image) next to ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    for s in dataset:
        if not s.image_path:
            s.image_path = f"images/{s.id}.ppm"
        if write_images:
            image_file = path.parent / s.image_path
            image_file.parent.mkdir(parents=True, exist_ok=True)
            write_ppm(image_file, s.image)
    path.write_text(manifest_text(dataset), encoding="utf-8")


# Summaries

@dataclass
class DatasetSummary:
    class_counts: list
    feature_means: dict
    feature_stds: dict
    digest: str = ""

    @property
    def size(self) -> int:
        return int(sum(self.class_counts))

    def validate(self) -> None:
        if any(c < 0 for c in self.class_counts):
            raise ValueError("negative class count")
        if any(s < 0 for s in self.feature_stds.values()):
            raise ValueError("negative standard deviation")


def summarize(dataset: Dataset) -> DatasetSummary:
    if not len(dataset):
        raise ValueError("cannot summarize an empty dataset")
    counts = np.bincount(dataset.labels, minlength=len(LABELS)).tolist()
    values = np.array([[getattr(r, n) for n in CONTINUOUS] for r in dataset.records])
    digest = hashlib.sha256(manifest_text(dataset).encode("utf-8")).hexdigest()
    return DatasetSummary(
        class_counts=counts,
        feature_means=dict(zip(CONTINUOUS, values.mean(axis=0).tolist())),
        feature_stds=dict(zip(CONTINUOUS, values.std(axis=0).tolist())),
        digest=digest)


def fit_normalization(train: Dataset) -> tuple[list, list]:
    """Feature means/stds from the training split only."""
    return fit_stats(train.records)
