"""Volumes, grades, case manifests and fold splits.

Volume files use a small fixed binary layout::

    b"MOONVOL1"                 8 bytes
    u32 H, u32 W, u32 D         little-endian
    f32 sx, f32 sy, f32 sz      voxel spacing in mm
    f32 * (H*W*D)               intensities, H outer, D inner
"""

from __future__ import annotations

import enum
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ORGANS = ("esophagus", "liver", "spleen")
MANIFEST_VERSION = 1
VOLUME_MAGIC = b"MOONVOL1"
_HEADER = struct.Struct("<8s3I3f")


class FormatError(ValueError):
    """Malformed volume/manifest file. ``offset`` is the byte offset of the fault."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class SplitError(ValueError):
    pass


class Grade(enum.IntEnum):
    G1 = 1  # mild
    G2 = 2  # moderate
    G3 = 3  # severe

    @classmethod
    def parse(cls, value: "Grade | str | int") -> "Grade":
        if isinstance(value, Grade):
            return value
        if isinstance(value, str):
            try:
                return cls[value.upper()]
            except KeyError:
                raise ValueError(f"unknown grade {value!r}") from None
        return cls(int(value))


TASKS = ("geG2", "G3")


@dataclass(frozen=True)
class OrdinalTarget:
    """Cumulative encoding: t1 = [grade >= G2], t2 = [grade == G3]."""

    t1: int
    t2: int

    def __post_init__(self):
        if self.t1 not in (0, 1) or self.t2 not in (0, 1):
            raise ValueError("ordinal target bits must be 0/1")
        if self.t2 and not self.t1:
            raise ValueError("non-monotone ordinal target")

    def as_tuple(self) -> tuple[int, int]:
        return (self.t1, self.t2)


def ordinal_encode(grade) -> OrdinalTarget:
    g = Grade.parse(grade)
    return OrdinalTarget(int(g >= Grade.G2), int(g == Grade.G3))


def binarize_grade(grade, task: str) -> int:
    """Binary label of ``grade`` for task ``"geG2"`` (>=G2) or ``"G3"``."""
    target = ordinal_encode(grade)
    if task in ("geG2", ">=G2", "≥G2"):
        return target.t1
    if task == "G3":
        return target.t2
    raise ValueError(f"unknown task {task!r}")


@dataclass
class RoiVolume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"volume must be 3D, got shape {data.shape}")
        if min(data.shape) < 1:
            raise ValueError(f"volume dims must be >= 1, got {data.shape}")
        data = data.astype(np.float32, copy=False)
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite intensities")
        self.data = data
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3:
            raise ValueError("spacing must have three components")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    def __eq__(self, other):
        if not isinstance(other, RoiVolume):
            return NotImplemented
        return (
            self.dims == other.dims
            and np.array_equal(np.float32(self.spacing), np.float32(other.spacing))
            and self.data.tobytes() == other.data.tobytes()
        )


def volume_to_bytes(vol: RoiVolume) -> bytes:
    h, w, d = vol.dims
    header = _HEADER.pack(VOLUME_MAGIC, h, w, d, *vol.spacing)
    payload = np.ascontiguousarray(vol.data, dtype="<f4").tobytes(order="C")
    return header + payload


def volume_from_bytes(buf: bytes) -> RoiVolume:
    if len(buf) < len(VOLUME_MAGIC) or buf[: len(VOLUME_MAGIC)] != VOLUME_MAGIC:
        raise FormatError("bad magic, expected MOONVOL1", offset=0)
    if len(buf) < _HEADER.size:
        raise FormatError("truncated header", offset=len(buf))
    _, h, w, d, sx, sy, sz = _HEADER.unpack_from(buf, 0)
    if min(h, w, d) < 1:
        raise FormatError(f"invalid dims ({h},{w},{d})", offset=8)
    expected = h * w * d * 4
    payload = len(buf) - _HEADER.size
    if payload != expected:
        raise FormatError(
            f"dim/payload mismatch: dims ({h},{w},{d}) need {h * w * d} values, "
            f"payload holds {payload / 4:g}",
            offset=_HEADER.size + min(payload, expected),
        )
    data = np.frombuffer(buf, dtype="<f4", offset=_HEADER.size).reshape(h, w, d)
    try:
        return RoiVolume(data.astype(np.float32), (sx, sy, sz))
    except ValueError as exc:
        raise FormatError(str(exc), offset=_HEADER.size) from None


def write_volume(vol: RoiVolume, path) -> None:
    Path(path).write_bytes(volume_to_bytes(vol))


def read_volume(path) -> RoiVolume:
    return volume_from_bytes(Path(path).read_bytes())


@dataclass
class CaseRecord:
    id: str
    volumes: dict[str, str]
    grade: Grade
    lesion_mask: str | None = None

    def __post_init__(self):
        self.grade = Grade.parse(self.grade)
        missing = [o for o in ORGANS if o not in self.volumes]
        if missing:
            raise ValueError(f"case {self.id}: missing organ volumes {missing}")

    def to_json(self) -> dict:
        out = {"id": self.id, "grade": self.grade.name, "volumes": dict(self.volumes)}
        if self.lesion_mask is not None:
            out["lesion_mask"] = self.lesion_mask
        return out


@dataclass
class DatasetManifest:
    cases: list[CaseRecord]
    root: Path = field(default_factory=Path)
    # False: raw crops; True: background outside the organ zeroed
    masked: bool = False
    version: int = MANIFEST_VERSION

    def __post_init__(self):
        ids = [c.id for c in self.cases]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate case ids in manifest")

    def __len__(self):
        return len(self.cases)

    @property
    def ids(self) -> list[str]:
        return [c.id for c in self.cases]

    def by_id(self) -> dict[str, CaseRecord]:
        return {c.id: c for c in self.cases}

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def subset(self, ids) -> "DatasetManifest":
        lookup = self.by_id()
        return DatasetManifest([lookup[i] for i in ids], self.root, self.masked)

    def load_case(self, case: CaseRecord) -> tuple[dict[str, RoiVolume], np.ndarray | None]:
        vols = {}
        for organ in ORGANS:
            path = self.resolve(case.volumes[organ])
            if not path.exists():
                raise FileNotFoundError(f"case {case.id}: {organ} volume {path} not found")
            vols[organ] = read_volume(path)
        mask = None
        if case.lesion_mask is not None:
            mask = read_volume(self.resolve(case.lesion_mask)).data > 0.5
        return vols, mask

    def to_json(self) -> dict:
        return {
            "version": self.version,
            "masked": self.masked,
            "cases": [c.to_json() for c in self.cases],
        }

    def save(self, path) -> None:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def from_json(cls, doc: dict, root=".") -> "DatasetManifest":
        if doc.get("version") != MANIFEST_VERSION:
            raise FormatError(f"unsupported manifest version {doc.get('version')!r}")
        cases = [
            CaseRecord(
                id=str(c["id"]),
                volumes=dict(c["volumes"]),
                grade=c["grade"],
                lesion_mask=c.get("lesion_mask"),
            )
            for c in doc["cases"]
        ]
        return cls(cases, Path(root), bool(doc.get("masked", False)))

    @classmethod
    def load(cls, path, check_files: bool = True) -> "DatasetManifest":
        path = Path(path)
        manifest = cls.from_json(json.loads(path.read_text()), root=path.parent)
        if check_files:
            for case in manifest.cases:
                refs = list(case.volumes.values())
                if case.lesion_mask:
                    refs.append(case.lesion_mask)
                for ref in refs:
                    if not manifest.resolve(ref).exists():
                        raise FileNotFoundError(f"case {case.id}: {ref} not found")
        return manifest


@dataclass
class FoldSplit:
    k: int
    seed: int
    folds: list[list[str]]

    def train_ids(self, i: int) -> list[str]:
        return [cid for j, fold in enumerate(self.folds) if j != i for cid in fold]

    def to_json(self) -> dict:
        return {"k": self.k, "seed": self.seed, "folds": self.folds}

    @classmethod
    def from_json(cls, doc: dict) -> "FoldSplit":
        return cls(int(doc["k"]), int(doc["seed"]), [list(f) for f in doc["folds"]])


def stratified_kfold(manifest: DatasetManifest, k: int, seed: int) -> FoldSplit:
    """Shuffle each grade's cases, then deal them round-robin into ``k`` folds.

    The dealing position carries over from one grade to the next, so total
    fold sizes differ by at most one as well as per-grade counts.
    """
    if k < 2:
        raise SplitError("k must be >= 2")
    rng = np.random.default_rng(seed)
    folds: list[list[str]] = [[] for _ in range(k)]
    pos = 0
    for grade in Grade:
        ids = sorted(c.id for c in manifest.cases if c.grade == grade)
        if len(ids) < k:
            raise SplitError(f"grade {grade.name} has {len(ids)} cases, fewer than k={k}")
        for idx in rng.permutation(len(ids)):
            folds[pos % k].append(ids[idx])
            pos += 1
    return FoldSplit(k, seed, folds)


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)
