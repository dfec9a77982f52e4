"""Per-subject feature blocks, normalisation, assembly and CSV persistence."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import radiomics, texture, thickness
from .errors import AssemblyError, DegenerateInputError, FormatError, ValidationError
from .volume_io import read_labelmap, read_nifti

BLOCK_ORDER = ("radiomics", "texture", "thickness", "deep")
# sizes for a 132-structure atlas with 102 cortical regions
PAPER_BLOCK_SIZES = {"radiomics": 11 * 132, "texture": 90 * 300, "thickness": 2 * 102, "deep": 512}
DEEP_WIDTH = 512
DIAGNOSES = ("CN", "MCI", "AD")
TASKS = {"AD-vs-CN": ("AD", "CN"), "MCI-vs-CN": ("MCI", "CN")}
FLOAT_FMT = "{:.17g}"


def canonical_task(task: str) -> str:
    for t in TASKS:
        if t.lower() == str(task).lower():
            return t
    raise ValueError(f"unknown task {task!r}; expected one of {list(TASKS)}")


@dataclass(frozen=True, eq=False)
class FeatureBlock:
    values: np.ndarray
    names: tuple[str, ...]
    source: str = ""
    version: str = ""
    missing: np.ndarray | None = None  # per-region flags, sidecar only

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).ravel()
        if len(v) != len(self.names):
            raise ValidationError(f"block has {len(v)} values but {len(self.names)} names")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "names", tuple(self.names))


def _check_block_shape(name: str, block: FeatureBlock):
    n = len(block.values)
    if name == "radiomics" and n % radiomics.N_FEATURES:
        raise ValidationError(f"radiomics block length {n} is not a multiple of {radiomics.N_FEATURES}")
    if name == "thickness" and n % 2:
        raise ValidationError(f"thickness block length {n} is odd")
    if name == "deep" and n != DEEP_WIDTH:
        raise ValidationError(f"deep block length {n} != {DEEP_WIDTH}")


@dataclass(frozen=True, eq=False)
class SubjectRecord:
    subject_id: str
    diagnosis: str
    age: float | None = None
    blocks: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.diagnosis not in DIAGNOSES:
            raise ValidationError(f"subject {self.subject_id}: diagnosis {self.diagnosis!r} not in {DIAGNOSES}")
        for name, block in self.blocks.items():
            if name not in BLOCK_ORDER:
                raise ValidationError(f"unknown block {name!r}")
            _check_block_shape(name, block)


def check_paper_sizes(record: SubjectRecord):
    """Enforce the full-atlas block widths (1452 / 27000 / 204 / 512)."""
    for name, block in record.blocks.items():
        if len(block.values) != PAPER_BLOCK_SIZES[name]:
            raise ValidationError(
                f"subject {record.subject_id}: block {name} has {len(block.values)} columns, "
                f"expected {PAPER_BLOCK_SIZES[name]}"
            )


def normalize_blocks(record: SubjectRecord, icv: float) -> SubjectRecord:
    """Divide radiomics volume features by intracranial volume; returns a new record."""
    if not (icv > 0 and math.isfinite(icv)):
        raise DegenerateInputError(f"intracranial volume must be positive, got {icv}")
    blocks = dict(record.blocks)
    if "radiomics" in blocks:
        b = blocks["radiomics"]
        suffixes = tuple(f"_{f}" for f in radiomics.VOLUME_FEATURES)
        is_vol = np.array([n.endswith(suffixes) for n in b.names])
        v = b.values.copy()
        v[is_vol] = v[is_vol] / icv
        blocks["radiomics"] = replace(b, values=v)
    return replace(record, blocks=blocks)


# ---------------------------------------------------------- matrices


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    column_names: tuple[str, ...]
    subject_ids: tuple[str, ...]
    labels: np.ndarray
    values: np.ndarray
    task: str

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValidationError("feature values must be 2D")
        n, p = values.shape
        if len(self.subject_ids) != n or len(self.labels) != n:
            raise ValidationError("subject ids / labels do not match the number of rows")
        if len(self.column_names) != p:
            raise ValidationError(f"{p} value columns but {len(self.column_names)} names")
        if len(set(self.column_names)) != p:
            dup = sorted({c for c in self.column_names if self.column_names.count(c) > 1})[:5]
            raise ValidationError(f"duplicate column names, e.g. {dup}")
        if not np.all(np.isfinite(values)):
            raise ValidationError("feature matrix contains NaN or Inf")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))
        object.__setattr__(self, "column_names", tuple(self.column_names))
        object.__setattr__(self, "subject_ids", tuple(self.subject_ids))
        object.__setattr__(self, "task", canonical_task(self.task))

    @property
    def shape(self):
        return self.values.shape

    def rows(self, idx) -> "FeatureMatrix":
        idx = np.asarray(idx, dtype=np.int64)
        return FeatureMatrix(self.column_names, tuple(self.subject_ids[i] for i in idx),
                             self.labels[idx], self.values[idx], self.task)


@dataclass(frozen=True, eq=False)
class ZScoreStats:
    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray


def zscore_arrays(train: np.ndarray, *others: np.ndarray):
    """Standardise with train-only column means and population stds.

    Zero-variance columns map to 0 everywhere and are flagged constant.
    """
    train = np.asarray(train, dtype=np.float64)
    if train.shape[0] == 0:
        raise DegenerateInputError("cannot fit standardisation on an empty training set")
    mean = train.mean(axis=0)
    std = train.std(axis=0)
    constant = std == 0
    safe = np.where(constant, 1.0, std)

    def apply(a):
        z = (np.asarray(a, dtype=np.float64) - mean) / safe
        z[:, constant] = 0.0
        return z

    return [apply(train)] + [apply(o) for o in others], ZScoreStats(mean, std, constant)


def zscore_fit_apply(train: FeatureMatrix, *others: FeatureMatrix):
    arrays, stats = zscore_arrays(train.values, *(o.values for o in others))
    out = [replace(m, values=a) for m, a in zip((train, *others), arrays)]
    return out, stats


def assemble(records: Iterable[SubjectRecord], task: str, include_blocks: Iterable[str],
             include_age: bool = False) -> FeatureMatrix:
    """Concatenate the requested blocks (fixed order) plus optional age.

    Rows are filtered to the task's two diagnoses, sorted by subject id;
    the disease class is label 1.
    """
    task = canonical_task(task)
    positive, negative = TASKS[task]
    include = [b for b in BLOCK_ORDER if b in set(include_blocks)]
    unknown = set(include_blocks) - set(BLOCK_ORDER)
    if unknown:
        raise AssemblyError(f"unknown blocks {sorted(unknown)}")
    if not include and not include_age:
        raise AssemblyError("nothing to assemble: no blocks and no age")
    recs = sorted((r for r in records if r.diagnosis in (positive, negative)), key=lambda r: r.subject_id)
    if not recs:
        raise AssemblyError(f"no subjects with diagnosis {positive} or {negative}")
    ids = [r.subject_id for r in recs]
    if len(set(ids)) != len(ids):
        raise AssemblyError("duplicate subject ids")
    columns = None
    rows = []
    for r in recs:
        parts, names = [], []
        for b in include:
            if b not in r.blocks:
                raise AssemblyError(f"subject {r.subject_id} is missing block {b!r}")
            parts.append(r.blocks[b].values)
            names.extend(r.blocks[b].names)
        if include_age:
            if r.age is None or not math.isfinite(r.age):
                raise AssemblyError(f"subject {r.subject_id} has no age but include_age was requested")
            parts.append(np.array([float(r.age)]))
            names.append("age")
        if columns is None:
            columns = names
        elif names != columns:
            raise AssemblyError(f"subject {r.subject_id}: block columns differ from other subjects")
        rows.append(np.concatenate(parts) if parts else np.zeros(0))
    labels = [1 if r.diagnosis == positive else 0 for r in recs]
    return FeatureMatrix(tuple(columns), tuple(ids), np.array(labels), np.vstack(rows), task)


# --------------------------------------------------------------- CSV I/O


def _fmt(x) -> str:
    return FLOAT_FMT.format(float(x))


def write_matrix_csv(path, m: FeatureMatrix):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "label", "task", *m.column_names])
        for sid, lab, row in zip(m.subject_ids, m.labels, m.values):
            w.writerow([sid, int(lab), m.task, *map(_fmt, row)])


def read_matrix_csv(path) -> FeatureMatrix:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:3] != ["subject_id", "label", "task"]:
            raise FormatError(f"{path}: header must start with subject_id,label,task")
        ids, labels, vals, tasks = [], [], [], set()
        for row_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise FormatError(f"{path}: row {row_no} has {len(row)} fields, expected {len(header)}")
            ids.append(row[0])
            labels.append(int(row[1]))
            tasks.add(row[2])
            vals.append([float(v) for v in row[3:]])
    if len(tasks) > 1:
        raise FormatError(f"{path}: mixed tasks {sorted(tasks)}")
    task = tasks.pop() if tasks else "AD-vs-CN"
    values = np.array(vals, dtype=np.float64).reshape(len(ids), len(header) - 3)
    return FeatureMatrix(tuple(header[3:]), tuple(ids), np.array(labels), values, task)


def write_block_csv(path, subject_ids: Sequence[str], names: Sequence[str], rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", *names])
        for sid, row in zip(subject_ids, rows):
            w.writerow([sid, *map(_fmt, row)])


def read_block_csv(path):
    """Returns ``(names, {subject_id: values})``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "subject_id":
            raise FormatError(f"{path}: first column must be subject_id")
        out = {}
        for row_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise FormatError(f"{path}: row {row_no} has {len(row) - 1} values, expected {len(header) - 1}")
            if row[0] in out:
                raise FormatError(f"{path}: duplicate subject_id {row[0]!r} at row {row_no}")
            out[row[0]] = np.array([float(v) for v in row[1:]])
    return header[1:], out


def import_deep_features(path) -> dict[str, np.ndarray]:
    """Read externally extracted 512-wide deep features keyed by subject."""
    expected = ["subject_id"] + [f"f{i}" for i in range(DEEP_WIDTH)]
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != expected:
            raise FormatError(f"{path}: header must be subject_id,f0..f{DEEP_WIDTH - 1}")
        out = {}
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) - 1 != DEEP_WIDTH:
                raise FormatError(f"{path}: row {row_no} has {len(row) - 1} features, expected {DEEP_WIDTH}")
            sid = row[0].strip()
            if sid in out:
                raise FormatError(f"{path}: duplicate subject_id {sid!r} at row {row_no}")
            try:
                vals = np.array([float(v) for v in row[1:]])
            except ValueError as exc:
                raise FormatError(f"{path}: row {row_no}: {exc}") from None
            if not np.all(np.isfinite(vals)):
                raise FormatError(f"{path}: row {row_no} contains non-finite values")
            out[sid] = vals
    return out


def deep_column_names() -> list[str]:
    return [f"deep_f{i}" for i in range(DEEP_WIDTH)]


# -------------------------------------------------------------- manifest


@dataclass(frozen=True)
class ManifestRow:
    subject_id: str
    diagnosis: str
    age: float | None
    volume_path: Path
    labelmap_path: Path


MANIFEST_HEADER = ["subject_id", "diagnosis", "age", "volume_path", "labelmap_path"]


def read_manifest(path) -> list[ManifestRow]:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != MANIFEST_HEADER:
            raise FormatError(f"{path}: manifest header must be {','.join(MANIFEST_HEADER)}")
        rows = []
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise FormatError(f"{path}: row {row_no} has {len(row)} fields, expected 5")
            sid, dx, age, vol, lab = (c.strip() for c in row)
            if dx not in DIAGNOSES:
                raise FormatError(f"{path}: row {row_no}: diagnosis {dx!r} not in {DIAGNOSES}")
            rows.append(ManifestRow(sid, dx, float(age) if age else None,
                                    (path.parent / vol), (path.parent / lab)))
    return rows


def append_manifest_row(path, row: ManifestRow, relative_to=None):
    """Append ``row``; an existing row with the same subject id is replaced
    in place so re-running a generator leaves the manifest unchanged."""
    path = Path(path)
    base = Path(relative_to or path.parent)
    age = "" if row.age is None else repr(float(row.age))
    line = [row.subject_id, row.diagnosis, age,
            _relpath(row.volume_path, base), _relpath(row.labelmap_path, base)]
    rows = []
    if path.exists() and path.stat().st_size > 0:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != MANIFEST_HEADER:
                raise FormatError(f"{path}: manifest header must be {','.join(MANIFEST_HEADER)}")
            rows = [r for r in reader if r]
    for i, r in enumerate(rows):
        if r[0] == row.subject_id:
            rows[i] = line
            break
    else:
        rows.append(line)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        w.writerows(rows)


def _relpath(p, base):
    try:
        return str(Path(p).resolve().relative_to(Path(base).resolve()))
    except ValueError:
        return str(Path(p).resolve())


# ------------------------------------------------------------ extraction


def extract_subject(volume_path, labelmap_path, region_table_path, blocks: Iterable[str],
                    texture_params: texture.TextureParams = texture.TextureParams(),
                    thickness_params: thickness.ThicknessParams = thickness.ThicknessParams(),
                    hippocampus_names=texture.DEFAULT_HIPPOCAMPUS):
    """Run the image-derived extractors for one subject.

    Returns ``(blocks, icv)`` where ``blocks`` maps block name to
    :class:`FeatureBlock` (raw, not yet ICV-normalised).
    """
    lm = read_labelmap(labelmap_path, region_table_path)
    blocks = set(blocks)
    out = {}
    if "radiomics" in blocks:
        values, names, missing = radiomics.radiomics_block(lm)
        out["radiomics"] = FeatureBlock(values, names, "radiomics", "1", missing)
    if "texture" in blocks:
        v = read_nifti(volume_path)
        tf = texture.hippocampal_texture_features(v, lm, texture_params, hippocampus_names)
        out["texture"] = FeatureBlock(tf.values, tf.names, "texture", "1")
    if "thickness" in blocks:
        tm = thickness.thickness_map(lm, thickness_params)
        values, names, missing = thickness.region_thickness_stats(tm, lm)
        out["thickness"] = FeatureBlock(values, names, "thickness", "1", missing)
    return out, radiomics.intracranial_volume(lm)
