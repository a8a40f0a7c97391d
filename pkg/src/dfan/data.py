"""Semantic matrices, feature datasets, class splits and their file formats.

Feature files (little-endian)::

    b"DFZ1" | u32 version=1 | u32 count | u32 N | u32 D
    per record: u32 label | D x f32 global | N x D x f32 local (row-major)

Semantic matrix files are a ``u32 C, u32 M`` header followed by ``C x M``
f32 values, with a UTF-8 manifest of ``index<TAB>class_id`` lines next to
them. Record labels are row indices into the semantic matrix.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

FEATURE_MAGIC = b"DFZ1"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIIII")
_SM_HEADER = struct.Struct("<II")
ROLES = ("train", "test-seen", "test-unseen")


class FormatError(ValueError):
    """Bad magic, version or layout in a binary file."""


class LengthError(FormatError):
    """Payload shorter or longer than its header promises."""


class ConsistencyError(ValueError):
    """Matrix and manifest (or other paired inputs) disagree."""


class SplitError(ValueError):
    """A class split violates its invariants."""


@dataclass(frozen=True)
class SemanticMatrix:
    values: np.ndarray
    class_ids: tuple[str, ...]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "class_ids", tuple(str(c) for c in self.class_ids))
        if values.ndim != 2:
            raise ConsistencyError(f"semantic matrix must be 2-d, got shape {values.shape}")
        if values.shape[0] != len(self.class_ids):
            raise ConsistencyError(
                f"semantic matrix has {values.shape[0]} rows but {len(self.class_ids)} class ids"
            )
        if len(set(self.class_ids)) != len(self.class_ids):
            dup = next(c for c in self.class_ids if self.class_ids.count(c) > 1)
            raise ConsistencyError(f"duplicate class id {dup!r}")
        if np.isnan(values).any():
            raise ConsistencyError("semantic matrix contains NaN")

    @property
    def n_classes(self) -> int:
        return self.values.shape[0]

    @property
    def n_attributes(self) -> int:
        return self.values.shape[1]

    def index_of(self, class_id: str) -> int:
        return self.class_ids.index(str(class_id))


@dataclass(frozen=True)
class ClassSplit:
    """Seen and unseen classes, stored as sorted row indices."""

    seen: tuple[int, ...]
    unseen: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "seen", tuple(sorted(int(c) for c in self.seen)))
        object.__setattr__(self, "unseen", tuple(sorted(int(c) for c in self.unseen)))

    @property
    def all_classes(self) -> tuple[int, ...]:
        return tuple(sorted(set(self.seen) | set(self.unseen)))

    def seen_mask(self, n_classes: int) -> np.ndarray:
        mask = np.zeros(n_classes, dtype=bool)
        mask[list(self.seen)] = True
        return mask


@dataclass
class FeatureRecord:
    local: np.ndarray
    global_vec: np.ndarray
    label: int

    def __post_init__(self):
        self.local = np.asarray(self.local, dtype=np.float32)
        self.global_vec = np.asarray(self.global_vec, dtype=np.float32)
        if self.local.ndim != 2 or self.global_vec.shape != (self.local.shape[1],):
            raise ConsistencyError(
                f"record shapes disagree: local {self.local.shape}, global {self.global_vec.shape}"
            )
        if not (np.isfinite(self.local).all() and np.isfinite(self.global_vec).all()):
            raise ConsistencyError("record contains non-finite values")

    @property
    def N(self) -> int:
        return self.local.shape[0]

    @property
    def D(self) -> int:
        return self.local.shape[1]


@dataclass
class FeatureDataset:
    """Stacked records: ``local`` is (n, N, D), ``global_`` is (n, D)."""

    local: np.ndarray
    global_: np.ndarray
    labels: np.ndarray
    role: str = "train"
    N: int = field(default=0)
    D: int = field(default=0)

    def __post_init__(self):
        self.local = np.ascontiguousarray(self.local, dtype=np.float32)
        self.global_ = np.ascontiguousarray(self.global_, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.role not in ROLES:
            raise ValueError(f"unknown dataset role {self.role!r}")
        if self.local.ndim != 3:
            if self.local.size == 0 and self.N and self.D:
                self.local = self.local.reshape(0, self.N, self.D)
            else:
                raise ConsistencyError(f"local features must be (n, N, D), got {self.local.shape}")
        n, N, D = self.local.shape
        if self.global_.size == 0 and n == 0:
            self.global_ = self.global_.reshape(0, D)
        if self.global_.shape != (n, D) or self.labels.shape != (n,):
            raise ConsistencyError(
                f"inconsistent dataset shapes: local {self.local.shape}, "
                f"global {self.global_.shape}, labels {self.labels.shape}"
            )
        if np.any(self.labels < 0):
            raise ConsistencyError("negative class label")
        self.N, self.D = N, D

    def __len__(self) -> int:
        return self.labels.shape[0]

    @classmethod
    def from_records(cls, records: Sequence[FeatureRecord], role="train", N=0, D=0):
        if not records:
            return cls(np.zeros((0, N, D)), np.zeros((0, D)), np.zeros(0), role=role, N=N, D=D)
        shapes = {r.local.shape for r in records}
        if len(shapes) != 1:
            raise ConsistencyError(f"records disagree on (N, D): {sorted(shapes)}")
        return cls(
            np.stack([r.local for r in records]),
            np.stack([r.global_vec for r in records]),
            np.array([r.label for r in records]),
            role=role,
        )

    def records(self) -> list[FeatureRecord]:
        return [
            FeatureRecord(self.local[i], self.global_[i], int(self.labels[i]))
            for i in range(len(self))
        ]

    def normalized(self) -> "FeatureDataset":
        """Copy with every region vector and global vector scaled to unit L2 norm."""
        def unit(x):
            n = np.linalg.norm(x, axis=-1, keepdims=True)
            return x / np.maximum(n, 1e-12)

        return FeatureDataset(unit(self.local), unit(self.global_), self.labels.copy(), self.role)


# -- feature files -----------------------------------------------------------


def write_feature_file(ds: FeatureDataset, path) -> None:
    n = len(ds)
    body = bytearray(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, n, ds.N, ds.D))
    glob = ds.global_.astype("<f4", copy=False)
    loc = ds.local.astype("<f4", copy=False)
    for i in range(n):
        body += struct.pack("<I", int(ds.labels[i]))
        body += glob[i].tobytes()
        body += loc[i].tobytes()
    Path(path).write_bytes(bytes(body))


def read_feature_file(path, role: str = "train") -> FeatureDataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise LengthError(f"{path}: header needs {_HEADER.size} bytes, file has {len(raw)}")
    magic, version, n, N, D = _HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {FEATURE_MAGIC!r}")
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    rec_bytes = 4 + 4 * D + 4 * N * D
    expected = _HEADER.size + n * rec_bytes
    if len(raw) != expected:
        raise LengthError(f"{path}: expected {expected} bytes, got {len(raw)}")
    rec_dtype = np.dtype([("label", "<u4"), ("global", "<f4", (D,)), ("local", "<f4", (N, D))])
    recs = np.frombuffer(raw, dtype=rec_dtype, count=n, offset=_HEADER.size)
    return FeatureDataset(
        recs["local"].reshape(n, N, D).astype(np.float32),
        recs["global"].reshape(n, D).astype(np.float32),
        recs["label"].astype(np.int64),
        role=role,
        N=N,
        D=D,
    )


# -- semantic matrix + manifest ------------------------------------------------


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".manifest.txt")


def write_semantic_matrix(sm: SemanticMatrix, path, manifest=None) -> None:
    C, M = sm.values.shape
    Path(path).write_bytes(_SM_HEADER.pack(C, M) + sm.values.astype("<f4").tobytes())
    lines = "".join(f"{i}\t{cid}\n" for i, cid in enumerate(sm.class_ids))
    Path(manifest or manifest_path(path)).write_text(lines, encoding="utf-8")


def read_manifest(path) -> list[str]:
    ids: dict[int, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            idx, cid = line.split("\t", 1)
            idx = int(idx)
        except ValueError:
            raise FormatError(f"{path}:{lineno}: expected 'index<TAB>class_id'") from None
        if idx in ids:
            raise ConsistencyError(f"{path}:{lineno}: duplicate row index {idx}")
        if cid in ids.values():
            raise ConsistencyError(f"{path}:{lineno}: duplicate class id {cid!r}")
        ids[idx] = cid
    if sorted(ids) != list(range(len(ids))):
        raise ConsistencyError(f"{path}: row indices are not 0..{len(ids) - 1}")
    return [ids[i] for i in range(len(ids))]


def load_semantic_matrix(path, manifest=None) -> SemanticMatrix:
    raw = Path(path).read_bytes()
    if len(raw) < _SM_HEADER.size:
        raise LengthError(f"{path}: header needs {_SM_HEADER.size} bytes, file has {len(raw)}")
    C, M = _SM_HEADER.unpack_from(raw)
    expected = _SM_HEADER.size + 4 * C * M
    if len(raw) != expected:
        raise LengthError(f"{path}: expected {expected} bytes, got {len(raw)}")
    values = np.frombuffer(raw, dtype="<f4", offset=_SM_HEADER.size).reshape(C, M)
    ids = read_manifest(manifest or manifest_path(path))
    if len(ids) != C:
        raise ConsistencyError(f"{path}: matrix has {C} rows but manifest lists {len(ids)} classes")
    return SemanticMatrix(values.astype(np.float32), tuple(ids))


# -- splits ---------------------------------------------------------------------


def write_split(split: ClassSplit, sm: SemanticMatrix, path) -> None:
    doc = {
        "seen": [sm.class_ids[i] for i in split.seen],
        "unseen": [sm.class_ids[i] for i in split.unseen],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def read_split(path, sm: SemanticMatrix) -> ClassSplit:
    """Read a JSON split of class ids and resolve it against ``sm``."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        seen_ids, unseen_ids = doc["seen"], doc["unseen"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: split must be a JSON object with 'seen' and 'unseen'") from exc

    def resolve(cid):
        try:
            return sm.index_of(cid)
        except ValueError:
            raise SplitError(f"class {cid!r} is not in the semantic matrix") from None

    seen = [resolve(c) for c in seen_ids]
    unseen = [resolve(c) for c in unseen_ids]
    for group in (seen, unseen):
        if len(set(group)) != len(group):
            dup = next(c for c in group if group.count(c) > 1)
            raise SplitError(f"class {sm.class_ids[dup]!r} is listed twice")
    return ClassSplit(tuple(seen), tuple(unseen))


def validate_split(split: ClassSplit, sm: SemanticMatrix, train: FeatureDataset | None = None) -> None:
    """Raise SplitError naming the first offending class id."""

    def name(i):
        return sm.class_ids[i] if 0 <= i < sm.n_classes else str(i)

    if not split.seen:
        raise SplitError("seen class set is empty")
    if not split.unseen:
        raise SplitError("unseen class set is empty")
    both = sorted(set(split.seen) & set(split.unseen))
    if both:
        raise SplitError(f"class {name(both[0])!r} is both seen and unseen")
    for c in split.seen + split.unseen:
        if not 0 <= c < sm.n_classes:
            raise SplitError(f"class {name(c)!r} is not in the semantic matrix")
    if train is not None:
        seen = set(split.seen)
        for label in np.unique(train.labels):
            if int(label) not in seen:
                raise SplitError(f"training record labeled with non-seen class {name(int(label))!r}")


# -- synthetic data ---------------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    n_seen: int = 10
    n_unseen: int = 5
    samples_per_class: int = 30
    M: int = 20
    N: int = 9
    D: int = 32
    sigma: float = 0.05
    seed: int = 7
    test_fraction: float = 0.2
    emphasis: float = 2.0

    def validate(self) -> None:
        for key in ("n_seen", "n_unseen", "samples_per_class", "M", "N", "D"):
            if getattr(self, key) < 1:
                raise ValueError(f"{key} must be >= 1, got {getattr(self, key)}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        if self.M > self.D:
            raise ValueError(f"M={self.M} exceeds D={self.D}: no {self.M} orthogonal prototypes exist")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ValueError(f"test_fraction must lie in [0, 1), got {self.test_fraction}")
        if self.samples_per_class < 2 and self.test_fraction > 0:
            raise ValueError("need at least 2 samples per class to hold out seen test samples")


@dataclass
class ZSLData:
    semantic: SemanticMatrix
    split: ClassSplit
    train: FeatureDataset
    test_seen: FeatureDataset
    test_unseen: FeatureDataset


@dataclass
class SyntheticZSL(ZSLData):
    prototypes: np.ndarray | None = None


def _class_semantics(rng, n_seen, n_unseen, M, background=0.1):
    """Rows built from attribute groups, in seen-then-unseen order.

    Attributes are partitioned into ``r = min(n_seen, M)`` groups. Seen class
    i is anchored on group ``i mod r``; each unseen class mixes two groups
    equally (disjoint pairs when there are enough groups), so unseen
    semantics are compositions of seen ones. A small uniform background keeps
    every row distinct. Rows are L2-normalised.
    """
    r = min(n_seen, M)
    groups = rng.permutation(np.arange(M) % r)
    V = np.zeros((r, M))
    V[groups, np.arange(M)] = rng.uniform(0.5, 1.0, M)
    U = background * rng.random((n_seen + n_unseen, r))
    U[np.arange(n_seen), np.arange(n_seen) % r] += 1.0
    if r >= 2 * n_unseen:
        # disjoint pairs
        perm = rng.permutation(r)
        chosen = [tuple(perm[2 * i : 2 * i + 2]) for i in range(n_unseen)]
    else:
        pairs = [(a, b) for a in range(r) for b in range(a + 1, r)] or [(0,)]
        picks = rng.choice(len(pairs), n_unseen, replace=len(pairs) < n_unseen)
        chosen = [pairs[k] for k in picks]
    for i, pair in enumerate(chosen):
        U[n_seen + i, list(pair)] += 1.0
    values = U @ V
    return values / np.linalg.norm(values, axis=1, keepdims=True)


def generate_synthetic(spec: SynthSpec) -> SyntheticZSL:
    """Draw a seeded desk-scale ZSL problem.

    Attributes correspond to orthonormal prototypes ``P`` (M x D). A sample
    of class ``c`` has regions ``z_r = sum_k a_c[k] u[r, k] P_k + noise``,
    where region ``r`` emphasises one attribute sampled in proportion to
    ``a_c`` and the emphasis weights ``u[:, k]`` average to exactly 1 over
    regions. The global vector is the region mean, so without noise it is
    ``a_c @ P`` and a linear decoder recovers the class semantics exactly.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    C = spec.n_seen + spec.n_unseen
    q, _ = np.linalg.qr(rng.standard_normal((spec.D, spec.M)))
    prototypes = q.T  # (M, D), orthonormal rows
    built = _class_semantics(rng, spec.n_seen, spec.n_unseen, spec.M)
    order = rng.permutation(C)  # row order[i] holds built class i
    values = np.empty_like(built)
    values[order] = built
    class_ids = tuple(f"class_{i:03d}" for i in range(C))
    split = ClassSplit(tuple(order[: spec.n_seen]), tuple(order[spec.n_seen :]))

    locals_, globals_, labels = [], [], []
    for c in range(C):
        probs = values[c] / values[c].sum()
        for _ in range(spec.samples_per_class):
            picked = rng.choice(spec.M, size=spec.N, p=probs)
            emph = np.ones((spec.N, spec.M))
            emph[np.arange(spec.N), picked] += spec.emphasis
            emph /= emph.mean(axis=0, keepdims=True)
            coeffs = emph * values[c]
            z = coeffs @ prototypes + spec.sigma * rng.standard_normal((spec.N, spec.D))
            locals_.append(z)
            globals_.append(z.mean(axis=0))
            labels.append(c)
    local = np.asarray(locals_, dtype=np.float32)
    glob = np.asarray(globals_, dtype=np.float32)
    labels = np.asarray(labels)

    seen = set(split.seen)
    train_idx, seen_test_idx, unseen_idx = [], [], []
    n_test = int(round(spec.samples_per_class * spec.test_fraction))
    for c in range(C):
        idx = np.flatnonzero(labels == c)
        if c in seen:
            held = rng.permutation(idx)
            seen_test_idx.extend(sorted(held[:n_test]))
            train_idx.extend(sorted(held[n_test:]))
        else:
            unseen_idx.extend(idx)

    def subset(idx, role):
        idx = np.asarray(idx, dtype=np.int64)
        return FeatureDataset(
            local[idx].reshape(len(idx), spec.N, spec.D),
            glob[idx].reshape(len(idx), spec.D),
            labels[idx],
            role=role,
            N=spec.N,
            D=spec.D,
        )

    return SyntheticZSL(
        SemanticMatrix(values.astype(np.float32), class_ids),
        split,
        subset(train_idx, "train"),
        subset(seen_test_idx, "test-seen"),
        subset(unseen_idx, "test-unseen"),
        prototypes,
    )


SYNTH_FILES = {
    "semantic": "semantic.bin",
    "manifest": "semantic.manifest.txt",
    "split": "split.json",
    "train": "train.dfz",
    "test_seen": "test_seen.dfz",
    "test_unseen": "test_unseen.dfz",
}


def write_synthetic(data: SyntheticZSL, out_dir) -> dict[str, Path]:
    """Write all synthetic files; either every file lands or none does."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    final = {k: out_dir / v for k, v in SYNTH_FILES.items()}
    tmp = {k: p.with_name(p.name + ".tmp") for k, p in final.items()}
    try:
        write_semantic_matrix(data.semantic, tmp["semantic"], manifest=tmp["manifest"])
        write_split(data.split, data.semantic, tmp["split"])
        write_feature_file(data.train, tmp["train"])
        write_feature_file(data.test_seen, tmp["test_seen"])
        write_feature_file(data.test_unseen, tmp["test_unseen"])
        for k in final:
            os.replace(tmp[k], final[k])
    except BaseException:
        for p in tmp.values():
            p.unlink(missing_ok=True)
        raise
    return final
