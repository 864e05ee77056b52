"""Datasets, synthetic long-tailed generation, meta-text and file formats.

File formats:

* embeddings: ``b"EMB1"``, little-endian ``u32 n``, ``u32 d``, then ``n * d``
  little-endian float32 values row-major; item ids live in ``<path>.ids``,
  one per line.
* labels: UTF-8 JSON Lines, ``{"id": ..., "labels": [...], "split": ...}``.
* vocabulary: UTF-8 text, one class name per line, order significant.
"""

from __future__ import annotations

import json
import logging
import math
import re
import struct
from collections import Counter
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import (
    BadMagic,
    CountMismatch,
    DuplicateId,
    MalformedLine,
    SeparationUnsatisfiable,
    TruncatedFile,
    UnknownLabel,
    ValidationError,
)

logger = logging.getLogger(__name__)

DEFAULT_VOCABULARY = (
    "Adenopathy",
    "Atelectasis",
    "Azygos Lobe",
    "Calcification of the Aorta",
    "Cardiomegaly",
    "Clavicle Fracture",
    "Consolidation",
    "Edema",
    "Emphysema",
    "Enlarged Cardiomediastinum",
    "Fibrosis",
    "Fissure",
    "Fracture",
    "Granuloma",
    "Hernia",
    "Hydropneumothorax",
    "Infarction",
    "Infiltration",
    "Kyphosis",
    "Lobar Atelectasis",
    "Lung Lesion",
    "Lung Opacity",
    "Mass",
    "No Finding",
    "Nodule",
    "Pleural Effusion",
    "Pleural Other",
    "Pleural Thickening",
    "Pneumomediastinum",
    "Pneumonia",
    "Pneumoperitoneum",
    "Pneumothorax",
    "Pulmonary Edema",
    "Pulmonary Effusion",
    "Rib Fracture",
    "Rounded Atelectasis",
    "Subcutaneous Emphysema",
    "Support Devices",
    "Tortuous Aorta",
    "Tuberculosis",
)

SPLITS = ("train", "test")
EMB_MAGIC = b"EMB1"
_HEADER = struct.Struct("<4sII")


# ---------------------------------------------------------------------------
# containers


def group_of(item_id: str) -> str:
    """Patient-like grouping key: the id up to its last ``-``."""
    return item_id.rsplit("-", 1)[0]


@dataclass
class LabeledDataset:
    ids: list
    label_sets: list
    splits: list
    vocabulary: list

    def __post_init__(self):
        self.ids = [str(i) for i in self.ids]
        self.vocabulary = list(self.vocabulary)
        index = {name: j for j, name in enumerate(self.vocabulary)}
        if len(index) != len(self.vocabulary):
            raise ValidationError("vocabulary has duplicate names")
        if not (len(self.ids) == len(self.label_sets) == len(self.splits)):
            raise ValidationError("ids, label_sets and splits must align")
        seen = set()
        for item_id in self.ids:
            if item_id in seen:
                raise DuplicateId(f"duplicate id {item_id!r}")
            seen.add(item_id)
        canon = []
        for item_id, labels in zip(self.ids, self.label_sets):
            for lab in labels:
                if lab not in index:
                    raise UnknownLabel(f"item {item_id!r}: unknown label {lab!r}")
            canon.append(tuple(sorted(set(labels), key=index.__getitem__)))
        self.label_sets = canon
        for s in self.splits:
            if s not in SPLITS:
                raise ValidationError(f"split must be one of {SPLITS}, got {s!r}")
        self._index = index

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def n_classes(self) -> int:
        return len(self.vocabulary)

    def counts(self) -> np.ndarray:
        """Positive count per class, vocabulary order."""
        c = Counter(lab for labels in self.label_sets for lab in labels)
        return np.array([c.get(name, 0) for name in self.vocabulary], dtype=np.int64)

    def label_matrix(self, rows: Optional[Sequence[int]] = None) -> np.ndarray:
        rows = range(len(self)) if rows is None else rows
        rows = list(rows)
        Y = np.zeros((len(rows), self.n_classes), dtype=bool)
        for r, i in enumerate(rows):
            for lab in self.label_sets[i]:
                Y[r, self._index[lab]] = True
        return Y

    def indices(self, split: str) -> np.ndarray:
        return np.array([i for i, s in enumerate(self.splits) if s == split], dtype=np.int64)


@dataclass
class EmbeddingSet:
    ids: list
    matrix: np.ndarray

    def __post_init__(self):
        self.ids = [str(i) for i in self.ids]
        self.matrix = np.ascontiguousarray(self.matrix, dtype=np.float32)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.ids):
            raise CountMismatch(f"{len(self.ids)} ids for matrix of shape {self.matrix.shape}")
        if not np.all(np.isfinite(self.matrix)):
            raise ValidationError("embedding matrix has non-finite values")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def aligned_to(self, ids: Sequence[str]) -> np.ndarray:
        """Rows reordered to match ``ids``, as float64."""
        pos = {item_id: r for r, item_id in enumerate(self.ids)}
        try:
            rows = [pos[i] for i in ids]
        except KeyError as exc:
            raise CountMismatch(f"id {exc.args[0]!r} has no embedding") from None
        return self.matrix[rows].astype(np.float64)


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SynthConfig:
    n_classes: int = 40
    d: int = 64
    tier_classes: tuple = (11, 17, 12)
    tier_samples: tuple = (2000, 300, 40)
    co_occurrence: float = 0.1
    min_angle: float = 60.0
    noise: float = 2.0
    heavy_tail: bool = False
    noise_dof: float = 3.0
    group_size: int = 3
    test_fraction: float = 0.2
    seed: int = 0
    vocabulary: Optional[tuple] = None

    def __post_init__(self):
        self.tier_classes = tuple(int(c) for c in self.tier_classes)
        self.tier_samples = tuple(int(c) for c in self.tier_samples)
        if len(self.tier_classes) != 3 or len(self.tier_samples) != 3:
            raise ValidationError("tier_classes and tier_samples need three entries")
        if sum(self.tier_classes) != self.n_classes:
            raise ValidationError(f"tier class counts {self.tier_classes} do not sum to {self.n_classes}")
        if min(self.tier_classes) < 0 or min(self.tier_samples) < 1:
            raise ValidationError("tier counts must be positive")
        if self.d < 1 or self.noise < 0 or not 0 <= self.co_occurrence < 1:
            raise ValidationError("need d >= 1, noise >= 0, 0 <= co_occurrence < 1")
        if not 0 < self.test_fraction < 1 or self.group_size < 1:
            raise ValidationError("need 0 < test_fraction < 1 and group_size >= 1")

    def class_names(self) -> list:
        if self.vocabulary is not None:
            names = list(self.vocabulary)
        elif self.n_classes == len(DEFAULT_VOCABULARY):
            names = list(DEFAULT_VOCABULARY)
        else:
            names = [f"class{j:02d}" for j in range(self.n_classes)]
        if len(names) != self.n_classes:
            raise ValidationError("vocabulary length differs from n_classes")
        return names

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SyntheticData:
    dataset: LabeledDataset
    embeddings: EmbeddingSet
    directions: np.ndarray
    tiers: np.ndarray  # 0 head, 1 medium, 2 tail, per class


def separated_directions(n: int, d: int, min_angle_deg: float, rng, max_attempts: int = 10_000) -> np.ndarray:
    """Random unit vectors with every pairwise angle at least ``min_angle_deg``."""
    max_cos = math.cos(math.radians(min_angle_deg))
    out = []
    attempts = 0
    while len(out) < n:
        if attempts >= max_attempts:
            raise SeparationUnsatisfiable(
                f"placed {len(out)}/{n} directions in d={d} at {min_angle_deg} deg after {attempts} draws"
            )
        attempts += 1
        v = rng.standard_normal(d)
        v /= np.linalg.norm(v)
        if not out or np.max(np.asarray(out) @ v) <= max_cos:
            out.append(v)
    return np.asarray(out)


def split_groups(ids: Sequence[str], test_fraction: float, seed: int) -> list:
    """Assign whole groups to test so that ``round(test_fraction * G)`` groups are held out."""
    groups = sorted({group_of(i) for i in ids})
    rng = np.random.default_rng([seed, 0x5EED])
    n_test = int(round(test_fraction * len(groups)))
    test = {groups[j] for j in rng.permutation(len(groups))[:n_test]}
    return ["test" if group_of(i) in test else "train" for i in ids]


def generate_synthetic_longtail(cfg: SynthConfig) -> SyntheticData:
    """Long-tailed multi-label embeddings around separated class directions.

    Every class receives ``tier_samples[tier]`` primary items.  With
    probability ``co_occurrence`` an item gains a second label, and with its
    square a third; extra labels are drawn from head and medium classes in
    proportion to their quotas, so tail counts are exact.  An embedding is
    the normalized sum of its class directions plus isotropic noise of total
    scale ``noise`` (Student-t when ``heavy_tail``).
    """
    rng = np.random.default_rng(cfg.seed)
    names = cfg.class_names()
    C, d = cfg.n_classes, cfg.d
    directions = separated_directions(C, d, cfg.min_angle, rng)
    tiers = np.repeat([0, 1, 2], cfg.tier_classes)[rng.permutation(C)]
    quota = np.asarray(cfg.tier_samples)[tiers]

    primary = np.repeat(np.arange(C), quota)
    primary = primary[rng.permutation(primary.size)]
    extra_w = np.where(tiers < 2, quota, 0).astype(np.float64)
    n_items = primary.size
    n_extra = (rng.random(n_items) < cfg.co_occurrence).astype(int)
    n_extra += (rng.random(n_items) < cfg.co_occurrence**2) & (n_extra > 0)

    label_idx = []
    for j in range(n_items):
        labs = [int(primary[j])]
        if n_extra[j] and extra_w.sum() > 0:
            w = extra_w.copy()
            w[labs] = 0.0
            k = min(int(n_extra[j]), int(np.count_nonzero(w)))
            if k:
                labs += [int(c) for c in rng.choice(C, size=k, replace=False, p=w / w.sum())]
        label_idx.append(sorted(labs))

    signal = np.stack([directions[labs].sum(axis=0) for labs in label_idx])
    multi = n_extra > 0
    signal[multi] /= np.linalg.norm(signal[multi], axis=1, keepdims=True)
    noise = rng.standard_normal((n_items, d)) * (cfg.noise / math.sqrt(d))
    if cfg.heavy_tail:
        noise /= np.sqrt(rng.chisquare(cfg.noise_dof, size=(n_items, 1)) / cfg.noise_dof)
    X = signal + noise

    width = len(str(max(1, (n_items - 1) // cfg.group_size)))
    ids = [f"p{j // cfg.group_size:0{width}d}-{j % cfg.group_size}" for j in range(n_items)]
    splits = split_groups(ids, cfg.test_fraction, cfg.seed)
    dataset = LabeledDataset(
        ids=ids,
        label_sets=[[names[c] for c in labs] for labs in label_idx],
        splits=splits,
        vocabulary=names,
    )
    return SyntheticData(dataset, EmbeddingSet(ids, X), directions, tiers)


# ---------------------------------------------------------------------------
# text


def generate_meta_text(label_set: Iterable[str], vocabulary: Sequence[str]) -> str:
    """``"<name> is present"`` clauses in vocabulary order, comma separated."""
    index = {name: j for j, name in enumerate(vocabulary)}
    labels = set(label_set)
    for lab in labels:
        if lab not in index:
            raise UnknownLabel(f"unknown label {lab!r}")
    if not labels:
        return "no finding is present"
    ordered = sorted(labels, key=index.__getitem__)
    return ", ".join(f"{name.lower()} is present" for name in ordered)


_TOKEN = re.compile(r"[a-z0-9]+")
_MASK64 = (1 << 64) - 1
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def splitmix64(state: int):
    """Infinite SplitMix64 stream starting from ``state``."""
    while True:
        state = (state + 0x9E3779B97F4A7C15) & _MASK64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        yield z ^ (z >> 31)


def tokenize(text: str) -> list:
    return _TOKEN.findall(text.lower())


@lru_cache(maxsize=4096)
def token_vector(token: str, d: int, seed: int = 0) -> np.ndarray:
    """Unit vector for one token: FNV-1a hash seeds a SplitMix64 stream whose
    outputs become standard normals via Box-Muller."""
    state = fnv1a64(token.encode("utf-8")) ^ next(splitmix64(seed & _MASK64))
    stream = splitmix64(state)
    vals = []
    while len(vals) < d:
        u1 = ((next(stream) >> 11) + 1) * 2.0**-53  # (0, 1]
        u2 = (next(stream) >> 11) * 2.0**-53
        r = math.sqrt(-2.0 * math.log(u1))
        vals.extend((r * math.cos(2 * math.pi * u2), r * math.sin(2 * math.pi * u2)))
    v = np.array(vals[:d])
    v /= math.sqrt(math.fsum(x * x for x in v))
    v.setflags(write=False)
    return v


def prototype_encode(text: str, d: int, seed: int = 0) -> np.ndarray:
    """Deterministic bag-of-tokens text embedding, unit norm."""
    tokens = tokenize(text)
    out = np.zeros(d)
    if not tokens:
        raise ValidationError(f"text {text!r} has no tokens")
    for tok in sorted(tokens):
        out += token_vector(tok, d, seed)
    norm = np.linalg.norm(out)
    if norm == 0.0:
        out[0] = 1.0
        return out
    return out / norm


def class_prototypes(vocabulary: Sequence[str], d: int, seed: int = 0) -> np.ndarray:
    """Zero-shot prompt embeddings ``"<class> is present"``, (C, d)."""
    return np.stack([prototype_encode(generate_meta_text([c], vocabulary), d, seed) for c in vocabulary])


# ---------------------------------------------------------------------------
# file formats


def _ids_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".ids")


def save_embeddings(emb: EmbeddingSet, path) -> None:
    n, d = emb.matrix.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(EMB_MAGIC, n, d))
        fh.write(emb.matrix.astype("<f4", copy=False).tobytes(order="C"))
    with open(_ids_path(path), "w", encoding="utf-8", newline="\n") as fh:
        for item_id in emb.ids:
            fh.write(item_id + "\n")


def load_embeddings(path) -> EmbeddingSet:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        if not EMB_MAGIC.startswith(raw[:4]):
            raise BadMagic(f"{path}: not an EMB1 file")
        raise TruncatedFile(f"{path}: header is {len(raw)} bytes")
    magic, n, d = _HEADER.unpack_from(raw)
    if magic != EMB_MAGIC:
        raise BadMagic(f"{path}: magic {magic!r}, expected {EMB_MAGIC!r}")
    expected = _HEADER.size + 4 * n * d
    if len(raw) < expected:
        raise TruncatedFile(f"{path}: header declares {n}x{d} but payload has {len(raw) - _HEADER.size} bytes")
    if len(raw) > expected:
        raise CountMismatch(f"{path}: {len(raw) - expected} trailing bytes after {n}x{d} payload")
    matrix = np.frombuffer(raw, dtype="<f4", count=n * d, offset=_HEADER.size).reshape(n, d)
    ids_file = _ids_path(path)
    ids = ids_file.read_text(encoding="utf-8").splitlines() if ids_file.exists() else []
    if len(ids) != n:
        raise CountMismatch(f"{ids_file}: {len(ids)} ids for {n} rows")
    return EmbeddingSet(ids, matrix.astype(np.float32))


def save_vocabulary(vocabulary: Sequence[str], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for name in vocabulary:
            fh.write(name + "\n")


def load_vocabulary(path) -> list:
    names = Path(path).read_text(encoding="utf-8").splitlines()
    if not names or any(not n.strip() for n in names):
        raise MalformedLine(len(names) or 1, f"{path}: empty vocabulary entry")
    return names


def save_labels(dataset: LabeledDataset, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for item_id, labels, split in zip(dataset.ids, dataset.label_sets, dataset.splits):
            doc = {"id": item_id, "labels": list(labels), "split": split}
            fh.write(json.dumps(doc, ensure_ascii=False) + "\n")


def load_labels(path, vocabulary: Sequence[str]) -> LabeledDataset:
    ids, label_sets, splits = [], [], []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedLine(lineno, f"invalid JSON: {exc.msg}") from None
            if not isinstance(doc, dict) or not {"id", "labels", "split"} <= doc.keys():
                raise MalformedLine(lineno, "expected an object with id, labels, split")
            if not isinstance(doc["labels"], list) or doc["split"] not in SPLITS:
                raise MalformedLine(lineno, "labels must be a list and split train|test")
            item_id = str(doc["id"])
            if item_id in seen:
                raise DuplicateId(f"line {lineno}: duplicate id {item_id!r}")
            seen.add(item_id)
            ids.append(item_id)
            label_sets.append(doc["labels"])
            splits.append(doc["split"])
    return LabeledDataset(ids, label_sets, splits, vocabulary)


@dataclass
class DatasetFiles:
    """Standard artifact names inside a dataset directory."""

    root: Path
    labels: Path = field(init=False)
    vocabulary: Path = field(init=False)
    embeddings: Path = field(init=False)

    def __post_init__(self):
        self.root = Path(self.root)
        self.labels = self.root / "labels.jsonl"
        self.vocabulary = self.root / "vocab.txt"
        self.embeddings = self.root / "embeddings.emb"

    @property
    def ids(self) -> Path:
        return _ids_path(self.embeddings)

    def save(self, dataset: LabeledDataset, embeddings: EmbeddingSet) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        save_vocabulary(dataset.vocabulary, self.vocabulary)
        save_labels(dataset, self.labels)
        save_embeddings(embeddings, self.embeddings)

    def load(self):
        vocab = load_vocabulary(self.vocabulary)
        return load_labels(self.labels, vocab), load_embeddings(self.embeddings)
