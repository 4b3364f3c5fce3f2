"""Dataset ingestion: interaction files, per-user splits, IBMF feature
matrices, dataset directories, and BPR triple sampling."""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, ParseError

IBMF_MAGIC = b"IBMF"
IBMF_F32 = 1  # on-disk feature payloads
IBMF_F64 = 2  # checkpoint payloads (training precision)

_DTYPES = {IBMF_F32: np.dtype("<f4"), IBMF_F64: np.dtype("<f8")}


@dataclass
class InteractionSet:
    """User/item universe with per-user train/val/test positive item lists."""

    num_users: int
    num_items: int
    train: list[np.ndarray]
    val: list[np.ndarray]
    test: list[np.ndarray]
    user_id_map: dict[str, int]
    item_id_map: dict[str, int]
    _train_sets: list[set] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        for name, splits in (("train", self.train), ("val", self.val),
                             ("test", self.test)):
            if len(splits) != self.num_users:
                raise DataError(f"{name} split must have one list per user")
        for u in range(self.num_users):
            parts = [set(self.train[u]), set(self.val[u]), set(self.test[u])]
            if parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2]:
                raise DataError(f"user {u}: splits overlap")
            if not parts[0]:
                raise DataError(f"user {u}: no train interaction")
            for items in (self.train[u], self.val[u], self.test[u]):
                if items.size and (items.min() < 0 or items.max() >= self.num_items):
                    raise DataError(f"user {u}: item id out of range")
        self._train_sets = [set(int(i) for i in self.train[u])
                            for u in range(self.num_users)]

    def train_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """All train interactions as parallel (user, item) arrays."""
        users = np.concatenate([np.full(len(it), u, dtype=np.int64)
                                for u, it in enumerate(self.train)])
        items = np.concatenate([np.asarray(it, dtype=np.int64)
                                for it in self.train])
        return users, items

    def num_train(self) -> int:
        return sum(len(it) for it in self.train)

    def is_train_positive(self, user: int, item: int) -> bool:
        return item in self._train_sets[user]


@dataclass
class ModalityFeatures:
    """Named per-modality item feature matrices, widened to float64."""

    names: list[str]
    matrices: list[np.ndarray]

    def __post_init__(self) -> None:
        if not self.names or len(self.names) != len(self.matrices):
            raise DataError("need at least one named modality matrix")
        n = self.matrices[0].shape[0]
        for name, m in zip(self.names, self.matrices):
            if m.shape[0] != n:
                raise DataError(f"modality '{name}': row count {m.shape[0]} "
                                f"differs from {n}")
            if not np.isfinite(m).all():
                raise DataError(f"modality '{name}': non-finite entries")

    @property
    def num_modalities(self) -> int:
        return len(self.matrices)

    @property
    def num_items(self) -> int:
        return self.matrices[0].shape[0]

    @property
    def dims(self) -> list[int]:
        return [m.shape[1] for m in self.matrices]


@dataclass
class TripleBatch:
    """Parallel (user, positive item, negative item) index arrays."""

    users: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray

    def __len__(self) -> int:
        return int(self.users.size)


# ---------------------------------------------------------------------------
# text interaction files


def load_interactions(path) -> tuple[list[tuple[int, int]], dict[str, int], dict[str, int]]:
    """Parse "user<TAB>item" lines into dense-id pairs.

    Dense ids are assigned in first-appearance order; duplicate lines
    collapse to a single interaction.
    """
    user_map: dict[str, int] = {}
    item_map: dict[str, int] = {}
    pairs: list[tuple[int, int]] = []
    seen: set[tuple[int, int]] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 2 or not fields[0] or not fields[1]:
                raise ParseError(f"{path}: line {lineno}: expected "
                                 f"'user<TAB>item', got {line!r}")
            u = user_map.setdefault(fields[0], len(user_map))
            i = item_map.setdefault(fields[1], len(item_map))
            if (u, i) not in seen:
                seen.add((u, i))
                pairs.append((u, i))
    if not pairs:
        raise DataError(f"{path}: no interactions found")
    return pairs, user_map, item_map


def split_interactions(pairs, user_map, item_map, ratios=(0.8, 0.1, 0.1),
                       seed: int = 0, num_items: int | None = None) -> InteractionSet:
    """Seeded per-user random split into train/val/test.

    Users with fewer than 3 interactions keep everything in train. Counts
    follow floor(n * ratio) for val and test; the remainder trains.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise DataError(f"split ratios must be 3 non-negative values summing to 1, got {ratios}")
    num_users = len(user_map)
    n_items = num_items if num_items is not None else len(item_map)
    per_user: list[list[int]] = [[] for _ in range(num_users)]
    for u, i in pairs:
        per_user[u].append(i)

    rng = np.random.default_rng(seed)
    train, val, test = [], [], []
    for u in range(num_users):
        items = np.array(sorted(per_user[u]), dtype=np.int64)
        if items.size < 3:
            train.append(items)
            val.append(np.empty(0, dtype=np.int64))
            test.append(np.empty(0, dtype=np.int64))
            continue
        perm = rng.permutation(items)
        n_test = int(items.size * ratios[2])
        n_val = int(items.size * ratios[1])
        test.append(np.sort(perm[:n_test]))
        val.append(np.sort(perm[n_test:n_test + n_val]))
        train.append(np.sort(perm[n_test + n_val:]))
    return InteractionSet(num_users, n_items, train, val, test,
                          dict(user_map), dict(item_map))


# ---------------------------------------------------------------------------
# IBMF binary matrix format


def save_ibmf(path, matrix: np.ndarray, version: int = IBMF_F32) -> None:
    if version not in _DTYPES:
        raise FormatError(f"unsupported IBMF version {version}")
    arr = np.ascontiguousarray(matrix)
    if arr.ndim != 2:
        raise DataError(f"IBMF stores 2-D matrices, got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(IBMF_MAGIC)
        fh.write(struct.pack("<I", version))
        fh.write(struct.pack("<QQ", arr.shape[0], arr.shape[1]))
        fh.write(arr.astype(_DTYPES[version]).tobytes(order="C"))


def load_ibmf(path, expect_version: int | None = None) -> np.ndarray:
    """Read an IBMF matrix, widening the payload to float64."""
    with open(path, "rb") as fh:
        header = fh.read(24)
        if len(header) < 24:
            raise FormatError(f"{path}: header truncated")
        if header[:4] != IBMF_MAGIC:
            raise FormatError(f"{path}: bad magic {header[:4]!r}")
        (version,) = struct.unpack("<I", header[4:8])
        if version not in _DTYPES:
            raise FormatError(f"{path}: unsupported IBMF version {version}")
        if expect_version is not None and version != expect_version:
            raise FormatError(f"{path}: expected IBMF version {expect_version}, "
                              f"found {version}")
        rows, cols = struct.unpack("<QQ", header[8:24])
        dtype = _DTYPES[version]
        want = rows * cols * dtype.itemsize
        payload = fh.read(want + 1)
    if len(payload) != want:
        raise FormatError(f"{path}: payload length {len(payload)} does not "
                          f"match {rows}x{cols} ({want} bytes)")
    matrix = np.frombuffer(payload, dtype=dtype).reshape(rows, cols)
    matrix = matrix.astype(np.float64)
    if not np.isfinite(matrix).all():
        raise DataError(f"{path}: non-finite feature entries")
    return matrix


# ---------------------------------------------------------------------------
# dataset directories (split manifests + id maps + features + summary)


def _write_split(path, split, reverse_users, reverse_items) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u, items in enumerate(split):
            for i in items:
                fh.write(f"{reverse_users[u]}\t{reverse_items[int(i)]}\n")


def _write_id_map(path, id_map) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ext, dense in sorted(id_map.items(), key=lambda kv: kv[1]):
            fh.write(f"{ext}\t{dense}\n")


def _read_id_map(path) -> dict[str, int]:
    out: dict[str, int] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 2:
                raise ParseError(f"{path}: line {lineno}: expected 'external<TAB>dense'")
            out[fields[0]] = int(fields[1])
    return out


def save_dataset(out_dir, interactions: InteractionSet,
                 features: ModalityFeatures) -> dict:
    """Write the standard dataset layout; returns the summary dict."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if features.num_items != interactions.num_items:
        raise DataError(f"feature rows {features.num_items} != item count "
                        f"{interactions.num_items}")
    rev_u = {v: k for k, v in interactions.user_id_map.items()}
    rev_i = {v: k for k, v in interactions.item_id_map.items()}
    _write_split(out / "train.txt", interactions.train, rev_u, rev_i)
    _write_split(out / "val.txt", interactions.val, rev_u, rev_i)
    _write_split(out / "test.txt", interactions.test, rev_u, rev_i)
    _write_id_map(out / "user_map.tsv", interactions.user_id_map)
    _write_id_map(out / "item_map.tsv", interactions.item_id_map)
    for name, matrix in zip(features.names, features.matrices):
        save_ibmf(out / f"features_{name}.ibmf", matrix)
    total = (interactions.num_train()
             + sum(len(v) for v in interactions.val)
             + sum(len(t) for t in interactions.test))
    summary = {
        "users": interactions.num_users,
        "items": interactions.num_items,
        "interactions": total,
        "density": total / (interactions.num_users * interactions.num_items),
        "modalities": {name: int(dim) for name, dim
                       in zip(features.names, features.dims)},
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n",
                                      encoding="utf-8")
    return summary


def load_dataset(dataset_dir) -> tuple[InteractionSet, ModalityFeatures]:
    """Reload a dataset directory written by :func:`save_dataset`."""
    d = Path(dataset_dir)
    if not (d / "summary.json").exists():
        raise DataError(f"{d}: not a dataset directory (missing summary.json)")
    user_map = _read_id_map(d / "user_map.tsv")
    item_map = _read_id_map(d / "item_map.tsv")
    num_users, num_items = len(user_map), len(item_map)

    def read_split(name):
        split = [[] for _ in range(num_users)]
        path = d / name
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.rstrip("\n")
                if not line:
                    continue
                fields = line.split("\t")
                if len(fields) != 2:
                    raise ParseError(f"{path}: line {lineno}: malformed")
                try:
                    split[user_map[fields[0]]].append(item_map[fields[1]])
                except KeyError as exc:
                    raise DataError(f"{path}: line {lineno}: unknown id {exc}")
        return [np.array(sorted(items), dtype=np.int64) for items in split]

    interactions = InteractionSet(num_users, num_items, read_split("train.txt"),
                                  read_split("val.txt"), read_split("test.txt"),
                                  user_map, item_map)
    names, matrices = [], []
    for path in sorted(d.glob("features_*.ibmf")):
        name = path.stem[len("features_"):]
        matrix = load_ibmf(path)
        if matrix.shape[0] != num_items:
            raise DataError(f"modality '{name}': {matrix.shape[0]} rows for "
                            f"{num_items} items")
        names.append(name)
        matrices.append(matrix)
    if not names:
        raise DataError(f"{d}: no features_*.ibmf files")
    return interactions, ModalityFeatures(names, matrices)


# ---------------------------------------------------------------------------
# BPR triple sampling


class TripleSampler:
    """Uniform (user, positive) sampling with rejection-sampled negatives."""

    def __init__(self, interactions: InteractionSet, rng: np.random.Generator,
                 max_retries: int = 100):
        self._set = interactions
        self._rng = rng
        self._max_retries = max_retries
        self._users, self._items = interactions.train_pairs()

    def sample(self, batch_size: int) -> TripleBatch:
        iset = self._set
        picks = self._rng.integers(0, self._users.size, size=batch_size)
        users, pos, neg = [], [], []
        for p in picks:
            u, i = int(self._users[p]), int(self._items[p])
            j = self._negative_for(u)
            if j is None:
                # user has interacted with every item; skip the slot
                warnings.warn(f"user {u} has no negative item; skipping slot")
                continue
            users.append(u)
            pos.append(i)
            neg.append(j)
        return TripleBatch(np.array(users, dtype=np.int64),
                           np.array(pos, dtype=np.int64),
                           np.array(neg, dtype=np.int64))

    def _negative_for(self, user: int) -> int | None:
        for _ in range(self._max_retries):
            j = int(self._rng.integers(0, self._set.num_items))
            if not self._set.is_train_positive(user, j):
                return j
        return None


def sample_bpr_triples(interactions: InteractionSet, batch_size: int,
                       rng: np.random.Generator) -> TripleBatch:
    return TripleSampler(interactions, rng).sample(batch_size)
