"""Interaction / attribute ingestion, k-core filtering and leave-one-out splits."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, NamedTuple, Optional, Sequence

import numpy as np

FORMATS = ("ml100k", "ml1m", "csv")


class DatasetError(ValueError):
    """Raised for unparseable or degenerate input data."""


class Interaction(NamedTuple):
    user: int
    item: int
    rating: float
    timestamp: int


@dataclass
class InteractionSet:
    """Implicit-feedback interactions over dense user/item ids.

    Rows are kept in file order; ``order`` records each row's original line
    position so that timestamp ties can be broken deterministically after
    filtering.
    """

    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    timestamps: np.ndarray
    n_users: int
    n_items: int
    user_ids: np.ndarray  # dense index -> raw id
    item_ids: np.ndarray
    order: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.order is None:
            self.order = np.arange(len(self.users), dtype=np.int64)

    def __len__(self) -> int:
        return len(self.users)

    def __iter__(self) -> Iterator[Interaction]:
        for u, i, r, t in zip(self.users, self.items, self.ratings, self.timestamps):
            yield Interaction(int(u), int(i), float(r), int(t))

    @property
    def M(self) -> int:
        return self.n_users

    @property
    def N(self) -> int:
        return self.n_items

    def user_counts(self) -> np.ndarray:
        return np.bincount(self.users, minlength=self.n_users)

    def item_counts(self) -> np.ndarray:
        return np.bincount(self.items, minlength=self.n_items)

    def chronological(self) -> List[np.ndarray]:
        """Per-user row indices sorted by (timestamp, file order)."""
        idx = np.lexsort((self.order, self.timestamps, self.users))
        bounds = np.searchsorted(self.users[idx], np.arange(self.n_users + 1))
        return [idx[bounds[u]:bounds[u + 1]] for u in range(self.n_users)]

    def user_items(self) -> List[np.ndarray]:
        """Per-user sorted array of distinct items."""
        idx = np.lexsort((self.items, self.users))
        bounds = np.searchsorted(self.users[idx], np.arange(self.n_users + 1))
        return [np.unique(self.items[idx[bounds[u]:bounds[u + 1]]]) for u in range(self.n_users)]

    def raw_to_dense_users(self) -> Dict[str, int]:
        return {str(r): i for i, r in enumerate(self.user_ids)}

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.users, self.items, self.timestamps):
            h.update(np.ascontiguousarray(arr, dtype=np.int64).tobytes())
        return h.hexdigest()[:16]


@dataclass
class AttributeTable:
    """Per-user categorical labels, aligned with dense user ids."""

    attributes: Dict[str, np.ndarray] = field(default_factory=dict)
    cardinalities: Dict[str, int] = field(default_factory=dict)

    def add(self, name: str, labels: np.ndarray, cardinality: Optional[int] = None) -> None:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.size and labels.min() < 0:
            raise DatasetError(f"attribute {name!r} has negative labels")
        T = int(cardinality if cardinality is not None else labels.max() + 1)
        if labels.size and labels.max() >= T:
            raise DatasetError(f"attribute {name!r} has labels outside 0..{T - 1}")
        self.attributes[name] = labels
        self.cardinalities[name] = T

    def class_counts(self, name: str) -> np.ndarray:
        return np.bincount(self.attributes[name], minlength=self.cardinalities[name])

    def __getitem__(self, name: str) -> np.ndarray:
        return self.attributes[name]

    def __contains__(self, name: str) -> bool:
        return name in self.attributes

    @property
    def names(self) -> List[str]:
        return list(self.attributes)


@dataclass
class SplitSet:
    train: InteractionSet
    valid: np.ndarray  # per-user held-out item
    test: np.ndarray


def _parse_lines(path: Path, fmt: str):
    with open(path, encoding="latin-1", newline="") as fh:
        if fmt == "csv":
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                return
            header = [h.strip() for h in header]
            if header[:4] != ["user", "item", "rating", "timestamp"]:
                raise DatasetError(f"{path}: expected header user,item,rating,timestamp, got {header}")
            for lineno, row in enumerate(reader, start=2):
                if row and any(c.strip() for c in row):
                    yield lineno, row
            return
        sep = "\t" if fmt == "ml100k" else "::"
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if line:
                yield lineno, line.split(sep)


def load_interactions(path, format: str = "ml100k") -> InteractionSet:
    """Parse an interaction file and remap raw ids to dense indices.

    Dense ids follow the order of first appearance in the file.
    """
    if format not in FORMATS:
        raise DatasetError(f"unknown format {format!r}; expected one of {FORMATS}")
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"interaction file not found: {path}")
    raw_u: List[str] = []
    raw_i: List[str] = []
    ratings: List[float] = []
    stamps: List[int] = []
    for lineno, parts in _parse_lines(path, format):
        if len(parts) < 4:
            raise DatasetError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
        try:
            r = float(parts[2])
            t = int(float(parts[3]))
        except ValueError as exc:
            raise DatasetError(f"{path}:{lineno}: {exc}") from None
        if t < 0:
            raise DatasetError(f"{path}:{lineno}: negative timestamp")
        raw_u.append(parts[0].strip())
        raw_i.append(parts[1].strip())
        ratings.append(r)
        stamps.append(t)
    if not raw_u:
        raise DatasetError(f"{path}: no interactions")
    user_ids, users = _densify_first_seen(raw_u)
    item_ids, items = _densify_first_seen(raw_i)
    return InteractionSet(
        users=users,
        items=items,
        ratings=np.asarray(ratings, dtype=np.float64),
        timestamps=np.asarray(stamps, dtype=np.int64),
        n_users=len(user_ids),
        n_items=len(item_ids),
        user_ids=user_ids,
        item_ids=item_ids,
    )


def _densify_first_seen(raw: Sequence[str]):
    mapping: Dict[str, int] = {}
    dense = np.fromiter((mapping.setdefault(r, len(mapping)) for r in raw), dtype=np.int64, count=len(raw))
    return np.asarray(list(mapping), dtype=object), dense


def subset(data: InteractionSet, mask: np.ndarray) -> InteractionSet:
    """Keep rows under ``mask`` and re-densify ids (order of surviving ids kept)."""
    users, items = data.users[mask], data.items[mask]
    keep_u = np.unique(users)
    keep_i = np.unique(items)
    remap_u = np.full(data.n_users, -1, dtype=np.int64)
    remap_u[keep_u] = np.arange(len(keep_u))
    remap_i = np.full(data.n_items, -1, dtype=np.int64)
    remap_i[keep_i] = np.arange(len(keep_i))
    return InteractionSet(
        users=remap_u[users],
        items=remap_i[items],
        ratings=data.ratings[mask],
        timestamps=data.timestamps[mask],
        n_users=len(keep_u),
        n_items=len(keep_i),
        user_ids=data.user_ids[keep_u],
        item_ids=data.item_ids[keep_i],
        order=data.order[mask],
    )


def keep_users(data: InteractionSet, raw_ids) -> InteractionSet:
    """Drop interactions of users whose raw id is not in ``raw_ids``."""
    wanted = {str(r) for r in raw_ids}
    ok = np.array([str(r) in wanted for r in data.user_ids], dtype=bool)
    return subset(data, ok[data.users])


def filter_sparse(data: InteractionSet, min_user: int = 5, min_item: int = 5) -> InteractionSet:
    """Iterated k-core filter: drop sparse users/items until both thresholds hold."""
    if len(data) == 0:
        raise DatasetError("cannot filter an empty interaction set")
    current = data
    while True:
        uc = current.user_counts()
        ic = current.item_counts()
        mask = (uc[current.users] >= min_user) & (ic[current.items] >= min_item)
        if mask.all():
            return current
        if not mask.any():
            raise DatasetError(f"filtering with min_user={min_user}, min_item={min_item} empties the dataset")
        current = subset(current, mask)


def leave_one_out(data: InteractionSet) -> SplitSet:
    """Hold out each user's last interaction (test) and second-to-last (valid).

    Ties on timestamp are resolved by file order: the later line counts as
    the more recent interaction.
    """
    valid = np.empty(data.n_users, dtype=np.int64)
    test = np.empty(data.n_users, dtype=np.int64)
    drop = np.zeros(len(data), dtype=bool)
    for u, rows in enumerate(data.chronological()):
        if len(rows) < 3:
            raise DatasetError(f"user {data.user_ids[u]} has {len(rows)} interactions; need at least 3")
        test[u] = data.items[rows[-1]]
        valid[u] = data.items[rows[-2]]
        drop[rows[-2:]] = True
    keep = ~drop
    train = InteractionSet(
        users=data.users[keep],
        items=data.items[keep],
        ratings=data.ratings[keep],
        timestamps=data.timestamps[keep],
        n_users=data.n_users,
        n_items=data.n_items,
        user_ids=data.user_ids,
        item_ids=data.item_ids,
        order=data.order[keep],
    )
    return SplitSet(train=train, valid=valid, test=test)


def bin_age(raw_ages) -> np.ndarray:
    """Three age groups: 0 = under 35, 1 = 35..45 inclusive, 2 = over 45."""
    ages = np.asarray(raw_ages)
    if np.any(ages < 0):
        raise DatasetError("ages must be non-negative")
    return np.where(ages < 35, 0, np.where(ages <= 45, 1, 2)).astype(np.int64)


def read_ml100k_users(path) -> Dict[str, dict]:
    """``user|age|gender|occupation|zip`` rows keyed by raw user id."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"attribute file not found: {path}")
    out = {}
    with open(path, encoding="latin-1") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("|")
            if len(parts) < 3:
                raise DatasetError(f"{path}:{lineno}: expected user|age|gender|...")
            gender = parts[2].strip().upper()
            if gender not in ("M", "F"):
                raise DatasetError(f"{path}:{lineno}: gender must be M or F, got {parts[2]!r}")
            try:
                age = int(parts[1])
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: bad age {parts[1]!r}") from None
            out[parts[0].strip()] = {"age": age, "gender": 0 if gender == "M" else 1}
    return out


def read_ml1m_users(path) -> Dict[str, dict]:
    """``UserID::Gender::Age::Occupation::Zip`` rows; age is the coded lower bound (1, 18, 25, ...)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"attribute file not found: {path}")
    out = {}
    with open(path, encoding="latin-1") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("::")
            if len(parts) < 3 or parts[1].strip().upper() not in ("M", "F"):
                raise DatasetError(f"{path}:{lineno}: expected UserID::Gender::Age::...")
            try:
                age = int(parts[2])
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: bad age {parts[2]!r}") from None
            out[parts[0].strip()] = {"age": age, "gender": 0 if parts[1].strip().upper() == "M" else 1}
    return out


def _read_records(path, format: str) -> Dict[str, dict]:
    if format == "ml100k":
        return read_ml100k_users(path)
    if format == "ml1m":
        return read_ml1m_users(path)
    return read_attribute_csv(path)


def read_attribute_csv(path) -> Dict[str, dict]:
    """Generic ``user,<attr1>,<attr2>,...`` csv with integer labels."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"attribute file not found: {path}")
    out = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or reader.fieldnames[0] != "user":
            raise DatasetError(f"{path}: header must start with 'user'")
        for lineno, row in enumerate(reader, start=2):
            try:
                out[row["user"].strip()] = {k: int(v) for k, v in row.items() if k != "user"}
            except (TypeError, ValueError):
                raise DatasetError(f"{path}:{lineno}: non-integer label") from None
    return out


def build_attributes(records: Dict[str, dict], data: InteractionSet, fmt: str = "ml100k") -> AttributeTable:
    """Align raw per-user records with the dense ids of ``data``.

    For the MovieLens layouts the ``age`` column is binned into three groups.
    """
    missing = [r for r in data.user_ids if str(r) not in records]
    if missing:
        raise DatasetError(f"{len(missing)} users lack attribute records (e.g. {missing[0]})")
    rows = [records[str(r)] for r in data.user_ids]
    table = AttributeTable()
    for name in rows[0]:
        values = np.array([row[name] for row in rows], dtype=np.int64)
        if fmt in ("ml100k", "ml1m") and name == "age":
            table.add("age", bin_age(values), 3)
        elif fmt in ("ml100k", "ml1m") and name == "gender":
            table.add("gender", values, 2)
        else:
            table.add(name, values)
    return table


def load_attributes(path, data: InteractionSet, format: str = "ml100k") -> AttributeTable:
    return build_attributes(_read_records(path, format), data, format)


def prepare(interactions_path, attributes_path=None, format: str = "ml100k", min_user: int = 5, min_item: int = 5):
    """Load, drop users without attributes, k-core filter, split.

    Returns ``(filtered, split, attributes)``; ``attributes`` is None when no
    attribute file is given.
    """
    data = load_interactions(interactions_path, format)
    records = None
    if attributes_path is not None:
        records = _read_records(attributes_path, format)
        data = keep_users(data, records.keys())
    data = filter_sparse(data, min_user, min_item)
    split = leave_one_out(data)
    attrs = build_attributes(records, data, format) if records is not None else None
    return data, split, attrs


# -- prepared-directory persistence -------------------------------------------
#
# A prepared directory holds plain-text files so reruns are byte-identical:
#   train.tsv       dense_user  dense_item  rating  timestamp   (train rows, file order)
#   heldout.tsv     dense_user  valid_item  test_item
#   users.txt       raw user id per dense id
#   items.txt       raw item id per dense id
#   attributes.csv  user,<attr>,...  (dense ids; written when attributes exist)
#   meta.json       counts, cardinalities and a digest of the filtered set


def save_prepared(out_dir, data: InteractionSet, split: SplitSet, attrs: Optional[AttributeTable] = None) -> None:
    import json

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tr = split.train
    with open(out / "train.tsv", "w") as fh:
        for u, i, r, t in zip(tr.users, tr.items, tr.ratings, tr.timestamps):
            fh.write(f"{u}\t{i}\t{r:g}\t{t}\n")
    with open(out / "heldout.tsv", "w") as fh:
        for u, (v, t) in enumerate(zip(split.valid, split.test)):
            fh.write(f"{u}\t{v}\t{t}\n")
    (out / "users.txt").write_text("".join(f"{r}\n" for r in tr.user_ids))
    (out / "items.txt").write_text("".join(f"{r}\n" for r in tr.item_ids))
    meta = {"users": data.n_users, "items": data.n_items, "interactions": len(data),
            "train": len(tr), "digest": data.digest()}
    if attrs is not None:
        names = attrs.names
        with open(out / "attributes.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["user"] + names)
            for u in range(data.n_users):
                w.writerow([u] + [int(attrs[n][u]) for n in names])
        meta["cardinalities"] = {n: attrs.cardinalities[n] for n in names}
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_prepared(in_dir):
    """Inverse of :func:`save_prepared`; returns ``(split, attributes_or_None)``."""
    import json

    src = Path(in_dir)
    meta_path = src / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"not a prepared data directory (no meta.json): {src}")
    meta = json.loads(meta_path.read_text())
    rows = np.loadtxt(src / "train.tsv", dtype=np.float64, ndmin=2)
    held = np.loadtxt(src / "heldout.tsv", dtype=np.int64, ndmin=2)
    user_ids = np.asarray((src / "users.txt").read_text().split(), dtype=object)
    item_ids = np.asarray((src / "items.txt").read_text().split(), dtype=object)
    train = InteractionSet(
        users=rows[:, 0].astype(np.int64),
        items=rows[:, 1].astype(np.int64),
        ratings=rows[:, 2],
        timestamps=rows[:, 3].astype(np.int64),
        n_users=int(meta["users"]),
        n_items=int(meta["items"]),
        user_ids=user_ids,
        item_ids=item_ids,
    )
    split = SplitSet(train=train, valid=held[:, 1], test=held[:, 2])
    attrs = None
    if (src / "attributes.csv").exists():
        table = np.loadtxt(src / "attributes.csv", delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
        with open(src / "attributes.csv") as fh:
            names = fh.readline().strip().split(",")[1:]
        attrs = AttributeTable()
        for j, name in enumerate(names):
            attrs.add(name, table[:, j + 1], meta.get("cardinalities", {}).get(name))
    return split, attrs
