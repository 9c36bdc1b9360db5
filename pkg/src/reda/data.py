"""Interaction ingestion, filtering, leave-one-out splitting, and triplet sampling.

The pipeline goes raw text -> RawInteraction records -> filtered Dataset with
dense contiguous ids -> LooSplit (per-user held-out item plus sampled
evaluation negatives). Training consumes the split through triplet sampling.
All sampling is driven by caller-supplied generators so runs are reproducible
from a single seed.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np


class DataError(Exception):
    """Raised for unrecoverable data-pipeline failures."""


class EmptyDatasetError(DataError):
    """Filtering removed every interaction."""


class NoPairsError(DataError):
    """A user has fewer than two train positives, so no item pair exists."""


@dataclass(frozen=True)
class RawInteraction:
    """One (user, item) event as read from disk, before any filtering.

    ``rating`` is None for implicit-feedback logs; such records count as
    positive regardless of the rating threshold.
    """

    user: str
    item: str
    rating: float | None = None
    timestamp: int | None = None


@dataclass(frozen=True)
class ParseFailure:
    line_no: int
    reason: str


@dataclass
class LoadResult:
    records: list[RawInteraction]
    errors: list[ParseFailure]
    path: str


@dataclass
class ColumnSchema:
    """Column layout of a delimiter-separated interaction file.

    ``columns`` is the ordered field list, e.g. ("user", "item", "rating").
    ``delimiter`` of None means auto-detect (tab if the first data line
    contains one, comma otherwise).
    """

    columns: tuple[str, ...] = ("user", "item", "rating")
    delimiter: str | None = None

    ALLOWED = ("user", "item", "rating", "timestamp")

    def __post_init__(self):
        for c in self.columns:
            if c not in self.ALLOWED:
                raise ValueError(f"unknown column {c!r}; allowed: {self.ALLOWED}")
        if "user" not in self.columns or "item" not in self.columns:
            raise ValueError("schema must contain 'user' and 'item' columns")
        if len(set(self.columns)) != len(self.columns):
            raise ValueError("duplicate column in schema")

    @classmethod
    def parse(cls, spec: str, delimiter: str | None = None) -> "ColumnSchema":
        cols = tuple(c.strip() for c in spec.split(",") if c.strip())
        return cls(columns=cols, delimiter=delimiter)


@dataclass
class Dataset:
    """Filtered interactions with dense contiguous user/item indices.

    ``positives[u]`` holds user u's distinct positive items in order of first
    appearance. Dense user ids follow record order; dense item ids follow a
    user-grouped walk (user 0's items first), which makes filtering idempotent
    under re-serialization.
    """

    num_users: int
    num_items: int
    positives: list[np.ndarray]
    user_ids: list[str]
    item_ids: list[str]
    user_index: dict[str, int] = field(repr=False)
    item_index: dict[str, int] = field(repr=False)

    @property
    def num_actions(self) -> int:
        return sum(len(p) for p in self.positives)

    def density(self) -> float:
        """Fraction of the user-item matrix that is filled."""
        cells = self.num_users * self.num_items
        return self.num_actions / cells if cells else 0.0

    def same_as(self, other: "Dataset") -> bool:
        return (
            self.num_users == other.num_users
            and self.num_items == other.num_items
            and self.user_ids == other.user_ids
            and self.item_ids == other.item_ids
            and all(np.array_equal(a, b) for a, b in zip(self.positives, other.positives))
        )


@dataclass
class LooSplit:
    """Leave-one-out split: per-user held-out item plus fixed eval negatives.

    ``train`` shares the dense index space of the source dataset; each user's
    train positives are the source positives minus the held-out item.
    """

    train: Dataset
    test: np.ndarray           # (num_users,) held-out item per user
    negatives: list[np.ndarray]  # (n_neg,) per user, disjoint from all positives
    n_neg: int

    def full_positives(self, user: int) -> np.ndarray:
        return np.append(self.train.positives[user], self.test[user])


@dataclass(frozen=True)
class TrainingTriplet:
    """One relation-wise training sample.

    Target and context pairs are co-consumed item pairs from the same user's
    train history; the negative pair fails that property.
    """

    user: int
    target_pair: tuple[int, int]
    context_pair: tuple[int, int]
    negative_pair: tuple[int, int]


def load_interactions(path: str, schema: ColumnSchema) -> LoadResult:
    """Parse a delimiter-separated interaction file.

    Lines starting with '#' are skipped. Malformed lines (wrong column count,
    empty user/item, unparseable rating/timestamp) are collected as
    ParseFailure entries rather than raised, so callers can report them.
    An unreadable file raises OSError.
    """
    records: list[RawInteraction] = []
    errors: list[ParseFailure] = []
    delim = schema.delimiter
    ncols = len(schema.columns)
    col_pos = {c: i for i, c in enumerate(schema.columns)}

    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line or line.startswith("#"):
                continue
            if delim is None:
                delim = "\t" if "\t" in line else ","
            parts = line.split(delim)
            if len(parts) != ncols:
                errors.append(ParseFailure(line_no, f"expected {ncols} columns, got {len(parts)}"))
                continue
            user = parts[col_pos["user"]].strip()
            item = parts[col_pos["item"]].strip()
            if not user or not item:
                errors.append(ParseFailure(line_no, "empty user or item id"))
                continue
            rating = None
            if "rating" in col_pos:
                try:
                    rating = float(parts[col_pos["rating"]])
                except ValueError:
                    errors.append(ParseFailure(line_no, f"bad rating {parts[col_pos['rating']]!r}"))
                    continue
            timestamp = None
            if "timestamp" in col_pos:
                try:
                    timestamp = int(float(parts[col_pos["timestamp"]]))
                except ValueError:
                    errors.append(ParseFailure(line_no, f"bad timestamp {parts[col_pos['timestamp']]!r}"))
                    continue
            records.append(RawInteraction(user, item, rating, timestamp))
    return LoadResult(records, errors, path)


def filter_dataset(
    raw: list[RawInteraction],
    positive_threshold: float = 3.0,
    min_actions: int = 6,
) -> Dataset:
    """Apply positivity threshold and the minimum-action floor, then reindex.

    Keeps records with rating strictly greater than ``positive_threshold``
    (records without a rating are implicit positives and always kept),
    deduplicates (user, item), and drops users left with fewer than
    ``min_actions`` positives, repeating until a fixed point. Users are
    indexed by first appearance; items by first appearance in the
    user-grouped walk over surviving records.
    """
    seen: set[tuple[str, str]] = set()
    per_user: dict[str, list[str]] = {}
    for rec in raw:
        if rec.rating is not None and not (rec.rating > positive_threshold):
            continue
        key = (rec.user, rec.item)
        if key in seen:
            continue
        seen.add(key)
        per_user.setdefault(rec.user, []).append(rec.item)

    # Dropping a user never changes another user's count, but the floor is
    # applied until nothing changes so the rule holds by construction.
    while True:
        dropped = [u for u, items in per_user.items() if len(items) < min_actions]
        if not dropped:
            break
        for u in dropped:
            del per_user[u]

    if not per_user:
        raise EmptyDatasetError(
            f"empty dataset: no user kept >= {min_actions} positives above threshold {positive_threshold}"
        )

    user_ids = list(per_user.keys())  # dicts preserve insertion order
    user_index = {u: ix for ix, u in enumerate(user_ids)}
    item_ids: list[str] = []
    item_index: dict[str, int] = {}
    positives: list[np.ndarray] = []
    for u in user_ids:
        row = []
        for it in per_user[u]:
            if it not in item_index:
                item_index[it] = len(item_ids)
                item_ids.append(it)
            row.append(item_index[it])
        positives.append(np.asarray(row, dtype=np.int64))

    return Dataset(
        num_users=len(user_ids),
        num_items=len(item_ids),
        positives=positives,
        user_ids=user_ids,
        item_ids=item_ids,
        user_index=user_index,
        item_index=item_index,
    )


def dataset_to_records(ds: Dataset) -> list[RawInteraction]:
    """Serialize a Dataset back to implicit-positive records (user-grouped walk)."""
    out = []
    for u in range(ds.num_users):
        for it in ds.positives[u]:
            out.append(RawInteraction(ds.user_ids[u], ds.item_ids[int(it)]))
    return out


def leave_one_out_split(
    ds: Dataset,
    n_neg: int,
    seed: int,
    holdout: str = "random",
) -> LooSplit:
    """Hold out one positive per user and sample fixed evaluation negatives.

    ``holdout`` is "random" (uniform over the user's positives, seeded) or
    "last" (final item in positives order, for time-ordered inputs).
    Negatives are drawn uniformly without replacement from items the user
    never interacted with; the draw order is user 0..n-1, holdout before
    negatives, so the split is a pure function of (ds, n_neg, seed, holdout).
    """
    from .rng import substream

    if holdout not in ("random", "last"):
        raise ValueError(f"holdout must be 'random' or 'last', got {holdout!r}")
    rng = substream(seed, "split")
    test = np.empty(ds.num_users, dtype=np.int64)
    train_pos: list[np.ndarray] = []
    negatives: list[np.ndarray] = []
    for u in range(ds.num_users):
        pos = ds.positives[u]
        if len(pos) < 2:
            raise DataError(f"user {ds.user_ids[u]!r} has {len(pos)} positives; need >= 2 to split")
        if holdout == "random":
            hold_ix = int(rng.integers(len(pos)))
        else:
            hold_ix = len(pos) - 1
        test[u] = pos[hold_ix]
        train_pos.append(np.delete(pos, hold_ix))

        mask = np.zeros(ds.num_items, dtype=bool)
        mask[pos] = True
        avail = np.flatnonzero(~mask)
        if len(avail) < n_neg:
            raise DataError(
                f"user {ds.user_ids[u]!r}: cannot sample {n_neg} negatives from "
                f"{len(avail)} non-interacted items"
            )
        negatives.append(rng.choice(avail, size=n_neg, replace=False).astype(np.int64))

    train = Dataset(
        num_users=ds.num_users,
        num_items=ds.num_items,
        positives=train_pos,
        user_ids=ds.user_ids,
        item_ids=ds.item_ids,
        user_index=ds.user_index,
        item_index=ds.item_index,
    )
    return LooSplit(train=train, test=test, negatives=negatives, n_neg=n_neg)


def _draw_pair(pos: np.ndarray, rng: np.random.Generator) -> tuple[int, int]:
    """Uniform unordered pair of distinct entries, canonicalized (min, max)."""
    n = len(pos)
    a = int(rng.integers(n))
    b = int(rng.integers(n))
    while b == a:
        b = int(rng.integers(n))
    i, j = int(pos[a]), int(pos[b])
    return (i, j) if i < j else (j, i)


def sample_triplet(
    split: LooSplit,
    user: int,
    rng: np.random.Generator,
    strict_negatives: bool = False,
    _max_tries: int = 100_000,
) -> TrainingTriplet:
    """Draw (target, context, negative) item pairs for one user.

    Target and context pairs come uniformly from the user's train-history
    pairs; the context is resampled until distinct from the target unless the
    user has only one pair (then context == target). The negative pair is
    rejection-sampled over ordered distinct item pairs until it is not fully
    inside the user's train positives (``strict_negatives`` additionally
    requires both items non-interacted).
    """
    pos = split.train.positives[user]
    n = len(pos)
    if n < 2:
        raise NoPairsError(f"user {user} has {n} train positives; no pairs to sample")
    target = _draw_pair(pos, rng)
    if n == 2:
        context = target
    else:
        context = _draw_pair(pos, rng)
        while context == target:
            context = _draw_pair(pos, rng)

    pos_set = set(int(x) for x in pos)
    num_items = split.train.num_items
    for _ in range(_max_tries):
        i_n = int(rng.integers(num_items))
        j_n = int(rng.integers(num_items))
        if i_n == j_n:
            continue
        if strict_negatives:
            if i_n not in pos_set and j_n not in pos_set:
                break
        else:
            if not (i_n in pos_set and j_n in pos_set):
                break
    else:
        raise DataError(f"could not sample a negative pair for user {user}")

    return TrainingTriplet(user=user, target_pair=target, context_pair=context,
                           negative_pair=(i_n, j_n))


def eligible_users(split: LooSplit) -> np.ndarray:
    """Users with at least two train positives (those that form pairs)."""
    return np.asarray(
        [u for u in range(split.train.num_users) if len(split.train.positives[u]) >= 2],
        dtype=np.int64,
    )


def eligible_pair_count(split: LooSplit) -> int:
    """Total unordered train pairs across users; defines the epoch size."""
    return sum(
        len(p) * (len(p) - 1) // 2
        for p in split.train.positives
        if len(p) >= 2
    )


def batch_triplets(
    split: LooSplit,
    batch_size: int,
    rng: np.random.Generator,
    strict_negatives: bool = False,
) -> list[TrainingTriplet]:
    """Sample exactly ``batch_size`` triplets, users uniform among eligible."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    users = eligible_users(split)
    if len(users) == 0:
        raise DataError("no eligible users: every user has < 2 train positives")
    picks = rng.integers(len(users), size=batch_size)
    return [
        sample_triplet(split, int(users[p]), rng, strict_negatives=strict_negatives)
        for p in picks
    ]


# --- split persistence ------------------------------------------------------

SPLIT_FILES = ("train.tsv", "test.tsv", "negatives.tsv", "idmap.tsv")


def _write_lines(path: str, header: str | None, lines) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write(header + "\n")
        for ln in lines:
            fh.write(ln + "\n")


def save_split(split: LooSplit, out_dir: str, config_hash: str = "") -> None:
    """Write train/test/negatives/idmap TSVs with dense indices."""
    os.makedirs(out_dir, exist_ok=True)
    hdr = f"# config_hash={config_hash}" if config_hash else None
    ds = split.train
    _write_lines(
        os.path.join(out_dir, "train.tsv"), hdr,
        (f"{u}\t{int(it)}" for u in range(ds.num_users) for it in ds.positives[u]),
    )
    _write_lines(
        os.path.join(out_dir, "test.tsv"), hdr,
        (f"{u}\t{int(split.test[u])}" for u in range(ds.num_users)),
    )
    _write_lines(
        os.path.join(out_dir, "negatives.tsv"), hdr,
        (
            "\t".join([str(u)] + [str(int(x)) for x in split.negatives[u]])
            for u in range(ds.num_users)
        ),
    )
    idmap_lines = [f"user\t{raw}\t{ix}" for ix, raw in enumerate(ds.user_ids)]
    idmap_lines += [f"item\t{raw}\t{ix}" for ix, raw in enumerate(ds.item_ids)]
    _write_lines(os.path.join(out_dir, "idmap.tsv"), hdr, idmap_lines)


def _read_rows(path: str) -> list[list[str]]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            rows.append(line.split("\t"))
    return rows


def load_split(split_dir: str) -> LooSplit:
    """Reload a split written by :func:`save_split`."""
    for name in SPLIT_FILES:
        p = os.path.join(split_dir, name)
        if not os.path.exists(p):
            raise DataError(f"split file missing: {p}")

    user_ids: list[str] = []
    item_ids: list[str] = []
    for kind, raw, ix in _read_rows(os.path.join(split_dir, "idmap.tsv")):
        target = user_ids if kind == "user" else item_ids
        if int(ix) != len(target):
            raise DataError(f"idmap.tsv out of order at {kind} {raw}")
        target.append(raw)
    num_users, num_items = len(user_ids), len(item_ids)

    positives: list[list[int]] = [[] for _ in range(num_users)]
    for u, it in _read_rows(os.path.join(split_dir, "train.tsv")):
        positives[int(u)].append(int(it))
    test = np.zeros(num_users, dtype=np.int64)
    for u, it in _read_rows(os.path.join(split_dir, "test.tsv")):
        test[int(u)] = int(it)
    neg_rows = _read_rows(os.path.join(split_dir, "negatives.tsv"))
    negatives: list[np.ndarray] = [np.empty(0, dtype=np.int64)] * num_users
    n_neg = 0
    for row in neg_rows:
        u = int(row[0])
        negatives[u] = np.asarray([int(x) for x in row[1:]], dtype=np.int64)
        n_neg = len(negatives[u])

    train = Dataset(
        num_users=num_users,
        num_items=num_items,
        positives=[np.asarray(p, dtype=np.int64) for p in positives],
        user_ids=user_ids,
        item_ids=item_ids,
        user_index={u: ix for ix, u in enumerate(user_ids)},
        item_index={it: ix for ix, it in enumerate(item_ids)},
    )
    return LooSplit(train=train, test=test, negatives=negatives, n_neg=n_neg)


def save_dataset_stats(ds: Dataset, path: str, config_hash: str = "") -> None:
    """One-row summary: users, items, actions, percent density."""
    hdr = f"# config_hash={config_hash}" if config_hash else None
    row = f"{ds.num_users}\t{ds.num_items}\t{ds.num_actions}\t{100.0 * ds.density():.4f}"
    _write_lines(path, hdr, ["users\titems\tactions\tdensity_pct", row])


def check_split_invariants(split: LooSplit) -> None:
    """Assert held-out/negative disjointness for every user (cheap audit)."""
    for u in range(split.train.num_users):
        train_set = set(int(x) for x in split.train.positives[u])
        held = int(split.test[u])
        if held in train_set:
            raise DataError(f"user {u}: held-out item {held} also in train positives")
        full = train_set | {held}
        negs = set(int(x) for x in split.negatives[u])
        if negs & full:
            raise DataError(f"user {u}: negatives overlap positives")
        if len(negs) != split.n_neg:
            raise DataError(f"user {u}: expected {split.n_neg} distinct negatives")
