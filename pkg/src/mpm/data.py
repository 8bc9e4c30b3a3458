"""Interaction logs to leave-one-out splits and training windows."""

from __future__ import annotations

import io
import logging
import os
from dataclasses import dataclass, field
from typing import Iterable, Iterator, NamedTuple, TextIO

import numpy as np

logger = logging.getLogger(__name__)

# purpose tags for seed substreams
TAG_EVAL_NEGATIVES = 1
TAG_TRAIN_NEGATIVES = 2
TAG_SHUFFLE = 3
TAG_DROPOUT = 4
TAG_INIT = 5
TAG_SYNTH = 6


def substream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for (seed, *keys)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *(int(k) for k in keys)]))


class FormatError(ValueError):
    pass


class EmptyDatasetError(ValueError):
    pass


class SamplingError(ValueError):
    pass


@dataclass(frozen=True)
class FormatDescriptor:
    delimiter: str = "::"
    user_col: int = 0
    item_col: int = 1
    ts_col: int = 3

    @property
    def min_fields(self) -> int:
        return max(self.user_col, self.item_col, self.ts_col) + 1


FORMATS = {
    # MovieLens ratings.dat: user::item::rating::timestamp
    "ml": FormatDescriptor("::", 0, 1, 3),
    # ratings.csv style: user,item,rating,timestamp
    "csv": FormatDescriptor(",", 0, 1, 3),
    "tsv": FormatDescriptor("\t", 0, 1, 3),
    # Taobao UserBehavior.csv: user,item,category,behavior,timestamp
    "taobao": FormatDescriptor(",", 0, 1, 4),
}


def parse_format(spec: str | FormatDescriptor) -> FormatDescriptor:
    """Named preset ("ml", "csv", "tsv", "taobao") or "DELIM:user,item,ts".

    ``DELIM`` may be ``tab``, ``comma`` or a literal delimiter.
    """
    if isinstance(spec, FormatDescriptor):
        return spec
    if spec in FORMATS:
        return FORMATS[spec]
    delim, sep, cols = spec.rpartition(":")
    if not sep:
        raise FormatError(f"unknown format {spec!r}")
    delim = {"tab": "\t", "comma": ",", "colons": "::"}.get(delim, delim)
    try:
        u, i, t = (int(c) for c in cols.split(","))
    except ValueError:
        raise FormatError(f"bad column list in format {spec!r}") from None
    return FormatDescriptor(delim, u, i, t)


@dataclass(frozen=True)
class InteractionEvent:
    user_key: str
    item_key: str
    timestamp: int


@dataclass
class IngestResult:
    events: list[InteractionEvent]
    malformed: int = 0
    total_lines: int = 0


def ingest_events(source: TextIO | str | os.PathLike, fmt: str | FormatDescriptor = "ml") -> IngestResult:
    """Parse a delimiter-separated log. Extra columns (ratings, behaviors) are ignored."""
    fmt = parse_format(fmt)
    if isinstance(source, (str, os.PathLike)):
        with open(source, encoding="utf-8", errors="replace") as fh:
            return ingest_events(fh, fmt)

    events = []
    malformed = total = 0
    for line in source:
        line = line.rstrip("\r\n")
        if not line.strip():
            continue
        total += 1
        fields = line.split(fmt.delimiter)
        if len(fields) < fmt.min_fields:
            malformed += 1
            continue
        try:
            ts = int(fields[fmt.ts_col].strip())
        except ValueError:
            malformed += 1
            continue
        user, item = fields[fmt.user_col].strip(), fields[fmt.item_col].strip()
        if ts < 0 or not user or not item:
            malformed += 1
            continue
        events.append(InteractionEvent(user, item, ts))
    if total and malformed * 2 > total:
        raise FormatError(f"{malformed} of {total} lines malformed; wrong format descriptor?")
    if malformed:
        logger.warning("skipped %d malformed lines out of %d", malformed, total)
    return IngestResult(events, malformed, total)


def ingest_text(text: str, fmt: str | FormatDescriptor = "ml") -> IngestResult:
    return ingest_events(io.StringIO(text), fmt)


@dataclass
class EncodedDataset:
    """Users and items densely re-indexed; one chronological item list per user."""

    user_keys: list[str]
    item_keys: list[str]
    sequences: list[np.ndarray]

    @property
    def num_users(self) -> int:
        return len(self.user_keys)

    @property
    def num_items(self) -> int:
        return len(self.item_keys)

    @property
    def num_interactions(self) -> int:
        return int(np.sum([len(s) for s in self.sequences]))

    def summary(self) -> dict:
        return {"users": self.num_users, "items": self.num_items, "interactions": self.num_interactions}


def encode_and_filter(events: Iterable[InteractionEvent], min_interactions: int = 20) -> EncodedDataset:
    """Drop users with fewer than ``min_interactions`` events, then index densely.

    Ids follow first appearance in the input. Each user's list is sorted by
    timestamp with input order breaking ties.
    """
    per_user: dict[str, list[tuple[int, int, str]]] = {}
    for order, ev in enumerate(events):
        per_user.setdefault(ev.user_key, []).append((ev.timestamp, order, ev.item_key))

    kept = {u: rows for u, rows in per_user.items() if len(rows) >= min_interactions}
    if not kept:
        raise EmptyDatasetError(f"no user has at least {min_interactions} interactions")

    # item ids by first appearance among surviving events
    first_seen: dict[str, int] = {}
    for rows in kept.values():
        for _, order, item in rows:
            if item not in first_seen or order < first_seen[item]:
                first_seen[item] = order
    item_keys = sorted(first_seen, key=first_seen.__getitem__)
    item_id = {k: i for i, k in enumerate(item_keys)}

    user_keys = list(kept)
    sequences = []
    for u in user_keys:
        rows = sorted(kept[u])
        sequences.append(np.array([item_id[item] for _, _, item in rows], dtype=np.int64))
    return EncodedDataset(user_keys, item_keys, sequences)


class TrainingExample(NamedTuple):
    user: int
    history: tuple[int, ...]
    target: int
    label: int


@dataclass
class Holdout:
    """One held-out positive and its sampled negatives per user."""

    positives: np.ndarray  # [M]
    negatives: np.ndarray  # [M, n_neg]
    positions: np.ndarray  # index of the positive in the user's full list

    def candidates(self, user: int) -> np.ndarray:
        return np.concatenate([[self.positives[user]], self.negatives[user]])


@dataclass
class SplitDataset:
    dataset: EncodedDataset
    validation: Holdout
    test: Holdout

    @property
    def num_users(self) -> int:
        return self.dataset.num_users

    @property
    def num_items(self) -> int:
        return self.dataset.num_items

    @property
    def train_lists(self) -> list[np.ndarray]:
        return [s[:-2] for s in self.dataset.sequences]

    def holdout(self, side: str) -> Holdout:
        if side not in ("validation", "test"):
            raise ValueError(f"side must be 'validation' or 'test', got {side!r}")
        return self.validation if side == "validation" else self.test

    def history_before(self, user: int, position: int, k: int) -> np.ndarray | None:
        """The ``k`` items preceding ``position`` in the user's full list."""
        if position < k:
            return None
        return self.dataset.sequences[user][position - k:position]


def unobserved_items(sequence: np.ndarray, num_items: int) -> np.ndarray:
    mask = np.ones(num_items, dtype=bool)
    mask[sequence] = False
    return np.flatnonzero(mask)


def leave_one_out_split(dataset: EncodedDataset, eval_negatives: int = 99, seed: int = 0) -> SplitDataset:
    """Last item per user is the test positive, the one before it validation."""
    m = dataset.num_users
    val_neg = np.empty((m, eval_negatives), dtype=np.int64)
    test_neg = np.empty((m, eval_negatives), dtype=np.int64)
    val_pos = np.empty(m, dtype=np.int64)
    test_pos = np.empty(m, dtype=np.int64)
    lengths = np.array([len(s) for s in dataset.sequences])
    for u, seq in enumerate(dataset.sequences):
        if len(seq) < 3:
            raise SamplingError(f"user {dataset.user_keys[u]!r} has only {len(seq)} interactions; need 3")
        pool = unobserved_items(seq, dataset.num_items)
        if len(pool) < eval_negatives:
            raise SamplingError(
                f"user {dataset.user_keys[u]!r} has {len(pool)} unobserved items, fewer than {eval_negatives}"
            )
        rng = substream(seed, TAG_EVAL_NEGATIVES, u)
        val_neg[u] = rng.choice(pool, size=eval_negatives, replace=False)
        test_neg[u] = rng.choice(pool, size=eval_negatives, replace=False)
        val_pos[u] = seq[-2]
        test_pos[u] = seq[-1]
    return SplitDataset(
        dataset,
        Holdout(val_pos, val_neg, lengths - 2),
        Holdout(test_pos, test_neg, lengths - 1),
    )


@dataclass
class ExampleSet:
    """Training examples stored column-wise; iterating yields TrainingExample."""

    users: np.ndarray
    histories: np.ndarray
    targets: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.users)

    def __iter__(self) -> Iterator[TrainingExample]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> TrainingExample:
        return TrainingExample(
            int(self.users[i]), tuple(int(x) for x in self.histories[i]), int(self.targets[i]), int(self.labels[i])
        )

    def take(self, idx) -> "ExampleSet":
        return ExampleSet(self.users[idx], self.histories[idx], self.targets[idx], self.labels[idx])


def build_training_examples(
    split: SplitDataset, history_size: int, train_negatives: int = 4, seed: int = 0, epoch: int = 0
) -> ExampleSet:
    """Sliding windows over each user's train list, each positive followed by its negatives.

    Negatives are drawn uniformly (with replacement) from items the user never
    interacted with, from a substream keyed by (seed, epoch, user).
    """
    if history_size < 1:
        raise ValueError(f"history size must be >= 1, got {history_size}")
    k = history_size
    group = 1 + train_negatives
    users, hists, targets, labels = [], [], [], []
    for u, seq in enumerate(split.dataset.sequences):
        train = seq[:-2]
        n_pos = len(train) - k
        if n_pos <= 0:
            continue
        windows = np.lib.stride_tricks.sliding_window_view(train, k)[:n_pos]
        pos_targets = train[k:]
        tgt = np.empty((n_pos, group), dtype=np.int64)
        tgt[:, 0] = pos_targets
        if train_negatives:
            pool = unobserved_items(seq, split.num_items)
            if len(pool) == 0:
                raise SamplingError(f"user {split.dataset.user_keys[u]!r} has no unobserved items")
            rng = substream(seed, TAG_TRAIN_NEGATIVES, epoch, u)
            tgt[:, 1:] = pool[rng.integers(0, len(pool), size=(n_pos, train_negatives))]
        lab = np.zeros((n_pos, group), dtype=np.int8)
        lab[:, 0] = 1
        users.append(np.full(n_pos * group, u, dtype=np.int64))
        hists.append(np.repeat(windows, group, axis=0))
        targets.append(tgt.reshape(-1))
        labels.append(lab.reshape(-1))
    if not users:
        return ExampleSet(
            np.zeros(0, np.int64), np.zeros((0, k), np.int64), np.zeros(0, np.int64), np.zeros(0, np.int8)
        )
    return ExampleSet(np.concatenate(users), np.concatenate(hists), np.concatenate(targets), np.concatenate(labels))


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticSpec:
    """Clustered users with a planted fraction of off-cluster ("unexpected") events.

    Within the preferred cluster a user walks forward along a fixed item
    order, advancing 1 to ``max_step`` places per genuine event, so the next
    genuine item depends on the last genuine one. ``max_step=0`` draws
    genuine items uniformly from the cluster instead.
    """

    num_users: int = 200
    num_items: int = 500
    num_clusters: int = 5
    interactions_per_user: int = 30
    noise_rate: float = 0.0
    seed: int = 0
    max_step: int = 3

    def __post_init__(self):
        if self.interactions_per_user < 20:
            raise ValueError("interactions_per_user must be >= 20")
        if not 0 <= self.noise_rate < 1:
            raise ValueError("noise_rate must be in [0, 1)")
        if self.num_clusters < 1 or self.num_items < self.num_clusters:
            raise ValueError("need at least one item per cluster")
        if self.noise_rate > 0 and self.num_clusters < 2:
            raise ValueError("noise needs at least two clusters")
        if self.max_step < 0:
            raise ValueError("max_step must be >= 0")


@dataclass
class SyntheticData:
    events: list[InteractionEvent]
    unexpected: np.ndarray  # bool per event
    clusters: list[np.ndarray] = field(default_factory=list)
    preferred: np.ndarray | None = None

    @property
    def labels(self) -> list[str]:
        return ["unexpected" if x else "genuine" for x in self.unexpected]


def generate_synthetic(spec: SyntheticSpec) -> SyntheticData:
    rng = substream(spec.seed, TAG_SYNTH)
    # equal-sized groups; each group's order is the walk order
    clusters = [rng.permutation(c) for c in np.array_split(np.arange(spec.num_items), spec.num_clusters)]
    n = spec.interactions_per_user
    preferred = rng.integers(0, spec.num_clusters, size=spec.num_users)
    events, flags = [], []
    for u in range(spec.num_users):
        home = clusters[preferred[u]]
        noisy = rng.random(n) < spec.noise_rate
        other = (preferred[u] + rng.integers(1, max(spec.num_clusters, 2), size=n)) % spec.num_clusters
        uniform_pick = rng.random(n)
        if spec.max_step:
            steps = rng.integers(1, spec.max_step + 1, size=n)
        pos = int(rng.integers(0, len(home)))
        t0 = 1_000_000 + int(rng.integers(0, 1_000_000))
        for j in range(n):
            if noisy[j]:
                members = clusters[other[j]]
                item = members[int(uniform_pick[j] * len(members))]
            elif spec.max_step:
                pos = (pos + steps[j]) % len(home)
                item = home[pos]
            else:
                item = home[int(uniform_pick[j] * len(home))]
            events.append(InteractionEvent(str(u), str(int(item)), t0 + j))
        flags.append(noisy)
    return SyntheticData(events, np.concatenate(flags), clusters, preferred)
