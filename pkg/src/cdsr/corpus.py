"""Interaction ingestion, preprocessing, leave-one-out splits and synthetic corpora."""

from __future__ import annotations

import io
import json
import logging
import os
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

logger = logging.getLogger(__name__)

DOMAINS = ("X", "Y")
PAD = -1


class CorpusError(RuntimeError):
    pass


@dataclass(frozen=True)
class InteractionEvent:
    user_id: str
    item_id: str
    domain: str
    timestamp: int


class IngestResult(NamedTuple):
    events: list
    rejected: list  # (line number, reason)


@dataclass
class DomainVocab:
    """Per-domain dense item indices. Y items live at ``n_x + local`` in the global space."""

    items_x: list[str]
    items_y: list[str]
    index_x: dict[str, int] = field(init=False, repr=False)
    index_y: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.index_x = {it: i for i, it in enumerate(self.items_x)}
        self.index_y = {it: i for i, it in enumerate(self.items_y)}

    @property
    def n_x(self) -> int:
        return len(self.items_x)

    @property
    def n_y(self) -> int:
        return len(self.items_y)

    @property
    def n_items(self) -> int:
        return self.n_x + self.n_y

    def size(self, domain: str) -> int:
        return self.n_x if domain == "X" else self.n_y

    def offset(self, domain: str) -> int:
        return 0 if domain == "X" else self.n_x

    def global_index(self, item_id: str, domain: str) -> int:
        if domain == "X":
            return self.index_x[item_id]
        return self.n_x + self.index_y[item_id]

    def domain_of(self, global_idx: int) -> str:
        if not 0 <= global_idx < self.n_items:
            raise IndexError(f"global index {global_idx} outside vocab of {self.n_items}")
        return "X" if global_idx < self.n_x else "Y"

    def local_index(self, global_idx: int) -> int:
        return global_idx if global_idx < self.n_x else global_idx - self.n_x


@dataclass
class CrossDomainSequence:
    """A user's mixed sequence. Padded positions hold ``PAD`` in ``items`` and ``""`` in ``domains``."""

    user_id: str
    items: list[int]
    domains: list[str]

    def __post_init__(self):
        if len(self.items) != len(self.domains):
            raise ValueError("items and domains must have equal length")

    def __len__(self):
        return len(self.items)

    def view(self, domain: str) -> list[int]:
        return [it if dom == domain else PAD for it, dom in zip(self.items, self.domains)]

    @property
    def view_x(self) -> list[int]:
        return self.view("X")

    @property
    def view_y(self) -> list[int]:
        return self.view("Y")

    def n_real(self) -> int:
        return sum(1 for it in self.items if it != PAD)

    def domain_items(self, domain: str) -> list[int]:
        return [it for it, dom in zip(self.items, self.domains) if dom == domain]


@dataclass
class EvalInstance:
    user_id: str
    domain: str
    prefix: CrossDomainSequence
    target: int  # global index
    partition: str  # "val" or "test"


@dataclass
class DatasetSplit:
    train: list[CrossDomainSequence]
    eval_instances: list[EvalInstance]

    def partition(self, name: str, domain: str | None = None) -> list[EvalInstance]:
        return [
            inst
            for inst in self.eval_instances
            if inst.partition == name and (domain is None or inst.domain == domain)
        ]


@dataclass
class SyntheticSpec:
    n_users: int = 50
    n_items_per_domain: int = 200
    n_clusters: int = 10
    transfer_strength: float = 0.8
    seq_len_range: tuple[int, int] = (8, 15)
    seed: int = 0
    clusters_per_user: int = 2

    def __post_init__(self):
        if self.n_items_per_domain % self.n_clusters:
            raise ValueError("n_clusters must divide n_items_per_domain")
        if not 0.0 <= self.transfer_strength <= 1.0:
            raise ValueError("transfer_strength must lie in [0, 1]")
        lo, hi = self.seq_len_range
        if lo < 1 or hi < lo:
            raise ValueError(f"bad seq_len_range {self.seq_len_range}")
        if not 1 <= self.clusters_per_user <= self.n_clusters:
            raise ValueError("clusters_per_user must be in [1, n_clusters]")


# ---------------------------------------------------------------------------
# ingestion


def ingest_events(source, domain_map: dict[str, str] | None = None) -> IngestResult:
    """Parse ``user<TAB>item<TAB>domain<TAB>timestamp`` lines.

    ``source`` is a path or an iterable of lines. Records are sorted by
    (user, timestamp); timestamp ties keep file order.
    """
    if isinstance(source, (str, os.PathLike)):
        try:
            with open(source, encoding="utf-8") as fh:
                lines = fh.read().splitlines()
        except OSError as exc:
            raise CorpusError(f"cannot read event source {source}: {exc}") from exc
    else:
        lines = source

    events, rejected = [], []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            rejected.append((lineno, f"expected 4 fields, got {len(parts)}"))
            continue
        user, item, domain, ts = parts
        if domain_map:
            domain = domain_map.get(domain, domain)
        if domain not in DOMAINS:
            rejected.append((lineno, f"unknown domain {domain!r}"))
            continue
        try:
            ts_val = int(ts)
        except ValueError:
            rejected.append((lineno, f"bad timestamp {ts!r}"))
            continue
        if ts_val < 0 or not user or not item:
            rejected.append((lineno, "negative timestamp or empty id"))
            continue
        events.append(InteractionEvent(user, item, domain, ts_val))

    if rejected:
        logger.warning("rejected %d malformed lines (first: line %d, %s)", len(rejected), *rejected[0])
    events.sort(key=lambda e: (e.user_id, e.timestamp))
    return IngestResult(events, rejected)


def write_events(events: Iterable[InteractionEvent], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ev in events:
            fh.write(f"{ev.user_id}\t{ev.item_id}\t{ev.domain}\t{ev.timestamp}\n")


# ---------------------------------------------------------------------------
# preprocessing


def build_corpus(
    events: list[InteractionEvent], min_interactions: int = 10, min_domain_len: int = 3
) -> tuple[DomainVocab, list[CrossDomainSequence]]:
    """Filter to common users, drop rare items then rare users, enforce per-domain length.

    Single pass in that order; not iterated to a k-core fixpoint.
    """
    if not events:
        raise CorpusError("no events to build a corpus from")
    counts = {"events_in": len(events)}

    by_user_domains = defaultdict(set)
    for ev in events:
        by_user_domains[ev.user_id].add(ev.domain)
    common = {u for u, doms in by_user_domains.items() if len(doms) == 2}
    kept = [ev for ev in events if ev.user_id in common]
    counts["common_users"] = len(common)

    item_freq = Counter((ev.domain, ev.item_id) for ev in kept)
    kept = [ev for ev in kept if item_freq[(ev.domain, ev.item_id)] >= min_interactions]
    user_freq = Counter(ev.user_id for ev in kept)
    kept = [ev for ev in kept if user_freq[ev.user_id] >= min_interactions]
    counts["after_frequency"] = len(kept)

    per_user = defaultdict(list)
    for ev in kept:
        per_user[ev.user_id].append(ev)
    survivors = {}
    for user, evs in per_user.items():
        n_x = sum(1 for e in evs if e.domain == "X")
        n_y = len(evs) - n_x
        if n_x >= min_domain_len and n_y >= min_domain_len:
            survivors[user] = evs
    if not survivors:
        raise CorpusError(f"empty corpus after filtering: {counts}")

    items_x = sorted({e.item_id for evs in survivors.values() for e in evs if e.domain == "X"})
    items_y = sorted({e.item_id for evs in survivors.values() for e in evs if e.domain == "Y"})
    vocab = DomainVocab(items_x, items_y)

    sequences = []
    for user in sorted(survivors):
        evs = sorted(survivors[user], key=lambda e: e.timestamp)  # stable: ties keep input order
        sequences.append(
            CrossDomainSequence(
                user,
                [vocab.global_index(e.item_id, e.domain) for e in evs],
                [e.domain for e in evs],
            )
        )
    logger.info(
        "corpus: %d users, %d X items, %d Y items (%s)", len(sequences), vocab.n_x, vocab.n_y, counts
    )
    return vocab, sequences


def make_splits(sequences: list[CrossDomainSequence], seed: int) -> DatasetSplit:
    """Leave-one-out per (user, domain); instances split 50/50 into val/test per domain."""
    train, instances = [], []
    for seq in sequences:
        held = set()
        for domain in DOMAINS:
            positions = [t for t, dom in enumerate(seq.domains) if dom == domain]
            if not positions:
                continue
            t = positions[-1]
            held.add(t)
            prefix = CrossDomainSequence(seq.user_id, seq.items[:t], seq.domains[:t])
            instances.append(EvalInstance(seq.user_id, domain, prefix, seq.items[t], ""))
        keep = [t for t in range(len(seq)) if t not in held]
        train.append(
            CrossDomainSequence(
                seq.user_id, [seq.items[t] for t in keep], [seq.domains[t] for t in keep]
            )
        )

    rng = np.random.default_rng(seed)
    for domain in DOMAINS:
        idx = [i for i, inst in enumerate(instances) if inst.domain == domain]
        order = rng.permutation(len(idx))
        n_val = (len(idx) + 1) // 2
        for rank, j in enumerate(order):
            instances[idx[j]].partition = "val" if rank < n_val else "test"
    return DatasetSplit(train, instances)


def truncate_pad(seq: CrossDomainSequence, N: int = 30) -> CrossDomainSequence:
    """Keep the most recent ``N`` positions and left-pad to length ``N``."""
    if N < 1:
        raise ValueError("N must be >= 1")
    items, domains = seq.items[-N:], seq.domains[-N:]
    n_pad = N - len(items)
    return CrossDomainSequence(seq.user_id, [PAD] * n_pad + list(items), [""] * n_pad + list(domains))


# ---------------------------------------------------------------------------
# synthetic corpora


def _cluster(item_idx: int, spec: SyntheticSpec) -> int:
    return item_idx // (spec.n_items_per_domain // spec.n_clusters)


def item_cluster(item_id: str, spec: SyntheticSpec) -> int:
    """Cluster of a synthetic item id such as ``x17`` or ``y3``."""
    return _cluster(int(item_id[1:]), spec)


def generate_synthetic(spec: SyntheticSpec) -> list[InteractionEvent]:
    """Planted-structure two-domain corpus.

    Users prefer a few clusters per domain, drawn independently per domain.
    With probability ``transfer_strength`` a Y item takes the cluster of the
    most recent X item instead of the user's own Y preference.
    """
    rng = np.random.default_rng(spec.seed)
    size = spec.n_items_per_domain // spec.n_clusters
    lo, hi = spec.seq_len_range
    events = []
    for u in range(spec.n_users):
        user = f"u{u:05d}"
        pref_x = rng.choice(spec.n_clusters, spec.clusters_per_user, replace=False)
        pref_y = rng.choice(spec.n_clusters, spec.clusters_per_user, replace=False)
        n_x, n_y = rng.integers(lo, hi + 1, size=2)
        order = np.array(["X"] * n_x + ["Y"] * n_y)
        rng.shuffle(order)
        ts = int(rng.integers(0, 1_000_000))
        last_x_cluster = None
        for domain in order:
            ts += int(rng.integers(1, 1000))
            if domain == "X":
                cluster = int(rng.choice(pref_x))
                last_x_cluster = cluster
                item = f"x{cluster * size + int(rng.integers(size))}"
            else:
                if last_x_cluster is not None and rng.random() < spec.transfer_strength:
                    cluster = last_x_cluster
                else:
                    cluster = int(rng.choice(pref_y))
                item = f"y{cluster * size + int(rng.integers(size))}"
            events.append(InteractionEvent(user, item, str(domain), ts))
    return events


# ---------------------------------------------------------------------------
# on-disk format
#
# vocab.tsv   domain<TAB>local index<TAB>global index<TAB>item id
# train.tsv   user<TAB>space-separated global indices<TAB>space-separated domain tags
# eval.tsv    user<TAB>domain<TAB>partition<TAB>target<TAB>prefix indices<TAB>prefix domains


def _join(xs) -> str:
    return " ".join(str(x) for x in xs)


def save_prepared(directory, vocab: DomainVocab, split: DatasetSplit) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "vocab.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for domain, items in (("X", vocab.items_x), ("Y", vocab.items_y)):
            for i, item in enumerate(items):
                fh.write(f"{domain}\t{i}\t{vocab.offset(domain) + i}\t{item}\n")
    with open(d / "train.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for seq in split.train:
            fh.write(f"{seq.user_id}\t{_join(seq.items)}\t{_join(seq.domains)}\n")
    with open(d / "eval.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for inst in split.eval_instances:
            fh.write(
                f"{inst.user_id}\t{inst.domain}\t{inst.partition}\t{inst.target}\t"
                f"{_join(inst.prefix.items)}\t{_join(inst.prefix.domains)}\n"
            )


def load_prepared(directory) -> tuple[DomainVocab, DatasetSplit]:
    d = Path(directory)
    if not (d / "vocab.tsv").exists():
        raise CorpusError(f"{d} is not a prepared corpus directory")
    items = {"X": [], "Y": []}
    for line in (d / "vocab.tsv").read_text(encoding="utf-8").splitlines():
        domain, local, _, item = line.split("\t")
        if int(local) != len(items[domain]):
            raise CorpusError(f"vocab.tsv out of order at {line!r}")
        items[domain].append(item)
    vocab = DomainVocab(items["X"], items["Y"])

    def parse_ints(s):
        return [int(x) for x in s.split()] if s else []

    train = []
    for line in (d / "train.tsv").read_text(encoding="utf-8").splitlines():
        user, idx, doms = line.split("\t")
        train.append(CrossDomainSequence(user, parse_ints(idx), doms.split() if doms else []))
    instances = []
    for line in (d / "eval.tsv").read_text(encoding="utf-8").splitlines():
        user, domain, part, target, idx, doms = line.split("\t")
        prefix = CrossDomainSequence(user, parse_ints(idx), doms.split() if doms else [])
        instances.append(EvalInstance(user, domain, prefix, int(target), part))
    return vocab, DatasetSplit(train, instances)


def corpus_statistics(vocab: DomainVocab, sequences, split: DatasetSplit) -> dict:
    """Item, instance and length counts in the layout of a dataset statistics table."""
    stats = {
        "users": len(sequences),
        "items_X": vocab.n_x,
        "items_Y": vocab.n_y,
        "train_sequences": len(split.train),
        "avg_length": round(float(np.mean([len(s) for s in sequences])), 2) if sequences else 0.0,
    }
    for domain in DOMAINS:
        for part in ("val", "test"):
            stats[f"{part}_{domain}"] = len(split.partition(part, domain))
    return stats


def format_statistics(stats: dict) -> str:
    buf = io.StringIO()
    json.dump(stats, buf, indent=2, sort_keys=True)
    return buf.getvalue()
