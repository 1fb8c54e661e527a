"""Triplet store, directional neighbor index, and generalization splits.

Triplet files are UTF-8 TSV, one ``head<TAB>relation<TAB>tail`` per line.
Vocabulary files hold one symbol per line; the line number is the id.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ParseError, VocabError


class Direction(IntEnum):
    """Which side of an entity a neighbor sits on.

    For a triplet ``(a, r, b)``, ``b`` is a RIGHT neighbor of ``a`` (stored
    with the right relation slot) and ``a`` is a LEFT neighbor of ``b``.
    The same enum names the missing slot of a query: a RIGHT query asks for
    the right entity of ``(a, r, ?)``.
    """

    LEFT = 0
    RIGHT = 1


@dataclass(frozen=True, order=True)
class Triplet:
    head: int
    relation: int
    tail: int


@dataclass
class KnowledgeGraph:
    """Entity/relation vocabularies plus a deduplicated triplet list."""

    entity_names: list[str]
    relation_names: list[str]
    triplets: list[Triplet]
    n_duplicates_dropped: int = 0
    entity_ids: dict[str, int] = field(default_factory=dict)
    relation_ids: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.entity_ids:
            self.entity_ids = {name: i for i, name in enumerate(self.entity_names)}
        if not self.relation_ids:
            self.relation_ids = {name: i for i, name in enumerate(self.relation_names)}

    @property
    def n_entities(self) -> int:
        return len(self.entity_names)

    @property
    def n_relations(self) -> int:
        return len(self.relation_names)

    def entity_id(self, name: str) -> int:
        try:
            return self.entity_ids[name]
        except KeyError:
            raise VocabError(f"unknown entity symbol: {name!r}") from None

    def relation_id(self, name: str) -> int:
        try:
            return self.relation_ids[name]
        except KeyError:
            raise VocabError(f"unknown relation symbol: {name!r}") from None


def vocab_sha256(names: Sequence[str]) -> str:
    """Digest of a vocabulary, used to detect checkpoint/data mismatches."""
    return hashlib.sha256("\n".join(names).encode("utf-8")).hexdigest()


def read_vocab(path) -> list[str]:
    return Path(path).read_text(encoding="utf-8").splitlines()


def write_vocab(names: Sequence[str], path) -> None:
    Path(path).write_text("".join(n + "\n" for n in names), encoding="utf-8")


def _parse_lines(path) -> Iterable[tuple[int, str, str, str]]:
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise ParseError(
                    f"expected 3 tab-separated fields, got {len(fields)}",
                    path=path,
                    line_no=line_no,
                )
            yield line_no, fields[0], fields[1], fields[2]


class _Vocab:
    """Name->id map that either grows on demand or rejects unknown symbols."""

    def __init__(self, names: list[str] | None, kind: str):
        self.frozen = names is not None
        self.names: list[str] = list(names) if names else []
        self.ids = {name: i for i, name in enumerate(self.names)}
        self.kind = kind

    def lookup(self, name: str, path, line_no: int) -> int:
        got = self.ids.get(name)
        if got is not None:
            return got
        if self.frozen:
            raise VocabError(
                f"unknown {self.kind} symbol {name!r} at {path}:{line_no}"
            )
        new_id = len(self.names)
        self.names.append(name)
        self.ids[name] = new_id
        return new_id


def load_triplets(path, entity_vocab=None, relation_vocab=None) -> KnowledgeGraph:
    """Load a triplet TSV file into a KnowledgeGraph.

    Vocabularies come from the optional vocab files when given, otherwise
    ids are assigned in first-appearance order (head, relation, tail per
    line). Duplicate triplets are dropped and counted.
    """
    ents = _Vocab(read_vocab(entity_vocab) if entity_vocab else None, "entity")
    rels = _Vocab(read_vocab(relation_vocab) if relation_vocab else None, "relation")
    triplets: list[Triplet] = []
    seen: set[tuple[int, int, int]] = set()
    dropped = 0
    for line_no, h, r, t in _parse_lines(path):
        trip = (
            ents.lookup(h, path, line_no),
            rels.lookup(r, path, line_no),
            ents.lookup(t, path, line_no),
        )
        if trip in seen:
            dropped += 1
            continue
        seen.add(trip)
        triplets.append(Triplet(*trip))
    return KnowledgeGraph(ents.names, rels.names, triplets, dropped)


def parse_triplets(path, kg: KnowledgeGraph) -> list[Triplet]:
    """Parse a triplet file against an existing graph's vocabulary."""
    out = []
    for line_no, h, r, t in _parse_lines(path):
        try:
            out.append(Triplet(kg.entity_id(h), kg.relation_id(r), kg.entity_id(t)))
        except VocabError as e:
            raise VocabError(f"{e} at {path}:{line_no}") from None
    return out


@dataclass
class Dataset:
    """A train/valid/test benchmark directory with one shared vocabulary.

    ``kg.triplets`` holds the training triplets.
    """

    kg: KnowledgeGraph
    valid: list[Triplet]
    test: list[Triplet]

    def all_triplets(self) -> list[Triplet]:
        return list(self.kg.triplets) + list(self.valid) + list(self.test)


_TRIPLET_FILE_CANDIDATES = {
    "train": ("train.txt", "train.tsv"),
    "valid": ("valid.txt", "valid.tsv"),
    "test": ("test.txt", "test.tsv"),
}


def _find_split_file(data_dir: Path, split: str) -> Path | None:
    for name in _TRIPLET_FILE_CANDIDATES[split]:
        p = data_dir / name
        if p.exists():
            return p
    return None


def load_dataset(data_dir) -> Dataset:
    """Load train/valid/test TSVs sharing one vocabulary.

    Uses ``entities.tsv``/``relations.tsv`` as explicit vocabularies when
    present; otherwise builds the vocabulary in first-appearance order
    across train, valid, test. Missing valid/test files yield empty lists.
    """
    data_dir = Path(data_dir)
    train_path = _find_split_file(data_dir, "train")
    if train_path is None:
        raise FileNotFoundError(f"no train.txt or train.tsv in {data_dir}")
    ent_vocab = data_dir / "entities.tsv"
    rel_vocab = data_dir / "relations.tsv"
    explicit = ent_vocab.exists() and rel_vocab.exists()

    ents = _Vocab(read_vocab(ent_vocab) if explicit else None, "entity")
    rels = _Vocab(read_vocab(rel_vocab) if explicit else None, "relation")

    def load_split(path: Path | None) -> tuple[list[Triplet], int]:
        if path is None:
            return [], 0
        triplets, seen, dropped = [], set(), 0
        for line_no, h, r, t in _parse_lines(path):
            trip = (
                ents.lookup(h, path, line_no),
                rels.lookup(r, path, line_no),
                ents.lookup(t, path, line_no),
            )
            if trip in seen:
                dropped += 1
                continue
            seen.add(trip)
            triplets.append(Triplet(*trip))
        return triplets, dropped

    train, dropped = load_split(train_path)
    valid, _ = load_split(_find_split_file(data_dir, "valid"))
    test, _ = load_split(_find_split_file(data_dir, "test"))
    kg = KnowledgeGraph(ents.names, rels.names, train, dropped)
    return Dataset(kg, valid, test)


def merged_graph(ds: Dataset) -> KnowledgeGraph:
    """One graph over train ∪ valid ∪ test (deduplicated, input order)."""
    seen: set[Triplet] = set()
    merged = []
    for t in ds.all_triplets():
        if t not in seen:
            seen.add(t)
            merged.append(t)
    return KnowledgeGraph(
        list(ds.kg.entity_names),
        list(ds.kg.relation_names),
        merged,
        len(ds.all_triplets()) - len(merged),
    )


# ---------------------------------------------------------------------------
# Neighbor index


@dataclass
class NeighborIndex:
    """Per-entity sorted arrays of (relation, direction, neighbor) entries."""

    entries: list[np.ndarray]

    @property
    def n_entities(self) -> int:
        return len(self.entries)

    @property
    def n_entries(self) -> int:
        return sum(len(e) for e in self.entries)

    def degree(self, entity: int) -> int:
        return len(self.entries[entity])

    def neighborhood(
        self, entity: int, withhold: tuple[int, int, int] | None = None
    ) -> np.ndarray:
        """Entries for an entity, optionally minus one withheld entry."""
        rows = self.entries[entity]
        if withhold is None or len(rows) == 0:
            return rows
        rel, direction, neighbor = withhold
        keep = ~(
            (rows[:, 0] == rel)
            & (rows[:, 1] == int(direction))
            & (rows[:, 2] == neighbor)
        )
        if keep.all():
            return rows
        return rows[keep]


def _check_ids(kg_n_entities: int, kg_n_relations: int, triplets: Iterable[Triplet]):
    for t in triplets:
        if not (0 <= t.head < kg_n_entities and 0 <= t.tail < kg_n_entities):
            raise IndexError(f"entity id out of range in {t}")
        if not (0 <= t.relation < kg_n_relations):
            raise IndexError(f"relation id out of range in {t}")


def _entries_from_triplets(
    n_entities: int, triplets: Iterable[Triplet]
) -> list[list[tuple[int, int, int]]]:
    per_entity: list[list[tuple[int, int, int]]] = [[] for _ in range(n_entities)]
    for t in triplets:
        per_entity[t.head].append((t.relation, int(Direction.RIGHT), t.tail))
        per_entity[t.tail].append((t.relation, int(Direction.LEFT), t.head))
    return per_entity


def _finalize(per_entity: list[list[tuple[int, int, int]]]) -> list[np.ndarray]:
    out = []
    for rows in per_entity:
        if not rows:
            out.append(np.empty((0, 3), dtype=np.int64))
            continue
        arr = np.array(rows, dtype=np.int64)
        # unique(axis=0) both deduplicates and sorts lexicographically
        # by (relation, direction, neighbor)
        out.append(np.unique(arr, axis=0))
    return out


def build_neighbor_index(
    kg: KnowledgeGraph, triplets: Sequence[Triplet] | None = None
) -> NeighborIndex:
    """Index triplets into per-entity directional adjacency lists.

    Each triplet contributes exactly two entries; self-loops put both on
    the same entity (they differ in direction).
    """
    if triplets is None:
        triplets = kg.triplets
    _check_ids(kg.n_entities, kg.n_relations, triplets)
    return NeighborIndex(_finalize(_entries_from_triplets(kg.n_entities, triplets)))


def augment_index(index: NeighborIndex, extra: Sequence[Triplet]) -> NeighborIndex:
    """New index with the extra triplets merged in; the input is unchanged."""
    n_entities = index.n_entities
    n_relations = 0
    for rows in index.entries:
        if len(rows):
            n_relations = max(n_relations, int(rows[:, 0].max()) + 1)
    for t in extra:
        if not (0 <= t.head < n_entities and 0 <= t.tail < n_entities):
            raise IndexError(f"entity id out of range in {t}")
        if t.relation < 0:
            raise IndexError(f"relation id out of range in {t}")
    per_entity = _entries_from_triplets(n_entities, extra)
    merged = []
    for entity, rows in enumerate(per_entity):
        old = index.entries[entity]
        if not rows:
            merged.append(old.copy())
            continue
        stacked = np.vstack([old, np.array(rows, dtype=np.int64)])
        merged.append(np.unique(stacked, axis=0))
    return NeighborIndex(merged)


# ---------------------------------------------------------------------------
# Generalization split


@dataclass
class GenSplit:
    """Held-out-entity partition of a knowledge graph.

    Train triplets touch no held-out entity; observed/valid/test triplets
    touch exactly one. Triplets with both endpoints held out are discarded
    (counted). ``empty_observed`` lists held-out entities with no observed
    triplet at all.
    """

    heldout: frozenset[int]
    train: list[Triplet]
    observed: list[Triplet]
    valid: list[Triplet]
    test: list[Triplet]
    n_discarded_both: int
    empty_observed: list[int]
    seed: int
    n_heldout: int

    def counts(self) -> dict[str, int]:
        return {
            "heldout": self.n_heldout,
            "train": len(self.train),
            "observed": len(self.observed),
            "valid": len(self.valid),
            "test": len(self.test),
            "discarded_both_heldout": self.n_discarded_both,
            "empty_observed_heldout": len(self.empty_observed),
        }


def generate_gen_split(kg: KnowledgeGraph, n_heldout: int, seed: int) -> GenSplit:
    """Hold out entities and partition the remaining triplets.

    Held-out entities are sampled uniformly without replacement. Triplets
    touching exactly one held-out entity are shuffled (same seed stream)
    and split observed:valid:test = 2/3:1/6:1/6, remainders to observed.
    """
    if n_heldout >= kg.n_entities:
        raise ValueError(
            f"n_heldout={n_heldout} must be smaller than |entities|={kg.n_entities}"
        )
    rng = np.random.default_rng(seed)
    heldout = frozenset(
        int(i) for i in rng.choice(kg.n_entities, size=n_heldout, replace=False)
    )

    train, pool = [], []
    n_both = 0
    for t in kg.triplets:
        n_touch = (t.head in heldout) + (t.tail in heldout)
        if n_touch == 0:
            train.append(t)
        elif n_touch == 1:
            pool.append(t)
        else:
            n_both += 1

    order = rng.permutation(len(pool))
    pool = [pool[i] for i in order]
    n_valid = len(pool) // 6
    n_test = len(pool) // 6
    n_obs = len(pool) - n_valid - n_test
    observed = pool[:n_obs]
    valid = pool[n_obs : n_obs + n_valid]
    test = pool[n_obs + n_valid :]

    touched = set()
    for t in observed:
        touched.add(t.head if t.head in heldout else t.tail)
    empty = sorted(h for h in heldout if h not in touched)

    return GenSplit(
        heldout=heldout,
        train=train,
        observed=observed,
        valid=valid,
        test=test,
        n_discarded_both=n_both,
        empty_observed=empty,
        seed=seed,
        n_heldout=n_heldout,
    )


def write_triplets(triplets: Sequence[Triplet], kg: KnowledgeGraph, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for t in triplets:
            f.write(
                f"{kg.entity_names[t.head]}\t{kg.relation_names[t.relation]}\t"
                f"{kg.entity_names[t.tail]}\n"
            )


def save_gen_split(split: GenSplit, kg: KnowledgeGraph, out_dir) -> None:
    """Write the split as TSV files plus manifest.json.

    Also writes the full vocabulary (entities.tsv/relations.tsv) so that a
    model trained on train.tsv keeps ids consistent with the source graph.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_vocab(kg.entity_names, out_dir / "entities.tsv")
    write_vocab(kg.relation_names, out_dir / "relations.tsv")
    with open(out_dir / "heldout.tsv", "w", encoding="utf-8") as f:
        for i in sorted(split.heldout):
            f.write(kg.entity_names[i] + "\n")
    write_triplets(split.train, kg, out_dir / "train.tsv")
    write_triplets(split.observed, kg, out_dir / "observed.tsv")
    write_triplets(split.valid, kg, out_dir / "valid.tsv")
    write_triplets(split.test, kg, out_dir / "test.tsv")
    manifest = {
        "seed": split.seed,
        "n_heldout": split.n_heldout,
        "counts": split.counts(),
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2) + "\n", encoding="utf-8"
    )


def load_gen_split(split_dir) -> tuple[GenSplit, KnowledgeGraph]:
    """Load a split directory written by :func:`save_gen_split`."""
    split_dir = Path(split_dir)
    manifest = json.loads((split_dir / "manifest.json").read_text(encoding="utf-8"))
    ent_names = read_vocab(split_dir / "entities.tsv")
    rel_names = read_vocab(split_dir / "relations.tsv")
    kg = KnowledgeGraph(ent_names, rel_names, [], 0)
    heldout = frozenset(kg.entity_id(n) for n in read_vocab(split_dir / "heldout.tsv"))
    train = parse_triplets(split_dir / "train.tsv", kg)
    observed = parse_triplets(split_dir / "observed.tsv", kg)
    valid = parse_triplets(split_dir / "valid.tsv", kg)
    test = parse_triplets(split_dir / "test.tsv", kg)
    kg.triplets = train
    touched = {t.head if t.head in heldout else t.tail for t in observed}
    split = GenSplit(
        heldout=heldout,
        train=train,
        observed=observed,
        valid=valid,
        test=test,
        n_discarded_both=manifest["counts"].get("discarded_both_heldout", 0),
        empty_observed=sorted(h for h in heldout if h not in touched),
        seed=manifest["seed"],
        n_heldout=manifest["n_heldout"],
    )
    return split, kg
