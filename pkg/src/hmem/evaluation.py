"""Filtered link-prediction evaluation and held-out-entity evaluation.

Ranks use the mean-rank tie convention (1 + #strictly-better + #ties/2),
so a rank can be a half-integer when scores collide exactly.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .binding import BindingKind, MemoryState, WhiteningStats, bind
from .errors import ProtocolError
from .kg import Direction, GenSplit, NeighborIndex, Triplet
from .memory import harmony_complete, local_weight_matrix
from .model.forward import fit_stats, query_trace, resolved_tables
from .model.params import ModelParams, Query, TrainConfig

HITS_LEVELS = (1, 3, 10)


class FilterSet:
    """Attested triplets, indexed for candidate filtering."""

    def __init__(self):
        self._partners: dict[tuple[int, int, int], list[int]] = {}
        self._triplets: set[tuple[int, int, int]] = set()

    @classmethod
    def from_triplets(cls, *groups: Iterable[Triplet]) -> "FilterSet":
        fs = cls()
        for group in groups:
            for t in group:
                fs.add(t)
        return fs

    def add(self, t: Triplet) -> None:
        key = (t.head, t.relation, t.tail)
        if key in self._triplets:
            return
        self._triplets.add(key)
        self._partners.setdefault(
            (t.head, t.relation, int(Direction.RIGHT)), []
        ).append(t.tail)
        self._partners.setdefault(
            (t.tail, t.relation, int(Direction.LEFT)), []
        ).append(t.head)

    def __contains__(self, key: tuple[int, int, int]) -> bool:
        return key in self._triplets

    def __len__(self) -> int:
        return len(self._triplets)

    def partners(self, entity: int, relation: int, side: Direction) -> np.ndarray:
        """All attested completions of (entity, relation) on the given side."""
        got = self._partners.get((entity, relation, int(side)), [])
        return np.asarray(got, dtype=np.int64)


@dataclass(frozen=True)
class RankedResult:
    query: Query
    true_entity: int
    rank: float
    n_candidates_after_filter: int


@dataclass
class Metrics:
    mr: float
    mrr: float
    hits: dict[int, float]
    n_queries: int

    @classmethod
    def from_ranks(cls, ranks: Sequence[float]) -> "Metrics":
        if not ranks:
            raise ValueError("cannot aggregate zero ranks")
        arr = np.asarray(ranks, dtype=np.float64)
        return cls(
            mr=float(arr.mean()),
            mrr=float((1.0 / arr).mean()),
            hits={n: float((arr <= n).mean()) for n in HITS_LEVELS},
            n_queries=len(ranks),
        )

    def to_dict(self) -> dict:
        return {
            "mr": self.mr,
            "mrr": self.mrr,
            "hits": {str(n): v for n, v in self.hits.items()},
            "n_queries": self.n_queries,
        }


def _rank_from_scores(
    scores: np.ndarray, mask: np.ndarray, true_pos: int
) -> tuple[float, int]:
    s_true = scores[true_pos]
    kept = scores[mask]
    n_better = int((kept < s_true).sum())
    n_ties = int((kept == s_true).sum()) - 1
    return 1.0 + n_better + 0.5 * n_ties, int(mask.sum())


def rank_query(
    q: Query,
    true_e: int,
    params: ModelParams,
    cfg: TrainConfig,
    index: NeighborIndex,
    filter_set: FilterSet,
    candidates: np.ndarray | None = None,
    stats: WhiteningStats | None = None,
    e_out: np.ndarray | None = None,
) -> RankedResult:
    """Filtered rank of the true entity among candidate completions.

    Candidates forming an attested triplet with the query (other than the
    true one) are removed before ranking; the true entity always stays.
    """
    ent, _, _ = resolved_tables(params, stats)
    if candidates is None:
        candidates = np.arange(params.emb.n_entities)
    pos = np.searchsorted(candidates, true_e)
    if pos >= len(candidates) or candidates[pos] != true_e:
        raise ProtocolError(f"true entity {true_e} not in the candidate list")
    if e_out is None:
        e_out = query_trace(q, params, index, cfg, stats).e_out
    diffs = ent[candidates] - e_out
    scores = np.einsum("ij,ij->i", diffs, diffs)
    mask = np.ones(len(candidates), dtype=bool)
    attested = filter_set.partners(q.entity, q.relation, q.side)
    if len(attested):
        attested = attested[attested != true_e]
        drop = np.searchsorted(candidates, attested)
        valid = (drop < len(candidates)) & (candidates[np.minimum(drop, len(candidates) - 1)] == attested)
        mask[drop[valid]] = False
    rank, n_after = _rank_from_scores(scores, mask, int(pos))
    return RankedResult(q, true_e, rank, n_after)


def _evaluate_chunk(
    queries: Sequence[tuple[Query, int]],
    params: ModelParams,
    cfg: TrainConfig,
    index: NeighborIndex,
    filter_set: FilterSet,
    candidates: np.ndarray | None,
    stats: WhiteningStats | None,
) -> list[RankedResult]:
    return [
        rank_query(q, true_e, params, cfg, index, filter_set, candidates, stats)
        for q, true_e in queries
    ]


def evaluate(
    test: Sequence[Triplet],
    params: ModelParams,
    cfg: TrainConfig,
    index: NeighborIndex,
    filter_set: FilterSet,
    candidates: np.ndarray | None = None,
    threads: int = 1,
) -> tuple[Metrics, list[RankedResult]]:
    """Query both sides of every test triplet and aggregate 2·|test| ranks.

    Whitening statistics are fitted once at the start and frozen. With
    threads > 1, queries are ranked in parallel chunks and merged back in
    input order, so results are identical to the serial run.
    """
    if not test:
        raise ValueError("empty test set")
    stats = fit_stats(params, cfg)
    queries: list[tuple[Query, int]] = []
    for t in test:
        queries.append((Query(t.head, t.relation, Direction.RIGHT), t.tail))
        queries.append((Query(t.tail, t.relation, Direction.LEFT), t.head))

    if threads <= 1:
        results = _evaluate_chunk(
            queries, params, cfg, index, filter_set, candidates, stats
        )
    else:
        chunk = max(1, math.ceil(len(queries) / threads))
        parts = [queries[i : i + chunk] for i in range(0, len(queries), chunk)]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [
                pool.submit(
                    _evaluate_chunk,
                    part,
                    params,
                    cfg,
                    index,
                    filter_set,
                    candidates,
                    stats,
                )
                for part in parts
            ]
            results = [r for fut in futures for r in fut.result()]
    return Metrics.from_ranks([r.rank for r in results]), results


# ---------------------------------------------------------------------------
# Held-out-entity (generalization) evaluation


@dataclass
class FractionResult:
    fraction: float
    metrics: Metrics
    n_empty_memory: int
    pool_size: int


def _heldout_memory(
    entity: int,
    pool: Sequence[Triplet],
    heldout: frozenset[int],
    tables: tuple[np.ndarray, np.ndarray, np.ndarray],
    cfg: TrainConfig,
    k: int,
) -> tuple[MemoryState, int]:
    """Unweighted sum of bindings from the pool triplets touching an entity.

    Keeps the k most recent entries in pool order when there are more than
    k. Returns the memory and the number of entries used.
    """
    ent, rel_l, rel_r = tables
    entries: list[tuple[bool, int, int]] = []  # (neighbor is right of me, rel, nb)
    for t in pool:
        if t.head == entity:
            entries.append((True, t.relation, t.tail))
        elif t.tail == entity:
            entries.append((False, t.relation, t.head))
    if len(entries) > k:
        entries = entries[-k:]
    total = MemoryState.zeros(cfg.binding, cfg.d_r, cfg.d_e)
    for is_right, rel, nb in entries:
        r_vec = (rel_r if is_right else rel_l)[rel]
        total.data = total.data + bind(cfg.binding, r_vec, ent[nb]).data
    return total, len(entries)


def _complete_and_probe(
    mem: MemoryState,
    probe_raw: np.ndarray,
    params: ModelParams,
    cfg: TrainConfig,
) -> np.ndarray:
    if math.isinf(cfg.lam):
        completed = mem
    else:
        w_i = (
            params.harmony.w_global
            if cfg.ablate_local_w
            else local_weight_matrix(mem, params.harmony)
        )
        completed = harmony_complete(
            mem, w_i, params.harmony.b, cfg.lam, cfg.eq8_verbatim
        )
    if cfg.binding is BindingKind.TPR:
        probe = probe_raw / np.linalg.norm(probe_raw)
        return probe @ completed.data
    from .binding import ccorr

    return ccorr(probe_raw, completed.data)


def evaluate_gen(
    split: GenSplit,
    params: ModelParams,
    cfg: TrainConfig,
    fractions: Sequence[float],
    seed: int,
) -> tuple[list[FractionResult], list[list[RankedResult]]]:
    """Rank held-in completions for held-out-entity test triplets.

    The inference pool is the shuffled observed ∪ valid list truncated to
    each fraction (prefixes nest). Held-out memories are the unweighted
    sum of pool bindings; entities with an empty pool neighborhood are
    scored from the zero memory and counted separately.
    """
    for f in fractions:
        if not 0.0 < f <= 1.0:
            raise ValueError(f"fractions must be in (0, 1], got {f}")
    full_pool = list(split.observed) + list(split.valid)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(full_pool))
    full_pool = [full_pool[i] for i in order]

    stats = fit_stats(params, cfg)
    tables = resolved_tables(params, stats)
    ent, rel_l, rel_r = tables
    heldin = np.asarray(
        sorted(set(range(params.emb.n_entities)) - set(split.heldout)), dtype=np.int64
    )
    filter_set = FilterSet.from_triplets(
        split.train, split.observed, split.valid, split.test
    )

    results: list[FractionResult] = []
    dumps: list[list[RankedResult]] = []
    for f in sorted(fractions):
        n_f = int(math.floor(f * len(full_pool)))
        pool = full_pool[:n_f]
        memory_cache: dict[int, tuple[MemoryState, int]] = {}
        ranks: list[float] = []
        dump: list[RankedResult] = []
        n_empty = 0
        for t in split.test:
            if t.head in split.heldout:
                known, true_e, side = t.head, t.tail, Direction.RIGHT
                probe_raw = rel_r[t.relation]
            else:
                known, true_e, side = t.tail, t.head, Direction.LEFT
                probe_raw = rel_l[t.relation]
            if known not in memory_cache:
                memory_cache[known] = _heldout_memory(
                    known, pool, split.heldout, tables, cfg, cfg.k
                )
            mem, n_entries = memory_cache[known]
            if n_entries == 0:
                n_empty += 1
            e_out = _complete_and_probe(mem, probe_raw, params, cfg)
            q = Query(known, t.relation, side)
            pos = np.searchsorted(heldin, true_e)
            if pos >= len(heldin) or heldin[pos] != true_e:
                raise ProtocolError(
                    f"true entity {true_e} is not a held-in candidate"
                )
            diffs = ent[heldin] - e_out
            scores = np.einsum("ij,ij->i", diffs, diffs)
            mask = np.ones(len(heldin), dtype=bool)
            attested = filter_set.partners(known, t.relation, side)
            attested = attested[attested != true_e]
            if len(attested):
                drop = np.searchsorted(heldin, attested)
                valid = (drop < len(heldin)) & (
                    heldin[np.minimum(drop, len(heldin) - 1)] == attested
                )
                mask[drop[valid]] = False
            rank, n_after = _rank_from_scores(scores, mask, int(pos))
            ranks.append(rank)
            dump.append(RankedResult(q, true_e, rank, n_after))
        results.append(
            FractionResult(f, Metrics.from_ranks(ranks), n_empty, len(pool))
        )
        dumps.append(dump)
    return results, dumps


def degree_binned_mrr(
    results: Sequence[RankedResult], index: NeighborIndex, bin_width: int
) -> list[tuple[int, float, int]]:
    """MRR per known-entity degree bin [b, b + width); empty bins omitted."""
    if bin_width <= 0:
        raise ValueError("bin width must be positive")
    bins: dict[int, list[float]] = {}
    for r in results:
        degree = index.degree(r.query.entity)
        bins.setdefault((degree // bin_width) * bin_width, []).append(r.rank)
    return [
        (start, float(np.mean([1.0 / r for r in ranks])), len(ranks))
        for start, ranks in sorted(bins.items())
    ]


# ---------------------------------------------------------------------------
# Output emission


def write_metrics_json(metrics: Metrics, path, extra: dict | None = None) -> None:
    payload = metrics.to_dict()
    if extra:
        payload.update(extra)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def write_metrics_csv(metrics: Metrics, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["metric", "value"])
        writer.writerow(["mr", metrics.mr])
        writer.writerow(["mrr", metrics.mrr])
        for n in HITS_LEVELS:
            writer.writerow([f"hits@{n}", metrics.hits[n]])
        writer.writerow(["n_queries", metrics.n_queries])


def write_ranks_tsv(results: Sequence[RankedResult], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("entity\trelation\tside\ttrue\trank\tn_candidates\n")
        for r in results:
            side = "right" if r.query.side is Direction.RIGHT else "left"
            f.write(
                f"{r.query.entity}\t{r.query.relation}\t{side}\t"
                f"{r.true_entity}\t{r.rank:g}\t{r.n_candidates_after_filter}\n"
            )


def write_fraction_csv(results: Sequence[FractionResult], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["fraction", "pool_size", "mr", "mrr"]
            + [f"hits@{n}" for n in HITS_LEVELS]
            + ["n_queries", "n_empty_memory"]
        )
        for r in results:
            writer.writerow(
                [r.fraction, r.pool_size, r.metrics.mr, r.metrics.mrr]
                + [r.metrics.hits[n] for n in HITS_LEVELS]
                + [r.metrics.n_queries, r.n_empty_memory]
            )


def write_degree_bins_csv(rows: Sequence[tuple[int, float, int]], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["bin_start", "mrr", "count"])
        for start, mrr, count in rows:
            writer.writerow([start, mrr, count])
