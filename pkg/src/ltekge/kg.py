"""Knowledge graph data model, TSV ingestion and message-graph ablations.

Triples are integer coded ``(head, relation, tail)`` rows.  The graph used
for message passing (:class:`MessageGraph`) is kept separate from the
training triples so that it can be corrupted (``rat``), emptied (``wni``),
stripped of self-loops (``wsi``) or resampled without touching the data the
decoder is trained on.

Edge records are stored per *center* entity: a record ``(src, rel, dst, dir)``
says that entity ``src`` receives a message from neighbor ``dst`` over
relation ``rel``.  A triple ``(h, r, t)`` yields an ``out`` record
``(h, r, t, out)`` -- so ``(r, t)`` is in N_out(h) -- and an ``in`` record
``(t, r, h, in)`` -- so ``(h, r)`` is in N_in(t).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .exceptions import ConfigError, ContractError, DataError, ParseError, VocabularyError

OUT = 0
IN = 1

SPLITS = ("train", "valid", "test")


def _readonly(array, dtype=np.int64):
    array = np.ascontiguousarray(array, dtype=dtype)
    array.setflags(write=False)
    return array


class Vocab:
    """Bidirectional name <-> id maps for entities and relations.

    Ids are dense and assigned in first-seen order.
    """

    def __init__(self, entities: Iterable[str] = (), relations: Iterable[str] = ()):
        self._entity_ids: dict[str, int] = {}
        self._relation_ids: dict[str, int] = {}
        self.entity_names: list[str] = []
        self.relation_names: list[str] = []
        for name in entities:
            self._add(name, self._entity_ids, self.entity_names)
        for name in relations:
            self._add(name, self._relation_ids, self.relation_names)

    @staticmethod
    def _add(name, ids, names):
        if name not in ids:
            ids[name] = len(names)
            names.append(name)
        return ids[name]

    @property
    def num_entities(self) -> int:
        return len(self.entity_names)

    @property
    def num_relations(self) -> int:
        return len(self.relation_names)

    def __len__(self):
        return self.num_entities + self.num_relations

    def copy(self) -> "Vocab":
        return Vocab(self.entity_names, self.relation_names)

    def entity_id(self, name: str) -> int:
        try:
            return self._entity_ids[name]
        except KeyError:
            raise VocabularyError(f"unknown entity {name!r}") from None

    def relation_id(self, name: str) -> int:
        try:
            return self._relation_ids[name]
        except KeyError:
            raise VocabularyError(f"unknown relation {name!r}") from None

    def entity_name(self, idx: int) -> str:
        return self.entity_names[idx]

    def relation_name(self, idx: int) -> str:
        return self.relation_names[idx]

    def add_entity(self, name: str) -> int:
        return self._add(name, self._entity_ids, self.entity_names)

    def add_relation(self, name: str) -> int:
        return self._add(name, self._relation_ids, self.relation_names)

    def __eq__(self, other):
        if not isinstance(other, Vocab):
            return NotImplemented
        return (self.entity_names == other.entity_names
                and self.relation_names == other.relation_names)

    def __repr__(self):
        return f"Vocab(entities={self.num_entities}, relations={self.num_relations})"


@dataclass(frozen=True)
class TripleSet:
    """Integer-coded triples of one split, shape ``(n, 3)``."""

    triples: np.ndarray
    split_tag: str = "train"

    def __post_init__(self):
        triples = np.asarray(self.triples, dtype=np.int64).reshape(-1, 3)
        if self.split_tag not in SPLITS:
            raise ConfigError(f"split_tag must be one of {SPLITS}, got {self.split_tag!r}")
        if len(triples) and len(np.unique(triples, axis=0)) != len(triples):
            raise DataError(f"duplicate triples in split {self.split_tag!r}")
        object.__setattr__(self, "triples", _readonly(triples))

    def __len__(self):
        return len(self.triples)

    def __iter__(self):
        return (tuple(int(v) for v in row) for row in self.triples)

    @property
    def heads(self):
        return self.triples[:, 0]

    @property
    def relations(self):
        return self.triples[:, 1]

    @property
    def tails(self):
        return self.triples[:, 2]

    def check_ids(self, num_entities: int, num_relations: int):
        if not len(self):
            return
        t = self.triples
        if t.min() < 0 or max(t[:, 0].max(), t[:, 2].max()) >= num_entities \
                or t[:, 1].max() >= num_relations:
            raise DataError(
                f"{self.split_tag}: ids out of range for |E|={num_entities}, |R|={num_relations}")


@dataclass(frozen=True)
class Dataset:
    train: TripleSet
    valid: TripleSet
    test: TripleSet
    vocab: Vocab
    path: str | None = None

    @property
    def num_entities(self):
        return self.vocab.num_entities

    @property
    def num_relations(self):
        return self.vocab.num_relations

    def split(self, name: str) -> TripleSet:
        if name not in SPLITS:
            raise ConfigError(f"unknown split {name!r}")
        return getattr(self, name)

    def statistics(self) -> dict:
        return {
            "entities": self.num_entities,
            "relations": self.num_relations,
            "train": len(self.train),
            "valid": len(self.valid),
            "test": len(self.test),
        }


def load_triples(path, vocab: Vocab | None = None, split_tag: str = "train",
                 allow_extension: bool | None = None):
    """Read a ``head<TAB>relation<TAB>tail`` file.

    Parameters
    ----------
    path : str or Path
    vocab : Vocab, optional
        Existing vocabulary.  It is never mutated; an extended copy is
        returned instead.
    split_tag : str
    allow_extension : bool, optional
        Whether unseen names may be added.  Defaults to ``True`` when
        ``vocab`` is missing or empty and ``False`` otherwise.

    Returns
    -------
    (TripleSet, Vocab)
    """
    vocab = Vocab() if vocab is None else vocab.copy()
    if allow_extension is None:
        allow_extension = len(vocab) == 0
    rows = []
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise ParseError(f"expected 3 tab-separated fields, got {len(fields)}",
                                 line_number=lineno, path=str(path))
            h, r, t = (f.strip() for f in fields)
            if allow_extension:
                rows.append((vocab.add_entity(h), vocab.add_relation(r), vocab.add_entity(t)))
            else:
                try:
                    rows.append((vocab.entity_id(h), vocab.relation_id(r), vocab.entity_id(t)))
                except VocabularyError as exc:
                    raise VocabularyError(f"{path}:{lineno}: {exc}") from None
    try:
        triples = TripleSet(np.array(rows, dtype=np.int64).reshape(-1, 3), split_tag)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None
    return triples, vocab


def load_dataset(directory, allow_unseen: bool = True) -> Dataset:
    """Load ``train.txt``/``valid.txt``/``test.txt`` sharing one vocabulary.

    Entities or relations first seen in valid/test are accepted when
    ``allow_unseen`` is set; they only take part in message passing through
    their self-loop.
    """
    directory = Path(directory)
    missing = [f"{s}.txt" for s in SPLITS if not (directory / f"{s}.txt").is_file()]
    if missing:
        raise FileNotFoundError(
            f"missing dataset file(s) in {directory}: {', '.join(missing)}")
    vocab = Vocab()
    splits = {}
    for name in SPLITS:
        splits[name], vocab = load_triples(
            directory / f"{name}.txt", vocab, split_tag=name,
            allow_extension=True if name == "train" else allow_unseen)
    return Dataset(splits["train"], splits["valid"], splits["test"], vocab, str(directory))


def write_triples(path, triples: TripleSet, vocab: Vocab):
    with open(path, "w", encoding="utf-8") as handle:
        for h, r, t in triples:
            handle.write(f"{vocab.entity_name(h)}\t{vocab.relation_name(r)}\t{vocab.entity_name(t)}\n")


@dataclass(frozen=True)
class FilterIndex:
    """Known answers per query, over every split."""

    tail_answers: dict
    head_answers: dict

    def tails(self, head: int, rel: int) -> frozenset:
        return self.tail_answers.get((head, rel), frozenset())

    def heads(self, tail: int, rel: int) -> frozenset:
        return self.head_answers.get((tail, rel), frozenset())

    def __contains__(self, triple):
        h, r, t = triple
        return t in self.tails(h, r)


def build_filter_index(splits: Sequence[TripleSet]) -> FilterIndex:
    tails: dict = {}
    heads: dict = {}
    for split in splits:
        for h, r, t in split:
            tails.setdefault((h, r), set()).add(t)
            heads.setdefault((t, r), set()).add(h)
    return FilterIndex(
        {k: frozenset(v) for k, v in tails.items()},
        {k: frozenset(v) for k, v in heads.items()},
    )


@dataclass(frozen=True)
class MessageGraph:
    """Edge list consumed by the GCN encoders.

    ``provenance`` is a sorted tuple of the ablations applied so far; the
    empty tuple means an unmodified graph.
    """

    src: np.ndarray
    rel: np.ndarray
    dst: np.ndarray
    direction: np.ndarray
    self_loops: np.ndarray
    num_entities: int
    num_relations: int
    provenance: tuple = ()
    seed: int | None = None
    pool: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        n = len(self.src)
        if not (len(self.rel) == len(self.dst) == len(self.direction) == n):
            raise ContractError("edge arrays must have equal length")
        object.__setattr__(self, "src", _readonly(self.src))
        object.__setattr__(self, "rel", _readonly(self.rel))
        object.__setattr__(self, "dst", _readonly(self.dst))
        object.__setattr__(self, "direction", _readonly(self.direction, np.int8))
        loops = np.asarray(self.self_loops, dtype=bool)
        if loops.shape != (self.num_entities,):
            raise ContractError("self_loops needs one flag per entity")
        object.__setattr__(self, "self_loops", _readonly(loops, bool))
        object.__setattr__(self, "provenance", tuple(sorted(set(self.provenance))))

    def __eq__(self, other):
        if not isinstance(other, MessageGraph):
            return NotImplemented
        return (self.num_entities == other.num_entities
                and self.num_relations == other.num_relations
                and self.provenance == other.provenance
                and all(np.array_equal(getattr(self, k), getattr(other, k))
                        for k in ("src", "rel", "dst", "direction", "self_loops")))

    __hash__ = None

    @property
    def num_edges(self) -> int:
        return len(self.src)

    @property
    def label(self) -> str:
        return "+".join(self.provenance) if self.provenance else "normal"

    def replace(self, **changes) -> "MessageGraph":
        values = {k: getattr(self, k) for k in (
            "src", "rel", "dst", "direction", "self_loops", "num_entities",
            "num_relations", "provenance", "seed", "pool")}
        values.update(changes)
        return MessageGraph(**values)

    def neighbors_in(self, entity: int):
        """``{(h, r)}`` pairs of incoming neighbors of ``entity``."""
        mask = (self.src == entity) & (self.direction == IN)
        return sorted(zip(self.dst[mask].tolist(), self.rel[mask].tolist()))

    def neighbors_out(self, entity: int):
        """``{(r, t)}`` pairs of outgoing neighbors of ``entity``."""
        mask = (self.src == entity) & (self.direction == OUT)
        return sorted(zip(self.rel[mask].tolist(), self.dst[mask].tolist()))

    def degree(self) -> np.ndarray:
        return np.bincount(self.src, minlength=self.num_entities)

    def edges(self):
        return list(zip(self.src.tolist(), self.rel.tolist(), self.dst.tolist(),
                        self.direction.tolist()))


def build_message_graph(train: TripleSet, num_entities: int | None = None,
                        num_relations: int | None = None, *, add_inverse: bool = True,
                        self_loops: bool = True) -> MessageGraph:
    """Build the message-passing graph from the training split.

    With ``add_inverse`` the ``in`` records carry relation id ``r + |R|`` and
    the graph's relation space doubles.
    """
    if train.split_tag != "train":
        raise ContractError(f"message graph must be built from the train split, got {train.split_tag!r}")
    t = train.triples
    if num_entities is None:
        num_entities = int(max(t[:, 0].max(), t[:, 2].max()) + 1) if len(t) else 0
    if num_relations is None:
        num_relations = int(t[:, 1].max() + 1) if len(t) else 0
    train.check_ids(num_entities, num_relations)
    h, r, tl = t[:, 0], t[:, 1], t[:, 2]
    in_rel = r + num_relations if add_inverse else r
    n = len(t)
    # interleave so each triple's pair of records is adjacent
    src = np.empty(2 * n, dtype=np.int64)
    rel = np.empty(2 * n, dtype=np.int64)
    dst = np.empty(2 * n, dtype=np.int64)
    direction = np.empty(2 * n, dtype=np.int8)
    src[0::2], rel[0::2], dst[0::2], direction[0::2] = h, r, tl, OUT
    src[1::2], rel[1::2], dst[1::2], direction[1::2] = tl, in_rel, h, IN
    return MessageGraph(
        src, rel, dst, direction,
        np.full(num_entities, bool(self_loops)),
        num_entities,
        2 * num_relations if add_inverse else num_relations,
    )


def corrupt_adjacency_rat(g: MessageGraph, seed: int) -> MessageGraph:
    """Replace every record's neighbor with a uniformly random entity."""
    if {"rat", "wni", "sampled"} & set(p.split("(")[0] for p in g.provenance):
        raise ContractError(f"RAT needs an uncorrupted graph, got provenance {g.label!r}")
    rng = np.random.default_rng(seed)
    dst = rng.integers(0, g.num_entities, size=g.num_edges, dtype=np.int64)
    return g.replace(dst=dst, provenance=g.provenance + ("rat",), seed=int(seed))


def strip_neighbors_wni(g: MessageGraph) -> MessageGraph:
    empty = np.empty(0, dtype=np.int64)
    return g.replace(src=empty, rel=empty, dst=empty, direction=np.empty(0, dtype=np.int8),
                     provenance=g.provenance + ("wni",))


def strip_self_loops_wsi(g: MessageGraph) -> MessageGraph:
    return g.replace(self_loops=np.zeros(g.num_entities, dtype=bool),
                     provenance=g.provenance + ("wsi",))


def sample_neighbors(g: MessageGraph, pool_size: int, seed: int,
                     keep_self_loops: bool = False) -> MessageGraph:
    """Redraw every neighbor from a fixed random pool of ``pool_size`` entities.

    The pool is drawn once; each record's neighbor is then drawn uniformly
    from it, so per-entity degrees are unchanged.
    """
    if not 1 <= pool_size <= g.num_entities:
        raise ConfigError(f"pool_size must be in [1, {g.num_entities}], got {pool_size}")
    rng = np.random.default_rng(seed)
    pool = np.sort(rng.choice(g.num_entities, size=pool_size, replace=False)).astype(np.int64)
    dst = pool[rng.integers(0, pool_size, size=g.num_edges)]
    provenance = tuple(p for p in g.provenance if p != "wsi") + (f"sampled({pool_size})",)
    if not keep_self_loops:
        provenance += ("wsi",)
    return g.replace(dst=dst, self_loops=np.full(g.num_entities, bool(keep_self_loops)),
                     provenance=provenance, seed=int(seed), pool=pool)


def dataset_statistics_from_dir(directory) -> dict:
    """Counts used by the ``prepare`` subcommand."""
    return load_dataset(directory).statistics()


def mean_neighbor_count(g: MessageGraph) -> float:
    """Mean number of in+out neighbor records per entity."""
    return g.num_edges / g.num_entities if g.num_entities else 0.0


def dataset_checksums(directory) -> dict:
    import hashlib
    sums = {}
    for name in SPLITS:
        path = os.path.join(directory, f"{name}.txt")
        with open(path, "rb") as handle:
            sums[f"{name}.txt"] = hashlib.sha256(handle.read()).hexdigest()
    return sums
