"""Small synthetic knowledge graphs for tests and smoke runs."""

from __future__ import annotations

import numpy as np

from .kg import Dataset, TripleSet, Vocab, write_triples


def random_kg(num_entities: int, num_relations: int, num_triples: int, seed: int = 0) -> np.ndarray:
    """Distinct random triples, shape ``(<= num_triples, 3)``, in first-drawn order."""
    rng = np.random.default_rng(seed)
    raw = np.stack([rng.integers(0, num_entities, num_triples),
                    rng.integers(0, num_relations, num_triples),
                    rng.integers(0, num_entities, num_triples)], axis=1)
    _, first = np.unique(raw, axis=0, return_index=True)
    return raw[np.sort(first)]


def symmetric_toy_kg(num_entities: int = 200, seed: int = 0, valid_fraction: float = 0.2,
                     noise_relations: int = 2, noise_triples: int = 300) -> Dataset:
    """A KG whose relation ``sym`` pairs entities by a random perfect matching.

    Train holds each pair once as ``(a, sym, b)``; valid/test hold the
    reversed triples ``(b, sym, a)``.  A few random ``noise`` relations are
    added to the training split.
    """
    if num_entities % 2:
        raise ValueError("num_entities must be even")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(num_entities)
    pairs = perm.reshape(-1, 2)
    sym = 0
    forward = np.stack([pairs[:, 0], np.full(len(pairs), sym), pairs[:, 1]], axis=1)
    reverse = forward[:, ::-1].copy()
    reverse[:, 1] = sym
    noise = random_kg(num_entities, noise_relations, noise_triples, seed + 1)
    noise[:, 1] += 1
    train = np.concatenate([forward, noise])
    _, first = np.unique(train, axis=0, return_index=True)
    train = train[np.sort(first)]
    # reversed triples must not already sit in train through the noise relations
    known = {tuple(t) for t in train.tolist()}
    reverse = np.array([t for t in reverse.tolist() if tuple(t) not in known]).reshape(-1, 3)
    n_valid = int(round(valid_fraction * len(reverse)))
    vocab = Vocab([f"e{i}" for i in range(num_entities)],
                  ["sym"] + [f"noise{i}" for i in range(noise_relations)])
    return Dataset(TripleSet(train, "train"), TripleSet(reverse[:n_valid], "valid"),
                   TripleSet(reverse[n_valid:], "test"), vocab)


def write_dataset(dataset: Dataset, directory):
    from pathlib import Path
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in ("train", "valid", "test"):
        write_triples(directory / f"{name}.txt", dataset.split(name), dataset.vocab)
    return directory
