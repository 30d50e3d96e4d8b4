"""Encoder + decoder composition with its parameter store."""

from __future__ import annotations

import zlib

import numpy as np

from . import autograd as ag
from .decoders import Decoder, DecoderSpec
from .encoders import Encoder, EncoderSpec, Representations
from .exceptions import ConfigError
from .kg import MessageGraph
from .params import ParameterStore


def param_rng(seed: int, name: str) -> np.random.Generator:
    """Per-parameter generator, independent of creation order."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


class KGCModel:
    """A link predictor: embeddings -> encoder -> decoder.

    Relation ids ``[0, |R|)`` are the dataset relations; ``[|R|, 2|R|)`` are
    their inverses, used to turn head queries into tail queries.
    """

    def __init__(self, num_entities: int, num_relations: int, encoder: EncoderSpec,
                 decoder: DecoderSpec, graph: MessageGraph | None = None, seed: int = 0,
                 dtype=np.float32):
        if encoder.uses_graph and graph is None:
            raise ConfigError(f"{encoder.kind} encoder needs a message graph")
        self.num_entities = int(num_entities)
        self.num_relations = int(num_relations)
        self.encoder_spec = encoder
        self.decoder_spec = decoder
        self.graph = graph
        self.seed = int(seed)
        self.dim = decoder.embedding_dim
        self.encoder = Encoder(encoder, self.num_entities, 2 * self.num_relations, self.dim)
        self.decoder = Decoder(decoder, self.num_entities)
        self.params = ParameterStore(dtype)
        self._init_params()

    def _init_params(self):
        d = self.dim
        bound = 1.0 / np.sqrt(d)

        def rng_for(name):
            return param_rng(self.seed, name)

        self.params.add("entity", rng_for("entity").uniform(-bound, bound, (self.num_entities, d)))
        self.params.add("relation",
                        rng_for("relation").uniform(-bound, bound, (2 * self.num_relations, d)))
        self.encoder.init_params(self.params, rng_for)
        self.decoder.init_params(self.params, rng_for)

    def encode(self, mode="eval", seed=0) -> Representations:
        return self.encoder(self.params, self.graph, mode=mode, seed=seed)

    def logits(self, heads, rels, mode="eval", seed=0, reps: Representations | None = None):
        """``(B, |E|)`` logits of the queries ``(heads[i], rels[i], ?)``."""
        if reps is None:
            reps = self.encode(mode, seed)
        heads = np.asarray(heads, dtype=np.int64)
        rels = np.asarray(rels, dtype=np.int64)
        h = ag.take(reps.head_table, heads)
        r = ag.take(reps.relation_table, rels)
        return self.decoder.logits(h, r, reps.tail_table, self.params, mode, seed)

    def score_queries(self, heads, rels, batch_size=256) -> np.ndarray:
        """Eval-mode logits as a numpy array, computed in query batches."""
        reps = self.encode("eval")
        heads = np.asarray(heads, dtype=np.int64)
        rels = np.asarray(rels, dtype=np.int64)
        out = np.empty((len(heads), self.num_entities), dtype=self.params.dtype)
        for start in range(0, len(heads), batch_size):
            sl = slice(start, start + batch_size)
            out[sl] = self.logits(heads[sl], rels[sl], "eval", reps=reps).data
        return out

    def inverse(self, rel):
        return np.asarray(rel) + self.num_relations

    def config(self) -> dict:
        return {
            "num_entities": self.num_entities,
            "num_relations": self.num_relations,
            "seed": self.seed,
            "dtype": str(self.params.dtype),
            "encoder": self.encoder_spec.to_dict(),
            "decoder": self.decoder_spec.to_dict(),
        }
