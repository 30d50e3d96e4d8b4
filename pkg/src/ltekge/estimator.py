"""scikit-learn style wrapper around :class:`KGCModel` training."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .evaluation import evaluate_split
from .exceptions import ShapeError, VocabularyError
from .kg import TripleSet, build_filter_index
from .model import KGCModel
from .training import TrainConfig, build_graph, fit as fit_model


def check_triples(X, num_entities=None, num_relations=None) -> np.ndarray:
    """Validate an integer ``(n, 3)`` triple array and return it as int64."""
    X = check_array(X, dtype=None, ensure_min_samples=1)
    if X.ndim != 2 or X.shape[1] != 3:
        raise ShapeError(f"expected triples of shape (n, 3), got {X.shape}")
    if not np.issubdtype(X.dtype, np.integer):
        if not np.all(np.mod(X, 1) == 0):
            raise ShapeError("triple ids must be integers")
    X = X.astype(np.int64)
    if X.min() < 0:
        raise VocabularyError("triple ids must be non-negative")
    if num_entities is not None and max(X[:, 0].max(), X[:, 2].max()) >= num_entities:
        raise VocabularyError(f"entity id out of range for {num_entities} entities")
    if num_relations is not None and X[:, 1].max() >= num_relations:
        raise VocabularyError(f"relation id out of range for {num_relations} relations")
    return X


class LinkPredictor(BaseEstimator):
    """Encoder-decoder link predictor with the estimator interface.

    ``X`` is an integer array of ``(head, relation, tail)`` rows.
    ``predict`` returns the top-scored tail for each ``(head, relation)``
    and ``score`` returns the filtered MRR over head and tail queries.

    Parameters
    ----------
    encoder, decoder : str
        Encoder kind (identity, lte, rgcn, wgcn, compgcn) and decoder kind
        (transe_l1, transe_l2, distmult, conve).
    dim, layers, epochs, batch_size, learning_rate, label_smoothing, seed
        Same meaning as the :class:`TrainConfig` fields.
    num_entities, num_relations : int or None
        Vocabulary sizes; inferred from ``X`` when omitted.
    extra : dict or None
        Any further :class:`TrainConfig` fields.
    """

    def __init__(self, encoder="identity", decoder="distmult", dim=64, layers=1, epochs=50,
                 batch_size=128, learning_rate=1e-2, label_smoothing=0.1, seed=0,
                 num_entities=None, num_relations=None, extra=None):
        self.encoder = encoder
        self.decoder = decoder
        self.dim = dim
        self.layers = layers
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.label_smoothing = label_smoothing
        self.seed = seed
        self.num_entities = num_entities
        self.num_relations = num_relations
        self.extra = extra

    def _config(self) -> TrainConfig:
        values = dict(encoder=self.encoder, decoder=self.decoder, dim=self.dim,
                      layers=self.layers, epochs=self.epochs, batch_size=self.batch_size,
                      learning_rate=self.learning_rate, label_smoothing=self.label_smoothing,
                      seed=self.seed)
        values.update(self.extra or {})
        return TrainConfig.from_mapping(values)

    def fit(self, X, y=None):
        X = check_triples(X, self.num_entities, self.num_relations)
        n_ent = self.num_entities or int(max(X[:, 0].max(), X[:, 2].max()) + 1)
        n_rel = self.num_relations or int(X[:, 1].max() + 1)
        config = self._config()
        _, first = np.unique(X, axis=0, return_index=True)
        train = TripleSet(X[np.sort(first)], "train")
        graph = build_graph(train, n_ent, n_rel, config) if config.encoder_spec().uses_graph else None
        model = KGCModel(n_ent, n_rel, config.encoder_spec(), config.decoder_spec(), graph,
                         seed=config.seed, dtype=np.dtype(config.dtype))
        self.history_, _ = fit_model(model, train, config)
        self.model_ = model
        self.train_ = train
        self.n_entities_, self.n_relations_ = n_ent, n_rel
        return self

    def decision_function(self, X):
        """``(n, |E|)`` tail scores of the queries ``(X[:, 0], X[:, 1])``."""
        check_is_fitted(self, "model_")
        X = check_triples(X, self.n_entities_, self.n_relations_)
        return self.model_.score_queries(X[:, 0], X[:, 1])

    def predict(self, X):
        return np.argmax(self.decision_function(X), axis=1)

    def score(self, X, y=None):
        """Filtered MRR of ``X``, filtering with the training triples and ``X``."""
        check_is_fitted(self, "model_")
        X = check_triples(X, self.n_entities_, self.n_relations_)
        _, first = np.unique(X, axis=0, return_index=True)
        split = TripleSet(X[np.sort(first)], "test")
        index = build_filter_index([self.train_, split])
        return evaluate_split(self.model_, split, index).mrr
