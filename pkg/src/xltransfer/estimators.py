"""scikit-learn style wrappers around encoders, retrieval scoring and whole runs.

Only the pieces with a natural fit/transform/predict shape are wrapped;
the phase functions in :mod:`xltransfer.trainer` stay the primary API.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .corpus import Tokenizer
from .metrics import (best_threshold, cosine_matrix, mutual_nearest_candidates, retrieval_accuracy,
                      score_at_threshold)
from .model import EmbeddingExtractor, ModelBundle, load_checkpoint
from .trainer import EvalContext, embed_sentences


def _load_tokenizer(tok):
    if isinstance(tok, Tokenizer):
        return tok
    return Tokenizer.from_dict(json.loads(Path(tok).read_text(encoding="utf-8")))


class SentenceEncoder(BaseEstimator, TransformerMixin):
    """Mean-pooled sentence embeddings from one encoder layer.

    ``bundle`` is a :class:`ModelBundle` or a checkpoint path; ``tokenizer``
    a :class:`Tokenizer` or a ``tokenizer.json`` path.
    """

    def __init__(self, bundle=None, tokenizer=None, layer_index=2, max_length=64, batch_size=64):
        self.bundle = bundle
        self.tokenizer = tokenizer
        self.layer_index = layer_index
        self.max_length = max_length
        self.batch_size = batch_size

    def fit(self, X=None, y=None):
        if self.bundle is None or self.tokenizer is None:
            raise ValueError("SentenceEncoder needs both a bundle and a tokenizer")
        self.bundle_ = self.bundle if isinstance(self.bundle, ModelBundle) else load_checkpoint(self.bundle)
        self.tokenizer_ = _load_tokenizer(self.tokenizer)
        extractor = EmbeddingExtractor(self.layer_index)
        extractor.validate(self.bundle_.config)
        self.context_ = EvalContext(self.tokenizer_, self.max_length, self.batch_size, extractor=extractor)
        self.n_features_out_ = self.bundle_.config.hidden_size
        return self

    def transform(self, X):
        check_is_fitted(self, "bundle_")
        sentences = [X] if isinstance(X, str) else list(X)
        return embed_sentences(self.bundle_, sentences, self.context_)


class NearestNeighborAligner(BaseEstimator):
    """Cosine nearest-neighbour alignment of source rows onto fitted target rows."""

    def fit(self, X, y=None):
        self.targets_ = check_array(X, dtype=np.float64)
        return self

    def predict(self, X):
        check_is_fitted(self, "targets_")
        X = check_array(X, dtype=np.float64)
        return np.argmax(cosine_matrix(X, self.targets_), axis=1)

    def score(self, X, y=None):
        """Alignment accuracy; ``y`` holds each source row's gold target index (identity by default)."""
        check_is_fitted(self, "targets_")
        return retrieval_accuracy(check_array(X, dtype=np.float64), self.targets_, y)


class ThresholdMiner(BaseEstimator):
    """Parallel-sentence mining with a similarity cut-off tuned for F1.

    ``fit`` and ``predict``/``score`` take a dict with ``src``, ``tgt``
    (embedding matrices), ``src_ids``, ``tgt_ids`` and, for fitting and
    scoring, ``gold`` (pairs of ids).
    """

    def __init__(self, language=""):
        self.language = language

    @staticmethod
    def _candidates(X):
        src = check_array(X["src"], dtype=np.float64)
        tgt = check_array(X["tgt"], dtype=np.float64)
        return mutual_nearest_candidates(src, tgt, list(X["src_ids"]), list(X["tgt_ids"]))

    def fit(self, X, y=None):
        gold = set(map(tuple, X["gold"] if y is None else y))
        self.threshold_, self.dev_f1_ = best_threshold(self._candidates(X), gold)
        return self

    def predict(self, X):
        check_is_fitted(self, "threshold_")
        return {(s, t) for score, s, t in self._candidates(X) if score >= self.threshold_}

    def score(self, X, y=None):
        check_is_fitted(self, "threshold_")
        gold = set(map(tuple, X["gold"] if y is None else y))
        return score_at_threshold(self._candidates(X), gold, self.threshold_, self.language).f1


class TransferExperiment(BaseEstimator):
    """A full pretrain / intermediate / target run as one estimator.

    ``fit`` runs every phase; ``manifest_`` and ``bundle_`` hold the results.
    ``score`` returns the mean test metric over the configured targets.
    """

    def __init__(self, preset="desk", seed=0, intermediate=("paraphrase",), variant="single",
                 targets=("paraphrase", "tagging", "span_qa", "bucc", "tatoeba"), output_dir=None):
        self.preset = preset
        self.seed = seed
        self.intermediate = intermediate
        self.variant = variant
        self.targets = targets
        self.output_dir = output_dir

    def build_config(self):
        from .config import PRESETS
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        cfg = PRESETS[self.preset](seed=self.seed, intermediate=tuple(self.intermediate or ()),
                                   variant=self.variant, targets=tuple(self.targets))
        cfg.output_dir = self.output_dir
        return cfg

    def fit(self, X=None, y=None):
        from .trainer import run_experiment
        self.config_ = self.build_config()
        self.manifest_, self.bundle_ = run_experiment(self.config_, X)
        return self

    def score(self, X=None, y=None):
        check_is_fitted(self, "manifest_")
        vals = [r["value"] for t in self.manifest_["targets"].values()
                for r in t["metrics"] if r.get("split") == "test"]
        return float(np.mean(vals)) if vals else float("nan")
