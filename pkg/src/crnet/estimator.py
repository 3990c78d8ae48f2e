"""scikit-learn style wrapper around the byte-level trainer."""

from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_byte_corpus, check_tokens
from .backprop import loss_and_grad
from .model import ModelConfig, forward
from .tensor_core import softmax_rows
from .trainer import TrainConfig, evaluate, ingest_corpus, train

__all__ = ["CRNetLanguageModel"]


class CRNetLanguageModel(BaseEstimator):
    """Byte-level next-token model.

    ``fit`` takes a corpus (text, bytes, a file path or an int array of
    byte ids). ``predict_proba`` returns next-byte distributions for every
    position of a byte sequence; ``score`` is the negative mean
    cross-entropy, so larger is better.
    """

    def __init__(self, n_layers=4, hidden=64, ffn_hidden=172, heads=4, rank=16, seq_len=64,
                 arch="crnet", epsilon=1e-6, total_steps=300, peak_lr=3e-3, batch_size=8,
                 recompute=False, checkpoint_count=1, random_state=0):
        self.n_layers = n_layers
        self.hidden = hidden
        self.ffn_hidden = ffn_hidden
        self.heads = heads
        self.rank = rank
        self.seq_len = seq_len
        self.arch = arch
        self.epsilon = epsilon
        self.total_steps = total_steps
        self.peak_lr = peak_lr
        self.batch_size = batch_size
        self.recompute = recompute
        self.checkpoint_count = checkpoint_count
        self.random_state = random_state

    def _model_config(self) -> ModelConfig:
        ranks = (self.rank,) * (self.n_layers - 1) if self.arch == "crnet" else ()
        return ModelConfig(n_layers=self.n_layers, hidden=self.hidden, ffn_hidden=self.ffn_hidden,
                           heads=self.heads, ranks=ranks, vocab=256, seq_len=self.seq_len,
                           epsilon=self.epsilon, arch=self.arch, seed=self.random_state)

    def fit(self, X, y=None):
        cfg = self._model_config()
        corpus = ingest_corpus(X, cfg.seq_len)
        tc = TrainConfig(total_steps=self.total_steps, peak_lr=self.peak_lr, batch_size=self.batch_size,
                         eval_every=0, recompute=self.recompute, checkpoint_count=self.checkpoint_count,
                         seed=self.random_state)
        result = train(cfg, tc, corpus=corpus)
        self.config_ = cfg
        self.params_ = result.params
        self.history_ = result.history
        self.n_steps_ = len(result.history)
        return self

    def _chunks(self, X):
        tokens = check_tokens(check_byte_corpus(X), 256)
        s = self.config_.seq_len
        return [tokens[i:i + s] for i in range(0, tokens.size, s)]

    def predict_proba(self, X) -> np.ndarray:
        """Next-byte probabilities, one row per input byte (windows of ``seq_len``)."""
        check_is_fitted(self, "params_")
        rows = []
        for chunk in self._chunks(X):
            logits, _ = forward(self.params_, chunk, cache_mode=None)
            rows.append(softmax_rows(logits))
        return np.vstack(rows)

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)

    def score(self, X, y=None) -> float:
        """Negative mean next-byte cross-entropy over ``X``."""
        check_is_fitted(self, "params_")
        tokens = check_byte_corpus(X)
        if tokens.size < 2:
            raise ValueError("scoring needs at least two bytes")
        if tokens.size > self.config_.seq_len:
            return -evaluate(self.params_, tokens, self.config_.seq_len,
                             count=max(1, tokens.size // self.config_.seq_len))
        logits, _ = forward(self.params_, tokens[:-1], cache_mode=None)
        return -loss_and_grad(logits, tokens[1:])[0]

    def perplexity(self, X) -> float:
        return math.exp(-self.score(X))
