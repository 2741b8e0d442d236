"""scikit-learn compatible classifier wrapping training and smoothed masked inference."""

from __future__ import annotations

import logging

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import algorithm as alg
from .nn import (AdamWState, ModelConfig, checkpoint_load, checkpoint_save,
                 default_noise_sites, forward, init_params)
from .numerics import RngStream
from .validation import check_labels, check_sequences

logger = logging.getLogger(__name__)

INFERENCE_MODES = ("logit_average", "majority", "plain", "gm", "rm")


class RSMIClassifier(ClassifierMixin, BaseEstimator):
    """Noise-layer smoothed transformer trained and queried with gradient-guided masking.

    ``X`` is a list of token-id sequences (or a right-padded 2-D array).
    Setting ``sigma=0, M=0, beta=0, inference="plain"`` gives an ordinary
    fine-tuned classifier, which is what :func:`baseline_classifier` builds.

    Parameters
    ----------
    sigma : float
        Noise std at every noise site.
    n_noise_layers : int
        Block outputs that receive noise besides the embedding output.
    noise_sites : sequence of str, optional
        Explicit site names (``embed``, ``block1``...) overriding ``n_noise_layers``.
    M, N : int
        Masks per sequence and the candidate pool for random re-masking
        (``N=None`` means ``2*M``).
    inference : str
        ``logit_average`` or ``majority`` run the two-step procedure;
        ``plain`` is one (noisy) pass; ``gm`` and ``rm`` are the
        gradient-masked and random-masked ablation predictors.
    """

    def __init__(self, d_model=32, n_blocks=3, d_ff=64, max_len=64, sigma=0.4,
                 n_noise_layers=3, noise_sites=None, M=2, N=None, nu=1, beta=1.0, lr=1e-3,
                 weight_decay=0.01, epochs=5, batch_size=32, k0=5, k1=50, alpha=0.98,
                 inference="logit_average", mask_strategy="gradient", rm_k=1,
                 normalize_grad=False, vocab_size=None, n_classes=None,
                 dtype="float32", random_state=0):
        self.d_model = d_model
        self.n_blocks = n_blocks
        self.d_ff = d_ff
        self.max_len = max_len
        self.sigma = sigma
        self.n_noise_layers = n_noise_layers
        self.noise_sites = noise_sites
        self.M = M
        self.N = N
        self.nu = nu
        self.beta = beta
        self.lr = lr
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.k0 = k0
        self.k1 = k1
        self.alpha = alpha
        self.inference = inference
        self.mask_strategy = mask_strategy
        self.rm_k = rm_k
        self.normalize_grad = normalize_grad
        self.vocab_size = vocab_size
        self.n_classes = n_classes
        self.dtype = dtype
        self.random_state = random_state

    # -- configuration -----------------------------------------------------------------

    def _model_config(self, vocab_size, n_classes) -> ModelConfig:
        if self.sigma == 0:
            sites = ()
        elif self.noise_sites is not None:
            sites = tuple(self.noise_sites)
        else:
            sites = default_noise_sites(self.n_blocks, self.n_noise_layers)
        return ModelConfig(vocab_size=vocab_size, n_classes=n_classes, d_model=self.d_model,
                           n_blocks=self.n_blocks, d_ff=self.d_ff, max_len=self.max_len,
                           noise_sites=sites, sigma=self.sigma, dtype=self.dtype)

    def train_config(self) -> alg.RsmiTrainConfig:
        return alg.RsmiTrainConfig(M=self.M, nu=self.nu, beta=self.beta, lr=self.lr,
                                   epochs=self.epochs, batch_size=self.batch_size,
                                   weight_decay=self.weight_decay,
                                   normalize_grad=self.normalize_grad,
                                   mask_strategy=self.mask_strategy)

    def infer_config(self) -> alg.RsmiInferConfig:
        mode = self.inference if self.inference in (alg.MAJORITY, alg.LOGIT_AVERAGE) else alg.LOGIT_AVERAGE
        return alg.RsmiInferConfig(M=self.M, N=self.N, k0=self.k0, k1=self.k1,
                                   alpha=self.alpha, mode=mode, nu=self.nu)

    def _check_params(self):
        if self.inference not in INFERENCE_MODES:
            raise ValueError(f"inference must be one of {INFERENCE_MODES}")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("need epochs >= 0 and batch_size >= 1")
        self.train_config()
        self.infer_config()

    # -- fitting ---------------------------------------------------------------------

    def fit(self, X, y):
        self._check_params()
        seqs = check_sequences(X, self.vocab_size, self.max_len)
        y = check_labels(y, len(seqs))
        vocab_size = self.vocab_size or max(max(s) for s in seqs) + 1
        n_classes = self.n_classes or int(y.max()) + 1
        if y.max() >= n_classes:
            raise ValueError(f"label {y.max()} >= n_classes={n_classes}")
        self.config_ = self._model_config(vocab_size, n_classes)
        self.classes_ = np.arange(n_classes)
        self.params_ = init_params(self.config_, self.random_state)
        self.loss_curve_ = []
        tcfg = self.train_config()
        state = AdamWState()
        shuffle = RngStream(self.random_state, 0x5A)
        step_rng = RngStream(self.random_state, 0x7A)
        n = len(seqs)
        step = 0
        for epoch in range(self.epochs):
            order = shuffle.substream(epoch).choice(n, n)
            for start in range(0, n, self.batch_size):
                idx = order[start:start + self.batch_size]
                batch = ([seqs[i] for i in idx], y[idx])
                self.params_, state, loss, _ = alg.train_step(
                    self.params_, state, batch, tcfg, self.config_, step_rng.substream(step))
                self.loss_curve_.append(loss)
                step += 1
            logger.info("epoch %d: mean loss %.4f", epoch + 1,
                        float(np.mean(self.loss_curve_[-max(1, -(-n // self.batch_size)):])))
        self.n_iter_ = step
        return self

    def set_model(self, params, config: ModelConfig):
        """Attach trained weights (e.g. loaded from a checkpoint) without fitting."""
        self.config_ = config
        self.params_ = params
        self.classes_ = np.arange(config.n_classes)
        self.loss_curve_ = []
        return self

    def save(self, path, extra=None):
        check_is_fitted(self, "params_")
        checkpoint_save(path, self.params_, self.config_, extra)

    def load(self, path):
        params, cfg = checkpoint_load(path)
        return self.set_model(params, cfg)

    # -- inference --------------------------------------------------------------------

    def _streams(self, n, rngs):
        if rngs is None:
            base = RngStream(self.random_state, 0x9D)
            return [base.substream(i) for i in range(n)]
        if isinstance(rngs, RngStream):
            return [rngs.substream(i) for i in range(n)]
        return list(rngs)

    def predict_details(self, X, rngs=None):
        """Return ``(probs, results)``; ``results`` holds two-step diagnostics or ``None``.

        Also returns forward passes per sequence in ``self.last_forward_passes_``.
        """
        check_is_fitted(self, "params_")
        seqs = check_sequences(X, self.config_.vocab_size, self.config_.max_len)
        streams = self._streams(len(seqs), rngs)
        cfg, params = self.config_, self.params_
        mode = self.inference
        if mode in (alg.MAJORITY, alg.LOGIT_AVERAGE):
            results = alg.predict_two_step(params, cfg, self.infer_config(), seqs, streams)
            self.last_forward_passes_ = [r.forward_passes for r in results]
            return np.stack([r.probs for r in results]), results
        if mode == "plain":
            probs = forward(params, cfg, seqs, streams if cfg.noise_sites else None).probs
            self.last_forward_passes_ = [1] * len(seqs)
        elif mode == "gm":
            probs, _ = alg.predict_gradient_masked(params, cfg, seqs, self.M, self.nu, None)
            self.last_forward_passes_ = [2 + self.nu] * len(seqs)
        else:
            probs = alg.predict_random_masked(params, cfg, seqs, self.M, self.rm_k, streams)
            self.last_forward_passes_ = [self.rm_k] * len(seqs)
        return probs, None

    def predict_proba(self, X, rngs=None):
        return self.predict_details(X, rngs)[0]

    def predict(self, X, rngs=None):
        return self.predict_proba(X, rngs).argmax(axis=1)

    def oracle(self, stream: RngStream):
        """Probability oracle for attacks: every sequence queried gets a fresh sub-stream."""
        counter = {"queries": 0, "forward_passes": 0}

        def query(seqs):
            n = len(seqs)
            start = counter["queries"]
            streams = [stream.substream(start + i) for i in range(n)]
            probs = self.predict_proba(seqs, streams)
            counter["queries"] += n
            counter["forward_passes"] += int(sum(self.last_forward_passes_))
            return probs

        query.counter = counter
        return query


def baseline_classifier(**kwargs) -> RSMIClassifier:
    """Plain classifier: no noise, no masking, no embedding perturbation."""
    opts = dict(sigma=0.0, M=0, beta=0.0, inference="plain")
    opts.update(kwargs)
    return RSMIClassifier(**opts)
