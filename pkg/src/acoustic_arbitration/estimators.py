"""Scikit-learn style estimators for pretraining and arbitration.

Inputs are lists of per-scenario LFBE stacks shaped ``(devices, frames, 64)``;
device counts may differ between scenarios. :class:`LFBETransformer`
produces them from recorded scenarios, so both estimators compose with it
in a :class:`sklearn.pipeline.Pipeline`.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .features import FRAME_SIZE, HOP
from .nn import ArbitrationModel, Checkpoint, EncoderConfig, PretrainModel
from .objectives import ObjectiveWeights, combo_loss, contrastive_loss, make_split, reconstructive_loss
from .training import run_training, train_validation_split
from .validation import check_labels, check_scenarios

OBJECTIVES = ("contrastive", "reconstructive", "combo")


def _config(encoder_config) -> EncoderConfig:
    if isinstance(encoder_config, EncoderConfig):
        return encoder_config
    return EncoderConfig.from_dict(encoder_config)


def _normalize_t(x: torch.Tensor) -> torch.Tensor:
    mean = x.mean(dim=1, keepdim=True)
    var = x.var(dim=1, unbiased=False, keepdim=True)
    return torch.where(var < 1e-8, torch.zeros_like(x), (x - mean) / torch.sqrt(torch.clamp_min(var, 1e-8)))


def split_frames(num_frames: int, rng: np.random.Generator, epsilon: float) -> tuple[int, int]:
    """Frame ranges of the two waveform halves for a hop-aligned split.

    Returns ``(n_first, start_second)``: the first half covers frames
    ``[0, n_first)`` and the second half frames ``[start_second, num_frames)``,
    exactly the frames LFBE would produce on each waveform slice.
    """
    total = (num_frames - 1) * HOP + FRAME_SIZE
    split = make_split(total, rng, epsilon, align=HOP)
    n_first = 1 + (split.t_split - FRAME_SIZE) // HOP
    return n_first, split.t_split // HOP


def contrastive_scenario_loss(model: PretrainModel, feats: torch.Tensor, rng: np.random.Generator, epsilon: float = 0.05):
    n_first, start = split_frames(feats.shape[1], rng, epsilon)
    z_a = model.embed(_normalize_t(feats[:, :n_first]))
    z_b = model.embed(_normalize_t(feats[:, start:]))
    return contrastive_loss(z_a, z_b)


class AcousticPretrainer(TransformerMixin, BaseEstimator):
    """Self-supervised pretraining of the acoustic encoder.

    ``fit`` never sees labels. ``transform`` returns one unit-norm embedding
    per device, shape ``(devices, embedding_dim)`` per scenario.
    """

    def __init__(
        self,
        objective: str = "contrastive",
        lam: float = 0.5,
        encoder_config=None,
        n_steps: int = 500,
        batch_size: int = 8,
        learning_rate: float = 1e-3,
        validation_fraction: float = 0.1,
        eval_interval: int = 50,
        split_jitter: float = 0.05,
        random_state: int = 0,
        verbose: bool = False,
    ):
        self.objective = objective
        self.lam = lam
        self.encoder_config = encoder_config
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.validation_fraction = validation_fraction
        self.eval_interval = eval_interval
        self.split_jitter = split_jitter
        self.random_state = random_state
        self.verbose = verbose

    def scenario_loss(self, model, feats, rng, parts=None):
        """Objective of one scenario; for ``combo`` the (L_R, L_C) pair is appended to ``parts``."""
        weights = ObjectiveWeights(self.lam)
        if self.objective == "contrastive":
            return contrastive_scenario_loss(model, feats, rng, self.split_jitter)
        if self.objective == "reconstructive":
            return reconstructive_loss(feats, model, rng)
        l_c = contrastive_scenario_loss(model, feats, rng, self.split_jitter)
        l_r = reconstructive_loss(feats, model, rng)
        if parts is not None:
            parts.append((float(l_r.detach()), float(l_c.detach())))
        return combo_loss(l_r, l_c, weights)

    def fit(self, X, y=None):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        min_dev = 1 if self.objective == "contrastive" else 2
        data = [torch.from_numpy(a) for a in check_scenarios(X, min_devices=min_dev, min_frames=2 * FRAME_SIZE // HOP)]
        config = _config(self.encoder_config)
        torch.manual_seed(self.random_state)
        model = PretrainModel(config)
        rng = np.random.default_rng([self.random_state, 1])
        train_idx, val_idx = train_validation_split(len(data), self.validation_fraction, rng)
        result = run_training(
            model,
            lambda m, i, r: self.scenario_loss(m, data[i], r),
            train_idx, val_idx, self.n_steps, self.batch_size, self.learning_rate,
            self.eval_interval, self.random_state, self.verbose,
        )
        model.load_state_dict(result.best_state)
        model.eval()
        self.model_ = model
        self.config_ = config
        self.best_step_ = result.best_step
        self.best_validation_loss_ = result.best_val_loss
        self.initial_validation_loss_ = result.initial_val_loss
        self.history_ = result.history
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        out = []
        with torch.no_grad():
            for feats in check_scenarios(X):
                out.append(self.model_.embed(torch.from_numpy(feats)).numpy())
        return out

    def to_checkpoint(self) -> Checkpoint:
        check_is_fitted(self, "model_")
        return Checkpoint.from_module(
            f"pretrain:{self.objective}", self.model_, self.config_.to_dict(),
            validation_loss=self.best_validation_loss_, step=self.best_step_,
            extra={"history": self.history_, "initial_validation_loss": self.initial_validation_loss_},
        )


class DeviceArbitrationClassifier(ClassifierMixin, BaseEstimator):
    """Encoder plus two-stage attention classifier, trained end to end.

    ``init_checkpoint`` (a :class:`Checkpoint` or a path to one) initializes
    the encoder from pretraining; ``None`` trains from scratch.
    ``predict_proba`` returns one probability vector per scenario.
    """

    def __init__(
        self,
        encoder_config=None,
        init_checkpoint=None,
        n_steps: int = 300,
        batch_size: int = 8,
        learning_rate: float = 1e-3,
        validation_fraction: float = 0.1,
        eval_interval: int = 25,
        positional: bool = True,
        random_state: int = 0,
        verbose: bool = False,
    ):
        self.encoder_config = encoder_config
        self.init_checkpoint = init_checkpoint
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.validation_fraction = validation_fraction
        self.eval_interval = eval_interval
        self.positional = positional
        self.random_state = random_state
        self.verbose = verbose

    def _build(self):
        init = self.init_checkpoint
        if isinstance(init, (str, Path)):
            init = Checkpoint.load(init)
        config = _config(init.config if init is not None else self.encoder_config)
        torch.manual_seed(self.random_state)
        model = ArbitrationModel(config, self.positional)
        if init is not None:
            prefix = "encoder."
            if not any(k.startswith(prefix) for k in init.state):
                raise ValueError("initial checkpoint carries no encoder parameters")
            init.load_into(model.encoder, prefix)
        return model, config

    def fit(self, X, y):
        data = [torch.from_numpy(a) for a in check_scenarios(X)]
        y = check_labels(data, y)
        model, config = self._build()
        rng = np.random.default_rng([self.random_state, 1])
        train_idx, val_idx = train_validation_split(len(data), self.validation_fraction, rng)
        labels = torch.as_tensor(y)

        def loss_fn(m, i, r):
            logits = m(data[i])
            return -torch.log_softmax(logits, dim=-1)[labels[i]]

        result = run_training(
            model, loss_fn, train_idx, val_idx, self.n_steps, self.batch_size,
            self.learning_rate, self.eval_interval, self.random_state, self.verbose,
        )
        model.load_state_dict(result.best_state)
        model.eval()
        self.model_ = model
        self.config_ = config
        self.best_step_ = result.best_step
        self.best_validation_loss_ = result.best_val_loss
        self.history_ = result.history
        return self

    def predict_proba(self, X) -> list[np.ndarray]:
        check_is_fitted(self, "model_")
        with torch.no_grad():
            return [self.model_.predict_proba(torch.from_numpy(f)).double().numpy() for f in check_scenarios(X)]

    def predict(self, X) -> np.ndarray:
        return np.array([int(np.argmax(p)) for p in self.predict_proba(X)])

    def to_checkpoint(self) -> Checkpoint:
        check_is_fitted(self, "model_")
        return Checkpoint.from_module(
            "arbitration", self.model_, self.config_.to_dict(),
            validation_loss=self.best_validation_loss_, step=self.best_step_,
            extra={"history": self.history_, "positional": self.positional},
        )

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint | str | Path) -> "DeviceArbitrationClassifier":
        """Rebuild a fitted classifier from an arbitration checkpoint."""
        if not isinstance(checkpoint, Checkpoint):
            checkpoint = Checkpoint.load(checkpoint)
        positional = bool(checkpoint.extra.get("positional", True))
        clf = cls(encoder_config=checkpoint.config, positional=positional)
        config = EncoderConfig.from_dict(checkpoint.config)
        model = ArbitrationModel(config, positional)
        checkpoint.load_into(model)
        model.eval()
        clf.model_, clf.config_ = model, config
        clf.best_step_, clf.best_validation_loss_ = checkpoint.step, checkpoint.validation_loss
        clf.history_ = checkpoint.extra.get("history", [])
        return clf
