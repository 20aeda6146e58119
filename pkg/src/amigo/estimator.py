"""scikit-learn style survival estimator wrapping the graph model.

``X`` is a :class:`~amigo.graph.Cohort` or a list of
:class:`~amigo.graph.PatientRecord`; ``y`` is a structured ``(event, time)``
array (see :func:`amigo.validation.make_survival_y`). When ``y`` is omitted
the survival data stored on the patient records is used.
"""

from __future__ import annotations

import logging
import math
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exceptions import AllCensoredBatchError, NumericalError
from .metrics import concordance_index
from .model import ModelConfig, ModelParams, batch_forward, patient_forward
from .sparsify import SparsityConfig, sparsify
from .survival import BatchSpec, bcp_sample_batch, cox_batch_loss
from .tensor import AdamState, Tape, adam_step
from .validation import check_patients, check_survival_y, survival_y_from_patients

logger = logging.getLogger(__name__)

# mask stream used when sparsity is applied at prediction time
INFERENCE_EPOCH = 2**31 - 1


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """Cosine annealing from ``base_lr`` at step 0 towards 0 at ``total_steps``."""
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * step / max(total_steps, 1)))


class AmigoSurvival(BaseEstimator):
    """Risk-score regressor trained with the batched Cox loss.

    Higher predicted scores mean higher hazard. ``score`` returns Harrell's
    C-index.
    """

    def __init__(
        self,
        n_layers: int = 3,
        hidden_dim: int = 128,
        mlp_dim: int = 32,
        pool_ratio: float = 0.5,
        n_heads: int = 4,
        weight_sharing: str = "coupled",
        shared_attention: bool = True,
        instance_norm: bool = True,
        instance_aggregator: str = "attention",
        sparsity: float = 0.8,
        apply_sparsity_at_inference: bool = False,
        min_kept: int = 1,
        batch_size: int = 128,
        bcp_alpha=0.1,
        lr: float = 0.002,
        weight_decay: float = 1e-4,
        epochs: int = 30,
        max_batch_retries: int = 20,
        random_state: int = 0,
    ):
        self.n_layers = n_layers
        self.hidden_dim = hidden_dim
        self.mlp_dim = mlp_dim
        self.pool_ratio = pool_ratio
        self.n_heads = n_heads
        self.weight_sharing = weight_sharing
        self.shared_attention = shared_attention
        self.instance_norm = instance_norm
        self.instance_aggregator = instance_aggregator
        self.sparsity = sparsity
        self.apply_sparsity_at_inference = apply_sparsity_at_inference
        self.min_kept = min_kept
        self.batch_size = batch_size
        self.bcp_alpha = bcp_alpha
        self.lr = lr
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.max_batch_retries = max_batch_retries
        self.random_state = random_state

    # -- configuration -----------------------------------------------------

    def _model_config(self, n_modalities: int, d_node: int) -> ModelConfig:
        return ModelConfig(
            n_modalities=n_modalities,
            d_node=d_node,
            n_layers=self.n_layers,
            hidden_dim=self.hidden_dim,
            mlp_dim=self.mlp_dim,
            pool_ratio=self.pool_ratio,
            n_heads=self.n_heads,
            weight_sharing=self.weight_sharing,
            shared_attention=self.shared_attention,
            instance_norm=self.instance_norm,
            instance_aggregator=self.instance_aggregator,
        )

    def _sparsity_config(self) -> SparsityConfig:
        return SparsityConfig(self.sparsity, self.apply_sparsity_at_inference, self.min_kept)

    # -- training ----------------------------------------------------------

    def fit(self, X, y=None, modalities: Sequence[str] | None = None):
        patients, registry = check_patients(X, modalities)
        if y is None:
            y = survival_y_from_patients(patients)
        times, events = check_survival_y(y, len(patients))
        d_node = patients[0].graphs[registry[0]][0].node_features.shape[1]
        cfg = self._model_config(len(registry), d_node)
        spec = BatchSpec(self.batch_size, self.bcp_alpha)
        scfg = self._sparsity_config()

        self.modalities_ = registry
        self.params_ = ModelParams.init(cfg, seed=self.random_state)
        self.loss_history_: list[float] = []
        self.train_flops_per_patient_: list[float] = []
        state = AdamState()
        rng = np.random.default_rng(np.random.SeedSequence([self.random_state, 1]))
        steps_per_epoch = max(1, math.ceil(len(patients) / spec.batch_size))
        total = self.epochs * steps_per_epoch
        step = 0
        for epoch in range(self.epochs):

            def transform(g, epoch=epoch):
                return sparsify(g, scfg, self.random_state, epoch)

            losses, flops, n_fwd = [], 0, 0
            for _ in range(steps_per_epoch):
                loss_value, grads, f, n = self._train_step(patients, times, events, spec, rng, transform)
                lr = cosine_lr(self.lr, step, total)
                adam_step(self.params_.arrays, grads, lr, self.weight_decay, state)
                losses.append(loss_value)
                flops += f
                n_fwd += n
                step += 1
            self.loss_history_.append(float(np.mean(losses)))
            self.train_flops_per_patient_.append(flops / n_fwd)
            logger.debug("epoch %d loss %.5f", epoch, self.loss_history_[-1])
        self.n_steps_ = step
        return self

    def _train_step(self, patients, times, events, spec, rng, transform):
        for attempt in range(self.max_batch_retries + 1):
            batch = bcp_sample_batch(events, spec, rng)
            if events[batch].any():
                break
            logger.warning("all-censored batch drawn (attempt %d); resampling", attempt + 1)
        else:
            raise AllCensoredBatchError(f"no batch with an observed event after {self.max_batch_retries} retries")
        tape = Tape()
        w = self.params_.bind(tape)
        out = batch_forward([patients[i] for i in batch], w, self.modalities_, transform)
        flops = out.flops
        loss = cox_batch_loss(out.risk, times[batch], events[batch])
        value = loss.item()
        if not math.isfinite(value):
            raise NumericalError(f"non-finite training loss {value}")
        return value, w.gradients(loss), flops, len(batch)

    # -- inference ---------------------------------------------------------

    def _inference_transform(self):
        if not (self.apply_sparsity_at_inference and self.sparsity > 0):
            return None
        scfg = self._sparsity_config()

        def transform(g):
            return sparsify(g, scfg, self.random_state, INFERENCE_EPOCH)

        return transform

    def _batched(self, X):
        check_is_fitted(self, "params_")
        patients, _ = check_patients(X, self.modalities_)
        transform = self._inference_transform()
        step = max(1, self.batch_size)
        for lo in range(0, len(patients), step):
            w = self.params_.bind(Tape(), trainable=False)
            yield batch_forward(patients[lo : lo + step], w, self.modalities_, transform)

    def predict(self, X) -> np.ndarray:
        """Risk score per patient (log-hazard scale)."""
        return np.concatenate([out.risk.value.reshape(-1) for out in self._batched(X)])

    def transform(self, X) -> np.ndarray:
        """Patient embeddings, one ``mlp_dim`` row per patient."""
        return np.vstack([out.embedding.value for out in self._batched(X)])

    def forward_flops(self, X, transform=None) -> np.ndarray:
        """Single-patient forward flop count per patient.

        ``transform`` overrides the graph transform (default: the inference
        settings), e.g. to measure training-time sparsified cost.
        """
        check_is_fitted(self, "params_")
        patients, _ = check_patients(X, self.modalities_)
        if transform is None:
            transform = self._inference_transform()
        out = []
        for p in patients:
            tape = Tape()
            patient_forward(p, self.params_.bind(tape, trainable=False), self.modalities_, transform)
            out.append(tape.flop_count)
        return np.asarray(out, dtype=np.float64)

    def score(self, X, y=None) -> float:
        patients, _ = check_patients(X, getattr(self, "modalities_", None))
        if y is None:
            y = survival_y_from_patients(patients)
        times, events = check_survival_y(y, len(patients))
        return concordance_index(times, events, self.predict(patients))

    # -- persistence -------------------------------------------------------

    def save(self, path):
        check_is_fitted(self, "params_")
        meta = {"estimator_params": self.get_params(), "modalities": self.modalities_}
        return self.params_.save(path, meta)

    @classmethod
    def load(cls, path) -> "AmigoSurvival":
        params, meta = ModelParams.load(path)
        est = cls(**meta["estimator_params"])
        est.params_ = params
        est.modalities_ = list(meta["modalities"])
        return est
