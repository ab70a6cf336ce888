"""Episodic meta-training with fast/slow parameter partitioning.

Each meta step samples one task, adapts a copy of the fast (predictor)
parameters with T gradient steps on the support loss, then applies the query
loss gradient to everything: slow parameters directly, fast gradients taken
at the adapted point and applied to the original predictor (first-order
meta-gradient, no differentiation through the inner loop).

Slow parameters are exactly the pieces that make explanations stable across
tasks (both encoders and the mask head); the inner loop never touches them
because adaptation only rebuilds the predictor from detached support
embeddings.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import DatasetSplit, Episode, Graph, index_by_class, sample_episode
from .exceptions import AdaptationError, ConfigurationError, NumericError
from .losses import LossWeights, contrastive_loss, nll_batch, size_regularizer, softmax_rows, total_loss
from .metrics import MetricReport, accuracy, aggregate, episode_explanation_auc, roc_auc
from .model import (
    FAST,
    SLOW,
    AugmentedSet,
    EpisodeForward,
    ModelConfig,
    RationaleClassifier,
    TaskInfo,
    augment,
)


@dataclass
class MetaConfig:
    n_way: int = 2
    k_shot: int = 5
    query_per_class: int = 15
    local_lr: float = 1e-3
    global_lr: float = 1e-3
    local_steps: int = 5
    max_episodes: int = 2000
    val_interval: int = 50
    val_episodes: int = 20
    patience: int = 20
    seed: int = 0
    local_weights: LossWeights = field(default_factory=LossWeights)
    global_weights: LossWeights = field(default_factory=LossWeights)
    local_optimizer: str = "adam"
    # Reserved: exact differentiation through the inner loop is not built;
    # only the first-order meta-gradient is available.
    exact_inner_gradients: bool = False

    def validate(self) -> None:
        if self.local_lr <= 0 or self.global_lr < 0:
            raise ConfigurationError("learning rates must be positive (global may be 0 for probes)")
        if self.local_steps < 1:
            raise ConfigurationError("local_steps must be at least 1")
        if self.n_way < 2 or self.k_shot < 1 or self.query_per_class < 1:
            raise ConfigurationError("episode sizes must be positive with n_way >= 2")
        if self.local_optimizer not in ("adam", "sgd"):
            raise ConfigurationError(f"unknown local optimizer {self.local_optimizer!r}")
        if self.exact_inner_gradients:
            raise ConfigurationError("exact inner-loop gradients are reserved but not implemented")
        self.local_weights.validate()
        self.global_weights.validate()

    def to_dict(self) -> dict:
        return {
            "n_way": self.n_way,
            "k_shot": self.k_shot,
            "query_per_class": self.query_per_class,
            "local_lr": self.local_lr,
            "global_lr": self.global_lr,
            "local_steps": self.local_steps,
            "max_episodes": self.max_episodes,
            "val_interval": self.val_interval,
            "val_episodes": self.val_episodes,
            "patience": self.patience,
            "seed": self.seed,
            "local_weights": self.local_weights.to_dict(),
            "global_weights": self.global_weights.to_dict(),
            "local_optimizer": self.local_optimizer,
            "exact_inner_gradients": self.exact_inner_gradients,
        }


# -- optimizers -----------------------------------------------------------------

class Sgd:
    def __init__(self, lr: float):
        self.lr = float(lr)

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> None:
        for name, tensor in params.items():
            tensor.data = tensor.data - self.lr * grads[name]

    def state_dict(self) -> dict:
        return {"lr": self.lr}

    def load_state_dict(self, state: dict) -> None:
        self.lr = float(state["lr"])


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.first_moment: dict[str, np.ndarray] = {}
        self.second_moment: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> None:
        self.step_count += 1
        t = self.step_count
        for name, tensor in params.items():
            g = grads[name]
            m = self.first_moment.setdefault(name, np.zeros_like(tensor.data))
            v = self.second_moment.setdefault(name, np.zeros_like(tensor.data))
            m[:] = self.beta1 * m + (1.0 - self.beta1) * g
            v[:] = self.beta2 * v + (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            tensor.data = tensor.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self) -> dict:
        return {
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "step_count": self.step_count,
            "first_moment": {k: v.copy() for k, v in self.first_moment.items()},
            "second_moment": {k: v.copy() for k, v in self.second_moment.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.lr = float(state["lr"])
        self.beta1 = float(state["beta1"])
        self.beta2 = float(state["beta2"])
        self.eps = float(state["eps"])
        self.step_count = int(state["step_count"])
        self.first_moment = {k: np.array(v) for k, v in state["first_moment"].items()}
        self.second_moment = {k: np.array(v) for k, v in state["second_moment"].items()}


def make_optimizer(kind: str, lr: float):
    if kind == "adam":
        return Adam(lr)
    if kind == "sgd":
        return Sgd(lr)
    raise ConfigurationError(f"unknown optimizer {kind!r}")


# -- loss assembly ------------------------------------------------------------------

def _mean_regularizer(masks: Sequence[Tensor], gamma: float) -> Tensor:
    total = size_regularizer(masks[0], gamma)
    for mask in masks[1:]:
        total = ad.add(total, size_regularizer(mask, gamma))
    return ad.scale(total, 1.0 / len(masks))


def _assemble_loss(
    logit_matrix: Tensor,
    labels: np.ndarray,
    masks: Sequence[Tensor],
    aug_logits: Tensor | None,
    aug_labels: np.ndarray | None,
    weights: LossWeights,
) -> tuple[Tensor, dict]:
    l_r = nll_batch(logit_matrix, labels)
    if aug_logits is not None and weights.alpha_a > 0:
        l_a = contrastive_loss(aug_logits, aug_labels, weights.tau)
    else:
        l_a = ad.constant(0.0)
    l_reg = _mean_regularizer(masks, weights.gamma)
    total = total_loss(l_r, l_a, l_reg, weights)
    components = {
        "rationale": l_r.item(),
        "contrastive": l_a.item(),
        "regularizer": l_reg.item(),
        "total": total.item(),
    }
    return total, components


# -- inner loop -----------------------------------------------------------------------

def local_adapt(
    model: RationaleClassifier,
    support: Sequence[tuple[Graph, int]],
    config: MetaConfig,
) -> tuple[RationaleClassifier, list[dict]]:
    """T fast-parameter steps on the support loss; slow parameters untouched.

    Support embeddings, masks, and task information are computed once from
    the (frozen) slow components and detached, so each inner step only runs
    the predictor. Returns the adapted model copy and the per-step loss log.
    """
    if not support:
        raise ConfigurationError("local adaptation needs a non-empty support set")
    config.validate()
    weights = config.local_weights

    task_info, support_out = model.forward_support(support)
    ti_const = TaskInfo(
        prototypes=[p.detach() for p in task_info.prototypes],
        concat=task_info.concat.detach(),
    )
    masks: list[Tensor] = []
    rationales: list[tuple[Tensor, int]] = []
    non_rationales: list[Tensor] = []
    for out, (_, local) in zip(support_out, support):
        masks.append(out.mask.detach())
        rationales.append((out.h_r.detach(), local))
        non_rationales.append(out.h_n.detach())
    support_matrix = ad.stack_rows([h for h, _ in rationales]).detach()
    labels = np.array([local for _, local in support], dtype=np.int64)
    augmented = augment(rationales, non_rationales)
    aug_embeddings = augmented.embeddings.detach()

    adapted = model.adapted_copy()
    fast_params = dict(adapted.parameters().named(FAST))
    optimizer = make_optimizer(config.local_optimizer, config.local_lr)
    log: list[dict] = []
    for step in range(config.local_steps):
        for tensor in fast_params.values():
            tensor.zero_grad()
        logits = adapted.predict_batch(support_matrix, ti_const)
        aug_logits = adapted.predict_batch(aug_embeddings, ti_const)
        try:
            total, components = _assemble_loss(
                logits, labels, masks, aug_logits, augmented.labels, weights
            )
        except NumericError as err:
            raise AdaptationError(f"support loss diverged: {err}", step=step) from err
        if not np.isfinite(components["total"]):
            raise AdaptationError("support loss diverged", step=step)
        ad.backward(total)
        grads = {name: tensor.grad.copy() for name, tensor in fast_params.items()}
        optimizer.step(fast_params, grads)
        log.append(components)
    return adapted, log


# -- outer loop -------------------------------------------------------------------------

def meta_step(
    model: RationaleClassifier,
    episode: Episode,
    config: MetaConfig,
    optimizer,
) -> dict:
    """One task: local adaptation, then a global update from the query loss."""
    adapted, inner_log = local_adapt(model, episode.support, config)

    params = model.parameters()
    params.zero_grad()
    fast_adapted = dict(adapted.parameters().named(FAST))
    for tensor in fast_adapted.values():
        tensor.zero_grad()

    forward = adapted.forward_episode(episode, phase="train")
    query_total, components = _assemble_loss(
        forward.query_logit_matrix(),
        episode.query_labels(),
        [out.mask for out in forward.query],
        forward.augmented_logits,
        forward.augmented.labels if forward.augmented is not None else None,
        config.global_weights,
    )
    ad.backward(query_total)

    if config.global_lr > 0:
        grads: dict[str, np.ndarray] = {}
        targets: dict[str, Tensor] = {}
        for name, tensor in params.named(SLOW):
            grads[name] = tensor.grad.copy()
            targets[name] = tensor
        # first-order rule: query gradient at the adapted point moves theta_p
        for name, tensor in params.named(FAST):
            grads[name] = fast_adapted[name].grad.copy()
            targets[name] = tensor
        optimizer.step(targets, grads)

    return {
        "support_loss": inner_log[-1]["total"],
        "query_loss": components["total"],
        "query_components": components,
    }


@dataclass
class TrainResult:
    model: RationaleClassifier  # loaded with the best-validation parameters
    last_snapshot: dict[str, np.ndarray]
    best_snapshot: dict[str, np.ndarray]
    log: list[dict]
    best_val_accuracy: float | None
    best_episode: int | None


def meta_train(
    graphs: Sequence[Graph],
    split: DatasetSplit,
    config: MetaConfig,
    model_config: ModelConfig,
) -> TrainResult:
    """Loop meta steps over sampled training episodes with periodic validation.

    Keeps the parameter snapshot with the best validation accuracy and stops
    early once `patience` evaluations pass without improvement.
    """
    config.validate()
    model_config.validate()
    class_index = index_by_class(graphs)
    train_classes = [c for c in split.train_classes if c in class_index]
    if len(train_classes) < config.n_way:
        raise ConfigurationError(
            f"train split offers {len(train_classes)} classes, need {config.n_way}"
        )
    need = config.k_shot + config.query_per_class
    for c in train_classes:
        if len(class_index[c]) < need:
            raise ConfigurationError(
                f"class {c} has {len(class_index[c])} graphs, episodes need {need}"
            )

    model = RationaleClassifier(model_config, np.random.default_rng([config.seed, 0]))
    params = model.parameters()
    optimizer = Adam(config.global_lr)
    episode_rng = np.random.default_rng([config.seed, 1])

    log: list[dict] = []
    best_snapshot = params.snapshot()
    best_val: float | None = None
    best_episode: int | None = None
    evals_since_best = 0
    run_validation = len(split.val_classes) >= config.n_way and config.val_episodes > 0
    eval_counter = 0

    for episode_idx in range(1, config.max_episodes + 1):
        started = time.perf_counter()
        episode = sample_episode(
            graphs,
            split,
            "train",
            config.n_way,
            config.k_shot,
            config.query_per_class,
            episode_rng,
            class_index=class_index,
        )
        try:
            metrics = meta_step(model, episode, config, optimizer)
        except (NumericError, AdaptationError) as err:
            raise NumericError(f"episode {episode_idx}: {err}") from err
        if not np.isfinite(metrics["query_loss"]):
            raise NumericError(f"query loss diverged at episode {episode_idx}")
        record = {
            "episode": episode_idx,
            "support_loss": metrics["support_loss"],
            "query_loss": metrics["query_loss"],
            "wall_ms": (time.perf_counter() - started) * 1000.0,
        }

        if run_validation and episode_idx % config.val_interval == 0:
            eval_counter += 1
            reports = evaluate_episodes(
                model,
                graphs,
                split,
                "val",
                config,
                config.val_episodes,
                np.random.default_rng([config.seed, 2, eval_counter]),
                class_index=class_index,
            )
            val_acc = reports["accuracy"].mean
            record["val_accuracy"] = val_acc
            if best_val is None or val_acc > best_val:
                best_val = val_acc
                best_snapshot = params.snapshot()
                best_episode = episode_idx
                evals_since_best = 0
            else:
                evals_since_best += 1
        log.append(record)
        if run_validation and evals_since_best >= config.patience:
            break

    last_snapshot = params.snapshot()
    if best_val is None:
        best_snapshot = last_snapshot
        best_episode = len(log)
    params.restore(best_snapshot)
    return TrainResult(
        model=model,
        last_snapshot=last_snapshot,
        best_snapshot=best_snapshot,
        log=log,
        best_val_accuracy=best_val,
        best_episode=best_episode,
    )


# -- evaluation ---------------------------------------------------------------------------

def evaluate_episodes(
    model: RationaleClassifier,
    graphs: Sequence[Graph],
    split: DatasetSplit,
    role: str,
    config: MetaConfig,
    num_episodes: int,
    rng: np.random.Generator,
    class_index: dict[int, list[int]] | None = None,
    config_fingerprint: str = "",
) -> dict[str, MetricReport]:
    """Finetune-then-evaluate over sampled episodes from one split role.

    Per episode: adapt the fast parameters on the support set, score the
    query set. Reports accuracy, binary AUC for 2-way tasks, and explanation
    AUC whenever ground-truth masks exist. The passed-in model is never
    mutated (adaptation happens on copies; slow parameters are shared
    read-only).
    """
    if num_episodes == 0:
        return {}
    if class_index is None:
        class_index = index_by_class(graphs)
    acc_values: list[float] = []
    auc_values: list[float] = []
    explanation_values: list[float] = []
    for _ in range(num_episodes):
        episode = sample_episode(
            graphs,
            split,
            role,
            config.n_way,
            config.k_shot,
            config.query_per_class,
            rng,
            class_index=class_index,
        )
        adapted, _ = local_adapt(model, episode.support, config)
        forward = adapted.forward_episode(episode, phase="eval")
        logits = forward.query_logit_matrix()
        labels = episode.query_labels()
        predictions = np.argmax(logits.data, axis=1)
        acc_values.append(accuracy(predictions, labels))
        if config.n_way == 2:
            scores = softmax_rows(logits).data[:, 1]
            auc_values.append(roc_auc(scores, labels))
        masked = [
            (out.mask.data, graph.truth_mask)
            for out, (graph, _) in zip(forward.query, episode.query)
            if graph.truth_mask is not None
        ]
        if masked:
            explanation_values.append(
                episode_explanation_auc([m for m, _ in masked], [t for _, t in masked])
            )
    reports = {"accuracy": aggregate(acc_values, "accuracy", config_fingerprint)}
    if auc_values:
        reports["auc"] = aggregate(auc_values, "auc", config_fingerprint)
    if explanation_values:
        reports["explanation_auc"] = aggregate(
            explanation_values, "explanation_auc", config_fingerprint
        )
    return reports


def test_protocol(
    model: RationaleClassifier,
    graphs: Sequence[Graph],
    split: DatasetSplit,
    config: MetaConfig,
    num_episodes: int,
    seed: int | None = None,
    config_fingerprint: str = "",
) -> dict[str, MetricReport]:
    """Evaluation on the held-out test classes (adapt on support, score query)."""
    rng = np.random.default_rng([config.seed if seed is None else seed, 3])
    return evaluate_episodes(
        model,
        graphs,
        split,
        "test",
        config,
        num_episodes,
        rng,
        config_fingerprint=config_fingerprint,
    )
