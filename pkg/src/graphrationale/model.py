"""The two-stage self-explaining classifier.

A graph is encoded twice: encoder `f` produces the node embeddings that get
pooled into rationale/non-rationale graph embeddings, and the explainer's own
encoder feeds an MLP head that emits a per-node soft mask. Class prototypes
computed from the support set only ("task information") are concatenated into
both the mask head input and the predictor input, so the same weights can
serve any episode. Embedding-level augmentation crosses every support
rationale with every support non-rationale and labels the result by the
rationale donor.

Parameters are tagged ``slow`` (both encoders + mask head, updated only by
the outer meta loop) or ``fast`` (predictor, adapted inside each episode).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Episode, Graph
from .encoders import GnnEncoder, MlpBlock, readout
from .exceptions import (
    ConfigurationError,
    DimensionError,
    TaskConstructionError,
    ValidationError,
)

SLOW, FAST = "slow", "fast"


class ParameterSet:
    """Ordered name -> tensor registry where each entry carries one tag."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._tags: dict[str, str] = {}

    def add(self, name: str, tensor: Tensor, tag: str) -> None:
        if tag not in (SLOW, FAST):
            raise ConfigurationError(f"unknown parameter tag {tag!r}")
        if name in self._params:
            raise ConfigurationError(f"parameter {name!r} registered twice")
        self._params[name] = tensor
        self._tags[name] = tag

    def __len__(self) -> int:
        return len(self._params)

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def tag(self, name: str) -> str:
        return self._tags[name]

    def named(self, tag: str | None = None) -> Iterable[tuple[str, Tensor]]:
        for name, tensor in self._params.items():
            if tag is None or self._tags[name] == tag:
                yield name, tensor

    def zero_grad(self) -> None:
        for _, tensor in self.named():
            tensor.zero_grad()

    def snapshot(self, tag: str | None = None) -> dict[str, np.ndarray]:
        return {name: tensor.data.copy() for name, tensor in self.named(tag)}

    def restore(self, snapshot: dict[str, np.ndarray]) -> None:
        for name, values in snapshot.items():
            self._params[name].data = values.copy()

    def values_hash(self, tag: str | None = None) -> str:
        digest = hashlib.sha256()
        for name, tensor in self.named(tag):
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(tensor.data).tobytes())
        return digest.hexdigest()


@dataclass
class ModelConfig:
    feature_dim: int
    n_way: int
    hidden_dim: int = 32
    num_layers: int = 2
    encoder: str = "gin"
    mask_hidden: int = 32
    predictor_hidden: int = 32

    def validate(self) -> None:
        if self.feature_dim < 1 or self.hidden_dim < 1 or self.n_way < 2:
            raise ConfigurationError("feature_dim/hidden_dim must be positive and n_way >= 2")
        if self.encoder not in GnnEncoder.VARIANTS:
            raise ConfigurationError(f"unknown encoder variant {self.encoder!r}")
        if self.num_layers not in (2, 3):
            raise ConfigurationError(f"layer count must be 2 or 3, got {self.num_layers}")

    def to_dict(self) -> dict:
        return {
            "feature_dim": self.feature_dim,
            "n_way": self.n_way,
            "hidden_dim": self.hidden_dim,
            "num_layers": self.num_layers,
            "encoder": self.encoder,
            "mask_hidden": self.mask_hidden,
            "predictor_hidden": self.predictor_hidden,
        }


@dataclass
class TaskInfo:
    """Per-class prototype embeddings (support set only) plus their concatenation."""

    prototypes: list[Tensor]
    concat: Tensor

    @property
    def n_way(self) -> int:
        return len(self.prototypes)


@dataclass
class RationaleOutput:
    """Everything the model says about one graph."""

    mask: Tensor
    h_r: Tensor
    h_n: Tensor
    logits: Tensor


@dataclass
class AugmentedSet:
    """All ordered rationale x non-rationale combinations from one support set."""

    embeddings: Tensor  # (count, d), row i*S+j = h_r(i) + h_n(j)
    labels: np.ndarray  # label of the rationale donor i

    def __len__(self) -> int:
        return self.embeddings.shape[0]

    def pairs(self) -> list[tuple[np.ndarray, int]]:
        return [(self.embeddings.data[i], int(self.labels[i])) for i in range(len(self))]


@dataclass
class EpisodeForward:
    task_info: TaskInfo
    support: list[RationaleOutput]
    query: list[RationaleOutput]
    augmented: AugmentedSet | None
    augmented_logits: Tensor | None

    def support_logit_matrix(self) -> Tensor:
        return ad.stack_rows([out.logits for out in self.support])

    def query_logit_matrix(self) -> Tensor:
        return ad.stack_rows([out.logits for out in self.query])


def decompose(h: Tensor, mask: Tensor) -> tuple[Tensor, Tensor]:
    """Split pooled node embeddings into rationale and non-rationale parts.

    With mean pooling the two parts always recompose: h_r + h_n = readout(h).
    """
    if mask.ndim != 1 or mask.shape[0] != h.shape[0]:
        raise DimensionError(f"mask {mask.shape} does not match {h.shape[0]} nodes")
    h_r = readout(h, mask)
    h_n = readout(h, 1.0 - mask)
    return h_r, h_n


def augment(
    rationales: Sequence[tuple[Tensor, int]], non_rationales: Sequence[Tensor]
) -> AugmentedSet:
    """Cross every rationale embedding with every non-rationale embedding.

    Pairs with i == j are included, so an N-way K-shot support set yields
    (N*K)^2 augmented embeddings, each labelled by its rationale donor.
    """
    if len(rationales) == 0 or len(non_rationales) == 0:
        return AugmentedSet(embeddings=ad.constant(np.zeros((0, 0))), labels=np.zeros(0, dtype=np.int64))
    h_r = ad.stack_rows([h for h, _ in rationales])
    h_n = ad.stack_rows(list(non_rationales))
    count = len(non_rationales)
    combined = ad.add(ad.repeat_rows(h_r, count), ad.tile_rows(h_n, len(rationales)))
    labels = np.repeat(np.array([label for _, label in rationales], dtype=np.int64), count)
    return AugmentedSet(embeddings=combined, labels=labels)


class RationaleClassifier:
    """Explainer + predictor over a pair of GNN encoders."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        d = config.hidden_dim
        ti_dim = config.n_way * d
        self.encoder_f = GnnEncoder(
            config.encoder, config.feature_dim, d, config.num_layers, rng
        )
        self.encoder_g = GnnEncoder(
            config.encoder, config.feature_dim, d, config.num_layers, rng
        )
        self.mask_mlp = MlpBlock([d + ti_dim, config.mask_hidden, 1], rng, zero_init_final=True)
        self.predictor = MlpBlock(
            [d + ti_dim, config.predictor_hidden, config.n_way], rng, zero_init_final=True
        )

    # -- parameters ---------------------------------------------------------

    def parameters(self) -> ParameterSet:
        params = ParameterSet()
        for name, tensor in self.encoder_f.named_parameters("encoder_f"):
            params.add(name, tensor, SLOW)
        for name, tensor in self.encoder_g.named_parameters("encoder_g"):
            params.add(name, tensor, SLOW)
        for name, tensor in self.mask_mlp.named_parameters("mask_mlp"):
            params.add(name, tensor, SLOW)
        for name, tensor in self.predictor.named_parameters("predictor"):
            params.add(name, tensor, FAST)
        return params

    def adapted_copy(self) -> "RationaleClassifier":
        """Share the slow components, deep-copy the fast predictor."""
        dup = object.__new__(RationaleClassifier)
        dup.config = self.config
        dup.encoder_f = self.encoder_f
        dup.encoder_g = self.encoder_g
        dup.mask_mlp = self.mask_mlp
        dup.predictor = self.predictor.clone()
        return dup

    # -- forward pieces --------------------------------------------------------

    def _task_info_from_embeddings(
        self, embeddings: Sequence[Tensor], locals_: Sequence[int]
    ) -> TaskInfo:
        buckets: dict[int, list[Tensor]] = {c: [] for c in range(self.config.n_way)}
        for embedding, local in zip(embeddings, locals_):
            if local not in buckets:
                raise TaskConstructionError(
                    f"local label {local} outside 0..{self.config.n_way - 1}"
                )
            buckets[local].append(embedding)
        for c, bucket in buckets.items():
            if not bucket:
                raise TaskConstructionError(f"support set has no graphs for class {c}")
        prototypes = [
            ad.mean_(ad.stack_rows(buckets[c]), axis=0) for c in range(self.config.n_way)
        ]
        concat = ad.concat(prototypes, axis=0)
        return TaskInfo(prototypes=prototypes, concat=concat)

    def compute_task_info(self, support: Sequence[tuple[Graph, int]]) -> TaskInfo:
        """Mean-of-means prototypes per local class, from the support set only."""
        embeddings = [readout(self.encoder_f.forward(graph)) for graph, _ in support]
        return self._task_info_from_embeddings(embeddings, [local for _, local in support])

    def explain(self, graph: Graph, task_info: TaskInfo) -> Tensor:
        """Soft node mask in (0, 1): sigmoid(MLP([node embedding || task info]))."""
        ti = task_info.concat
        expected = self.config.n_way * self.config.hidden_dim
        if ti.shape != (expected,):
            raise DimensionError(f"task info has shape {ti.shape}, expected ({expected},)")
        h = self.encoder_g.forward(graph)
        n = graph.num_nodes
        ti_rows = ad.tile_rows(ad.reshape(ti, (1, expected)), n)
        logits = self.mask_mlp.forward(ad.concat([h, ti_rows], axis=1))
        return ad.sigmoid(ad.reshape(logits, (n,)))

    def predict(self, h: Tensor, task_info: TaskInfo) -> Tensor:
        """Class logits for one graph embedding."""
        return ad.reshape(
            self.predict_batch(ad.reshape(h, (1, h.shape[0])), task_info),
            (self.config.n_way,),
        )

    def predict_batch(self, h_matrix: Tensor, task_info: TaskInfo) -> Tensor:
        """Class logits for a batch of graph embeddings (one per row)."""
        ti = task_info.concat
        rows = h_matrix.shape[0]
        ti_rows = ad.tile_rows(ad.reshape(ti, (1, ti.shape[0])), rows)
        return self.predictor.forward(ad.concat([h_matrix, ti_rows], axis=1))

    def forward_graph(
        self, graph: Graph, task_info: TaskInfo, node_embeddings: Tensor | None = None
    ) -> RationaleOutput:
        mask = self.explain(graph, task_info)
        h = node_embeddings if node_embeddings is not None else self.encoder_f.forward(graph)
        h_r, h_n = decompose(h, mask)
        logits = self.predict(h_r, task_info)
        return RationaleOutput(mask=mask, h_r=h_r, h_n=h_n, logits=logits)

    def forward_support(
        self, support: Sequence[tuple[Graph, int]]
    ) -> tuple[TaskInfo, list[RationaleOutput]]:
        """Task information plus per-graph outputs, encoding each support graph once."""
        h_list = [self.encoder_f.forward(graph) for graph, _ in support]
        embeddings = [readout(h) for h in h_list]
        task_info = self._task_info_from_embeddings(
            embeddings, [local for _, local in support]
        )
        outputs = [
            self.forward_graph(graph, task_info, node_embeddings=h)
            for (graph, _), h in zip(support, h_list)
        ]
        return task_info, outputs

    def forward_episode(
        self, episode: Episode, phase: Literal["train", "eval"] = "train"
    ) -> EpisodeForward:
        """Run the full pipeline over one episode.

        Task information comes from the support set alone; query labels are
        never read. Augmentation (support graphs only) is produced in the
        training phase.
        """
        task_info, support_out = self.forward_support(episode.support)
        query_out = [self.forward_graph(g, task_info) for g, _ in episode.query]
        augmented = None
        augmented_logits = None
        if phase == "train":
            rationales = [
                (out.h_r, local) for out, (_, local) in zip(support_out, episode.support)
            ]
            non_rationales = [out.h_n for out in support_out]
            augmented = augment(rationales, non_rationales)
            augmented_logits = self.predict_batch(augmented.embeddings, task_info)
        return EpisodeForward(
            task_info=task_info,
            support=support_out,
            query=query_out,
            augmented=augmented,
            augmented_logits=augmented_logits,
        )


# -- checkpoints ------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(
    model: RationaleClassifier, path: str | Path, config_fingerprint: str = "", extra: dict | None = None
) -> None:
    params = model.parameters()
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "model": model.config.to_dict(),
        "config_fingerprint": config_fingerprint,
        "parameters": [
            {
                "name": name,
                "tag": params.tag(name),
                "shape": list(tensor.shape),
                "values": tensor.data.reshape(-1).tolist(),
            }
            for name, tensor in params.named()
        ],
    }
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, sort_keys=True) + "\n")


def load_checkpoint(path: str | Path) -> RationaleClassifier:
    raw = json.loads(Path(path).read_text())
    if raw.get("format_version") != CHECKPOINT_VERSION:
        raise ValidationError(f"unsupported checkpoint version {raw.get('format_version')}")
    config = ModelConfig(**raw["model"])
    model = RationaleClassifier(config, np.random.default_rng(0))
    params = model.parameters()
    seen = set()
    for entry in raw["parameters"]:
        name = entry["name"]
        if name not in params:
            raise ValidationError(f"checkpoint parameter {name!r} unknown to this architecture")
        tensor = params[name]
        shape = tuple(entry["shape"])
        if tensor.shape != shape:
            raise ValidationError(
                f"checkpoint parameter {name!r} has shape {shape}, model expects {tensor.shape}"
            )
        if params.tag(name) != entry["tag"]:
            raise ValidationError(f"checkpoint parameter {name!r} carries tag {entry['tag']!r}")
        tensor.data = np.asarray(entry["values"], dtype=np.float64).reshape(shape)
        seen.add(name)
    missing = {name for name, _ in params.named()} - seen
    if missing:
        raise ValidationError(f"checkpoint is missing parameters: {sorted(missing)}")
    return model
