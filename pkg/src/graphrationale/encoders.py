"""GNN encoders (GIN, GraphSAGE), MLP blocks, and mean-pooling readout.

All parameters are autodiff leaves created with Glorot-style uniform
initialization from an explicit numpy Generator, so model construction is
fully reproducible from a seed.
"""

from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Graph
from .exceptions import ConfigurationError, DimensionError, EmptyReductionError


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, (fan_in, fan_out))


class MlpBlock:
    """Affine chain with ReLU between layers and an optional final activation.

    ``zero_init_final`` zeroes the last layer so a fresh block is the constant
    zero map: mask heads start at sigmoid(0)=0.5 and classifier heads start at
    uniform logits, which keeps an untrained model exactly at chance.
    """

    def __init__(
        self,
        sizes: Sequence[int],
        rng: np.random.Generator,
        final_activation: str | None = None,
        zero_init_final: bool = False,
    ):
        if len(sizes) < 2:
            raise ConfigurationError(f"MLP needs at least two sizes, got {sizes}")
        if final_activation not in (None, "sigmoid"):
            raise ConfigurationError(f"unsupported final activation {final_activation!r}")
        self.sizes = tuple(int(s) for s in sizes)
        self.final_activation = final_activation
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            last = i == len(self.sizes) - 2
            if last and zero_init_final:
                w = np.zeros((fan_in, fan_out))
            else:
                w = glorot_uniform(rng, fan_in, fan_out)
            self.weights.append(ad.parameter(w))
            self.biases.append(ad.parameter(np.zeros(fan_out)))

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise DimensionError(f"MLP expects (batch, {self.in_dim}), got {x.shape}")
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.add(ad.matmul(h, w), b)
            if i < last:
                h = ad.relu(h)
        if self.final_activation == "sigmoid":
            h = ad.sigmoid(h)
        return h

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"{prefix}/layer{i}/W", w
            yield f"{prefix}/layer{i}/b", b

    def clone(self) -> "MlpBlock":
        dup = object.__new__(MlpBlock)
        dup.sizes = self.sizes
        dup.final_activation = self.final_activation
        dup.weights = [w.copy() for w in self.weights]
        dup.biases = [b.copy() for b in self.biases]
        return dup


class GnnEncoder:
    """Message-passing encoder over dense adjacency.

    GIN layer: MLP((1 + eps) * h_v + sum of neighbour h_u), eps fixed at 0,
    with a two-affine ReLU MLP per layer. GraphSAGE layer:
    ReLU(W [h_v || mean of neighbour h_u] + b); an empty neighbourhood
    contributes a zero mean.
    """

    VARIANTS = ("gin", "graphsage")

    def __init__(
        self,
        variant: str,
        in_dim: int,
        hidden_dim: int,
        num_layers: int,
        rng: np.random.Generator,
    ):
        if variant not in self.VARIANTS:
            raise ConfigurationError(f"unknown encoder variant {variant!r}")
        if num_layers not in (2, 3):
            raise ConfigurationError(f"layer count must be 2 or 3, got {num_layers}")
        self.variant = variant
        self.in_dim = in_dim
        self.hidden_dim = hidden_dim
        self.num_layers = num_layers
        self.gin_eps = 0.0
        self.layers: list = []
        dim = in_dim
        for _ in range(num_layers):
            if variant == "gin":
                self.layers.append(MlpBlock([dim, hidden_dim, hidden_dim], rng))
            else:
                w = ad.parameter(glorot_uniform(rng, 2 * dim, hidden_dim))
                b = ad.parameter(np.zeros(hidden_dim))
                self.layers.append((w, b))
            dim = hidden_dim

    def forward(self, graph: Graph) -> Tensor:
        if graph.features.shape[1] != self.in_dim:
            raise DimensionError(
                f"graph features have dimension {graph.features.shape[1]}, encoder expects {self.in_dim}"
            )
        h = ad.constant(graph.features)
        a = graph.adjacency
        if self.variant == "gin":
            # (1 + eps) h + A h  ==  ((1 + eps) I + A) h
            agg = ad.constant(a + (1.0 + self.gin_eps) * np.eye(graph.num_nodes))
            for mlp in self.layers:
                h = mlp.forward(ad.matmul(agg, h))
        else:
            degrees = np.maximum(a.sum(axis=1), 1.0)
            mean_op = ad.constant(a / degrees[:, None])
            for w, b in self.layers:
                nbr = ad.matmul(mean_op, h)
                h = ad.relu(ad.add(ad.matmul(ad.concat([h, nbr], axis=1), w), b))
        return h

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for i, layer in enumerate(self.layers):
            if self.variant == "gin":
                yield from layer.named_parameters(f"{prefix}/gin{i}")
            else:
                yield f"{prefix}/sage{i}/W", layer[0]
                yield f"{prefix}/sage{i}/b", layer[1]

    def clone(self) -> "GnnEncoder":
        dup = object.__new__(GnnEncoder)
        dup.variant = self.variant
        dup.in_dim = self.in_dim
        dup.hidden_dim = self.hidden_dim
        dup.num_layers = self.num_layers
        dup.gin_eps = self.gin_eps
        if self.variant == "gin":
            dup.layers = [mlp.clone() for mlp in self.layers]
        else:
            dup.layers = [(w.copy(), b.copy()) for w, b in self.layers]
        return dup


def readout(h: Tensor, weights: Tensor | None = None) -> Tensor:
    """Mean-pool node embeddings into one graph embedding.

    With weights, each row is scaled before pooling, realising the masked
    readout of rationale/non-rationale embeddings.
    """
    if h.ndim != 2:
        raise DimensionError(f"readout expects a node-embedding matrix, got {h.shape}")
    if h.shape[0] == 0:
        raise EmptyReductionError("readout of a graph with no nodes")
    if weights is None:
        return ad.mean_(h, axis=0)
    if weights.ndim != 1 or weights.shape[0] != h.shape[0]:
        raise DimensionError(f"weights {weights.shape} do not match {h.shape[0]} nodes")
    return ad.mean_(ad.scale_rows(h, weights), axis=0)
