"""Feature Refiner classification head and its ablation variants.

Full layer order::

    linear(d_bbf -> d_frf)            # dimension reduction, no activation
    layer_norm(d_frf)
    linear(d_frf -> d_frf) -> relu
    linear(d_frf -> d_frf)
    layer_norm(d_frf)
    linear(d_frf -> C)                # classifier

The structure is pinned by the published extra-parameter counts, which are
only reproduced by one reduction linear, two square linears, two layer norms
and a classifier, all with biases::

    d_bbf*d_frf + d_frf + 2*(d_frf**2 + d_frf) + 4*d_frf + d_frf*C + C

    (512, 64, 10)   -> 42058
    (1024, 64, 10)  -> 74826
    (512, 256, 101) -> 289893

ReLU placement does not change the count; one ReLU between the square linears
is the default and ``second_relu`` adds another before the final layer norm.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .layers import InitSpec, LayerNorm, Linear, Module, ReLU, Sequential
from .tensor import ShapeError, Tensor

VARIANTS = ("full", "no_layernorm", "reduce_only", "square_linear_only", "k_nonlinear_layers")


@dataclass
class FeatureRefinerConfig:
    d_bbf: int = 512
    d_frf: int = 64
    num_classes: int = 10
    variant: str = "full"
    # number of linear+relu pairs for the k_nonlinear_layers variant
    k: int = 1
    second_relu: bool = False

    def __post_init__(self):
        m = re.fullmatch(r"k_nonlinear_layers\((\d+)\)", self.variant)
        if m:
            self.variant, self.k = "k_nonlinear_layers", int(m.group(1))
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown refiner variant {self.variant!r}; expected one of {VARIANTS}")
        if min(self.d_bbf, self.d_frf, self.num_classes) <= 0:
            raise ValueError("d_bbf, d_frf and num_classes must be positive")
        if self.variant != "square_linear_only" and self.d_frf > self.d_bbf:
            raise ValueError(f"d_frf={self.d_frf} must not exceed d_bbf={self.d_bbf} for a reducing head")
        if self.variant == "k_nonlinear_layers" and self.k < 1:
            raise ValueError(f"k_nonlinear_layers needs k >= 1, got {self.k}")


def expected_parameter_count(config: FeatureRefinerConfig) -> int:
    """Closed-form trainable parameter count for each variant."""
    b, f, c = config.d_bbf, config.d_frf, config.num_classes
    if config.variant == "reduce_only":
        return b * f + f + f * c + c
    if config.variant == "square_linear_only":
        return b * b + b + b * c + c
    squares = config.k + 1 if config.variant == "k_nonlinear_layers" else 2
    norms = 0 if config.variant == "no_layernorm" else 2
    return b * f + f + squares * (f * f + f) + norms * 2 * f + f * c + c


class FeatureRefinerHead(Module):
    def __init__(self, config: FeatureRefinerConfig, body: Sequential, classifier: Linear):
        self.config = config
        self.body = body
        self.classifier = classifier

    def forward(self, features: Tensor) -> Tensor:
        if features.ndim != 2 or features.shape[1] != self.config.d_bbf:
            raise ShapeError("feature_refiner", f"expected (N, {self.config.d_bbf}) features, got {features.shape}")
        return self.classifier(self.body(features))


def build_feature_refiner(
    config: FeatureRefinerConfig, init: InitSpec | None = None, rng: np.random.Generator | None = None
) -> FeatureRefinerHead:
    init = init or InitSpec()
    rng = rng if rng is not None else init.rng()
    s = init.scheme
    b, f, c = config.d_bbf, config.d_frf, config.num_classes

    if config.variant == "reduce_only":
        return FeatureRefinerHead(config, Sequential(Linear(b, f, rng, s)), Linear(f, c, rng, s))
    if config.variant == "square_linear_only":
        return FeatureRefinerHead(config, Sequential(Linear(b, b, rng, s)), Linear(b, c, rng, s))

    norms = config.variant != "no_layernorm"
    n_relu_pairs = config.k if config.variant == "k_nonlinear_layers" else 1
    layers: list[Module] = [Linear(b, f, rng, s)]
    if norms:
        layers.append(LayerNorm(f))
    for _ in range(n_relu_pairs):
        layers += [Linear(f, f, rng, s), ReLU()]
    layers.append(Linear(f, f, rng, s))
    if config.second_relu:
        layers.append(ReLU())
    if norms:
        layers.append(LayerNorm(f))
    return FeatureRefinerHead(config, Sequential(*layers), Linear(f, c, rng, s))
