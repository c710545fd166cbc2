"""Dual-head network trained with online joint knowledge distillation.

The backbone feeds two heads: the original single-linear classifier and the
Feature Refiner. With the gate enabled the original head sees its input
through :func:`~lowdata.tensor.gradient_gate`, so it fits to the backbone
without shaping it. At inference only backbone + original head run.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import tensor as T
from .backbone import Backbone, BackboneConfig, build_backbone
from .layers import InitSpec, Linear, Module, count_parameters, softmax_cross_entropy
from .refiner import FeatureRefinerConfig, FeatureRefinerHead, build_feature_refiner
from .tensor import Tensor

CHECKPOINT_VERSION = 1

HEAD_VARIANTS = (
    "baseline",
    "fr_ojkd",
    "fr_no_gate",
    "fr_no_layernorm",
    "fr_reduce_only",
    "fr_square_linear_only",
)
_K_VARIANT = re.compile(r"fr_k(\d+)")


class BaselineNetwork(Module):
    """Backbone + single linear head; the comparator with no refiner and no gate."""

    head_names = ("original",)

    def __init__(self, backbone: Backbone, original_head: Linear):
        self.backbone = backbone
        self.original_head = original_head

    def forward_train(self, x) -> tuple[Tensor, ...]:
        return (self.original_head(self.backbone(T.as_tensor(x))),)

    def loss(self, logits: tuple[Tensor, ...], labels) -> Tensor:
        return softmax_cross_entropy(logits[0], labels)

    def forward_infer(self, x) -> Tensor:
        return self.original_head(self.backbone(T.as_tensor(x)))

    def forward(self, x) -> Tensor:
        return self.forward_infer(x)

    def inference_modules(self) -> list[Module]:
        return [self.backbone, self.original_head]


class DualHeadNetwork(Module):
    head_names = ("original", "fr")

    def __init__(
        self,
        backbone: Backbone,
        original_head: Linear,
        fr_head: FeatureRefinerHead,
        gate_enabled: bool = True,
        original_weight: float = 1.0,
        fr_weight: float = 1.0,
    ):
        self.backbone = backbone
        self.original_head = original_head
        self.fr_head = fr_head
        self.gate_enabled = gate_enabled
        self.original_weight = original_weight
        self.fr_weight = fr_weight

    def set_gate(self, enabled: bool) -> None:
        self.gate_enabled = bool(enabled)

    def forward_train(self, x) -> tuple[Tensor, Tensor]:
        features = self.backbone(T.as_tensor(x))
        gated = T.gradient_gate(features) if self.gate_enabled else features
        return self.original_head(gated), self.fr_head(features)

    def loss(self, logits: tuple[Tensor, Tensor], labels) -> Tensor:
        return ojkd_loss(logits[0], logits[1], labels, self.original_weight, self.fr_weight)

    def forward_infer(self, x) -> Tensor:
        return self.original_head(self.backbone(T.as_tensor(x)))

    def forward(self, x) -> Tensor:
        return self.forward_infer(x)

    def inference_modules(self) -> list[Module]:
        return [self.backbone, self.original_head]


def ojkd_loss(logits_original: Tensor, logits_fr: Tensor, labels, original_weight: float = 1.0, fr_weight: float = 1.0) -> Tensor:
    """Sum of the two heads' cross-entropies (unit weights by default)."""
    lo = softmax_cross_entropy(logits_original, labels)
    lf = softmax_cross_entropy(logits_fr, labels)
    if original_weight != 1.0:
        lo = lo * original_weight
    if fr_weight != 1.0:
        lf = lf * fr_weight
    return lo + lf


def inference_parameter_count(net: BaselineNetwork | DualHeadNetwork) -> int:
    return sum(count_parameters(m) for m in net.inference_modules())


def parse_head_variant(variant: str) -> tuple[str, bool, int]:
    """Map a head-variant name to (refiner variant, gate flag, k)."""
    if variant == "baseline":
        return "", False, 0
    if variant == "fr_ojkd":
        return "full", True, 1
    if variant == "fr_no_gate":
        return "full", False, 1
    m = _K_VARIANT.fullmatch(variant)
    if m:
        k = int(m.group(1))
        if k < 1:
            raise ValueError(f"{variant}: k must be >= 1")
        return "k_nonlinear_layers", True, k
    if variant in HEAD_VARIANTS:
        return variant[len("fr_"):], True, 1
    raise ValueError(f"unknown head variant {variant!r}; expected one of {HEAD_VARIANTS} or fr_k<N>")


def build_model(
    variant: str,
    backbone_config: BackboneConfig,
    num_classes: int,
    d_frf: int = 64,
    init: InitSpec | None = None,
    second_relu: bool = False,
) -> BaselineNetwork | DualHeadNetwork:
    """Build a fresh network; parameters are drawn backbone first, then heads."""
    init = init or InitSpec()
    rng = init.rng()
    fr_variant, gate, k = parse_head_variant(variant)
    backbone = build_backbone(backbone_config, init, rng)
    original = Linear(backbone_config.d_bbf, num_classes, rng, init.scheme)
    if not fr_variant:
        return BaselineNetwork(backbone, original)
    fr_cfg = FeatureRefinerConfig(
        d_bbf=backbone_config.d_bbf,
        d_frf=d_frf,
        num_classes=num_classes,
        variant=fr_variant,
        k=k,
        second_relu=second_relu,
    )
    return DualHeadNetwork(backbone, original, build_feature_refiner(fr_cfg, init, rng), gate_enabled=gate)


# -- checkpoints ------------------------------------------------------------


def state_hash(net: Module) -> str:
    """SHA-256 over parameter and buffer names, dtypes, shapes and bytes."""
    h = hashlib.sha256()
    for name, arr in sorted(net.state_dict().items()):
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def _meta(net: Module, config_echo: dict | None) -> dict:
    meta = {
        "version": CHECKPOINT_VERSION,
        "class": type(net).__name__,
        "training": net.training,
        "backbone": asdict(net.backbone.config),
        "num_classes": net.original_head.d_out,
        "config": config_echo or {},
    }
    if isinstance(net, DualHeadNetwork):
        meta["gate_enabled"] = net.gate_enabled
        meta["fr_head"] = asdict(net.fr_head.config)
    return meta


def save_checkpoint(net: Module, path: str | Path, config_echo: dict | None = None) -> Path:
    """Write named tensors plus a JSON metadata record to an ``.npz`` archive."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"state/{k}": v for k, v in net.state_dict().items()}
    meta = json.dumps(_meta(net, config_echo), sort_keys=True)
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(meta), **arrays)
    return path


def read_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        state = {k[len("state/"):]: z[k] for k in z.files if k.startswith("state/")}
    return state, meta


def load_checkpoint(path: str | Path) -> BaselineNetwork | DualHeadNetwork:
    """Rebuild the network described by a checkpoint and restore its state and mode."""
    state, meta = read_checkpoint(path)
    bcfg = BackboneConfig(**meta["backbone"])
    backbone = build_backbone(bcfg, InitSpec("zeros"))
    original = Linear(bcfg.d_bbf, meta["num_classes"], np.random.default_rng(0), "zeros")
    if meta["class"] == "DualHeadNetwork":
        fr = build_feature_refiner(FeatureRefinerConfig(**meta["fr_head"]), InitSpec("zeros"))
        net: Module = DualHeadNetwork(backbone, original, fr, gate_enabled=meta["gate_enabled"])
    else:
        net = BaselineNetwork(backbone, original)
    net.load_state_dict(state)
    net.train(meta["training"])
    return net
