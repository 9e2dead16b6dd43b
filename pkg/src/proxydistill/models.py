"""Model zoo: extractors, projectors, classifier heads, and their composition.

Everything trainable derives from ParamModule, which adds three things on top
of nn.Module: a canonical name, a serializable architecture spec (enough to
rebuild the module from scratch), and an explicit frozen flag that is enforced
at composition boundaries rather than silently assumed.

Initialization is driven by an explicit torch.Generator so that a given seed
always produces bit-identical parameters regardless of global RNG state:
weights are He-style normal with std sqrt(2/fan_in), biases start at zero,
norm layers at identity.

No module in this file carries running statistics (GroupNorm/LayerNorm only),
so the full state of any model is exactly its parameter tensors.
"""

from __future__ import annotations

import hashlib
import math
from typing import Iterable

import numpy as np
import torch
from torch import nn

from .errors import (
    DimensionMismatchError,
    FrozenViolationError,
    ShapeMismatchError,
    UnknownSpecError,
)
from .utils import make_generator

# ---------------------------------------------------------------------------
# base class and helpers


class ParamModule(nn.Module):
    """nn.Module with a name, a rebuildable spec, and a frozen flag."""

    def __init__(self, name: str, spec: dict):
        super().__init__()
        self.name = name
        self.spec = dict(spec)
        self._frozen = False

    @property
    def frozen(self) -> bool:
        return self._frozen

    def freeze(self) -> "ParamModule":
        for p in self.parameters():
            p.requires_grad_(False)
        self._frozen = True
        return self

    def unfreeze(self) -> "ParamModule":
        for p in self.parameters():
            p.requires_grad_(True)
        self._frozen = False
        return self

    def param_items(self) -> list[tuple[str, torch.Tensor]]:
        """Parameters in canonical (lexicographic name) order."""
        return sorted(self.named_parameters(), key=lambda kv: kv[0])

    def num_params(self) -> int:
        return sum(p.numel() for p in self.parameters())


def _init_layer(layer: nn.Module, generator: torch.Generator) -> None:
    """He-normal weight, zero bias, via the provided generator."""
    weight = layer.weight
    fan_in = weight.shape[1:].numel()
    std = math.sqrt(2.0 / fan_in)
    with torch.no_grad():
        weight.normal_(0.0, std, generator=generator)
        if getattr(layer, "bias", None) is not None:
            layer.bias.zero_()


def param_checksum(module: nn.Module) -> str:
    """sha256 digest over (name, shape, dtype, little-endian bytes) of every
    parameter, in lexicographic name order.

    Two modules agree on this digest iff they have identical parameter sets;
    there are no buffers anywhere in this package, so the digest captures the
    full model state.
    """
    h = hashlib.sha256()
    for name, p in sorted(module.named_parameters(), key=lambda kv: kv[0]):
        arr = p.detach().cpu().numpy()
        arr = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"))
        h.update(name.encode("utf-8"))
        h.update(repr(tuple(arr.shape)).encode())
        h.update(str(arr.dtype).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def _resolve_generator(generator: torch.Generator | None) -> torch.Generator:
    # Construction always consumes from an explicit generator; modules whose
    # params are about to be overwritten (checkpoint loads) pass None.
    return generator if generator is not None else make_generator("init-default")


# ---------------------------------------------------------------------------
# classifier head


class ClassifierHead(ParamModule):
    """Single affine map from feature space to class logits."""

    def __init__(self, feature_dim: int, num_classes: int,
                 generator: torch.Generator | None = None):
        if feature_dim < 1:
            raise DimensionMismatchError(f"feature_dim must be >= 1, got {feature_dim}")
        if num_classes < 2:
            raise DimensionMismatchError(f"num_classes must be >= 2, got {num_classes}")
        super().__init__("classifier_head", {
            "kind": "classifier_head",
            "feature_dim": feature_dim,
            "num_classes": num_classes,
        })
        gen = _resolve_generator(generator)
        self.linear = nn.Linear(feature_dim, num_classes)
        _init_layer(self.linear, gen)

    @property
    def in_dim(self) -> int:
        return self.spec["feature_dim"]

    @property
    def num_classes(self) -> int:
        return self.spec["num_classes"]

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.ndim != 2 or z.shape[1] != self.in_dim:
            raise DimensionMismatchError(
                f"head expects [B, {self.in_dim}] features, got {tuple(z.shape)}")
        return self.linear(z)


# ---------------------------------------------------------------------------
# extractors


class ConvExtractor(ParamModule):
    """Small conv net: (conv3x3 -> GroupNorm -> ReLU -> maxpool) stack,
    global average pool, then a linear embedding with ReLU."""

    def __init__(self, channels: Iterable[int], feature_dim: int,
                 in_channels: int = 3, norm_groups: int = 4,
                 generator: torch.Generator | None = None,
                 name: str = "conv_extractor"):
        channels = [int(c) for c in channels]
        super().__init__(name, {
            "kind": "conv_extractor",
            "channels": channels,
            "feature_dim": feature_dim,
            "in_channels": in_channels,
            "norm_groups": norm_groups,
        })
        gen = _resolve_generator(generator)
        blocks = []
        prev = in_channels
        for c in channels:
            conv = nn.Conv2d(prev, c, kernel_size=3, padding=1)
            _init_layer(conv, gen)
            groups = norm_groups if c % norm_groups == 0 else 1
            blocks += [conv, nn.GroupNorm(groups, c), nn.ReLU(), nn.MaxPool2d(2)]
            prev = c
        self.blocks = nn.Sequential(*blocks)
        self.embed = nn.Linear(prev, feature_dim)
        _init_layer(self.embed, gen)

    @property
    def out_dim(self) -> int:
        return self.spec["feature_dim"]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.spec["in_channels"]:
            raise DimensionMismatchError(
                f"extractor expects [B, {self.spec['in_channels']}, H, W], "
                f"got {tuple(x.shape)}")
        h = self.blocks(x)
        h = h.mean(dim=(2, 3))
        return torch.relu(self.embed(h))


class MLPExtractor(ParamModule):
    """Flatten + MLP feature extractor.

    tanh by default: smooth activations keep finite-difference gradient
    comparisons clean, which is what the tiny instances of this class are for.
    """

    _ACTS = {"tanh": torch.tanh, "relu": torch.relu}

    def __init__(self, in_dim: int, feature_dim: int, hidden: Iterable[int] = (),
                 activation: str = "tanh",
                 generator: torch.Generator | None = None):
        if activation not in self._ACTS:
            raise UnknownSpecError(f"unknown activation {activation!r}")
        hidden = [int(h) for h in hidden]
        super().__init__("mlp_extractor", {
            "kind": "mlp_extractor",
            "in_dim": in_dim,
            "feature_dim": feature_dim,
            "hidden": hidden,
            "activation": activation,
        })
        gen = _resolve_generator(generator)
        dims = [in_dim] + hidden + [feature_dim]
        layers = []
        for a, b in zip(dims[:-1], dims[1:]):
            lin = nn.Linear(a, b)
            _init_layer(lin, gen)
            layers.append(lin)
        self.layers = nn.ModuleList(layers)

    @property
    def out_dim(self) -> int:
        return self.spec["feature_dim"]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = x.reshape(x.shape[0], -1)
        if h.shape[1] != self.spec["in_dim"]:
            raise DimensionMismatchError(
                f"mlp extractor expects {self.spec['in_dim']} input features, "
                f"got {h.shape[1]}")
        act = self._ACTS[self.spec["activation"]]
        for layer in self.layers:
            h = act(layer(h))
        return h


class FlattenExtractor(ParamModule):
    """Parameter-free extractor: raw pixels as the feature vector."""

    def __init__(self, dim: int):
        super().__init__("flatten_extractor", {"kind": "flatten_extractor", "dim": dim})

    @property
    def out_dim(self) -> int:
        return self.spec["dim"]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = x.reshape(x.shape[0], -1)
        if h.shape[1] != self.spec["dim"]:
            raise DimensionMismatchError(
                f"flatten extractor configured for {self.spec['dim']} values, "
                f"got {h.shape[1]}")
        return h


# ---------------------------------------------------------------------------
# projectors

PROJECTOR_VARIANTS = ("teacher-block", "conv-3x3", "conv-1-3-1",
                      "attention-block", "linear")


class IdentityProjector(ParamModule):
    """Pass-through projector (used by the plain linear-probe pipeline)."""

    def __init__(self, dim: int):
        super().__init__("projector", {"kind": "identity_projector", "dim": dim})

    @property
    def in_dim(self) -> int:
        return self.spec["dim"]

    @property
    def out_dim(self) -> int:
        return self.spec["dim"]

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        _check_feat(z, self.in_dim, "identity projector")
        return z


class BottleneckAdapterProjector(ParamModule):
    """Dim-preserving residual bottleneck: z + W2 relu(W1 z)."""

    def __init__(self, dim: int, hidden: int | None = None,
                 generator: torch.Generator | None = None):
        hidden = hidden if hidden is not None else max(4, dim // 4)
        super().__init__("projector", {
            "kind": "bottleneck_adapter",
            "dim": dim,
            "hidden": hidden,
        })
        gen = _resolve_generator(generator)
        self.down = nn.Linear(dim, hidden)
        self.up = nn.Linear(hidden, dim)
        _init_layer(self.down, gen)
        _init_layer(self.up, gen)

    @property
    def in_dim(self) -> int:
        return self.spec["dim"]

    @property
    def out_dim(self) -> int:
        return self.spec["dim"]

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        _check_feat(z, self.in_dim, "bottleneck adapter")
        return z + self.up(torch.relu(self.down(z)))


def _check_feat(z: torch.Tensor, dim: int, who: str) -> None:
    if z.ndim != 2 or z.shape[1] != dim:
        raise DimensionMismatchError(
            f"{who} expects [B, {dim}] features, got {tuple(z.shape)}")


class _ResidualMLPCore(nn.Module):
    """z + W2 relu(W1 z), full-width."""

    def __init__(self, dim: int, gen: torch.Generator):
        super().__init__()
        self.lin1 = nn.Linear(dim, dim)
        self.lin2 = nn.Linear(dim, dim)
        _init_layer(self.lin1, gen)
        _init_layer(self.lin2, gen)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return z + self.lin2(torch.relu(self.lin1(z)))


class _Conv1dCore(nn.Module):
    """Treats the feature vector as a 1-channel signal and runs conv stacks
    over it; kernel_sizes picks the layer pattern."""

    def __init__(self, dim: int, kernel_sizes: tuple[int, ...], width: int,
                 gen: torch.Generator):
        super().__init__()
        layers: list[nn.Module] = []
        prev = 1
        for i, k in enumerate(kernel_sizes):
            last = i == len(kernel_sizes) - 1
            out = 1 if last else width
            conv = nn.Conv1d(prev, out, kernel_size=k, padding=k // 2)
            _init_layer(conv, gen)
            layers.append(conv)
            if not last:
                layers += [nn.GroupNorm(1, out), nn.ReLU()]
            prev = out
        self.net = nn.Sequential(*layers)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.net(z.unsqueeze(1)).squeeze(1)


def _token_split(dim: int, max_tokens: int = 8) -> tuple[int, int]:
    """Largest divisor of dim that is <= max_tokens, as (tokens, embed)."""
    for t in range(max_tokens, 0, -1):
        if dim % t == 0:
            return t, dim // t
    return 1, dim


class _AttentionCore(nn.Module):
    """Pre-LN transformer block, single head, over a tokenized feature vector.

    Attention is written out by hand (matmul + softmax) so it runs in any
    float dtype and stays deterministic.
    """

    def __init__(self, dim: int, gen: torch.Generator):
        super().__init__()
        self.tokens, self.embed = _token_split(dim)
        e = self.embed
        self.ln1 = nn.LayerNorm(e)
        self.ln2 = nn.LayerNorm(e)
        self.q = nn.Linear(e, e)
        self.k = nn.Linear(e, e)
        self.v = nn.Linear(e, e)
        self.proj = nn.Linear(e, e)
        self.fc1 = nn.Linear(e, 2 * e)
        self.fc2 = nn.Linear(2 * e, e)
        for lin in (self.q, self.k, self.v, self.proj, self.fc1, self.fc2):
            _init_layer(lin, gen)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        b = z.shape[0]
        x = z.reshape(b, self.tokens, self.embed)
        h = self.ln1(x)
        q, k, v = self.q(h), self.k(h), self.v(h)
        scores = q @ k.transpose(1, 2) / math.sqrt(self.embed)
        attn = torch.softmax(scores, dim=-1)
        x = x + self.proj(attn @ v)
        h = self.ln2(x)
        x = x + self.fc2(torch.relu(self.fc1(h)))
        return x.reshape(b, -1)


class ProjectorStack(ParamModule):
    """A dim-preserving core block plus, when the student feature space is
    narrower than the backbone's, a final linear adapter down to it."""

    def __init__(self, variant: str, in_dim: int, out_dim: int,
                 generator: torch.Generator | None = None):
        if variant not in PROJECTOR_VARIANTS:
            raise UnknownSpecError(
                f"unknown projector variant {variant!r}; "
                f"expected one of {PROJECTOR_VARIANTS}")
        super().__init__("projector", {
            "kind": "projector_stack",
            "variant": variant,
            "in_dim": in_dim,
            "out_dim": out_dim,
        })
        gen = _resolve_generator(generator)
        if variant == "linear":
            self.core = nn.Linear(in_dim, out_dim)
            _init_layer(self.core, gen)
            self.adapter = None
        else:
            if variant == "teacher-block":
                self.core = _ResidualMLPCore(in_dim, gen)
            elif variant == "conv-3x3":
                self.core = _Conv1dCore(in_dim, (3, 3), width=8, gen=gen)
            elif variant == "conv-1-3-1":
                self.core = _Conv1dCore(in_dim, (1, 3, 1), width=8, gen=gen)
            elif variant == "attention-block":
                self.core = _AttentionCore(in_dim, gen)
            if in_dim == out_dim:
                self.adapter = None
            else:
                self.adapter = nn.Linear(in_dim, out_dim)
                _init_layer(self.adapter, gen)

    @property
    def in_dim(self) -> int:
        return self.spec["in_dim"]

    @property
    def out_dim(self) -> int:
        return self.spec["out_dim"]

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        _check_feat(z, self.in_dim, f"{self.spec['variant']} projector")
        h = self.core(z)
        if self.adapter is not None:
            h = self.adapter(h)
        return h


def build_projector(variant: str, in_dim: int, out_dim: int,
                    generator: torch.Generator | None = None) -> ProjectorStack:
    """Construct one of the named projector families mapping in_dim->out_dim."""
    return ProjectorStack(variant, in_dim, out_dim, generator=generator)


# ---------------------------------------------------------------------------
# architecture registry

ARCH_SPECS: dict[str, dict] = {
    # backbone trained on the broad domain
    "cnn_teacher": {"channels": [24, 48, 96], "feature_dim": 64},
    # compact models, roughly 1/4 and 1/8 the backbone's parameter count
    "cnn_small": {"channels": [16, 32, 32], "feature_dim": 32},
    "cnn_tiny": {"channels": [12, 20, 24], "feature_dim": 32},
}


def build_extractor(arch_id: str, generator: torch.Generator | None = None,
                    in_channels: int = 3) -> ConvExtractor:
    if arch_id not in ARCH_SPECS:
        raise UnknownSpecError(
            f"unknown architecture id {arch_id!r}; expected one of "
            f"{sorted(ARCH_SPECS)}")
    spec = ARCH_SPECS[arch_id]
    ext = ConvExtractor(spec["channels"], spec["feature_dim"],
                        in_channels=in_channels, generator=generator)
    ext.spec["arch_id"] = arch_id
    return ext


# ---------------------------------------------------------------------------
# composition


class TeacherPipeline(nn.Module):
    """Frozen extractor -> trainable projector -> trainable head.

    The extractor must already be frozen when the pipeline is assembled; the
    other two stay trainable until the caller freezes the whole thing.
    """

    def __init__(self, extractor: ParamModule, projector: ParamModule,
                 head: ClassifierHead):
        super().__init__()
        if not extractor.frozen:
            raise FrozenViolationError(
                "teacher pipeline requires a frozen extractor; call .freeze() "
                "on it first")
        if extractor.out_dim != projector.in_dim:
            raise DimensionMismatchError(
                f"extractor out_dim {extractor.out_dim} != projector in_dim "
                f"{projector.in_dim}")
        if projector.out_dim != head.in_dim:
            raise DimensionMismatchError(
                f"projector out_dim {projector.out_dim} != head in_dim "
                f"{head.in_dim}")
        self.extractor = extractor
        self.projector = projector
        self.head = head

    @property
    def num_classes(self) -> int:
        return self.head.num_classes

    @property
    def feature_dim(self) -> int:
        return self.projector.out_dim

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.projector(self.extractor(x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))

    def trainable_parameters(self) -> list[torch.Tensor]:
        return [p for p in list(self.projector.parameters())
                + list(self.head.parameters()) if p.requires_grad]

    def module_dict(self) -> dict[str, ParamModule]:
        return {"extractor": self.extractor, "projector": self.projector,
                "head": self.head}


def compose_teacher(extractor: ParamModule, projector: ParamModule,
                    head: ClassifierHead) -> TeacherPipeline:
    return TeacherPipeline(extractor, projector, head)


class StudentModel(nn.Module):
    """Compact extractor + classifier head, trained end to end."""

    def __init__(self, extractor: ParamModule, head: ClassifierHead):
        super().__init__()
        if extractor.out_dim != head.in_dim:
            raise DimensionMismatchError(
                f"student extractor out_dim {extractor.out_dim} != head in_dim "
                f"{head.in_dim}")
        self.extractor = extractor
        self.head = head

    @property
    def num_classes(self) -> int:
        return self.head.num_classes

    @property
    def feature_dim(self) -> int:
        return self.extractor.out_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.extractor(x))

    def module_dict(self) -> dict[str, ParamModule]:
        return {"extractor": self.extractor, "head": self.head}


def build_student(arch_id: str, num_classes: int, seed: int) -> StudentModel:
    ext = build_extractor(arch_id, make_generator(seed, "student-extractor"))
    head = ClassifierHead(ext.out_dim, num_classes,
                          make_generator(seed, "student-head"))
    return StudentModel(ext, head)


def transfer_classifier(src: ClassifierHead, dst: ClassifierHead) -> ClassifierHead:
    """Copy head weights src -> dst in place; shapes must match exactly."""
    if (src.in_dim, src.num_classes) != (dst.in_dim, dst.num_classes):
        raise ShapeMismatchError(
            f"cannot transfer classifier [{src.num_classes} x {src.in_dim}] "
            f"onto [{dst.num_classes} x {dst.in_dim}]")
    with torch.no_grad():
        dst.linear.weight.copy_(src.linear.weight)
        dst.linear.bias.copy_(src.linear.bias)
    return dst
