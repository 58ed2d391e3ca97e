"""Network architectures: the CNN classifier and the upsampling generator.

The classifier is a reduced AlexNet-style stack (conv blocks + two FC
layers) whose last hidden layer doubles as the feature tap: its
activations feed both the feature-significance loss and the
activation-clustering defense. The generator grows a latent vector to an
image through nearest-neighbor interpolation + convolution stages (no
transposed convolutions, which leave checkerboard artifacts) and a final
sigmoid that bounds outputs to [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .params import ModelParams, schema_id

_ACTIVATIONS = {"relu": nn.ReLU, "tanh": nn.Tanh, "softplus": nn.Softplus}


@dataclass(frozen=True)
class ClassifierSpec:
    """Shape and layer plan for the classifier / discriminator network."""

    input_shape: tuple[int, int, int]  # (H, W, C)
    num_classes: int
    conv_channels: tuple[int, ...] = (16, 32, 64)
    feature_dim: int = 128  # width of the feature-tap layer
    activation: str = "relu"

    @property
    def arch_name(self) -> str:
        return "cnn" + "x".join(map(str, self.conv_channels)) + f"f{self.feature_dim}"

    def build(self) -> "Classifier":
        return Classifier(self)


class Classifier(nn.Module):
    """Conv blocks -> FC feature tap -> logits."""

    def __init__(self, spec: ClassifierSpec):
        super().__init__()
        self.spec = spec
        act = _ACTIVATIONS[spec.activation]
        h, w, c = spec.input_shape
        blocks: list[nn.Module] = []
        in_ch = c
        for out_ch in spec.conv_channels:
            blocks += [nn.Conv2d(in_ch, out_ch, 3, padding=1), act()]
            if min(h, w) >= 4:
                blocks.append(nn.MaxPool2d(2))
                h, w = h // 2, w // 2
            in_ch = out_ch
        self.features_conv = nn.Sequential(*blocks)
        self.flat_dim = in_ch * h * w
        self.fc_hidden = nn.Linear(self.flat_dim, spec.feature_dim)
        self.fc_act = act()
        self.fc_out = nn.Linear(spec.feature_dim, spec.num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_with_features(x)[0]

    def forward_with_features(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (logits, feature-tap activations)."""
        z = self.features_conv(x)
        z = z.flatten(1)
        feats = self.fc_act(self.fc_hidden(z))
        return self.fc_out(feats), feats


@dataclass(frozen=True)
class GeneratorSpec:
    """Latent -> image network built from interpolation-upsample stages."""

    output_shape: tuple[int, int, int]  # (H, W, C)
    latent_dim: int = 100
    base_channels: int = 32
    stages: int = 3
    activation: str = "relu"

    @property
    def arch_name(self) -> str:
        return f"gen{self.base_channels}s{self.stages}z{self.latent_dim}"

    def build(self) -> "Generator":
        return Generator(self)


class Generator(nn.Module):
    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        act = _ACTIVATIONS[spec.activation]
        h, w, c = spec.output_shape
        # Successive halving of the output grid gives the per-stage sizes,
        # so any (H, W) is hit exactly without transposed convolutions.
        sizes = [(max(1, math.ceil(h / 2**k)), max(1, math.ceil(w / 2**k)))
                 for k in range(spec.stages, -1, -1)]
        self.start_size = sizes[0]
        self.stage_sizes = sizes[1:]
        ch = spec.base_channels * 2  # widest at the coarsest grid
        self.fc = nn.Linear(spec.latent_dim, ch * self.start_size[0] * self.start_size[1])
        stages = []
        for _ in range(spec.stages):
            out_ch = max(spec.base_channels // 2, ch // 2)
            stages.append(
                nn.Sequential(
                    nn.Conv2d(ch, out_ch, 3, padding=1),
                    nn.GroupNorm(1, out_ch),
                    act(),
                )
            )
            ch = out_ch
        self.stages = nn.ModuleList(stages)
        self.to_image = nn.Conv2d(ch, c, 3, padding=1)
        self.start_channels = spec.base_channels * 2

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        x = self.fc(z).view(z.shape[0], self.start_channels, *self.start_size)
        for size, stage in zip(self.stage_sizes, self.stages):
            x = nn.functional.interpolate(x, size=size, mode="nearest")
            x = stage(x)
        return torch.sigmoid(self.to_image(x))


# ---------------------------------------------------------------------------
# parameter <-> module bridging
# ---------------------------------------------------------------------------


def module_schema(spec: ClassifierSpec | GeneratorSpec) -> str:
    module = spec.build()
    shapes = [tuple(t.shape) for t in module.state_dict().values()]
    return schema_id(spec.arch_name, shapes)


def params_from_module(module: nn.Module, schema: str) -> ModelParams:
    arrays = [t.detach().cpu().numpy().copy() for t in module.state_dict().values()]
    return ModelParams(arrays, schema)


def load_into_module(module: nn.Module, params: ModelParams) -> nn.Module:
    state = module.state_dict()
    if len(state) != len(params.arrays):
        raise ValueError(
            f"parameter count mismatch: module has {len(state)}, params {len(params.arrays)}"
        )
    new_state = {
        key: torch.from_numpy(arr.copy()).to(dtype=state[key].dtype)
        for key, arr in zip(state.keys(), params.arrays)
    }
    module.load_state_dict(new_state)
    return module


def init_params(
    spec: ClassifierSpec | GeneratorSpec, seed: int = 0
) -> ModelParams:
    """Deterministic fresh initialization for an architecture."""
    torch.manual_seed(seed)
    module = spec.build()
    return params_from_module(module, module_schema(spec))


def build_with_params(spec: ClassifierSpec | GeneratorSpec, params: ModelParams) -> nn.Module:
    return load_into_module(spec.build(), params)


# ---------------------------------------------------------------------------
# inference helpers
# ---------------------------------------------------------------------------


def to_nchw(batch: np.ndarray) -> torch.Tensor:
    """(n, H, W, C) float array -> NCHW float32 tensor."""
    arr = np.ascontiguousarray(np.transpose(batch, (0, 3, 1, 2)), dtype=np.float32)
    return torch.from_numpy(arr)


def to_nhwc(batch: torch.Tensor) -> np.ndarray:
    return batch.detach().cpu().numpy().transpose(0, 2, 3, 1)


@torch.no_grad()
def forward_classify(
    spec: ClassifierSpec, params: ModelParams, batch: np.ndarray, batch_size: int = 256
) -> tuple[np.ndarray, np.ndarray]:
    """Softmax rows and feature-tap activations for an image batch."""
    expected = tuple(batch.shape[1:])
    if expected != spec.input_shape:
        raise ValueError(f"batch shape {expected} does not match spec {spec.input_shape}")
    model = build_with_params(spec, params)
    model.eval()
    probs, feats = [], []
    for start in range(0, len(batch), batch_size):
        x = to_nchw(batch[start : start + batch_size])
        logits, f = model.forward_with_features(x)
        probs.append(torch.softmax(logits, dim=1).numpy())
        feats.append(f.numpy())
    return np.concatenate(probs), np.concatenate(feats)


@torch.no_grad()
def generate(spec: GeneratorSpec, gen_params: ModelParams, latents: np.ndarray) -> np.ndarray:
    """Decode latent vectors to an (n, H, W, C) image batch in [0, 1]."""
    if latents.ndim != 2 or latents.shape[1] != spec.latent_dim:
        raise ValueError(f"latents must be (n, {spec.latent_dim}), got {latents.shape}")
    model = build_with_params(spec, gen_params)
    model.eval()
    out = model(torch.from_numpy(np.ascontiguousarray(latents, dtype=np.float32)))
    return to_nhwc(out)


@torch.no_grad()
def predict_labels(
    spec: ClassifierSpec, params: ModelParams, batch: np.ndarray, batch_size: int = 512
) -> np.ndarray:
    model = build_with_params(spec, params)
    model.eval()
    out = []
    for start in range(0, len(batch), batch_size):
        x = to_nchw(batch[start : start + batch_size])
        out.append(model(x).argmax(dim=1).numpy())
    return np.concatenate(out)
