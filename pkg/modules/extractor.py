"""
Texture Extractor Module
Three-stage convolutional pyramid emitting 4x, 2x and 1x texture features,
plus construction of the pipeline inputs (upsampled LR, Ref, degraded Ref)
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from . import numerics as K
from .autodiff import Node, NodeLike
from .errors import DimensionError

logger = logging.getLogger(__name__)

DEFAULT_CHANNELS = (16, 32, 64)
SCALES = (4, 2, 1)


def he_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


@dataclass
class ConvLayer:
    """Square convolution with 'same' padding"""
    weight: Node
    bias: Node

    @classmethod
    def init(cls, rng: np.random.Generator, cin: int, cout: int, k: int = 3,
             zero: bool = False) -> "ConvLayer":
        shape = (cout, cin, k, k)
        w = np.zeros(shape, dtype=np.float32) if zero else he_uniform(rng, shape, cin * k * k)
        return cls(ad.parameter(w), ad.parameter(np.zeros(cout, dtype=np.float32)))

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    def __call__(self, x: NodeLike) -> Node:
        return ad.conv2d(x, self.weight, self.bias, stride=1, pad=self.kernel // 2)

    def named_parameters(self, prefix: str) -> Dict[str, Node]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


@dataclass
class LinearLayer:
    weight: Node
    bias: Node

    def __call__(self, x: NodeLike) -> Node:
        return ad.linear(x, self.weight, self.bias)

    def named_parameters(self, prefix: str) -> Dict[str, Node]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


@dataclass
class ExtractorParams:
    """
    Three stages of conv3x3 + relu + conv3x3 + relu

    Stage outputs have (c4, c2, c1) channels; a 2x average pool sits
    between consecutive stages.
    """
    stages: List[Tuple[ConvLayer, ConvLayer]]

    @classmethod
    def init(cls, rng: np.random.Generator, in_channels: int = 1,
             channels: Sequence[int] = DEFAULT_CHANNELS, zero: bool = False) -> "ExtractorParams":
        if len(channels) != 3:
            raise DimensionError(f"extractor needs three stage widths, got {tuple(channels)}")
        stages = []
        cin = in_channels
        for cout in channels:
            stages.append((ConvLayer.init(rng, cin, cout, 3, zero), ConvLayer.init(rng, cout, cout, 3, zero)))
            cin = cout
        return cls(stages)

    @property
    def channels(self) -> Tuple[int, int, int]:
        return tuple(second.weight.shape[0] for _, second in self.stages)

    @property
    def in_channels(self) -> int:
        return self.stages[0][0].weight.shape[1]

    def named_parameters(self, prefix: str = "extractor") -> Dict[str, Node]:
        params = {}
        for i, (first, second) in enumerate(self.stages, start=1):
            params.update(first.named_parameters(f"{prefix}.stage{i}.conv1"))
            params.update(second.named_parameters(f"{prefix}.stage{i}.conv2"))
        return params


@dataclass
class FeaturePyramid:
    """Texture features at 4x (full HR size), 2x and 1x scale"""
    f4: Node
    f2: Node
    f1: Node

    def at(self, scale: int) -> Node:
        if scale not in SCALES:
            raise ValueError(f"Unsupported scale: {scale}")
        return {4: self.f4, 2: self.f2, 1: self.f1}[scale]

    def detached(self) -> "FeaturePyramid":
        return FeaturePyramid(ad.stop_gradient(self.f4), ad.stop_gradient(self.f2), ad.stop_gradient(self.f1))


def run_stage(params: ExtractorParams, index: int, x: NodeLike) -> Node:
    """Apply stage `index` (0-based) without pooling"""
    first, second = params.stages[index]
    return ad.relu(second(ad.relu(first(x))))


def extract_pyramid(img: NodeLike, params: ExtractorParams) -> FeaturePyramid:
    """
    Run the shared extractor on one image

    Args:
        img: Image [C, H, W] with H, W divisible by 4
        params: Shared extractor weights

    Returns:
        FeaturePyramid with f4 [c4, H, W], f2 [c2, H/2, W/2], f1 [c1, H/4, W/4]
    """
    img = ad.as_node(img)
    if len(img.shape) != 3:
        raise DimensionError(f"extractor input must be [C, H, W], got {img.shape}")
    c, h, w = img.shape
    if h % 4 or w % 4:
        raise DimensionError(f"extractor input {h}x{w} is not divisible by 4")
    if c != params.in_channels:
        raise DimensionError(f"extractor expects {params.in_channels} channels, got {c}")

    f4 = run_stage(params, 0, img)
    f2 = run_stage(params, 1, ad.avg_pool2d(f4, 2))
    f1 = run_stage(params, 2, ad.avg_pool2d(f2, 2))
    return FeaturePyramid(f4, f2, f1)


def extract_batch(images: Sequence[NodeLike], params: ExtractorParams) -> List[FeaturePyramid]:
    """Independent pyramids for a list of images"""
    return [extract_pyramid(img, params) for img in images]


# --------------------------------------------------------------------------
# Pipeline inputs
# --------------------------------------------------------------------------

class PipelineInputs(NamedTuple):
    lr_up: np.ndarray
    ref: np.ndarray
    refdd: np.ndarray


def _check_divisible(img: np.ndarray, factor: int, what: str):
    if img.ndim != 3:
        raise DimensionError(f"{what} must be [C, H, W], got {img.shape}")
    if factor < 1 or img.shape[1] % factor or img.shape[2] % factor:
        raise DimensionError(f"{what} {img.shape[1]}x{img.shape[2]} is not divisible by {factor}")


def degrade(img, factor: int = 4) -> np.ndarray:
    """Bicubic down-then-up resampling by the same factor; output keeps input dims"""
    img = np.asarray(img, dtype=np.float64)
    _check_divisible(img, factor, "degrade input")
    _, h, w = img.shape
    low = K.resize(img, h // factor, w // factor, "bicubic")
    return K.resize(low, h, w, "bicubic")


def build_inputs(t2_lr, pd, factor: int = 4) -> PipelineInputs:
    """
    Build (I_LR_up, I_Ref, I_Ref_down_up) from the LR target-contrast image
    and the HR reference-contrast image
    """
    t2_lr = np.asarray(t2_lr, dtype=np.float64)
    pd = np.asarray(pd, dtype=np.float64)
    _check_divisible(pd, factor, "reference image")
    expected = (pd.shape[0], pd.shape[1] // factor, pd.shape[2] // factor)
    if t2_lr.shape != expected:
        raise DimensionError(f"LR image {t2_lr.shape} does not match reference {pd.shape} at factor {factor}")

    lr_up = K.resize(t2_lr, pd.shape[1], pd.shape[2], "bicubic")
    return PipelineInputs(lr_up=lr_up, ref=pd.copy(), refdd=degrade(pd, factor))
