"""
Fusion Module
Cross-scale fusion of the aligned features, soft-weight modulation and the
reconstruction decoder, plus the FASRModel container and the full forward pass
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .alignment import (AlignedPyramid, AlignmentConfig, AlignmentParams, MAResult, MatchIndex,
                        SAResult, SoftWeightVector, fold_weights, ma_align, sa_align)
from .autodiff import Node, NodeLike
from .errors import DimensionError
from .extractor import (DEFAULT_CHANNELS, SCALES, ConvLayer, ExtractorParams, FeaturePyramid,
                        PipelineInputs, build_inputs, extract_batch)

logger = logging.getLogger(__name__)

FUSE_ORDER = (1, 2, 4)
RESIDUAL_BLOCKS = 2


@dataclass
class ModelConfig:
    in_channels: int = 1
    channels: Tuple[int, int, int] = DEFAULT_CHANNELS
    embed_dim: int = 64
    patch: int = 3
    stride: int = 1
    pad: int = 1
    normalize_embeddings: bool = True
    match_temperature: float = 0.05
    decoder_channels: int = 32
    scale: int = 4
    use_sa: bool = True
    use_ma: bool = True
    use_chpf: bool = True
    use_ca: bool = False

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.scale not in (2, 4):
            raise ValueError(f"Unsupported scale: {self.scale}")

    def alignment_config(self) -> AlignmentConfig:
        return AlignmentConfig(self.patch, self.stride, self.pad, self.normalize_embeddings,
                               self.match_temperature or None)

    def fin_channels(self) -> Dict[int, int]:
        return {n: 2 * c for n, c in zip(SCALES, self.channels)}


@dataclass
class FusionParams:
    """Per output scale: a 1x1 conv over all resampled scales, then residual blocks"""
    fuse: Dict[int, ConvLayer]
    blocks: Dict[int, List[ConvLayer]]

    @classmethod
    def init(cls, rng: np.random.Generator, fin_channels: Dict[int, int]) -> "FusionParams":
        total = sum(fin_channels.values())
        fuse, blocks = {}, {}
        for n in SCALES:
            c = fin_channels[n]
            fuse[n] = ConvLayer.init(rng, total, c, 1)
            blocks[n] = [ConvLayer.init(rng, c, c, 3) for _ in range(RESIDUAL_BLOCKS)]
        return cls(fuse, blocks)

    def named_parameters(self, prefix: str = "fusion") -> Dict[str, Node]:
        params = {}
        for n in SCALES:
            params.update(self.fuse[n].named_parameters(f"{prefix}.fuse{n}"))
            for i, block in enumerate(self.blocks[n], start=1):
                params.update(block.named_parameters(f"{prefix}.block{n}_{i}"))
        return params


@dataclass
class DecoderParams:
    """conv3x3 + relu layers followed by a zero-initialised conv3x3 to image channels"""
    layers: List[ConvLayer]
    out: ConvLayer

    @classmethod
    def init(cls, rng: np.random.Generator, in_channels: int, hidden: int, image_channels: int,
             depth: int = 3) -> "DecoderParams":
        layers = []
        cin = in_channels
        for _ in range(depth):
            layers.append(ConvLayer.init(rng, cin, hidden, 3))
            cin = hidden
        return cls(layers, ConvLayer.init(rng, cin, image_channels, 3, zero=True))

    def named_parameters(self, prefix: str = "decoder") -> Dict[str, Node]:
        params = {}
        for i, layer in enumerate(self.layers, start=1):
            params.update(layer.named_parameters(f"{prefix}.conv{i}"))
        params.update(self.out.named_parameters(f"{prefix}.out"))
        return params


# --------------------------------------------------------------------------
# CHPF operations
# --------------------------------------------------------------------------

def _spatial(x: Node) -> Tuple[int, int]:
    return tuple(x.shape[1:])


def _as_dict(pyramid) -> Dict[int, Node]:
    if isinstance(pyramid, AlignedPyramid):
        return {n: pyramid.at(n) for n in SCALES}
    return dict(pyramid)


def concat_aligned(fma, fsa) -> Dict[int, Node]:
    """F_in per scale: M-A channels first, then S-A channels"""
    fma, fsa = _as_dict(fma), _as_dict(fsa)
    fin = {}
    for n in SCALES:
        a, b = ad.as_node(fma[n]), ad.as_node(fsa[n])
        if _spatial(a) != _spatial(b):
            raise DimensionError(f"scale {n}: M-A {a.shape} and S-A {b.shape} differ spatially")
        fin[n] = ad.concat([a, b], axis=0)
    return fin


def fc_conv_fuse(fin: Dict[int, NodeLike], params: FusionParams) -> Dict[int, Node]:
    """Every output scale sees all three inputs, bilinearly resampled to its size"""
    fin = {n: ad.as_node(x) for n, x in fin.items()}
    fout = {}
    for n in SCALES:
        h, w = _spatial(fin[n])
        stacked = ad.concat([ad.resize(fin[m], h, w, "bilinear") for m in FUSE_ORDER], axis=0)
        x = params.fuse[n](stacked)
        for block in params.blocks[n]:
            x = ad.add(x, ad.relu(block(x)))
        fout[n] = x
    return fout


def combine_soft(ssa: Dict[int, SoftWeightVector], sma: Optional[SoftWeightVector],
                 dims: Optional[Dict[int, Tuple[int, int]]] = None) -> Dict[int, np.ndarray]:
    """
    S per scale = S_SA at that scale + S_MA, both spatialised to scale-n dims

    Missing terms (a disabled branch) count as zero. Dims default to the
    4x query grid scaled by n/4.
    """
    if dims is None:
        grid = sma.grid if sma is not None else next(iter(ssa.values())).grid
        dims = {n: (grid.gh * n // 4, grid.gw * n // 4) for n in SCALES}
    out = {}
    for n in SCALES:
        h, w = dims[n]
        s = np.zeros((1, h, w))
        if n in ssa:
            s = s + fold_weights(ssa[n], h, w)
        if sma is not None:
            s = s + fold_weights(sma, h, w)
        out[n] = s
    return out


def modulate(fout: Dict[int, NodeLike], s: Dict[int, np.ndarray]) -> Dict[int, Node]:
    """Scale every channel by the single-channel confidence map of its scale"""
    out = {}
    for n, f in fout.items():
        f = ad.as_node(f)
        weight = np.asarray(s[n], dtype=np.float64)
        if weight.shape != (1,) + _spatial(f):
            raise DimensionError(f"scale {n}: weight map {weight.shape} does not fit features {f.shape}")
        out[n] = ad.mul(f, weight)
    return out


def decode(f: Dict[int, NodeLike], q4: NodeLike, lr_up: NodeLike, params: DecoderParams) -> Node:
    """Reconstruct I_SR = clamp(lr_up + head(F4, up(F2), up(F1), Q4), -1, 1)"""
    lr_up = ad.as_node(lr_up)
    h, w = _spatial(lr_up)
    f4, q4 = ad.as_node(f[4]), ad.as_node(q4)
    if _spatial(f4) != (h, w) or _spatial(q4) != (h, w):
        raise DimensionError(f"decoder inputs {f4.shape}/{q4.shape} do not match image {lr_up.shape}")
    x = ad.concat([f4, ad.resize(f[2], h, w, "bilinear"), ad.resize(f[1], h, w, "bilinear"), q4], axis=0)
    for layer in params.layers:
        x = ad.relu(layer(x))
    return ad.clamp(ad.add(params.out(x), lr_up), -1.0, 1.0)


# --------------------------------------------------------------------------
# Model
# --------------------------------------------------------------------------

@dataclass
class FASRModel:
    config: ModelConfig
    extractor: ExtractorParams
    alignment: AlignmentParams
    fusion: FusionParams
    decoder: DecoderParams

    @classmethod
    def init(cls, config: Optional[ModelConfig] = None, seed: int = 0) -> "FASRModel":
        """
        Build a freshly initialised model

        Args:
            config: Architecture and toggles
            seed: Seed of the single generator used for every weight

        Returns:
            FASRModel whose forward pass starts at clamp(I_LR_up)
        """
        config = config or ModelConfig()
        rng = np.random.default_rng(seed)
        extractor = ExtractorParams.init(rng, config.in_channels, config.channels)
        alignment = AlignmentParams.init(rng, config.channels, config.embed_dim, config.alignment_config())
        fin = config.fin_channels()
        fusion = FusionParams.init(rng, fin)
        decoder_in = sum(fin.values()) + config.channels[0]
        decoder = DecoderParams.init(rng, decoder_in, config.decoder_channels, config.in_channels)
        model = cls(config, extractor, alignment, fusion, decoder)
        logger.info(f"Model initialised: {model.parameter_count()} parameters, seed {seed}")
        return model

    def named_parameters(self) -> Dict[str, Node]:
        params = {}
        params.update(self.extractor.named_parameters())
        params.update(self.alignment.named_parameters())
        params.update(self.fusion.named_parameters())
        params.update(self.decoder.named_parameters())
        return params

    def parameter_count(self) -> int:
        return int(sum(p.value.size for p in self.named_parameters().values()))

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: np.asarray(p.value, dtype=np.float32) for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise DimensionError(f"checkpoint mismatch: missing {missing[:3]}, unexpected {unexpected[:3]}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float32)
            if value.shape != p.shape:
                raise DimensionError(f"parameter '{name}': checkpoint {value.shape} vs model {p.shape}")
            p.value = value.copy()


@dataclass
class AlignmentCache:
    """Matches and soft weights reusable across training steps"""
    sa_matches: Dict[int, MatchIndex] = field(default_factory=dict)
    sa_weights: Dict[int, SoftWeightVector] = field(default_factory=dict)
    ma_match: Optional[MatchIndex] = None
    ma_weights: Optional[SoftWeightVector] = None


@dataclass
class Diagnostics:
    inputs: PipelineInputs
    lr: FeaturePyramid
    refdd: FeaturePyramid
    ref: FeaturePyramid
    sa: Optional[SAResult]
    ma: Optional[MAResult]
    f_in: Dict[int, Node]
    soft: Dict[int, np.ndarray]
    cache: AlignmentCache


def _zeros_like_scale(pyramid: FeaturePyramid) -> Dict[int, Node]:
    return {n: ad.constant(np.zeros(pyramid.at(n).shape)) for n in SCALES}


def forward_full(model: FASRModel, t2_lr, pd, cache: Optional[AlignmentCache] = None,
                 keep_correlations: bool = False) -> Tuple[Node, Diagnostics]:
    """
    Full pipeline from the LR target contrast and HR reference to I_SR

    Toggles come from model.config: use_sa / use_ma replace a branch by
    zeros, use_chpf=False feeds F_in straight to the decoder, and use_ca
    fills the 4x S-A slot with the fixed-scale cross-attention baseline
    when both alignment branches are off.

    Args:
        model: Parameters and configuration
        t2_lr: LR image [C, H/s, W/s]
        pd: HR reference [C, H, W]
        cache: Reuse matches and soft weights from an earlier pass
        keep_correlations: Keep full S-A correlation matrices in diagnostics

    Returns:
        (I_SR node, Diagnostics)
    """
    cfg = model.config
    inputs = build_inputs(t2_lr, pd, cfg.scale)
    lr, refdd, ref = extract_batch([inputs.lr_up, inputs.refdd, inputs.ref], model.extractor)
    cache = cache or AlignmentCache()

    f_sa, s_sa, sa = _zeros_like_scale(ref), {}, None
    sa_scales = SCALES if cfg.use_sa else ((4,) if cfg.use_ca and not cfg.use_ma else ())
    if sa_scales:
        sa = sa_align(lr, refdd, ref, model.alignment, scales=sa_scales, keep_correlations=keep_correlations,
                      matches=cache.sa_matches or None, weights=cache.sa_weights or None)
        f_sa.update(sa.features)
        s_sa = sa.weights
        cache.sa_matches, cache.sa_weights = sa.matches, sa.weights

    f_ma, s_ma, ma = _zeros_like_scale(ref), None, None
    if cfg.use_ma:
        ma = ma_align(lr, refdd, ref, model.alignment, match=cache.ma_match, weights=cache.ma_weights)
        f_ma.update(ma.features)
        s_ma = ma.weights
        cache.ma_match, cache.ma_weights = ma.match, ma.weights

    f_in = concat_aligned(f_ma, f_sa)
    soft = {}
    if cfg.use_chpf:
        dims = {n: _spatial(f_in[n]) for n in SCALES}
        soft = combine_soft(s_sa, s_ma, dims)
        features = modulate(fc_conv_fuse(f_in, model.fusion), soft)
    else:
        features = f_in

    sr = decode(features, lr.f4, inputs.lr_up, model.decoder)
    return sr, Diagnostics(inputs, lr, refdd, ref, sa, ma, f_in, soft, cache)
