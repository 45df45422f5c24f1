"""
Flexible Alignment Module
Patch embedding, correlation, hard matching and value warping for the
single-to-multi (S-A) and multi-to-multi (M-A) alignment branches

Correlations, match indices and soft weights never carry gradients;
the warped value rows do, so training reaches the extractor through V.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from . import numerics as K
from .autodiff import Node, NodeLike
from .errors import ContractError, DimensionError
from .extractor import SCALES, FeaturePyramid, LinearLayer
from .numerics import GridMeta

logger = logging.getLogger(__name__)

DEFAULT_BLOCK = 512


@dataclass
class AlignmentConfig:
    patch: int = 3
    stride: int = 1
    pad: int = 1
    normalize: bool = True
    temperature: Optional[float] = None  # None or <= 0 means sqrt(d)
    block: int = DEFAULT_BLOCK


@dataclass
class AlignmentParams:
    """Query/key projections per scale; scales without a projection use raw patches"""
    config: AlignmentConfig = field(default_factory=AlignmentConfig)
    q_proj: Dict[int, LinearLayer] = field(default_factory=dict)
    k_proj: Dict[int, LinearLayer] = field(default_factory=dict)

    @classmethod
    def init(cls, rng: np.random.Generator, channels: Sequence[int], embed_dim: int,
             config: Optional[AlignmentConfig] = None) -> "AlignmentParams":
        """
        Random projections to a shared embedding width

        Query and key projections of one scale start from the same matrix,
        so same-scale correlations begin as similarity-preserving.
        """
        config = config or AlignmentConfig()
        params = cls(config=config)
        for n, c in zip(SCALES, channels):
            din = c * config.patch * config.patch
            w = (rng.standard_normal((embed_dim, din)) / np.sqrt(din)).astype(np.float32)
            b = np.zeros(embed_dim, dtype=np.float32)
            params.q_proj[n] = LinearLayer(ad.parameter(w), ad.parameter(b))
            params.k_proj[n] = LinearLayer(ad.parameter(w.copy()), ad.parameter(b.copy()))
        return params

    def named_parameters(self, prefix: str = "alignment") -> Dict[str, Node]:
        params = {}
        for n in sorted(self.q_proj):
            params.update(self.q_proj[n].named_parameters(f"{prefix}.q_proj{n}"))
        for n in sorted(self.k_proj):
            params.update(self.k_proj[n].named_parameters(f"{prefix}.k_proj{n}"))
        return params


@dataclass
class PatchEmbedding:
    rows: Node
    grid: GridMeta
    projected: bool = False
    normalized: bool = False

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def d(self) -> int:
        return self.rows.shape[1]

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.rows.value, dtype=np.float64)


@dataclass
class CorrelationMatrix:
    scores: np.ndarray
    query_grid: GridMeta
    key_grid: GridMeta


@dataclass
class MatchIndex:
    idx: np.ndarray
    key_grid: GridMeta


@dataclass
class SoftWeightVector:
    w: np.ndarray
    grid: GridMeta


@dataclass
class AlignedPyramid:
    a4: Node
    a2: Node
    a1: Node

    @classmethod
    def from_dict(cls, features: Dict[int, Node]) -> "AlignedPyramid":
        return cls(features[4], features[2], features[1])

    def at(self, scale: int) -> Node:
        return {4: self.a4, 2: self.a2, 1: self.a1}[scale]


@dataclass
class SAResult:
    features: Dict[int, Node]
    weights: Dict[int, SoftWeightVector]
    matches: Dict[int, MatchIndex]
    correlations: Dict[int, CorrelationMatrix] = field(default_factory=dict)


@dataclass
class MAResult:
    features: Dict[int, Node]
    weights: SoftWeightVector
    match: MatchIndex
    merged: Optional[CorrelationMatrix] = None


# --------------------------------------------------------------------------
# Embedding and correlation
# --------------------------------------------------------------------------

def word_embed(feat: NodeLike, patch: int = 3, stride: int = 1, pad: int = 1,
               proj: Optional[LinearLayer] = None, normalize: bool = False) -> PatchEmbedding:
    """
    Unfold a feature map into patch rows, optionally projecting them

    Args:
        feat: Feature map [c, h, w]
        patch, stride, pad: Unfold geometry
        proj: Linear layer mapping c*patch^2 to the shared width d
        normalize: L2-normalise every row (the result is detached)

    Returns:
        PatchEmbedding of N = gh*gw rows
    """
    rows, grid = ad.unfold(feat, patch, stride, pad)
    if proj is not None:
        rows = proj(rows)
    if normalize:
        values = np.asarray(rows.value, dtype=np.float64)
        norms = np.linalg.norm(values, axis=1, keepdims=True)
        values = np.divide(values, norms, out=np.zeros_like(values), where=norms > 0)
        rows = ad.constant(values)
    return PatchEmbedding(rows, grid, projected=proj is not None, normalized=normalize)


def _detached(emb: PatchEmbedding) -> PatchEmbedding:
    return PatchEmbedding(ad.stop_gradient(emb.rows), emb.grid, emb.projected, emb.normalized)


def _match_embedding(feat: Node, proj: Optional[LinearLayer], config: AlignmentConfig) -> PatchEmbedding:
    return _detached(word_embed(ad.stop_gradient(feat), config.patch, config.stride, config.pad,
                                proj, config.normalize))


def _temperature(d: int, temperature: Optional[float]) -> float:
    if temperature is None or temperature <= 0:
        return float(np.sqrt(d))
    return float(temperature)


def _blocks(n: int, block: int) -> Iterator[slice]:
    for start in range(0, n, block):
        yield slice(start, min(start + block, n))


def _score_rows(q_block: np.ndarray, k: np.ndarray, temperature: float) -> np.ndarray:
    return K.softmax_rows(q_block @ k.T / temperature)


def _expand_keys(rows: np.ndarray, kmap: np.ndarray) -> np.ndarray:
    up = rows[:, kmap]
    return up / up.sum(axis=1, keepdims=True)


class _MatchSource(NamedTuple):
    """One correlation term of a merged matrix, evaluated block by block"""
    q: np.ndarray
    qmap: Optional[np.ndarray]
    k: np.ndarray
    kmap: Optional[np.ndarray]
    temperature: float

    def rows(self, sl: slice) -> np.ndarray:
        q_block = self.q[sl] if self.qmap is None else self.q[self.qmap[sl]]
        scores = _score_rows(q_block, self.k, self.temperature)
        return scores if self.kmap is None else _expand_keys(scores, self.kmap)


def _scan(sources: Sequence[_MatchSource], nq: int, nk: int, block: int,
          keep: bool = False) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    """Row argmax and row max of the summed correlation terms, without materialising them"""
    idx = np.empty(nq, dtype=np.int64)
    best = np.empty(nq)
    full = np.empty((nq, nk)) if keep else None
    for sl in _blocks(nq, block):
        total = None
        for source in sources:
            rows = source.rows(sl)
            total = rows if total is None else total + rows
        idx[sl] = np.argmax(total, axis=1)
        best[sl] = total.max(axis=1)
        if keep:
            full[sl] = total
    return idx, best, full


def correlate(q: PatchEmbedding, k: PatchEmbedding, temperature: Optional[float] = None,
              block: int = DEFAULT_BLOCK) -> CorrelationMatrix:
    """Row-softmaxed scaled inner products between query and key rows"""
    if q.d != k.d:
        raise DimensionError(f"correlate: query width {q.d} does not match key width {k.d}")
    source = _MatchSource(q.array, None, k.array, None, _temperature(q.d, temperature))
    _, _, scores = _scan([source], q.n, k.n, block, keep=True)
    return CorrelationMatrix(scores, q.grid, k.grid)


def hard_match(corr: CorrelationMatrix) -> MatchIndex:
    """Per-row argmax; ties go to the smallest key index"""
    return MatchIndex(np.argmax(corr.scores, axis=1).astype(np.int64), corr.key_grid)


def brute_force_match(q_rows, k_rows) -> MatchIndex:
    """Exhaustive max inner-product scan, one query at a time"""
    q = q_rows.array if isinstance(q_rows, PatchEmbedding) else np.asarray(q_rows, dtype=np.float64)
    k = k_rows.array if isinstance(k_rows, PatchEmbedding) else np.asarray(k_rows, dtype=np.float64)
    if q.shape[1] != k.shape[1]:
        raise DimensionError(f"brute_force_match: widths {q.shape[1]} and {k.shape[1]} differ")
    out = np.empty(q.shape[0], dtype=np.int64)
    for i in range(q.shape[0]):
        out[i] = int(np.argmax(k @ q[i]))
    key_grid = k_rows.grid if isinstance(k_rows, PatchEmbedding) else None
    return MatchIndex(out, key_grid)


def warp(v: PatchEmbedding, match: MatchIndex) -> Node:
    """Gather value rows by match index; row i is v.rows[idx[i]]"""
    idx = np.asarray(match.idx)
    if idx.size and (idx.min() < 0 or idx.max() >= v.n):
        raise ContractError(f"warp: match index outside [0, {v.n})")
    return ad.gather_rows(v.rows, idx)


# --------------------------------------------------------------------------
# Grid mappings
# --------------------------------------------------------------------------

def _check_multiple(src: GridMeta, dst: GridMeta):
    if dst.gh % src.gh or dst.gw % src.gw:
        raise ContractError(f"grid {dst.gh}x{dst.gw} is not a multiple of {src.gh}x{src.gw}")


def nearest_map(src: GridMeta, dst: GridMeta) -> np.ndarray:
    """For every cell of the finer grid `dst`, the flat index of its cell in `src`"""
    _check_multiple(src, dst)
    r = np.arange(dst.gh) * src.gh // dst.gh
    c = np.arange(dst.gw) * src.gw // dst.gw
    return (r[:, None] * src.gw + c[None, :]).reshape(-1)


def lift_map(src: GridMeta, dst: GridMeta) -> np.ndarray:
    """For every cell of the coarser grid `src`, the centre-aligned cell of `dst`"""
    _check_multiple(src, dst)
    sh, sw = dst.gh // src.gh, dst.gw // src.gw
    r = np.minimum(np.floor((np.arange(src.gh) + 0.5) * sh).astype(np.int64), dst.gh - 1)
    c = np.minimum(np.floor((np.arange(src.gw) + 0.5) * sw).astype(np.int64), dst.gw - 1)
    return (r[:, None] * dst.gw + c[None, :]).reshape(-1)


def project_down(idx: np.ndarray, fine: GridMeta, coarse: GridMeta) -> np.ndarray:
    _check_multiple(coarse, fine)
    r, c = np.divmod(np.asarray(idx, dtype=np.int64), fine.gw)
    return (r * coarse.gh // fine.gh) * coarse.gw + c * coarse.gw // fine.gw


def upsample_correlation(corr: CorrelationMatrix, to_query_grid: GridMeta,
                         to_key_grid: GridMeta) -> CorrelationMatrix:
    """Nearest replication onto finer query and key grids, rows renormalised"""
    qmap = nearest_map(corr.query_grid, to_query_grid)
    kmap = nearest_map(corr.key_grid, to_key_grid)
    return CorrelationMatrix(_expand_keys(corr.scores[qmap], kmap), to_query_grid, to_key_grid)


def fold_weights(s: SoftWeightVector, h: int, w: int) -> np.ndarray:
    """Place each patch weight on its grid cell, then nearest-resize to (h, w)"""
    grid = s.grid
    weights = np.asarray(s.w, dtype=np.float64)
    if weights.shape != (grid.n,):
        raise DimensionError(f"soft weights {weights.shape} do not match grid of {grid.n} patches")
    spatial = weights.reshape(1, grid.gh, grid.gw)
    if (grid.gh, grid.gw) == (h, w):
        return spatial.copy()
    return K.resize(spatial, h, w, "nearest")


# --------------------------------------------------------------------------
# S-A and M-A
# --------------------------------------------------------------------------

def _check_scales(scales: Sequence[int]):
    for n in scales:
        if n not in SCALES:
            raise ValueError(f"Unsupported scale: {n}")


def sa_align(lr: FeaturePyramid, refdd: FeaturePyramid, ref: FeaturePyramid,
             params: Optional[AlignmentParams] = None, scales: Sequence[int] = (1, 2, 4),
             keep_correlations: bool = False,
             matches: Optional[Dict[int, MatchIndex]] = None,
             weights: Optional[Dict[int, SoftWeightVector]] = None) -> SAResult:
    """
    Single-to-multi alignment

    Queries come from lr.f4; for each scale n the keys come from refdd at
    scale n and the values from ref at scale n. Warped rows are folded on
    the 4x query grid and average-pooled to scale-n dims.

    Args:
        lr, refdd, ref: Feature pyramids of I_LR_up, I_Ref_down_up, I_Ref
        params: Projections and geometry
        scales: Scales to align
        keep_correlations: Also return the full correlation matrices
        matches, weights: Reuse earlier matches/weights instead of re-matching

    Returns:
        SAResult with F_SA, S_SA and M_SA per scale
    """
    params = params or AlignmentParams()
    cfg = params.config
    _check_scales(scales)
    q = None
    result = SAResult({}, {}, {})

    for n in scales:
        v = word_embed(ref.at(n), cfg.patch, cfg.stride, cfg.pad)
        if matches is not None and n in matches:
            result.matches[n] = matches[n]
            result.weights[n] = weights[n]
            query_grid = weights[n].grid
        else:
            if q is None:
                q = _match_embedding(lr.f4, params.q_proj.get(4), cfg)
            k = _match_embedding(refdd.at(n), params.k_proj.get(n), cfg)
            if q.d != k.d:
                raise DimensionError(f"S-A at scale {n}: query width {q.d} does not match key width {k.d}")
            source = _MatchSource(q.array, None, k.array, None, _temperature(q.d, cfg.temperature))
            idx, best, full = _scan([source], q.n, k.n, cfg.block, keep_correlations)
            result.matches[n] = MatchIndex(idx, k.grid)
            result.weights[n] = SoftWeightVector(best, q.grid)
            if keep_correlations:
                result.correlations[n] = CorrelationMatrix(full, q.grid, k.grid)
            query_grid = q.grid

        folded = ad.fold(warp(v, result.matches[n]), query_grid.with_channels(v.grid.channels))
        factor = 4 // n
        result.features[n] = ad.avg_pool2d(folded, factor) if factor > 1 else folded

    logger.debug(f"S-A aligned scales {tuple(scales)}")
    return result


def _ma_sources(lr: FeaturePyramid, refdd: FeaturePyramid, params: AlignmentParams,
                scales: Sequence[int]) -> Tuple[List[_MatchSource], Dict[int, PatchEmbedding], Dict[int, PatchEmbedding]]:
    cfg = params.config
    qs = {n: _match_embedding(lr.at(n), params.q_proj.get(n), cfg) for n in scales}
    ks = {n: _match_embedding(refdd.at(n), params.k_proj.get(n), cfg) for n in scales}
    sources = []
    for n in sorted(scales):
        if qs[n].d != ks[n].d:
            raise DimensionError(f"M-A at scale {n}: query width {qs[n].d} does not match key width {ks[n].d}")
        qmap = None if n == 4 else nearest_map(qs[n].grid, qs[4].grid)
        kmap = None if n == 4 else nearest_map(ks[n].grid, ks[4].grid)
        sources.append(_MatchSource(qs[n].array, qmap, ks[n].array, kmap,
                                    _temperature(qs[n].d, cfg.temperature)))
    return sources, qs, ks


def ma_align(lr: FeaturePyramid, refdd: FeaturePyramid, ref: FeaturePyramid,
             params: Optional[AlignmentParams] = None, scales: Sequence[int] = (1, 2, 4),
             keep_merged: bool = False, match: Optional[MatchIndex] = None,
             weights: Optional[SoftWeightVector] = None) -> MAResult:
    """
    Multi-to-multi alignment

    Per-scale correlations are upsampled to the 4x grid and summed
    (order 1x, 2x, 4x); one merged match drives the warp of every
    scale's values. The soft weight is the merged row maximum divided
    by the number of merged scales.
    """
    params = params or AlignmentParams()
    cfg = params.config
    _check_scales(scales)
    if 4 not in scales:
        raise ContractError("M-A merges on the 4x grid; scale 4 must be enabled")

    result_merged = None
    if match is None:
        sources, qs, ks = _ma_sources(lr, refdd, params, scales)
        q4, k4 = qs[4], ks[4]
        idx, best, full = _scan(sources, q4.n, k4.n, cfg.block, keep_merged)
        match = MatchIndex(idx, k4.grid)
        weights = SoftWeightVector(best / len(scales), q4.grid)
        if keep_merged:
            result_merged = CorrelationMatrix(full, q4.grid, k4.grid)
    query4, key4 = weights.grid, match.key_grid

    features = {}
    for n in scales:
        v = word_embed(ref.at(n), cfg.patch, cfg.stride, cfg.pad)
        lifted = lift_map(v.grid, query4)
        down = project_down(match.idx[lifted], key4, v.grid)
        features[n] = ad.fold(warp(v, MatchIndex(down, v.grid)), v.grid)

    logger.debug(f"M-A aligned scales {tuple(scales)}")
    return MAResult(features, weights, match, result_merged)


def flexible_match(lr: FeaturePyramid, refdd: FeaturePyramid, params: Optional[AlignmentParams] = None,
                   sa_scales: Sequence[int] = (1, 2, 4), ma_scales: Sequence[int] = (1, 2, 4)) -> MatchIndex:
    """
    Merged match over the 4x query grid, evaluated block by block

    With both branches enabled this equals the argmax of the full M-A merged
    matrix plus the key-upsampled S-A matrices;
    sa_scales=(4,) with no M-A scales is the fixed-scale cross-attention
    baseline.
    """
    params = params or AlignmentParams()
    cfg = params.config
    _check_scales(tuple(sa_scales) + tuple(ma_scales))
    if not sa_scales and not ma_scales:
        raise ContractError("flexible_match needs at least one S-A or M-A scale")

    sources: List[_MatchSource] = []
    if ma_scales:
        if 4 not in ma_scales:
            raise ContractError("M-A merges on the 4x grid; scale 4 must be enabled")
        sources, _, _ = _ma_sources(lr, refdd, params, ma_scales)

    q4 = _match_embedding(lr.f4, params.q_proj.get(4), cfg)
    ks = {n: _match_embedding(refdd.at(n), params.k_proj.get(n), cfg) for n in set(sa_scales) | {4}}
    for n in sorted(sa_scales):
        if ks[n].d != q4.d:
            raise DimensionError(f"S-A at scale {n}: query width {q4.d} does not match key width {ks[n].d}")
        kmap = None if n == 4 else nearest_map(ks[n].grid, ks[4].grid)
        sources.append(_MatchSource(q4.array, None, ks[n].array, kmap, _temperature(q4.d, cfg.temperature)))
    idx, _, _ = _scan(sources, q4.n, ks[4].n, cfg.block)
    return MatchIndex(idx, ks[4].grid)


# --------------------------------------------------------------------------
# Match diagnostics
# --------------------------------------------------------------------------

def _to_pixels(coord: np.ndarray, src_size: int, dst_size: int) -> np.ndarray:
    return np.floor((coord + 0.5) * dst_size / src_size).astype(np.int64)


def match_accuracy(match: MatchIndex, query_grid: GridMeta, correspondence: np.ndarray,
                   foreground: Optional[np.ndarray] = None, tolerance: Optional[float] = None) -> float:
    """
    Fraction of foreground queries whose matched key centre lies within
    `tolerance` pixels (Chebyshev) of the true correspondent

    Args:
        match: Match index over the key grid
        query_grid: Grid the match rows belong to
        correspondence: [2, H, W] true (row, col) in the key image per query pixel
        foreground: [H, W] boolean mask of scored query pixels
        tolerance: Pixel tolerance, default the patch size
    """
    _, h, w = correspondence.shape
    tolerance = query_grid.patch if tolerance is None else tolerance

    qr, qc = query_grid.centers()
    qy, qx = _to_pixels(qr, query_grid.height, h), _to_pixels(qc, query_grid.width, w)
    kgrid = match.key_grid
    kr, kc = kgrid.centers()
    ky = _to_pixels(kr[match.idx], kgrid.height, h)
    kx = _to_pixels(kc[match.idx], kgrid.width, w)

    valid = (qy >= 0) & (qy < h) & (qx >= 0) & (qx < w)
    qy, qx, ky, kx = qy[valid], qx[valid], ky[valid], kx[valid]
    if foreground is not None:
        keep = np.asarray(foreground, dtype=bool)[qy, qx]
        qy, qx, ky, kx = qy[keep], qx[keep], ky[keep], kx[keep]
    if qy.size == 0:
        logger.warning("match_accuracy: no foreground queries to score")
        return 0.0

    dy = np.abs(ky - correspondence[0, qy, qx])
    dx = np.abs(kx - correspondence[1, qy, qx])
    return float(np.mean(np.maximum(dy, dx) <= tolerance))


def match_displacement(match: MatchIndex, query_grid: GridMeta) -> np.ndarray:
    """Per-query displacement length (in query-image pixels) as a [1, gh, gw] map"""
    h, w = query_grid.height, query_grid.width
    qr, qc = query_grid.centers()
    kr, kc = match.key_grid.centers()
    ky = (kr[match.idx] + 0.5) * h / match.key_grid.height - 0.5
    kx = (kc[match.idx] + 0.5) * w / match.key_grid.width - 0.5
    dist = np.hypot(ky - qr, kx - qc)
    return dist.reshape(1, query_grid.gh, query_grid.gw)
