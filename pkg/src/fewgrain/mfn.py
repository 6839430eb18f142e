"""Multi-frequency neighborhood encoding.

Builds a weighted self-similarity neighborhood over each spatial position,
scores it with selected 2D-DCT frequency components to produce per-channel
attention, and reduces the neighborhood axes with small 3D convolutions to
yield the multi-frequency feature map F'.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import FeatureMap
from .initutil import conv_param, kaiming_uniform, rng_from_seed, zeros_param


@dataclass
class NeighborhoodTensor:
    """Local spatial representation s of shape (...,C,H,W,U,V)."""

    tensor: T.Tensor
    U: int
    V: int


@dataclass
class FrequencyIndexSet:
    """Ordered top-M 2D-DCT indices with their selection scores."""

    entries: list  # [(i, j, score)], sorted by descending score
    grid: tuple    # (Hf, Wf)

    def __post_init__(self):
        seen = set()
        hf, wf = self.grid
        prev = None
        for i, j, score in self.entries:
            if (i, j) in seen:
                raise ValueError(f"duplicate frequency index ({i},{j})")
            if not (0 <= i < hf and 0 <= j < wf):
                raise ValueError(f"frequency index ({i},{j}) outside grid {self.grid}")
            if prev is not None and score > prev:
                raise ValueError("entries must be sorted by descending score")
            prev = score
            seen.add((i, j))

    @property
    def M(self):
        return len(self.entries)

    def save(self, path):
        hf, wf = self.grid
        with open(path, "w", encoding="utf-8") as f:
            f.write(f"MFN-FREQ v1 M={self.M} grid={hf}x{wf}\n")
            for m, (i, j, score) in enumerate(self.entries):
                f.write(f"{m} {i} {j} {score:.9g}\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            header = f.readline().split()
            if header[:2] != ["MFN-FREQ", "v1"]:
                raise ValueError(f"bad frequency-set header in {path}")
            fields = dict(tok.split("=", 1) for tok in header[2:])
            hf, wf = (int(x) for x in fields["grid"].split("x"))
            entries = []
            for line in f:
                if not line.strip():
                    continue
                _, i, j, score = line.split()
                entries.append((int(i), int(j), float(score)))
            if len(entries) != int(fields["M"]):
                raise ValueError(f"frequency-set entry count mismatch in {path}")
        return cls(entries, (hf, wf))


def default_frequency_set(grid, M):
    """Lowest frequencies first, raster tie-break on (i+j, i, j)."""
    hf, wf = grid
    if M > hf * wf:
        raise ValueError(f"M={M} exceeds {hf}x{wf} frequency grid")
    order = sorted(((i, j) for i in range(hf) for j in range(wf)),
                   key=lambda ij: (ij[0] + ij[1], ij[0], ij[1]))
    return FrequencyIndexSet([(i, j, 0.0) for i, j in order[:M]], grid)


@dataclass
class DctBasis:
    """Orthonormal 2D DCT-II basis table B[i,j,h,w]."""

    table: np.ndarray

    @property
    def shape(self):
        return self.table.shape[:2]


def build_dct_basis(H, W, dtype=np.float64):
    h = np.arange(H)
    w = np.arange(W)
    ci = np.cos(np.pi * (2 * h[None, :] + 1) * np.arange(H)[:, None] / (2 * H))
    cj = np.cos(np.pi * (2 * w[None, :] + 1) * np.arange(W)[:, None] / (2 * W))
    ai = np.full(H, np.sqrt(2.0 / H))
    ai[0] = np.sqrt(1.0 / H)
    aj = np.full(W, np.sqrt(2.0 / W))
    aj[0] = np.sqrt(1.0 / W)
    table = np.einsum("i,j,ih,jw->ijhw", ai, aj, ci, cj)
    return DctBasis(table.astype(dtype))


def channel_groups(C, M):
    """Contiguous channel ranges; the first C mod M groups get one extra."""
    if M > C:
        raise ValueError(f"M={M} exceeds channel count {C}")
    base, extra = divmod(C, M)
    sizes = [base + (1 if m < extra else 0) for m in range(M)]
    bounds = np.cumsum([0] + sizes)
    return [(int(bounds[m]), int(bounds[m + 1])) for m in range(M)]


def weighted_neighborhood(F, U=5, V=5):
    """Local spatial representation s(x,e): the unit-normalized center fiber
    times the unit-normalized distance-weighted neighbor fiber; neighbors
    outside the image contribute exact zeros."""
    if U % 2 == 0 or V % 2 == 0:
        raise ValueError("window extents U, V must be odd")
    x = F.tensor if isinstance(F, FeatureMap) else F
    squeeze = x.data.ndim == 3
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    b, c, h, w = x.shape
    ru, rv = (U - 1) // 2, (V - 1) // 2
    center = T.l2_normalize(x, axis=1)
    slices = []
    for du in range(-ru, ru + 1):
        for dv in range(-rv, rv + 1):
            weight = 1.0 / (np.hypot(du, dv) + 1.0)
            fw = T.elementwise("scale", x, weight)
            fwn = T.l2_normalize(fw, axis=1)
            padded = T.pad(fwn, [(0, 0), (0, 0), (ru, ru), (rv, rv)])
            shifted = padded[:, :, ru + du:ru + du + h, rv + dv:rv + dv + w]
            slices.append(center * shifted)
    s = T.stack(slices, axis=4)
    s = T.reshape(s, (b, c, h, w, U, V))
    if squeeze:
        s = T.reshape(s, (c, h, w, U, V))
    return NeighborhoodTensor(s, U, V)


def dct_frequency_features(S_hat, basis, idx):
    """Project the (..,C,H,W) neighborhood mean onto each channel group's
    assigned DCT component, yielding one value per channel."""
    squeeze = S_hat.data.ndim == 3
    x = T.reshape(S_hat, (1,) + S_hat.shape) if squeeze else S_hat
    b, c, h, w = x.shape
    groups = channel_groups(c, idx.M)
    basis_pc = np.zeros((c, h, w), dtype=x.dtype)
    for m, (lo, hi) in enumerate(groups):
        i, j, _ = idx.entries[m]
        basis_pc[lo:hi] = basis.table[i, j].astype(x.dtype)
    out = T.einsum2("bchw,chw->bc", x, T.Tensor(basis_pc))
    return T.reshape(out, (c,)) if squeeze else out


def multifreq_attention(freq, fc_w, fc_b):
    """D = sigmoid(fc(freq)): per-channel gates in (0,1)."""
    squeeze = freq.data.ndim == 1
    x = T.reshape(freq, (1,) + freq.shape) if squeeze else freq
    logits = T.matmul(x, fc_w) + fc_b
    d = T.sigmoid(logits)
    return T.reshape(d, d.shape[1:]) if squeeze else d


def reduce_neighborhood(s_weighted, conv_params):
    """Collapse the UxV axes of the gated neighborhood with stacked
    (1,3,3) valid 3D convolutions (ReLU between), then restore CxHxW."""
    squeeze = s_weighted.data.ndim == 5
    x = (T.reshape(s_weighted, (1,) + s_weighted.shape)
         if squeeze else s_weighted)
    b, c, h, w, u, v = x.shape
    n_convs = len(conv_params)
    if u - 2 * n_convs != 1 or v - 2 * n_convs != 1:
        raise ValueError(
            f"U={u}, V={v} not reducible to 1 by {n_convs} valid (1,3,3) convs;"
            " reconfigure the reduction stack")
    x = T.transpose(x, (0, 2, 3, 1, 4, 5))       # (B,H,W,C,U,V)
    x = T.reshape(x, (b * h * w, c, 1, u, v))
    for wk, bk in conv_params:
        x = T.conv3d(x, wk.value, bk.value, stride=1, padding=0)
        x = T.relu(x)
    cout = x.shape[1]
    x = T.reshape(x, (b, h, w, cout))
    x = T.transpose(x, (0, 3, 1, 2))
    return FeatureMap(T.reshape(x, (cout, h, w)) if squeeze else x,
                      stage="multifreq")


@dataclass
class MfnConfig:
    M: int = 12
    U: int = 5
    V: int = 5


@dataclass
class MfnParams:
    config: MfnConfig
    fc_w: T.Parameter
    fc_b: T.Parameter
    reduce_convs: list            # [(weight Parameter, bias Parameter)]
    freq_set: FrequencyIndexSet
    basis: DctBasis = field(repr=False, default=None)

    def parameters(self):
        yield self.fc_w
        yield self.fc_b
        for wk, bk in self.reduce_convs:
            yield wk
            yield bk


def init_params(channels, feat_side, config, rng_seed, freq_set=None,
                dtype=np.float32):
    rng = rng_from_seed(rng_seed) if np.isscalar(rng_seed) else rng_seed
    c = channels
    if config.U != config.V:
        raise ValueError("reduction stack requires U == V")
    fc_w = T.Parameter("mfn/fc_w", kaiming_uniform(rng, (c, c), c, dtype))
    fc_b = zeros_param("mfn/fc_b", (c,), dtype)
    n_convs = (config.U - 1) // 2
    if n_convs > 2:
        raise ValueError(f"U={config.U} needs more than two (1,3,3) convs;"
                         " unsupported window size")
    widths = {0: [], 1: [(c, c)], 2: [(c // 2, c), (c, c // 2)]}[n_convs]
    convs = []
    for k, (co, ci) in enumerate(widths):
        convs.append((conv_param(rng, f"mfn/reduce{k}/w", (co, ci, 1, 3, 3), dtype),
                      zeros_param(f"mfn/reduce{k}/b", (co,), dtype)))
    if freq_set is None:
        freq_set = default_frequency_set((feat_side, feat_side), config.M)
    if freq_set.M > c:
        raise ValueError(f"M={freq_set.M} exceeds channel count {c}")
    basis = build_dct_basis(feat_side, feat_side, dtype=np.float64)
    return MfnParams(config, fc_w, fc_b, convs, freq_set, basis)


def mfn_forward(F, params):
    """Full MFN pass: returns (F', F_tilde = F + F')."""
    x = F.tensor if isinstance(F, FeatureMap) else F
    s = weighted_neighborhood(x, params.config.U, params.config.V)
    s_hat = T.tmean(s.tensor, axis=(-2, -1))
    freq = dct_frequency_features(s_hat, params.basis, params.freq_set)
    d = multifreq_attention(freq, params.fc_w.value, params.fc_b.value)
    d_b = T.reshape(d, d.shape + (1, 1, 1, 1))  # broadcast over H,W,U,V
    gated = s.tensor * d_b
    f_prime = reduce_neighborhood(gated, params.reduce_convs)
    f_tilde = x + f_prime.tensor
    return f_prime, FeatureMap(f_tilde, stage="multifreq")


def select_frequency_indices(dataset_index, base_config, M, eval_budget,
                             seed, candidate_grid=None):
    """Score every candidate frequency index by training a one-component
    model under a fixed short protocol, then keep the top M.

    Returns (FrequencyIndexSet, score_grid).  Equal scores fall back to
    raster order (lowest i, then j).  Deterministic per seed.
    """
    from . import episodic  # local import: selection drives the trainer

    if eval_budget <= 0:
        raise ValueError("eval budget must be positive")
    feat_side = base_config.backbone.output_side()
    grid = candidate_grid or (feat_side, feat_side)
    if grid[0] > feat_side or grid[1] > feat_side:
        raise ValueError(f"candidate grid {grid} larger than feature extent "
                         f"{feat_side}x{feat_side}")
    scores = np.zeros(grid)
    for i in range(grid[0]):
        for j in range(grid[1]):
            fset = FrequencyIndexSet([(i, j, 0.0)], grid)
            scores[i, j] = episodic.short_protocol_score(
                dataset_index, base_config, fset, eval_budget, seed)
    order = sorted(((i, j) for i in range(grid[0]) for j in range(grid[1])),
                   key=lambda ij: (-scores[ij], ij[0], ij[1]))
    entries = [(i, j, float(scores[i, j])) for i, j in order[:M]]
    return FrequencyIndexSet(entries, grid), scores
