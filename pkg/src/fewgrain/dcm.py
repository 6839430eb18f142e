"""Cross modulation: recurrent cross-path attention over each feature map
(global context), then refinement of the 4D support-query cosine correlation
with 3D convolutions to produce co-attention maps for both sides.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import FeatureMap
from .initutil import conv_param, rng_from_seed, zeros_param

CROSS_MASK = -1e30  # additive logit that zeroes a softmax entry


@dataclass
class CrissCrossParams:
    """Q/K channel-reducing 1x1 convs plus a full-width value conv; the same
    set is applied in every loop."""

    wq: T.Parameter
    bq: T.Parameter
    wk: T.Parameter
    bk: T.Parameter
    wv: T.Parameter
    bv: T.Parameter

    def parameters(self):
        return [self.wq, self.bq, self.wk, self.bk, self.wv, self.bv]


@dataclass
class DcaParams:
    """Stage-1 conv shared between the tensor and its transpose; stage-2
    convs applied crosswise and summed."""

    conv1_w: T.Parameter
    conv1_b: T.Parameter
    conv_a_w: T.Parameter
    conv_a_b: T.Parameter
    conv_b_w: T.Parameter
    conv_b_b: T.Parameter

    def parameters(self):
        return [self.conv1_w, self.conv1_b, self.conv_a_w, self.conv_a_b,
                self.conv_b_w, self.conv_b_b]


@dataclass
class DcmParams:
    cc: CrissCrossParams
    dca: DcaParams
    loops: int = 2
    temperature: float = 2.0

    def parameters(self):
        return self.cc.parameters() + self.dca.parameters()


@dataclass
class CorrelationTensor:
    """Cosine correlations (..,H,W,H,W): support positions x query positions."""

    tensor: T.Tensor


@dataclass
class AttentionMap:
    tensor: T.Tensor  # (..,H,W), nonnegative, sums to 1 over positions
    side: str         # "support" | "query"
    temperature: float


def init_params(channels, rng_seed, loops=2, temperature=2.0, dtype=np.float32):
    rng = rng_from_seed(rng_seed) if np.isscalar(rng_seed) else rng_seed
    c = channels
    c2 = max(c // 8, 1)
    cc = CrissCrossParams(
        wq=conv_param(rng, "dcm/cc/wq", (c2, c, 1, 1), dtype),
        bq=zeros_param("dcm/cc/bq", (c2,), dtype),
        wk=conv_param(rng, "dcm/cc/wk", (c2, c, 1, 1), dtype),
        bk=zeros_param("dcm/cc/bk", (c2,), dtype),
        wv=conv_param(rng, "dcm/cc/wv", (c, c, 1, 1), dtype),
        bv=zeros_param("dcm/cc/bv", (c,), dtype),
    )
    dca = DcaParams(
        conv1_w=conv_param(rng, "dcm/dca/conv1_w", (1, 1, 3, 3, 3), dtype),
        conv1_b=zeros_param("dcm/dca/conv1_b", (1,), dtype),
        conv_a_w=conv_param(rng, "dcm/dca/conv_a_w", (1, 1, 3, 3, 3), dtype),
        conv_a_b=zeros_param("dcm/dca/conv_a_b", (1,), dtype),
        conv_b_w=conv_param(rng, "dcm/dca/conv_b_w", (1, 1, 3, 3, 3), dtype),
        conv_b_b=zeros_param("dcm/dca/conv_b_b", (1,), dtype),
    )
    return DcmParams(cc=cc, dca=dca, loops=loops, temperature=temperature)


def crisscross_step(F_in, params):
    """One cross-path attention pass with residual connection.

    Each position attends over its row and column (H+W-1 keys, its own
    position counted once) and gathers the matching value fibers.
    """
    x = F_in.tensor if isinstance(F_in, FeatureMap) else F_in
    squeeze = x.data.ndim == 3
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    b, c, h, w = x.shape
    q = T.conv2d(x, params.wq.value, params.bq.value)
    k = T.conv2d(x, params.wk.value, params.bk.value)
    v = T.conv2d(x, params.wv.value, params.bv.value)

    energy_col = T.einsum2("bcij,bcaj->bija", q, k)   # a over rows (H)
    energy_row = T.einsum2("bcij,bcia->bija", q, k)   # a over cols (W)
    # the position itself already sits in the column branch; kill the
    # duplicate in the row branch
    dup = np.where(np.eye(w, dtype=bool), CROSS_MASK, 0.0).astype(x.dtype)
    energy_row = energy_row + T.Tensor(dup.reshape(1, 1, w, w))
    energy = T.concat([energy_col, energy_row], axis=-1)  # (B,H,W,H+W)
    r = T.softmax(energy, axis=-1)
    r_col = r[:, :, :, :h]
    r_row = r[:, :, :, h:]
    out_col = T.einsum2("bija,bcaj->bcij", r_col, v)
    out_row = T.einsum2("bija,bcia->bcij", r_row, v)
    out = out_col + out_row + x
    if squeeze:
        out = T.reshape(out, out.shape[1:])
    return FeatureMap(out, stage="context")


def bcc(F_basic, F_prime, params, loops=None):
    """Repeated shared-parameter cross passes on the basic map, then the
    multi-frequency map added as residual: F* = F'' + F'."""
    loops = params.loops if loops is None else loops
    if loops < 1:
        raise ValueError("loop count must be >= 1")
    fb = F_basic.tensor if isinstance(F_basic, FeatureMap) else F_basic
    fp = F_prime.tensor if isinstance(F_prime, FeatureMap) else F_prime
    x = fb
    for _ in range(loops):
        x = crisscross_step(x, params.cc).tensor
    return FeatureMap(x + fp, stage="modulated")


def prototype(supports, labels):
    """Class-average support maps, accumulated in label-sorted order.

    supports: (NK,C,H,W) tensor; labels: per-row class ids.
    Returns (N,C,H,W) in ascending class-id order.
    """
    x = supports.tensor if isinstance(supports, FeatureMap) else supports
    labels = list(labels)
    classes = sorted(set(labels))
    protos = []
    for cls in classes:
        rows = [i for i, y in enumerate(labels) if y == cls]
        if not rows:
            raise ValueError(f"empty class {cls}")
        acc = x[rows[0]]
        for i in rows[1:]:
            acc = acc + x[i]
        protos.append(T.elementwise("scale", acc, 1.0 / len(rows)))
    return T.stack(protos, axis=0)


def correlation_4d(fs, fq):
    """Cosine correlation between all support and query positions; zero
    fibers correlate as 0."""
    xs = fs.tensor if isinstance(fs, FeatureMap) else fs
    xq = fq.tensor if isinstance(fq, FeatureMap) else fq
    squeeze = xs.data.ndim == 3
    if squeeze:
        xs = T.reshape(xs, (1,) + xs.shape)
        xq = T.reshape(xq, (1,) + xq.shape)
    if xs.shape != xq.shape:
        raise T.ShapeError(f"correlation_4d shape mismatch {xs.shape} vs {xq.shape}")
    ns = T.l2_normalize(xs, axis=1)
    nq = T.l2_normalize(xq, axis=1)
    a = T.einsum2("pchw,pcyx->phwyx", ns, nq)
    if squeeze:
        a = T.reshape(a, a.shape[1:])
    return CorrelationTensor(a)


def _corr_view(a):
    """(P,H,W,H,W) -> (P,1,H,W,HW): last pair of axes flattened as the
    depthwise 'time' dimension of the 3D conv."""
    p, h, w, h2, w2 = a.shape
    return T.reshape(a, (p, 1, h, w, h2 * w2))


def _corr_unview(a, h, w):
    p = a.shape[0]
    return T.reshape(a, (p, h, w, h, w))


def _corr_transpose(a):
    return T.transpose(a, (0, 3, 4, 1, 2))


def dca_refine(A, params):
    """Two rounds of crosswise 3D-conv refinement of the correlation tensor;
    shape preserved."""
    a = A.tensor if isinstance(A, CorrelationTensor) else A
    squeeze = a.data.ndim == 4
    if squeeze:
        a = T.reshape(a, (1,) + a.shape)
    _, h, w, _, _ = a.shape

    def conv(x, wk, bk):
        return T.conv3d(x, wk.value, bk.value, stride=1, padding=1)

    path1 = _corr_unview(conv(_corr_view(a), params.conv1_w, params.conv1_b), h, w)
    path2 = _corr_unview(
        conv(_corr_view(_corr_transpose(a)), params.conv1_w, params.conv1_b), h, w)
    a1 = path1 + _corr_transpose(path2)

    path_a = _corr_unview(conv(_corr_view(a1), params.conv_a_w, params.conv_a_b), h, w)
    path_b = _corr_unview(
        conv(_corr_view(_corr_transpose(a1)), params.conv_b_w, params.conv_b_b), h, w)
    out = path_a + _corr_transpose(path_b)
    if squeeze:
        out = T.reshape(out, out.shape[1:])
    return CorrelationTensor(out)


def attention_from_correlation(A_ref, side, temperature):
    """Average the refined correlations over the opposite side and softmax
    over this side's positions at the given temperature."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    a = A_ref.tensor if isinstance(A_ref, CorrelationTensor) else A_ref
    squeeze = a.data.ndim == 4
    if squeeze:
        a = T.reshape(a, (1,) + a.shape)
    p, h, w, _, _ = a.shape
    if side == "query":
        logits = T.tmean(a, axis=(1, 2))       # mean over support positions
    elif side == "support":
        logits = T.tmean(a, axis=(3, 4))       # mean over query positions
    else:
        raise ValueError(f"unknown side {side!r}")
    logits = T.elementwise("scale", logits, 1.0 / temperature)
    flat = T.softmax(T.reshape(logits, (p, h * w)), axis=-1)
    out = T.reshape(flat, (p, h, w))
    if squeeze:
        out = T.reshape(out, (h, w))
    return AttentionMap(out, side=side, temperature=temperature)


def modulate(F_star, A_side):
    """Attention-weighted spatial pooling of F* to a per-channel vector."""
    x = F_star.tensor if isinstance(F_star, FeatureMap) else F_star
    att = A_side.tensor if isinstance(A_side, AttentionMap) else A_side
    squeeze = x.data.ndim == 3
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
        att = T.reshape(att, (1,) + att.shape)
    out = T.einsum2("phw,pchw->pc", att, x)
    if squeeze:
        out = T.reshape(out, (out.shape[1],))
    return out


def dcm_forward(protos, queries, params, uniform_attention=False):
    """Per-class co-attention between every query and every class prototype.

    protos: (N,C,H,W) modulated class prototypes; queries: (Q,C,H,W) [or a
    single (C,H,W) query].  Returns pooled representations
    (F_hat_s, F_hat_q), each (Q,N,C).
    """
    pt = protos.tensor if isinstance(protos, FeatureMap) else protos
    qt = queries.tensor if isinstance(queries, FeatureMap) else queries
    squeeze = qt.data.ndim == 3
    if squeeze:
        qt = T.reshape(qt, (1,) + qt.shape)
    n, c, h, w = pt.shape
    nq = qt.shape[0]
    fs = T.reshape(T.broadcast_to(T.reshape(pt, (1, n, c, h, w)),
                                  (nq, n, c, h, w)), (nq * n, c, h, w))
    fq = T.reshape(T.broadcast_to(T.reshape(qt, (nq, 1, c, h, w)),
                                  (nq, n, c, h, w)), (nq * n, c, h, w))
    a = correlation_4d(fs, fq)
    if uniform_attention:
        flat = np.full((nq * n, h, w), 1.0 / (h * w), dtype=pt.dtype)
        att_s = AttentionMap(T.Tensor(flat), "support", params.temperature)
        att_q = AttentionMap(T.Tensor(flat), "query", params.temperature)
    else:
        a_ref = dca_refine(a, params.dca)
        att_s = attention_from_correlation(a_ref, "support", params.temperature)
        att_q = attention_from_correlation(a_ref, "query", params.temperature)
    f_hat_s = T.reshape(modulate(fs, att_s), (nq, n, c))
    f_hat_q = T.reshape(modulate(fq, att_q), (nq, n, c))
    if squeeze:
        f_hat_s = T.reshape(f_hat_s, (n, c))
        f_hat_q = T.reshape(f_hat_q, (n, c))
    return f_hat_s, f_hat_q
