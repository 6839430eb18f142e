"""Independent numerical oracles for the acceptance tests.

Everything in here is a deliberately plain loop/numpy implementation that
shares no code with the modules it checks; it may only call forward ops of
the tensor engine through the supplied closures.
"""

from __future__ import annotations

import numpy as np

from .tensor import NumericsError, Tensor, backward

REL_ERR_FLOOR = 1e-8
DENSE_MASK = -1e30


def default_step(precision):
    return 1e-3 if precision == 32 else 1e-5


def default_atol(precision):
    # below this, both gradients are indistinguishable from round-off and
    # relative comparison is meaningless (e.g. structurally-zero gradients)
    return 1e-5 if precision == 32 else 1e-9


def gradcheck(op_closure, inputs, h=None, precision=64, max_elements=None,
              rng=None, atol=None):
    """Worst relative error between analytic gradients and central finite
    differences of a scalar-valued closure.

    ``max_elements`` caps the number of probed elements per input (sampled
    deterministically) so large parameter blocks stay affordable.
    """
    if h is None:
        h = default_step(precision)
    if atol is None:
        atol = default_atol(precision)
    dtype = np.float64 if precision == 64 else np.float32
    inputs = [Tensor(np.asarray(t.data if isinstance(t, Tensor) else t,
                                dtype=dtype), requires_grad=True)
              for t in inputs]
    loss = op_closure(*inputs)
    if not np.isfinite(loss.data):
        raise NumericsError("gradcheck closure produced non-finite loss")
    analytic = backward(loss, wrt=inputs)

    def eval_at(values):
        # probe in float64 regardless of the checked precision: the numeric
        # side estimates the true derivative, the analytic side carries the
        # precision under test
        out = op_closure(*[Tensor(v.astype(np.float64)) for v in values])
        if not np.isfinite(out.data):
            raise NumericsError("gradcheck probe produced non-finite loss")
        return float(out.data)

    worst = 0.0
    for k, t in enumerate(inputs):
        flat_idx = np.arange(t.size)
        if max_elements is not None and t.size > max_elements:
            gen = rng or np.random.default_rng(0)
            flat_idx = gen.choice(t.size, size=max_elements, replace=False)
            flat_idx.sort()
        base = [u.data.astype(np.float64) for u in inputs]
        ana = analytic[k].data.reshape(-1)
        for idx in flat_idx:
            orig = base[k].reshape(-1)[idx]
            base[k].reshape(-1)[idx] = orig + h
            up = eval_at(base)
            base[k].reshape(-1)[idx] = orig - h
            down = eval_at(base)
            base[k].reshape(-1)[idx] = orig
            num = (up - down) / (2 * h)
            if max(abs(ana[idx]), abs(num)) <= atol:
                continue
            denom = max(abs(ana[idx]), abs(num), REL_ERR_FLOOR)
            worst = max(worst, abs(ana[idx] - num) / denom)
    return worst


def dense_cross_attention_reference(F, params):
    """Full dense attention with off-cross logits masked to -1e30, gathered
    with the value map plus residual.  Double loop, single (C,H,W) map."""
    f = np.asarray(F.tensor.data if hasattr(F, "tensor") else
                   (F.data if isinstance(F, Tensor) else F), dtype=np.float64)
    c, h, w = f.shape

    def conv1x1(wk, bk):
        wm = np.asarray(wk.value.data, dtype=np.float64)[:, :, 0, 0]
        bv = np.asarray(bk.value.data, dtype=np.float64)
        return np.einsum("oc,chw->ohw", wm, f) + bv[:, None, None]

    q = conv1x1(params.wq, params.bq)
    k = conv1x1(params.wk, params.bk)
    v = conv1x1(params.wv, params.bv)

    out = np.zeros_like(f)
    for i in range(h):
        for j in range(w):
            logits = np.empty(h * w)
            for a in range(h):
                for b in range(w):
                    on_cross = (a == i) or (b == j)
                    dot = float(q[:, i, j] @ k[:, a, b])
                    logits[a * w + b] = dot if on_cross else DENSE_MASK
            e = np.exp(logits - logits.max())
            probs = e / e.sum()
            acc = np.zeros(c)
            for a in range(h):
                for b in range(w):
                    acc += probs[a * w + b] * v[:, a, b]
            out[:, i, j] = acc + f[:, i, j]
    return out


def neighborhood_reference(F, U, V):
    """Literal double-loop neighborhood representation, (C,H,W,U,V)."""
    f = np.asarray(F.data if isinstance(F, Tensor) else F, dtype=np.float64)
    c, h, w = f.shape
    ru, rv = (U - 1) // 2, (V - 1) // 2
    s = np.zeros((c, h, w, U, V))
    eps = 1e-8
    for i in range(h):
        for j in range(w):
            fx = f[:, i, j]
            nx = np.linalg.norm(fx)
            ux = fx / nx if nx >= eps else np.zeros(c)
            for du in range(-ru, ru + 1):
                for dv in range(-rv, rv + 1):
                    a, b = i + du, j + dv
                    if not (0 <= a < h and 0 <= b < w):
                        continue
                    weight = 1.0 / (np.hypot(du, dv) + 1.0)
                    fe = f[:, a, b] * weight
                    ne = np.linalg.norm(fe)
                    ue = fe / ne if ne >= eps else np.zeros(c)
                    s[:, i, j, du + ru, dv + rv] = ux * ue
    return s


def protonet_reference(support_embs, support_labels, query_embs,
                       metric="cosine"):
    """Mean-pooled nearest-prototype classifier (the ablation baseline).

    Embeddings are (B,C,H,W) arrays; returns predicted class ids in the
    sorted-label order.
    """
    sup = np.asarray(support_embs, dtype=np.float64).mean(axis=(2, 3))
    qry = np.asarray(query_embs, dtype=np.float64).mean(axis=(2, 3))
    classes = sorted(set(support_labels))
    protos = np.stack([sup[[i for i, y in enumerate(support_labels) if y == cls]]
                      .mean(axis=0) for cls in classes])
    preds = []
    for qv in qry:
        scores = []
        for pv in protos:
            if metric == "cosine":
                nq, npv = np.linalg.norm(qv), np.linalg.norm(pv)
                scores.append(float(qv @ pv / (nq * npv))
                              if nq >= 1e-8 and npv >= 1e-8 else 0.0)
            elif metric == "euclidean":
                scores.append(-float(np.linalg.norm(qv - pv)))
            elif metric == "manhattan":
                scores.append(-float(np.abs(qv - pv).sum()))
            else:
                raise ValueError(f"unknown metric {metric!r}")
        preds.append(classes[int(np.argmax(scores))])
    return preds
