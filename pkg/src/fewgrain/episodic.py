"""Episode sampling, metric classification, losses, meta-training and the
episodic evaluation protocol (top-1 accuracy with 95% confidence interval).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import dcm, mfn, pipeline
from . import tensor as T
from .backbone import BackboneConfig
from .data import load_image

METRICS = ("cosine", "euclidean", "manhattan")


@dataclass
class TrainConfig:
    way: int = 5                 # N
    shot: int = 5                # K
    queries: int = 15            # P per class
    mu: float = 0.7              # aux loss weight
    t: float = 0.2               # contrastive temperature
    temperature: float = 2.0     # co-attention temperature T
    alpha: float = 0.1           # SGD learning rate
    meta_batch: int = 4
    iterations: int = 2000
    metric: str = "cosine"
    seed: int = 0
    loops: int = 2
    use_mfn: bool = True
    use_bcc: bool = True
    use_dca: bool = True
    val_every: int = 0           # 0 disables periodic validation
    val_episodes: int = 20
    select_iters: int = 20       # frequency-selection short protocol
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    mfn: mfn.MfnConfig = field(default_factory=mfn.MfnConfig)
    dtype: type = np.float32

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}")
        for name in ("way", "shot", "queries", "alpha", "t", "temperature"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass
class Episode:
    way: int
    shot: int
    queries: int
    class_positions: list      # split-class positions, ascending; local id = rank
    support: list              # [(class_pos, sample_idx)], grouped by class
    query: list

    def support_labels(self):
        rank = {c: i for i, c in enumerate(self.class_positions)}
        return [rank[c] for c, _ in self.support]

    def query_labels(self):
        rank = {c: i for i, c in enumerate(self.class_positions)}
        return [rank[c] for c, _ in self.query]


@dataclass
class EvalReport:
    episodes: int
    per_episode_acc: list
    mean_acc: float
    ci95_halfwidth: float
    metric: str

    def to_text(self):
        lines = [f"episodes={self.episodes}",
                 f"mean_acc={self.mean_acc:.9g}",
                 f"ci95={self.ci95_halfwidth:.9g}",
                 f"metric={self.metric}"]
        for i, acc in enumerate(self.per_episode_acc):
            lines.append(f"ep {i} {acc:.9g}")
        return "\n".join(lines) + "\n"


def ci95_halfwidth(per_episode_acc):
    accs = np.asarray(per_episode_acc, dtype=np.float64)
    if accs.size < 2:
        return 0.0
    return float(1.96 * accs.std(ddof=1) / np.sqrt(accs.size))


def make_report(per_episode_acc, metric):
    accs = list(map(float, per_episode_acc))
    return EvalReport(len(accs), accs, float(np.mean(accs)),
                      ci95_halfwidth(accs), metric)


TRAIN_STREAM = 0xFFFFFFFF  # outside any realistic episode index range


def episode_rng(seed, index):
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence((seed, index))))


def sample_episode(split_sizes, N, K, P, rng):
    """Uniform class choice without replacement, then uniform disjoint
    support/query sample choice per class.

    split_sizes: per-class sample counts for the split.
    """
    n_classes = len(split_sizes)
    if n_classes < N:
        raise ValueError(f"split has {n_classes} classes, need {N}")
    chosen = sorted(int(c) for c in rng.choice(n_classes, size=N, replace=False))
    support, query = [], []
    for cls in chosen:
        n = split_sizes[cls]
        if n < K + P:
            raise ValueError(f"class {cls} has {n} samples, need {K + P}")
        picks = rng.choice(n, size=K + P, replace=False)
        support += [(cls, int(s)) for s in picks[:K]]
        query += [(cls, int(s)) for s in picks[K:]]
    return Episode(N, K, P, chosen, support, query)


class SplitData:
    """Split samples materialized as arrays, indexed by class position."""

    def __init__(self, index, split, side, dtype=np.float32):
        self.classes = []
        self.arrays = []
        for name, paths in index.classes_for_split(split):
            self.classes.append(name)
            self.arrays.append(np.stack(
                [load_image(p, side) for p in paths]).astype(dtype))
        if not self.classes:
            raise ValueError(f"split {split!r} is empty")

    @property
    def sizes(self):
        return [a.shape[0] for a in self.arrays]

    def gather(self, refs):
        return np.stack([self.arrays[c][s] for c, s in refs])


def classify(f_hat_s, f_hat_q, metric="cosine"):
    """Scores and argmax class per query from paired (Q,N,C) pooled
    representations; distances enter as negative scores; ties go to the
    lowest class index."""
    fs = np.asarray(f_hat_s.data if isinstance(f_hat_s, T.Tensor) else f_hat_s,
                    dtype=np.float64)
    fq = np.asarray(f_hat_q.data if isinstance(f_hat_q, T.Tensor) else f_hat_q,
                    dtype=np.float64)
    if metric == "cosine":
        ns = np.linalg.norm(fs, axis=-1)
        nq = np.linalg.norm(fq, axis=-1)
        denom = ns * nq
        ok = (ns >= 1e-8) & (nq >= 1e-8)
        scores = np.where(ok, (fs * fq).sum(-1) / np.where(ok, denom, 1.0), 0.0)
    elif metric == "euclidean":
        scores = -np.linalg.norm(fs - fq, axis=-1)
    elif metric == "manhattan":
        scores = -np.abs(fs - fq).sum(-1)
    else:
        raise ValueError(f"unknown metric {metric!r}")
    return scores, scores.argmax(axis=-1)


def cross_entropy(logits, labels):
    """Mean softmax cross entropy; the shared kernel behind both losses."""
    labels = np.asarray(labels)
    logp = T.log_softmax(logits, axis=-1)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(labels)), labels] = 1.0
    picked = T.tsum(logp * T.Tensor(onehot))
    return T.elementwise("scale", picked, -1.0 / len(labels))


def loss_contrastive(scores, true_classes, t):
    """Softmax cross entropy over per-class pair similarities at
    temperature t."""
    if t <= 0:
        raise ValueError("contrastive temperature must be positive")
    squeeze = scores.data.ndim == 1
    s = T.reshape(scores, (1,) + scores.shape) if squeeze else scores
    labels = [true_classes] if np.isscalar(true_classes) else true_classes
    return cross_entropy(T.elementwise("scale", s, 1.0 / t), labels)


def loss_aux(f_tilde_q, global_labels, fc_w, fc_b):
    """Cross entropy of the globally average-pooled query features against
    the base-training classes."""
    x = f_tilde_q.tensor if hasattr(f_tilde_q, "tensor") else f_tilde_q
    squeeze = x.data.ndim == 3
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    labels = np.asarray([global_labels] if np.isscalar(global_labels)
                        else global_labels)
    if labels.max() >= fc_w.shape[1]:
        raise ValueError(f"label {labels.max()} outside the "
                         f"{fc_w.shape[1]}-class training head")
    gap = T.tmean(x, axis=(2, 3))
    logits = T.matmul(gap, fc_w) + fc_b
    return cross_entropy(logits, labels)


def total_loss(l_c, l_a, mu):
    if mu < 0:
        raise ValueError("mu must be nonnegative")
    return l_c + T.elementwise("scale", l_a, mu)


def episode_losses(model, split, episode, mu, t, training):
    """Forward one episode and return (loss_total, loss_c, loss_a, preds)."""
    images = np.concatenate([split.gather(episode.support),
                             split.gather(episode.query)])
    out = pipeline.forward_episode(model, images, episode.support_labels(),
                                   len(episode.support), training=training)
    l_c = loss_contrastive(out["scores"], episode.query_labels(), t)
    if mu > 0 and training:
        global_labels = [episode.class_positions[y]
                         for y in episode.query_labels()]
        l_a = loss_aux(out["f_tilde_q"], global_labels,
                       model.aux_w.value, model.aux_b.value)
    else:
        l_a = T.Tensor(np.zeros((), dtype=model.config.dtype))
    return total_loss(l_c, l_a, mu), l_c, l_a, out


def build_model(config, freq_set=None, num_train_classes=None):
    mcfg = pipeline.ModelConfig(
        backbone=config.backbone, mfn=config.mfn, loops=config.loops,
        temperature=config.temperature,
        num_train_classes=num_train_classes or 1,
        use_mfn=config.use_mfn, use_bcc=config.use_bcc,
        use_dca=config.use_dca, dtype=config.dtype)
    return pipeline.init_model(mcfg, config.seed, freq_set=freq_set)


def meta_train(index, config, freq_set=None, model=None, log=None):
    """Episodic SGD over the train split.

    Per meta-iteration: sample a batch of episodes, average the total loss,
    take one SGD step at rate alpha.  Returns (model, log lines).
    """
    train = SplitData(index, "train", config.backbone.input_side, config.dtype)
    if model is None:
        model = build_model(config, freq_set,
                            num_train_classes=len(train.classes))
    val = None
    if config.val_every > 0:
        val = SplitData(index, "val", config.backbone.input_side, config.dtype)
    rng = episode_rng(config.seed, TRAIN_STREAM)
    params = model.parameters()
    lines = []
    for it in range(config.iterations):
        losses, lcs, las = [], [], []
        for _ in range(config.meta_batch):
            ep = sample_episode(train.sizes, config.way, config.shot,
                                config.queries, rng)
            lt, lc, la, _ = episode_losses(model, train, ep, config.mu,
                                           config.t, training=True)
            losses.append(lt)
            lcs.append(float(lc.data))
            las.append(float(la.data))
        batch_loss = T.elementwise("scale", _sum_tensors(losses),
                                   1.0 / len(losses))
        grads = T.backward(batch_loss)
        if config.alpha != 0:
            for p in params:
                g = grads.get(p.name)
                if g is not None:
                    p.assign(p.value.data - config.alpha * g.data)
        line = (f"iter={it} loss={float(batch_loss.data):.9g} "
                f"Lc={float(np.mean(lcs)):.9g} La={float(np.mean(las)):.9g}")
        lines.append(line)
        if log:
            log(line)
        if val is not None and (it + 1) % config.val_every == 0:
            rep = evaluate_split(val, model, config.val_episodes, config.way,
                                 config.shot, config.queries, config.metric,
                                 seed=config.seed)
            line = f"iter={it} val_acc={rep.mean_acc:.9g}"
            lines.append(line)
            if log:
                log(line)
    return model, lines


def _sum_tensors(ts):
    acc = ts[0]
    for t in ts[1:]:
        acc = acc + t
    return acc


def _eval_one(split, model, ep_index, N, K, P, metric, seed):
    rng = episode_rng(seed, ep_index)
    episode = sample_episode(split.sizes, N, K, P, rng)
    images = np.concatenate([split.gather(episode.support),
                             split.gather(episode.query)])
    with T.no_grad():
        out = pipeline.forward_episode(model, images,
                                       episode.support_labels(),
                                       len(episode.support), training=False)
    _, preds = classify(out["f_hat_s"], out["f_hat_q"], metric)
    truth = np.asarray(episode.query_labels())
    return float((preds == truth).mean())


def evaluate_split(split, model, episodes, N, K, P, metric="cosine", seed=0,
                   jobs=1):
    """Top-1 accuracy over independently seeded episodes; results do not
    depend on execution order or parallelism degree."""
    if jobs <= 1:
        accs = [_eval_one(split, model, i, N, K, P, metric, seed)
                for i in range(episodes)]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            accs = list(pool.map(
                lambda i: _eval_one(split, model, i, N, K, P, metric, seed),
                range(episodes)))
    return make_report(accs, metric)


def evaluate(index, model, episodes=1200, N=5, K=5, P=15, metric="cosine",
             seed=0, jobs=1, split="test"):
    data = SplitData(index, split, model.config.backbone.input_side,
                     model.config.dtype)
    return evaluate_split(data, model, episodes, N, K, P, metric, seed, jobs)


def short_protocol_score(index, base_config, freq_set, eval_budget, seed):
    """Fixed short train+validate protocol used to score one frequency
    candidate; shared verbatim by all candidates."""
    cfg = replace(base_config, seed=seed, iterations=base_config.select_iters,
                  meta_batch=1, val_every=0,
                  mfn=mfn.MfnConfig(M=freq_set.M, U=base_config.mfn.U,
                                    V=base_config.mfn.V))
    model, _ = meta_train(index, cfg, freq_set=freq_set)
    val = SplitData(index, "val", cfg.backbone.input_side, cfg.dtype)
    rep = evaluate_split(val, model, eval_budget, cfg.way, cfg.shot,
                         cfg.queries, cfg.metric, seed=seed)
    return rep.mean_acc
