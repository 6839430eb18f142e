import numpy as np
import pytest

from fewgrain import data, episodic, mfn, pipeline, testkit
from fewgrain import tensor as T
from fewgrain.backbone import BackboneConfig


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    spec = data.SynthSpec(num_classes=10, samples_per_class=8, side=32, seed=1)
    return data.generate_synthetic(spec, root)


def tiny_config(**kw):
    base = dict(way=3, shot=2, queries=2, meta_batch=1, iterations=2, seed=0,
                backbone=BackboneConfig(block_channels=8, input_side=32),
                mfn=mfn.MfnConfig(M=3, U=5, V=5))
    base.update(kw)
    return episodic.TrainConfig(**base)


def test_sample_episode_disjoint_and_deterministic():
    sizes = [10] * 8
    rng1 = episodic.episode_rng(3, 7)
    rng2 = episodic.episode_rng(3, 7)
    ep1 = episodic.sample_episode(sizes, 5, 2, 3, rng1)
    ep2 = episodic.sample_episode(sizes, 5, 2, 3, rng2)
    assert ep1.support == ep2.support and ep1.query == ep2.query
    per_class_s = {}
    per_class_q = {}
    for c, s in ep1.support:
        per_class_s.setdefault(c, set()).add(s)
    for c, s in ep1.query:
        per_class_q.setdefault(c, set()).add(s)
    for c in per_class_s:
        assert not (per_class_s[c] & per_class_q[c])
        assert len(per_class_s[c]) == 2 and len(per_class_q[c]) == 3


def test_sample_episode_insufficient_data():
    with pytest.raises(ValueError):
        episodic.sample_episode([5, 5], 3, 1, 1, episodic.episode_rng(0, 0))
    with pytest.raises(ValueError):
        episodic.sample_episode([3, 3, 3], 3, 2, 2, episodic.episode_rng(0, 0))


def test_classify_metrics_and_tie_rule():
    fs = np.array([[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]])
    fq = np.array([[[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]]])
    scores, pred = episodic.classify(fs, fq, "cosine")
    assert pred[0] == 0  # tie between classes 0 and 1 goes to the lowest
    _, pe = episodic.classify(fs, fq, "euclidean")
    assert pe[0] == 0
    _, pm = episodic.classify(fs, fq, "manhattan")
    assert pm[0] == 0


def test_classify_zero_vector_cosine_guard():
    fs = np.zeros((1, 2, 3))
    fq = np.ones((1, 2, 3))
    scores, _ = episodic.classify(fs, fq, "cosine")
    assert scores == pytest.approx(np.zeros((1, 2)))


def test_unit_sphere_cosine_euclidean_same_ranking():
    rng = np.random.default_rng(0)
    fs = rng.standard_normal((4, 5, 8))
    fq = rng.standard_normal((4, 5, 8))
    fs /= np.linalg.norm(fs, axis=-1, keepdims=True)
    fq /= np.linalg.norm(fq, axis=-1, keepdims=True)
    _, pc = episodic.classify(fs, fq, "cosine")
    _, pe = episodic.classify(fs, fq, "euclidean")
    assert np.array_equal(pc, pe)


def test_contrastive_loss_closed_form():
    scores = T.Tensor(np.array([1.0, 0, 0, 0, 0]))
    lc = episodic.loss_contrastive(scores, 0, 0.2)
    assert float(lc.data) == pytest.approx(np.log(1 + 4 * np.exp(-5.0)),
                                           abs=1e-6)


def test_contrastive_rejects_bad_temperature():
    with pytest.raises(ValueError):
        episodic.loss_contrastive(T.Tensor(np.zeros(3)), 0, 0.0)


def test_total_loss_weighting():
    lc = T.Tensor(np.asarray(1.0))
    la = T.Tensor(np.asarray(2.0))
    assert float(episodic.total_loss(lc, la, 0.7).data) == pytest.approx(2.4)
    with pytest.raises(ValueError):
        episodic.total_loss(lc, la, -1.0)


def test_aux_loss_label_range_guard():
    fq = T.Tensor(np.zeros((2, 4, 2, 2)))
    w = T.Tensor(np.zeros((4, 3)))
    b = T.Tensor(np.zeros(3))
    with pytest.raises(ValueError):
        episodic.loss_aux(fq, [0, 5], w, b)


def test_ci_formula_example():
    hw = episodic.ci95_halfwidth([0.8, 1.0, 0.6])
    assert hw == pytest.approx(1.96 * 0.2 / np.sqrt(3), abs=1e-9)
    assert episodic.ci95_halfwidth([0.5]) == 0.0


def test_report_text_round_numbers():
    rep = episodic.make_report([0.5, 0.75], "cosine")
    text = rep.to_text()
    assert "episodes=2" in text
    assert "mean_acc=0.625" in text
    assert "metric=cosine" in text
    assert "ep 0 0.5" in text and "ep 1 0.75" in text


def test_meta_train_and_eval_deterministic(corpus):
    cfg = tiny_config()
    m1, log1 = episodic.meta_train(corpus, cfg)
    m2, log2 = episodic.meta_train(corpus, cfg)
    assert log1 == log2
    for p1, p2 in zip(m1.parameters(), m2.parameters()):
        assert np.array_equal(p1.value.data, p2.value.data)


def test_meta_train_log_format(corpus):
    _, log = episodic.meta_train(corpus, tiny_config())
    assert log[0].startswith("iter=0 loss=")
    assert " Lc=" in log[0] and " La=" in log[0]


def test_zero_alpha_keeps_initialization(corpus):
    cfg = tiny_config(alpha=0.0)
    train = episodic.SplitData(corpus, "train", 32)
    init = pipeline.init_model(
        pipeline.ModelConfig(backbone=cfg.backbone, mfn=cfg.mfn,
                             num_train_classes=len(train.classes)),
        cfg.seed)
    model, _ = episodic.meta_train(corpus, cfg)
    for a, b in zip(init.parameters(), model.parameters()):
        assert np.array_equal(a.value.data, b.value.data)


def test_eval_jobs_bit_identical(corpus):
    model, _ = episodic.meta_train(corpus, tiny_config())
    r1 = episodic.evaluate(corpus, model, episodes=6, N=2, K=2, P=2, jobs=1)
    r8 = episodic.evaluate(corpus, model, episodes=6, N=2, K=2, P=2, jobs=8)
    assert r1.to_text() == r8.to_text()


def test_degenerate_pipeline_equals_protonet(corpus):
    from fewgrain import backbone
    cfg = tiny_config(use_mfn=False, use_bcc=False, use_dca=False,
                      iterations=1)
    model, _ = episodic.meta_train(corpus, cfg)
    split = episodic.SplitData(corpus, "train", 32)
    for i in range(5):
        ep = episodic.sample_episode(split.sizes, 3, 2, 2,
                                     episodic.episode_rng(9, i))
        images = np.concatenate([split.gather(ep.support),
                                 split.gather(ep.query)])
        with T.no_grad():
            out = pipeline.forward_episode(model, images,
                                           ep.support_labels(),
                                           len(ep.support), training=False)
            embs = backbone.embed(T.Tensor(images.astype(np.float32)),
                                  model.backbone_params,
                                  training=False).tensor.data
        _, preds = episodic.classify(out["f_hat_s"], out["f_hat_q"], "cosine")
        want = testkit.protonet_reference(embs[:len(ep.support)],
                                          ep.support_labels(),
                                          embs[len(ep.support):], "cosine")
        assert list(preds) == list(want)


def test_scale_invariance_of_predictions(corpus):
    model, _ = episodic.meta_train(corpus, tiny_config())
    split = episodic.SplitData(corpus, "train", 32)
    ep = episodic.sample_episode(split.sizes, 3, 2, 2,
                                 episodic.episode_rng(11, 0))
    images = np.concatenate([split.gather(ep.support),
                             split.gather(ep.query)])
    with T.no_grad():
        out = pipeline.forward_episode(model, images, ep.support_labels(),
                                       len(ep.support), training=False)
    _, base = episodic.classify(out["f_hat_s"], out["f_hat_q"], "cosine")
    for lam in (0.1, 10.0):
        _, scaled = episodic.classify(out["f_hat_s"].data,
                                      lam * out["f_hat_q"].data, "cosine")
        assert np.array_equal(base, scaled)


def test_episode_class_frequency_uniform():
    rng = episodic.episode_rng(0, 12345)
    counts = np.zeros(20)
    draws = 10000
    for _ in range(draws):
        ep = episodic.sample_episode([10] * 20, 5, 1, 1, rng)
        for c in ep.class_positions:
            counts[c] += 1
    p = 5 / 20
    sigma = np.sqrt(draws * p * (1 - p))
    assert np.abs(counts - draws * p).max() <= 3 * sigma


def test_aux_loss_uniform_logits_is_log_n():
    fq = T.Tensor(np.random.default_rng(0).random((4, 6, 2, 2)))
    w = T.Tensor(np.zeros((6, 7)))
    b = T.Tensor(np.zeros(7))
    loss = episodic.loss_aux(fq, [0, 3, 5, 6], w, b)
    assert float(loss.data) == pytest.approx(np.log(7), rel=1e-6)


def test_contrastive_monotone_in_temperature():
    scores = T.Tensor(np.array([0.9, 0.2, 0.1]))
    losses = [float(episodic.loss_contrastive(scores, 0, t).data)
              for t in (0.5, 0.2, 0.1)]
    assert losses[0] > losses[1] > losses[2]


def test_one_sgd_step_descends(corpus):
    train = episodic.SplitData(corpus, "train", 32)
    descended = 0
    for seed in range(10):
        cfg = tiny_config(seed=seed, alpha=0.01)
        model = episodic.build_model(cfg,
                                     num_train_classes=len(train.classes))
        ep = episodic.sample_episode(train.sizes, 3, 2, 2,
                                     episodic.episode_rng(seed, 0))
        loss0, _, _, _ = episodic.episode_losses(model, train, ep, cfg.mu,
                                                 cfg.t, training=True)
        grads = T.backward(loss0)
        for p in model.parameters():
            g = grads.get(p.name)
            if g is not None:
                p.assign(p.value.data - cfg.alpha * g.data)
        loss1, _, _, _ = episodic.episode_losses(model, train, ep, cfg.mu,
                                                 cfg.t, training=True)
        descended += int(float(loss1.data) < float(loss0.data))
    assert descended >= 9


def test_untrained_eval_near_chance(corpus):
    cfg = tiny_config(alpha=0.0, iterations=1)
    model, _ = episodic.meta_train(corpus, cfg)
    rep = episodic.evaluate(corpus, model, episodes=30, N=2, K=2, P=2,
                            seed=3, split="train")
    n_queries = 30 * 4
    sigma = np.sqrt(0.5 * 0.5 / n_queries)
    assert abs(rep.mean_acc - 0.5) <= 3 * sigma + 0.05


def test_short_protocol_score_deterministic(corpus):
    cfg = tiny_config(way=2, select_iters=2)
    fset = mfn.FrequencyIndexSet([(0, 0, 0.0)], (2, 2))
    s1 = episodic.short_protocol_score(corpus, cfg, fset, 2, seed=4)
    s2 = episodic.short_protocol_score(corpus, cfg, fset, 2, seed=4)
    assert s1 == s2
