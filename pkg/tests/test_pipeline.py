import math

import numpy as np
import pytest

from mdgcl.checkpoint import Checkpoint
from mdgcl.dimred import apply_map, fit_map
from mdgcl.errors import ValidationError
from mdgcl.graph import UNLABELED, FeatureGraph
from mdgcl.losses import PairBatchKernel, reference_pretrain_loss
from mdgcl.neural import grad_check, init_attention
from mdgcl.pipeline import (
    FinetuneConfig,
    FinetunedModel,
    PretrainConfig,
    domain_separation,
    enhance_target,
    evaluate_metrics,
    few_shot_split,
    finetune,
    pretrain,
    run_pretraining,
    scratch_baseline,
    source_embeddings,
)
from mdgcl.verify import finetune_fixture, pair_loss_fixture, synth_domains

SMALL = PretrainConfig(epochs=2, batch_size=16, dim_target=8, hidden=16, K=4, walk_len=6, seed=3)
SMALL_FT = FinetuneConfig(epochs=15, lr=1e-2, heads=2, hidden=16, dim_target=8, seed=1)


@pytest.fixture(scope="module")
def sources():
    return synth_domains(2, num_nodes=30, feature_dim=10)


@pytest.fixture(scope="module")
def ckpt(sources):
    return pretrain(sources, SMALL)


@pytest.fixture(scope="module")
def target():
    return synth_domains(1, num_nodes=36, feature_dim=14, seed=20)[0]


def test_pretrain_checkpoint_contents(ckpt):
    assert set(ckpt.learned_names()) == {"gcn.W1", "gcn.W2", "proj_pre.W", "token.0", "token.1", "vmap.0", "vmap.1"}
    assert ckpt["gcn.W1"].shape == (8, 16) and ckpt["gcn.W2"].shape == (16, 16)
    assert ckpt["proj_pre.W"].shape == (16, 2)
    assert ckpt["vmap.0"].shape == (10, 8)
    cfg = ckpt.config()
    assert cfg["K"] == 4 and cfg["epochs"] == 2 and cfg["N"] == 12


def test_pretrain_tokens_are_mapped_sums(sources, ckpt):
    for i, g in enumerate(sources):
        np.testing.assert_allclose(ckpt[f"token.{i}"], (g.features @ ckpt[f"vmap.{i}"]).sum(axis=0), rtol=1e-12)


def test_pretrain_deterministic(sources, ckpt):
    assert pretrain(sources, SMALL).to_bytes() == ckpt.to_bytes()
    other = pretrain(sources, PretrainConfig(**{**SMALL.__dict__, "seed": 4}))
    assert other.to_bytes() != ckpt.to_bytes()


def test_pretrain_needs_two_domains(sources):
    with pytest.raises(ValidationError):
        pretrain(sources[:1], SMALL)


def test_pretrain_loss_decreases_with_holdout():
    doms = synth_domains(2, num_nodes=60, feature_dim=10, seed=7)
    cfg = PretrainConfig(epochs=8, batch_size=16, lr=1e-3, dim_target=8, hidden=16, K=8, walk_len=8, holdout=0.2)
    result = run_pretraining(doms, cfg)
    assert len(result.epoch_losses) == 8 and len(result.holdout_accuracy) == 8
    assert result.epoch_losses[-1] < result.initial_loss
    assert all(0.0 <= a <= 1.0 for a in result.holdout_accuracy)


def test_fast_kernel_matches_reference():
    samples, params = pair_loss_fixture(seed=3)
    kernel = PairBatchKernel(samples)
    kernel.chunk_rows = 20
    fast_loss, fast = kernel.loss(params, samples)
    ref_loss, ref = reference_pretrain_loss(params, samples)
    assert fast_loss == pytest.approx(ref_loss, rel=1e-12)
    for name in ref:
        np.testing.assert_allclose(fast[name], ref[name], rtol=1e-10, atol=1e-12)


def test_fast_kernel_with_unused_feature_columns():
    samples, params = pair_loss_fixture(dim=16, seed=1)
    # 12 raw features mapped to 16 columns: the last four are zero everywhere
    kernel = PairBatchKernel(samples)
    assert len(kernel._cols) == 12
    fast_loss, fast = kernel.loss(params, samples)
    ref_loss, ref = reference_pretrain_loss(params, samples)
    assert fast_loss == pytest.approx(ref_loss, rel=1e-12)
    np.testing.assert_allclose(fast["gcn.W1"], ref["gcn.W1"], rtol=1e-10, atol=1e-12)
    assert not fast["gcn.W1"][12:].any()


def test_pretraining_loss_gradients():
    samples, params = pair_loss_fixture()
    report = grad_check(lambda p: reference_pretrain_loss(p, samples), params)
    assert report["passed"], report


def test_finetune_loss_gradients():
    problem, params = finetune_fixture()
    report = grad_check(problem.loss, params)
    assert report["passed"], report


def test_few_shot_split_example():
    labels = [0] * 10 + [1] * 10
    split = few_shot_split(labels, 1, np.random.default_rng(0))
    assert len(split.train_ids) == 2 and len(split.val_ids) == 2 and len(split.test_ids) == 16
    assert sorted(np.asarray(labels)[split.train_ids].tolist()) == [0, 1]


def test_few_shot_split_small_rest():
    split = few_shot_split([0, 0, 1, 1, 1], 1, np.random.default_rng(0))
    assert len(split.val_ids) == 1 and len(split.test_ids) == 2


def test_few_shot_split_partitions_labeled_ids():
    rng = np.random.default_rng(5)
    for trial in range(30):
        labels = rng.integers(-1, 4, size=60).tolist()
        labels = [None if y == -1 else y for y in labels] + [0, 1, 2, 3] * 3
        m = int(rng.integers(1, 4))
        split = few_shot_split(labels, m, np.random.default_rng(trial))
        parts = [set(split.train_ids.tolist()), set(split.val_ids.tolist()), set(split.test_ids.tolist())]
        assert not (parts[0] & parts[1]) and not (parts[0] & parts[2]) and not (parts[1] & parts[2])
        labeled = {i for i, y in enumerate(labels) if y is not None}
        assert parts[0] | parts[1] | parts[2] == labeled
        counts = np.bincount(np.asarray(labels, dtype=object)[split.train_ids].astype(int))
        assert set(counts.tolist()) == {m}


def test_few_shot_split_errors():
    with pytest.raises(ValidationError, match="class 1"):
        few_shot_split([0, 0, 0, 1], 2, np.random.default_rng(0))
    with pytest.raises(ValidationError):
        few_shot_split([None, None], 1, np.random.default_rng(0))


def test_metrics_hand_example():
    m = evaluate_metrics([0, 0], [0, 1], 2)
    assert m.accuracy == 0.5 and m.macro_f1 == pytest.approx(1 / 3, abs=1e-15)


def test_metrics_perfect_and_missing_class():
    assert evaluate_metrics([0, 1, 2], [0, 1, 2], 3).macro_f1 == 1.0
    # class 2 never appears: it contributes F1 = 0 to the macro average
    assert evaluate_metrics([0, 1], [0, 1], 3).macro_f1 == pytest.approx(2 / 3)


def test_metrics_relabel_invariance():
    rng = np.random.default_rng(2)
    for _ in range(20):
        preds, truth = rng.integers(0, 4, size=30), rng.integers(0, 4, size=30)
        perm = rng.permutation(4)
        a = evaluate_metrics(preds, truth, 4)
        b = evaluate_metrics(perm[preds], perm[truth], 4)
        assert a.accuracy == b.accuracy and math.isclose(a.macro_f1, b.macro_f1, rel_tol=1e-12)


def test_metrics_validation():
    with pytest.raises(ValidationError):
        evaluate_metrics([0, 3], [0, 1], 2)
    with pytest.raises(ValidationError):
        evaluate_metrics([], [], 2)


def test_domain_separation_example():
    emb = np.array([[0.0, 0.0], [2.0, 0.0], [10.0, 0.0], [10.0, 2.0]])
    stats = domain_separation(emb, [0, 0, 1, 1])
    assert stats["intra_mean"] == {0: 1.0, 1: 1.0}
    assert stats["inter"][(0, 1)] == pytest.approx(math.hypot(9.0, 1.0))


def test_domain_separation_gaussian_centroids():
    rng = np.random.default_rng(4)
    means = np.array([[0.0, 0.0, 0.0], [3.0, -1.0, 2.0]])
    emb = np.vstack([rng.normal(size=(1000, 3)) + mu for mu in means])
    stats = domain_separation(emb, [0] * 1000 + [1] * 1000)
    for d in (0, 1):
        assert np.all(np.abs(stats["centroids"][d] - means[d]) < 3 / math.sqrt(1000))


def test_domain_separation_errors():
    with pytest.raises(ValidationError):
        domain_separation(np.ones((3, 2)), [0, 0, 0])
    with pytest.raises(ValidationError):
        domain_separation(np.ones((3, 2)), [0, 1, 1], domains=[0, 5])


def test_source_embeddings_shape(sources, ckpt):
    embs = source_embeddings(ckpt, sources)
    assert [e.shape for e in embs] == [(30, 16), (30, 16)]


def test_enhance_target_shape_and_offset(target, ckpt):
    attn = init_attention(np.random.default_rng(0), 8, 2)
    out = enhance_target(target, ckpt, attn)
    assert out.shape == (36, 8)
    zero = {n: np.zeros_like(t) for n, t in attn.items()}
    plain = enhance_target(target, ckpt, zero)
    # zero value projections add nothing, leaving the mapped features
    np.testing.assert_array_equal(plain, apply_map(target.features, fit_map(target.features, 8)))
    assert not np.allclose(out, plain)


def split_for(g, seed=0):
    return few_shot_split(g.labels, 2, np.random.default_rng(seed))


def test_finetune_contract(target, ckpt):
    model, metrics = finetune(ckpt, target, "node", split_for(target), SMALL_FT)
    assert 0.0 <= metrics.accuracy <= 1.0 and 0.0 <= metrics.macro_f1 <= 1.0
    assert model.tokens.shape == (2, 8) and 1 <= model.best_epoch <= SMALL_FT.epochs
    assert {"attn.h0.Wq", "attn.h1.Wv", "proj_ft.W", "gcn.W1"} <= set(model.params)
    again, metrics2 = finetune(ckpt, target, "node", split_for(target), SMALL_FT)
    assert metrics == metrics2
    assert again.to_checkpoint().to_bytes() == model.to_checkpoint().to_bytes()


def test_finetune_rejects_indivisible_heads(target, ckpt):
    with pytest.raises(ValidationError, match="heads"):
        finetune(ckpt, target, "node", split_for(target), FinetuneConfig(heads=3, epochs=1, hidden=16, dim_target=8))


def test_scratch_baseline_contract(target):
    model, metrics = scratch_baseline(target, "node", split_for(target), SMALL_FT)
    assert model.tokens is None and not any(n.startswith("attn.") for n in model.params)
    assert model.params["gcn.W1"].shape == (8, 16)
    assert scratch_baseline(target, "node", split_for(target), SMALL_FT)[1] == metrics


def test_graph_task(target, ckpt):
    model, metrics = finetune(ckpt, target, "graph", split_for(target), SMALL_FT)
    assert 0.0 <= metrics.accuracy <= 1.0
    preds = model.predict(target, [0, 1, 2])
    assert preds.shape == (3,)


def test_unknown_task_and_unlabeled_split(target, ckpt):
    with pytest.raises(ValidationError):
        finetune(ckpt, target, "edge", split_for(target), SMALL_FT)
    labels = target.labels.copy()
    labels[:] = UNLABELED
    bare = FeatureGraph(target.num_nodes, target.edges, target.features, labels)
    with pytest.raises(ValidationError):
        scratch_baseline(bare, "node", split_for(target), SMALL_FT)


def test_separable_target_reaches_full_accuracy():
    # two cliques with opposite one-hot features
    n = 20
    edges = [(u, v) for u in range(10) for v in range(u + 1, 10)] + [(u, v) for u in range(10, n) for v in range(u + 1, n)]
    x = np.zeros((n, 4))
    x[:10, 0] = 1.0
    x[10:, 1] = 1.0
    g = FeatureGraph(n, edges, x, [0] * 10 + [1] * 10)
    cfg = FinetuneConfig(epochs=30, lr=1e-2, hidden=8, dim_target=4)
    _, metrics = scratch_baseline(g, "node", split_for(g), cfg)
    assert metrics.accuracy == 1.0 and metrics.macro_f1 == 1.0


def test_checkpoint_round_trip_gives_identical_finetune(tmp_path, target, ckpt):
    ckpt.save(tmp_path / "pre.bin")
    loaded = Checkpoint.load(tmp_path / "pre.bin")
    a, ma = finetune(ckpt, target, "node", split_for(target), SMALL_FT)
    b, mb = finetune(loaded, target, "node", split_for(target), SMALL_FT)
    assert ma == mb and a.to_checkpoint().to_bytes() == b.to_checkpoint().to_bytes()


def test_finetuned_model_round_trip(tmp_path, target, ckpt):
    model, _ = finetune(ckpt, target, "graph", split_for(target), SMALL_FT)
    model.to_checkpoint().save(tmp_path / "ft.bin")
    back = FinetunedModel.from_checkpoint(Checkpoint.load(tmp_path / "ft.bin"))
    assert back.task == "graph" and back.num_classes == model.num_classes
    ids = np.arange(target.num_nodes)
    assert np.array_equal(back.predict(target, ids), model.predict(target, ids))


def test_from_checkpoint_rejects_pretrained(ckpt):
    with pytest.raises(ValidationError):
        FinetunedModel.from_checkpoint(ckpt)
