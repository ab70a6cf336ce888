import json

import numpy as np
import pytest

from graphrationale import autodiff as ad
from graphrationale import model as gm
from graphrationale.data import DatasetSplit, Episode, sample_episode
from graphrationale.encoders import readout
from graphrationale.exceptions import (
    ConfigurationError,
    DimensionError,
    TaskConstructionError,
    ValidationError,
)
from graphrationale.synthetic import GenConfig, generate_synthetic


def tiny_dataset(num_classes=3, per_class=12, seed=0, feature_dim=4):
    config = GenConfig(feature_dim=feature_dim, base_nodes_min=8, base_nodes_max=14)
    return generate_synthetic(num_classes, per_class, seed, config)


def first_of(graphs, label):
    return next(g for g in graphs if g.label == label)


def make_model(n_way=2, feature_dim=4, hidden=6, seed=0, encoder="gin"):
    config = gm.ModelConfig(
        feature_dim=feature_dim,
        n_way=n_way,
        hidden_dim=hidden,
        mask_hidden=6,
        predictor_hidden=6,
        encoder=encoder,
    )
    return gm.RationaleClassifier(config, np.random.default_rng(seed))


def make_episode(graphs, n_way=2, k_shot=3, query=4, seed=0, classes=None):
    classes = classes or tuple(sorted({g.label for g in graphs}))
    split = DatasetSplit(classes, (), ())
    return sample_episode(graphs, split, "train", n_way, k_shot, query, np.random.default_rng(seed))


# -- ParameterSet ------------------------------------------------------------------

def test_parameter_set_rejects_duplicates_and_bad_tags():
    params = gm.ParameterSet()
    t = ad.parameter([1.0])
    params.add("w", t, gm.SLOW)
    with pytest.raises(ConfigurationError):
        params.add("w", t, gm.FAST)
    with pytest.raises(ConfigurationError):
        params.add("v", t, "warm")


def test_parameter_set_snapshot_restore_round_trip():
    model = make_model()
    params = model.parameters()
    before = params.snapshot()
    hash_before = params.values_hash()
    for _, tensor in params.named():
        tensor.data = tensor.data + 1.0
    assert params.values_hash() != hash_before
    params.restore(before)
    assert params.values_hash() == hash_before
    for name, tensor in params.named():
        assert np.array_equal(tensor.data, before[name])


def test_every_parameter_has_exactly_one_tag():
    model = make_model()
    params = model.parameters()
    slow = {name for name, _ in params.named(gm.SLOW)}
    fast = {name for name, _ in params.named(gm.FAST)}
    assert slow | fast == {name for name, _ in params.named()}
    assert not slow & fast
    assert all(name.startswith("predictor") for name in fast)


def test_adapted_copy_shares_slow_and_copies_fast():
    model = make_model()
    adapted = model.adapted_copy()
    assert adapted.encoder_f is model.encoder_f
    assert adapted.encoder_g is model.encoder_g
    assert adapted.mask_mlp is model.mask_mlp
    assert adapted.predictor is not model.predictor
    adapted.predictor.weights[0].data += 1.0
    assert not np.array_equal(
        adapted.predictor.weights[0].data, model.predictor.weights[0].data
    )


# -- task information ------------------------------------------------------------------

def test_task_info_single_shot_equals_graph_embedding():
    graphs = tiny_dataset(2, 2)
    model = make_model()
    support = [(graphs[0], 0), (first_of(graphs, 1), 1)]
    ti = model.compute_task_info(support)
    for graph, local in support:
        embedding = readout(model.encoder_f.forward(graph)).data
        assert np.array_equal(ti.prototypes[local].data, embedding)


def test_task_info_duplicate_graphs_give_that_embedding():
    graphs = tiny_dataset(2, 2)
    model = make_model()
    support = [(graphs[0], 0), (graphs[0], 0), (first_of(graphs, 1), 1)]
    ti = model.compute_task_info(support)
    embedding = readout(model.encoder_f.forward(graphs[0])).data
    assert np.max(np.abs(ti.prototypes[0].data - embedding)) < 1e-12


def test_task_info_matches_standalone_mean_of_five():
    graphs = tiny_dataset(2, 6)
    model = make_model()
    support = [(graphs[i], 0) for i in range(5)] + [(graphs[6 + i], 1) for i in range(5)]
    ti = model.compute_task_info(support)
    for local, idxs in ((0, range(5)), (1, range(6, 11))):
        embeddings = [readout(model.encoder_f.forward(graphs[i])).data for i in idxs]
        mean = np.mean(embeddings, axis=0)
        assert np.max(np.abs(ti.prototypes[local].data - mean)) < 1e-12


def test_task_info_concat_order_follows_local_labels():
    graphs = tiny_dataset(2, 2)
    model = make_model()
    ti = model.compute_task_info([(graphs[0], 0), (first_of(graphs, 1), 1)])
    d = model.config.hidden_dim
    assert np.array_equal(ti.concat.data[:d], ti.prototypes[0].data)
    assert np.array_equal(ti.concat.data[d:], ti.prototypes[1].data)


def test_task_info_missing_class_errors():
    graphs = tiny_dataset(2, 2)
    model = make_model()
    with pytest.raises(TaskConstructionError):
        model.compute_task_info([(graphs[0], 0)])


# -- explainer ----------------------------------------------------------------------

def test_zeroed_mask_mlp_gives_half_masks():
    graphs = tiny_dataset(2, 2)
    model = make_model()
    for w in model.mask_mlp.weights:
        w.data = np.zeros_like(w.data)
    for b in model.mask_mlp.biases:
        b.data = np.zeros_like(b.data)
    ti = model.compute_task_info([(graphs[0], 0), (first_of(graphs, 1), 1)])
    mask = model.explain(graphs[1], ti)
    assert np.array_equal(mask.data, np.full(graphs[1].num_nodes, 0.5))


def test_mask_length_matches_graph_sizes():
    model = make_model()
    rng = np.random.default_rng(3)
    base = tiny_dataset(2, 2)
    ti = model.compute_task_info([(base[0], 0), (first_of(base, 1), 1)])
    for n in (3, 20, 75):
        a = (rng.uniform(size=(n, n)) < 0.2).astype(float)
        a = np.triu(a, 1)
        a = a + a.T
        from graphrationale.data import Graph

        graph = Graph(adjacency=a, features=rng.uniform(0, 1, (n, 4)), label=0)
        assert model.explain(graph, ti).shape == (n,)


def test_mask_permutation_equivariance():
    from graphrationale.data import Graph

    model = make_model()
    base = tiny_dataset(2, 2)
    ti = model.compute_task_info([(base[0], 0), (first_of(base, 1), 1)])
    graph = base[1]
    mask = model.explain(graph, ti).data
    rng = np.random.default_rng(4)
    for _ in range(5):
        perm = rng.permutation(graph.num_nodes)
        permuted = Graph(
            adjacency=graph.adjacency[np.ix_(perm, perm)],
            features=graph.features[perm],
            label=graph.label,
        )
        permuted_mask = model.explain(permuted, ti).data
        assert np.max(np.abs(permuted_mask - mask[perm])) < 1e-9


def test_mask_values_strictly_inside_unit_interval():
    model = make_model()
    base = tiny_dataset(2, 3)
    ti = model.compute_task_info([(base[0], 0), (first_of(base, 1), 1)])
    mask = model.explain(base[2], ti).data
    assert np.all(mask > 0.0) and np.all(mask < 1.0)


def test_explain_rejects_wrong_task_info_dimension():
    model = make_model()
    base = tiny_dataset(2, 2)
    bad_ti = gm.TaskInfo(prototypes=[], concat=ad.constant(np.zeros(5)))
    with pytest.raises(DimensionError):
        model.explain(base[0], bad_ti)


# -- decompose ----------------------------------------------------------------------

def test_decompose_half_mask_symmetry():
    rng = np.random.default_rng(5)
    h = ad.constant(rng.uniform(-1, 1, (7, 4)))
    mask = ad.constant(np.full(7, 0.5))
    h_r, h_n = gm.decompose(h, mask)
    expected = 0.5 * readout(h).data
    assert np.max(np.abs(h_r.data - expected)) < 1e-12
    assert np.max(np.abs(h_n.data - expected)) < 1e-12


def test_decompose_full_mask_zeroes_complement():
    rng = np.random.default_rng(6)
    h = ad.constant(rng.uniform(-1, 1, (5, 3)))
    h_r, h_n = gm.decompose(h, ad.constant(np.ones(5)))
    assert np.array_equal(h_n.data, np.zeros(3))
    assert np.allclose(h_r.data, readout(h).data, atol=1e-15)


def test_decompose_parts_recompose_to_full_readout():
    rng = np.random.default_rng(7)
    for _ in range(10):
        h = ad.constant(rng.uniform(-2, 2, (9, 5)))
        mask = ad.constant(rng.uniform(0.01, 0.99, 9))
        h_r, h_n = gm.decompose(h, mask)
        assert np.max(np.abs(h_r.data + h_n.data - readout(h).data)) < 1e-9


def test_decompose_length_mismatch():
    with pytest.raises(DimensionError):
        gm.decompose(ad.constant(np.ones((4, 2))), ad.constant(np.ones(3)))


# -- predictor -----------------------------------------------------------------------

def test_zero_predictor_gives_uniform_probabilities():
    model = make_model()
    base = tiny_dataset(2, 2)
    ti = model.compute_task_info([(base[0], 0), (first_of(base, 1), 1)])
    logits = model.predict(ad.constant(np.ones(model.config.hidden_dim)), ti)
    assert logits.shape == (2,)
    assert np.array_equal(logits.data, np.zeros(2))  # zero-initialized final layer
    from graphrationale.losses import softmax_rows

    probs = softmax_rows(ad.reshape(logits, (1, 2))).data
    assert np.allclose(probs, 0.5, atol=1e-15)


def test_predict_gradient_wrt_embedding():
    from test_autodiff import check_grad

    model = make_model()
    # non-degenerate predictor weights
    rng = np.random.default_rng(8)
    for w in model.predictor.weights:
        w.data = rng.uniform(-0.5, 0.5, w.shape)
    base = tiny_dataset(2, 2)
    ti = model.compute_task_info([(base[0], 0), (first_of(base, 1), 1)])
    h0 = rng.uniform(-1, 1, model.config.hidden_dim)
    check_grad(lambda h: ad.sum_(ad.sigmoid(model.predict(h, ti))), h0)


# -- augmentation -------------------------------------------------------------------

def test_augmentation_count_two_way_five_shot():
    rng = np.random.default_rng(9)
    rationales = [(ad.constant(rng.uniform(-1, 1, 4)), i % 2) for i in range(10)]
    non_rationales = [ad.constant(rng.uniform(-1, 1, 4)) for _ in range(10)]
    augmented = gm.augment(rationales, non_rationales)
    assert len(augmented) == 100


def test_augmentation_values_and_labels():
    h_r = [(ad.constant([1.0, 0.0]), 0), (ad.constant([0.0, 1.0]), 1)]
    h_n = [ad.constant([0.5, 0.5]), ad.constant([0.25, 0.25])]
    augmented = gm.augment(h_r, h_n)
    assert np.array_equal(augmented.labels, [0, 0, 1, 1])
    assert np.array_equal(
        augmented.embeddings.data,
        [[1.5, 0.5], [1.25, 0.25], [0.5, 1.5], [0.25, 1.25]],
    )


def test_augmentation_with_zero_non_rationales_duplicates_rationales():
    rng = np.random.default_rng(10)
    vectors = [rng.uniform(-1, 1, 3) for _ in range(4)]
    rationales = [(ad.constant(v), i % 2) for i, v in enumerate(vectors)]
    non_rationales = [ad.constant(np.zeros(3)) for _ in range(4)]
    augmented = gm.augment(rationales, non_rationales)
    for i in range(4):
        for j in range(4):
            assert np.array_equal(augmented.embeddings.data[i * 4 + j], vectors[i])


def test_augmentation_labels_depend_only_on_rationale_donor():
    rng = np.random.default_rng(11)
    rationales = [(ad.constant(rng.uniform(-1, 1, 2)), i % 2) for i in range(6)]
    non_rationales = [ad.constant(rng.uniform(-1, 1, 2)) for _ in range(6)]
    augmented = gm.augment(rationales, non_rationales)
    labels = augmented.labels.reshape(6, 6)
    for i in range(6):
        assert np.all(labels[i] == i % 2)


def test_augmentation_empty_input_yields_empty_output():
    assert len(gm.augment([], [])) == 0


# -- forward_episode -----------------------------------------------------------------

def test_forward_episode_shapes_and_augmentation():
    graphs = tiny_dataset(2, 12)
    episode = make_episode(graphs, k_shot=3, query=4)
    model = make_model()
    fwd = model.forward_episode(episode, phase="train")
    assert len(fwd.support) == 6
    assert len(fwd.query) == 8
    assert len(fwd.augmented) == 36
    assert fwd.augmented_logits.shape == (36, 2)
    for out, (graph, _) in zip(fwd.support + fwd.query, episode.support + episode.query):
        assert out.mask.shape == (graph.num_nodes,)
        assert out.logits.shape == (2,)


def test_forward_episode_eval_phase_skips_augmentation():
    graphs = tiny_dataset(2, 12)
    episode = make_episode(graphs)
    model = make_model()
    fwd = model.forward_episode(episode, phase="eval")
    assert fwd.augmented is None and fwd.augmented_logits is None


def test_forward_episode_is_deterministic():
    graphs = tiny_dataset(2, 12)
    episode = make_episode(graphs)
    model = make_model()
    f1 = model.forward_episode(episode)
    f2 = model.forward_episode(episode)
    assert np.array_equal(f1.query_logit_matrix().data, f2.query_logit_matrix().data)
    for a, b in zip(f1.support, f2.support):
        assert np.array_equal(a.mask.data, b.mask.data)


def test_query_labels_never_leak_into_forward():
    graphs = tiny_dataset(2, 12)
    episode = make_episode(graphs)
    model = make_model()
    baseline = model.forward_episode(episode)

    flipped = Episode(
        support=episode.support,
        query=[(g, 1 - local) for g, local in episode.query],
        class_map=episode.class_map,
        n_way=episode.n_way,
        k_shot=episode.k_shot,
        query_per_class=episode.query_per_class,
    )
    mutated = model.forward_episode(flipped)

    assert np.array_equal(baseline.task_info.concat.data, mutated.task_info.concat.data)
    for a, b in zip(baseline.query, mutated.query):
        assert np.array_equal(a.mask.data, b.mask.data)
        assert np.array_equal(a.logits.data, b.logits.data)
    for a, b in zip(baseline.support, mutated.support):
        assert np.array_equal(a.mask.data, b.mask.data)


def test_swapping_one_query_graph_leaves_others_untouched():
    graphs = tiny_dataset(2, 14)
    episode = make_episode(graphs, k_shot=3, query=4)
    model = make_model()
    baseline = model.forward_episode(episode)

    replacement = next(
        g for g in graphs
        if g.label in episode.class_map
        and id(g) not in {id(x) for x, _ in episode.support + episode.query}
    )
    new_query = list(episode.query)
    new_query[0] = (replacement, episode.class_map[replacement.label])
    altered = Episode(
        support=episode.support,
        query=new_query,
        class_map=episode.class_map,
        n_way=episode.n_way,
        k_shot=episode.k_shot,
        query_per_class=episode.query_per_class,
    )
    mutated = model.forward_episode(altered)
    for i in range(1, len(episode.query)):
        assert np.array_equal(baseline.query[i].mask.data, mutated.query[i].mask.data)
        assert np.array_equal(baseline.query[i].logits.data, mutated.query[i].logits.data)


def test_snapshot_restore_keeps_forward_bit_identical():
    graphs = tiny_dataset(2, 12)
    episode = make_episode(graphs)
    model = make_model()
    params = model.parameters()
    snap = params.snapshot()
    baseline = model.forward_episode(episode).query_logit_matrix().data
    for _, tensor in params.named():
        tensor.data = tensor.data + 0.1
    params.restore(snap)
    assert np.array_equal(model.forward_episode(episode).query_logit_matrix().data, baseline)


# -- checkpoints ------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    graphs = tiny_dataset(2, 12)
    episode = make_episode(graphs)
    model = make_model(seed=3)
    rng = np.random.default_rng(4)
    for _, tensor in model.parameters().named():
        tensor.data = rng.uniform(-0.5, 0.5, tensor.shape)
    path = tmp_path / "ckpt.json"
    gm.save_checkpoint(model, path, config_fingerprint="deadbeef")
    loaded = gm.load_checkpoint(path)
    assert loaded.config == model.config
    assert loaded.parameters().values_hash() == model.parameters().values_hash()
    a = model.forward_episode(episode).query_logit_matrix().data
    b = loaded.forward_episode(episode).query_logit_matrix().data
    assert np.array_equal(a, b)


def test_checkpoint_shape_validation(tmp_path):
    model = make_model()
    path = tmp_path / "ckpt.json"
    gm.save_checkpoint(model, path)
    raw = json.loads(path.read_text())
    raw["parameters"][0]["shape"] = [1, 1]
    raw["parameters"][0]["values"] = [0.0]
    path.write_text(json.dumps(raw))
    with pytest.raises(ValidationError, match="shape"):
        gm.load_checkpoint(path)


def test_checkpoint_missing_parameter(tmp_path):
    model = make_model()
    path = tmp_path / "ckpt.json"
    gm.save_checkpoint(model, path)
    raw = json.loads(path.read_text())
    raw["parameters"] = raw["parameters"][1:]
    path.write_text(json.dumps(raw))
    with pytest.raises(ValidationError, match="missing"):
        gm.load_checkpoint(path)
