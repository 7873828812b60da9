import math
import numpy as np
import pytest
import torch
import matplotlib.pyplot as plt
from fitmask.data_helpers import ImageDataset
from fitmask.errors import ConfigurationError, DataError, FitmaskWarning
from fitmask.evaluation import Evaluator, export_heatmaps, extract_features, scale_heatmap
from fitmask.metric_helpers import (
    attention_mass, box_to_view, collapse_check, linear_probe, probe_report, projection_variance,
    retrieval_eval
)
from fitmask.model import FitMaskModel
from fitmask.variants import configure_variant


# -- retrieval ----------------------------------------------------------------------------

def test_retrieval_hand_worked():
    angles = np.radians([0, 30, 70, 120])
    features = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    report = retrieval_eval(features, [0, 0, 1, 1])
    # query 2 ranks [1, 3, 0]: first hit at rank 2, AP 1/2; the others hit at rank 1
    assert report.rank1 == 75.0
    assert report.rank5 == 100.0
    assert report.mAP == pytest.approx(87.5, abs=1e-12)
    assert report.gallery_size == 3 and report.queries == 4


def brute_force(features, labels):
    n = len(labels)
    rank1 = rank5 = 0
    aps = []
    for i in range(n):
        scored = []
        for j in range(n):
            if j == i:
                continue
            dot = sum(features[i][d] * features[j][d] for d in range(len(features[i])))
            norm_i = math.sqrt(sum(v * v for v in features[i]))
            norm_j = math.sqrt(sum(v * v for v in features[j]))
            scored.append((-dot / (norm_i * norm_j), j))
        scored.sort()
        relevant = [labels[j] == labels[i] for _, j in scored]
        if not any(relevant):
            continue
        rank1 += relevant[0]
        rank5 += any(relevant[:5])
        hits, precisions = 0, []
        for r, rel in enumerate(relevant, start=1):
            if rel:
                hits += 1
                precisions.append(hits / r)
        aps.append(sum(precisions) / len(precisions))
    return rank1, rank5, 100.0 * sum(aps) / len(aps), len(aps)


@pytest.mark.parametrize("seed", range(20))
def test_retrieval_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    features = rng.normal(size=(100, 8))
    labels = rng.permutation(np.arange(100) % 10)
    report = retrieval_eval(features, labels)
    rank1, rank5, mAP, queries = brute_force(features.tolist(), labels.tolist())
    assert report.queries == queries
    assert round(report.rank1 * queries / 100) == rank1
    assert round(report.rank5 * queries / 100) == rank5
    assert report.mAP == pytest.approx(mAP, abs=1e-9)


def test_retrieval_scale_invariant():
    rng = np.random.default_rng(0)
    features = rng.normal(size=(60, 5))
    labels = np.arange(60) % 6
    a = retrieval_eval(features, labels)
    b = retrieval_eval(features * 3.7, labels)
    assert (a.rank1, a.rank5) == (b.rank1, b.rank5)
    assert a.mAP == pytest.approx(b.mAP, abs=1e-9)


def test_retrieval_one_hot_classes():
    labels = np.repeat(np.arange(4), 5)
    report = retrieval_eval(np.eye(4)[labels], labels)
    assert (report.rank1, report.mAP) == (100.0, 100.0)
    assert report.rank5 >= report.rank1


def test_retrieval_singleton_class_warns():
    features = np.random.default_rng(1).normal(size=(5, 3))
    with pytest.warns(FitmaskWarning):
        report = retrieval_eval(features, [0, 0, 1, 1, 2])
    assert report.queries == 4 and report.excluded == 1
    with pytest.raises(DataError):
        retrieval_eval(features[:1], [0])


def test_retrieval_l2():
    features = np.array([[0.0], [1.0], [10.0], [11.0]])
    report = retrieval_eval(features, [0, 0, 1, 1], metric='l2')
    assert report.rank1 == 100.0 and report.metric == 'l2'
    with pytest.raises(ValueError):
        retrieval_eval(features, [0, 0, 1, 1], metric='hamming')


# -- linear probe -------------------------------------------------------------------------

def clusters(n_classes, per_class, dim, spread, seed):
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(n_classes, dim)) * 3
    labels = np.repeat(np.arange(n_classes), per_class)
    return centers[labels] + spread * rng.normal(size=(len(labels), dim)), labels


def test_probe_separable():
    X, y = clusters(2, 30, 4, 0.1, 0)
    row = linear_probe(X[::2], y[::2], X[1::2], y[1::2])
    assert row['top1'] == 100.0 and row['top5'] == 100.0


def test_probe_top5_at_least_top1():
    X_tr, y_tr = clusters(10, 20, 6, 4.0, 1)
    X_te, y_te = clusters(10, 10, 6, 4.0, 1)
    report = probe_report(X_tr, y_tr, X_te, y_te, seed=0)
    assert [r['fraction'] for r in report.rows] == [1.0, 0.5, 0.2]
    for r in report.rows:
        assert 0 <= r['top1'] <= r['top5'] <= 100
    assert report.row(0.2)['n_train'] == 40


def test_probe_more_labels_help_on_average():
    gaps = []
    for seed in range(5):
        rng = np.random.default_rng(seed)
        centers = rng.normal(size=(10, 16))
        y_tr, y_te = np.repeat(np.arange(10), 30), np.repeat(np.arange(10), 20)
        X_tr = centers[y_tr] + 1.2 * rng.normal(size=(300, 16))
        X_te = centers[y_te] + 1.2 * rng.normal(size=(200, 16))
        full = linear_probe(X_tr, y_tr, X_te, y_te, 1.0, seed)['top1']
        fifth = linear_probe(X_tr, y_tr, X_te, y_te, 0.2, seed)['top1']
        gaps.append(full - fifth)
    assert np.mean(gaps) >= 0


def test_probe_empty_class():
    X = np.random.default_rng(0).normal(size=(22, 3))
    y = np.array([0] * 10 + [1] * 10 + [2] * 2)
    with pytest.raises(DataError):
        linear_probe(X, y, X, y, fraction=0.2)
    with pytest.raises(DataError):
        linear_probe(X, np.zeros(22, dtype=int), X, y)


# -- projection variance ------------------------------------------------------------------

def test_orthogonal_projection_ranks_last():
    gen = torch.Generator().manual_seed(0)
    maps = torch.randn(5, 4, 4, 4, generator=gen, dtype=torch.float64)
    maps[..., 3] = 0
    weight = torch.tensor([[1.0, 0, 0, 0], [0, 0, 0, 1.0], [0, 2.0, 0, 0], [0, 0, 0, -1.0]], dtype=torch.float64)
    report = projection_variance(weight, maps)
    assert report.variance[1] == 0.0 and report.variance[3] == 0.0
    assert sorted(report.ranking) == [0, 1, 2, 3]
    assert report.ranking[0] == 2
    # tie broken by the lower index
    assert report.ranking[-2:] == [1, 3]
    assert report.top(1) == [2]
    assert set(report.random_others(2, seed=0)) == {1, 3}


def test_projection_variance_order_independent():
    gen = torch.Generator().manual_seed(1)
    maps = torch.randn(12, 3, 3, 6, generator=gen, dtype=torch.float64)
    weight = torch.randn(8, 6, generator=gen, dtype=torch.float64)
    a = projection_variance(weight, maps)
    b = projection_variance(weight, maps[torch.randperm(12, generator=gen)])
    assert a.ranking == b.ranking
    assert np.allclose(a.variance, b.variance)
    with pytest.raises(DataError):
        projection_variance(weight, maps[:0])


# -- collapse -----------------------------------------------------------------------------

def test_collapse_identical():
    report = collapse_check(np.ones((60, 16)))
    assert report.collapsed and report.mean_std == pytest.approx(0.0, abs=1e-12)


def test_random_embeddings_not_collapsed():
    rng = np.random.default_rng(0)
    Z = rng.normal(size=(500, 128))
    Z /= np.linalg.norm(Z, axis=1, keepdims=True)
    report = collapse_check(Z)
    assert not report.collapsed
    assert report.mean_std > 0.01


def test_collapse_nearest_neighbour_criterion():
    rng = np.random.default_rng(0)
    labels = np.repeat(np.arange(10), 10)
    separated = np.eye(10)[labels] + 0.05 * rng.normal(size=(100, 10))
    assert not collapse_check(separated, labels).collapsed
    shuffled = collapse_check(rng.normal(size=(100, 10)), labels)
    assert shuffled.chance == 10.0
    assert shuffled.collapsed == (shuffled.rank1 <= 15.0)


def test_collapse_needs_enough_items():
    with pytest.raises(DataError):
        collapse_check(np.random.default_rng(0).normal(size=(49, 4)))


# -- attention mass -----------------------------------------------------------------------

def test_attention_mass_exact_cell():
    planted = np.zeros((1, 4, 4))
    planted[0, 1, 1] = 1.0
    result = attention_mass(planted, [[16, 16, 16, 16]], source_size=64, resize=64, crop=64)
    assert result['mass'] == pytest.approx(1.0)
    assert result['baseline'] == pytest.approx(1 / 16)
    assert result['ratio'] == pytest.approx(16.0)
    uniform = attention_mass(np.full((1, 4, 4), 1 / 16), [[5, 9, 8, 8]], 64, 64, 64)
    assert uniform['mass'] == pytest.approx(uniform['baseline'])


def test_box_follows_resize_and_crop():
    assert box_to_view([0, 0, 8, 8], 64, 72, 64) == pytest.approx((0.0, 0.0, 5.0, 5.0))
    assert box_to_view([28, 28, 8, 8], 64, 72, 64) == pytest.approx((27.5, 27.5, 36.5, 36.5))


# -- heatmaps -----------------------------------------------------------------------------

def test_scale_heatmap():
    scaled = scale_heatmap(torch.tensor([[2.0, 4.0], [6.0, 10.0]]))
    assert scaled.min() == 0.0 and scaled.max() == 1.0
    assert torch.equal(scale_heatmap(torch.full((3, 3), 7.0)), torch.zeros(3, 3))


def test_export_heatmaps(tmp_path):
    images = torch.full((3, 3, 16, 16), 0.5)
    maps = torch.rand(3, 4, 4)
    maps[1] = 2.0
    paths = export_heatmaps(images, maps, tmp_path / "maps")
    assert [p.name for p in paths] == ["heatmap_0000.png", "heatmap_0001.png", "heatmap_0002.png"]
    constant = plt.imread(paths[1])[..., :3]
    assert np.allclose(constant, constant[0, 0])
    varied = plt.imread(paths[0])[..., :3]
    assert not np.allclose(varied, varied[0, 0])


def test_export_heatmaps_errors(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        export_heatmaps(torch.rand(1, 3, 8, 8), torch.rand(1, 2, 2), blocker)
    with pytest.raises(ValueError):
        export_heatmaps(torch.rand(2, 3, 8, 8), torch.rand(1, 2, 2), tmp_path)


# -- model-level extraction ---------------------------------------------------------------

@pytest.fixture
def tiny_model(make_config):
    def build(mode='ours'):
        config = make_config(variant=mode)
        torch.manual_seed(0)
        model = FitMaskModel(config, configure_variant(mode, config.K, config.encoder.channels)).eval()
        return config, model
    return build


def test_identical_images_identical_rows(tiny_model):
    _, model = tiny_model()
    x = torch.rand(1, 3, 64, 64).repeat(3, 1, 1, 1)
    f = model.features(x)
    assert torch.equal(f[0], f[1]) and torch.equal(f[1], f[2])


def test_planted_attention_selects_cell(tiny_model, monkeypatch):
    _, model = tiny_model()
    x = torch.rand(2, 3, 64, 64)
    planted = torch.zeros(2, 4, 4)
    planted[:, 2, 1] = 1.0
    monkeypatch.setattr(model, 'attention', lambda feature_map, subset=None: planted)
    f = model.features(x)
    feature_map, _ = model.encode(x)
    assert torch.allclose(f, feature_map[:, 2, 1], rtol=1e-5, atol=1e-6)


def test_subset_inference(tiny_model):
    _, model = tiny_model()
    x = torch.rand(2, 3, 64, 64)
    assert torch.allclose(model.features(x), model.features(x, subset=range(4)))
    with torch.no_grad():
        feature_map, _ = model.encode(x)
        single = model.attention(feature_map, subset=[2])
        assert torch.allclose(single, feature_map @ model.branch.weight[2])
    with pytest.raises(ValueError):
        model.features(x, subset=[])


def test_bilinear_feature_dim(tiny_model):
    config, model = tiny_model('moco-bilinear')
    f = model.features(torch.rand(2, 3, 64, 64))
    assert f.shape == (2, config.encoder.channels * config.K)


def test_extract_features_contract(tiny_model, tiny_data):
    config, model = tiny_model()
    with pytest.raises(ConfigurationError):
        extract_features(ImageDataset(tiny_data, 'test', config.augment, mode='views'), model)
    _, baseline = tiny_model('moco-baseline')
    dataset = ImageDataset(tiny_data, 'test', config.augment, mode='eval')
    with pytest.raises(ConfigurationError):
        extract_features(dataset, baseline, aggregation='weighted-pool')
    features, labels = extract_features(dataset, model)
    assert features.shape == (18, config.encoder.channels)
    assert sorted(set(labels.tolist())) == [0, 1, 2]


def test_evaluator_end_to_end(tiny_model, tiny_data, tmp_path):
    config, model = tiny_model()
    evaluator = Evaluator(model, config, tiny_data, out_dir=str(tmp_path), force_env=True)
    report = evaluator.retrieval()
    assert 0 <= report.rank1 <= report.rank5 <= 100
    assert (tmp_path / "retrieval.json").exists()

    probe = evaluator.probe(fractions=(1.0,))
    assert (tmp_path / "probe.csv").exists()
    assert probe.row(1.0)['top1'] <= probe.row(1.0)['top5']

    payload = evaluator.projections(top=2)
    assert [r['mode'] for r in payload['subset_retrieval']] == ['all', 'high-variance', 'random']
    assert len(payload['variance']['variance']) == 4

    localization = evaluator.localization()
    assert 0 <= localization['mass'] <= 1
    # 8px glyph boxes become 9px after the 64 -> 72 resize, less where the crop clips them
    assert 0 < localization["baseline"] <= 81 / 4096 + 1e-12

    paths = evaluator.heatmaps(limit=5)
    assert len(paths) == 5

    cache = evaluator.cache_features('test')
    assert cache.exists()
    with pytest.raises(DataError):
        evaluator.collapse()
