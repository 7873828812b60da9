import json
from fractions import Fraction
import numpy as np
import pytest
import torch
from torchvision.io import write_png
from torchvision import transforms as T
from fitmask.augment import AugmentationPolicy
from fitmask.config import TrainConfig
from fitmask.data_helpers import (
    DatasetManifest, ImageDataset, load_dataset, load_image_folder, parse_split_rule, read_image
)
from fitmask.errors import ConfigurationError, DataError, FitmaskWarning
from fitmask.synthetic import (
    SyntheticSpec, background_independence, classify_patch, generate_synthetic, load_boxes,
    make_glyphs, template_accuracy
)


def write_folder(root, classes=2, per_class=3, size=16):
    gen = torch.Generator().manual_seed(0)
    for c in range(classes):
        d = root / f"c{c}"
        d.mkdir(parents=True)
        for i in range(per_class):
            write_png(torch.randint(0, 256, (3, size, size), dtype=torch.uint8, generator=gen), str(d / f"{i}.png"))
    return root


@pytest.fixture(scope="module")
def default_data(tmp_path_factory):
    return generate_synthetic(SyntheticSpec(train_per_class=50, test_per_class=50), tmp_path_factory.mktemp("default"))


def test_split_rule():
    assert parse_split_rule('2/1') == Fraction(2, 3)
    assert parse_split_rule(0.5) == Fraction(1, 2)
    for bad in ['0/1', 1.0, 0, '-1/2']:
        with pytest.raises(ValueError):
            parse_split_rule(bad)


def test_folder_two_to_one(tmp_path):
    manifest = load_image_folder(write_folder(tmp_path / "data"))
    assert manifest.classes == ['c0', 'c1']
    assert len(manifest.split('train')) == 4
    assert len(manifest.split('test')) == 2
    for label in (0, 1):
        assert sum(1 for _, y, s in manifest.items if y == label and s == 'test') == 1


def test_folder_split_is_seeded(tmp_path):
    root = write_folder(tmp_path / "data", per_class=9)
    assert load_image_folder(root, seed=4).items == load_image_folder(root, seed=4).items
    splits = {tuple(map(tuple, load_image_folder(root, seed=s).split('test'))) for s in range(6)}
    assert len(splits) > 1


def test_empty_class_folder(tmp_path):
    root = write_folder(tmp_path / "data")
    (root / "c2").mkdir()
    with pytest.raises(DataError):
        load_image_folder(root)


def test_unreadable_files_are_skipped(tmp_path):
    root = write_folder(tmp_path / "data")
    (root / "c0" / "broken.png").write_bytes(b"not a png")
    with pytest.warns(FitmaskWarning):
        manifest = load_image_folder(root)
    assert manifest.skipped == ['c0/broken.png']
    assert all('broken' not in rel for rel, _, _ in manifest.items)


def test_missing_root(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_image_folder(tmp_path / "nowhere")


def test_manifest_json(tmp_path):
    manifest = load_image_folder(write_folder(tmp_path / "data"))
    path = manifest.to_json(tmp_path / "m.json")
    assert DatasetManifest.from_json(path) == manifest
    with pytest.raises(DataError):
        DatasetManifest(root=".", classes=['a'], items=[['a/1.png', 0, 'train'], ['a/1.png', 0, 'test']])
    with pytest.raises(DataError):
        DatasetManifest(root=".", classes=['a'], items=[['a/1.png', 0, 'train']])


def test_synthetic_layout(tiny_data):
    root = tiny_data.root
    assert tiny_data.classes == ['class_00', 'class_01', 'class_02']
    assert len(tiny_data.split('train')) == 24 and len(tiny_data.split('test')) == 18
    boxes = load_boxes(root)
    assert set(boxes) == {rel for rel, _, _ in tiny_data.items}
    for x, y, w, h in boxes.values():
        assert (w, h) == (8, 8)
        assert 0 <= x <= 56 and 0 <= y <= 56
        assert 8 <= x <= 48 and 8 <= y <= 48
    assert load_dataset(root) == tiny_data


def test_template_matching_recovers_labels(tiny_data):
    assert template_accuracy(tiny_data) == 1.0


def test_glyphs_are_distinct():
    glyphs = make_glyphs(SyntheticSpec())
    assert glyphs.shape == (10, 8, 8)
    for i, g in enumerate(glyphs):
        assert classify_patch(g, glyphs) == i
        others = np.delete(glyphs, i, axis=0)
        assert np.abs(others - g).sum(axis=(1, 2)).min() >= 16
        assert np.array_equal(g, np.kron(g[::2, ::2], np.ones((2, 2))))


def test_background_is_independent_of_class(default_data):
    assert len(default_data.items) == 1000
    assert background_independence(default_data) >= 0.01


def test_glyph_order_leaves_backgrounds(tmp_path):
    base = SyntheticSpec(classes=3, train_per_class=2, test_per_class=1, seed=5)
    swapped = SyntheticSpec(classes=3, train_per_class=2, test_per_class=1, seed=5, glyph_order=[2, 0, 1])
    a = generate_synthetic(base, tmp_path / "a")
    b = generate_synthetic(swapped, tmp_path / "b")
    assert a.extra['background_ids'] == b.extra['background_ids']
    assert np.array_equal(make_glyphs(swapped), make_glyphs(base)[[2, 0, 1]])
    boxes = load_boxes(a.root)
    assert boxes == load_boxes(b.root)
    for rel, _, _ in a.items:
        x, y, w, h = boxes[rel]
        mask = np.ones((64, 64), dtype=bool)
        mask[y:y + h, x:x + w] = False
        pix_a = read_image(tmp_path / "a" / rel).numpy()
        pix_b = read_image(tmp_path / "b" / rel).numpy()
        assert np.array_equal(pix_a[:, mask], pix_b[:, mask]), rel


def test_bad_synthetic_specs():
    with pytest.raises(ConfigurationError):
        SyntheticSpec(classes=1)
    with pytest.raises(ConfigurationError):
        SyntheticSpec(correlation=1.5)
    with pytest.raises(ConfigurationError):
        SyntheticSpec(patch_size=80)
    with pytest.raises(ConfigurationError):
        SyntheticSpec(classes=3, glyph_order=[0, 0, 1])
    with pytest.raises(ConfigurationError):
        SyntheticSpec(glyph_cell=3)
    with pytest.raises(ConfigurationError):
        SyntheticSpec(margin=30)
    with pytest.raises(ConfigurationError):
        SyntheticSpec(background_contrast=0.0)


def test_spec_json(tmp_path):
    path = tmp_path / "spec.json"
    path.write_text(json.dumps({'classes': 4, 'correlation': 0.5}))
    spec = SyntheticSpec.from_json(path)
    assert spec.classes == 4 and spec.correlation == 0.5 and spec.patch_size == 8


def test_dataset_modes(tiny_data):
    policy = AugmentationPolicy(size=64, test_resize=72)
    views = ImageDataset(tiny_data, 'train', policy, mode='views', seed=1)
    x, x_prime, index = views[3]
    assert x.shape == x_prime.shape == (3, 64, 64) and index == 3
    again = views[3]
    assert torch.equal(x, again[0])
    views.set_epoch(1)
    assert not torch.equal(x, views[3][0])

    evals = ImageDataset(tiny_data, 'test', policy, mode='eval')
    x, label, index = evals[0]
    assert x.shape == (3, 64, 64)
    assert label == tiny_data.split('test')[0][1]
    assert torch.equal(evals.labels, torch.tensor([i[1] for i in tiny_data.split('test')]))
    with pytest.raises(ValueError):
        ImageDataset(tiny_data, 'test', policy, mode='pairs')


def test_desk_crops_keep_the_glyph(default_data):
    policy = TrainConfig.desk_scale().augment
    boxes = list(load_boxes(default_data.root).values())
    image = torch.zeros(3, 64, 64)
    kept = 0
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(0)
        for n in range(2000):
            x, y, w, h = boxes[n % len(boxes)]
            top, left, ch, cw = T.RandomResizedCrop.get_params(image, policy.crop_scale, (3 / 4, 4 / 3))
            kept += left <= x and x + w <= left + cw and top <= y and y + h <= top + ch
    assert kept / 2000 >= 0.75

    # test view: resize to 72 then center crop 64 shows [4, 60] of the source
    lo, hi = 64 * 4 / 72, 64 * 68 / 72
    assert all(lo <= x and x + w <= hi and lo <= y and y + h <= hi for x, y, w, h in boxes)


def test_glyph_stands_out_of_background(tiny_data):
    root = tiny_data.root
    boxes = load_boxes(root)
    for rel, _, _ in tiny_data.items[:6]:
        x, y, w, h = boxes[rel]
        pixels = read_image(root / rel).numpy() / 255.0
        mask = np.ones((64, 64), dtype=bool)
        mask[y:y + h, x:x + w] = False
        assert pixels[:, mask].min() >= 0.2 - 1e-6 and pixels[:, mask].max() <= 0.8 + 1e-6
        assert set(np.unique(pixels[:, ~mask])) <= {0.0, 1.0}
