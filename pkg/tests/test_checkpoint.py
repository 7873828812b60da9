import json
import numpy as np
import pytest
import torch
from fitmask.checkpoint import (
    FORMAT_VERSION, META_KEY, Checkpoint, load_arrays, load_checkpoint, load_features,
    save_checkpoint, save_features
)
from fitmask.config import TrainConfig
from fitmask.errors import CheckpointFormatError
from fitmask.trainer import Pretrainer


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    config = TrainConfig.desk_scale().override({
        'batch_size': 4, 'queue_size': 16, 'K': 4,
        'encoder.channels': 8, 'encoder.stem_widths': [4, 8, 8], 'encoder.projector_dims': [16],
    })
    trainer = Pretrainer(config, out_dir=str(tmp_path_factory.mktemp("ckpt")), force_env=True)
    gen = torch.Generator().manual_seed(0)
    for _ in range(3):
        x = torch.rand(4, 3, 64, 64, generator=gen)
        trainer.train_step((x, x.flip(-1), torch.arange(4)))
    return trainer


def test_roundtrip_bitwise(trained):
    path = trained.save()
    ckpt = load_checkpoint(path)
    original = trained.checkpoint()
    assert ckpt.step == 3
    assert ckpt.config_hash == trained.config.config_hash
    assert ckpt.version == FORMAT_VERSION
    assert ckpt.params.keys() == original.params.keys()
    for name, value in original.params.items():
        assert ckpt.params[name].dtype == value.dtype, name
        assert torch.equal(ckpt.params[name], value), name
    assert torch.equal(ckpt.queue['buffer'], trained.queue.buffer)
    assert (ckpt.queue['cursor'], ckpt.queue['size']) == (trained.queue.cursor, trained.queue.size)
    assert ckpt.optimizer.keys() == original.optimizer.keys()
    assert len(ckpt.optimizer) > 0


def test_float64_roundtrip(tmp_path):
    params = {'w': torch.randn(3, 3, dtype=torch.float64), 'n': torch.tensor(7)}
    queue = {'buffer': torch.randn(4, 2, dtype=torch.float64), 'cursor': 1, 'size': 4}
    path = save_checkpoint(tmp_path / "c.npz", Checkpoint(params=params, queue=queue, step=2))
    back = load_checkpoint(path)
    assert back.params['w'].dtype == torch.float64
    assert torch.equal(back.params['w'], params['w'])
    assert back.params['n'].item() == 7


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "nope.npz")


def rewrite_meta(path, **changes):
    with np.load(path, allow_pickle=False) as archive:
        arrays = {k: archive[k] for k in archive.files}
    meta = json.loads(arrays[META_KEY].tobytes().decode())
    meta.update(changes)
    arrays[META_KEY] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def test_bumped_version(trained, tmp_path):
    path = save_checkpoint(tmp_path / "c.npz", trained.checkpoint())
    rewrite_meta(path, version=FORMAT_VERSION + 1)
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(path)


def test_layout_mismatch(trained, tmp_path):
    path = save_checkpoint(tmp_path / "c.npz", trained.checkpoint())
    with np.load(path, allow_pickle=False) as archive:
        meta = json.loads(archive[META_KEY].tobytes().decode())
    name = next(iter(meta['arrays']))
    meta['arrays'][name]['shape'] = [999]
    rewrite_meta(path, arrays=meta['arrays'])
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(path)


def test_not_an_archive(tmp_path):
    path = tmp_path / "junk.npz"
    path.write_bytes(b"definitely not a zip")
    with pytest.raises(CheckpointFormatError):
        load_arrays(path)


def test_feature_cache(tmp_path):
    features = torch.randn(10, 6)
    labels = torch.arange(10) % 3
    path = save_features(tmp_path / "f.npz", features, labels, meta={'split': 'test'})
    f, y, meta = load_features(path)
    assert torch.equal(f, features)
    assert torch.equal(y, labels)
    assert meta['split'] == 'test'
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(path)
