"""
Checkpoint and feature-cache files.

Layout: one numpy .npz archive (no pickled objects) holding
    param/<dotted.path>    model state (parameters and buffers)
    optim/<dotted.path>    SGD momentum buffers keyed by parameter path
    queue/buffer           QxD queue slots
    <any>/<name>           extra arrays (feature caches use features/, labels/)
    __meta__               uint8 array with utf-8 json: format version, step, config hash,
                           config, queue cursor and size, and the shape/dtype of every array
Floating arrays are stored little-endian in their own precision ('<f4' or '<f8'),
integers as '<i8', so a save/load round trip is bitwise.
"""

import io
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional
import numpy as np
import torch
from .errors import CheckpointFormatError

FORMAT_VERSION = 1
META_KEY = '__meta__'


@dataclass
class Checkpoint:
    params: Dict[str, torch.Tensor]
    queue: Dict[str, object]
    optimizer: Dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0
    config_hash: str = ''
    config: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION


def _to_array(t: torch.Tensor) -> np.ndarray:
    a = t.detach().cpu().numpy()
    if a.dtype.kind == 'f':
        return a.astype(a.dtype.newbyteorder('<'), copy=False)
    if a.dtype.kind in 'iub':
        return a.astype('<i8', copy=False)
    raise CheckpointFormatError(f"cannot store dtype {a.dtype}")


def save_arrays(path, arrays: Dict[str, torch.Tensor], meta: dict) -> Path:
    """
    Writes named tensors plus a json metadata block, atomically.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {k: _to_array(v) for k, v in arrays.items()}
    meta = dict(meta)
    meta['arrays'] = {k: {'shape': list(a.shape), 'dtype': a.dtype.str} for k, a in payload.items()}
    payload[META_KEY] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **payload)
    tmp = path.with_name(path.name + '.tmp')
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)
    return path


def load_arrays(path) -> tuple:
    """
    Outputs:
        arrays (dict) - name -> torch tensor
        meta (dict)
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    try:
        with np.load(path, allow_pickle=False) as archive:
            raw = {k: archive[k] for k in archive.files}
    except (ValueError, OSError) as e:
        raise CheckpointFormatError(f"{path} is not a readable array archive: {e}") from e
    if META_KEY not in raw:
        raise CheckpointFormatError(f"{path} has no metadata block")
    meta = json.loads(raw.pop(META_KEY).tobytes().decode())
    declared = meta.get('arrays', {})
    for k, a in raw.items():
        spec = declared.get(k)
        if spec is None or list(a.shape) != spec['shape'] or a.dtype.str != spec['dtype']:
            raise CheckpointFormatError(f"array {k} in {path} does not match its declared shape/dtype")
    arrays = {k: torch.from_numpy(a.astype(a.dtype.newbyteorder('='))) for k, a in raw.items()}
    return arrays, meta


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    arrays = {f"param/{k}": v for k, v in ckpt.params.items()}
    arrays.update({f"optim/{k}": v for k, v in ckpt.optimizer.items()})
    arrays['queue/buffer'] = ckpt.queue['buffer']
    meta = {
        'version': ckpt.version,
        'kind': 'checkpoint',
        'step': ckpt.step,
        'config_hash': ckpt.config_hash,
        'config': ckpt.config,
        'queue_cursor': int(ckpt.queue['cursor']),
        'queue_size': int(ckpt.queue['size']),
    }
    return save_arrays(path, arrays, meta)


def load_checkpoint(path) -> Checkpoint:
    arrays, meta = load_arrays(path)
    if meta.get('kind') != 'checkpoint':
        raise CheckpointFormatError(f"{path} is not a checkpoint (kind={meta.get('kind')!r})")
    if meta.get('version') != FORMAT_VERSION:
        raise CheckpointFormatError(
            f"{path} has format version {meta.get('version')}, this build reads version {FORMAT_VERSION}")
    params = {k[len('param/'):]: v for k, v in arrays.items() if k.startswith('param/')}
    optim = {k[len('optim/'):]: v for k, v in arrays.items() if k.startswith('optim/')}
    queue = {'buffer': arrays['queue/buffer'], 'cursor': meta['queue_cursor'], 'size': meta['queue_size']}
    return Checkpoint(
        params=params, queue=queue, optimizer=optim, step=meta['step'],
        config_hash=meta['config_hash'], config=meta['config'], version=meta['version'],
        )


def save_features(path, features: torch.Tensor, labels: torch.Tensor, meta: Optional[dict]=None) -> Path:
    meta = dict(meta or {})
    meta.update({'version': FORMAT_VERSION, 'kind': 'features'})
    return save_arrays(path, {'features/matrix': features, 'labels/vector': labels}, meta)


def load_features(path) -> tuple:
    arrays, meta = load_arrays(path)
    if meta.get('kind') != 'features':
        raise CheckpointFormatError(f"{path} is not a feature cache")
    return arrays['features/matrix'], arrays['labels/vector'], meta
