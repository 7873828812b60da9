import math
from typing import Optional
import pandas as pd
import torch
from torch.utils.data import DataLoader
from tqdm import tqdm
from .access import Access
from .checkpoint import Checkpoint, save_checkpoint, load_checkpoint
from .config import TrainConfig
from .data_helpers import DatasetManifest, ImageDataset
from .errors import ConfigurationError, NonFiniteLossError, StateError
from .model import FitMaskModel
from .moco_helpers import EmbeddingQueue, contrastive_loss, queue_update
from .rationale_helpers import (
    gradcam, gradcam_objective, softmax_normalize, kl_fitting_loss, total_loss
    )
from .variants import configure_variant

METRIC_COLUMNS = ['step', 'epoch', 'l_cl', 'l_kl', 'total', 'lr']


class Pretrainer(Access):
    """
    Contrastive pretraining with the GradCAM fitting branch.

    Inputs:
        config (TrainConfig)
        manifest (DatasetManifest) - training images come from its train split; optional when
            train_step is driven by hand
        out_dir (str) - where metrics.csv, summary.json and checkpoints go
        force_env (bool) - see Access
    """
    def __init__(
            self,
            config: TrainConfig,
            manifest: Optional[DatasetManifest]=None,
            out_dir: Optional[str]=None,
            force_env: Optional[bool]=None
            ):
        super().__init__(out_dir=out_dir, force_env=force_env)
        self.config = config
        self.manifest = manifest
        self.variant = configure_variant(config.variant, config.K, config.encoder.channels)

        torch.manual_seed(config.seed)
        self.model = FitMaskModel(config, self.variant).to(device=self.device, dtype=self.dtype)
        self.model.sync_key()
        self.queue = EmbeddingQueue.random(
            config.queue_size, self.model.embed_dim, seed=config.seed, device=self.device, dtype=self.dtype)
        self.optimizer = torch.optim.SGD(
            self.model.trainable_parameters(),
            lr=config.lr, momentum=config.momentum, weight_decay=config.weight_decay
            )
        self.step = 0
        self.metrics = []
        self._dataset = None

    # -- data ---------------------------------------------------------------------------

    @property
    def dataset(self) -> ImageDataset:
        if self._dataset is None:
            if self.manifest is None:
                raise ConfigurationError("Pretrainer needs a dataset manifest to iterate over")
            self._dataset = ImageDataset(
                self.manifest, 'train', self.config.augment, mode='views', seed=self.config.seed)
        return self._dataset

    @property
    def steps_per_epoch(self) -> int:
        return len(self.dataset) // self.config.batch_size

    def make_loader(self, epoch: int) -> DataLoader:
        """
        Shuffled, drop_last loader whose order depends only on (seed, epoch).
        """
        self.dataset.set_epoch(epoch)
        gen = torch.Generator().manual_seed(self.config.seed * 100_003 + epoch)
        return DataLoader(
            self.dataset,
            batch_size=self.config.batch_size,
            shuffle=True,
            drop_last=True,
            generator=gen,
            num_workers=self.num_workers,
            persistent_workers=False,
            )

    @property
    def total_steps(self) -> int:
        if self.config.max_steps is not None:
            return self.config.max_steps
        return self.config.epochs * self.steps_per_epoch

    def lr_at(self, step: int) -> float:
        if self.config.schedule == 'cosine':
            return self.config.lr * 0.5 * (1.0 + math.cos(math.pi * min(step, self.total_steps) / max(self.total_steps, 1)))
        return self.config.lr

    # -- one step -----------------------------------------------------------------------

    def bn_groups(self, n: int) -> int:
        """
        BatchNorm groups for a batch of n, at most bn_splits and at least 2 images each.
        """
        return max(1, min(self.config.bn_splits, n // 2))

    @torch.no_grad()
    def key_embeddings(self, x_k: torch.Tensor) -> torch.Tensor:
        """
        Key embeddings with shuffled BatchNorm: the key batch is permuted before it is split
        into groups, so a key never shares normalization statistics with its own query group.
        The permutation depends only on (seed, step).
        """
        splits = self.bn_groups(x_k.shape[0])
        if splits == 1:
            return self.model.embed(x_k, network='key').detach()
        gen = torch.Generator().manual_seed(self.config.seed * 1_000_003 + self.step)
        perm = torch.randperm(x_k.shape[0], generator=gen).to(x_k.device)
        k = self.model.embed(x_k[perm], network='key', splits=splits)
        return k[torch.argsort(perm)].detach()

    def query_losses(self, x_q: torch.Tensor, k: torch.Tensor, gradcam_target: Optional[torch.Tensor]=None) -> dict:
        """
        Forward of the query view: contrastive loss, GradCAM, fitting-branch KL and the total.

        Inputs:
            x_q (Tensor) - query view batch
            k (Tensor) - key embeddings (constants)
            gradcam_target (Tensor) - optional fixed normalized GradCAM; computed from the
                current graph when omitted

        Outputs:
            dict with l_cl, l_kl, total (tensors) and g_bar (detached target)
        """
        cfg = self.config
        feature_map, pooled = self.model.encode(x_q, 'query', self.bn_groups(x_q.shape[0]))
        q = self.model.project(self.model.train_pool(feature_map, pooled, 'query'), 'query')
        l_cl, l_pos = contrastive_loss(q, k, self.queue, cfg.t)

        l_kl = torch.zeros((), device=l_cl.device, dtype=l_cl.dtype)
        g_bar = None
        if self.variant.fits_gradcam:
            g_bar = gradcam_target
            if g_bar is None:
                objective = gradcam_objective(cfg.gradcam_source, l_pos=l_pos, loss=l_cl)
                g_bar = softmax_normalize(gradcam(feature_map, objective), cfg.tau)
            a_bar = softmax_normalize(self.model.attention(feature_map), cfg.tau)
            l_kl = kl_fitting_loss(a_bar, g_bar, cfg.kl_direction)
        total = total_loss(l_cl, l_kl, cfg.loss)
        return {'l_cl': l_cl, 'l_kl': l_kl, 'total': total, 'g_bar': g_bar}

    def train_step(self, batch, epoch: int=0) -> dict:
        """
        Forward both views, backward the total loss, SGD on the query side, momentum update
        of the key side, then enqueue the keys.

        Inputs:
            batch (tuple) - (x_q, x_k, indices)

        Outputs:
            metrics row (dict)
        """
        x_q, x_k, indices = batch
        if x_q.shape[0] < 2:
            raise ValueError("train_step needs a batch of at least 2 images")
        x_q = x_q.to(self.device, self.dtype)
        x_k = x_k.to(self.device, self.dtype)

        self.model.train()
        lr = self.lr_at(self.step)
        for group in self.optimizer.param_groups:
            group['lr'] = lr

        k = self.key_embeddings(x_k)
        losses = self.query_losses(x_q, k)
        components = {name: losses[name].item() for name in ['l_cl', 'l_kl', 'total']}
        if not all(math.isfinite(v) for v in components.values()):
            dump = self.write_json({
                'step': self.step, 'epoch': epoch,
                'batch_indices': [int(i) for i in indices], **components,
                }, "nonfinite_dump.json")
            raise NonFiniteLossError(f"non-finite loss at step {self.step}: {components}", dump_path=dump)

        self.optimizer.zero_grad(set_to_none=True)
        losses['total'].backward()
        self.optimizer.step()
        self.model.momentum_update()
        queue_update(self.queue, k)

        row = {'step': self.step, 'epoch': epoch, **components, 'lr': lr}
        self.metrics.append(row)
        self.step += 1
        return row

    # -- loop ---------------------------------------------------------------------------

    def fit(self, epochs: Optional[int]=None, max_steps: Optional[int]=None) -> pd.DataFrame:
        """
        Runs epochs until the configured number of epochs or steps is reached, resuming
        from self.step (a restored checkpoint skips the batches it already consumed).
        """
        epochs = epochs or self.config.epochs
        max_steps = max_steps if max_steps is not None else self.config.max_steps
        per_epoch = self.steps_per_epoch
        if per_epoch == 0:
            raise ConfigurationError(
                f"train split has {len(self.dataset)} images, fewer than one batch of {self.config.batch_size}")
        if max_steps is not None:
            epochs = max(epochs, math.ceil(max_steps / per_epoch))
        last_step = max_steps if max_steps is not None else epochs * per_epoch

        print(f"pretraining {self.variant.mode} for {last_step - self.step} steps...")
        bar = tqdm(total=last_step, initial=self.step, desc=self.variant.mode, leave=False)
        start_epoch = self.step // per_epoch
        for epoch in range(start_epoch, epochs):
            skip = self.step - epoch * per_epoch
            for i, batch in enumerate(self.make_loader(epoch)):
                if i < skip:
                    continue
                if self.step >= last_step:
                    break
                row = self.train_step(batch, epoch)
                bar.update(1)
                bar.set_postfix(total=f"{row['total']:.4f}", l_kl=f"{row['l_kl']:.4f}")
            if self.step >= last_step:
                break
        bar.close()
        return self.metrics_frame()

    def metrics_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.metrics, columns=METRIC_COLUMNS)

    def write_metrics(self) -> dict:
        df = self.metrics_frame()
        csv_path = self.write_frame(df, "metrics.csv")
        summary = {
            'variant': self.variant.mode,
            'steps': int(self.step),
            'config_hash': self.config.config_hash,
            'final': df.iloc[-1].to_dict() if len(df) else None,
            'mean_last_10': df[['l_cl', 'l_kl', 'total']].tail(10).mean().to_dict() if len(df) else None,
        }
        json_path = self.write_json(summary, "summary.json")
        return {'metrics': csv_path, 'summary': json_path}

    # -- checkpoints --------------------------------------------------------------------

    def checkpoint(self) -> Checkpoint:
        names = dict((id(p), n) for n, p in self.model.named_trainable_parameters())
        optim = {}
        for p, state in self.optimizer.state.items():
            if 'momentum_buffer' in state and state['momentum_buffer'] is not None:
                optim[names[id(p)]] = state['momentum_buffer']
        return Checkpoint(
            params=dict(self.model.state_dict()),
            queue=self.queue.state(),
            optimizer=optim,
            step=self.step,
            config_hash=self.config.config_hash,
            config=self.config.to_dict(),
            )

    def save(self, name: str="checkpoint.npz"):
        return save_checkpoint(self.out_path(name), self.checkpoint())

    def restore(self, ckpt: Checkpoint):
        """
        Loads parameters, queue, optimizer momentum and step; the config hash must match.
        """
        if ckpt.config_hash != self.config.config_hash:
            raise StateError("checkpoint was written under a different config")
        self.model.load_state_dict({k: v.to(self.device) for k, v in ckpt.params.items()})
        self.queue = EmbeddingQueue.from_state({
            **ckpt.queue, 'buffer': ckpt.queue['buffer'].to(self.device)})
        params = dict(self.model.named_trainable_parameters())
        for name, buf in ckpt.optimizer.items():
            if name not in params:
                raise StateError(f"optimizer state for unknown parameter {name}")
            self.optimizer.state[params[name]]['momentum_buffer'] = buf.to(self.device).clone()
        self.step = ckpt.step
        return self

    @classmethod
    def resume(cls, path, manifest=None, out_dir=None, force_env=None) -> "Pretrainer":
        ckpt = load_checkpoint(path)
        trainer = cls(TrainConfig.from_dict(ckpt.config), manifest, out_dir=out_dir, force_env=force_env)
        return trainer.restore(ckpt)
