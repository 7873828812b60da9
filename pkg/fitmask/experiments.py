from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Iterable, Optional, Sequence
import pandas as pd
from tqdm import tqdm
from .access import Access
from .config import TrainConfig
from .data_helpers import DatasetManifest, load_dataset
from .evaluation import Evaluator
from .synthetic import SyntheticSpec, generate_synthetic
from .trainer import Pretrainer

SWEEP_PARAMS = {
    'K': 'K',
    'dim': 'encoder.projector_dims',
    'nu': 'loss.nu',
}


class ExperimentRunner(Access):
    """
    Runs whole trials: data (generated if missing) -> pretrain -> extract -> retrieval,
    probe, collapse check and attention mass. Each trial writes report.json in its own folder.

    Inputs:
        config (TrainConfig) - base configuration, trials override variant / seed / swept key
        data_root (str) - dataset folder
        spec (SyntheticSpec) - generates data_root when it has no manifest yet
        out_dir (str)
        workers (int) - trials run in this many processes; 0 runs them in-process
        probe_fractions (tuple) - label fractions for the linear probe
    """
    def __init__(
            self,
            config: TrainConfig,
            data_root,
            spec: Optional[SyntheticSpec]=None,
            out_dir: Optional[str]=None,
            force_env: Optional[bool]=None,
            workers: int=0,
            probe_fractions: Sequence[float]=(1.0,)
            ):
        super().__init__(out_dir=out_dir, force_env=force_env)
        self.config = config
        self.data_root = Path(data_root)
        self.spec = spec
        self.force_env = force_env
        self.workers = workers
        self.probe_fractions = tuple(probe_fractions)
        self._manifest = None

    @property
    def manifest(self) -> DatasetManifest:
        if self._manifest is None:
            if not (self.data_root / 'manifest.json').exists() and self.spec is not None:
                print(f"generating synthetic data in {self.data_root}...")
                self._manifest = generate_synthetic(self.spec, self.data_root)
            else:
                print("loading dataset...")
                self._manifest = load_dataset(self.data_root, seed=self.config.seed)
        return self._manifest

    def trial_dir(self, config: TrainConfig, tag: str='') -> Path:
        name = f"{config.variant}_seed{config.seed}"
        return self.out_dir / tag / name if tag else self.out_dir / name

    def run(self, variant: Optional[str]=None, seed: Optional[int]=None, overrides: Optional[dict]=None, tag: str='') -> dict:
        """
        One full trial.

        Outputs:
            report (dict) - variant, seed, config hash, retrieval, probe rows, collapse and
                (for synthetic data with a branch) attention mass
        """
        config = self.config.override({'variant': variant, 'seed': seed, **(overrides or {})})
        return _run_trial(config, self.manifest, self.trial_dir(config, tag), self.force_env, self.probe_fractions)

    def run_many(self, configs: Iterable[tuple], desc: str="trials") -> list:
        """
        Inputs:
            configs - (TrainConfig, tag) pairs
        """
        jobs = [(cfg, self.manifest, self.trial_dir(cfg, tag), self.force_env, self.probe_fractions) for cfg, tag in configs]
        if self.workers > 0:
            with ProcessPoolExecutor(max_workers=self.workers) as pool:
                futures = [pool.submit(_run_trial, *job) for job in jobs]
                return [f.result() for f in tqdm(futures, desc=desc)]
        return [_run_trial(*job) for job in tqdm(jobs, desc=desc)]

    def sweep(self, param: str, values: Sequence, variants: Sequence[str]=('ours',), seeds: Sequence[int]=(0,)) -> pd.DataFrame:
        """
        Trials over one hyperparameter ('K', 'dim' or 'nu'); writes sweep_<param>.csv.
        """
        if param not in SWEEP_PARAMS:
            raise ValueError(f"unknown sweep parameter {param!r}, expected one of {sorted(SWEEP_PARAMS)}")
        configs = []
        for value in values:
            if param == 'dim':
                value = [*self.config.encoder.projector_dims[:-1], int(value)]
            for variant in variants:
                for seed in seeds:
                    cfg = self.config.override({SWEEP_PARAMS[param]: value, 'variant': variant, 'seed': seed})
                    configs.append((cfg, f"sweep_{param}/{_label(value)}"))
        reports = self.run_many(configs, desc=f"sweep {param}")
        df = pd.DataFrame([{
            param: _label(values[i // (len(variants) * len(seeds))]),
            'variant': r['variant'], 'seed': r['seed'],
            'rank1': r['retrieval']['rank1'], 'rank5': r['retrieval']['rank5'], 'mAP': r['retrieval']['mAP'],
            } for i, r in enumerate(reports)])
        self.write_frame(df, f"sweep_{param}.csv")
        return df

    def compare_variants(self, variants: Sequence[str], seeds: Sequence[int]=(0, 1, 2)) -> pd.DataFrame:
        """
        Every variant on every seed; writes per-trial rows and a per-variant mean table.
        """
        configs = [
            (self.config.override({'variant': v, 'seed': s}), "compare") for v in variants for s in seeds
            ]
        reports = self.run_many(configs, desc="variants")
        rows = []
        for r in reports:
            row = {'variant': r['variant'], 'seed': r['seed'], **{f"retrieval_{k}": r['retrieval'][k] for k in ['rank1', 'rank5', 'mAP']}}
            row['collapsed'] = r['collapse']['collapsed']
            row['probe_top1'] = r['probe'][0]['top1'] if r['probe'] else None
            if r.get('attention_mass'):
                row['attention_ratio'] = r['attention_mass']['ratio']
            rows.append(row)
        df = pd.DataFrame(rows)
        self.write_frame(df, "compare_variants.csv")
        summary = df.drop(columns=['seed']).groupby('variant', sort=False).mean(numeric_only=True).reset_index()
        self.write_frame(summary, "compare_variants_mean.csv")
        return df


def _label(value) -> str:
    if isinstance(value, (list, tuple)):
        return str(value[-1])
    return str(value)


def _run_trial(config: TrainConfig, manifest: DatasetManifest, out_dir: Path, force_env, probe_fractions) -> dict:
    trainer = Pretrainer(config, manifest, out_dir=str(out_dir), force_env=force_env)
    trainer.fit()
    ckpt_path = trainer.save()
    trainer.write_metrics()

    evaluator = Evaluator(trainer.model, config, manifest, out_dir=str(out_dir), force_env=force_env)
    report = {
        'variant': config.variant,
        'seed': config.seed,
        'config_hash': config.config_hash,
        'checkpoint': str(ckpt_path),
        'steps': trainer.step,
        'retrieval': evaluator.retrieval().to_dict(),
        'probe': evaluator.probe(probe_fractions, seed=config.seed).rows if probe_fractions else [],
        'collapse': evaluator.collapse().to_dict(),
        'attention_mass': None,
    }
    if trainer.variant.has_branch and (Path(manifest.root) / 'boxes.json').exists():
        report['attention_mass'] = evaluator.localization()
    evaluator.write_json(report, "report.json")
    return report
