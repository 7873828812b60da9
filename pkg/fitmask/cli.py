"""
Command-line entry point: `python main.py <command> ...` or the `fitmask` script.

Every command writes run_manifest.json into its --out folder. Exit codes: 0 success,
1 runtime failure, 2 usage error.

What else lands in --out, per command:

    gen-data             data/ (or --root): class_XX/<split>_NNNN.png, boxes.json, glyphs.npy,
                         spec.json, manifest.json
    pretrain             checkpoint.npz, metrics.csv, summary.json
                         (nonfinite_dump.json when a loss goes non-finite)
    extract-features     features_<split>.npz
    eval-linear          probe.csv
    eval-retrieval       retrieval.json
    analyze-projections  projections.json
    export-heatmaps      heatmaps/heatmap_NNNN.png
    collapse-check       collapse.json
    sweep-k|dim|nu       sweep_<param>.csv, plus one trial folder per run under
                         sweep_<param>/<value>/<variant>_seed<s>/
    compare-variants     compare_variants.csv, compare_variants_mean.csv, plus trial folders
                         under compare/<variant>_seed<s>/
    replay               whatever the replayed command writes

A trial folder holds checkpoint.npz, metrics.csv, summary.json, retrieval.json, probe.csv,
collapse.json and report.json.
"""

import argparse
import json
import sys
import traceback
from pathlib import Path
from typing import List, Optional
import pandas as pd
from .access import Access
from .checkpoint import load_features
from .config import TrainConfig, GRADCAM_SOURCES, KL_DIRECTIONS, POOL_NORMALIZATIONS
from .data_helpers import load_dataset
from .errors import FitmaskError
from .evaluation import Evaluator, evaluate_cached
from .experiments import ExperimentRunner
from .metric_helpers import collapse_check
from .synthetic import SyntheticSpec, generate_synthetic
from .trainer import Pretrainer
from .variants import MODES

COMMANDS = [
    'gen-data', 'pretrain', 'extract-features', 'eval-linear', 'eval-retrieval',
    'analyze-projections', 'export-heatmaps', 'collapse-check', 'sweep-k', 'sweep-dim',
    'sweep-nu', 'compare-variants', 'replay',
]

# flag dest -> config key
TRAIN_FLAGS = {
    'variant': 'variant',
    'seed': 'seed',
    'lr': 'lr',
    'steps': 'max_steps',
    'epochs': 'epochs',
    'batch_size': 'batch_size',
    'K': 'K',
    'tau': 'tau',
    't': 't',
    'm': 'm',
    'queue_size': 'queue_size',
    'lam': 'loss.lam',
    'nu': 'loss.nu',
    'schedule': 'schedule',
    'gradcam_source': 'gradcam_source',
    'kl_direction': 'kl_direction',
    'pool_normalization': 'pool_normalization',
    'feature_source': 'feature_source',
    'activation': 'encoder.activation',
}


def _floats(text: str) -> List[float]:
    return [float(v) for v in text.split(',') if v.strip()]


def _ints(text: str) -> List[int]:
    return [int(v) for v in text.split(',') if v.strip()]


def _flatten(payload: dict, prefix: str='') -> dict:
    flat = {}
    for k, v in payload.items():
        if isinstance(v, dict):
            flat.update(_flatten(v, f"{prefix}{k}."))
        else:
            flat[f"{prefix}{k}"] = v
    return flat


def resolve_config(args) -> TrainConfig:
    """
    preset < --config json < flags.
    """
    base = {'desk': TrainConfig.desk_scale, 'paper': TrainConfig.paper_scale, 'none': TrainConfig}[args.preset]()
    if getattr(args, 'config', None):
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config file {path} not found")
        base = base.override(_flatten(json.loads(path.read_text())))
    flags = {key: getattr(args, dest, None) for dest, key in TRAIN_FLAGS.items()}
    if getattr(args, 'dim', None) is not None:
        flags['encoder.projector_dims'] = [*base.encoder.projector_dims[:-1], args.dim]
    return base.override(flags)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--out', default=None, help="output folder (default: $FITMASK_OUT)")
    common.add_argument('--force-env', action='store_true', help="ignore .env, use the process environment only")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument('--data', required=True, help="dataset folder (root/class/image files or a generated dataset)")

    ckpt = argparse.ArgumentParser(add_help=False)
    ckpt.add_argument('--ckpt', help="checkpoint written by pretrain")

    train = argparse.ArgumentParser(add_help=False)
    train.add_argument('--config', help="TrainConfig json")
    train.add_argument('--preset', choices=['desk', 'paper', 'none'], default='desk')
    train.add_argument('--variant', choices=MODES)
    train.add_argument('--seed', type=int)
    train.add_argument('--lr', type=float)
    train.add_argument('--steps', type=int, help="stop after this many steps")
    train.add_argument('--epochs', type=int)
    train.add_argument('--batch-size', type=int)
    train.add_argument('--K', type=int)
    train.add_argument('--dim', type=int, help="embedding dimension D")
    train.add_argument('--tau', type=float)
    train.add_argument('--t', type=float, help="contrastive temperature")
    train.add_argument('--m', type=float, help="key-network momentum")
    train.add_argument('--queue-size', type=int)
    train.add_argument('--lam', type=float)
    train.add_argument('--nu', type=float)
    train.add_argument('--schedule', choices=['constant', 'cosine'])
    train.add_argument('--gradcam-source', choices=GRADCAM_SOURCES[:2])
    train.add_argument('--kl-direction', choices=KL_DIRECTIONS)
    train.add_argument('--pool-normalization', choices=POOL_NORMALIZATIONS)
    train.add_argument('--feature-source', choices=['attention', 'gap'])
    train.add_argument('--activation', choices=['relu', 'silu'])

    trials = argparse.ArgumentParser(add_help=False)
    trials.add_argument('--seeds', type=_ints, default=[0])
    trials.add_argument('--workers', type=int, default=0, help="run trials in parallel processes")
    trials.add_argument('--fractions', type=_floats, default=[1.0], help="linear-probe label fractions")

    parser = argparse.ArgumentParser(prog='fitmask', description="Contrastive pretraining with a GradCAM fitting branch.")
    sub = parser.add_subparsers(dest='command', required=True, metavar='{' + ','.join(COMMANDS) + '}')

    p = sub.add_parser('gen-data', parents=[common], help="write the synthetic glyph dataset")
    p.add_argument('--spec', default='default', help="'default' or a SyntheticSpec json")
    p.add_argument('--root', help="dataset folder (default: <out>/data)")
    p.add_argument('--classes', type=int)
    p.add_argument('--train-per-class', type=int)
    p.add_argument('--test-per-class', type=int)
    p.add_argument('--correlation', type=float)
    p.add_argument('--data-seed', type=int)
    p.add_argument('--workers', type=int, default=0)

    p = sub.add_parser('pretrain', parents=[common, data, train], help="pretrain one variant")
    p.add_argument('--resume', help="checkpoint to continue from")

    p = sub.add_parser('extract-features', parents=[common, data, ckpt], help="cache test/train features")
    p.add_argument('--split', choices=['train', 'test'], default='test')

    p = sub.add_parser('eval-linear', parents=[common, data, ckpt], help="linear probe on frozen features")
    p.add_argument('--fractions', type=_floats, default=[1.0, 0.5, 0.2])
    p.add_argument('--seed', type=int, default=0)

    p = sub.add_parser('eval-retrieval', parents=[common, ckpt], help="leave-one-out retrieval")
    p.add_argument('--data')
    p.add_argument('--features', help="feature cache from extract-features (instead of --ckpt)")
    p.add_argument('--metric', choices=['cosine', 'l2'], default='cosine')

    p = sub.add_parser('analyze-projections', parents=[common, data, ckpt], help="projection variance and subset retrieval")
    p.add_argument('--top', type=int, default=8)
    p.add_argument('--seed', type=int, default=0)

    p = sub.add_parser('export-heatmaps', parents=[common, data, ckpt], help="attention overlays as png")
    p.add_argument('--limit', type=int, default=16)
    p.add_argument('--split', choices=['train', 'test'], default='test')

    p = sub.add_parser('collapse-check', parents=[common, ckpt], help="flag a collapsed representation")
    p.add_argument('--data')
    p.add_argument('--features', help="feature cache from extract-features (instead of --ckpt)")

    for name, param, default in [
            ('sweep-k', 'K', '1,2,4,8,16,32,64,128,256'),
            ('sweep-dim', 'dim', '64,128,256,512,1024'),
            ('sweep-nu', 'nu', '1,0.1,0.01,0.001'),
            ]:
        p = sub.add_parser(name, parents=[common, data, train, trials], help=f"retrieval across {param} values")
        p.add_argument('--values', default=default)
        p.add_argument('--variants', default='ours')
        p.set_defaults(sweep_param=param)

    p = sub.add_parser('compare-variants', parents=[common, data, train, trials], help="all variants side by side")
    p.add_argument('--variants', default=','.join(MODES))
    p.set_defaults(seeds=[0, 1, 2])

    p = sub.add_parser('replay', help="re-run the command recorded in a run manifest")
    p.add_argument('--manifest', required=True)
    p.add_argument('--out', help="where the replay writes (default: the original folder)")
    return parser


def _need(args, name):
    if not getattr(args, name, None):
        raise FitmaskError(f"{args.command} needs --{name}")
    return getattr(args, name)


def _evaluator(args) -> Evaluator:
    manifest = load_dataset(_need(args, 'data'))
    return Evaluator.from_checkpoint(_need(args, 'ckpt'), manifest, out_dir=args.out, force_env=args.force_env)


def _features(args):
    if getattr(args, 'features', None):
        features, labels, _ = load_features(args.features)
        return features, labels
    return _evaluator(args).features('test')


def run_command(args, access: Access) -> dict:
    """
    Runs one parsed command; returns its output paths.
    """
    out = access.out_dir
    cmd = args.command

    if cmd == 'gen-data':
        spec = SyntheticSpec() if args.spec == 'default' else SyntheticSpec.from_json(args.spec)
        fields = {
            'classes': args.classes, 'train_per_class': args.train_per_class,
            'test_per_class': args.test_per_class, 'correlation': args.correlation, 'seed': args.data_seed,
        }
        spec = SyntheticSpec(**{**vars(spec), **{k: v for k, v in fields.items() if v is not None}})
        root = Path(args.root) if args.root else out / 'data'
        generate_synthetic(spec, root, workers=args.workers)
        return {'data': root, 'boxes': root / 'boxes.json', 'manifest': root / 'manifest.json'}

    if cmd == 'pretrain':
        manifest = load_dataset(args.data)
        if args.resume:
            trainer = Pretrainer.resume(args.resume, manifest, out_dir=out, force_env=args.force_env)
        else:
            trainer = Pretrainer(args.resolved, manifest, out_dir=out, force_env=args.force_env)
        trainer.fit()
        outputs = {'checkpoint': trainer.save()}
        outputs.update(trainer.write_metrics())
        return outputs

    if cmd == 'extract-features':
        evaluator = _evaluator(args)
        return {'features': evaluator.cache_features(args.split)}

    if cmd == 'eval-linear':
        evaluator = _evaluator(args)
        report = evaluator.probe(args.fractions, args.seed)
        print(pd.DataFrame(report.rows).to_string(index=False))
        return {'probe': out / 'probe.csv'}

    if cmd == 'eval-retrieval':
        if args.features:
            report, _ = evaluate_cached(args.features, args.metric)
            access.write_json(report.to_dict(), 'retrieval.json')
        else:
            report = _evaluator(args).retrieval(metric=args.metric)
        print(f"rank-1 {report.rank1:.2f}  rank-5 {report.rank5:.2f}  mAP {report.mAP:.2f}")
        return {'retrieval': out / 'retrieval.json'}

    if cmd == 'analyze-projections':
        payload = _evaluator(args).projections(top=args.top, seed=args.seed)
        print(pd.DataFrame(payload['subset_retrieval']).drop(columns=['subset']).to_string(index=False))
        return {'projections': out / 'projections.json'}

    if cmd == 'export-heatmaps':
        paths = _evaluator(args).heatmaps(args.split, args.limit)
        return {'heatmaps': out / 'heatmaps', 'count': len(paths)}

    if cmd == 'collapse-check':
        features, labels = _features(args)
        report = collapse_check(features, labels)
        access.write_json(report.to_dict(), 'collapse.json')
        print(f"collapsed={report.collapsed} mean std={report.mean_std:.4f}")
        return {'collapse': out / 'collapse.json'}

    runner = ExperimentRunner(
        args.resolved, args.data, out_dir=out, force_env=args.force_env,
        workers=args.workers, probe_fractions=args.fractions,
        )
    if cmd in ('sweep-k', 'sweep-dim', 'sweep-nu'):
        values = _floats(args.values) if args.sweep_param == 'nu' else _ints(args.values)
        df = runner.sweep(args.sweep_param, values, args.variants.split(','), args.seeds)
        print(df.to_string(index=False))
        return {'sweep': out / f"sweep_{args.sweep_param}.csv"}
    if cmd == 'compare-variants':
        runner.compare_variants(args.variants.split(','), args.seeds)
        return {'trials': out / 'compare_variants.csv', 'means': out / 'compare_variants_mean.csv'}
    raise FitmaskError(f"unhandled command {cmd!r}")


def replay(args) -> int:
    path = Path(args.manifest)
    if not path.exists():
        raise FileNotFoundError(f"no run manifest at {path}")
    recorded = json.loads(path.read_text())
    argv = list(recorded['argv'])
    if args.out:
        argv += ['--out', args.out]
    print(f"replaying {' '.join(argv)}...")
    return dispatch(argv)


def dispatch(argv: Optional[List[str]]=None) -> int:
    """
    Parses argv, runs the command and returns the exit code.
    """
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 2

    access, manifest = None, None
    try:
        if args.command == 'replay':
            return replay(args)
        args.resolved = resolve_config(args) if hasattr(args, 'preset') else None
        access = Access(out_dir=args.out, force_env=args.force_env)
        config = args.resolved.to_dict() if args.resolved else {
            k: v for k, v in vars(args).items() if k not in ('resolved',)}
        seed = args.resolved.seed if args.resolved else getattr(args, 'seed', None)
        manifest = access.start_manifest(args.command, argv, config, seed)
        outputs = run_command(args, access)
        access.finalize_manifest(manifest, outputs)
        return 0
    except (FitmaskError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        if access is not None and manifest is not None:
            access.finalize_manifest(manifest, {}, status=f"failed: {type(e).__name__}")
        return 1
    except Exception as e:
        traceback.print_exc()
        if access is not None and manifest is not None:
            access.finalize_manifest(manifest, {}, status=f"failed: {type(e).__name__}")
        return 1


def main():
    sys.exit(dispatch())
