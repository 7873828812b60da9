import os
import json
import subprocess
import datetime as dt
from pathlib import Path
from typing import Optional
import pandas as pd
import torch

ENV_DEFAULTS = {
    'FITMASK_DEVICE': 'cpu',
    'FITMASK_OUT': 'runs',
    'FITMASK_NUM_WORKERS': '0',
    'FITMASK_DTYPE': 'float32',
}

DTYPES = {'float32': torch.float32, 'float64': torch.float64}


class Access:
    """
    Handles environment settings and the artifact directory of a run.

    Inputs:
        out_dir (str) - root directory for everything the run writes, defaults to FITMASK_OUT
        force_env (bool) - forces use of the process environment only (for CI or testing) instead of .env
    """
    def __init__(self, out_dir: Optional[str]=None, force_env: Optional[bool]=None):
        if not "FITMASK_NO_DOTENV" in os.environ and not force_env:
            from dotenv import load_dotenv, find_dotenv
            load_dotenv(find_dotenv(usecwd=True))

        for k, default in ENV_DEFAULTS.items():
            setattr(self, k, os.environ.get(k, default))

        if self.FITMASK_DTYPE not in DTYPES:
            raise ValueError(f"bad FITMASK_DTYPE {self.FITMASK_DTYPE!r}, expected one of {sorted(DTYPES)}")
        self.out_dir = Path(out_dir or self.FITMASK_OUT)

    @property
    def device(self) -> torch.device:
        return torch.device(self.FITMASK_DEVICE)

    @property
    def dtype(self) -> torch.dtype:
        return DTYPES[self.FITMASK_DTYPE]

    @property
    def num_workers(self) -> int:
        return int(self.FITMASK_NUM_WORKERS)

    def out_path(self, *parts: str) -> Path:
        """
        Path under the run directory, creating parent folders as needed.
        """
        path = self.out_dir.joinpath(*parts)
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def write_frame(self, df: pd.DataFrame, name: str, index: bool=False) -> Path:
        path = self.out_path(name)
        df.to_csv(path, index=index)
        return path

    def read_frame(self, name: str) -> pd.DataFrame:
        return pd.read_csv(self.out_dir / name)

    def write_json(self, payload: dict, name: str) -> Path:
        """
        Writes json atomically (temp file then rename) so a crashed run never leaves half a report.
        """
        path = self.out_path(name)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str))
        os.replace(tmp, path)
        return path

    def read_json(self, name: str) -> dict:
        return json.loads((self.out_dir / name).read_text())

    def start_manifest(self, command: str, argv: list, config: dict, seed: int) -> dict:
        """
        Writes run_manifest.json at the start of a run.

        Inputs:
            command (str) - cli subcommand
            argv (list) - full argument vector, enough to replay the run
            config (dict) - resolved configuration after flag overrides
            seed (int)

        Outputs:
            manifest (dict) - pass back to finalize_manifest
        """
        manifest = {
            'command': command,
            'argv': list(argv),
            'config': config,
            'seed': seed,
            'build': build_identifier(),
            'started': dt.datetime.now().isoformat(timespec='seconds'),
            'finished': None,
            'wall_clock_s': None,
            'status': 'running',
            'outputs': {},
        }
        self.write_json(manifest, "run_manifest.json")
        return manifest

    def finalize_manifest(self, manifest: dict, outputs: dict, status: str='ok') -> dict:
        finished = dt.datetime.now()
        started = dt.datetime.fromisoformat(manifest['started'])
        manifest.update({
            'finished': finished.isoformat(timespec='seconds'),
            'wall_clock_s': (finished - started).total_seconds(),
            'status': status,
            'outputs': {k: str(v) for k, v in outputs.items()},
        })
        self.write_json(manifest, "run_manifest.json")
        return manifest


def build_identifier() -> str:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            capture_output=True, text=True, timeout=5, check=True
            )
        return f"git-{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        from . import __version__
        return f"fitmask-{__version__}"
