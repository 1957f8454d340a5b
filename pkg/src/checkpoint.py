"""
Checkpoint Persistence
Single self-describing JSON document holding the flow model, the run
configuration and the training curves, sealed with a SHA-256 content hash
"""

import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np

from src.envs import EnvSpec
from src.errors import CheckpointError
from src.flow import FlowModel
from src.gpc import GpcConfig, IterationStats
from src.net import MlpParams

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
UNHASHED = ('created', 'hash', 'runtime')


@dataclass
class Checkpoint:
    model: FlowModel
    cfg: GpcConfig
    spec: Dict[str, object]
    stats: List[IterationStats]
    created: str
    hash: str

    @property
    def env(self) -> str:
        return self.cfg.env


def _model_payload(model: FlowModel) -> Dict[str, object]:
    return {
        'layer_sizes': list(model.net.layer_sizes),
        'activation': model.net.activation,
        'params': model.net.flat().tolist(),
        'obs_mean': model.obs_mean.tolist(),
        'obs_std': model.obs_std.tolist(),
        'num_knots': model.num_knots,
        'action_dim': model.action_dim,
        'obs_dim': model.obs_dim,
        'horizon_steps': model.horizon_steps,
    }


def _model_from_payload(data: Dict[str, object]) -> FlowModel:
    net = MlpParams.from_flat(data['layer_sizes'], data['activation'], np.array(data['params']))
    return FlowModel(
        net=net,
        obs_mean=np.array(data['obs_mean']),
        obs_std=np.array(data['obs_std']),
        num_knots=data['num_knots'],
        action_dim=data['action_dim'],
        obs_dim=data['obs_dim'],
        horizon_steps=data['horizon_steps'],
    )


def build_payload(model: FlowModel, cfg: GpcConfig, spec: EnvSpec,
                  stats: List[IterationStats]) -> Dict[str, object]:
    return {
        'format_version': FORMAT_VERSION,
        'env': cfg.env,
        'spec': spec.as_dict(),
        'model': _model_payload(model),
        'config': {k: v for k, v in cfg.as_dict().items() if k != 'workers'},
        'stats': [{k: v for k, v in asdict(s).items() if k != 'wall_time'} for s in stats],
        'runtime': {'workers': cfg.workers, 'wall_time': [s.wall_time for s in stats]},
    }


def payload_hash(document: Dict[str, object]) -> str:
    """SHA-256 over the canonical JSON of everything except timestamp, runtime details and hash"""
    payload = {k: v for k, v in document.items() if k not in UNHASHED}
    canonical = json.dumps(payload, sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def save(path: Union[str, Path], model: FlowModel, cfg: GpcConfig, spec: EnvSpec,
         stats: List[IterationStats]) -> str:
    """
    Write a checkpoint document

    Args:
        path: Output file
        model: Trained flow model
        cfg: Configuration used for training
        spec: Environment spec snapshot
        stats: Training curves

    Returns:
        Content hash
    """
    document = build_payload(model, cfg, spec, stats)
    document['hash'] = payload_hash(document)
    document['created'] = datetime.now(timezone.utc).isoformat(timespec='seconds')
    Path(path).write_text(json.dumps(document, indent=1, sort_keys=True) + '\n', encoding='utf-8')
    logger.info("checkpoint saved to %s (%s)", path, document['hash'][:12])
    return document['hash']


def load(path: Union[str, Path], expected_env: Optional[str] = None) -> Checkpoint:
    """
    Read and verify a checkpoint

    Args:
        path: Checkpoint file
        expected_env: Environment the caller is about to use, if any

    Returns:
        Checkpoint

    Raises:
        CheckpointError: on unreadable files, version or hash mismatch, or an
            environment different from expected_env
    """
    path = Path(path)
    try:
        document = json.loads(path.read_text(encoding='utf-8'))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc

    version = document.get('format_version')
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format_version {version}, expected {FORMAT_VERSION}")
    expected_hash = payload_hash(document)
    if document.get('hash') != expected_hash:
        raise CheckpointError(f"{path}: content hash does not match payload")
    if expected_env is not None and document['env'] != expected_env:
        raise CheckpointError(
            f"checkpoint was trained on '{document['env']}' but '{expected_env}' was requested"
        )

    try:
        runtime = document.get('runtime', {})
        cfg = GpcConfig(**document['config'], workers=runtime.get('workers', 1))
        timing = runtime.get('wall_time') or [0.0] * len(document['stats'])
        stats = [IterationStats(**s, wall_time=t) for s, t in zip(document['stats'], timing)]
        model = _model_from_payload(document['model'])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed payload ({exc})") from exc

    return Checkpoint(model=model, cfg=cfg, spec=document['spec'], stats=stats,
                      created=document.get('created', ''), hash=expected_hash)
