"""
Checkpoint files.

A checkpoint is a numpy ``.npz`` archive holding one ``param/<name>`` array per
model tensor plus a ``meta`` member: the UTF-8 JSON of ``CheckpointMeta``
stored as a uint8 array. Files are written through a temp file and moved
into place, and loaded with ``allow_pickle=False``.
"""

import json
import logging
import zipfile
from dataclasses import dataclass
from typing import Optional

import numpy as np
from pydantic import ValidationError

from deepcat.corpus import Vocabulary
from deepcat.errors import CheckpointError
from deepcat.fileio import atomic_open
from deepcat.models import CheckpointMeta, Taxonomy
from deepcat.network import ModelParams

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
PARAM_PREFIX = 'param/'
FIXED_TIMESTAMP = (1980, 1, 1, 0, 0, 0)


@dataclass
class Checkpoint:
    params: ModelParams
    meta: CheckpointMeta

    def vocabulary(self) -> Vocabulary:
        vocab = Vocabulary(self.meta.vocab_tokens)
        if vocab.fingerprint() != self.meta.vocab_hash:
            raise CheckpointError('checkpoint vocabulary does not match its recorded hash')
        return vocab


def save_checkpoint(path: str, params: ModelParams, meta: CheckpointMeta) -> None:
    if meta.format_version != CHECKPOINT_VERSION:
        raise CheckpointError(f"cannot write checkpoint format {meta.format_version}")
    members = {PARAM_PREFIX + name: arr for name, arr in params.arrays().items()}
    members['meta'] = np.frombuffer(meta.model_dump_json().encode('utf-8'), dtype=np.uint8)
    with atomic_open(path, 'wb') as f, zipfile.ZipFile(f, 'w', compression=zipfile.ZIP_STORED) as archive:
        for name in sorted(members):
            # fixed timestamps keep identical checkpoints byte-identical
            info = zipfile.ZipInfo(name + '.npy', date_time=FIXED_TIMESTAMP)
            with archive.open(info, 'w') as member:
                np.lib.format.write_array(member, np.ascontiguousarray(members[name]), allow_pickle=False)
    logger.info(f"checkpoint written to {path} ({params.num_parameters()} parameters)")


def load_checkpoint(path: str, vocab: Optional[Vocabulary] = None,
                    taxonomy: Optional[Taxonomy] = None) -> Checkpoint:
    """Load and verify; ``vocab`` / ``taxonomy``, when given, must match the recorded hashes."""
    try:
        with np.load(path, allow_pickle=False) as archive:
            if 'meta' not in archive.files:
                raise CheckpointError(f"{path}: no metadata member")
            raw_meta = bytes(archive['meta'].tobytes())
            arrays = {name[len(PARAM_PREFIX):]: np.array(archive[name])
                      for name in archive.files if name.startswith(PARAM_PREFIX)}
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}")
    except (zipfile.BadZipFile, ValueError, OSError, EOFError) as e:
        raise CheckpointError(f"{path}: unreadable checkpoint ({e})")

    try:
        payload = json.loads(raw_meta.decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt metadata ({e})")
    if payload.get('format_version') != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint format {payload.get('format_version')} "
                              f"unsupported (expected {CHECKPOINT_VERSION})")
    try:
        meta = CheckpointMeta.model_validate(payload)
    except ValidationError as e:
        raise CheckpointError(f"{path}: invalid metadata ({e.errors()[0].get('msg')})")

    if vocab is not None and vocab.fingerprint() != meta.vocab_hash:
        raise CheckpointError(f"{path}: vocabulary hash mismatch "
                              f"(checkpoint {meta.vocab_hash[:12]}, given {vocab.fingerprint()[:12]})")
    if taxonomy is not None and taxonomy.fingerprint() != meta.taxonomy_hash:
        raise CheckpointError(f"{path}: taxonomy hash mismatch "
                              f"(checkpoint {meta.taxonomy_hash[:12]}, given {taxonomy.fingerprint()[:12]})")
    try:
        params = ModelParams.from_arrays(meta.model_cfg, arrays)
    except ValueError as e:
        raise CheckpointError(f"{path}: {e}")
    return Checkpoint(params=params, meta=meta)
