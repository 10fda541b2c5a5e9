import json
import os
from contextlib import contextmanager
from typing import Any, Dict, Iterable, Iterator, List, Tuple

from deepcat.errors import CorpusError


@contextmanager
def atomic_open(path: str, mode: str = 'w') -> Iterator:
    """Write to ``path + '.tmp'`` and move it into place only if the block succeeds."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    temp_path = path + '.tmp'
    encoding = None if 'b' in mode else 'utf-8'
    try:
        with open(temp_path, mode, encoding=encoding) as f:
            yield f
        os.replace(temp_path, path)
    finally:
        if os.path.exists(temp_path):
            os.remove(temp_path)


def write_jsonl(path: str, header: Dict[str, Any], rows: Iterable[Dict[str, Any]]) -> None:
    with atomic_open(path) as f:
        f.write(json.dumps(header, sort_keys=True, ensure_ascii=False) + '\n')
        for row in rows:
            f.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + '\n')


def read_jsonl(path: str, expected_format: str, version: int) -> Tuple[Dict[str, Any], List[Tuple[int, Dict[str, Any]]]]:
    """Return the header and ``(line_number, row)`` pairs, checking format and version."""
    try:
        with open(path, 'r', encoding='utf-8') as f:
            lines = f.read().splitlines()
    except FileNotFoundError:
        raise CorpusError(f"file not found: {path}")
    if not lines:
        raise CorpusError(f"{path}: empty file, expected a '{expected_format}' header line")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise CorpusError(f"{path}:1: bad header: {e}")
    if not isinstance(header, dict) or header.get('format') != expected_format:
        raise CorpusError(f"{path}: not a '{expected_format}' file")
    if header.get('version') != version:
        raise CorpusError(f"{path}: format version {header.get('version')} unsupported (expected {version})")

    rows = []
    for number, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rows.append((number, json.loads(line)))
        except json.JSONDecodeError as e:
            raise CorpusError(f"{path}:{number}: {e}")
    return header, rows
