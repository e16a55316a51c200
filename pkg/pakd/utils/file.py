"""
File utility functions for pakd.

Artifacts are written to a temporary sibling with aiofiles and renamed into
place, so a reader never sees a partial file.
"""

import asyncio
import logging
import os
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence, Union

import aiofiles

from ..exceptions import ConfigMismatch
from ..student import StudentModel, load_model, model_to_json
from ..teachersim import AnnotatedExample, corpus_to_jsonl, ingest_jsonl

log = logging.getLogger(__name__)


async def write_atomic(path: Union[str, Path], content: Union[str, bytes]) -> Path:
    """
    Write ``content`` to ``path`` through ``<path>.tmp`` and an atomic rename.

    Args:
        path: Destination file
        content: Text (written as UTF-8) or bytes

    Returns:
        The destination path
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_name(path.name + ".tmp")
    if isinstance(content, bytes):
        async with aiofiles.open(tmp_path, "wb") as f:
            await f.write(content)
    else:
        async with aiofiles.open(tmp_path, "w", encoding="utf-8", newline="\n") as f:
            await f.write(content)
    os.replace(tmp_path, path)
    log.debug("Wrote %s", path)
    return path


async def save_corpus(
    corpus: Sequence[AnnotatedExample],
    path: Union[str, Path],
    header: dict[str, Any],
) -> Path:
    """Write a corpus as JSONL with a provenance header."""
    path = await write_atomic(path, corpus_to_jsonl(corpus, header))
    log.info("Saved %d examples to %s", len(corpus), path)
    return path


async def load_corpus(
    path: Union[str, Path], expected: Optional[Mapping[str, str]] = None
) -> tuple[list[AnnotatedExample], dict[str, Any]]:
    """
    Read a JSONL corpus, checking its provenance.

    Args:
        path: Corpus file
        expected: Header fields that must match, e.g. ``{"data_hash": ...}``

    Raises:
        ConfigMismatch: If the corpus was produced under other settings
    """
    corpus, header = await asyncio.to_thread(ingest_jsonl, path)
    for key, value in (expected or {}).items():
        found = header.get(key)
        if found != value:
            log.error("Corpus %s has %s %s, config expects %s", path, key, found, value)
            raise ConfigMismatch(
                f"Corpus {path} has {key} {found!r}, current config has {value!r}"
            )
    return corpus, header


async def save_model_file(
    model: StudentModel, path: Union[str, Path], provenance: Mapping[str, str]
) -> Path:
    """Write a model file atomically, tagged with the run's hashes."""
    path = await write_atomic(path, model_to_json(model, provenance))
    log.info("Saved model to %s", path)
    return path


async def load_model_file(
    path: Union[str, Path], expected: Optional[Mapping[str, str]] = None
) -> StudentModel:
    """
    Read a model file, checking its provenance.

    Raises:
        ConfigMismatch: If the model was trained on other data
    """
    return await asyncio.to_thread(load_model, path, expected)
