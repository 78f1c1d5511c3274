"""
Artifact storage - versioned JSON documents on disk
Every JSON file scalepress writes (model, pattern, plan, run, report, ...)
goes through here so the envelope and version checks live in one place
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, Union

from errors import ArtifactIOError, FormatError

logger = logging.getLogger(__name__)

FORMAT_NAME = "scalepress"
FORMAT_VERSION = "1.0"

# Known artifact kinds and what writes them
ARTIFACT_KINDS = {
    'model': 'model config (init)',
    'pattern': 'window pattern (design)',
    'plan': 'precision plan (scan / plan)',
    'run': 'token maps + run stats (generate)',
    'report': 'savings report (report)',
    'ablation': 'technique matrix (ablate)',
    'sweep': 'threshold sweep (sweep)',
    'projection': 'schedule projection (project)',
}

PathLike = Union[str, Path]


def fingerprint(payload: Any) -> str:
    """
    Stable md5 fingerprint of a JSON-serializable payload

    Args:
        payload: Any JSON-serializable value

    Returns:
        Hex digest of the canonical JSON encoding
    """
    canonical = json.dumps(payload, sort_keys=True, separators=(',', ':'))
    return hashlib.md5(canonical.encode('utf-8')).hexdigest()


def major_version(version: str) -> int:
    """Major component of a "MAJOR.MINOR" version string"""
    try:
        return int(str(version).split('.')[0])
    except ValueError:
        raise FormatError(f"Unparseable artifact version: {version!r}")


def dumps_artifact(kind: str, payload: Dict[str, Any]) -> str:
    """
    Encode a payload inside the versioned envelope

    Args:
        kind: Artifact kind (one of ARTIFACT_KINDS)
        payload: Document body; must not use the envelope keys

    Returns:
        Deterministic JSON text (sorted keys, no timestamps)
    """
    if kind not in ARTIFACT_KINDS:
        raise FormatError(f"Unknown artifact kind: {kind}")

    document = dict(payload)
    document.update({
        'format': FORMAT_NAME,
        'kind': kind,
        'version': FORMAT_VERSION,
    })
    return json.dumps(document, sort_keys=True, indent=2) + "\n"


def save_json_artifact(path: PathLike, kind: str, payload: Dict[str, Any]) -> Path:
    """
    Write a versioned JSON artifact

    Args:
        path: Destination file
        kind: Artifact kind
        payload: Document body

    Returns:
        The written path
    """
    text = dumps_artifact(kind, payload)
    file_path = Path(path)
    try:
        if file_path.parent and not file_path.parent.exists():
            file_path.parent.mkdir(parents=True, exist_ok=True)
        with open(file_path, 'w', encoding='utf-8') as f:
            f.write(text)
    except OSError as e:
        raise ArtifactIOError(f"Cannot write {kind} artifact to {file_path}: {e}") from e

    logger.debug("wrote %s artifact %s (%d bytes)", kind, file_path, len(text))
    return file_path


def parse_artifact(text: str, kind: str, source: str = "<memory>") -> Dict[str, Any]:
    """
    Decode and validate an artifact envelope

    Args:
        text: JSON text
        kind: Expected artifact kind
        source: Name used in error messages

    Returns:
        The document (envelope keys included)
    """
    try:
        document = json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(f"{source} is not valid JSON: {e}") from e

    if not isinstance(document, dict):
        raise FormatError(f"{source}: expected a JSON object")

    found_kind = document.get('kind')
    if found_kind != kind:
        raise FormatError(f"{source}: expected a {kind} artifact, found {found_kind!r}")

    if 'version' not in document:
        raise FormatError(f"{source}: missing version field")
    if major_version(document['version']) != major_version(FORMAT_VERSION):
        raise FormatError(
            f"{source}: unsupported {kind} version {document['version']} "
            f"(reader supports {FORMAT_VERSION})"
        )
    return document


def load_json_artifact(path: PathLike, kind: str) -> Dict[str, Any]:
    """
    Read a versioned JSON artifact

    Args:
        path: Source file
        kind: Expected artifact kind

    Returns:
        The document (envelope keys included)
    """
    file_path = Path(path)
    try:
        with open(file_path, 'r', encoding='utf-8') as f:
            text = f.read()
    except OSError as e:
        raise ArtifactIOError(f"Cannot read {kind} artifact {file_path}: {e}") from e

    return parse_artifact(text, kind, source=str(file_path))
