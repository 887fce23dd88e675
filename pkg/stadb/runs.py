"""
STADB Runs API
==============
Trainingsläufe unter settings.RUNS_DIR, je ein Unterordner mit
log.jsonl und checkpoint_*.stdb.

- GET  /runs                Alle Läufe mit letztem Epochen-Eintrag
- GET  /runs/{name}/log     JSON-Lines-Log eines Laufs (optional ?tail=N)
"""

import json
import logging
import re
from pathlib import Path
from typing import List, Optional

import aiofiles
from fastapi import APIRouter, HTTPException
from pydantic import BaseModel

from .config import settings
from .trainer import LOG_NAME

logger = logging.getLogger(__name__)

router = APIRouter(prefix="/runs", tags=["runs"])

_NAME_RE = re.compile(r"^[\w.-]+$")


# ------------------------------------------------------------
# Hilfsfunktionen
# ------------------------------------------------------------

def _runs_dir() -> Path:
    return Path(settings.RUNS_DIR)


def _run_dir(name: str) -> Path:
    """Wirft 404 bei unbekanntem oder ungültigem Namen (kein ../ möglich)."""
    if not _NAME_RE.match(name) or name in (".", ".."):
        raise HTTPException(404, f"Unknown run: {name}")
    path = _runs_dir() / name
    if not (path / LOG_NAME).is_file():
        raise HTTPException(404, f"Unknown run: {name}")
    return path


async def _read_log(path: Path) -> List[dict]:
    async with aiofiles.open(path, "r", encoding="utf-8") as f:
        text = await f.read()
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError:
            # abgebrochener Lauf: letzte Zeile kann unvollständig sein
            logger.warning(f"{path}: skipping unreadable line {lineno}")
    return records


# ------------------------------------------------------------
# Pydantic Models
# ------------------------------------------------------------

class RunInfo(BaseModel):
    name: str
    epochs: int
    checkpoints: List[str]
    last: Optional[dict] = None


# ------------------------------------------------------------
# Endpoints
# ------------------------------------------------------------

@router.get("", response_model=List[RunInfo])
async def list_runs():
    base = _runs_dir()
    if not base.is_dir():
        return []
    runs = []
    for path in sorted(p for p in base.iterdir() if (p / LOG_NAME).is_file()):
        records = await _read_log(path / LOG_NAME)
        runs.append(RunInfo(
            name=path.name,
            epochs=len(records),
            checkpoints=sorted(c.name for c in path.glob("checkpoint_*.stdb")),
            last=records[-1] if records else None,
        ))
    return runs


@router.get("/{name}/log")
async def run_log(name: str, tail: Optional[int] = None):
    records = await _read_log(_run_dir(name) / LOG_NAME)
    if tail is not None:
        if tail < 0:
            raise HTTPException(400, "tail must be non-negative")
        records = records[-tail:] if tail else []
    return {"name": name, "records": records}
