"""Per-epoch metrics CSV and the run manifest."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, List, Mapping, Optional

from . import __version__
from .errors import FormatError

logger = logging.getLogger(__name__)


@dataclass
class MetricsRow:
    epoch: int
    loss: float
    N: Optional[float]
    A1: Optional[float]
    A2: Optional[float]
    A3: Optional[float]
    M_t: float
    lam: float
    weight_sparsity: float
    channel_sparsity: float
    seconds: float


HEADER = [f.name for f in fields(MetricsRow)]


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def append_metrics(path: Path, row: MetricsRow) -> None:
    """Append one row, writing the header first when the file is new."""
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        if new:
            writer.writerow(HEADER)
        writer.writerow([_cell(v) for v in asdict(row).values()])


def read_metrics(path: Path) -> List[MetricsRow]:
    rows = []
    with Path(path).open(newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames != HEADER:
            raise FormatError(f"{path}: unexpected metrics header {reader.fieldnames}")
        for record in reader:
            values = {}
            for f in fields(MetricsRow):
                raw = record[f.name]
                if f.name == "epoch":
                    values[f.name] = int(raw)
                else:
                    values[f.name] = float(raw) if raw != "" else None
            rows.append(MetricsRow(**values))
    return rows


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with Path(path).open("rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(out_dir: Path, command: str, config: Mapping, seed: int,
                   artifacts: Iterable[Path]) -> Path:
    """Record what a CLI run did: resolved config, seed, version and artifact hashes."""
    out_dir = Path(out_dir)
    manifest = {
        "command": command,
        "version": __version__,
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "seed": seed,
        "config": dict(config),
        "artifacts": {
            str(Path(p).relative_to(out_dir) if Path(p).is_relative_to(out_dir) else p): sha256_file(p)
            for p in artifacts
            if Path(p).exists()
        },
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info(f"Wrote manifest with {len(manifest['artifacts'])} artifacts to {path}")
    return path
