# services/run_manifest.py

"""
Run manifests: every command that produces files writes them into
`runs/<run_id>/` and lists them, with their SHA-256, in `manifest.json`.

The run id is the first 12 hex digits of the SHA-256 of the canonical JSON of
{command, config, seed, dataset checksum, version}; timestamps are not part of
it, so repeating a run with identical inputs lands in the same directory.
"""

import hashlib
import json
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field

PACKAGE_VERSION = "0.1.0"
MANIFEST_FILENAME = "manifest.json"
PROJECT_ROOT = Path(__file__).resolve().parent.parent
SOURCE_DIRS = ("services", "utils", "config")


def file_sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with Path(path).open("rb") as f_in:
        for chunk in iter(lambda: f_in.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def source_version(root: Path = PROJECT_ROOT) -> str:
    """`v<semver>-g<first 7 hex of a SHA-1 over the package sources>`."""
    digest = hashlib.sha1()
    files = [root / "main.py"] + sorted(p for d in SOURCE_DIRS for p in (root / d).rglob("*.py"))
    for path in files:
        if path.exists():
            digest.update(path.relative_to(root).as_posix().encode("utf-8"))
            digest.update(path.read_bytes())
    return f"v{PACKAGE_VERSION}-g{digest.hexdigest()[:7]}"


class OutputRecord(BaseModel):
    path: str
    sha256: str
    command: str


class RunManifest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    command: str
    config: Dict[str, Any]
    seed: int
    dataset_sha256: Optional[str] = None
    version: str
    created_at: str = Field(default_factory=lambda: datetime.now().isoformat())
    finished_at: Optional[str] = None
    outputs: List[OutputRecord] = Field(default_factory=list)

    @property
    def run_id(self) -> str:
        identity = {
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "dataset_sha256": self.dataset_sha256,
            "version": self.version,
        }
        canonical = json.dumps(identity, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]

    @classmethod
    def create(cls, command: str, config: Dict[str, Any], seed: int,
               dataset_path: Optional[Path] = None) -> "RunManifest":
        return cls(
            command=command,
            config=config,
            seed=seed,
            dataset_sha256=file_sha256(dataset_path) if dataset_path else None,
            version=source_version(),
        )

    def run_dir(self, runs_dir: Path) -> Path:
        path = Path(runs_dir) / self.run_id
        path.mkdir(parents=True, exist_ok=True)
        return path

    def record_output(self, path: Path, run_dir: Path, command: Optional[str] = None) -> OutputRecord:
        path = Path(path)
        try:
            relative = path.resolve().relative_to(Path(run_dir).resolve()).as_posix()
        except ValueError:
            relative = str(path)
        record = OutputRecord(path=relative, sha256=file_sha256(path), command=command or self.command)
        self.outputs = [o for o in self.outputs if o.path != relative] + [record]
        return record

    def finish(self) -> None:
        self.finished_at = datetime.now().isoformat()

    def save(self, run_dir: Path) -> Path:
        path = Path(run_dir) / MANIFEST_FILENAME
        path.write_text(json.dumps(self.model_dump(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, run_dir: Path) -> "RunManifest":
        path = Path(run_dir) / MANIFEST_FILENAME
        return cls.model_validate_json(path.read_text(encoding="utf-8"))
