import json
import logging
from pathlib import Path
from typing import Any, Self

from deepdiff import diff

from nfkam.data import DeterministicSectionTA, RunArtifact
from nfkam.file_types import ARTIFACT_NAME, StoredArtifactTA, StoredFile, wrap_artifact
from nfkam.utils.string_utils import AnyPathLike, pathlike_or_path_to_path

logger = logging.getLogger(__name__)

CONFIG_SNAPSHOT_NAME = "config.json"


class SnapshotMismatch(Exception):
    """The output directory holds a run of a different configuration."""

    def __init__(self, report: str):
        super().__init__(f"config differs from the snapshot in the output directory:\n{report}")
        self.report: str = report


class ArtifactStore:
    """One output directory: the run artifact plus the config snapshot it was produced from."""

    output_dir: Path
    artifact_file: Path
    snapshot_file: Path

    def __init__(self: Self, output_dir: AnyPathLike):
        self.output_dir = pathlike_or_path_to_path(output_dir)
        self.artifact_file = self.output_dir / ARTIFACT_NAME
        self.snapshot_file = self.output_dir / CONFIG_SNAPSHOT_NAME

    def ensure_dir(self) -> None:
        if not self.output_dir.exists():
            self.output_dir.mkdir(parents=True, exist_ok=True)
            print(f"Created output directory: {self.output_dir}")

    def load(self) -> StoredFile[RunArtifact] | None:
        """The stored artifact, if any"""
        if not self.artifact_file.exists():
            return None
        with open(self.artifact_file, 'r', encoding='utf-8') as f:
            return StoredArtifactTA.validate_json(f.read())

    def save(self, artifact: RunArtifact) -> Path:
        """Write the artifact, keeping the creation time of a previous run in this directory"""
        self.ensure_dir()
        previous = self.load() if self.artifact_file.exists() else None
        stored = wrap_artifact(artifact, previous.createdAt if previous else None)
        with open(self.artifact_file, 'wb') as f:
            _ = f.write(StoredArtifactTA.dump_json(stored, indent=4))
        logger.info("wrote %s", self.artifact_file)
        return self.artifact_file

    def snapshot_diff(self, config: dict[str, Any]) -> str | None:
        """Pretty DeepDiff between `config` and the stored snapshot, None when they agree or none exists"""
        if not self.snapshot_file.exists():
            return None
        stored = json.loads(self.snapshot_file.read_text(encoding='utf-8'))
        d = diff.DeepDiff(stored, config)
        return d.pretty() if d else None

    def check_snapshot(self, config: dict[str, Any], force: bool = False) -> None:
        """
        Raises:
            SnapshotMismatch: the directory holds a different config and `force` is off
        """
        report = self.snapshot_diff(config)
        if report is None:
            return
        if not force:
            raise SnapshotMismatch(report)
        logger.warning("overwriting a run of a different config (--force):\n%s", report)

    def write_snapshot(self, config: dict[str, Any]) -> None:
        self.ensure_dir()
        _ = self.snapshot_file.write_text(json.dumps(config, indent=4), encoding='utf-8')


def deterministic_diff(a: RunArtifact, b: RunArtifact) -> str | None:
    """DeepDiff of the deterministic sections of two runs; None when they are identical"""
    left = DeterministicSectionTA.dump_python(a.deterministic, mode="json")
    right = DeterministicSectionTA.dump_python(b.deterministic, mode="json")
    d = diff.DeepDiff(left, right)
    return d.pretty() if d else None


def deterministic_bytes(artifact: RunArtifact) -> bytes:
    return DeterministicSectionTA.dump_json(artifact.deterministic)
