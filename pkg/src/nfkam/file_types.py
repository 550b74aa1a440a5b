from datetime import datetime, timezone

import pydantic

from nfkam.data import RunArtifact

ARTIFACT_NAME = "run_artifact.json"


class StoredFile[T](pydantic.BaseModel):
    data: T
    version: str
    createdAt: pydantic.AwareDatetime
    updatedAt: pydantic.AwareDatetime


type StoredArtifact = StoredFile[RunArtifact]

StoredArtifactTA = pydantic.TypeAdapter(StoredFile[RunArtifact])


def wrap_artifact(artifact: RunArtifact, created: datetime | None = None) -> StoredFile[RunArtifact]:
    now = datetime.now(timezone.utc)
    return StoredFile[RunArtifact](
        data=artifact,
        version=artifact.tool_version,
        createdAt=created or now,
        updatedAt=now,
    )
