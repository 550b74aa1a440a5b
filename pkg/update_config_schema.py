import json
from pathlib import Path
from typing import Any

from nfkam.utils.config import ModelConfig

SCHEMA_PATH = Path(__file__).resolve().parent / "model_config.schema.json"


def model_config_schema() -> dict[str, Any]:
    """JSON schema of ModelConfig as written next to the configs, `$schema` key included."""
    schema = ModelConfig.model_json_schema(mode="validation", by_alias=True)
    schema["additionalProperties"] = False
    schema["properties"]["$schema"] = {
        "type": "string",
    }
    return schema


if __name__ == "__main__":
    _ = SCHEMA_PATH.write_text(json.dumps(model_config_schema(), indent=4))
    print(f"wrote {SCHEMA_PATH.name}")
