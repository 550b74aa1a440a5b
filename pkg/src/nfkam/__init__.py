from .core.pipeline import VERSION as VERSION
