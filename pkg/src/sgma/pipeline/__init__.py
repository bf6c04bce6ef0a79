"""Manifest ingestion, batch runs, persistence, reports and the CLI."""

from sgma.pipeline.batch import BatchResult, Clients, build_client, run_batch
from sgma.pipeline.config import RunConfig, load_config
from sgma.pipeline.manifest import ManifestEntry, ManifestError, ingest
from sgma.pipeline.persist import persist_adversarial

__all__ = [
    "BatchResult",
    "Clients",
    "ManifestEntry",
    "ManifestError",
    "RunConfig",
    "build_client",
    "ingest",
    "load_config",
    "persist_adversarial",
    "run_batch",
]
