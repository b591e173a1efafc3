"""On-disk catalog binding one frozen prior to many domain adapters.

Layout::

    <registry>/manifest.json        versioned text manifest
    <registry>/prior.ckpt           frozen generator prior
    <registry>/adapters/<id>.ckpt   one checkpoint per domain
    <registry>/runs/<id>/           loss traces, snapshots, resolved configs
    <registry>/.lock                writer lock

Adding a domain only ever adds files. Every existing checkpoint is
hash-checked before and after the addition.
"""

from __future__ import annotations

import datetime as dt
import hashlib
import json
import os
import re
from dataclasses import asdict
from pathlib import Path

from filelock import FileLock

from .adapters import DomainAdapter, load_adapter_file, save_adapter
from .anchoring import TrainingConfig, TrainingReport, train_domain
from .data import ImageSet, write_json_atomic
from .domain import DomainKind
from .errors import (
    ConfigError, CorruptionError, DomainConflict, DomainNotFound, IntegrityError, OverwriteRefused, StorageError,
)
from .prior import GeneratorPrior, load_prior, save_prior

REGISTRY_FORMAT = "anchor-registry/1"
_ID_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9_.-]*$")


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    # SOURCE_DATE_EPOCH pins timestamps for reproducible outputs
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    when = dt.datetime.fromtimestamp(int(epoch), dt.timezone.utc) if epoch else dt.datetime.now(dt.timezone.utc)
    return when.replace(microsecond=0).isoformat()


class Registry:
    def __init__(self, path):
        self.path = Path(path)
        self.manifest = self._read_manifest()
        self._prior = None

    @property
    def manifest_path(self) -> Path:
        return self.path / "manifest.json"

    def _read_manifest(self) -> dict:
        try:
            manifest = json.loads(self.manifest_path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise StorageError(f"cannot read registry manifest {self.manifest_path}: {exc}") from exc
        if manifest.get("format") != REGISTRY_FORMAT:
            raise CorruptionError(f"{self.manifest_path} is not an {REGISTRY_FORMAT} manifest")
        return manifest

    def reload(self):
        self.manifest = self._read_manifest()

    def lock(self) -> FileLock:
        return FileLock(str(self.path / ".lock"))

    @property
    def fingerprint(self) -> str:
        return self.manifest["prior"]["fingerprint"]

    @property
    def pretraining_data(self) -> str | None:
        return self.manifest["prior"].get("pretraining_data")

    def prior(self) -> GeneratorPrior:
        """The registry's prior, hash-verified on first load and cached."""
        if self._prior is None:
            entry = self.manifest["prior"]
            path = self.path / entry["path"]
            if not path.exists():
                raise CorruptionError(f"prior checkpoint {path} is missing")
            if file_hash(path) != entry["content_hash"]:
                raise CorruptionError(f"prior checkpoint {path} fails its content hash")
            prior = load_prior(path)
            if prior.fingerprint != entry["fingerprint"]:
                raise IntegrityError("stored prior fingerprint does not match the manifest")
            self._prior = prior
        return self._prior

    def entry(self, domain_id: str) -> dict:
        for e in self.manifest["domains"]:
            if e["domain_id"] == domain_id:
                return e
        raise DomainNotFound(f"domain {domain_id!r} is not registered")

    def checkpoint_hashes(self) -> dict[str, str]:
        """(relative path -> recorded content hash) for every stored checkpoint."""
        hashes = {self.manifest["prior"]["path"]: self.manifest["prior"]["content_hash"]}
        for e in self.manifest["domains"]:
            hashes[e["path"]] = e["content_hash"]
        return hashes

    def verify(self):
        """Recompute every checkpoint hash against the manifest."""
        for rel, expected in self.checkpoint_hashes().items():
            path = self.path / rel
            if not path.exists() or file_hash(path) != expected:
                raise CorruptionError(f"{path} does not match its recorded content hash")


def init_registry(path, prior: GeneratorPrior, pretraining_data=None) -> Registry:
    path = Path(path)
    if path.exists() and (not path.is_dir() or any(path.iterdir())):
        raise OverwriteRefused(f"{path} already exists and is not empty")
    if not prior.frozen:
        raise ConfigError("only a frozen prior can anchor a registry")
    try:
        (path / "adapters").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StorageError(f"cannot create registry at {path}: {exc}") from exc
    save_prior(prior, path / "prior.ckpt")
    manifest = {
        "format": REGISTRY_FORMAT,
        "prior": {
            "path": "prior.ckpt",
            "fingerprint": prior.fingerprint,
            "content_hash": file_hash(path / "prior.ckpt"),
            "latent_spec": asdict(prior.spec),
            "feature_shape": list(prior.feature_shape),
            "pretraining_data": str(Path(pretraining_data).resolve()) if pretraining_data else None,
        },
        "domains": [],
    }
    write_json_atomic(path / "manifest.json", manifest)
    return Registry(path)


def open_registry(path) -> Registry:
    return Registry(path)


def list_domains(registry: Registry) -> list[dict]:
    registry.reload()
    return [dict(e) for e in registry.manifest["domains"]]


def load_adapter(registry: Registry, domain_id: str) -> DomainAdapter:
    entry = registry.entry(domain_id)
    path = registry.path / entry["path"]
    if not path.exists():
        raise CorruptionError(f"adapter checkpoint {path} is missing")
    if file_hash(path) != entry["content_hash"]:
        raise CorruptionError(f"adapter checkpoint {path} fails its content hash")
    adapter = load_adapter_file(path)
    if adapter.prior_fingerprint != registry.fingerprint:
        raise IntegrityError(f"adapter {domain_id!r} was trained against a different prior")
    if adapter.kind != DomainKind.from_dict(entry["kind"]):
        raise CorruptionError(f"adapter {domain_id!r} kind differs from its manifest entry")
    return adapter


def add_domain(registry: Registry, dataset: ImageSet, kind: DomainKind, config: TrainingConfig,
               domain_id: str | None = None, real_rgb=None) -> tuple[dict, TrainingReport]:
    """Anchor a new domain against the registry's prior and append it.

    Existing files are never rewritten; their hashes are compared before and
    after. Concurrent writers serialize on the registry lock.
    """
    domain_id = domain_id or dataset.domain_id
    if not _ID_RE.match(domain_id):
        raise ConfigError(f"invalid domain id {domain_id!r}")
    with registry.lock():
        registry.reload()
        if any(e["domain_id"] == domain_id for e in registry.manifest["domains"]):
            raise DomainConflict(f"domain {domain_id!r} is already registered")
        registry.verify()
        before = registry.checkpoint_hashes()
        prior = registry.prior()

        run_dir = registry.path / "runs" / domain_id
        adapter, report = train_domain(dataset, prior, kind, config, domain_id=domain_id,
                                       real_rgb=real_rgb, run_dir=run_dir)
        if prior.fingerprint != registry.fingerprint:
            raise IntegrityError("the registry prior drifted during training")

        rel = f"adapters/{domain_id}.ckpt"
        target = registry.path / rel
        tmp = target.with_name(f".{target.name}.tmp")
        save_adapter(adapter, tmp)
        os.replace(tmp, target)

        for path, expected in before.items():
            if file_hash(registry.path / path) != expected:
                raise IntegrityError(f"{path} changed while adding {domain_id!r}")

        entry = {
            "domain_id": domain_id,
            "kind": kind.to_dict(),
            "path": rel,
            "content_hash": file_hash(target),
            "config_hash": adapter.config_hash,
            "training_config_hash": adapter.training_config_hash,
            "created_at": _now(),
        }
        manifest = dict(registry.manifest)
        manifest["domains"] = list(manifest["domains"]) + [entry]
        write_json_atomic(registry.manifest_path, manifest)
        registry.manifest = manifest
    return entry, report
