"""Model Library: versioned registry of launchable model images.

Each image bundles a set of models with the data they need, so an instance
of it can answer any request for those models on its own. Registering an
existing image id again publishes a new version; running instances keep
the version they were launched from.
"""

from __future__ import annotations

import os
import threading
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

from evop.errors import ModelConflict, UnknownImage, UnknownModel, ValidationError
from evop.textfmt import Record, atomic_write, format_record, parse_file

LIBRARY_HEADER = "evop-model-library v1"
DEFAULT_MAX_SESSIONS = 4


class ModelClass(str, Enum):
    STREAMLINED = "streamlined"
    EXPERIMENTAL = "experimental"


@dataclass(frozen=True)
class ResourceProfile:
    cpu_cores: int = 1
    mem_mb: int = 1024
    ephemeral_data_mb: int = 0


@dataclass(frozen=True)
class ImageDescriptor:
    image_id: str
    model_ids: frozenset[str]
    version: int = 1
    max_sessions: int = DEFAULT_MAX_SESSIONS
    resources: ResourceProfile = field(default_factory=ResourceProfile)
    model_class: ModelClass = ModelClass.EXPERIMENTAL

    def __post_init__(self):
        object.__setattr__(self, "model_ids", frozenset(self.model_ids))
        object.__setattr__(self, "model_class", ModelClass(self.model_class))
        problems = []
        if not self.image_id:
            problems.append("image_id must be non-empty")
        if not self.model_ids:
            problems.append(f"image {self.image_id!r} serves no models")
        if self.version < 1:
            problems.append(f"image {self.image_id!r}: version must be positive")
        if self.max_sessions < 1:
            problems.append(f"image {self.image_id!r}: max_sessions must be positive")
        r = self.resources
        if r.cpu_cores < 1 or r.mem_mb < 1 or r.ephemeral_data_mb < 0:
            problems.append(f"image {self.image_id!r}: invalid resource profile")
        if problems:
            raise ValidationError(problems)


def image_from_record(rec: Record, problems: list[str]) -> ImageDescriptor | None:
    image_id = rec.take("id")
    models = rec.take("models")
    if not image_id or not models:
        problems.append(f"line {rec.lineno}: image needs id= and models=")
        return None
    try:
        version = int(rec.take("version", "1"))
        max_sessions = int(rec.take("max_sessions", str(DEFAULT_MAX_SESSIONS)))
        resources = ResourceProfile(
            int(rec.take("cpu_cores", "1")),
            int(rec.take("mem_mb", "1024")),
            int(rec.take("data_mb", "0")),
        )
    except ValueError as exc:
        problems.append(f"line {rec.lineno}: {exc}")
        return None
    cls = rec.take("class", ModelClass.EXPERIMENTAL.value)
    if cls not in {c.value for c in ModelClass}:
        problems.append(f"line {rec.lineno}: unknown model class {cls!r}")
        return None
    try:
        return ImageDescriptor(
            image_id,
            frozenset(m for m in models.split(",") if m),
            version,
            max_sessions,
            resources,
            ModelClass(cls),
        )
    except ValidationError as exc:
        problems.extend(f"line {rec.lineno}: {e}" for e in exc.errors)
        return None


def image_to_record(d: ImageDescriptor) -> str:
    return format_record(
        "image",
        fields={
            "id": d.image_id,
            "version": d.version,
            "models": ",".join(sorted(d.model_ids)),
            "max_sessions": d.max_sessions,
            "cpu_cores": d.resources.cpu_cores,
            "mem_mb": d.resources.mem_mb,
            "data_mb": d.resources.ephemeral_data_mb,
            "class": d.model_class.value,
        },
    )


def read_descriptors(path: str | os.PathLike) -> list[ImageDescriptor]:
    problems: list[str] = []
    out = []
    for rec in parse_file(path, LIBRARY_HEADER):
        if rec.keyword != "image":
            problems.append(f"line {rec.lineno}: unexpected record {rec.keyword!r}")
            continue
        d = image_from_record(rec, problems)
        if d is not None:
            out.append(d)
    if problems:
        raise ValidationError(problems)
    return out


class ModelLibrary:
    """Registry mapping model ids to the current image serving them.

    Writers are serialised by a lock; readers see whole snapshots because
    every mutation swaps in fresh dicts.
    """

    def __init__(self, path: str | os.PathLike | None = None):
        self.path = Path(path) if path is not None else None
        self._lock = threading.Lock()
        self._current: dict[str, ImageDescriptor] = {}
        self._versions: dict[tuple[str, int], ImageDescriptor] = {}
        self._by_model: dict[str, str] = {}

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ModelLibrary":
        lib = cls(path)
        if lib.path.exists():
            for d in read_descriptors(lib.path):
                lib._install(d)
        return lib

    def _install(self, d: ImageDescriptor) -> None:
        for model_id in d.model_ids:
            owner = self._by_model.get(model_id)
            if owner is not None and owner != d.image_id:
                raise ModelConflict(f"{model_id!r} is already served by image {owner!r}")
        current = dict(self._current)
        versions = dict(self._versions)
        by_model = {m: i for m, i in self._by_model.items() if i != d.image_id}
        current[d.image_id] = d
        versions[(d.image_id, d.version)] = d
        by_model.update({m: d.image_id for m in d.model_ids})
        self._current, self._versions, self._by_model = current, versions, by_model

    def register_image(self, descriptor: ImageDescriptor) -> tuple[str, int]:
        with self._lock:
            previous = self._current.get(descriptor.image_id)
            version = previous.version + 1 if previous else 1
            d = replace(descriptor, version=version)
            self._install(d)
            if self.path is not None:
                self.save()
        return d.image_id, version

    def resolve(self, model_id: str) -> ImageDescriptor:
        image_id = self._by_model.get(model_id)
        if image_id is None:
            raise UnknownModel(model_id)
        return self._current[image_id]

    def get(self, image_id: str, version: int | None = None) -> ImageDescriptor:
        if version is None:
            d = self._current.get(image_id)
        else:
            d = self._versions.get((image_id, version))
        if d is None:
            raise UnknownImage(image_id if version is None else f"{image_id}@v{version}")
        return d

    def list_images(self) -> list[ImageDescriptor]:
        current = self._current
        return [current[k] for k in sorted(current)]

    def prune(self, in_use: set[tuple[str, int]]) -> None:
        """Forget superseded versions that no live instance still runs."""
        with self._lock:
            keep = {
                key: d
                for key, d in self._versions.items()
                if key in in_use or self._current[key[0]].version == key[1]
            }
            self._versions = keep

    def known_versions(self) -> list[tuple[str, int]]:
        return sorted(self._versions)

    def dumps(self) -> str:
        lines = [LIBRARY_HEADER]
        lines.extend(image_to_record(d) for d in self.list_images())
        return "\n".join(lines) + "\n"

    def save(self, path: str | os.PathLike | None = None) -> None:
        target = Path(path) if path is not None else self.path
        if target is None:
            raise ValueError("library has no persistence path")
        atomic_write(target, self.dumps())
