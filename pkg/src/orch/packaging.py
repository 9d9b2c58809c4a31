"""Deterministic program archives.

Entries are regular files only, relative paths, sorted, with mtime 0,
owner 0:0 and modes normalized to 0644/0755, in USTAR format. Packaging an
unchanged directory twice gives the same bytes.
"""

import hashlib
import io
import logging
import os
import tarfile
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple

from orch.errors import EmptyProgramDir, PackagingError, UnreadablePath
from orch.model import JobSpec

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    sha256: str
    size: int


@dataclass(frozen=True)
class SubmissionPackage:
    archive: bytes
    manifest: Tuple[ManifestEntry, ...]
    job_spec: JobSpec

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.archive).hexdigest()

    def write(self, path) -> Path:
        path = Path(path)
        path.write_bytes(self.archive)
        return path


def _walk_error(err: OSError):
    raise UnreadablePath(err.filename)


def _files(root: Path):
    found = []
    for dirpath, dirnames, filenames in os.walk(root, onerror=_walk_error):
        dirnames.sort()
        for name in filenames:
            path = Path(dirpath) / name
            if path.is_symlink() or not path.is_file():
                log.info("skipping non-regular file %s", path)
                continue
            found.append((path.relative_to(root).as_posix(), path))
    return sorted(found)


def package(program_dir, spec: JobSpec) -> SubmissionPackage:
    root = Path(program_dir)
    if not root.is_dir() or not os.access(root, os.R_OK | os.X_OK):
        raise UnreadablePath(root)
    files = _files(root)
    if not files:
        raise EmptyProgramDir(root)

    buf = io.BytesIO()
    manifest = []
    with tarfile.open(fileobj=buf, mode="w", format=tarfile.USTAR_FORMAT) as tar:
        for rel, path in files:
            try:
                data = path.read_bytes()
                executable = path.stat().st_mode & 0o111
            except OSError:
                raise UnreadablePath(path) from None
            info = tarfile.TarInfo(rel)
            info.size = len(data)
            info.mtime = 0
            info.mode = 0o755 if executable else 0o644
            info.uid = info.gid = 0
            info.uname = info.gname = ""
            tar.addfile(info, io.BytesIO(data))
            manifest.append(ManifestEntry(rel, hashlib.sha256(data).hexdigest(), len(data)))
    log.info("packaged %d files from %s", len(manifest), root)
    return SubmissionPackage(buf.getvalue(), tuple(manifest), spec)


def unpack(archive: bytes, dest) -> Path:
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    try:
        with tarfile.open(fileobj=io.BytesIO(archive), mode="r") as tar:
            if hasattr(tarfile, "data_filter"):
                tar.extractall(dest, filter="data")
            else:
                for member in tar.getmembers():
                    if member.name.startswith("/") or ".." in Path(member.name).parts:
                        raise PackagingError(f"unsafe archive member {member.name}")
                tar.extractall(dest)
    except tarfile.TarError as err:
        raise PackagingError(f"bad archive: {err}") from None
    return dest
