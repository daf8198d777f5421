import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .attribution import STORED_DTYPE, AttributionMap
from .errors import ChecksumMismatchError, CorruptManifestError
from .scene_synth import file_sha256

ARCHIVE_FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"


@dataclass
class ArchiveEntry:
    """Container for one stored attribution map"""
    sample_id: int
    class_index: int
    method_id: str
    shape: List[int]
    file: str
    sha256: str

    @property
    def key(self) -> Tuple[int, int, str]:
        return self.sample_id, self.class_index, self.method_id


class AttributionArchive:
    """Manages a directory of float32 attribution maps and their manifest"""

    def __init__(self, base_path: Path):
        self.logger = logging.getLogger(__name__)
        self.base_path = Path(base_path)
        self.manifest_file = self.base_path / MANIFEST_NAME

    @staticmethod
    def _blob_name(sample_id: int, class_index: int, method_id: str) -> str:
        return f"attr_{sample_id:06d}_{class_index:02d}_{method_id}.bin"

    def write(self, maps: Dict[Tuple[int, int, str], AttributionMap], config: Optional[Dict] = None) -> Path:
        """Store every map as a little-endian f4 [H,W] blob and write the manifest"""
        self.base_path.mkdir(parents=True, exist_ok=True)
        entries = []
        for (sample_id, class_index, method_id), attr in sorted(maps.items()):
            blob_path = self.base_path / self._blob_name(sample_id, class_index, method_id)
            blob_path.write_bytes(np.asarray(attr.values, dtype=STORED_DTYPE).tobytes())
            entries.append(ArchiveEntry(sample_id, class_index, method_id, list(attr.values.shape),
                                        blob_path.name, file_sha256(blob_path)))

        manifest = {
            "format_version": ARCHIVE_FORMAT_VERSION,
            "config": config or {},
            "count": len(entries),
            "entries": [asdict(e) for e in entries],
        }
        self.manifest_file.write_text(json.dumps(manifest, indent=2, sort_keys=True))
        self.logger.info(f"Archived {len(entries)} attribution maps to {self.base_path}")
        return self.base_path

    def entries(self) -> List[ArchiveEntry]:
        try:
            manifest = json.loads(self.manifest_file.read_text())
            if manifest.get("format_version") != ARCHIVE_FORMAT_VERSION:
                raise CorruptManifestError(f"unsupported archive version in {self.manifest_file}")
            entries = [ArchiveEntry(**entry) for entry in manifest["entries"]]
            if len(entries) != manifest["count"]:
                raise CorruptManifestError(f"entry count mismatch in {self.manifest_file}")
            return entries
        except FileNotFoundError:
            raise CorruptManifestError(f"no manifest at {self.manifest_file}")
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise CorruptManifestError(f"malformed manifest {self.manifest_file}: {e}")

    def config(self) -> Dict:
        return json.loads(self.manifest_file.read_text()).get("config", {})

    def load(self) -> Dict[Tuple[int, int, str], AttributionMap]:
        """All maps keyed by (sample, class, method); checksums are verified"""
        maps = {}
        for entry in self.entries():
            blob_path = self.base_path / entry.file
            if not blob_path.is_file():
                raise CorruptManifestError(f"manifest references missing map {entry.file}")
            if file_sha256(blob_path) != entry.sha256:
                raise ChecksumMismatchError(f"checksum mismatch for {entry.file}")
            values = np.frombuffer(blob_path.read_bytes(), dtype=STORED_DTYPE)
            if values.size != int(np.prod(entry.shape)):
                raise CorruptManifestError(f"{entry.file} holds {values.size} values, expected shape {entry.shape}")
            maps[entry.key] = AttributionMap(values.astype(np.float64).reshape(entry.shape),
                                             entry.class_index, entry.method_id)
        self.logger.info(f"Loaded {len(maps)} attribution maps from {self.base_path}")
        return maps
