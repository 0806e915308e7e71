import asyncio
import hashlib
import json
from pathlib import Path
from typing import Any, Dict

import pandas as pd
import yaml

from app.config import DATA_DIR


class ArtifactEngine:
    """
    Handles raw file I/O under one root directory with concurrency safety.
    Keeps the SHA-256 digest of every file it reads and writes.
    """
    def __init__(self, root: Path = DATA_DIR):
        self.root = Path(root)
        self._lock = asyncio.Lock()
        self.written: Dict[str, str] = {}
        self.read: Dict[str, str] = {}

    def resolve(self, relative: str) -> Path:
        path = Path(relative)
        return path if path.is_absolute() else self.root / path

    async def exists(self, relative: str) -> bool:
        return await asyncio.to_thread(self.resolve(relative).exists)

    async def read_text(self, relative: str) -> str:
        async with self._lock:
            return await asyncio.to_thread(self._load_text, relative)

    async def write_text(self, relative: str, text: str) -> Path:
        async with self._lock:
            return await asyncio.to_thread(self._save_text, relative, text)

    async def read_json(self, relative: str) -> Any:
        text = await self.read_text(relative)
        return json.loads(text)

    async def write_json(self, relative: str, data: Any) -> Path:
        return await self.write_text(relative, json.dumps(data, indent=2, default=str, ensure_ascii=False))

    async def read_document(self, relative: str) -> Any:
        """JSON, or YAML for .yaml/.yml files."""
        text = await self.read_text(relative)
        if self.resolve(relative).suffix in (".yaml", ".yml"):
            return yaml.safe_load(text)
        return json.loads(text)

    async def read_csv(self, relative: str) -> pd.DataFrame:
        async with self._lock:
            frame = await asyncio.to_thread(pd.read_csv, self.resolve(relative))
        await self.record_input(relative)
        return frame

    async def write_csv(self, relative: str, frame: pd.DataFrame, index: bool = False) -> Path:
        text = frame.to_csv(index=index, float_format="%.9g", lineterminator="\n")
        return await self.write_text(relative, text)

    async def record_input(self, relative: str) -> str:
        """Digest of a file consumed without going through the read helpers."""
        path = self.resolve(relative)
        digest = await asyncio.to_thread(file_digest, path)
        self.read[self._key(path)] = digest
        return digest

    async def list_dir(self, relative: str, pattern: str = "*") -> list:
        directory = self.resolve(relative)
        return await asyncio.to_thread(lambda: sorted(directory.glob(pattern)) if directory.exists() else [])

    # --- Private Synchronous Methods ---

    def _load_text(self, relative: str) -> str:
        path = self.resolve(relative)
        data = path.read_bytes()
        self.read[self._key(path)] = hashlib.sha256(data).hexdigest()
        return data.decode("utf-8")

    def _save_text(self, relative: str, text: str) -> Path:
        path = self.resolve(relative)
        path.parent.mkdir(parents=True, exist_ok=True)
        data = text.encode("utf-8")
        path.write_bytes(data)
        self.written[self._key(path)] = hashlib.sha256(data).hexdigest()
        return path

    def _key(self, path: Path) -> str:
        try:
            return path.relative_to(self.root).as_posix()
        except ValueError:
            return path.as_posix()


def file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
