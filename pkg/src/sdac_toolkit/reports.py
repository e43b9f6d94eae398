import io
import json
import logging
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Mapping, Sequence, Union

import numpy as np

from .exceptions import PropertyFailure
from .nehari import NehariApproximant

logger = logging.getLogger(__name__)

HASH_PREFIX = "# config-hash: "
MANIFEST_NAME = "manifest.json"
FLOAT_FORMAT = "%.17g"

PathLike = Union[str, Path]


def plain(value: Any) -> Any:
    """Turn numpy scalars/arrays into JSON types; non-finite floats become strings."""
    if isinstance(value, Mapping):
        return {str(key): plain(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [plain(item) for item in value]
    if isinstance(value, np.ndarray):
        return plain(value.tolist())
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        number = float(value)
        return number if math.isfinite(number) else repr(number)
    return value


def write_atomic(path: PathLike, text: str) -> Path:
    """Write `text` to a temporary file next to `path`, then rename it over `path`."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, temp_name = tempfile.mkstemp(dir=target.parent, prefix=f".{target.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        os.replace(temp_name, target)
    except BaseException:
        if os.path.exists(temp_name):
            os.unlink(temp_name)
        raise
    logger.debug(f"Wrote {target}")
    return target


def write_json(path: PathLike, payload: Mapping[str, Any], config_hash: str) -> Path:
    document = {"config_hash": config_hash, **plain(payload)}
    return write_atomic(path, json.dumps(document, sort_keys=True, indent=2) + "\n")


def write_csv(path: PathLike, names: Sequence[str], rows: np.ndarray, config_hash: str) -> Path:
    buffer = io.StringIO()
    buffer.write(f"{HASH_PREFIX}{config_hash}\n")
    np.savetxt(buffer, rows, fmt=FLOAT_FORMAT, delimiter=",", header=",".join(names), comments="")
    return write_atomic(path, buffer.getvalue())


def dump_matrix(name: str, matrix: np.ndarray) -> str:
    """Canonical text block: a `name rows cols` line followed by the rows."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    lines = [f"{name} {matrix.shape[0]} {matrix.shape[1]}"]
    lines += [" ".join(FLOAT_FORMAT % x for x in row) for row in matrix]
    return "\n".join(lines) + "\n"


def write_matrices(path: PathLike, matrices: Mapping[str, np.ndarray], config_hash: str) -> Path:
    blocks = [dump_matrix(name, matrices[name]) for name in matrices]
    return write_atomic(path, f"{HASH_PREFIX}{config_hash}\n" + "".join(blocks))


def _toml_float(x: float) -> str:
    return repr(float(x))


def _toml_matrix(matrix: np.ndarray) -> str:
    rows = ", ".join("[" + ", ".join(_toml_float(x) for x in row) + "]" for row in np.atleast_2d(matrix))
    return f"[{rows}]"


def compensator_toml(name: str, approximant: NehariApproximant) -> str:
    """
    One TOML table holding a compensator realization.

    The table body is accepted as `[compensator.matrices]` by the
    scenario loader. Dimensions are written explicitly because an empty
    matrix carries no shape.
    """
    H = approximant
    lines = [
        f"[{name}]",
        f"order = {H.order}",
        f"inputs = {H.H_B.shape[1]}",
        f"outputs = {H.H_C.shape[0]}",
    ]
    if H.order:
        lines += [
            f"H_A = {_toml_matrix(H.H_A)}",
            f"H_B = {_toml_matrix(H.H_B)}",
            f"H_C = {_toml_matrix(H.H_C)}",
        ]
    lines.append(f"D_H = {_toml_matrix(H.D_H)}")
    return "\n".join(lines) + "\n"


def write_compensators(path: PathLike, approximants: Mapping[str, NehariApproximant], config_hash: str) -> Path:
    tables = "\n".join(compensator_toml(name, approximants[name]) for name in approximants)
    return write_atomic(path, f"{HASH_PREFIX}{config_hash}\n\n{tables}")


def _carries_hash(path: Path, config_hash: str) -> bool:
    if path.suffix == ".json":
        try:
            return bool(json.loads(path.read_text(encoding="utf-8")).get("config_hash") == config_hash)
        except (json.JSONDecodeError, AttributeError):
            return False
    with path.open(encoding="utf-8") as f:
        return f.readline().rstrip("\n") == f"{HASH_PREFIX}{config_hash}"


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    """Record of one subcommand run and the files it produced."""

    config_hash: str
    tool_version: str
    subcommand: str
    started_at: str
    finished_at: str = ""
    outputs: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def write(self, out_dir: PathLike) -> Path:
        self.outputs = sorted(self.outputs)
        return write_json(Path(out_dir) / MANIFEST_NAME, self.to_dict(), self.config_hash)

    @classmethod
    def read(cls, out_dir: PathLike) -> "RunManifest":
        data = json.loads((Path(out_dir) / MANIFEST_NAME).read_text(encoding="utf-8"))
        return cls(
            config_hash=data["config_hash"],
            tool_version=data["tool_version"],
            subcommand=data["subcommand"],
            started_at=data["started_at"],
            finished_at=data["finished_at"],
            outputs=list(data["outputs"]),
        )

    def validate(self, out_dir: PathLike) -> None:
        """
        Raises:
            PropertyFailure: If a listed output is missing or carries another hash.
        """
        out = Path(out_dir)
        missing = [name for name in self.outputs if not (out / name).is_file()]
        stale = [name for name in self.outputs if name not in missing and not _carries_hash(out / name, self.config_hash)]
        if missing or stale:
            raise PropertyFailure(
                f"manifest does not validate (missing: {missing}, wrong hash: {stale})",
                code="manifest",
                detail={"missing": missing, "stale": stale},
            )
