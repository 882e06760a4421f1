import csv
import json
import logging
from pathlib import Path
from typing import Any, Iterable, Mapping, Union

from lodslab.utils import format_float

logger = logging.getLogger(__name__)

METRICS_HEADER = ("step", "distill_grad_norm", "alignment_loss", "t", "forwards", "backwards")


def _cell(value: Any) -> str:
    if value is None or isinstance(value, float):
        return format_float(value)
    return str(value)


class MetricsWriter:
    """Per-step distillation records as CSV; byte-stable for identical runs."""

    def __init__(self, path: Union[str, Path], header: Iterable[str] = METRICS_HEADER):
        self.path = Path(path)
        self.header = tuple(header)
        self.rows = 0
        self._fh = None
        self._writer = None

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = self.path.open("w", newline="")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._writer.writerow(self.header)
        return self

    def __exit__(self, *exc):
        self._fh.close()
        logger.info(f"Wrote {self.rows} rows to {self.path}")
        return False

    def write(self, row: Mapping[str, Any]):
        self._writer.writerow([_cell(row.get(k)) for k in self.header])
        self.rows += 1

    def write_rows(self, rows: Iterable[Mapping[str, Any]]):
        for row in rows:
            self.write(row)


def write_csv(path: Union[str, Path], rows: Iterable[Mapping[str, Any]], header: Iterable[str]) -> Path:
    with MetricsWriter(path, header) as writer:
        writer.write_rows(rows)
    return writer.path


def write_json(path: Union[str, Path], payload: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, default=_json_default) + "\n")
    return path


def _json_default(value):
    if hasattr(value, "tolist"):
        return value.tolist()
    raise TypeError(f"Cannot serialise {type(value).__name__}")
