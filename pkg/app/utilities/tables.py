import csv
from pathlib import Path
from typing import Any, Iterable

from app.models.search import SparsityPlan


class CsvLog:
    """Append-only CSV file; the header is written when the log is created."""

    def __init__(self, path: Path, header: list[str]):
        self.path = path
        self.header = header
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as f:
            csv.writer(f).writerow(header)

    def append(self, row: list[Any]) -> None:
        if len(row) != len(self.header):
            raise ValueError(f"row has {len(row)} fields, header has {len(self.header)}")
        with self.path.open("a", newline="") as f:
            csv.writer(f).writerow(row)


def write_csv(path: Path, header: list[str], rows: Iterable[list[Any]]) -> None:
    log = CsvLog(path, header)
    for row in rows:
        log.append(row)


def read_csv(path: Path) -> list[dict[str, str]]:
    with path.open(newline="") as f:
        return list(csv.DictReader(f))


def format_ratios(plan: SparsityPlan) -> str:
    return ";".join(f"{ratio:.4f}" for _, ratio in plan.ratios)
