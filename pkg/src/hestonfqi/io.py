"""CSV and JSON readers/writers for paths, price files and reports.

Every writer accepts an optional ``comment`` that is emitted as a leading
``# ...`` line; every reader skips such lines.
"""
from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataFormatError
from .heston import PricePath

PATH_HEADER = ("step", "price", "variance")


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(
    target: str | Path,
    header: Sequence[str],
    rows: Iterable[Sequence],
    comment: str | None = None,
) -> None:
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    Path(target).write_text(buf.getvalue())


def write_json(target: str | Path, doc: dict) -> None:
    Path(target).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_json(source: str | Path) -> dict:
    try:
        return json.loads(Path(source).read_text())
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{source}: line {exc.lineno}: {exc.msg}") from exc


def write_path_csv(target: str | Path, path: PricePath, comment: str | None = None) -> None:
    var = path.variances
    rows = (
        (k, float(p), None if var is None else float(var[k]))
        for k, p in enumerate(path.prices)
    )
    write_csv(target, PATH_HEADER, rows, comment)


def _data_lines(text: str):
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        yield lineno, line


def read_price_csv(source: str | Path, dt: float = 1.0) -> PricePath:
    """Read a ``date,price``, ``step,price`` or ``step,price,variance`` file.

    Raises
    ------
    DataFormatError
        On a missing/unknown header or any non-numeric, non-positive price,
        with the offending line number in the message.
    """
    text = Path(source).read_text()
    lines = list(_data_lines(text))
    if not lines:
        raise DataFormatError(f"{source}: empty file")
    head_no, head = lines[0]
    header = [h.strip().lower() for h in next(csv.reader([head]))]
    if len(header) < 2 or header[0] not in ("date", "step") or header[1] != "price":
        raise DataFormatError(
            f"{source}: line {head_no}: expected header 'date,price' or 'step,price', got {head!r}"
        )
    has_var = len(header) >= 3 and header[2] == "variance"
    prices: list[float] = []
    variances: list[float | None] = []
    for lineno, line in lines[1:]:
        fields = next(csv.reader([line]))
        if len(fields) < 2:
            raise DataFormatError(f"{source}: line {lineno}: expected at least 2 columns")
        try:
            price = float(fields[1])
        except ValueError:
            raise DataFormatError(
                f"{source}: line {lineno}: non-numeric price {fields[1]!r}"
            ) from None
        if not math.isfinite(price) or price <= 0:
            raise DataFormatError(f"{source}: line {lineno}: price must be finite and > 0")
        prices.append(price)
        if has_var:
            raw = fields[2].strip() if len(fields) > 2 else ""
            if raw == "":
                variances.append(None)
            else:
                try:
                    variances.append(float(raw))
                except ValueError:
                    raise DataFormatError(
                        f"{source}: line {lineno}: non-numeric variance {raw!r}"
                    ) from None
    if not prices:
        raise DataFormatError(f"{source}: no data rows")
    var = None
    if has_var and all(v is not None for v in variances):
        var = np.asarray(variances, dtype=np.float64)
    try:
        return PricePath(np.asarray(prices), var, dt)
    except ValueError as exc:
        raise DataFormatError(f"{source}: {exc}") from exc
