import json
import logging
import os
from datetime import datetime

import numpy as np
import pandas as pd
from openpyxl import Workbook, load_workbook

from core.fem import export_vertex_csv

logger = logging.getLogger(__name__)


def _plain(value):
    """JSON-friendly copy of numpy scalars and arrays."""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, (float, np.floating)) and not np.isfinite(value):
        return None
    if isinstance(value, np.generic):
        return value.item()
    return value


class ResultSaver:
    def __init__(self, folder="results", workbook="results.xlsx", excel=False):
        self.folder = folder
        self.workbook = os.path.join(folder, workbook)
        self.excel = excel
        os.makedirs(self.folder, exist_ok=True)

    def path(self, name, ext):
        return os.path.join(self.folder, f"{name}.{ext}")

    def save_table(self, name, frame, comment=None):
        path = self.path(name, "csv")
        with open(path, "w", encoding="utf-8", newline="") as handle:
            if comment:
                for line in comment.splitlines():
                    handle.write(f"# {line}\n")
            frame.to_csv(handle, index=False)
        logger.info("wrote %s (%d rows)", path, len(frame))
        return path

    def save_sidecar(self, name, payload):
        path = self.path(name, "json")
        body = dict(_plain(payload))
        body.setdefault("written", datetime.now().strftime("%Y-%m-%d %H:%M"))
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(body, handle, indent=2, sort_keys=True)
        return path

    def append_jsonl(self, name, records):
        path = self.path(name, "jsonl")
        if not records:
            return path
        frame = pd.DataFrame([_plain(r) for r in records])
        frame.to_json(path, orient="records", lines=True, mode="a" if os.path.exists(path) else "w")
        return path

    def save_function(self, name, fn):
        path = self.path(name, "csv")
        export_vertex_csv(fn, path)
        return path

    def _get_sheet(self, sheet_name, header):
        if not os.path.exists(self.workbook):
            wb = Workbook()
            ws = wb.active
            ws.title = sheet_name
            ws.append(header)
            wb.save(self.workbook)

        wb = load_workbook(self.workbook)
        if sheet_name not in wb.sheetnames:
            ws = wb.create_sheet(sheet_name)
            ws.append(header)
        else:
            ws = wb[sheet_name]

        return wb, ws

    def save_excel(self, sheet_name, frame, sort_by):
        """Append rows to a sheet, keeping the data rows sorted by one column."""
        header = ["run"] + list(frame.columns)
        wb, ws = self._get_sheet(sheet_name[:31], header)
        stamp = datetime.now().strftime("%Y-%m-%d %H:%M")
        for row in frame.itertuples(index=False):
            ws.append([stamp] + [_plain(v) for v in row])

        key = header.index(sort_by)
        rows = list(ws.iter_rows(values_only=True))[1:]
        rows.sort(key=lambda r: (r[key] is None, r[key]))

        ws.delete_rows(2, ws.max_row)
        for r in rows:
            ws.append(r)

        wb.save(self.workbook)
        return self.workbook

    def save_record(self, record, config):
        """CSV, JSON sidecar and optional workbook sheet of a convergence record."""
        frame = record.frame()
        comment = record.header_comment()
        csv_path = self.save_table(record.name, frame, comment)
        self.save_sidecar(record.name, {"config": config.resolved(), "record": record.summary(),
                                         "columns": record.columns})
        if self.excel and len(frame):
            self.save_excel(record.name, frame, record.parameter)
        return csv_path
