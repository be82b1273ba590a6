# ui/results.py
import json
import logging
from datetime import datetime
from pathlib import Path
from typing import Dict, Iterable, List, Optional

import numpy as np
import pandas as pd
from fpdf import FPDF
from fpdf.enums import XPos, YPos

from core.errors import DataError

logger = logging.getLogger(__name__)


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    return value


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


class ResultsExporter:
    """Handle export of results to various formats"""

    @staticmethod
    def export_to_json(data: Dict, path) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(_jsonable(data), indent=2), encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot write {path}: {exc}") from exc
        return path

    @staticmethod
    def export_to_csv(table: pd.DataFrame, path) -> Path:
        """Export a results table to CSV format"""
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            table.to_csv(path, index=False)
        except OSError as exc:
            raise DataError(f"cannot write {path}: {exc}") from exc
        return path

    @staticmethod
    def export_to_pdf(title: str, summary: Dict, path, table: Optional[pd.DataFrame] = None,
                      notes: Iterable[str] = (), max_rows: int = 40) -> Path:
        """
        Export a one-document summary to PDF

        Args:
            title: Document title
            summary: Headline values, one line each
            path: Output file
            table: Optional table printed below the summary
            notes: Free-text lines (insights, definitions)
            max_rows: Table rows printed before truncation
        """
        pdf = FPDF()
        pdf.add_page()
        pdf.set_font("Helvetica", "B", 16)
        pdf.cell(0, 10, title, new_x=XPos.LMARGIN, new_y=YPos.NEXT, align="C")
        pdf.set_font("Helvetica", "", 9)
        pdf.cell(0, 6, f"Generated {datetime.now().strftime('%Y-%m-%d %H:%M')}",
                 new_x=XPos.LMARGIN, new_y=YPos.NEXT, align="C")
        pdf.ln(6)

        pdf.set_font("Helvetica", "B", 12)
        pdf.cell(0, 8, "Summary:", new_x=XPos.LMARGIN, new_y=YPos.NEXT)
        pdf.set_font("Helvetica", "", 10)
        for key, value in summary.items():
            pdf.cell(0, 7, f"{key}: {_fmt(value)}", new_x=XPos.LMARGIN, new_y=YPos.NEXT)

        notes = list(notes)
        if notes:
            pdf.ln(4)
            pdf.set_font("Helvetica", "B", 12)
            pdf.cell(0, 8, "Notes:", new_x=XPos.LMARGIN, new_y=YPos.NEXT)
            pdf.set_font("Helvetica", "", 10)
            for line in notes:
                pdf.multi_cell(0, 6, f"- {line}", new_x=XPos.LMARGIN, new_y=YPos.NEXT)

        if table is not None and not table.empty:
            pdf.ln(4)
            pdf.set_font("Helvetica", "B", 12)
            pdf.cell(0, 8, "Table:", new_x=XPos.LMARGIN, new_y=YPos.NEXT)
            pdf.set_font("Helvetica", "", 8)
            pdf.cell(0, 6, " | ".join(str(c) for c in table.columns), new_x=XPos.LMARGIN, new_y=YPos.NEXT)
            for _, row in table.head(max_rows).iterrows():
                pdf.cell(0, 5, " | ".join(_fmt(v) for v in row.tolist()), new_x=XPos.LMARGIN, new_y=YPos.NEXT)
            if len(table) > max_rows:
                pdf.cell(0, 5, f"... {len(table) - max_rows} more rows in the CSV export",
                         new_x=XPos.LMARGIN, new_y=YPos.NEXT)

        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            pdf.output(str(path))
        except OSError as exc:
            raise DataError(f"cannot write {path}: {exc}") from exc
        return path


def companion_path(out_file: Path, suffix: str, tag: str = "") -> Path:
    """Sibling of a FILE output sharing its stem, e.g. report.json -> report.csv"""
    return out_file.with_name(f"{out_file.stem}{tag}{suffix}")


def export_report(data: Dict, out_file, formats: Iterable[str], table: Optional[pd.DataFrame] = None,
                  title: str = "", summary: Optional[Dict] = None, notes: Iterable[str] = (),
                  figure=None) -> List[Path]:
    """Write the JSON report plus the requested companions (csv, pdf, html)"""
    out_file = Path(out_file)
    exporter = ResultsExporter()
    written = [exporter.export_to_json(data, out_file)]
    formats = {f.strip().lower() for f in formats if f.strip()}
    if "csv" in formats and table is not None:
        written.append(exporter.export_to_csv(table, companion_path(out_file, ".csv")))
    if "pdf" in formats:
        written.append(exporter.export_to_pdf(title or out_file.stem, summary or {},
                                              companion_path(out_file, ".pdf"), table, notes))
    if "html" in formats and figure is not None:
        html = companion_path(out_file, ".html")
        figure.write_html(str(html), include_plotlyjs="cdn")
        written.append(html)
    for path in written:
        logger.info("Wrote %s", path)
    return written
