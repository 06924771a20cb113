import json
import logging
import math
import numbers
import os
from typing import Dict, List, Optional

import pandas as pd
from xlsxwriter.utility import xl_range

from src.errors import DatasetIOError
from src.evaluation import RECALL_POINTS
from src.models import Category, EvalResult, SplitStats
from src.stats import stats_table

logger = logging.getLogger(__name__)


def _pct(value: Optional[float]) -> float:
    return float("nan") if value is None else 100.0 * value


def summary_frame(results: Dict[str, EvalResult]) -> pd.DataFrame:
    """
    One row with mAP (in percent) per evaluated column, in the given column order.
    """
    row = {name: _pct(r.mean_ap) for name, r in results.items()}
    return pd.DataFrame([row], index=["mAP"])


def format_summary_table(results: Dict[str, EvalResult]) -> str:
    df = summary_frame(results)
    return df.to_string(float_format=lambda v: f"{v:.1f}", na_rep="n/a")


def per_category_frame(result: EvalResult, categories: Optional[List[Category]] = None) -> pd.DataFrame:
    names = {c.id: c.name for c in categories or []}
    rows = [
        {
            "category_id": cid,
            "category": names.get(cid, "all" if result.class_agnostic else str(cid)),
            "AP": _pct(ap),
            "AR": _pct(result.per_category_ar.get(cid)),
        }
        for cid, ap in result.per_category_ap.items()
    ]
    return pd.DataFrame(rows, columns=["category_id", "category", "AP", "AR"])


def per_threshold_frame(result: EvalResult) -> pd.DataFrame:
    """
    AP (percent) for each IoU threshold (rows) and category (columns).
    """
    data = {t: {cid: _pct(ap) for cid, ap in per_cat.items()} for t, per_cat in result.per_threshold_ap.items()}
    return pd.DataFrame.from_dict(data, orient="index").sort_index()


def pr_curve_frame(result: EvalResult) -> pd.DataFrame:
    """
    Long-format interpolated precision/recall curves: one row per
    (threshold, category, recall point).
    """
    rows = []
    for t, per_cat in result.pr_curves.items():
        for cid, precision in per_cat.items():
            for r, p in zip(RECALL_POINTS, precision):
                rows.append({"iou_threshold": t, "category_id": cid, "recall": round(float(r), 2), "precision": p})
    return pd.DataFrame(rows, columns=["iou_threshold", "category_id", "recall", "precision"])


def _ensure_dir(path: str) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)


def write_pr_csv(result: EvalResult, path: str) -> str:
    try:
        _ensure_dir(path)
        pr_curve_frame(result).to_csv(path, index=False)
    except OSError as e:
        raise DatasetIOError(f"Could not write PR curves to {path}: {e}") from e
    return path


def write_json(payload, path: str) -> str:
    try:
        _ensure_dir(path)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
    except OSError as e:
        raise DatasetIOError(f"Could not write {path}: {e}") from e
    return path


def write_eval_json(results: Dict[str, EvalResult], path: str) -> str:
    return write_json({name: r.model_dump(mode="json") for name, r in results.items()}, path)


def write_stats_json(stats: Dict[str, SplitStats], path: str) -> str:
    # exact ratios, unrounded
    return write_json({split: s.model_dump() for split, s in stats.items()}, path)


class WorkbookReporter:
    """
    xlsx export of evaluation and split statistics.
    """

    def __init__(self, output_path: str):
        self.output_path = output_path
        _ensure_dir(output_path)
        self.writer = pd.ExcelWriter(output_path, engine="xlsxwriter")
        self.workbook = self.writer.book

        self.header_format = self.workbook.add_format({
            "bold": True,
            "text_wrap": True,
            "valign": "vcenter",
            "align": "center",
            "fg_color": "#4F81BD",
            "font_color": "white",
            "border": 1,
        })
        self.label_format = self.workbook.add_format({"bold": True, "border": 1, "bg_color": "#F2F2F2"})
        self.score_format = self.workbook.add_format({"num_format": "0.0", "border": 1})
        self.count_format = self.workbook.add_format({"num_format": "#,##0", "border": 1})
        self.title_format = self.workbook.add_format({"bold": True, "font_size": 16, "font_color": "#366092"})

    def _write_frame(self, sheet_name: str, df: pd.DataFrame, title: str, value_format) -> None:
        worksheet = self.workbook.add_worksheet(sheet_name)
        worksheet.hide_gridlines(2)
        worksheet.write(0, 0, title, self.title_format)
        header_row = 2
        worksheet.write(header_row, 0, df.index.name or "", self.header_format)
        for j, col in enumerate(df.columns):
            worksheet.write(header_row, 1 + j, str(col), self.header_format)
        for i, (label, values) in enumerate(df.iterrows()):
            row = header_row + 1 + i
            worksheet.write(row, 0, str(label), self.label_format)
            for j, value in enumerate(values):
                if isinstance(value, float) and math.isnan(value):
                    worksheet.write(row, 1 + j, "-", self.label_format)
                elif isinstance(value, numbers.Real):
                    worksheet.write_number(row, 1 + j, value, value_format)
                else:
                    worksheet.write(row, 1 + j, str(value), self.label_format)
        if len(df) and len(df.columns):
            cells = xl_range(header_row + 1, 1, header_row + len(df), len(df.columns))
            if value_format is self.score_format:
                worksheet.conditional_format(cells, {"type": "3_color_scale"})
        worksheet.set_column(0, 0, 40)
        worksheet.set_column(1, max(1, len(df.columns)), 14)

    def add_evaluation(self, results: Dict[str, EvalResult], categories: Optional[List[Category]] = None) -> None:
        self._write_frame("Summary", summary_frame(results), "Evaluation summary (mAP, %)", self.score_format)
        for name, result in results.items():
            sheet = name.replace("^", "").replace(" ", "_").replace("(", "").replace(")", "")[:31]
            frame = per_category_frame(result, categories).set_index("category")
            self._write_frame(sheet, frame[["AP", "AR"]], f"{name} per category (%)", self.score_format)

    def add_stats(self, stats: Dict[str, SplitStats]) -> None:
        self._write_frame("Statistics", stats_table(stats, rounded=False), "Split statistics", self.count_format)

    def close(self) -> str:
        try:
            self.writer.close()
        except PermissionError:
            logger.warning("Permission denied: could not write %s (file open elsewhere?)", self.output_path)
            raise
        logger.info("Workbook saved to %s", self.output_path)
        return self.output_path


def generate_excel_report(output_path: str, results: Optional[Dict[str, EvalResult]] = None,
                          stats: Optional[Dict[str, SplitStats]] = None,
                          categories: Optional[List[Category]] = None) -> str:
    """
    Writes an xlsx workbook with whatever reports are given.
    """
    reporter = WorkbookReporter(output_path)
    if results:
        reporter.add_evaluation(results, categories)
    if stats:
        reporter.add_stats(stats)
    if not results and not stats:
        # xlsxwriter refuses to save a workbook without sheets
        reporter.workbook.add_worksheet("Empty")
    return reporter.close()
