import json
import logging
import os
from typing import Dict, Iterable, List, Optional, Sequence, Union

import pandas as pd
from reportlab.lib import colors
from reportlab.lib.pagesizes import landscape, letter
from reportlab.lib.styles import ParagraphStyle, getSampleStyleSheet
from reportlab.platypus import Paragraph, SimpleDocTemplate, Spacer, Table, TableStyle

from errors import ConfigurationError, DataIOError, ParameterError
from models.run_record import ExperimentResult, append_jsonl, is_missing, read_jsonl
from services.churn_metrics import pairwise_stats, pareto_frontier, report_point
from services.theory import RateResult

logger = logging.getLogger(__name__)

FORMATS = ('csv', 'table', 'jsonl', 'pdf')
OUTPUT_FILES = {'csv': 'summary.csv', 'table': 'table.txt', 'jsonl': 'runs.jsonl', 'pdf': 'summary.pdf'}

SUMMARY_COLUMNS = ['method', 'hyperparams', 'accuracy_mean', 'accuracy_std', 'churn_mean', 'churn_std',
                   'churn_correct_mean', 'churn_correct_std', 'churn_incorrect_mean', 'churn_incorrect_std',
                   'pareto_flag']

TABLE_COLUMNS = [('Accuracy', 'accuracy'), ('Churn', 'churn'), ('Churn (correct)', 'churn_correct'),
                 ('Churn (incorrect)', 'churn_incorrect')]


def format_cell(mean: Optional[float], std: Optional[float]) -> str:
    """'mean (std)' to two decimals, '-' when the statistic is absent"""
    if is_missing(mean):
        return '-'
    return f"{mean:.2f} ({0.0 if is_missing(std) else std:.2f})"


def hyperparam_string(hyperparams: Dict) -> str:
    return json.dumps(hyperparams, sort_keys=True, separators=(',', ':'))


def pareto_flags(results: Sequence[ExperimentResult], churn_metric: str = 'churn') -> List[bool]:
    """Frontier membership of each setting among the settings of the same method"""
    flags = [False] * len(results)
    groups: Dict[str, List[int]] = {}
    for i, result in enumerate(results):
        groups.setdefault(result.method, []).append(i)
    for indices in groups.values():
        points = [report_point(results[i].report, churn_metric) for i in indices]
        for j in pareto_frontier(points):
            flags[indices[j]] = True
    return flags


def results_from_jsonl(path: str) -> List[ExperimentResult]:
    """Rebuild settings and their reports from a run-record file"""
    results = []
    for setting in read_jsonl(path):
        if setting.get('truth') is None:
            raise ParameterError(f"Setting {setting['fingerprint']} in {path} has no test labels")
        results.append(ExperimentResult(
            method=setting['method'],
            hyperparams=setting['hyperparams'],
            report=pairwise_stats(setting['records'], setting['truth']),
            records=setting['records'],
            truth=setting['truth'],
            fingerprint=setting['fingerprint']
        ))
    return results


class ReportService:
    def __init__(self, churn_metric: str = 'churn'):
        """
        Args:
            churn_metric: churn measure defining the Pareto flag ('churn' or 'churn_correct')
        """
        if churn_metric not in ('churn', 'churn_correct'):
            raise ConfigurationError(f"Unknown churn metric '{churn_metric}'")
        self.churn_metric = churn_metric
        self.styles = getSampleStyleSheet()

    def summary_frame(self, results: Sequence[ExperimentResult]) -> pd.DataFrame:
        flags = pareto_flags(results, self.churn_metric)
        rows = []
        for result, flag in zip(results, flags):
            row = {'method': result.method, 'hyperparams': hyperparam_string(result.hyperparams)}
            for column in SUMMARY_COLUMNS[2:-1]:
                row[column] = getattr(result.report, column)
            row['pareto_flag'] = flag
            rows.append(row)
        return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)

    def table_frame(self, results: Sequence[ExperimentResult]) -> pd.DataFrame:
        rows = []
        for result in results:
            row = {'Method': result.method, 'Setting': hyperparam_string(result.hyperparams)}
            for title, stat in TABLE_COLUMNS:
                row[title] = format_cell(getattr(result.report, f"{stat}_mean"),
                                         getattr(result.report, f"{stat}_std"))
            rows.append(row)
        return pd.DataFrame(rows)

    def render_table(self, results: Sequence[ExperimentResult], title: str = 'Churn report') -> str:
        lines = ["=" * 60, title.upper(), "=" * 60, ""]
        lines.append(self.table_frame(results).to_string(index=False))
        lines.append("")
        return "\n".join(lines)

    def write_report(self, results: Sequence[ExperimentResult], out_path: str,
                     formats: Union[str, Iterable[str]] = ('csv', 'table', 'jsonl'),
                     title: str = 'Churn report') -> Dict[str, str]:
        """
        Write summary files for a list of settings
        Args:
            results: non-empty list of ExperimentResult
            out_path: output directory
            formats: any of csv, table, jsonl, pdf
        Returns:
            format -> path of the file written
        """
        if not results:
            raise ParameterError("Nothing to report: no results")
        formats = [formats] if isinstance(formats, str) else list(formats)
        unknown = sorted(set(formats) - set(FORMATS))
        if unknown:
            raise ConfigurationError(f"Unknown report format(s) {', '.join(unknown)}; expected {', '.join(FORMATS)}")

        written = {}
        try:
            os.makedirs(out_path, exist_ok=True)
            for fmt in formats:
                path = os.path.join(out_path, OUTPUT_FILES[fmt])
                if fmt == 'csv':
                    self.summary_frame(results).to_csv(path, index=False, lineterminator='\n')
                elif fmt == 'table':
                    with open(path, 'w', encoding='utf-8') as handle:
                        handle.write(self.render_table(results, title))
                elif fmt == 'jsonl':
                    open(path, 'w', encoding='utf-8').close()
                    append_jsonl(path, results)
                else:
                    self.export_to_pdf(results, path, title)
                written[fmt] = path
        except OSError as e:
            raise DataIOError(f"Failed to write report to {out_path}: {e}") from e

        logger.info(f"Report written: {', '.join(written.values())}")
        return written

    def export_to_pdf(self, results: Sequence[ExperimentResult], pdf_path: str, title: str = 'Churn report') -> str:
        doc = SimpleDocTemplate(pdf_path, pagesize=landscape(letter))
        title_style = ParagraphStyle(
            'ReportTitle',
            parent=self.styles['Heading1'],
            fontSize=18,
            spaceAfter=20,
            alignment=1
        )
        story = [Paragraph(title, title_style), Spacer(1, 12)]

        frame = self.table_frame(results)
        frame['Pareto'] = ['yes' if flag else '' for flag in pareto_flags(results, self.churn_metric)]
        table = Table([list(frame.columns)] + frame.values.tolist(), repeatRows=1)
        table.setStyle(TableStyle([
            ('BACKGROUND', (0, 0), (-1, 0), colors.grey),
            ('TEXTCOLOR', (0, 0), (-1, 0), colors.whitesmoke),
            ('ALIGN', (0, 0), (-1, -1), 'LEFT'),
            ('FONTNAME', (0, 0), (-1, 0), 'Helvetica-Bold'),
            ('FONTSIZE', (0, 0), (-1, -1), 8),
            ('BOTTOMPADDING', (0, 0), (-1, -1), 4),
            ('BACKGROUND', (0, 1), (-1, -1), colors.beige),
            ('GRID', (0, 0), (-1, -1), 0.5, colors.black)
        ]))
        story.append(table)
        doc.build(story)
        return pdf_path

    def rerender(self, runs_path: str, out_path: str, formats: Union[str, Iterable[str]] = ('csv', 'table'),
                 title: str = 'Churn report') -> Dict[str, str]:
        """Recompute every report from a runs.jsonl file and write it again"""
        results = results_from_jsonl(runs_path)
        formats = [formats] if isinstance(formats, str) else list(formats)
        target = os.path.join(out_path, OUTPUT_FILES['jsonl'])
        if 'jsonl' in formats and os.path.abspath(target) == os.path.abspath(runs_path):
            formats.remove('jsonl')
        return self.write_report(results, out_path, formats, title)


def write_rate_csv(result: RateResult, path: str) -> str:
    """Rate curve as CSV with columns n, mean_error, std_error, bound"""
    try:
        result.to_frame().to_csv(path, index=False, lineterminator='\n')
    except OSError as e:
        raise DataIOError(f"Failed to write rate curve to {path}: {e}") from e
    return path
