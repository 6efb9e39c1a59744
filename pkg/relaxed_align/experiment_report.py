"""
Experiment Report Generation for relaxed-align
Aggregates per-seed training results into the target-accuracy table (CSV + JSON)
"""
import csv
import logging
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from relaxed_align.config_manager import BETA_FREE_VARIANTS
from relaxed_align.export_utils import header_line, write_json

logger = logging.getLogger(__name__)


def cell_label(variant: str, beta: float) -> str:
    return variant if beta == 0 and variant in BETA_FREE_VARIANTS else f"{variant}-{beta:g}"


class AccuracyTableReport:
    """Mean and standard deviation of target accuracy per (variant, beta) cell"""

    def __init__(self):
        self.results: List[Dict] = []
        self.dataset_name = ""

    def set_results(self, results: List[Dict], dataset_name: str = ""):
        """Per-seed result records: variant, beta, seed, success, target_accuracy, source_accuracy, message"""
        self.results = list(results)
        self.dataset_name = dataset_name

    def _cells(self) -> List[Tuple[str, float]]:
        seen = []
        for r in self.results:
            key = (r['variant'], float(r['beta']))
            if key not in seen:
                seen.append(key)
        return seen

    def cell_rows(self) -> List[Dict]:
        rows = []
        for variant, beta in self._cells():
            records = [r for r in self.results if r['variant'] == variant and float(r['beta']) == beta]
            ok = [r for r in records if r.get('success', False)]
            target = np.array([r['target_accuracy'] for r in ok], dtype=float)
            source = np.array([r['source_accuracy'] for r in ok], dtype=float)
            rows.append({
                'cell': cell_label(variant, beta),
                'variant': variant,
                'beta': beta,
                'runs': len(records),
                'failed': len(records) - len(ok),
                'target_mean': float(target.mean()) if len(ok) else None,
                'target_std': float(target.std()) if len(ok) else None,
                'source_mean': float(source.mean()) if len(ok) else None,
                'target_per_seed': [float(v) for v in target],
            })
        return rows

    def summary(self) -> Dict:
        successful = len([r for r in self.results if r.get('success', False)])
        return {
            'dataset': self.dataset_name,
            'cells': len(self._cells()),
            'runs': len(self.results),
            'successful': successful,
            'failed': len(self.results) - successful,
        }

    def generate_csv_report(self, path: Path) -> bool:
        if not self.results:
            logger.warning("No results to report")
            return False
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', newline='', encoding='utf-8') as csvfile:
            csvfile.write(header_line("accuracy-table") + "\n")
            writer = csv.writer(csvfile, lineterminator="\n")
            writer.writerow(['cell', 'variant', 'beta', 'runs', 'failed',
                             'target_accuracy_mean', 'target_accuracy_std', 'source_accuracy_mean'])
            for row in self.cell_rows():
                writer.writerow([row['cell'], row['variant'], row['beta'], row['runs'], row['failed'],
                                 row['target_mean'] if row['target_mean'] is not None else '',
                                 row['target_std'] if row['target_std'] is not None else '',
                                 row['source_mean'] if row['source_mean'] is not None else ''])
        logger.info(f"Table written to {path}")
        return True

    def generate_json_report(self, path: Path) -> bool:
        if not self.results:
            logger.warning("No results to report")
            return False
        raw = [{k: v for k, v in r.items() if k in ('variant', 'beta', 'seed', 'success', 'target_accuracy',
                                                     'source_accuracy', 'message')}
               for r in self.results]
        write_json(path, {'summary': self.summary(), 'cells': self.cell_rows(), 'runs': raw})
        return True

    def format_table(self) -> str:
        lines = [f"{'cell':<12} {'target acc (%)':>18} {'failed':>7}"]
        for row in self.cell_rows():
            if row['target_mean'] is None:
                value = "failed"
            else:
                value = f"{100 * row['target_mean']:.1f} +/- {100 * row['target_std']:.1f}"
            lines.append(f"{row['cell']:<12} {value:>18} {row['failed']:>7}")
        return "\n".join(lines)
