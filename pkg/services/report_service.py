import csv
import logging
import os
from io import StringIO
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from models.entities import BRANCH_ORDER, REGIMES, EncodingKind, History, RegimeMatrix
from services.stats_service import StatsService

logger = logging.getLogger(__name__)

ATTENTION_HEADER = ["x", "y", "z", "label", "alpha1", "alpha2", "alpha3"]
LOSS_HEADER = ["variant", "epoch", "loss"]
HISTORY_HEADER = ["epoch", "loss", "train_accuracy", "eval_accuracy", "seconds"]
SWEEP_HEADER = ["maskout_epochs", "zz", "zso3"]
CELL_HEADER = ["variant", "regime", "seeds", "mean", "std", "best"]
PATTERN_HEADER = ["check", "result"]


def _fmt(value: Optional[float]) -> str:
    return "" if value is None else repr(float(value))


class ReportService:
    @staticmethod
    def _render(header: Sequence[str], rows) -> str:
        output = StringIO()
        writer = csv.writer(output, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
        return output.getvalue()

    @staticmethod
    def encoding_csv(query_indices: np.ndarray, neighbor_lists: np.ndarray,
                     encodings: Mapping[EncodingKind, np.ndarray]) -> str:
        """
        One row per (query, neighbor slot): query,slot,neighbor then the columns of each encoding
        """
        kinds = [k for k in BRANCH_ORDER if k in encodings]
        header = ["query", "slot", "neighbor"]
        for kind in kinds:
            header += [f"{kind.value}_{col}" if len(kinds) > 1 else col for col in kind.columns]
        rows = []
        for m, q in enumerate(query_indices):
            for slot, j in enumerate(neighbor_lists[m]):
                row = [int(q), slot, int(j)]
                for kind in kinds:
                    row += [repr(float(v)) for v in encodings[kind][m, slot]]
                rows.append(row)
        return ReportService._render(header, rows)

    @staticmethod
    def attention_csv(positions: np.ndarray, labels: Sequence[str], branch_means: np.ndarray) -> str:
        rows = [[*(repr(float(v)) for v in p), label, *(repr(float(a)) for a in alpha)]
                for p, label, alpha in zip(positions, labels, branch_means)]
        return ReportService._render(ATTENTION_HEADER, rows)

    @staticmethod
    def loss_curves_csv(histories: Mapping[str, History]) -> str:
        """
        Columns variant,epoch,loss; epochs count from 1, losses are written unrounded
        """
        rows = [[variant, epoch, repr(float(loss))]
                for variant, history in histories.items()
                for epoch, loss in enumerate(history.losses, start=1)]
        return ReportService._render(LOSS_HEADER, rows)

    @staticmethod
    def history_csv(history: History) -> str:
        rows = []
        for e, loss in enumerate(history.losses):
            eval_acc = history.eval_accuracies[e] if e < len(history.eval_accuracies) else None
            rows.append([e + 1, repr(float(loss)), _fmt(history.accuracies[e]), _fmt(eval_acc),
                         f"{history.epoch_times[e]:.3f}"])
        return ReportService._render(HISTORY_HEADER, rows)

    @staticmethod
    def regime_matrix_csv(matrix: RegimeMatrix, variants: Sequence[str], regimes: Sequence[str]) -> str:
        """
        Rows are variants, columns the requested regimes in nn, zz, zso3, so3so3 order.
        A failed cell is written as `failed`, a cell that was not requested stays empty.
        """
        ordered = [r.name for r in REGIMES if r.name in regimes]
        rows = []
        for variant in variants:
            row = [variant, matrix.parameter_counts.get(variant, "")]
            for regime in ordered:
                cell = matrix.cells.get((variant, regime))
                if cell is None:
                    row.append("")
                elif cell.failed:
                    row.append("failed")
                else:
                    row.append(f"{cell.mean_accuracy:.4f}")
            rows.append(row)
        return ReportService._render(["variant", "params", *ordered], rows)

    @staticmethod
    def regime_cells_csv(matrix: RegimeMatrix, variants: Sequence[str], regimes: Sequence[str]) -> str:
        """
        Per-seed spread of every cell; `best` marks the top variant of each regime.
        Failed cells keep empty numbers.
        """
        ordered = [r.name for r in REGIMES if r.name in regimes]
        rows = []
        for regime in ordered:
            best = StatsService.best_variant(matrix, regime, variants)
            for variant in variants:
                cell = matrix.cells.get((variant, regime))
                if cell is None:
                    continue
                spread = StatsService.mean_and_std([] if cell.failed else cell.accuracies)
                rows.append([variant, regime, len(cell.accuracies), _fmt(spread["mean"]), _fmt(spread["std"]),
                             "yes" if variant == best else ""])
        return ReportService._render(CELL_HEADER, rows)

    @staticmethod
    def pattern_csv(checks: Mapping[str, Optional[bool]]) -> str:
        rows = [[name, "n/a" if ok is None else ("pass" if ok else "fail")] for name, ok in checks.items()]
        return ReportService._render(PATTERN_HEADER, rows)

    @staticmethod
    def sweep_csv(results: Dict[int, Dict[str, float]]) -> str:
        rows = [[t, _fmt(r.get("zz")), _fmt(r.get("zso3"))] for t, r in sorted(results.items())]
        return ReportService._render(SWEEP_HEADER, rows)

    @staticmethod
    def write(path: str, text: str) -> str:
        folder = os.path.dirname(path)
        if folder:
            os.makedirs(folder, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        logger.info("Wrote %s", path)
        return path

    @staticmethod
    def read_rows(path: str) -> List[Dict[str, str]]:
        with open(path, newline="", encoding="utf-8") as f:
            return list(csv.DictReader(f))
