from typing import Dict, Optional, Sequence

import numpy as np

from models.entities import RegimeMatrix


class StatsService:
    @staticmethod
    def chance_level(num_classes: int) -> float:
        return 1.0 / num_classes

    @staticmethod
    def mean_and_std(values: Sequence[float]) -> Dict[str, Optional[float]]:
        """
        Mean and population std of per-seed accuracies; None when there are no values
        """
        if not values:
            return {"mean": None, "std": None}
        arr = np.asarray(values, dtype=np.float64)
        return {"mean": float(arr.mean()), "std": float(arr.std())}

    @staticmethod
    def label_distribution(labels: Sequence[str], names: Sequence[str]) -> Dict[str, int]:
        counts = {name: 0 for name in names}
        for label in labels:
            counts[label] += 1
        return counts

    @staticmethod
    def best_variant(matrix: RegimeMatrix, regime: str, variants: Sequence[str]) -> Optional[str]:
        scored = [(matrix.accuracy(v, regime), v) for v in variants]
        scored = [(acc, v) for acc, v in scored if acc is not None]
        return max(scored)[1] if scored else None

    @staticmethod
    def regime_pattern(matrix: RegimeMatrix, num_classes: int) -> Dict[str, Optional[bool]]:
        """
        The qualitative rotation-transfer pattern: CD collapses under Z/SO3, A-RI transfers,
        Sel stays close to the best single variant. None marks a check whose cells are missing.
        """
        chance = StatsService.chance_level(num_classes)
        checks: Dict[str, Optional[bool]] = {}
        cd = matrix.accuracy("cd", "zso3")
        checks["cd_zso3_below_twice_chance"] = None if cd is None else cd < 2.0 * chance
        ari_zso3, ari_so3 = matrix.accuracy("ari", "zso3"), matrix.accuracy("ari", "so3so3")
        checks["ari_zso3_at_least_0_8"] = None if ari_zso3 is None else ari_zso3 >= 0.80
        checks["ari_transfers"] = (None if ari_zso3 is None or ari_so3 is None
                                   else abs(ari_zso3 - ari_so3) <= 0.05)
        for regime in ("nn", "zz", "so3so3"):
            sel = matrix.accuracy("sel", regime)
            singles = [matrix.accuracy(v, regime) for v in ("cd", "zri", "ari")]
            singles = [a for a in singles if a is not None]
            checks[f"sel_close_to_best_{regime}"] = (None if sel is None or not singles
                                                     else sel >= max(singles) - 0.03)
        return checks
