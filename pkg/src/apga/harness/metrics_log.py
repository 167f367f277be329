"""
Metrics Log Module
Per-step training metrics, one CSV row per step
"""

import logging
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Union

import pandas as pd

logger = logging.getLogger(__name__)

METRIC_COLUMNS = [
    "step",
    "L_original",
    "L_adversarial",
    "R_t",
    "b_t",
    "mean_policy_prob",
    "aid_keep_fraction",
    "val_accuracy",
]


def read_metrics(path: Union[str, Path]) -> pd.DataFrame:
    """Read a metrics CSV; floats are parsed round-trip exact, blanks become NaN."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Metrics file not found: {path}")
    return pd.read_csv(path, float_precision="round_trip")


class MetricsLog:
    """Append-only metrics CSV of one training run."""

    def __init__(self, csv_path: Union[str, Path], resume_step: Optional[int] = None):
        self.csv_path = Path(csv_path)
        self.csv_path.parent.mkdir(parents=True, exist_ok=True)

        if resume_step is not None and self.csv_path.exists():
            self.truncate(resume_step)
        else:
            self._create_log_file()

    def _create_log_file(self):
        """Header only"""
        pd.DataFrame(columns=METRIC_COLUMNS).to_csv(self.csv_path, index=False)
        logger.debug("created metrics log %s", self.csv_path)

    def append(self, row: Mapping) -> None:
        missing = set(METRIC_COLUMNS) - set(row)
        if missing:
            raise KeyError(f"metrics row is missing {sorted(missing)}")
        frame = pd.DataFrame([{k: row[k] for k in METRIC_COLUMNS}], columns=METRIC_COLUMNS)
        frame.to_csv(self.csv_path, mode="a", header=False, index=False, na_rep="")

    def read(self) -> pd.DataFrame:
        return read_metrics(self.csv_path)

    def truncate(self, step: int) -> None:
        """Drop rows at or after `step` so a resumed run continues the log seamlessly."""
        df = self.read()
        kept = df[df["step"] < step]
        kept.to_csv(self.csv_path, index=False, na_rep="")
        if len(kept) != len(df):
            logger.info("dropped %d metrics rows after step %d from %s", len(df) - len(kept), step, self.csv_path)

    def read_recent(self, count: int = 10) -> List[Dict]:
        return self.read().tail(count).to_dict(orient="records")

    def get_log_stats(self) -> Dict:
        df = self.read()
        return {
            "total_entries": len(df),
            "last_step": int(df["step"].iloc[-1]) if len(df) else None,
            "evaluations": int(df["val_accuracy"].notna().sum()),
            "file_path": str(self.csv_path),
        }
