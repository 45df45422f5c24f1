"""
Report Generator Module
Run manifests, CSV tables, text/JSON run summaries and the loss-curve plot
"""

import hashlib
import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Union

import pandas as pd

from .data_io import _atomic_write

logger = logging.getLogger(__name__)

# Try to import plotting library
try:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    MATPLOTLIB_AVAILABLE = True
except ImportError:
    MATPLOTLIB_AVAILABLE = False
    logger.warning("matplotlib not available. Loss curve plots disabled.")

PathLike = Union[str, Path]
RULE = "=" * 60


def sha256_file(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _format_value(value: Any) -> str:
    if isinstance(value, float):
        if math.isinf(value):
            return "inf"
        return f"{value:.6f}"
    return str(value)


class RunReportGenerator:
    """Write the artifacts that describe one CLI run"""

    def __init__(self, output_dir: PathLike):
        """
        Args:
            output_dir: Run directory; created on first write
        """
        self.output_dir = Path(output_dir)
        self.artifacts: List[Path] = []

    def path(self, name: str) -> Path:
        return self.output_dir / name

    def track(self, path: PathLike) -> Path:
        path = Path(path)
        if path not in self.artifacts:
            self.artifacts.append(path)
        return path

    def write_table(self, rows: Union[pd.DataFrame, Iterable[Dict[str, Any]]], name: str,
                    columns: Optional[List[str]] = None) -> Path:
        """Write rows as CSV (header row, comma separated, '.' decimal)"""
        frame = rows if isinstance(rows, pd.DataFrame) else pd.DataFrame(list(rows), columns=columns)
        path = self.path(name)
        _atomic_write(path, frame.to_csv(index=False, float_format="%.10g").encode("utf-8"))
        logger.info(f"Table written: {path} ({len(frame)} rows)")
        return self.track(path)

    def write_text_report(self, title: str, summary: Dict[str, Any],
                          tables: Optional[Dict[str, pd.DataFrame]] = None,
                          name: str = "report.txt") -> Path:
        lines = [RULE, title.upper(), RULE, ""]
        for key, value in summary.items():
            lines.append(f"{key.replace('_', ' ').title()}: {_format_value(value)}")
        for section, frame in (tables or {}).items():
            lines += ["", RULE, section.upper(), RULE, "", frame.to_string(index=False)]
        path = self.path(name)
        _atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))
        logger.info(f"Text report generated: {path}")
        return self.track(path)

    def generate_json_report(self, command: str, summary: Dict[str, Any],
                             tables: Optional[Dict[str, pd.DataFrame]] = None) -> str:
        """JSON summary for data exchange; infinities become the string 'inf'"""
        def clean(value):
            if isinstance(value, float) and math.isinf(value):
                return "inf"
            return value

        report = {
            "command": command,
            "summary": {k: clean(v) for k, v in summary.items()},
            "tables": {
                section: [{k: clean(v) for k, v in row.items()} for row in frame.to_dict(orient="records")]
                for section, frame in (tables or {}).items()
            },
        }
        return json.dumps(report, indent=2, ensure_ascii=False)

    def write_json_report(self, command: str, summary: Dict[str, Any],
                          tables: Optional[Dict[str, pd.DataFrame]] = None,
                          name: str = "report.json") -> Path:
        path = self.path(name)
        _atomic_write(path, self.generate_json_report(command, summary, tables).encode("utf-8"))
        return self.track(path)

    def plot_loss_curve(self, history: pd.DataFrame, name: str = "loss_curve.png") -> Optional[Path]:
        if not MATPLOTLIB_AVAILABLE:
            logger.warning("Skipping loss curve: matplotlib not installed")
            return None
        path = self.path(name)
        path.parent.mkdir(parents=True, exist_ok=True)
        fig, ax = plt.subplots(figsize=(6, 4))
        for column in ("total", "l1", "ssim_loss", "fr"):
            if column in history:
                ax.plot(history["step"], history[column], label=column)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)
        logger.info(f"Loss curve written: {path}")
        return self.track(path)

    def write_manifest(self, config: Dict[str, Any], name: str = "manifest.txt") -> Path:
        """
        Resolved configuration plus the sha256 of every tracked artifact

        No timestamps, so identical runs produce identical manifests.
        """
        lines = ["[config]"]
        lines += [f"{key} = {value}" for key, value in sorted(config.items())]
        lines += ["", "[artifacts]"]
        for artifact in sorted(self.artifacts):
            if not artifact.exists():
                continue
            try:
                rel = artifact.relative_to(self.output_dir)
            except ValueError:
                rel = artifact
            lines.append(f"{sha256_file(artifact)}  {rel.as_posix()}")
        path = self.path(name)
        _atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))
        logger.info(f"Manifest written: {path} ({len(self.artifacts)} artifacts)")
        return path
