"""Markdown tables and bar charts from metrics CSV files."""

import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from metrics import MetricReport, read_metric_reports  # noqa: E402

logger = logging.getLogger(__name__)

TABLE_COLUMNS = [
    ("config_label", "Config"),
    ("n", "N"),
    ("emo_a", "Emo-A"),
    ("clip_a", "CLIP-A"),
    ("ec_a", "EC-A"),
    ("diversity", "Diversity"),
    ("sem_c", "Sem-C"),
    ("polarity_a", "Polarity-A"),
]
PLOTTED = ["emo_a", "clip_a", "ec_a", "sem_c", "polarity_a"]


def render_markdown(reports: list[MetricReport]) -> str:
    if not reports:
        raise ValueError("No metric reports to render")
    header = "| " + " | ".join(title for _, title in TABLE_COLUMNS) + " |"
    rule = "|" + "|".join("---" if key == "config_label" else "---:" for key, _ in TABLE_COLUMNS) + "|"
    lines = [header, rule]
    for report in reports:
        cells = []
        for key, _ in TABLE_COLUMNS:
            value = getattr(report, key)
            cells.append(f"{value:.4f}" if isinstance(value, float) else str(value))
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def plot_reports(reports: list[MetricReport], path: str | Path) -> Path:
    """Grouped bars: one group per metric, one bar per configuration."""
    if not reports:
        raise ValueError("No metric reports to plot")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    x = np.arange(len(PLOTTED))
    width = 0.8 / len(reports)
    fig, ax = plt.subplots(figsize=(8, 4))
    for i, report in enumerate(reports):
        values = [getattr(report, key) for key in PLOTTED]
        ax.bar(x + (i - (len(reports) - 1) / 2) * width, values, width, label=report.config_label)
    ax.set_xticks(x)
    ax.set_xticklabels([title for key, title in TABLE_COLUMNS if key in PLOTTED])
    ax.set_ylim(0.0, 1.0)
    ax.set_ylabel("score")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    logger.info(f"Bar chart written to {path}")
    return path


def write_report(csv_path: str | Path, out_dir: str | Path | None = None, plot: bool = True) -> Path:
    """Render one metrics CSV to <stem>.md (and <stem>.png) next to it or in out_dir."""
    csv_path = Path(csv_path)
    out_dir = Path(out_dir) if out_dir is not None else csv_path.parent
    out_dir.mkdir(parents=True, exist_ok=True)

    reports = read_metric_reports(csv_path)
    markdown_path = out_dir / f"{csv_path.stem}.md"
    markdown_path.write_text(render_markdown(reports), encoding="utf-8")
    logger.info(f"Markdown table written to {markdown_path}")
    if plot:
        plot_reports(reports, out_dir / f"{csv_path.stem}.png")
    return markdown_path
