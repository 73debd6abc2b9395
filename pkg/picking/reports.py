"""
Plain-text report rendering for the RMSE table and the A/B report.
"""

import logging
from pathlib import Path
from typing import Dict, Tuple

from jinja2 import Environment, FileSystemLoader, StrictUndefined, Template

from config import TEMPLATES_DIR
from picking.evaluation import AbReport

logger = logging.getLogger(__name__)

RMSE_TEMPLATE = "rmse_table.txt.j2"
AB_TEMPLATE = "ab_report.txt.j2"
RMSE_ROWS = ("p_x (meters)", "p_y (meters)", "r_z (radians)")

# ——————————————————————————————————————————————————————————————————————————————
# Helper: Load Jinja2 templates
# ——————————————————————————————————————————————————————————————————————————————
_jinja_env = Environment(
    loader=FileSystemLoader(str(TEMPLATES_DIR)),
    autoescape=False,
    undefined=StrictUndefined,
    keep_trailing_newline=True,
)
_jinja_env.filters["pct"] = lambda value, digits=2: f"{100.0 * value:.{digits}f}%"


def load_template(name: str) -> Template:
    """
    Load a template by filename (e.g. 'rmse_table.txt.j2').
    Templates live in TEMPLATES_DIR.
    """
    return _jinja_env.get_template(name)


def render_rmse_table(columns: Dict[str, Tuple[float, float, float]]) -> str:
    """One column per model kind, rows p_x / p_y / r_z"""
    rows = [(label, [values[i] for values in columns.values()]) for i, label in enumerate(RMSE_ROWS)]
    return load_template(RMSE_TEMPLATE).render(models=list(columns), rows=rows)


def render_ab_report(report: AbReport) -> str:
    metrics = [
        ("Missed Picks", "missed_rate"),
        ("Infeasible Picks", "infeasible_rate"),
        ("Multi-picks", "multipick_rate"),
    ]
    arms = [("C", report.control), ("T", report.treatment)]
    return load_template(AB_TEMPLATE).render(report=report, metrics=metrics, arms=arms)


def write_text(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    logger.info(f"Wrote report to {path}")
