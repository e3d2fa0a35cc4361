import pandas as pd

from tools.sv_trainer import METRICS_COLUMNS
from tools.sv_visuals import figures_to_html, loss_curve_chart, system_metric_bars


def _metrics(ce, pn, contra):
    steps = len(ce)
    return pd.DataFrame(
        {
            "step": range(steps),
            "lr": [1e-3] * steps,
            "loss_total": [c + 0.5 * (p + q) for c, p, q in zip(ce, pn, contra)],
            "loss_ce": ce,
            "loss_pn": pn,
            "loss_contra": contra,
        },
        columns=METRICS_COLUMNS,
    )


def _summary():
    return pd.DataFrame(
        {
            "system": ["pn", "pn", "acl", "acl"],
            "condition": ["dev", "eval", "dev", "eval"],
            "eer_mean": [0.2, 0.25, 0.15, 0.18],
            "eer_std": [0.01, None, 0.02, 0.01],
            "min_dcf_mean": [0.6, 0.7, 0.5, 0.55],
            "min_dcf_std": [0.05, 0.04, None, 0.03],
            "seeds": [3, 3, 3, 3],
        }
    )


def test_loss_chart_skips_unused_components():
    fig = loss_curve_chart(_metrics([2.0, 1.5, 1.0], [0.0] * 3, [0.0] * 3), "Baseline")
    assert [t.name for t in fig.data] == ["Total", "Global classification (CE)"]
    assert fig.layout.title.text == "Baseline"


def test_loss_chart_shows_all_components():
    fig = loss_curve_chart(_metrics([2.0, 1.5], [1.0, 0.8], [0.5, 0.4]))
    assert len(fig.data) == 4
    assert list(fig.data[0].x) == [0, 1]


def test_metric_bars_group_by_condition():
    fig = system_metric_bars(_summary(), "eer", "EER")
    assert [t.name for t in fig.data] == ["dev", "eval"]
    assert list(fig.data[0].x) == ["pn", "acl"]
    assert list(fig.data[1].error_y.array) == [0.0, 0.01]
    assert fig.layout.barmode == "group"


def test_html_page_loads_plotly_once():
    figs = [("eer", system_metric_bars(_summary(), "eer", "EER")), ("loss", loss_curve_chart(_metrics([1.0], [0.0], [0.0])))]
    html = figures_to_html(figs, "report")
    assert html.startswith("<!DOCTYPE html>")
    assert "<title>report</title>" in html
    assert 'id="eer"' in html and 'id="loss"' in html
    assert html.count("cdn.plot.ly") == 1
    assert html == figures_to_html(figs, "report")
