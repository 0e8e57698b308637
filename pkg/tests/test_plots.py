import numpy as np
import xml.etree.ElementTree as ET

from ipalab import plots

RUN = "step,loss,delta,delta_se,grad_norm,param_dev\n0,0.69,0,0,1.0,0\n1,0.5,0.1,0.01,0.5,0.1\n2,0.3,0.2,0.01,0.0,0.2\n"


def _parse(svg):
    return ET.fromstring(svg)


def test_line_chart_valid_and_stable():
    svg = plots.line_chart({"a": ([0, 1, 2], [1.0, np.nan, 3.0]), "b<&>": ([0, 1], [2, 2])},
                           title="t", xlabel="x", ylabel="y")
    root = _parse(svg)
    assert root.tag.endswith("svg")
    assert svg == plots.line_chart({"a": ([0, 1, 2], [1.0, np.nan, 3.0]), "b<&>": ([0, 1], [2, 2])},
                                   title="t", xlabel="x", ylabel="y")
    assert "b&lt;&amp;&gt;" in svg


def test_log_axis_drops_non_positive():
    svg = plots.line_chart({"g": ([0, 1, 2], [1.0, 0.0, 100.0])}, log_y=True)
    root = _parse(svg)
    poly = [e for e in root.iter() if e.tag.endswith("polyline")]
    assert len(poly[0].get("points").split()) == 2


def test_empty_series():
    _parse(plots.line_chart({"none": ([], [])}))


def test_run_and_overlay_plots():
    figs = plots.run_plots(RUN, "ipa")
    assert set(figs) == {"loss.svg", "delta.svg", "grad_norm.svg"}
    for svg in figs.values():
        _parse(svg)
    over = plots.overlay_plots({"a": RUN, "b": RUN})
    assert set(over) == {"loss_curves.svg", "delta_curves.svg"}


def test_sweep_plot():
    table = ("label,beta,status,final_param_dev,alignment,retention,hand_err\n"
             "beta=10,1.0e+01,ok,3.0,1,2,3\nbeta=100,1.0e+02,ok,2.0,1,2,3\n")
    svg = plots.sweep_plot(table, "beta")
    assert "log10 beta" in svg
    _parse(svg)


def test_read_csv_columns():
    cols = plots.read_csv_columns(RUN)
    assert cols["step"] == ["0", "1", "2"]
