import re

from namid.evaluation import EvalReport, EvalRow, PoCCurves, SeparationRow
from namid.plots import emit_plots, line_chart_svg, poc_svg, separation_svg


def row(defense, attack, acc):
    return EvalRow(defense, attack, "linf", 0.1, 10, 95.0, acc, 0)


def bars(svg):
    return re.findall(r'<rect x="[^"]+" y="[^"]+" width="[^"]+" height="[^"]+" fill="#', svg)


def test_single_row_gives_one_bar(tmp_path):
    (path,) = emit_plots(EvalReport([row("at", "PGD-10", 50.0)]), str(tmp_path))
    svg = open(path, encoding="utf-8").read()
    legend = 1  # one legend swatch per series
    assert len(bars(svg)) == 1 + legend
    assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")


def test_identical_reports_give_identical_bytes(tmp_path):
    report = EvalReport([row("at", "FGSM", 60.0), row("namid", "FGSM", 61.5), row("at", "PGD-40", 40.0)])
    a = emit_plots(report, str(tmp_path / "a"))[0]
    b = emit_plots(report, str(tmp_path / "b"))[0]
    assert open(a, "rb").read() == open(b, "rb").read()


def test_empty_report_is_noop(tmp_path, caplog):
    assert emit_plots(EvalReport(), str(tmp_path / "x")) == []
    assert not (tmp_path / "x").exists()
    assert "empty report" in caplog.text


def test_poc_chart_has_three_curves_and_band_between_two_and_three():
    curves = PoCCurves([1, 5, 10], 0.3, [80.0, 60.0, 50.0], [1.0, 1.0, 1.0], [0.8, 0.7, 0.6], [0.5, 0.3, 0.2])
    svg = poc_svg(curves)
    assert svg.count('class="curve"') == 3
    assert svg.count('class="band"') == 1
    lines = re.findall(r'class="curve"[^>]*points="([^"]+)"', svg)
    band = re.search(r'class="band"[^>]*points="([^"]+)"', svg).group(1).split()
    second, third = lines[1].split(), lines[2].split()
    assert band == second + third[::-1]
    assert svg.index('class="band"') < svg.index('class="curve"')  # band drawn underneath


def test_line_chart_without_band():
    svg = line_chart_svg([0, 1], {"a": [0.0, 1.0]})
    assert 'class="band"' not in svg and svg.count('class="curve"') == 1


def test_separation_chart_groups():
    rows = [SeparationRow(m, e, i, 0.0, v, 0.1) for m in ("eq4", "eq5") for e in ("natural", "adversarial")
            for i, v in (("natural", 0.3), ("adversarial", 0.1))]
    svg = separation_svg(rows)
    assert len(bars(svg)) == 8 + 2
    for label in ("eq4/natural", "eq5/adversarial"):
        assert label in svg
