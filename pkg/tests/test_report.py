import os

import pytest

from trap import report
from trap.report import ReportBundle


def _bundle():
    asr = [dict(source="a", target=t, preset=p, epsilon_255=16, T=10, t1=10, mu=1.0, p=0.0, beta=0.8, gamma=0.8,
                seed=1, asr=0.5, asr_benign_subtracted=0.25) for p in ("mi_fgsm", "ila") for t in ("a", "b")]
    destruction = [dict(preset=p, corruption=c, level=l, rate=None if l == 0.2 else 0.1, count=0 if l == 0.2 else 7)
                   for p in ("mi_fgsm", "ila") for c in ("gaussian_noise", "gaussian_blur") for l in (0.1, 0.2)]
    rfd = [dict(layer_id=l, method=m, value=0.1) for m in ("mi_fgsm", "ila") for l in ("input", "relu2")]
    traces = {"mi_fgsm": [dict(step=i, phase="baseline", mean_loss=1.0 + i, transform_rate=0.0) for i in range(3)]}
    return ReportBundle(asr, destruction, rfd, traces)


def test_headers_exact(tmp_path):
    report.emit_report(_bundle(), tmp_path)
    first = lambda name: (tmp_path / name).read_bytes().split(b"\n")[0]
    assert first("asr.csv") == b"source,target,preset,epsilon_255,T,t1,mu,p,beta,gamma,seed,asr,asr_benign_subtracted"
    assert first("destruction.csv") == b"preset,corruption,level,rate,count"
    assert first("rfd.csv") == b"layer_id,method,value"
    assert first("mi_fgsm/trace.csv") == b"step,phase,mean_loss,transform_rate"


def test_lf_line_endings(tmp_path):
    report.emit_report(_bundle(), tmp_path)
    raw = (tmp_path / "asr.csv").read_bytes()
    assert b"\r" not in raw and raw.endswith(b"\n") and raw.count(b"\n") == 5


def test_absent_rate_is_na(tmp_path):
    report.emit_report(_bundle(), tmp_path)
    rows = report.read_csv(tmp_path / "destruction.csv")
    assert [r["rate"] for r in rows if r["level"] == "0.2"] == ["NA"] * 4
    assert rows[0]["rate"] == "0.1" and rows[0]["count"] == "7"


def test_plot_count_matches_curve_groups(tmp_path):
    bundle = _bundle()
    written = report.emit_report(bundle, tmp_path, emit_plots=True)
    svgs = sorted(p.name for p in written if p.suffix == ".svg")
    groups = report.curve_groups(bundle)
    # asr per source, destruction per corruption, one rfd, one per trace
    assert len(groups) == 1 + 2 + 1 + 1
    assert len(svgs) == len(groups) == len(list((tmp_path / "plots").iterdir()))
    assert (tmp_path / "plots" / "rfd.svg").read_bytes().startswith(b"<?xml")


def test_no_plots_when_flag_off(tmp_path):
    report.emit_report(_bundle(), tmp_path, emit_plots=False)
    assert not (tmp_path / "plots").exists()


def test_svg_is_byte_stable(tmp_path):
    report.emit_report(_bundle(), tmp_path / "a", emit_plots=True)
    report.emit_report(_bundle(), tmp_path / "b", emit_plots=True)
    for name in os.listdir(tmp_path / "a" / "plots"):
        assert (tmp_path / "a" / "plots" / name).read_bytes() == (tmp_path / "b" / "plots" / name).read_bytes()


@pytest.mark.skipif(os.geteuid() == 0, reason="root ignores directory permissions")
def test_unwritable_directory_rejected(tmp_path):
    locked = tmp_path / "locked"
    locked.mkdir()
    locked.chmod(0o500)
    try:
        with pytest.raises(report.ReportError):
            report.emit_report(_bundle(), locked / "sub")
    finally:
        locked.chmod(0o700)


def test_output_path_under_a_file_rejected(tmp_path):
    (tmp_path / "file").write_text("x")
    with pytest.raises(report.ReportError):
        report.emit_report(_bundle(), tmp_path / "file" / "sub")


def test_row_width_checked():
    with pytest.raises(ValueError):
        report.csv_text(("a", "b"), [(1,)])
