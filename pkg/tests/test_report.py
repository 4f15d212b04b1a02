import numpy as np
import pytest

from solar import report as rpt
from solar.pipeline import FrameReport


def reports(psnr, ema=None):
    ema = np.zeros(len(psnr)) if ema is None else ema
    return [FrameReport(t, float(p), 0.9, 100 + t, float(e), t % 2, 10) for t, (p, e) in enumerate(zip(psnr, ema))]


def table(psnr, ema=None, cfg=None, src="run.csv"):
    return rpt.parse_frames_csv(rpt.frames_csv(reports(psnr, ema), cfg or {"seed": 0}), src)


def test_csv_roundtrip():
    reps = reports([30.5, 31.25, 29.0], [0.0, 0.01, 0.02])
    t = rpt.parse_frames_csv(rpt.frames_csv(reps, {"seed": 3, "gop_size": 0}))
    assert t.config == {"seed": 3, "gop_size": 0}
    np.testing.assert_array_equal(t.columns["psnr_db"], [30.5, 31.25, 29.0])
    np.testing.assert_array_equal(t.columns["recal"], [0, 1, 0])
    assert t.n_frames == 3


def test_unknown_schema_rejected():
    text = rpt.frames_csv(reports([1.0, 2.0]), {}).replace("solar-frames/1", "solar-frames/9")
    with pytest.raises(rpt.SchemaError, match="solar-frames/9"):
        rpt.parse_frames_csv(text)
    with pytest.raises(rpt.SchemaError):
        rpt.parse_frames_csv("frame,psnr_db\n0,1\n")
    bad_cols = rpt.frames_csv(reports([1.0]), {}).replace("grad_ema", "gema")
    with pytest.raises(rpt.SchemaError):
        rpt.parse_frames_csv(bad_cols)


def test_pearson_closed_forms(rng):
    x = rng.normal(size=50)
    assert abs(rpt.pearson(x, -x) + 1) < 1e-12
    assert abs(rpt.pearson(x, 3 * x + 2) - 1) < 1e-12
    y = rng.normal(size=50)
    assert abs(rpt.pearson(x, y) - np.corrcoef(x, y)[0, 1]) < 1e-12
    with pytest.raises(ValueError):
        rpt.pearson([1.0], [2.0])


def test_correlation_uses_p_frames_only():
    psnr = np.array([99.0, 30, 29, 28, 27])
    ema = np.array([0.0, 1, 2, 3, 4])
    out = rpt.report("correlation", [table(psnr, ema)])
    assert out.startswith("# schema=solar-correlation/1\n")
    r = float(out.strip().splitlines()[-1].split(",")[-1])
    assert abs(r + 1) < 1e-12
    gop = table(np.array([99.0, 30, 29, 99, 27, 26]), np.array([0.0, 1, 2, 0, 4, 5]), {"gop_size": 3})
    np.testing.assert_array_equal(gop.p_frames(), [False, True, True, False, True, True])


def test_stability_identical_runs():
    a = table([30.0, 31, 32])
    s = rpt.stability(np.stack([a.columns["psnr_db"]] * 2))
    assert s.sigma_run == 0
    assert s.mu_seq == 31.0


def test_stability_matches_hand_computation(rng):
    p = rng.normal(30, 1, (5, 12))
    s = rpt.stability(p)
    mu = np.mean([np.mean(r) for r in p])
    sig_run = np.mean([np.std(p[:, t], ddof=1) for t in range(12)])
    sig_temp = np.mean([np.std(r, ddof=1) for r in p])
    assert abs(s.mu_seq - mu) < 1e-12 and abs(s.sigma_run - sig_run) < 1e-12
    assert abs(s.sigma_temp - sig_temp) < 1e-12
    with pytest.raises(ValueError):
        rpt.stability(p[:1])


def test_report_modes(rng):
    runs = [table(rng.normal(30, 1, 6), rng.uniform(size=6), src=f"r{i}.csv") for i in range(3)]
    drift = rpt.report("drift", runs).splitlines()
    assert drift[0] == "# schema=solar-drift/1" and drift[1] == "frame,run0,run1,run2,mean"
    assert len(drift) == 2 + 6
    rd = rpt.report("rd", runs).splitlines()
    assert rd[1] == "run,source,bytes_per_frame,total_bytes,psnr_db" and rd[2].split(",")[1] == "r0.csv"
    st = rpt.report("stability", runs).splitlines()
    assert st[0] == "# schema=solar-stability/1"
    with pytest.raises(ValueError):
        rpt.report("stability", runs[:1])
    with pytest.raises(ValueError):
        rpt.report("bogus", runs)
    with pytest.raises(rpt.SchemaError):
        rpt.report("drift", [runs[0], table([1.0, 2.0])])
