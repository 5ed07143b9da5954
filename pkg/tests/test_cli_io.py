import os
import struct
import subprocess
import sys
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from clipica.cli import EXIT_CODES, main
from clipica.config import ConfigError, RunConfig, parse_config, sigma_schedule
from clipica.fileio import (
    MAGIC,
    MatrixFileError,
    read_matrix,
    sha256_file,
    write_manifest,
    write_matrix,
)
from clipica.heatmap import NAN_COLOR, diverging_color, heatmap_svg

SVG_NS = "{http://www.w3.org/2000/svg}"

FAST_CONFIG = """\
# small run for tests
model_order = 4
sigma_schedule = 0.9
epochs = 40
batch_size = 256
learning_rate = 0.05
align_epochs = 5
seed = 3
n_runs = 3
"""


# matrix files ----------------------------------------------------------------------

def test_round_trip_is_bit_exact(tmp_path, rng):
    m = rng.standard_normal((7, 13)) * 10.0 ** rng.integers(-300, 300, (7, 13))
    write_matrix(tmp_path / "m.clp", m)
    back = read_matrix(tmp_path / "m.clp")
    assert back.dtype == np.float64 and back.shape == (7, 13)
    assert back.tobytes() == m.tobytes()


def test_binary_layout(tmp_path):
    write_matrix(tmp_path / "m.clp", np.array([[1.0, 2.0, 3.0]]))
    raw = (tmp_path / "m.clp").read_bytes()
    assert len(raw) == 16 + 4 + 8 * 3
    assert raw[:4] == MAGIC
    assert struct.unpack("<QQ", raw[4:20]) == (1, 3)
    assert struct.unpack("<3d", raw[20:]) == (1.0, 2.0, 3.0)


def test_vector_written_as_single_row(tmp_path):
    write_matrix(tmp_path / "v.clp", np.arange(4.0))
    assert read_matrix(tmp_path / "v.clp").shape == (1, 4)


def test_truncated_file_names_byte_counts(tmp_path, rng):
    p = tmp_path / "m.clp"
    write_matrix(p, rng.standard_normal((3, 4)))
    p.write_bytes(p.read_bytes()[:-5])
    with pytest.raises(MatrixFileError, match="expected 116 bytes, got 111"):
        read_matrix(p)


def test_truncated_header(tmp_path):
    p = tmp_path / "m.clp"
    p.write_bytes(b"CLP1\x01")
    with pytest.raises(MatrixFileError, match="truncated header"):
        read_matrix(p)


def test_bad_magic(tmp_path):
    p = tmp_path / "m.clp"
    p.write_bytes(b"NOPE" + bytes(16))
    with pytest.raises(MatrixFileError, match="bad magic"):
        read_matrix(p)


def test_non_finite_rejected_with_position(tmp_path):
    m = np.zeros((3, 3))
    m[2, 1] = np.nan
    with pytest.raises(MatrixFileError, match="row 2, col 1"):
        write_matrix(tmp_path / "m.clp", m)
    raw = struct.pack("<4sQQ", MAGIC, 1, 2) + struct.pack("<2d", 1.0, np.inf)
    (tmp_path / "bad.clp").write_bytes(raw)
    with pytest.raises(MatrixFileError, match="row 0, col 1"):
        read_matrix(tmp_path / "bad.clp")


def test_csv_fallback(tmp_path):
    (tmp_path / "m.csv").write_text("1,2\n3,4")
    assert read_matrix(tmp_path / "m.csv").tolist() == [[1.0, 2.0], [3.0, 4.0]]


def test_csv_round_trip_exact(tmp_path, rng):
    m = rng.standard_normal((4, 5))
    write_matrix(tmp_path / "m.csv", m)
    assert np.array_equal(read_matrix(tmp_path / "m.csv"), m)


def test_csv_errors(tmp_path):
    (tmp_path / "ragged.csv").write_text("1,2\n3\n")
    with pytest.raises(MatrixFileError, match="ragged"):
        read_matrix(tmp_path / "ragged.csv")
    (tmp_path / "word.csv").write_text("1,2\n3,x\n")
    with pytest.raises(MatrixFileError, match=":2:"):
        read_matrix(tmp_path / "word.csv")


def test_atomic_write_leaves_no_temp_files(tmp_path, rng):
    for _ in range(3):
        write_matrix(tmp_path / "m.clp", rng.standard_normal((2, 2)))
    assert os.listdir(tmp_path) == ["m.clp"]


def test_manifest_is_location_independent(tmp_path):
    for d in ("a", "b"):
        (tmp_path / d).mkdir()
        (tmp_path / d / "in.csv").write_text("1,2\n")
    ma = write_manifest(tmp_path / "a", "fit", [tmp_path / "a" / "in.csv"], "seed = 1\n", 1)
    mb = write_manifest(tmp_path / "b", "fit", [tmp_path / "b" / "in.csv"], "seed = 1\n", 1)
    assert ma.read_bytes() == mb.read_bytes()
    text = ma.read_text()
    assert f"input = in.csv sha256:{sha256_file(tmp_path / 'a' / 'in.csv')}" in text
    assert "config_sha256 = " in text and "seed = 1" in text and "numpy_version" in text


# config ---------------------------------------------------------------------------

def test_linspace_schedule_75():
    s = sigma_schedule("linspace", 0.95, 0.5, 75)
    assert s.size == 75 and s[0] == 0.95 and s[-1] == pytest.approx(0.5, abs=1e-15)
    assert np.allclose(np.diff(s), -0.45 / 74, atol=1e-15)
    assert -0.45 / 74 == pytest.approx(-0.006081, abs=1e-6)
    assert np.all(np.diff(s) <= 0)


def test_flat_and_single_schedules():
    assert sigma_schedule("linspace", 0.9, 0.9, 4).tolist() == [0.9] * 4
    assert sigma_schedule("linspace", 0.95, 0.5, 1).tolist() == [0.95]
    with pytest.raises(ValueError):
        sigma_schedule("geometric", 0.9, 0.5, 3)


def test_parse_config_values_and_comments():
    cfg = parse_config("model_order = 3  # c\n\nsigma_schedule = linspace:0.95,0.5\nseed=9\n")
    assert cfg.model_order == 3 and cfg.seed == 9
    assert cfg.sigma().tolist() == pytest.approx([0.95, 0.725, 0.5])
    assert parse_config("").epochs == RunConfig().epochs


def test_parse_config_sigma_list():
    cfg = parse_config("model_order = 2\nsigma_schedule = 0.9, 0.1\n")
    assert cfg.sigma().tolist() == [0.9, 0.1]


@pytest.mark.parametrize("text, fragment", [
    ("seed = 1\nbogus = 2\n", "line 2: unknown key 'bogus'"),
    ("epochs = ten\n", "line 1: bad value"),
    ("\n\nmodel_order 4\n", "line 3: expected 'key = value'"),
    ("model_order = 3\nsigma_schedule = 0.9, 0.5\n", "2 values"),
    ("sigma_schedule = 1.0\n", "|sigma| < 1"),
    ("ttest_variant = student\n", "ttest_variant"),
    ("fnc_order = random\n", "fnc_order"),
])
def test_parse_config_errors(text, fragment):
    with pytest.raises(ConfigError, match=fragment.replace("|", r"\|")):
        parse_config(text)


# heatmap ----------------------------------------------------------------------------

def _cells(svg):
    root = ET.fromstring(svg.split("\n", 1)[1])
    group = [g for g in root.iter(f"{SVG_NS}g") if g.get("class") == "cells"][0]
    return root, group.findall(f"{SVG_NS}rect")


def test_heatmap_identity_is_well_formed():
    svg = heatmap_svg([[1.0, 0.0], [0.0, 1.0]])
    root, cells = _cells(svg)
    assert root.tag == f"{SVG_NS}svg" and root.get("version") == "1.1"
    assert len(cells) == 4
    bars = [g for g in root.iter(f"{SVG_NS}g") if g.get("class") == "colorbar"]
    assert len(bars) == 1 and len(bars[0].findall(f"{SVG_NS}rect")) > 0
    assert cells[0].get("fill") == diverging_color(1.0, 1.0)
    assert cells[1].get("fill") == "#f7f7f7"


def test_heatmap_fixed_range_in_metadata():
    svg = heatmap_svg(np.zeros((3, 3)), color_range=0.5)
    root, _ = _cells(svg)
    assert "color_range=0.5 mode=fixed" in root.find(f"{SVG_NS}metadata").text


def test_heatmap_nan_cell_gray_and_warned(caplog):
    svg = heatmap_svg([[0.2, np.nan], [0.1, -0.3]])
    _, cells = _cells(svg)
    assert cells[1].get("fill") == NAN_COLOR
    assert "1 non-finite" in caplog.text and "nan_cells=1" in svg


def test_diverging_color_symmetry():
    assert diverging_color(0.0, 1.0) == "#f7f7f7"
    assert diverging_color(1.0, 1.0) == "#b2182b"
    assert diverging_color(-1.0, 1.0) == "#2166ac"
    assert diverging_color(5.0, 1.0) == diverging_color(1.0, 1.0)


# CLI --------------------------------------------------------------------------------

def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    return code, capsys.readouterr().err


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--seed", "7", "--grid", "24", "--out", str(d)]) == 0
    return d


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text(FAST_CONFIG)
    return p


def test_simulate_outputs(sim_dir):
    for name in ("s1", "s2", "a1", "a2", "x1", "x2"):
        assert (sim_dir / f"{name}.clp").exists()
    assert read_matrix(sim_dir / "x1.clp").shape == (300, 576)
    assert read_matrix(sim_dir / "x2.clp").shape == (10, 576)
    text = (sim_dir / "manifest.txt").read_text()
    assert "command = simulate" in text and "seed = 7" in text and "achieved_corr" in text


def test_fit_smoke(sim_dir, cfg_path, tmp_path, capsys):
    out = tmp_path / "r"
    code, err = _run(capsys, "fit", "--config", cfg_path, "--x1", sim_dir / "x1.clp",
                     "--x2", sim_dir / "x2.clp", "--out", out)
    assert code == 0, err
    for name in ("w1.clp", "w2.clp", "y1.clp", "y2.clp", "pair_corr.csv", "nll_trace.csv"):
        assert (out / name).exists()
    assert read_matrix(out / "w1.clp").shape == (4, 4)
    lines = (out / "pair_corr.csv").read_text().splitlines()
    assert lines[0] == "component,pair_corr" and len(lines) == 5
    manifest = (out / "manifest.txt").read_text()
    assert "input = x1.clp sha256:" in manifest and "input = c.cfg sha256:" in manifest


def test_stability_smoke(sim_dir, cfg_path, tmp_path, capsys):
    out = tmp_path / "s"
    code, err = _run(capsys, "stability", "--config", cfg_path, "--x1", sim_dir / "x1.clp",
                     "--x2", sim_dir / "x2.clp", "--out", out, "--n-runs", 2)
    assert code == 0, err
    report = (out / "stability.txt").read_text()
    assert report.startswith("runs = 2\nselected_run = ")
    y1 = read_matrix(out / "y1.clp")
    from clipica.numcore import skewness
    assert all(skewness(r) >= 0 for r in y1)


def test_two_stage_pca_option(tmp_path, cfg_path, capsys, rng):
    subjects = []
    for k in range(3):
        p = tmp_path / f"sub{k}.clp"
        write_matrix(p, rng.standard_normal((20, 4)) @ rng.laplace(size=(4, 300)))
        subjects.append(p)
    x2 = tmp_path / "x2.clp"
    write_matrix(x2, rng.standard_normal((6, 4)) @ rng.laplace(size=(4, 300)))
    code, err = _run(capsys, "fit", "--config", cfg_path, "--x1", *subjects, "--x2", x2,
                     "--subject-pca", 5, "--group-pca", 4, "--out", tmp_path / "o")
    assert code == 0, err


def test_backrecon_fnc_snc_stats_heatmap(tmp_path, capsys, rng):
    maps = rng.laplace(size=(3, 400))
    write_matrix(tmp_path / "maps.clp", maps)
    subj = []
    for k in range(4):
        p = tmp_path / f"subj{k}.clp"
        write_matrix(p, rng.standard_normal((128, 3)) @ maps + 0.1 * rng.standard_normal((128, 400)))
        subj.append(p)
    out = tmp_path / "out"
    assert _run(capsys, "backrecon", "--maps", tmp_path / "maps.clp", "--data", *subj,
                "--out", out)[0] == 0
    tcs = sorted(out.glob("tc_*.clp"))
    assert len(tcs) == 4 and read_matrix(tcs[0]).shape == (128, 3)

    assert _run(capsys, "fnc", "--tc", *tcs, "--tr", 2.0, "--out", out)[0] == 0
    vec = read_matrix(out / "fnc_vectors.clp")
    assert vec.shape == (4, 3)
    m = read_matrix(out / "fnc_mean.clp")
    assert np.allclose(m, m.T) and np.allclose(np.diag(m), 1)

    write_matrix(tmp_path / "load.clp", rng.standard_normal((30, 3)))
    assert _run(capsys, "snc", "--loadings", tmp_path / "load.clp", "--out", out)[0] == 0
    assert (out / "snc.csv").read_text().splitlines()[0] == "component_i,component_j,r,p,significant"

    assert _run(capsys, "heatmap", "--matrix", out / "fnc_mean.clp", "--range", "1",
                "--out", out / "fnc.svg")[0] == 0
    assert "mode=fixed" in (out / "fnc.svg").read_text()


def test_stats_on_null_groups(tmp_path, capsys):
    rng = np.random.default_rng(17)
    write_matrix(tmp_path / "a.clp", rng.standard_normal((25, 10)))
    write_matrix(tmp_path / "b.clp", rng.standard_normal((25, 10)))
    code, err = _run(capsys, "stats", "--a", tmp_path / "a.clp", "--b", tmp_path / "b.clp",
                     "--out", tmp_path / "o")
    assert code == 0, err
    rows = (tmp_path / "o" / "stats.csv").read_text().splitlines()
    assert rows[0] == "component_i,component_j,t,p,significant,signed_log_p"
    assert len(rows) == 11
    # ten upper-triangle entries belong to a 5 x 5 matrix
    assert rows[1].startswith("0,1,") and rows[-1].startswith("3,4,")
    assert all(r.split(",")[4] == "0" for r in rows[1:])


def test_stats_detects_shifted_group(tmp_path, capsys):
    rng = np.random.default_rng(18)
    a = rng.standard_normal((25, 6))
    b = rng.standard_normal((25, 6))
    b[:, 0] += 3
    write_matrix(tmp_path / "a.clp", a)
    write_matrix(tmp_path / "b.clp", b)
    assert _run(capsys, "stats", "--a", tmp_path / "a.clp", "--b", tmp_path / "b.clp",
                "--kind", "features", "--out", tmp_path / "o")[0] == 0
    rows = [r.split(",") for r in (tmp_path / "o" / "stats.csv").read_text().splitlines()[1:]]
    # group a sits lower, so t < 0 and the display value is negative
    assert rows[0][4] == "1" and float(rows[0][5]) < -2


def test_unknown_subcommand_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == EXIT_CODES["usage"] == 2
    assert "usage" in capsys.readouterr().err


def test_missing_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["fit", "--x1", "a.clp"])
    assert exc.value.code == 2


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "clipica", "nope"], capture_output=True, text=True)
    assert res.returncode == 2 and "usage" in res.stderr


def test_missing_input_exit_code(tmp_path, cfg_path, capsys):
    code, err = _run(capsys, "fit", "--config", cfg_path, "--x1", tmp_path / "none.clp",
                     "--x2", tmp_path / "none.clp", "--out", tmp_path / "o")
    assert code == EXIT_CODES["unreadable_input"]
    assert err.startswith("clipica: error[unreadable_input]:") and err.count("\n") == 1


def test_invalid_input_exit_code(tmp_path, capsys):
    (tmp_path / "bad.clp").write_bytes(b"XXXX" + bytes(16))
    code, err = _run(capsys, "heatmap", "--matrix", tmp_path / "bad.clp", "--out", tmp_path / "h.svg")
    assert code == EXIT_CODES["invalid_input"] and "bad magic" in err


def test_bad_config_exit_code(tmp_path, sim_dir, capsys):
    p = tmp_path / "c.cfg"
    p.write_text("seed = 1\nwhat = 2\n")
    code, err = _run(capsys, "fit", "--config", p, "--x1", sim_dir / "x1.clp",
                     "--x2", sim_dir / "x2.clp", "--out", tmp_path / "o")
    assert code == EXIT_CODES["invalid_input"] and "line 2" in err


def test_shape_mismatch_exit_code(tmp_path, cfg_path, capsys, rng):
    write_matrix(tmp_path / "x1.clp", rng.standard_normal((10, 50)))
    write_matrix(tmp_path / "x2.clp", rng.standard_normal((10, 60)))
    code, err = _run(capsys, "fit", "--config", cfg_path, "--x1", tmp_path / "x1.clp",
                     "--x2", tmp_path / "x2.clp", "--out", tmp_path / "o")
    assert code == EXIT_CODES["shape_mismatch"] and "voxel counts differ" in err


def test_numerical_failure_exit_code(tmp_path, capsys, rng):
    maps = rng.standard_normal((2, 30))
    maps[1] = 2 * maps[0]
    write_matrix(tmp_path / "maps.clp", maps)
    write_matrix(tmp_path / "d.clp", rng.standard_normal((5, 30)))
    code, err = _run(capsys, "backrecon", "--maps", tmp_path / "maps.clp",
                     "--data", tmp_path / "d.clp", "--out", tmp_path / "o")
    assert code == EXIT_CODES["numerical_failure"] and "rank deficient" in err


def test_divergence_exit_code(tmp_path, sim_dir, capsys):
    p = tmp_path / "c.cfg"
    p.write_text(FAST_CONFIG + "learning_rate = 1e200\n")
    code, err = _run(capsys, "fit", "--config", p, "--x1", sim_dir / "x1.clp",
                     "--x2", sim_dir / "x2.clp", "--out", tmp_path / "o")
    assert code == EXIT_CODES["numerical_failure"] and "learning_rate" in err
