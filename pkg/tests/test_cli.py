import csv
import json
import subprocess
import sys
import time

import numpy as np
import pytest

from ffvdfr.cli import main
from ffvdfr.dataio import InputError, load_dataset, load_fit, write_dataset
from ffvdfr.presmooth import VariableDomainDataset
from ffvdfr.quadrature import simpson_weights
from ffvdfr.vdfr import beta_surface

COEF = (1.0, 0.05, -0.02, 0.001)


def truth(t, T):
    c = COEF
    return c[0] + c[1] * t + c[2] * T + c[3] * t * T


def make_curve(rng):
    u, amp = rng.normal(), rng.normal(0, 1, (3, 2))

    def x(t):
        k = np.arange(1, 4)[:, None]
        arg = 2 * np.pi * k * np.asarray(t, float) / 50
        return u + (amp[:, :1] * np.sin(arg) + amp[:, 1:] * np.cos(arg)).sum(axis=0)

    return x


def write_fixture(path, n=20, noise=1e-3, seed=0, drop_subject=None, short=None):
    rng = np.random.default_rng(seed)
    domains = rng.integers(10, 41, n)
    domains[:2] = 10, 40
    curve_rows, subject_rows = [], []
    for i, T in enumerate(domains):
        x = make_curve(rng)
        s, w = simpson_weights(0.0, float(T), 4001)
        eta = w @ (x(s) * truth(s, T)) / T
        sid = f"s{i:02d}"
        pts = np.arange(0, T + 1) if sid != short else np.arange(0, 5)
        curve_rows += [(sid, float(t), float(x([t])[0])) for t in pts]
        if sid != drop_subject:
            subject_rows.append((sid, eta + rng.normal(0, noise) if noise else eta))
    curves, subjects = path / "curves.csv", path / "subjects.csv"
    with open(curves, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "t", "x"])
        w.writerows(curve_rows)
    with open(subjects, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "y"])
        w.writerows(subject_rows)
    return curves, subjects


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def fitted(tmp_path_factory):
    root = tmp_path_factory.mktemp("fit")
    curves, subjects = write_fixture(root)
    assert run("fit", "--curves", curves, "--subjects", subjects, "--out", root / "a") == 0
    return root, curves, subjects


def read_rows(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array(rows[1:], dtype=float)


def test_fit_recovers_bilinear_surface(fitted):
    root, _, _ = fitted
    header, rows = read_rows(root / "a" / "surface.csv")
    assert header == ["t", "T", "beta"]
    assert np.all(rows[:, 0] <= rows[:, 1] + 1e-12)
    assert np.max(np.abs(rows[:, 2] - truth(rows[:, 0], rows[:, 1]))) < 0.1
    summary = json.loads((root / "a" / "summary.json").read_text())
    assert summary["convergence"]["converged"]
    assert np.isfinite(summary["aic"])
    assert (root / "a" / "surface.png").stat().st_size > 0


def test_fit_rerun_is_byte_identical(fitted):
    root, curves, subjects = fitted
    assert run("fit", "--curves", curves, "--subjects", subjects, "--out", root / "b") == 0
    for name in ("fit.json", "surface.csv", "summary.json", "surface.png"):
        assert (root / "a" / name).read_bytes() == (root / "b" / name).read_bytes(), name


def test_missing_subject_is_named(tmp_path, capsys):
    curves, subjects = write_fixture(tmp_path, drop_subject="s07")
    code = run("fit", "--curves", curves, "--subjects", subjects, "--out", tmp_path / "o")
    assert code == 2
    assert "s07" in capsys.readouterr().err


def test_json_error_payload(tmp_path, capsys):
    curves, subjects = write_fixture(tmp_path, drop_subject="s03")
    code = run("fit", "--json", "--curves", curves, "--subjects", subjects, "--out", tmp_path / "o")
    assert code != 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["error"]["ids"] == ["s03"]
    assert payload["error"]["type"] == "InputError"


def test_short_subject_rejected_with_id(tmp_path, capsys):
    curves, subjects = write_fixture(tmp_path, short="s05")
    assert run("fit", "--json", "--curves", curves, "--subjects", subjects,
               "--out", tmp_path / "o") == 2
    assert json.loads(capsys.readouterr().out)["error"]["ids"] == ["s05"]
    assert run("fit", "--min-obs", "5", "--no-plot", "--curves", curves, "--subjects", subjects,
               "--out", tmp_path / "o") == 0


def test_schema_errors_name_column_and_row(tmp_path):
    bad = tmp_path / "c.csv"
    bad.write_text("subject_id,time,x\na,0,1\n")
    with pytest.raises(InputError, match="'t'"):
        load_dataset(bad, bad)
    bad.write_text("subject_id,t,x\na,0,1\na,1,oops\n")
    with pytest.raises(InputError, match="row 3") as info:
        load_dataset(bad, bad)
    assert info.value.details["column"] == "x"


def test_duplicate_time_rejected(tmp_path):
    bad = tmp_path / "c.csv"
    bad.write_text("subject_id,t,x\na,0,1\na,0,2\n")
    with pytest.raises(InputError, match="duplicate"):
        load_dataset(bad, bad)


def test_cv_perfect_fit(tmp_path, capsys):
    curves, subjects = write_fixture(tmp_path, n=30, noise=0.0, seed=1)
    assert run("cv", "--json", "--curves", curves, "--subjects", subjects,
               "--out", tmp_path / "cv") == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["mean_rmse"] < 0.05
    header, rows = read_rows(tmp_path / "cv" / "folds.csv")
    assert header == ["fold", "n_test", "rmse"] and rows.shape == (10, 3)


def test_cv_seed_changes_assignment_only(tmp_path):
    curves, subjects = write_fixture(tmp_path, n=30, noise=0.1, seed=2)
    for seed in (0, 1):
        assert run("cv", "--seed", seed, "--q", 8, "--r", 6, "--curves", curves,
                   "--subjects", subjects, "--out", tmp_path / f"cv{seed}") == 0
    a = (tmp_path / "cv0" / "assignment.csv").read_text().splitlines()
    b = (tmp_path / "cv1" / "assignment.csv").read_text().splitlines()
    assert a[0] == b[0] and len(a) == len(b) and a != b


def test_cv_needs_enough_subjects(tmp_path):
    curves, subjects = write_fixture(tmp_path, n=9)
    assert run("cv", "--curves", curves, "--subjects", subjects, "--out", tmp_path / "o") == 2


SMOKE = "n = 100\nfamily = gaussian\nbeta = 1\nreplicates = 1\nseed = 7  # smoke\n"


def test_simulate_smoke_and_determinism(tmp_path):
    cfg = tmp_path / "smoke.cfg"
    cfg.write_text(SMOKE)
    start = time.perf_counter()
    assert run("simulate", cfg, "--out", tmp_path / "a", "--timings") == 0
    assert time.perf_counter() - start < 60
    assert run("simulate", cfg, "--out", tmp_path / "b", "--no-plot") == 0
    assert (tmp_path / "a" / "replicates.csv").read_bytes() == \
        (tmp_path / "b" / "replicates.csv").read_bytes()
    a, b = (json.loads((tmp_path / d / "summary.json").read_text()) for d in "ab")
    assert a["scenarios"] == b["scenarios"]
    assert not (tmp_path / "b" / "timings.json").exists()
    header, = list(csv.reader(open(tmp_path / "a" / "replicates.csv")))[:1]
    assert "seed" in header
    assert (tmp_path / "a" / "rmse.png").exists() and (tmp_path / "a" / "timings.json").exists()


def test_simulate_unknown_key(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("n = 100\ncolour = blue\n")
    assert run("simulate", "--json", cfg, "--out", tmp_path / "o") == 2
    err = json.loads(capsys.readouterr().out)["error"]
    assert err["key"] == "colour" and "replicates" in err["accepted"]
    assert "colour" in err["message"]


def test_simulate_bad_grid(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(SMOKE)
    assert run("simulate", cfg, "--grid", "beta=9", "--out", tmp_path / "o") == 2
    assert run("simulate", cfg, "--grid", "nonsense", "--out", tmp_path / "o") == 2


def test_export_small_grid(fitted):
    root, _, _ = fitted
    out = root / "small.csv"
    assert run("export-surface", root / "a" / "fit.json", "--t-grid", "0,15",
               "--T-grid", "10,20", "--out", out) == 0
    header, rows = read_rows(out)
    assert len(rows) <= 4 and len(rows) == 3
    fit = load_fit(root / "a" / "fit.json").fit
    want = beta_surface(fit, np.array([0.0, 15.0]), np.array([10.0, 20.0]))
    for t, T, v in rows:
        i, j = [0.0, 15.0].index(t), [10.0, 20.0].index(T)
        assert abs(v - want[j, i]) < 1e-12


def test_export_round_trips_extrema(fitted, capsys):
    root, _, _ = fitted
    assert run("export-surface", "--json", root / "a" / "fit.json", "--out", root / "full.csv",
               "--plot", root / "full.png") == 0
    exported = json.loads(capsys.readouterr().out)["surface"]
    stored = json.loads((root / "a" / "summary.json").read_text())["surface"]
    assert exported == stored
    assert (root / "full.csv").read_bytes() == (root / "a" / "surface.csv").read_bytes()


@pytest.mark.parametrize("text", ["{not json", '{"format": "other"}',
                                  '{"format": "ffvdfr-fit", "version": 99}',
                                  '{"format": "ffvdfr-fit", "version": 1}'])
def test_corrupt_archive(tmp_path, text):
    bad = tmp_path / "bad.json"
    bad.write_text(text)
    assert run("export-surface", bad, "--out", tmp_path / "x.csv") == 2


def test_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    data = VariableDomainDataset(
        points=[np.sort(rng.uniform(0, 30, 12)) for _ in range(4)],
        values=[rng.normal(size=12) for _ in range(4)],
        y=rng.poisson(3, 4).astype(float),
        covariates=rng.normal(size=(4, 2)),
        ids=["a", "b", "c,d", "e"],
        covariate_names=["age", "bmi"],
    )
    write_dataset(data, tmp_path / "c.csv", tmp_path / "s.csv")
    back = load_dataset(tmp_path / "c.csv", tmp_path / "s.csv")
    assert back.ids == data.ids and back.covariate_names == data.covariate_names
    for a, b in zip(back.points, data.points):
        assert np.array_equal(a, b)
    for a, b in zip(back.values, data.values):
        assert np.array_equal(a, b)
    assert np.array_equal(back.y, data.y) and np.array_equal(back.covariates, data.covariates)


def test_impute_fills_gaps(tmp_path):
    rows = "\n".join(f"a,{t},{'' if t in (0, 4, 11) else 2 * t}" for t in range(12))
    (tmp_path / "c.csv").write_text("subject_id,t,x\n" + rows + "\n")
    (tmp_path / "s.csv").write_text("subject_id,y\na,1\n")
    with pytest.raises(InputError, match="missing value"):
        load_dataset(tmp_path / "c.csv", tmp_path / "s.csv")
    data = load_dataset(tmp_path / "c.csv", tmp_path / "s.csv", impute=True)
    want = 2.0 * np.arange(12)
    want[0], want[11] = 2.0, 20.0
    np.testing.assert_array_equal(data.values[0], want)


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "ffvdfr", "--help"], capture_output=True,
                          text=True, check=False)
    assert proc.returncode == 0 and "export-surface" in proc.stdout
