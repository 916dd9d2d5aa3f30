import pathlib

import pytest

import popk

DATA = pathlib.Path(__file__).resolve().parents[2] / "data" / "levobupivacaine_synthetic.csv"


def test_version():
    assert popk.__version__ == "0.1.0"


def test_typical_subject_exposures():
    e = popk.exposure_metrics(cl=0.15, v=14.0, ka=0.18, dose=6.0)
    assert e["auc"] == pytest.approx(40.0, rel=1e-9)
    assert e["tmax"] == pytest.approx(17.0, rel=0.05)
    assert e["cu_max"] == pytest.approx(10.0 * e["cmax"], rel=1e-12)


def test_unbound_concentration():
    assert popk.unbound_concentration(0.315, 0.01) == pytest.approx(3.15, abs=1e-12)


def test_fisher_exact_one_sided():
    r = popk.fisher_exact(11, 1, 16, 12, alternative="greater")
    assert round(r["p_value"], 2) == 0.03
    with pytest.raises(ValueError):
        popk.fisher_exact(1, 1, 1, 1, alternative="sideways")


def test_rank_sum_exact():
    r = popk.rank_sum_test([1.0, 2.0, 3.0], [4.0, 5.0, 6.0])
    assert r["exact"]
    assert r["p_value"] == pytest.approx(0.1, abs=1e-12)


def test_simulate_and_fit():
    csv = popk.simulate_dataset(DATA.read_text(), n_subjects=40, seed=11)
    assert csv == popk.simulate_dataset(DATA.read_text(), n_subjects=40, seed=11)
    assert csv.splitlines()[0].startswith("ID")
    res = popk.fit(csv)
    assert res["n_subjects"] == 40
    assert res["converged"], res["message"]
    assert 0.1 < res["estimates"]["CL"] < 0.25


def test_bad_dataset_raises():
    with pytest.raises(ValueError):
        popk.fit("not,a,dataset\n1,2,3\n")


def test_cli_usage_error():
    status, out, err = popk.run(["fit"])
    assert status == 2
    assert err
