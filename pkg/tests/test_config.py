import pytest

from motionpet.errors import ConfigError
from motionpet.exper.config import (ExperimentConfig, dump_config, load_config, parse_config_text, smoke_config)


def test_defaults():
    cfg = ExperimentConfig()
    assert cfg.experiment.depths == (1, 2, 3, 4)
    assert cfg.cohort.motion_mean_mm == 7.0
    assert cfg.recon.iterations == 2 and cfg.recon.subsets == 30
    assert cfg.classify.C == 1.0 and cfg.classify.tol == 1e-6
    assert cfg.experiment.train_on == "mc"


def test_round_trip():
    cfg = ExperimentConfig().with_section("phantom", ad_reduction=0.3).with_section("recon", dims=(32, 32, 32))
    back = parse_config_text(dump_config(cfg))
    assert back == cfg
    assert back.config_hash() == cfg.config_hash()


def test_partial_file_overrides(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[simulate]\nevents = 5e4  # short\n[experiment]\ndepths = 2, 4\n[phantom]\npreset = diffuse\n")
    cfg = load_config(p)
    assert cfg.simulate.events == 50_000
    assert cfg.experiment.depths == (2, 4)
    assert cfg.phantom.params().ad_reduction == 0.12
    assert cfg.recon == ExperimentConfig().recon


@pytest.mark.parametrize("text", [
    "[recon]\nbogus = 1\n",
    "[nosuch]\nx = 1\n",
    "[simulate]\nevents = many\n",
    "[experiment]\ndepths = 5\n",
    "[experiment]\ndepths =\n",
    "[experiment]\nworkers = 0\n",
    "[experiment]\ntrain_on = both\n",
    "[phantom]\npreset = nope\n",
    "[features]\nprefilter_fwhm_mm = -1\n",
    "[cohort]\ntest_ad = -2\n",
    "[recon]\nsubsets = 0\n",
    "not an ini file",
])
def test_rejects_bad_config(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


def test_missing_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/config.ini")


def test_hash_ignores_location_and_workers():
    a = ExperimentConfig()
    b = a.with_section("experiment", output_dir="elsewhere", workers=4)
    c = a.with_section("experiment", master_seed=1)
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != c.config_hash()


def test_smoke_shape():
    s = smoke_config()
    counts = {(split, label): n for split, label, n in s.cohort.counts()}
    assert counts[("train", "CN")] == counts[("train", "AD")] == 6
    assert counts[("test", "CN")] == counts[("test", "AD")] == 4
    assert s.recon.dims == (32, 32, 32) and s.simulate.events == 20_000
