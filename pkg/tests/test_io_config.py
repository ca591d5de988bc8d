import pytest

from labelfuse.errors import InvalidInputError, ParseError
from labelfuse.io.config import RunConfig, format_run_config, load_run_config, parse_run_config


def test_defaults_and_derived_values():
    cfg = parse_run_config("# nothing set\n")
    assert cfg.stride == 1 and cfg.fragment_size == 50 and cfg.voxel_size == 0.008
    assert cfg.truncation == pytest.approx(0.032) and cfg.voxel_down == pytest.approx(0.016)
    assert cfg.normal_radius == pytest.approx(0.032) and cfg.feature_radius == pytest.approx(0.08)
    assert (cfg.min_views, cfg.depth_tolerance, cfg.normal_tolerance, cfg.reprojection_tolerance) == (2, 0.01, 25.0, 1.0)
    assert cfg.fitness_floor == 0.1 and cfg.block_edge == 16


def test_values_and_comments():
    cfg = parse_run_config("stride = 26  # one frame in 26\nvoxel_size=0.01\nkeep_unlabeled = yes\n"
                           "registration_method = fgr\n")
    assert cfg.stride == 26 and cfg.voxel_size == 0.01 and cfg.keep_unlabeled
    assert cfg.registration_method == "fgr"
    assert cfg.truncation == pytest.approx(0.04)


@pytest.mark.parametrize("text,line,word", [
    ("stride = 1\nbogus = 2\n", 2, "unknown"),
    ("stride = 1\n\nstride = 2\n", 3, "duplicate"),
    ("# c\nstride 2\n", 2, "key = value"),
    ("stride = two\n", 1, "stride"),
    ("keep_unlabeled = maybe\n", 1, "keep_unlabeled"),
    ("voxel_size = 0.01\nstride = 0\n", 2, "stride"),
    ("voxel_size = 0.01\ntruncation = 0.005\n", 2, "truncation"),
    ("extract = points\n", 1, "extract"),
])
def test_errors_carry_line_numbers(text, line, word):
    with pytest.raises(ParseError) as err:
        parse_run_config(text, "run.cfg")
    assert err.value.line == line
    assert f"run.cfg:line {line}" in str(err.value) and word in str(err.value)


def test_invariants_on_direct_construction():
    with pytest.raises(InvalidInputError):
        RunConfig(voxel_size=0.0)
    with pytest.raises(InvalidInputError):
        RunConfig(voxel_size=0.01, truncation=0.001)


def test_replace_recomputes_derived_unless_explicit():
    cfg = RunConfig().replace(voxel_size=0.01)
    assert cfg.truncation == pytest.approx(0.04)
    pinned = parse_run_config("truncation = 0.05\n").replace(voxel_size=0.01)
    assert pinned.truncation == 0.05


def test_format_round_trip(tmp_path):
    cfg = parse_run_config("stride = 3\nvoxel_size = 0.005\nkeep_unlabeled = true\nframes = /data/x\n")
    path = tmp_path / "r.cfg"
    path.write_text(format_run_config(cfg))
    assert load_run_config(path) == cfg
