import pytest

from fpp_flows.common import ConfigError
from fpp_flows.distributions import PinnedField
from fpp_flows.lattice import FlowProblem
from fpp_flows.maxflow import max_flow
from fpp_flows.utils.fileio import config_hash, dump_cut, load_yaml, read_table, write_csv


def test_config_hash_ignores_key_order():
    a = config_hash({"seed": 1, "distribution": "1:1"})
    b = config_hash({"distribution": "1:1", "seed": 1})
    assert a == b
    assert a.startswith("sha256:")
    assert a != config_hash({"distribution": "1:1", "seed": 2})


def test_read_table(tmp_path):
    path = tmp_path / "table.txt"
    path.write_text("# cumulative, value\n1/2, 1\n\n1 4  # last row\n")
    assert read_table(str(path)) == [("1/2", "1"), ("1", "4")]
    path.write_text("1/2 1 7\n")
    with pytest.raises(ConfigError):
        read_table(str(path))


def test_load_yaml_rejects_lists(tmp_path):
    path = tmp_path / "config.yml"
    path.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        load_yaml(str(path))
    path.write_text("")
    assert load_yaml(str(path)) == {}


def test_write_csv(tmp_path):
    path = tmp_path / "rows.csv"
    write_csv(str(path), ["p", "mean"], [{"p": 4, "mean": 1.25}, {"p": 8, "mean": 1.125}])
    assert path.read_text() == "p,mean\n4,1.25\n8,1.125\n"


def test_dump_cut(tmp_path):
    problem = FlowProblem.on_vertices([(0, 0), (1, 0), (2, 0)], [(0, 0)], [(2, 0)])
    field = PinnedField(2, {((0, 0), 0): 1, ((1, 0), 0): "5/2"})
    result = max_flow(problem, field)
    path = tmp_path / "dumps" / "cut.txt"
    dump_cut(str(path), problem, field, result.cutset)
    assert path.read_text().splitlines() == [
        "vertices 3",
        "v 0 0 source",
        "v 1 0 inner",
        "v 2 0 sink",
        "edges 2",
        "e 0 0 1 0 1 1",
        "e 1 0 2 0 5/2 0",
    ]
