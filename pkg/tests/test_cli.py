import json

from attnfuse import graph
from attnfuse.cli import main


def test_verify(capsys):
    assert main(["verify", "--model", "gat", "--nodes", "40", "--dim", "8"]) == 0
    out = capsys.readouterr().out
    assert out.count("ok") == 5 and "FAIL" not in out


def test_verify_f64_hub_skips_smmf(capsys):
    # 8 * (2 * 3100 + ...) bytes exceeds the 48 KiB budget
    code = main(["verify", "--model", "gt", "--nodes", "3500", "--avg-degree", "2",
                 "--hub-degree", "3100", "--dim", "4", "--dtype", "f64"])
    out = capsys.readouterr().out
    assert code == 0
    assert "smmf: skipped" in out


def test_gradcheck(capsys):
    assert main(["gradcheck", "--model", "agnn", "--nodes", "10", "--dim", "3"]) == 0
    out = capsys.readouterr().out
    assert "dQ" in out and "max relative error" in out


def test_bench_writes_reports(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"model": "gt", "nodes": 50, "avg_degree": 4.0,
                               "batch_count": 4, "dim": 16, "peak_bw": 1e10}))
    out, md = tmp_path / "r.csv", tmp_path / "r.md"
    assert main(["bench", "--config", str(cfg), "--out", str(out), "--md", str(md)]) == 0
    assert out.read_text().startswith("mode,elapsed_ns,kernel_launches")
    assert "speedup_vs_unfused" in md.read_text()


def test_bench_infeasible_smmf_exit_code(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"model": "gat", "nodes": 500, "avg_degree": 2.0,
                               "hub_degree": 490, "batch_count": 1, "dim": 4,
                               "strategies": ["smmf"], "shared_mem_bytes": 1024}))
    assert main(["bench", "--config", str(cfg), "--out", str(tmp_path / "r.csv")]) == 2
    assert "shared memory" in capsys.readouterr().err


def test_gen_graph(tmp_path, capsys):
    path = tmp_path / "g.txt"
    assert main(["gen-graph", "--nodes", "100", "--avg-degree", "4", "--hub-degree", "90",
                 "--seed", "7", "--out", str(path)]) == 0
    g = graph.read_graph(path)
    assert g.same_structure(graph.gen_super_node(100, 4.0, 90, 7))


def test_bad_arguments_exit_code(capsys):
    assert main(["gen-graph", "--nodes", "5", "--avg-degree", "9", "--out", "/dev/null"]) == 2
    assert "error" in capsys.readouterr().err
