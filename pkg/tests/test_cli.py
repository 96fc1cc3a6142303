import numpy as np
import pytest

from shitu import cli
from shitu.gallery import load_index, write_features, write_labels


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def tsv(out):
    return [line.split("\t") for line in out.strip().splitlines()]


@pytest.fixture
def gallery_files(tmp_path):
    rng = np.random.default_rng(0)
    centers = rng.normal(0, 8, size=(5, 16))
    y = np.repeat(np.arange(5), 200)
    x = (centers[y] + rng.standard_normal((1000, 16))).astype(np.float32)
    write_features(tmp_path / "g.ppsg", x)
    write_labels(tmp_path / "g.txt", [f"class{v}" for v in y])
    return x, y, tmp_path


def build(capsys, d, kind, *extra):
    return run(
        capsys, "build", "--features", d / "g.ppsg", "--labels", d / "g.txt", "--index", kind,
        "--out", d / f"{kind}.idx", *extra,
    )


def test_build_flat_reports_count(capsys, gallery_files):
    _, _, d = gallery_files
    code, out, err = build(capsys, d, "flat")
    assert code == 0
    rows = dict(tsv(out))
    assert rows["records"] == "1000"
    assert int(rows["file_bytes"]) == (d / "flat.idx").stat().st_size
    assert "build_seconds" in rows
    assert "# index=flat" in err and "# metric=None" in err


def test_hnsw_delete_unsupported(capsys, gallery_files):
    _, _, d = gallery_files
    build(capsys, d, "hnsw", "--M", "8", "--ef-construction", "40")
    code, out, err = run(capsys, "delete", "--index-file", d / "hnsw.idx", "--ids", "3")
    assert code == 1
    assert "hnsw.delete: HNSW only supports adding elements after the graph is built" in err
    assert len(load_index(d / "hnsw.idx")) == 1000


def test_flat_delete(capsys, gallery_files):
    _, _, d = gallery_files
    build(capsys, d, "flat")
    code, out, _ = run(capsys, "delete", "--index-file", d / "flat.idx", "--ids", "3,4,99999")
    assert code == 0 and dict(tsv(out)) == {"removed": "2", "remaining": "998"}


def test_nlist_zero_rejected_before_work(capsys, gallery_files):
    _, _, d = gallery_files
    with pytest.raises(SystemExit) as err:
        build(capsys, d, "ivf", "--nlist", "0")
    assert err.value.code == 2
    assert not (d / "ivf.idx").exists()
    assert "--nlist" in capsys.readouterr().err


def test_search_self_match_and_k(capsys, gallery_files):
    x, y, d = gallery_files
    build(capsys, d, "flat")
    write_features(d / "q.ppsg", x[[5, 600]])
    code, out, _ = run(capsys, "search", "--index-file", d / "flat.idx", "--query-features", d / "q.ppsg", "--k", 3)
    assert code == 0
    rows = tsv(out)
    assert len(rows) == 6
    assert [r[:2] for r in rows] == [["0", "1"], ["0", "2"], ["0", "3"], ["1", "1"], ["1", "2"], ["1", "3"]]
    assert rows[0][2:] == ["5", f"class{y[5]}", "0.0"]
    assert rows[3][2:] == ["600", f"class{y[600]}", "0.0"]


def test_ivf_full_probe_output_equals_flat(capsys, gallery_files):
    _, _, d = gallery_files
    build(capsys, d, "flat")
    build(capsys, d, "ivf", "--nlist", "10")
    q = np.random.default_rng(3).normal(0, 8, size=(20, 16)).astype(np.float32)
    write_features(d / "q.ppsg", q)
    _, flat_out, _ = run(capsys, "search", "--index-file", d / "flat.idx", "--query-features", d / "q.ppsg", "--k", 5)
    _, ivf_out, _ = run(
        capsys, "search", "--index-file", d / "ivf.idx", "--query-features", d / "q.ppsg", "--k", 5, "--nprobe", 10
    )
    assert ivf_out == flat_out and len(tsv(flat_out)) == 100


def test_search_dim_mismatch(capsys, gallery_files):
    _, _, d = gallery_files
    build(capsys, d, "flat")
    write_features(d / "q.ppsg", np.ones((1, 8), np.float32))
    code, out, err = run(capsys, "search", "--index-file", d / "flat.idx", "--query-features", d / "q.ppsg")
    assert code == 1 and out == ""
    assert "flat.search:" in err


def test_missing_file_error(capsys, tmp_path):
    code, _, err = run(capsys, "search", "--index-file", tmp_path / "nope", "--query-features", tmp_path / "q")
    assert code == 1 and "cli.search" in err


def _eval(capsys, d, labels_name, k=5):
    code, out, _ = run(
        capsys, "eval", "--index-file", d / "flat.idx", "--query-features", d / "g.ppsg",
        "--query-labels", d / labels_name, "--k", k,
    )
    assert code == 0
    return dict(tsv(out))


def test_eval_self_retrieval(capsys, gallery_files):
    _, _, d = gallery_files
    build(capsys, d, "flat")
    report = _eval(capsys, d, "g.txt")
    assert report["queries"] == "1000"
    assert float(report["recall@1"]) == 1.0
    vals = [float(report[f"recall@{k}"]) for k in range(1, 6)]
    assert vals == sorted(vals)


def test_eval_shuffled_labels_near_chance(capsys, gallery_files):
    _, y, d = gallery_files
    build(capsys, d, "flat")
    shuffled = np.random.default_rng(1).permutation(y)
    write_labels(d / "shuffled.txt", [f"class{v}" for v in shuffled])
    report = _eval(capsys, d, "shuffled.txt", k=3)
    sigma = np.sqrt(0.2 * 0.8 / 1000)
    assert abs(float(report["recall@1"]) - 0.2) <= 3 * sigma
    vals = [float(report[f"recall@{k}"]) for k in range(1, 4)]
    assert vals == sorted(vals)


def test_eval_label_count_mismatch(capsys, gallery_files):
    _, _, d = gallery_files
    build(capsys, d, "flat")
    write_labels(d / "few.txt", ["a", "b"])
    code, _, err = run(
        capsys, "eval", "--index-file", d / "flat.idx", "--query-features", d / "g.ppsg", "--query-labels", d / "few.txt"
    )
    assert code == 1 and "cli.eval" in err and "1000" in err


def test_bench_both(capsys):
    code, out, _ = run(
        capsys, "bench", "--gallery-size", 3000, "--dim", 64, "--payload", "both", "--queries", 4, "--repeats", 7
    )
    assert code == 0
    lines = out.strip().splitlines()
    fields = {line.split("\t")[0]: line.split("\t") for line in lines}
    assert fields["bytes_ratio"][1] == "32.00"
    assert float(fields["speed_ratio"][1]) > 0
    for payload in ("float", "binary"):
        kv = dict(f.split("=") for f in fields[payload][2:])
        assert kv["repeats"] == "7"
        assert float(kv["p50_ms"]) <= float(kv["p99_ms"])
    assert dict(f.split("=") for f in fields["float"][2:])["index_bytes"] == str(3000 * 64 * 4)


def test_train_csv_rows_and_determinism(capsys, tmp_path):
    args = ["train", "--mode", "baseline", "--epochs", 5, "--classes", 2, "--hidden-dim", 0, "--seed", 7]
    run(capsys, *args, "--out", tmp_path / "a.ck")
    run(capsys, *args, "--out", tmp_path / "b.ck")
    a = (tmp_path / "a.ck.csv").read_bytes()
    assert a == (tmp_path / "b.ck.csv").read_bytes()
    assert (tmp_path / "a.ck").read_bytes() == (tmp_path / "b.ck").read_bytes()
    assert len(a.decode().strip().splitlines()) == 6


def test_train_udml_columns(capsys, tmp_path):
    code, out, _ = run(capsys, "train", "--mode", "udml", "--epochs", 2, "--out", tmp_path / "u.ck")
    assert code == 0
    header = (tmp_path / "u.ck.csv").read_text().splitlines()[0].split(",")
    assert {"arc", "dml", "feat", "total"} <= set(header)
    report = dict(tsv(out))
    assert "recall@1_net0" in report and "recall@1_net1" in report


def test_pipeline_synth_train_embed_quantize(capsys, tmp_path):
    d = tmp_path
    assert run(capsys, "synth", "--out-dir", d / "data", "--classes", 4, "--data-seed", 2)[0] == 0
    run(capsys, "train", "--mode", "dshsd", "--epochs", 5, "--embedding-dim", 32, "--out", d / "m.ck",
        "--features", d / "data/train.ppsg", "--labels", d / "data/train_labels.txt")
    assert run(capsys, "quantize", "--checkpoint", d / "m.ck", "--features", d / "data/gallery.ppsg",
               "--out", d / "gb.ppsg")[0] == 0
    run(capsys, "quantize", "--checkpoint", d / "m.ck", "--features", d / "data/query.ppsg", "--out", d / "qb.ppsg")
    run(capsys, "build", "--features", d / "gb.ppsg", "--labels", d / "data/gallery_labels.txt", "--out", d / "b.idx")
    idx = load_index(d / "b.idx")
    assert idx.metric.value == "hamming" and idx.dim == 32
    code, out, _ = run(capsys, "eval", "--index-file", d / "b.idx", "--query-features", d / "qb.ppsg",
                       "--query-labels", d / "data/query_labels.txt", "--k", 1)
    assert code == 0 and float(dict(tsv(out))["recall@1"]) > 0.9
    code, out, _ = run(capsys, "embed", "--checkpoint", d / "m.ck", "--features", d / "data/query.ppsg",
                       "--out", d / "qe.ppsg")
    assert dict(tsv(out)) == {"rows": "80", "dim": "32"}


def test_config_file_and_flag_precedence(capsys, gallery_files):
    _, _, d = gallery_files
    (d / "c.cfg").write_text(
        f"# build settings\nfeatures = {d / 'g.ppsg'}\nlabels={d / 'g.txt'}\n--index=ivf\nnlist=4  # small\nseed=3\n"
    )
    code, _, err = run(capsys, "build", "--config", d / "c.cfg", "--nlist", 6, "--out", d / "c.idx")
    assert code == 0
    assert "# nlist=6" in err and "# seed=3" in err and "# index=ivf" in err
    assert load_index(d / "c.idx").nlist == 6


def test_config_unknown_key(capsys, tmp_path):
    (tmp_path / "c.cfg").write_text("bogus=1\n")
    with pytest.raises(SystemExit) as err:
        cli.main(["bench", "--config", str(tmp_path / "c.cfg")])
    assert err.value.code == 2
    assert "bogus" in capsys.readouterr().err


def test_unknown_flag_rejected(capsys):
    with pytest.raises(SystemExit):
        cli.main(["bench", "--frobnicate"])


def test_threads_flag_and_env(capsys, monkeypatch):
    args = ["bench", "--gallery-size", 100, "--dim", 8, "--queries", 1, "--repeats", 1]
    monkeypatch.setenv("SHITU_THREADS", "1")
    assert "# threads=1" in run(capsys, *args)[2]
    assert "# threads=1" in run(capsys, *args, "--threads", 1)[2]
    monkeypatch.setenv("SHITU_THREADS", "zero")
    code, _, err = run(capsys, *args)
    assert code == 2 and "SHITU_THREADS" in err
    monkeypatch.delenv("SHITU_THREADS")
    assert "# threads=default" in run(capsys, *args)[2]
