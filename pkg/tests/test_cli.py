import json

import numpy as np
import pytest

from mmgrec import cli, ingest
from mmgrec.config import TrainConfig
from mmgrec.graph import build_graph
from mmgrec.model import init_params, item_embeddings, user_vectors
from mmgrec.train import load_checkpoint

TRAIN_FLAGS = ["--d", "16", "--hidden", "16", "--max-epochs", "6", "--seed", "3"]


def data_flags(d):
    return ["--interactions", str(d / "interactions.tsv"),
            "--img-features", str(d / "image.mmf"), "--txt-features", str(d / "text.mmf")]


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert cli.main(["synth", "--out", str(data), "--seed", "11", "--d-img", "24", "--d-txt", "12"]) == 0
    run_dir = root / "run"
    assert cli.main(["train", *data_flags(data), "--out", str(run_dir), *TRAIN_FLAGS]) == 0
    return data, run_dir


class TestSynth:
    def test_files_and_rerun(self, tmp_path, capsys):
        code, _, _ = run(capsys, "synth", "--out", tmp_path / "a", "--seed", 2)
        assert code == 0
        names = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert names == ["image.mmf", "interactions.tsv", "items.txt", "manifest.json", "text.mmf"]
        run(capsys, "synth", "--out", tmp_path / "b", "--seed", 2)
        for n in names:
            assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
        assert len((tmp_path / "a" / "interactions.tsv").read_text().splitlines()) == 400

    def test_impossible_request(self, tmp_path, capsys):
        code, _, err = run(capsys, "synth", "--out", tmp_path, "--per-user", 200, "--items", 100)
        assert code == 2 and "per-user" in err

    def test_bad_flag_value(self, tmp_path, capsys):
        code, _, _ = run(capsys, "synth", "--out", tmp_path, "--users", 0)
        assert code == 2


class TestPrep:
    def test_outputs(self, workdir, tmp_path, capsys):
        data, _ = workdir
        code, out, _ = run(capsys, "prep", "--interactions", data / "interactions.tsv", "--out", tmp_path, "--seed", 3)
        assert code == 0
        summary = json.loads(out)
        assert summary == json.loads((tmp_path / "prep.json").read_text())
        for name, key in (("train.tsv", "train"), ("validation.tsv", "validation"), ("test.tsv", "test")):
            assert len((tmp_path / name).read_text().splitlines()) == summary[key]
        assert len((tmp_path / "user_map.txt").read_text().split()) == summary["users"]
        assert len((tmp_path / "test.tsv").read_text().splitlines()) == summary["users"]

    def test_missing_file(self, tmp_path, capsys):
        code, _, err = run(capsys, "prep", "--interactions", tmp_path / "nope.tsv", "--out", tmp_path)
        assert code == 1 and "nope.tsv" in err

    def test_malformed_line(self, tmp_path, capsys):
        (tmp_path / "bad.tsv").write_text("u1\ti1\t5\nu1\n")
        code, _, err = run(capsys, "prep", "--interactions", tmp_path / "bad.tsv", "--out", tmp_path / "o")
        assert code == 1 and "line 2" in err


class TestTrain:
    def test_artifacts(self, workdir):
        _, run_dir = workdir
        for name in ("checkpoint.mmck", "train_log.jsonl", "valid_report.json", "user_map.txt", "item_map.txt"):
            assert (run_dir / name).exists()
        lines = (run_dir / "train_log.jsonl").read_text().splitlines()
        assert 1 <= len(lines) <= 6
        assert [json.loads(x)["epoch"] for x in lines] == list(range(1, len(lines) + 1))
        cfg = json.loads(load_checkpoint(run_dir / "checkpoint.mmck").config)
        assert cfg["d"] == 16 and cfg["seed"] == 3

    def test_rerun_identical(self, workdir, tmp_path):
        data, run_dir = workdir
        assert cli.main(["train", *data_flags(data), "--out", str(tmp_path), *TRAIN_FLAGS]) == 0
        for name in ("checkpoint.mmck", "valid_report.json"):
            assert (tmp_path / name).read_bytes() == (run_dir / name).read_bytes()

    def test_zero_lr_keeps_init(self, workdir, tmp_path):
        data, _ = workdir
        assert cli.main(["train", *data_flags(data), "--out", str(tmp_path), "--lr", "0",
                         "--max-epochs", "2", "--d", "8", "--hidden", "4", "--seed", "5"]) == 0
        ck = load_checkpoint(tmp_path / "checkpoint.mmck")
        dims = ck.params.dims
        init = init_params(dims["n_users"], dims["n_items"], 8, 24, 12, 4, 5)
        for name, arr in init.tensors().items():
            assert ck.params.tensors()[name].tobytes() == arr.astype(np.float32).astype(np.float64).tobytes()

    def test_config_file_with_flag_override(self, workdir, tmp_path):
        data, _ = workdir
        conf = tmp_path / "train.conf"
        conf.write_text("# small run\nd = 4\nhidden=4\nmax-epochs = 1\nlr = 0.01\n")
        assert cli.main(["train", *data_flags(data), "--out", str(tmp_path / "o"), "--config", str(conf),
                         "--lr", "0.02"]) == 0
        cfg = json.loads(load_checkpoint(tmp_path / "o" / "checkpoint.mmck").config)
        assert (cfg["d"], cfg["max_epochs"], cfg["lr"]) == (4, 1, 0.02)

    def test_unknown_config_key(self, workdir, tmp_path, capsys):
        data, _ = workdir
        (tmp_path / "c").write_text("colour = red\n")
        code, _, err = run(capsys, "train", *data_flags(data), "--out", tmp_path, "--config", tmp_path / "c")
        assert code == 2 and "colour" in err

    def test_invalid_config_leaves_no_files(self, workdir, tmp_path, capsys):
        data, _ = workdir
        code, _, _ = run(capsys, "train", *data_flags(data), "--out", tmp_path / "o", "--fixed-gate", "1.5")
        assert code == 2
        leftovers = list((tmp_path / "o").glob("*")) if (tmp_path / "o").exists() else []
        assert leftovers == []


class TestEval:
    def test_report(self, workdir, tmp_path, capsys):
        data, run_dir = workdir
        code, out, _ = run(capsys, "eval", *data_flags(data), "--checkpoint", run_dir / "checkpoint.mmck",
                           "--out", tmp_path)
        assert code == 0
        rep = json.loads(out)
        assert 0 <= rep["recall@10"] <= 1 and 0 <= rep["ndcg@10"] <= rep["recall@10"]
        assert rep["seed"] == 3
        assert json.loads((tmp_path / "eval_test.json").read_text()) == rep
        code, again, _ = run(capsys, "eval", *data_flags(data), "--checkpoint", run_dir / "checkpoint.mmck")
        assert again == out

    def test_validation_matches_training_report(self, workdir, capsys):
        data, run_dir = workdir
        code, out, _ = run(capsys, "eval", *data_flags(data), "--checkpoint", run_dir / "checkpoint.mmck",
                           "--holdout", "validation")
        assert code == 0
        assert json.loads(out) == json.loads((run_dir / "valid_report.json").read_text())

    def test_feature_dim_mismatch(self, workdir, tmp_path, capsys):
        data, run_dir = workdir
        fm = ingest.load_feature_matrix(data / "image.mmf", normalize=False)
        ingest.save_feature_matrix(tmp_path / "image.mmf", fm.rows[:, :20])
        (tmp_path / "items.txt").write_bytes((data / "items.txt").read_bytes())
        code, _, err = run(capsys, "eval", "--interactions", data / "interactions.tsv",
                           "--img-features", tmp_path / "image.mmf", "--txt-features", data / "text.mmf",
                           "--checkpoint", run_dir / "checkpoint.mmck")
        assert code == 2 and "d_img=24" in err and "d_img=20" in err

    def test_corrupt_checkpoint(self, workdir, tmp_path, capsys):
        data, run_dir = workdir
        blob = (run_dir / "checkpoint.mmck").read_bytes()
        (tmp_path / "c.mmck").write_bytes(blob[:100])
        code, _, _ = run(capsys, "eval", *data_flags(data), "--checkpoint", tmp_path / "c.mmck")
        assert code == 1


class TestRecommend:
    def _context(self, data, run_dir):
        ck = load_checkpoint(run_dir / "checkpoint.mmck")
        cfg = TrainConfig.from_dict(json.loads(ck.config))
        split, maps = ingest.preprocess(ingest.load_interactions(data / "interactions.tsv"), cfg.seed, cfg.k_core)
        return ck, cfg, split, maps

    def test_top_k_matches_library_scores(self, workdir, capsys):
        data, run_dir = workdir
        ck, cfg, split, maps = self._context(data, run_dir)
        user = maps.user_tokens[4]
        code, out, _ = run(capsys, "recommend", *data_flags(data), "--checkpoint", run_dir / "checkpoint.mmck",
                           "--user", user, "--k", 5)
        assert code == 0
        rows = [json.loads(x) for x in out.splitlines()]
        assert len(rows) == 5
        scores = [r["score"] for r in rows]
        assert scores == sorted(scores, reverse=True)

        tokens = ingest.load_item_map(data / "items.txt")
        xi = ingest.align_features(ingest.load_feature_matrix(data / "image.mmf"), tokens, maps).rows
        xt = ingest.align_features(ingest.load_feature_matrix(data / "text.mmf"), tokens, maps).rows
        g = build_graph(split.train_users, split.train_items, split.n_users, split.n_items)
        z = item_embeddings(ck.params, xi, xt, cfg.fixed_gate)
        p = user_vectors(ck.params, g, cfg.scoring, cfg.gcn_layers)[4]
        for r in rows:
            assert r["score"] == pytest.approx(z[maps.item_index[r["item"]]] @ p, abs=1e-6)

    def test_large_k_returns_all_unseen(self, workdir, capsys):
        data, run_dir = workdir
        _, _, split, maps = self._context(data, run_dir)
        user = maps.user_tokens[0]
        code, out, _ = run(capsys, "recommend", *data_flags(data), "--checkpoint", run_dir / "checkpoint.mmck",
                           "--user", user, "--k", 10_000)
        assert code == 0
        items = {json.loads(x)["item"] for x in out.splitlines()}
        seen = {maps.item_tokens[i] for i in split.train_pos[0]}
        assert len(items) == split.n_items - len(seen)
        assert not items & seen

    def test_unknown_user(self, workdir, capsys):
        data, run_dir = workdir
        code, _, err = run(capsys, "recommend", *data_flags(data), "--checkpoint", run_dir / "checkpoint.mmck",
                           "--user", "nobody")
        assert code == 2 and "nobody" in err
