import hashlib
import json
import os

import pytest

from beamcap.cli import format_report, main

from conftest import FIXTURE, MODEL, TRAIN
from oracles import oracle_bleu_counts, oracle_cider, oracle_meteor, oracle_rouge, oracle_rouge_l


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def tree_digest(root):
    digest = {}
    for dirpath, _, files in os.walk(root):
        for name in files:
            path = os.path.join(dirpath, name)
            with open(path, "rb") as fh:
                digest[os.path.relpath(path, root)] = hashlib.sha256(fh.read()).hexdigest()
    return digest


def gen(capsys, out, *extra):
    return run(capsys, "gen", "--seed", 7, "--items", 8, "--out", out, *extra)


def write_jsonl(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return path


class TestGen:
    def test_deterministic(self, tmp_path, capsys):
        assert gen(capsys, tmp_path / "a")[0] == 0
        assert gen(capsys, tmp_path / "b")[0] == 0
        assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
        assert len(tree_digest(tmp_path / "a")) == 8 + 2

    def test_manifest(self, tmp_path, capsys):
        code, out, _ = gen(capsys, tmp_path / "d")
        manifest = json.loads(out)
        assert code == 0 and manifest["records"] == 8 and manifest["seed"] == 7

    def test_zero_items(self, tmp_path, capsys):
        code, out, err = run(capsys, "gen", "--items", 0, "--out", tmp_path / "x")
        assert code == 2 and out == ""
        assert err.startswith("error: usage: ") and err.count("\n") == 1

    def test_unknown_flag(self, tmp_path, capsys):
        code, _, err = run(capsys, "gen", "--bogus", 1, "--out", tmp_path)
        assert code == 2 and err.startswith("error: usage:")

    def test_unwritable_output(self, tmp_path, capsys):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        code, _, err = gen(capsys, blocker / "sub")
        assert code == 2 and err.startswith("error: io:") and str(blocker) in err

    def test_config_file_and_override(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"items": 3, "seed": 1, "max-len": 2}))
        code, out, _ = run(capsys, "gen", "--config", cfg, "--seed", 5, "--out", tmp_path / "o")
        manifest = json.loads(out)
        assert code == 0 and manifest["records"] == 3 and manifest["seed"] == 5

    def test_config_unknown_key(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"itemz": 3}))
        code, _, err = run(capsys, "gen", "--config", cfg, "--out", tmp_path / "o")
        assert code == 2 and "itemz" in err


@pytest.fixture(scope="module")
def toy_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    assert main(["gen", "--seed", "3", "--items", "4", "--vocab", "8", "--pixels", "3", "--dim", "4",
                 "--out", str(root)]) == 0
    return root


class TestTrain:
    def _train(self, capsys, toy_dir, out, *extra):
        return run(capsys, "train", "--data", toy_dir / "dataset.jsonl", "--out", out / "m.json",
                   "--loss-log", out / "loss.csv", "--epochs", 20, "--lr", 0.05, "--hidden", 6,
                   "--embed", 4, "--attn", 4, "--seed", 2, *extra)

    def test_deterministic_and_inputs_untouched(self, tmp_path, capsys, toy_dir):
        before = tree_digest(toy_dir)
        assert self._train(capsys, toy_dir, tmp_path / "a")[0] == 0
        assert self._train(capsys, toy_dir, tmp_path / "b")[0] == 0
        assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
        assert tree_digest(toy_dir) == before

    def test_loss_log(self, tmp_path, capsys, toy_dir):
        code, out, _ = self._train(capsys, toy_dir, tmp_path)
        lines = (tmp_path / "loss.csv").read_text().splitlines()
        assert code == 0 and lines[0] == "epoch,mean_loss,cross_entropy,ds_penalty"
        assert [int(r.split(",")[0]) for r in lines[1:]] == list(range(1, 21))
        assert json.loads(out)["seed"] == 2

    def test_zero_lr_constant_trace(self, tmp_path, capsys, toy_dir):
        self._train(capsys, toy_dir, tmp_path, "--lr", 0)
        rows = (tmp_path / "loss.csv").read_text().splitlines()[1:]
        assert len({r.split(",", 1)[1] for r in rows}) == 1

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_exit_3(self, tmp_path, capsys, toy_dir):
        code, _, err = self._train(capsys, toy_dir, tmp_path, "--lr", 1e300, "--clip", 0)
        assert code == 3 and err.startswith("error: diverged:") and "epoch" in err

    def test_missing_dataset(self, tmp_path, capsys):
        code, _, err = run(capsys, "train", "--data", tmp_path / "nope.jsonl", "--out", tmp_path / "m")
        assert code == 2 and "nope.jsonl" in err


class TestDecode:
    @pytest.fixture(scope="class")
    @classmethod
    def model(cls, toy_dir, tmp_path_factory):
        out = tmp_path_factory.mktemp("model") / "m.json"
        assert main(["train", "--data", str(toy_dir / "dataset.jsonl"), "--out", str(out), "--epochs", "5",
                     "--lr", "0.05", "--hidden", "6", "--embed", "4", "--attn", "4"]) == 0
        return out

    def test_output_lines(self, capsys, toy_dir, model):
        code, out, _ = run(capsys, "decode", "--model", model, "--data", toy_dir / "dataset.jsonl", "--beam", 3)
        rows = [json.loads(line) for line in out.splitlines()]
        assert code == 0 and len(rows) == 4
        for row in rows:
            assert set(row) == {"id", "caption", "log_prob", "beam"} and row["beam"] == 3
            assert "<" not in row["caption"] and row["log_prob"] <= 0

    def test_feature_paths(self, capsys, toy_dir, model):
        code, out, _ = run(capsys, "decode", "--model", model, "--features", toy_dir / "item0.abft")
        assert code == 0 and json.loads(out)["id"] == "item0"

    def test_missing_feature_file(self, capsys, tmp_path, model):
        missing = tmp_path / "gone.abft"
        code, _, err = run(capsys, "decode", "--model", model, "--features", missing)
        assert code == 4 and str(missing) in err and err.startswith("error: features:")

    def test_bad_feature_file(self, capsys, tmp_path, model):
        bad = tmp_path / "bad.abft"
        bad.write_bytes(b"XXXX\x01\x00\x00\x00")
        code, _, err = run(capsys, "decode", "--model", model, "--features", bad)
        assert code == 4 and "offset 0" in err

    def test_bad_checkpoint(self, capsys, tmp_path, toy_dir):
        ckpt = tmp_path / "m.json"
        ckpt.write_text('{"version": 1, "par')
        code, _, err = run(capsys, "decode", "--model", ckpt, "--features", toy_dir / "item0.abft")
        assert code == 4 and err.startswith("error: model:")


THREE = [
    {"id": "1", "candidate": "a man rides a horse", "refs": ["A man rides a brown horse.", "a person on a horse"]},
    {"id": "2", "candidate": "the dog runs", "refs": ["the dog is running", "a dog runs fast"]},
    {"id": "3", "candidate": "two cats sleep", "refs": ["cats sleeping on a bed"]},
]


def _oracle_report(rows):
    from beamcap.corpus import tokenize
    insts = [(tokenize(r["candidate"]), [tokenize(x) for x in r["refs"]]) for r in rows]
    rep = {}
    bleus = []
    for n in range(1, 5):
        num = sum(oracle_bleu_counts(a, b, n)[0] for a, b in insts)
        den = sum(oracle_bleu_counts(a, b, n)[1] for a, b in insts)
        bleus.append(num / den if den else 0.0)
        rep[f"bleu{n}"] = bleus[-1]
        rep[f"rouge{n}"] = sum(oracle_rouge(a, b, n) for a, b in insts) / len(insts)
    prod = 1.0
    for v in bleus:
        prod *= v
    rep["bleu"] = prod ** 0.25
    rep["rougeL"] = sum(oracle_rouge_l(a, b) for a, b in insts) / len(insts)
    per_n = [oracle_cider(insts, n) for n in range(1, 5)]
    for n in range(1, 5):
        rep[f"cider{n}"] = sum(per_n[n - 1]) / len(insts)
    rep["cider"] = sum(rep[f"cider{n}"] for n in range(1, 5)) / 4
    rep["meteor"] = sum(oracle_meteor(a, b) for a, b in insts) / len(insts)
    return rep


class TestScore:
    def test_identity_fixture(self, tmp_path, capsys):
        rows = [{"id": str(i), "candidate": r["refs"][0], "refs": r["refs"]} for i, r in enumerate(THREE)]
        code, out, _ = run(capsys, "score", "--input", write_jsonl(tmp_path / "s.jsonl", rows))
        assert code == 0
        for key in ("bleu1", "bleu2", "bleu3", "bleu4", "rougeL"):
            assert f'"{key}": 100.0000' in out
        assert json.loads(out)["count"] == 3

    def test_three_instance_oracle(self, tmp_path, capsys):
        code, out, _ = run(capsys, "score", "--input", write_jsonl(tmp_path / "s.jsonl", THREE))
        report = json.loads(out)
        expected = _oracle_report(THREE)
        assert code == 0 and set(report) == set(expected) | {"count"}
        for key, value in expected.items():
            assert report[key] == pytest.approx(100 * value, abs=1e-4), key
        # hand check: pooled unigram precision is (5 + 3 + 1) / (5 + 3 + 3)
        assert report["bleu1"] == pytest.approx(100 * 9 / 11, abs=1e-4)

    def test_four_decimals(self):
        text = format_report({"bleu1": 1 / 3}, 1)
        assert text == '{"bleu1": 33.3333, "count": 1}'

    def test_empty_input(self, tmp_path, capsys):
        path = tmp_path / "e.jsonl"
        path.write_text("")
        code, _, err = run(capsys, "score", "--input", path)
        assert code == 5 and err.startswith("error: score:")

    def test_malformed_line(self, tmp_path, capsys):
        path = tmp_path / "m.jsonl"
        path.write_text(json.dumps(THREE[0]) + "\n{not json\n")
        code, _, err = run(capsys, "score", "--input", path)
        assert code == 5 and "line 2" in err

    def test_missing_refs(self, tmp_path, capsys):
        path = write_jsonl(tmp_path / "m.jsonl", [{"id": "1", "candidate": "a", "refs": []}])
        code, _, err = run(capsys, "score", "--input", path)
        assert code == 5 and "line 1" in err

    def test_deterministic(self, tmp_path, capsys):
        path = write_jsonl(tmp_path / "s.jsonl", THREE)
        assert run(capsys, "score", "--input", path) == run(capsys, "score", "--input", path)


class TestOverfitRun:
    """Full fixture training through the command line."""

    @pytest.fixture(scope="class")
    @classmethod
    def trained(cls, tmp_path_factory):
        root = tmp_path_factory.mktemp("fixture")
        assert main(["gen", "--seed", str(FIXTURE["seed"]), "--items", str(FIXTURE["items"]),
                     "--vocab", str(FIXTURE["vocab"]), "--pixels", str(FIXTURE["pixels"]),
                     "--dim", str(FIXTURE["dim"]), "--out", str(root)]) == 0
        summary_path = root / "summary.json"
        import contextlib, io
        buf = io.StringIO()
        with contextlib.redirect_stdout(buf):
            code = main(["train", "--data", str(root / "dataset.jsonl"), "--out", str(root / "m.json"),
                         "--epochs", str(TRAIN.epochs), "--lr", str(TRAIN.learning_rate),
                         "--seed", str(TRAIN.seed), "--hidden", str(MODEL["hidden"]),
                         "--embed", str(MODEL["embed"]), "--attn", str(MODEL["attn"])])
        assert code == 0
        summary_path.write_text(buf.getvalue())
        return root

    def test_cross_entropy(self, trained):
        summary = json.loads((trained / "summary.json").read_text())
        assert summary["token_cross_entropy"] < 0.05

    def _decode(self, capsys, root, k):
        code, out, _ = run(capsys, "decode", "--model", root / "m.json", "--data", root / "dataset.jsonl",
                           "--beam", k)
        assert code == 0
        return [json.loads(line) for line in out.splitlines()]

    def test_beam4_dominates_beam1(self, capsys, trained):
        b1 = self._decode(capsys, trained, 1)
        b4 = self._decode(capsys, trained, 4)
        assert all(x["log_prob"] >= y["log_prob"] for x, y in zip(b4, b1))

    def test_reproduces_references(self, capsys, trained):
        refs = {json.loads(line)["id"]: json.loads(line)["refs"][0]
                for line in (trained / "dataset.jsonl").read_text().splitlines()}
        rows = self._decode(capsys, trained, 4)
        assert sum(r["caption"] == refs[r["id"]] for r in rows) >= 7
