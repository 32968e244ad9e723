"""Command line coverage on a miniature benchmark.

Everything runs in-process through cli.main so exit codes and stderr are
checked directly. A module-scoped workspace generates one tiny dataset and
one pre-trained checkpoint that the command tests share.
"""

import csv
import hashlib
import json
from types import SimpleNamespace

import numpy as np
import pytest

from segadapt import cli
from segadapt.checkpoint import load_checkpoint, save_checkpoint
from segadapt.config import default_config
from segadapt.data import LabeledSet, load_dataset, save_dataset

MINI_CFG = """\
[data]
n_cases = 10
image_size = 32

[pretrain]
epochs = 2

[adapt]
heads = 2
epochs = 1
"""

DATA_FILES = [f"{d}_{s}.upld" for d in ("source", "target") for s in ("train", "val", "test")]


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def read_jsonl(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


def read_manifest(out_dir):
    return json.loads((out_dir / "manifest.json").read_text())


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    root = tmp_path_factory.mktemp("cliws")
    cfg = root / "mini.cfg"
    cfg.write_text(MINI_CFG)
    data = root / "data"
    rc = cli.main(["gen-data", "--out", str(data), "--config", str(cfg), "--seed", "5"])
    assert rc == 0
    pre = root / "pre"
    rc = cli.main(["pretrain", "--data", str(data), "--out", str(pre),
                   "--config", str(cfg), "--seed", "5"])
    assert rc == 0
    return SimpleNamespace(root=root, cfg=cfg, data=data, pre=pre,
                           ckpt=pre / "checkpoint.uplc")


class TestGenData:
    def test_writes_six_files_and_manifest(self, ws):
        for name in DATA_FILES:
            assert (ws.data / name).exists(), name
        m = read_manifest(ws.data)
        assert m["command"] == "gen-data"
        assert m["outputs"] == sorted(str(ws.data / n) for n in DATA_FILES)
        assert m["seed"] == 5

    def test_rerun_same_seed_identical_hashes(self, ws):
        again = ws.root / "data2"
        rc = cli.main(["gen-data", "--out", str(again), "--config", str(ws.cfg),
                       "--seed", "5"])
        assert rc == 0
        for name in DATA_FILES:
            assert sha(again / name) == sha(ws.data / name), name

    def test_file_sizes_match_header_arithmetic(self, ws):
        for name in DATA_FILES:
            path = ws.data / name
            ds = load_dataset(path)
            n, c, h, w = ds.images.shape
            expected = (4 + 2 + 16 + 4
                        + sum(2 + len(cid.encode()) for cid in ds.case_ids)
                        + 4 * n + 4 * n * c * h * w + n * h * w)
            assert path.stat().st_size == expected, name

    def test_unknown_benchmark_exits_3(self, ws, capsys, tmp_path):
        rc = cli.main(["gen-data", "--out", str(tmp_path / "x"), "--benchmark", "nope"])
        assert rc == 3
        assert "nope" in capsys.readouterr().err

    def test_benchmark_flag_lands_in_manifest(self, ws, tmp_path):
        out = tmp_path / "named"
        rc = cli.main(["gen-data", "--out", str(out), "--config", str(ws.cfg),
                       "--benchmark", "syn-a2b", "--seed", "5"])
        assert rc == 0
        assert read_manifest(out)["config"]["data"]["benchmark"] == "syn-a2b"

    def test_unwritable_out_path_exits_3(self, ws, capsys, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        rc = cli.main(["gen-data", "--out", str(blocker / "sub")])
        assert rc == 3


class TestConfigErrors:
    def run_gen(self, cfg_path, tmp_path):
        return cli.main(["gen-data", "--out", str(tmp_path / "o"),
                         "--config", str(cfg_path)])

    def test_unknown_key_exits_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("[adapt]\nbogus = 1\n")
        assert self.run_gen(bad, tmp_path) == 2
        assert "bogus" in capsys.readouterr().err

    def test_unknown_section_exits_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("[training]\nepochs = 4\n")
        assert self.run_gen(bad, tmp_path) == 2
        assert "training" in capsys.readouterr().err

    def test_bad_value_exits_2_naming_key(self, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("[data]\nn_cases = soup\n")
        assert self.run_gen(bad, tmp_path) == 2
        err = capsys.readouterr().err
        assert "n_cases" in err and "data" in err

    def test_missing_config_file_exits_2(self, tmp_path):
        assert self.run_gen(tmp_path / "absent.cfg", tmp_path) == 2


class TestPretrain:
    def test_missing_data_exits_3_naming_path(self, tmp_path, capsys):
        empty = tmp_path / "empty"
        empty.mkdir()
        rc = cli.main(["pretrain", "--data", str(empty), "--out", str(tmp_path / "o")])
        assert rc == 3
        assert "source_train.upld" in capsys.readouterr().err

    def test_log_has_one_record_per_epoch(self, ws):
        records = read_jsonl(ws.pre / "trainlog.jsonl")
        assert [r["epoch"] for r in records] == [0, 1]
        for r in records:
            assert set(r) == {"epoch", "loss", "loss_entropy", "val_dice",
                              "val_dice_mean", "reliable_fraction", "lr"}

    def test_checkpoint_header_records_seed_and_best_epoch(self, ws):
        model, header, optim = load_checkpoint(ws.ckpt)
        assert header["seeds"] == {"root": 5}
        records = read_jsonl(ws.pre / "trainlog.jsonl")
        vals = [r["val_dice_mean"] for r in records]
        best = int(np.argmax(vals))  # first maximum wins under strict improvement
        assert header["epoch"] == best
        assert model.num_heads == 1

    def test_rerun_byte_identical_outputs(self, ws):
        again = ws.root / "pre2"
        rc = cli.main(["pretrain", "--data", str(ws.data), "--out", str(again),
                       "--config", str(ws.cfg), "--seed", "5"])
        assert rc == 0
        assert sha(again / "checkpoint.uplc") == sha(ws.ckpt)
        assert sha(again / "trainlog.jsonl") == sha(ws.pre / "trainlog.jsonl")
        a, b = read_manifest(again), read_manifest(ws.pre)
        a.pop("timing_s"), b.pop("timing_s")
        a["outputs"] = [p.replace("pre2", "pre") for p in a["outputs"]]
        assert a == b


METHODS = ["upl", "tent", "ptbn", "selftrain", "finetune-train", "finetune-valid",
           "target-only"]


@pytest.fixture(scope="module")
def runs(ws):
    outs = {}
    for method in METHODS:
        out = ws.root / f"adapt_{method}"
        argv = ["adapt", "--data", str(ws.data), "--out", str(out),
                "--config", str(ws.cfg), "--method", method, "--seed", "6"]
        if method != "target-only":
            argv += ["--checkpoint", str(ws.ckpt)]
        assert cli.main(argv) == 0, method
        outs[method] = out
    return outs


class TestAdapt:
    @pytest.mark.parametrize("method", METHODS)
    def test_method_writes_checkpoint_and_log(self, runs, method):
        out = runs[method]
        model, header, _ = load_checkpoint(out / "adapted.uplc")
        assert model.num_heads == (2 if method == "upl" else 1)
        records = read_jsonl(out / "trainlog.jsonl")
        assert len(records) == (2 if method == "target-only" else 1)
        assert read_manifest(out)["command"] == f"adapt:{method}"

    def test_ptbn_emits_no_optimizer_state(self, runs):
        _, _, optim = load_checkpoint(runs["ptbn"] / "adapted.uplc")
        assert optim is None

    def test_upl_log_carries_reliable_fraction(self, runs):
        rec = read_jsonl(runs["upl"] / "trainlog.jsonl")[0]
        assert rec["reliable_fraction"] is not None
        assert 0.0 <= rec["reliable_fraction"] <= 1.0
        assert rec["loss"] is not None and rec["loss_entropy"] is not None

    def test_missing_checkpoint_flag_exits_2(self, ws):
        rc = cli.main(["adapt", "--data", str(ws.data), "--out", str(ws.root / "x"),
                       "--method", "upl"])
        assert rc == 2

    def test_ablate_with_non_upl_method_exits_2(self, ws, capsys):
        rc = cli.main(["adapt", "--data", str(ws.data), "--out", str(ws.root / "x"),
                       "--method", "tent", "--checkpoint", str(ws.ckpt),
                       "--ablate", "M"])
        assert rc == 2
        assert "upl" in capsys.readouterr().err

    def test_unknown_ablate_token_exits_2(self, ws, capsys):
        rc = cli.main(["adapt", "--data", str(ws.data), "--out", str(ws.root / "x"),
                       "--method", "upl", "--checkpoint", str(ws.ckpt),
                       "--ablate", "M,XX"])
        assert rc == 2
        assert "XX" in capsys.readouterr().err

    @pytest.mark.parametrize("token,attr", sorted(cli.ABLATE_FLAGS.items()))
    def test_ablate_token_disables_exactly_one_switch(self, ws, token, attr):
        model, _, _ = load_checkpoint(ws.ckpt)
        est = cli._build_adapter("upl", model, default_config(), 0, {token})
        for flag in cli.ABLATE_FLAGS.values():
            assert getattr(est, flag) is (flag != attr), flag

    def test_nan_checkpoint_exits_4_with_diagnostic_dump(self, ws, tmp_path, capsys):
        model, _, _ = load_checkpoint(ws.ckpt)
        bad = model.named_parameters()["enc.l0.c1.w"]
        bad.data = np.full_like(bad.data, np.nan)
        poisoned = tmp_path / "poisoned.uplc"
        save_checkpoint(poisoned, model, epoch=0, seeds={"root": 0})
        out = tmp_path / "o"
        rc = cli.main(["adapt", "--data", str(ws.data), "--out", str(out),
                       "--config", str(ws.cfg), "--method", "selftrain",
                       "--checkpoint", str(poisoned)])
        assert rc == 4
        dump = json.loads((out / "nan_dump.json").read_text())
        assert dump["stage"] == "selftrain"
        assert {"epoch", "step", "loss"} <= set(dump)
        assert "nan_dump.json" in capsys.readouterr().err

    def test_dump_maps_writes_pgm_pairs(self, ws, tmp_path):
        out, maps = tmp_path / "o", tmp_path / "maps"
        rc = cli.main(["adapt", "--data", str(ws.data), "--out", str(out),
                       "--config", str(ws.cfg), "--method", "ptbn",
                       "--checkpoint", str(ws.ckpt), "--dump-maps", str(maps)])
        assert rc == 0
        train = load_dataset(ws.data / "target_train.upld")
        n = len(train.case_slices(0))
        pgms = sorted(maps.iterdir())
        assert [p.name for p in pgms] == (
            [f"pseudo_{i:03d}.pgm" for i in range(n)]
            + [f"reliability_{i:03d}.pgm" for i in range(n)])
        for p in pgms:
            assert p.read_bytes().startswith(b"P5\n")
        listed = set(read_manifest(out)["outputs"])
        assert {str(p) for p in pgms} <= listed

    def test_rerun_byte_identical_outputs(self, ws, runs):
        again = ws.root / "upl_again"
        rc = cli.main(["adapt", "--data", str(ws.data), "--out", str(again),
                       "--config", str(ws.cfg), "--method", "upl", "--seed", "6",
                       "--checkpoint", str(ws.ckpt)])
        assert rc == 0
        assert sha(again / "adapted.uplc") == sha(runs["upl"] / "adapted.uplc")
        assert sha(again / "trainlog.jsonl") == sha(runs["upl"] / "trainlog.jsonl")


@pytest.fixture(scope="module")
def results(ws):
    out = ws.root / "eval_single" / "results.csv"
    rc = cli.main(["eval", "--checkpoint", str(ws.ckpt),
                   "--data", str(ws.data / "target_test.upld"),
                   "--out", str(out), "--mode", "single", "--seed", "9"])
    assert rc == 0
    return out


class TestEval:
    def test_row_per_case_and_class(self, ws, results):
        ds = load_dataset(ws.data / "target_test.upld")
        with open(results, newline="") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == ds.n_cases * 2
        assert sorted({r["case_id"] for r in rows}) == sorted(ds.case_ids)
        assert {r["class"] for r in rows} == {"1", "2"}
        assert all(r["method"] == "single" for r in rows)
        for r in rows:
            assert 0.0 <= float(r["dice"]) <= 1.0

    def test_eval_twice_identical_csv(self, ws, results, tmp_path):
        out = tmp_path / "r.csv"
        rc = cli.main(["eval", "--checkpoint", str(ws.ckpt),
                       "--data", str(ws.data / "target_test.upld"),
                       "--out", str(out), "--mode", "single", "--seed", "9"])
        assert rc == 0
        assert sha(out) == sha(results)
        assert sha(out.with_name("r_summary.csv")) == sha(
            results.with_name("results_summary.csv"))

    def test_ensemble_mode_runs_on_single_head_checkpoint(self, ws, tmp_path):
        out = tmp_path / "e.csv"
        rc = cli.main(["eval", "--checkpoint", str(ws.ckpt),
                       "--data", str(ws.data / "target_test.upld"),
                       "--out", str(out), "--mode", "ensemble", "--seed", "9",
                       "--config", str(ws.cfg)])
        assert rc == 0
        with open(out, newline="") as f:
            assert all(r["method"] == "ensemble" for r in csv.DictReader(f))

    def test_summary_matches_hand_aggregation(self, results):
        with open(results, newline="") as f:
            rows = list(csv.DictReader(f))
        with open(results.with_name("results_summary.csv"), newline="") as f:
            summary = {r["class"]: r for r in csv.DictReader(f)}
        for cls in ("1", "2"):
            dices = [float(r["dice"]) for r in rows if r["class"] == cls]
            assert float(summary[cls]["n"]) == len(dices)
            assert abs(float(summary[cls]["dice_mean"]) - np.mean(dices)) < 1e-6
            assert abs(float(summary[cls]["dice_sd"]) - np.std(dices)) < 1e-6

    def test_t_test_against_itself_exits_3(self, ws, results, tmp_path, capsys):
        rc = cli.main(["eval", "--checkpoint", str(ws.ckpt),
                       "--data", str(ws.data / "target_test.upld"),
                       "--out", str(tmp_path / "r.csv"), "--mode", "single",
                       "--seed", "9", "--baseline", str(results)])
        assert rc == 3
        assert "data error" in capsys.readouterr().err

    def test_t_test_against_shifted_baseline(self, ws, results, tmp_path):
        baseline = tmp_path / "baseline.csv"
        rng = np.random.default_rng(3)
        with open(results, newline="") as f:
            rows = list(csv.reader(f))
        for i, row in enumerate(rows[1:]):
            row[3] = f"{max(0.0, float(row[3]) - rng.uniform(0.01, 0.1)):.6f}"
        with open(baseline, "w", newline="") as f:
            csv.writer(f).writerows(rows)
        out = tmp_path / "r.csv"
        rc = cli.main(["eval", "--checkpoint", str(ws.ckpt),
                       "--data", str(ws.data / "target_test.upld"),
                       "--out", str(out), "--mode", "single", "--seed", "9",
                       "--baseline", str(baseline)])
        assert rc == 0
        with open(out.with_name("r_summary.csv"), newline="") as f:
            for row in csv.DictReader(f):
                assert float(row["t_vs_baseline"]) > 0  # we shifted baseline down
                assert 0.0 < float(row["p_vs_baseline"]) <= 1.0

    def test_not_a_results_csv_baseline_exits_3(self, ws, results, tmp_path, capsys):
        junk = tmp_path / "junk.csv"
        junk.write_text("a,b\n1,2\n")
        rc = cli.main(["eval", "--checkpoint", str(ws.ckpt),
                       "--data", str(ws.data / "target_test.upld"),
                       "--out", str(tmp_path / "r.csv"), "--mode", "single",
                       "--baseline", str(junk)])
        assert rc == 3
        assert "not a results CSV" in capsys.readouterr().err

    def test_class_count_mismatch_exits_3(self, ws, tmp_path, capsys):
        ds = load_dataset(ws.data / "target_test.upld")
        labels = ds.labels.copy()
        labels[0, 0, 0] = 3  # one pixel beyond the checkpoint's classes
        rich = LabeledSet(ds.images, ds.case_index, list(ds.case_ids), labels=labels)
        path = tmp_path / "four_classes.upld"
        save_dataset(path, rich)
        rc = cli.main(["eval", "--checkpoint", str(ws.ckpt), "--data", str(path),
                       "--out", str(tmp_path / "r.csv")])
        assert rc == 3
        assert "class count mismatch" in capsys.readouterr().err


class TestAblate:
    def test_grid_rows_match_grid_size(self, ws):
        out = ws.root / "sweep"
        rc = cli.main(["ablate", "--checkpoint", str(ws.ckpt), "--data", str(ws.data),
                       "--out", str(out), "--config", str(ws.cfg), "--seed", "6",
                       "--grid", "heads=1,2", "tau=0.9,0.95"])
        assert rc == 0
        with open(out / "sweep.csv", newline="") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 4
        assert {(r["heads"], r["tau"]) for r in rows} == {
            ("1", "0.9"), ("1", "0.95"), ("2", "0.9"), ("2", "0.95")}
        for r in rows:
            assert 0.0 <= float(r["val_dice"]) <= 1.0

    def test_grid_of_one_matches_single_adapt_run(self, ws, tmp_path):
        out = tmp_path / "sweep1"
        rc = cli.main(["ablate", "--checkpoint", str(ws.ckpt), "--data", str(ws.data),
                       "--out", str(out), "--config", str(ws.cfg), "--seed", "6",
                       "--grid", "heads=2"])
        assert rc == 0
        with open(out / "sweep.csv", newline="") as f:
            row = list(csv.DictReader(f))[0]
        adapted = tmp_path / "adapted"
        rc = cli.main(["adapt", "--checkpoint", str(ws.ckpt), "--data", str(ws.data),
                       "--out", str(adapted), "--config", str(ws.cfg), "--seed", "6",
                       "--method", "upl"])
        assert rc == 0
        vals = [r["val_dice_mean"] for r in read_jsonl(adapted / "trainlog.jsonl")]
        assert float(row["val_dice"]) == max(vals)
        assert int(row["best_epoch"]) == int(np.argmax(vals))

    @pytest.mark.parametrize("grid,fragment", [
        (["heads"], "not key"),
        (["lr=1e-4"], "not allowed"),
        (["heads="], "no values"),
        (["heads=two"], "heads"),
    ])
    def test_bad_grid_exits_2(self, ws, tmp_path, capsys, grid, fragment):
        rc = cli.main(["ablate", "--checkpoint", str(ws.ckpt), "--data", str(ws.data),
                       "--out", str(tmp_path / "o"), "--grid"] + grid)
        assert rc == 2
        assert fragment in capsys.readouterr().err
