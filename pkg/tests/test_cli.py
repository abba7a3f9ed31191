import csv
import math

import numpy as np
import pytest
import torch

from scripts.lps import LpsConfig, sample_latent_prototype
from scripts.metrics import EvalReport, write_report_csv
from scripts.model import Decoder, save_checkpoint
from scripts.tensorfile import read_tensor_file, write_tensor_file
from scripts.utils import make_rng, split_seed
from train.cli import EXIT_CONFIG, EXIT_FORMAT, EXIT_NO_LATENT, EXIT_OK, main

FAST = ["--precision", "f64", "--episodes", "1"]


def read_rows(path):
    with path.open(encoding="utf-8", newline="") as fi:
        return list(csv.DictReader(fi))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert main(["train", "--steps", "10", "--out", str(out)] + FAST) == EXIT_OK
    return out


def test_train_writes_outputs(trained):
    rows = read_rows(trained / "loss.csv")
    assert len(rows) == 10
    assert list(rows[0]) == ["step", "lr", "L_main", "L_ce", "L_aux", "total"]
    assert [int(r["step"]) for r in rows] == list(range(10))
    assert (trained / "checkpoint.celp").is_file()
    assert "total_steps=10" in (trained / "config.txt").read_text(encoding="utf-8")


def test_train_is_reproducible(trained, tmp_path):
    assert main(["train", "--steps", "10", "--out", str(tmp_path)] + FAST) == EXIT_OK
    assert (tmp_path / "loss.csv").read_bytes() == (trained / "loss.csv").read_bytes()
    assert (tmp_path / "checkpoint.celp").read_bytes() == (trained / "checkpoint.celp").read_bytes()


def test_train_zero_ce_weight_column(tmp_path):
    assert main(["train", "--steps", "3", "--w-ce", "0", "--out", str(tmp_path)] + FAST) == EXIT_OK
    assert all(float(r["L_ce"]) == 0.0 for r in read_rows(tmp_path / "loss.csv"))


def test_train_with_unrestricted_distractors(tmp_path):
    out = tmp_path / "any"
    assert main(["train", "--steps", "2", "--distractors", "any", "--out", str(out)] + FAST) == EXIT_OK
    assert "distractors=any" in (out / "config.txt").read_text(encoding="utf-8")
    assert len(read_rows(out / "loss.csv")) == 2


def test_eval_is_reproducible(trained, tmp_path):
    ckpt = str(trained / "checkpoint.celp")
    assert main(["eval", "--checkpoint", ckpt, "--out", str(tmp_path / "a")] + FAST) == EXIT_OK
    assert main(["eval", "--checkpoint", ckpt, "--out", str(tmp_path / "b")] + FAST) == EXIT_OK
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert a == (tmp_path / "b" / "metrics.csv").read_bytes()
    rows = read_rows(tmp_path / "a" / "metrics.csv")
    assert rows[-1]["class_id"] == "all"
    assert {r["class_id"] for r in rows[:-1]} <= {"1", "2", "3"}


def test_eval_vote_needs_enough_shots(trained, tmp_path):
    ckpt = str(trained / "checkpoint.celp")
    assert main(["eval", "--checkpoint", ckpt, "--fusion", "v3", "--k", "2", "--out", str(tmp_path)] + FAST) \
        == EXIT_CONFIG


def test_eval_rejects_mismatched_checkpoint(tmp_path):
    ckpt = save_checkpoint(tmp_path / "small.celp", Decoder(hidden=16, dtype=torch.float64), 1)
    assert main(["eval", "--checkpoint", str(ckpt), "--out", str(tmp_path / "e")] + FAST) == EXIT_FORMAT
    (tmp_path / "junk.celp").write_bytes(b"junk")
    assert main(["eval", "--checkpoint", str(tmp_path / "junk.celp"), "--out", str(tmp_path / "e")] + FAST) \
        == EXIT_FORMAT


def _mine_inputs(tmp_path, mask):
    gen = torch.Generator().manual_seed(5)
    F_m = torch.randn(6, 5, 5, generator=gen, dtype=torch.float64)
    F_h = torch.ones(4, 5, 5, dtype=torch.float64) + 0.05 * torch.randn(4, 5, 5, generator=gen, dtype=torch.float64)
    paths = [write_tensor_file(tmp_path / n, t) for n, t in (("fm.celp", F_m), ("fh.celp", F_h), ("m.celp", mask))]
    return [str(p) for p in paths], (F_m, F_h)


def test_mine_writes_pseudo_mask_and_prototype(tmp_path):
    mask = torch.zeros(5, 5, dtype=torch.uint8)
    mask[:2] = 1
    (fm, fh, m), (F_m, F_h) = _mine_inputs(tmp_path, mask)
    out = tmp_path / "mine"
    assert main(["mine", fm, fh, m, "--seed", "3", "--out", str(out)]) == EXIT_OK
    pseudo, proto = read_tensor_file(out / "pseudo_mask.celp"), read_tensor_file(out / "prototype.celp")
    expected = sample_latent_prototype(F_m, F_h, mask, LpsConfig(seed=3), make_rng(split_seed(3)["lps"]))
    assert torch.equal(pseudo, expected.pseudo_mask)
    assert torch.equal(proto, expected.prototype)
    assert (out / "pseudo_mask.pgm").read_bytes().startswith(b"P5\n5 5\n255\n")
    assert (out / "config.txt").is_file()


def test_mine_all_foreground_has_no_latent_region(tmp_path):
    (fm, fh, m), _ = _mine_inputs(tmp_path, torch.ones(5, 5, dtype=torch.uint8))
    assert main(["mine", fm, fh, m, "--out", str(tmp_path / "mine")]) == EXIT_NO_LATENT
    assert not (tmp_path / "mine" / "pseudo_mask.celp").exists()


def test_mine_rejects_bad_inputs(tmp_path):
    (fm, fh, m), _ = _mine_inputs(tmp_path, torch.zeros(5, 5, dtype=torch.float32))
    assert main(["mine", fm, fh, m, "--out", str(tmp_path / "mine")]) == EXIT_FORMAT
    write_tensor_file(tmp_path / "m7.celp", torch.full((5, 5), 7, dtype=torch.uint8))
    assert main(["mine", fm, fh, str(tmp_path / "m7.celp"), "--out", str(tmp_path / "mine")]) == EXIT_FORMAT
    write_tensor_file(tmp_path / "m4.celp", torch.zeros(4, 4, dtype=torch.uint8))
    assert main(["mine", fm, fh, str(tmp_path / "m4.celp"), "--out", str(tmp_path / "mine")]) == EXIT_FORMAT


def test_config_errors(tmp_path):
    assert main(["train", "--delta", "1.5", "--out", str(tmp_path)]) == EXIT_CONFIG
    cfg = tmp_path / "bad.txt"
    cfg.write_text("delta=0.5\nno_such_key=1\n", encoding="utf-8")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["train", "--config", str(tmp_path / "missing.txt")]) == EXIT_CONFIG
    (tmp_path / "pool.txt").write_text("distractors=nearby\n", encoding="utf-8")
    assert main(["train", "--config", str(tmp_path / "pool.txt"), "--out", str(tmp_path)]) == EXIT_CONFIG
    with pytest.raises(SystemExit):
        main(["train", "--fold", "7"])
    with pytest.raises(SystemExit):
        main(["train", "--distractors", "nearby"])


def test_config_file_with_flag_override(tmp_path):
    cfg = tmp_path / "run.txt"
    cfg.write_text("# short run\ntotal_steps=2\nw_ce=0.25  # overridden\nprecision=f64\n", encoding="utf-8")
    out = tmp_path / "out"
    assert main(["train", "--config", str(cfg), "--w-ce", "0.5", "--out", str(out)]) == EXIT_OK
    text = (out / "config.txt").read_text(encoding="utf-8")
    assert "w_ce=0.5" in text and "total_steps=2" in text
    assert len(read_rows(out / "loss.csv")) == 2


@pytest.mark.parametrize("study,first_column,rows", [("delta", "delta", 4), ("weight", "w_ce", 4), ("kshot", "metric", 2)])
def test_ablate_tables(tmp_path, study, first_column, rows):
    out = tmp_path / study
    assert main(["ablate", "--study", study, "--steps", "2", "--out", str(out)] + FAST) == EXIT_OK
    table = read_rows(out / f"ablate_{study}.csv")
    assert len(table) == rows
    # every training run keeps a metrics.csv that report can merge
    assert len(list(out.rglob("metrics.csv"))) == (1 if study == "kshot" else 4)
    assert list(table[0])[0] == first_column
    if study == "kshot":
        assert list(table[0]) == ["metric", "avg", "v-1", "v-2", "v-3", "v-4", "v-5"]
        assert [r["metric"] for r in table] == ["miou", "fb_iou"]
    else:
        assert list(table[0])[1:] == ["miou_1shot", "fbiou_1shot", "miou_5shot", "fbiou_5shot"]
        for r in table:
            assert all(0.0 <= float(r[c]) <= 1.0 for c in list(r)[1:])


def test_ablate_unknown_study(tmp_path):
    assert main(["ablate", "--study", "gamma", "--out", str(tmp_path)]) == EXIT_CONFIG


def test_ablate_seed_runs_merge_into_median(tmp_path):
    out = tmp_path / "weight"
    args = ["ablate", "--study", "weight", "--steps", "2", "--seeds", "2", "--seed", "3", "--out", str(out)]
    assert main(args + FAST) == EXIT_OK
    cell = out / "w_ce_0.10"
    runs = sorted(str(p.parent) for p in cell.rglob("metrics.csv"))
    assert runs == [str(cell / "seed3" / "fold0"), str(cell / "seed4" / "fold0")]
    assert main(["report", *runs, "--out", str(tmp_path / "rep")]) == EXIT_OK
    merged = read_rows(tmp_path / "rep" / "report.csv")
    one_shot = [r for r in merged if r["class_id"] == "all" and r["K"] == "1"][0]
    assert one_shot["runs"] == "2"
    table = {r["w_ce"]: r for r in read_rows(out / "ablate_weight.csv")}
    assert float(table["0.10"]["miou_1shot"]) == pytest.approx(float(one_shot["miou_median"]), abs=2e-6)


def test_ablate_rejects_zero_seeds(tmp_path):
    assert main(["ablate", "--study", "weight", "--seeds", "0", "--out", str(tmp_path)]) == EXIT_CONFIG


def _run_dir(root, name, miou):
    report = EvalReport(fold=0, phase="test", K=1, fusion="avg", class_iou={1: miou, 2: miou},
                        miou=miou, fb_iou=0.5, episodes={1: 3, 2: 3}, ce_skipped=0)
    write_report_csv(root / name / "metrics.csv", [report])
    return str(root / name)


def test_report_single_run_is_identity(tmp_path):
    run = _run_dir(tmp_path, "r1", 0.42)
    assert main(["report", run, "--out", str(tmp_path / "rep")]) == EXIT_OK
    rows = read_rows(tmp_path / "rep" / "report.csv")
    overall = [r for r in rows if r["class_id"] == "all"][0]
    assert float(overall["miou_mean"]) == pytest.approx(0.42)
    assert float(overall["miou_std"]) == 0.0
    assert (tmp_path / "rep" / "summary.txt").is_file()


def test_report_identical_runs_have_zero_std(tmp_path):
    runs = [_run_dir(tmp_path, f"r{i}", 0.3) for i in range(3)]
    assert main(["report", *runs, "--out", str(tmp_path / "rep")]) == EXIT_OK
    rows = read_rows(tmp_path / "rep" / "report.csv")
    assert all(float(r["miou_std"]) == 0.0 for r in rows)
    assert all(r["runs"] == "3" for r in rows)


def test_report_two_runs_std(tmp_path):
    a, b = 0.3, 0.5
    runs = [_run_dir(tmp_path, "ra", a), _run_dir(tmp_path, "rb", b)]
    assert main(["report", *runs, "--out", str(tmp_path / "rep")]) == EXIT_OK
    overall = [r for r in read_rows(tmp_path / "rep" / "report.csv") if r["class_id"] == "all"][0]
    assert float(overall["miou_mean"]) == pytest.approx(0.4, abs=1e-6)
    assert float(overall["miou_std"]) == pytest.approx(abs(a - b) / math.sqrt(2), abs=1e-6)


def test_report_median_over_seeds(tmp_path):
    runs = [_run_dir(tmp_path, f"s{i}", v) for i, v in enumerate((0.2, 0.9, 0.4))]
    assert main(["report", *runs, "--out", str(tmp_path / "rep")]) == EXIT_OK
    overall = [r for r in read_rows(tmp_path / "rep" / "report.csv") if r["class_id"] == "all"][0]
    assert float(overall["miou_median"]) == pytest.approx(0.4, abs=1e-6)
    assert float(overall["miou_mean"]) == pytest.approx(0.5, abs=1e-6)
    assert "(median 0.400000)" in (tmp_path / "rep" / "summary.txt").read_text(encoding="utf-8")


def test_report_lists_malformed_directories(tmp_path):
    good = _run_dir(tmp_path, "good", 0.6)
    broken = tmp_path / "broken"
    broken.mkdir()
    (broken / "metrics.csv").write_text("nothing,useful\n1,2\n", encoding="utf-8")
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["report", good, str(broken), str(empty), "--out", str(tmp_path / "rep")]) == EXIT_OK
    summary = (tmp_path / "rep" / "summary.txt").read_text(encoding="utf-8")
    assert str(broken) in summary and str(empty) in summary
    assert "runs merged: 1" in summary


def test_seed_streams_are_independent_and_reproducible():
    streams = split_seed(0)
    draws = {name: make_rng(ss).integers(1 << 30) for name, ss in streams.items()}
    assert len(set(draws.values())) == len(draws)
    assert np.array_equal(make_rng(split_seed(0)["lps"]).integers(1 << 30, size=4),
                          make_rng(split_seed(0)["lps"]).integers(1 << 30, size=4))
