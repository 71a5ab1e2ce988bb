import json
from pathlib import Path

import pytest

from opalab.cli import (EXIT_INPUT, EXIT_MISMATCH, EXIT_ORACLE, EXIT_RECOUNT, EXIT_TRAINING, main)
from opalab.datagen import GenConfig, generate
from opalab.experiment import ExperimentConfig, ExperimentError, build_days, read_report
from opalab.model import Instance, save_instance

from conftest import hand_instance

TINY_BENCH = {
    "generator": {"n_parcels": 300, "n_hubs": 6, "n_od_pairs": 6, "n_providers": 3, "proportion_fraction": 0.5},
    "train": {"episodes": 1, "trajectories_per_episode": 2, "minibatch": 256},
    "history_days": 2, "eval_days": 1, "seeds": [1],
}


@pytest.fixture(scope="module")
def bench_dirs(tmp_path_factory):
    root = tmp_path_factory.mktemp("bench")
    cfg = root / "bench.json"
    cfg.write_text(json.dumps(TINY_BENCH))
    for name in ("a", "b"):
        assert main(["bench", "--config", str(cfg), "--out", str(root / name)]) == 0
    return root / "a", root / "b"


def _files(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.suffix in (".tsv", ".txt", ".log", ".opa")}


def test_bench_writes_reports_for_every_policy(bench_dirs):
    a, _ = bench_dirs
    reports = list(a.glob("seed-1/*/report.tsv"))
    assert len(reports) == 1
    rows = read_report(reports[0])
    assert list(rows) == ["ppo-opa", "ppo-pd", "proportion", "pdo", "greedy"]
    text = reports[0].with_name("report.txt").read_text()
    assert "Algorithm" in text and "IP Gap" in text and "Violation Rate" in text
    assert (a / "summary.tsv").read_text().count("\n") == 6


def test_bench_rerun_byte_identical(bench_dirs):
    a, b = bench_dirs
    fa, fb = _files(a), _files(b)
    assert fa.keys() == fb.keys() and fa == fb


def test_recount_bench_ok(bench_dirs, capsys):
    a, _ = bench_dirs
    assert main(["recount", "--bench", str(a)]) == 0
    out = capsys.readouterr().out
    assert out.count("\tok") == 5 and "MISMATCH" not in out


def test_recount_detects_tampered_report(bench_dirs, tmp_path):
    import shutil
    a, _ = bench_dirs
    copy = tmp_path / "copy"
    shutil.copytree(a, copy)
    report = next(copy.glob("seed-1/*/report.tsv"))
    lines = report.read_text().splitlines()
    cells = lines[-1].split("\t")
    cells[1] = repr(float(cells[1]) + 1e-6)
    lines[-1] = "\t".join(cells)
    report.write_text("\n".join(lines) + "\n")
    assert main(["recount", "--bench", str(copy)]) == EXIT_RECOUNT


def test_no_training_day_leak(bench_dirs):
    a, _ = bench_dirs
    days = build_days(ExperimentConfig.from_dict(TINY_BENCH), 1)
    evaluated = {p.parent.name for p in a.glob("seed-1/*/report.tsv")}
    assert days.train.label not in evaluated and days.train.label == days.history[-1].label


def test_explicit_instances_reject_leak(tmp_path):
    inst = generate(GenConfig(seed=1, n_parcels=200))
    save_instance(inst, tmp_path / "d.opa")
    cfg = ExperimentConfig(train_instance=str(tmp_path / "d.opa"), eval_instances=(str(tmp_path / "d.opa"),))
    with pytest.raises(ExperimentError, match="also an evaluation day"):
        build_days(cfg, 0)


def test_eval_greedy_on_hand_instance(tmp_path, capsys):
    save_instance(hand_instance(capacity=1), tmp_path / "hand.opa")
    code = main(["eval", "--instance", str(tmp_path / "hand.opa"), "--policy", "greedy",
                 "--oracle-tier", "exact", "--out", str(tmp_path / "ev")])
    assert code == 0
    row = read_report(tmp_path / "ev" / "report.tsv")["greedy"]
    assert row["total_cost"] == 2.0 and row["violation_rate"] == 0.5
    assert row["ip_gap"] == pytest.approx(-1 / 3)
    assert main(["recount", "--instance", str(tmp_path / "hand.opa"), "--log", str(tmp_path / "ev" / "greedy.log"),
                 "--report", str(tmp_path / "ev" / "report.tsv")]) == 0


def test_greedy_zero_gap_without_constraints(tmp_path):
    base = generate(GenConfig(seed=3, n_parcels=500))
    free = Instance("free", base.parcels, base.routes, ())
    save_instance(free, tmp_path / "free.opa")
    assert main(["eval", "--instance", str(tmp_path / "free.opa"), "--policy", "greedy",
                 "--oracle-tier", "bound", "--out", str(tmp_path / "ev")]) == 0
    assert read_report(tmp_path / "ev" / "report.tsv")["greedy"]["ip_gap"] == 0.0
    assert "0.0000%" in (tmp_path / "ev" / "report.txt").read_text()


def test_gen_train_eval_round(tmp_path, capsys):
    cfg = tmp_path / "g.json"
    GenConfig(seed=2, n_parcels=200, n_hubs=5, n_od_pairs=4).dump(cfg)
    assert main(["gen", "--config", str(cfg), "--days", "2", "--out", str(tmp_path / "days")]) == 0
    d0, d1 = sorted((tmp_path / "days").glob("*.opa"))
    assert main(["train", "--instance", str(d0), "--episodes", "1", "--trajectories", "2",
                 "--out", str(tmp_path / "ck")]) == 0
    assert (tmp_path / "ck" / "actor.npz").exists() and (tmp_path / "ck" / "train_log.tsv").exists()
    assert main(["eval", "--instance", str(d1), "--policy", "ppo-opa", "--checkpoint", str(tmp_path / "ck" / "actor.npz"),
                 "--out", str(tmp_path / "ev")]) == 0
    assert main(["solve", "--instance", str(d1), "--oracle-tier", "bound", "--out", str(tmp_path / "s.tsv")]) == 0
    assert (tmp_path / "s.tsv").read_text().startswith("parcel\troute")


def test_exit_codes(tmp_path, capsys):
    assert main(["eval", "--instance", str(tmp_path / "missing.opa"), "--policy", "greedy",
                 "--out", str(tmp_path)]) == EXIT_INPUT
    (tmp_path / "bad.opa").write_text("garbage\n")
    assert main(["solve", "--instance", str(tmp_path / "bad.opa")]) == EXIT_INPUT
    (tmp_path / "cfg.json").write_text('{"generator": {"bogus": 1}}')
    assert main(["bench", "--config", str(tmp_path / "cfg.json"), "--out", str(tmp_path / "o")]) == EXIT_INPUT

    big = generate(GenConfig(seed=1, n_parcels=200))
    save_instance(big, tmp_path / "big.opa")
    assert main(["solve", "--instance", str(tmp_path / "big.opa"), "--oracle-tier", "exact"]) == EXIT_ORACLE

    save_instance(hand_instance(), tmp_path / "hand.opa")
    assert main(["train", "--instance", str(tmp_path / "hand.opa"), "--episodes", "1", "--trajectories", "1",
                 "--lambda-cap", "nan", "--out", str(tmp_path / "nan")]) == EXIT_TRAINING
    assert main(["train", "--instance", str(tmp_path / "big.opa"), "--episodes", "1", "--trajectories", "1",
                 "--out", str(tmp_path / "ck")]) == 0
    assert main(["eval", "--instance", str(tmp_path / "hand.opa"), "--policy", "ppo-opa",
                 "--checkpoint", str(tmp_path / "ck" / "actor.npz"), "--out", str(tmp_path / "e")]) == EXIT_MISMATCH
    with pytest.raises(SystemExit) as exc:
        main(["bogus"])
    assert exc.value.code == 2
