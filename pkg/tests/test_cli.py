import csv
import json
import os
from unittest import mock

import pytest

from app import cli
from app.exception import LossExplosionError
from app.schemas import EvalReport, ExperimentConfig
from app.settings import settings

CONFIG_DIR = os.path.join(os.path.dirname(__file__), "..", "config")


@pytest.fixture(autouse=True)
def cli_settings(monkeypatch):
    monkeypatch.setattr(settings, "LOG_JSON", False)
    monkeypatch.setattr(settings, "DEFAULT_CONFIG_PATH", os.path.join(CONFIG_DIR, "config.yaml"))


def run(*argv):
    return cli.main(list(argv))


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def test_empty_stage_set_is_a_config_error(tiny_config_file, tmp_path, capsys):
    assert run("search", "--config", tiny_config_file, "--stages", "", "--out", str(tmp_path)) == 1
    assert "empty stage set" in capsys.readouterr().err


def test_unknown_protocol_is_a_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        run("eval", "--checkpoint", "model.nfs", "--protocol", "rgb-to-rgb", "--out", str(tmp_path))
    assert exc.value.code == 2


def test_invalid_config_value(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("contrastive:\n  margin_T: -3\n")
    assert run("gen-data", "--config", str(path), "--out", str(tmp_path / "run")) == 1


def test_flags_override_config_file(tiny_config_file):
    args = cli.build_parser().parse_args(["search", "--config", tiny_config_file, "--stages", "3,1", "--lambda", "0",
                                          "--order", "second", "--seed", "9"])
    config = cli.resolve_config(args)
    assert config.model.searched_stages == [1, 3]
    assert config.contrastive.lambda_weight == 0.0
    assert config.bilevel.order.value == "second"
    assert config.seed == 9
    assert config.data.n_train_ids == 4


def test_search_train_eval_pipeline(tiny_config_file, tmp_path, capsys):
    search_dir, train_dir, eval_dir = (str(tmp_path / name) for name in ("search", "train", "eval"))
    assert run("search", "--config", tiny_config_file, "--out", search_dir) == 0
    manifest = read_json(os.path.join(search_dir, "manifest.json"))
    assert manifest["subcommand"] == "search"
    assert manifest["seeds"] == {"seed": 3, "dataset_seed": 5}
    assert set(manifest["split_hashes"]) == {"search_train", "search_val"}
    assert manifest["artifacts"]["gates"] == os.path.join("gates", "gates.nfs")
    assert os.path.exists(os.path.join(search_dir, "gates", "stage1.pixel.rgb.gate.pgm"))
    exports = sorted(f for f in os.listdir(os.path.join(search_dir, "gates")) if f.endswith((".pgm", ".csv")))
    listed = sorted(k.split(":", 1)[1] for k in manifest["artifacts"] if k.startswith("gate_export:"))
    assert exports and listed == exports
    assert manifest["artifacts"]["gate_export:stage1.pixel.rgb.gate.pgm"] == os.path.join(
        "gates", "stage1.pixel.rgb.gate.pgm")
    assert len(read_json(os.path.join(search_dir, "logs", "search_log.json"))) == 1

    gates = os.path.join(search_dir, "gates", "gates.nfs")
    assert run("train", "--config", tiny_config_file, "--gates", gates, "--out", train_dir) == 0
    with open(os.path.join(train_dir, "logs", "loss.csv")) as fh:
        rows = list(csv.DictReader(fh))
    assert [row["epoch"] for row in rows] == ["0", "1"]
    train_manifest = read_json(os.path.join(train_dir, "manifest.json"))
    assert train_manifest["artifacts"]["input:gates"] == os.path.relpath(gates, train_dir)
    assert train_manifest["artifact_hashes"]["input:gates"] == manifest["artifact_hashes"]["gates"]

    checkpoint = os.path.join(train_dir, "checkpoints", "model.nfs")
    assert run("eval", "--checkpoint", checkpoint, "--dump-ranks", "--out", eval_dir) == 0
    table = capsys.readouterr().out
    assert "| visible-to-infrared |" in table and "| infrared-to-visible |" in table
    for protocol in ("visible-to-infrared", "infrared-to-visible"):
        report = EvalReport.model_validate(read_json(os.path.join(eval_dir, "reports", f"{protocol}.json")))
        assert report.seed == 3
        assert os.path.exists(os.path.join(eval_dir, "reports", f"{protocol}.ranks.csv"))
    eval_manifest = read_json(os.path.join(eval_dir, "manifest.json"))
    assert eval_manifest["artifacts"]["input:checkpoint"] == os.path.relpath(checkpoint, eval_dir)
    assert eval_manifest["artifact_hashes"]["input:checkpoint"] == train_manifest["artifact_hashes"]["checkpoint"]


def test_reruns_are_reproducible(tiny_config_file, tmp_path):
    hashes = []
    for name in ("a", "b"):
        out = str(tmp_path / name)
        assert run("search", "--config", tiny_config_file, "--out", out) == 0
        hashes.append(read_json(os.path.join(out, "manifest.json"))["manifest_hash"])
    assert hashes[0] == hashes[1]

    reports = []
    for name in ("a", "b"):
        out = str(tmp_path / name)
        gates = os.path.join(out, "gates", "gates.nfs")
        assert run("train", "--config", tiny_config_file, "--gates", gates, "--out", out) == 0
        assert run("eval", "--checkpoint", os.path.join(out, "checkpoints", "model.nfs"),
                   "--protocol", "visible-to-infrared", "--out", out) == 0
        with open(os.path.join(out, "reports", "visible-to-infrared.json"), "rb") as fh:
            reports.append(fh.read())
    assert reports[0] == reports[1]


def test_corrupt_gate_bundle_fails_cleanly(tiny_config_file, tmp_path, capsys):
    bad = tmp_path / "gates.nfs"
    bad.write_bytes(b"not a container")
    assert run("train", "--config", tiny_config_file, "--gates", str(bad), "--out", str(tmp_path / "run")) == 1
    assert "bad magic" in capsys.readouterr().err


def test_train_without_gates_is_the_baseline(tiny_config_file, tmp_path):
    out = str(tmp_path / "baseline")
    assert run("train", "--config", tiny_config_file, "--out", out) == 0
    net, config = cli.load_model(os.path.join(out, "checkpoints", "model.nfs"))
    assert net.search_cells == {}
    assert config.model.searched_stages == []


def test_loss_explosion_writes_diagnostics(tiny_config_file, tmp_path):
    out = tmp_path / "run"
    error = LossExplosionError("l_train became nan", {"epoch": 0, "step": 3})
    with mock.patch("app.cli.cmd_search", side_effect=error):
        assert run("search", "--config", tiny_config_file, "--out", str(out)) == 1
    assert read_json(out / "logs" / "diagnostics.json") == {"epoch": 0, "step": 3}


def test_gen_data_writes_manifest_and_cache(tiny_config_file, tmp_path):
    out = tmp_path / "data"
    assert run("gen-data", "--config", tiny_config_file, "--cache", "--dataset-seed", "8", "--out", str(out)) == 0
    dataset = read_json(out / "dataset_manifest.json")
    assert dataset["seed"] == 8
    assert len(dataset["train_specs"]) == 4 * 2 * 4
    assert (out / "cache" / "images.nfs").exists()
    identities = read_json(out / "identities.json")
    assert [s["id"] for s in identities] == list(range(7))
    assert all(len(s["signature"]) == 16 for s in identities)
    assert set(read_json(out / "manifest.json")["artifacts"]) == {"dataset_manifest", "identities", "image_cache"}


def test_ablation_grid_modes(tiny_experiment):
    assert [label for label, _ in cli.ablation_grid("variants", tiny_experiment)] == ["B", "B+N", "B+C", "B+N+C"]
    assert len(cli.ablation_grid("stages", tiny_experiment)) == 15
    assert len(cli.ablation_grid("tricks", tiny_experiment)) == 4
    assert cli.ablation_grid("lambda", tiny_experiment)[2] == ("lambda0.04", {"contrastive": {"lambda_weight": 0.04}})


def fake_pipeline(config: ExperimentConfig, out, context=None):
    rank1 = 0.25 * (config.enable_search + 2 * config.enable_contrastive)
    return EvalReport(protocol=cli.ABLATION_PROTOCOL, query_modality="rgb", gallery_modality="ir",
                      seed=config.seed, cmc=[rank1, 1.0], map=0.5)


def test_ablate_summarises_and_resumes(tiny_config_file, tmp_path, capsys):
    out = tmp_path / "ablate"
    done = out / "ablation" / "variants" / "B" / "seed0" / "reports"
    done.mkdir(parents=True)
    (done / f"{cli.ABLATION_PROTOCOL}.json").write_text(fake_pipeline(ExperimentConfig(
        enable_search=False, enable_contrastive=False), str(done.parent)).model_dump_json())

    with mock.patch("app.cli.run_pipeline", side_effect=fake_pipeline) as pipeline:
        assert run("ablate", "--config", tiny_config_file, "--mode", "variants", "--seeds", "0,1",
                   "--out", str(out)) == 0
    assert pipeline.call_count == 7
    with open(out / "reports" / "ablation_variants.csv") as fh:
        rows = {row["variant"]: row for row in csv.DictReader(fh)}
    assert float(rows["B"]["rank1_mean"]) == 0.0
    assert float(rows["B+N"]["rank1_mean"]) == 0.25
    assert float(rows["B+N+C"]["rank1_mean"]) == 0.75
    assert rows["B+C"]["seeds"] == "0;1"
    assert "| B+N+C | 75.00 | 50.00 | 0;1 |" in capsys.readouterr().out
    assert (out / "reports" / "ablation_variants.md").exists()


def test_stage_ablation_table_has_one_row_per_stage_subset(tiny_config_file, tmp_path, capsys):
    def stage_pipeline(config, out, context=None):
        return EvalReport(protocol=cli.ABLATION_PROTOCOL, query_modality="rgb", gallery_modality="ir",
                          seed=config.seed, cmc=[len(config.model.searched_stages) / 4, 1.0], map=0.5)

    out = tmp_path / "stages"
    with mock.patch("app.cli.run_pipeline", side_effect=stage_pipeline):
        assert run("ablate", "--config", tiny_config_file, "--mode", "stages", "--seeds", "0",
                   "--out", str(out)) == 0
    lines = (out / "reports" / "ablation_stages.md").read_text().splitlines()
    assert lines[0] == "| variant | rank1_mean | map_mean | seeds |"
    assert len(lines) == 2 + 15
    assert "| stages-1 | 25.00 | 50.00 | 0 |" in lines
    assert lines[-1] == "| stages-1-2-3-4 | 100.00 | 50.00 | 0 |"
    assert "| stages-2-4 | 50.00 | 50.00 | 0 |" in capsys.readouterr().out
