import json
from pathlib import Path

import numpy as np
import pytest

from mudaif import cli
from mudaif.data import load_manifest


def run_cli(capsys, *argv):
    code = cli.main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def write_config(path, manifest, **overrides):
    doc = {
        "seed": 3,
        "model": {"embed_dim": 8, "n_layers": 1, "n_heads": 2, "max_seq_len": 48,
                  "patch_size": 8, "conv_channels": 6, "max_patch_grid": 8},
        "phases": [{"tag": "pretrain", "manifest": str(manifest), "split": "train",
                    "epochs": 2, "batch_size": 4, "learning_rate": 1e-3,
                    "warmup_steps": 4}],
    }
    doc.update(overrides)
    Path(path).write_text(json.dumps(doc))
    return path


@pytest.fixture()
def dataset(tmp_path, capsys):
    out = tmp_path / "data"
    code, stdout, _ = run_cli(capsys, "make-data", "--n", "12", "--seed", "9",
                              "--out", str(out))
    assert code == 0
    return Path(json.loads(stdout)["manifest"])


def test_make_data_happy_path_and_count(dataset):
    assert dataset.exists()
    assert len(dataset.read_text().splitlines()) == 12
    assert len(load_manifest(dataset)) == 12


def test_make_data_missing_out_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["make-data", "--n", "5"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_make_data_bad_spec_is_config_error(tmp_path, capsys):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"bogus_knob": 1}))
    code, _, err = run_cli(capsys, "make-data", "--spec", str(spec), "--n", "2",
                           "--out", str(tmp_path / "d"))
    assert code == 2
    assert "bogus_knob" in err


def test_train_writes_report_checkpoint_and_figure(tmp_path, dataset, capsys):
    config = write_config(tmp_path / "run.json", dataset)
    out = tmp_path / "run_out"
    code, stdout, _ = run_cli(capsys, "train", "--config", str(config), "--out", str(out))
    assert code == 0
    summary = json.loads(stdout)
    assert summary["final_loss"]["pretrain"] > 0
    for name in ("checkpoint.bin", "report.jsonl", "summary.json", "timing.json",
                 "loss_curve.png"):
        assert (out / name).exists(), name
    rows = [json.loads(line) for line in (out / "report.jsonl").read_text().splitlines()]
    assert rows[0]["step"] == 0 and "loss" in rows[0]
    assert "wall" not in json.dumps(rows)  # determinism surface carries no timing


def test_train_corrupt_config_reports_schema_path(tmp_path, dataset, capsys):
    config = tmp_path / "bad.json"
    config.write_text(json.dumps({"seed": 1, "model": {"embed_dim": 8}, "phases": []}))
    code, _, err = run_cli(capsys, "train", "--config", str(config), "--out",
                           str(tmp_path / "x"))
    assert code == 2
    assert "$.model.n_layers" in err

    config.write_text("{not json")
    code, _, err = run_cli(capsys, "train", "--config", str(config), "--out",
                           str(tmp_path / "x"))
    assert code == 2
    assert "invalid JSON" in err

    config.write_text(json.dumps({"seed": 1, "mdoel": {}, "phases": []}))
    code, _, err = run_cli(capsys, "train", "--config", str(config), "--out",
                           str(tmp_path / "x"))
    assert code == 2
    assert "$.mdoel" in err


def test_train_same_seed_twice_identical_outputs(tmp_path, dataset, capsys):
    config = write_config(tmp_path / "run.json", dataset)
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        code, _, _ = run_cli(capsys, "train", "--config", str(config), "--out", str(out))
        assert code == 0
        outs.append(out)
    for name in ("report.jsonl", "summary.json", "checkpoint.bin"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name


def trained_run(tmp_path, dataset, capsys):
    config = write_config(tmp_path / "run.json", dataset)
    out = tmp_path / "trained"
    assert run_cli(capsys, "train", "--config", str(config), "--out", str(out))[0] == 0
    return out / "checkpoint.bin"


def test_generate_deterministic_and_missing_image(tmp_path, dataset, capsys):
    ckpt = trained_run(tmp_path, dataset, capsys)
    image = dataset.parent / load_manifest(dataset)[0].image
    outputs = {run_cli(capsys, "generate", "--checkpoint", str(ckpt), "--image",
                       str(image), "--seed", "4")[:2] for _ in range(2)}
    assert len(outputs) == 1
    code, _, err = run_cli(capsys, "generate", "--checkpoint", str(ckpt),
                           "--image", str(tmp_path / "nope.ppm"))
    assert code == 1
    assert "nope.ppm" in err


def test_generate_rejects_bad_decode_params(tmp_path, dataset, capsys):
    ckpt = trained_run(tmp_path, dataset, capsys)
    image = dataset.parent / load_manifest(dataset)[0].image
    code, _, err = run_cli(capsys, "generate", "--checkpoint", str(ckpt), "--image",
                           str(image), "--decode", "temperature", "--temperature", "0")
    assert code == 2 and "temperature" in err
    code, _, err = run_cli(capsys, "generate", "--checkpoint", str(ckpt), "--image",
                           str(image), "--decode", "top-k", "--top-k", "0")
    assert code == 2 and "k >= 1" in err


def test_eval_reports_metrics(tmp_path, dataset, capsys):
    ckpt = trained_run(tmp_path, dataset, capsys)
    code, stdout, _ = run_cli(capsys, "eval", "--checkpoint", str(ckpt),
                              "--manifest", str(dataset), "--split", "train")
    assert code == 0
    result = json.loads(stdout)
    assert result["records"] == 12
    assert result["perplexity"] > 1.0
    assert 0.0 <= result["caption_exact_match"] <= 1.0
    assert result["qa_records"] == 0 and result["answer_exact_match"] is None


def test_eval_untrained_uniform_perplexity(tmp_path, capsys):
    # vocabulary padded to 64 entries; untrained head gives perplexity == 64
    out = tmp_path / "data"
    run_cli(capsys, "make-data", "--n", "6", "--seed", "1", "--out", str(out))
    manifest = out / "manifest.jsonl"
    from mudaif import checkpoint
    from mudaif.data import Vocabulary, build_vocab
    from mudaif.model import ModelConfig, init_params

    vocab = build_vocab(manifest)
    tokens = vocab.tokens + [f"<fill{i}>" for i in range(64 - len(vocab))]
    config = ModelConfig(embed_dim=8, n_layers=1, n_heads=2, vocab_size=64,
                         max_seq_len=48, patch_size=8, conv_channels=6, max_patch_grid=8)
    ckpt = tmp_path / "untrained.bin"
    checkpoint.save_model(ckpt, config, init_params(config, seed=0), tokens)
    code, stdout, _ = run_cli(capsys, "eval", "--checkpoint", str(ckpt),
                              "--manifest", str(manifest), "--split", "train")
    assert code == 0
    assert abs(json.loads(stdout)["perplexity"] - 64.0) < 1.0


def test_gradcheck_cli(tmp_path, dataset, capsys):
    config = write_config(tmp_path / "run.json", dataset)
    doc = json.loads(Path(config).read_text())
    doc["model"] = {"embed_dim": 4, "n_layers": 1, "n_heads": 2, "max_seq_len": 16,
                    "patch_size": 4, "conv_channels": 3, "max_patch_grid": 4,
                    "vocab_size": 8}
    Path(config).write_text(json.dumps(doc))
    code, stdout, _ = run_cli(capsys, "gradcheck", "--config", str(config))
    result = json.loads(stdout)
    assert code == 0 and result["pass"] and result["max_relative_error"] < 1e-4

    doc["model"]["embed_dim"] = 64
    doc["model"]["conv_channels"] = 64
    doc["model"]["max_seq_len"] = 64
    Path(config).write_text(json.dumps(doc))
    code, _, err = run_cli(capsys, "gradcheck", "--config", str(config))
    assert code == 2 and "parameters" in err


def test_bench_csv_monotone_and_positive(tmp_path, dataset, capsys):
    config = write_config(tmp_path / "run.json", dataset,
                          model={"embed_dim": 8, "n_layers": 1, "n_heads": 2,
                                 "max_seq_len": 128, "patch_size": 8,
                                 "conv_channels": 6, "max_patch_grid": 16})
    out = tmp_path / "bench_out"
    code, stdout, _ = run_cli(capsys, "bench", "--config", str(config),
                              "--image-sizes", "16x16,32x32,64x64", "--out", str(out))
    assert code == 0
    lines = stdout.strip().splitlines()
    header = lines[0].split(",")
    rows = [dict(zip(header, line.split(","))) for line in lines[1:]]
    assert len(rows) == 3
    for row in rows:
        assert int(row["params_encoder_free"]) < int(row["params_encoder_based"])
        assert int(row["flops_encoder_free"]) < int(row["flops_encoder_based"])
        assert float(row["forward_ms"]) > 0
    flops = [int(r["flops_encoder_free"]) for r in rows]
    assert flops == sorted(flops)
    assert (out / "bench.csv").exists() and (out / "bench.png").exists()

    code, _, err = run_cli(capsys, "bench", "--config", str(config),
                           "--image-sizes", "32by32")
    assert code == 2 and "32by32" in err


def test_inspect_attn_outputs_match_recomputation(tmp_path, dataset, capsys):
    ckpt = trained_run(tmp_path, dataset, capsys)
    record = load_manifest(dataset)[0]
    image = dataset.parent / record.image
    out = tmp_path / "attn"
    code, stdout, _ = run_cli(capsys, "inspect-attn", "--checkpoint", str(ckpt),
                              "--image", str(image), "--text", record.caption,
                              "--out", str(out))
    assert code == 0
    files = json.loads(stdout)["files"]
    assert any("visual_to_text" in f for f in files)
    assert any("text_to_visual" in f for f in files)
    assert any("layer0_head0" in f for f in files)

    from mudaif import checkpoint as ckpt_mod, core, model
    from mudaif.data import Vocabulary, load_image

    cfg, params, tokens, _ = ckpt_mod.load_model(ckpt)
    vocab = Vocabulary(tokens)
    sink = []
    with core.no_grad():
        model.forward(load_image(image), vocab.encode(record.caption), None, params, cfg,
                      attn_sink=sink)
    by_name = {name: matrix for name, matrix in sink}
    l = len(vocab.encode(record.caption))
    vis_to_text = np.loadtxt(out / "attn_visual_to_text.csv", delimiter=",", ndmin=2)
    text_to_vis = np.loadtxt(out / "attn_text_to_visual.csv", delimiter=",", ndmin=2)
    n = by_name["visual_to_text"].shape[0]
    assert vis_to_text.shape == (n, l) and text_to_vis.shape == (l, n)
    assert np.abs(vis_to_text.sum(axis=1) - 1).max() < 1e-6
    assert np.abs(text_to_vis.sum(axis=1) - 1).max() < 1e-6
    assert np.array_equal(vis_to_text, by_name["visual_to_text"])
    for f in files:
        name = Path(f).stem.removeprefix("attn_")
        if name.startswith("layer"):
            layer, head = name.split("_")
            key = f"{layer}.{head}"
            assert np.abs(np.loadtxt(f, delimiter=",") - by_name[key]).max() < 1e-15


def test_threads_env_does_not_change_eval(tmp_path, dataset, capsys, monkeypatch):
    ckpt = trained_run(tmp_path, dataset, capsys)
    results = []
    for threads in ("1", "3"):
        monkeypatch.setenv("MUDAIF_THREADS", threads)
        code, stdout, _ = run_cli(capsys, "eval", "--checkpoint", str(ckpt),
                                  "--manifest", str(dataset), "--split", "train")
        assert code == 0
        results.append(stdout)
    assert results[0] == results[1]
