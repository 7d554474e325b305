import json

import pytest

from conceptwm.cli import build_parser, main


def write_config(tmp_path, out_dir):
    cfg = {
        "seed": 2,
        "paths": {"out_dir": str(out_dir)},
        "dataset": {"n_concepts": 2, "images_per_concept": 12, "base_images": 16,
                    "image_size": 32},
        "backend": {"hidden_channels": 8, "train_steps": 6, "alt_decoder_steps": 4,
                    "batch_size": 8},
        "codec": {"message_bits": 8, "msg_channels": 2, "hidden_channels": 8,
                  "train_steps": 4, "batch_size": 4},
        "diffusion": {"timesteps": 40, "channels": 16, "alt_channels": 24,
                      "train_steps": 6, "batch_size": 8},
        "iapi": {"pgd_steps": 1, "surrogate_steps": 1},
        "ecwt": {"rounds": 1, "concept_steps_per_round": 1, "wm_steps_per_round": 1,
                 "n_prior_images": 2, "n_adapt_per_prompt": 0, "sample_steps": 2,
                 "prompt_pool": ["photo"]},
        "sample": {"steps": 2, "n_images": 2, "guidance_scale": 1.0},
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def test_parser_has_all_stages():
    parser = build_parser()
    for stage in ("train-base", "pretrain-codec", "protect", "embed-concept",
                  "generate", "detect", "trace", "evaluate", "ablate"):
        args = parser.parse_args([stage, "--config", "x.json"])
        assert args.command == stage


def test_schema_command(capsys):
    assert main(["schema"]) == 0
    out = capsys.readouterr().out
    schema = json.loads(out)
    assert schema["title"] == "conceptwm run configuration"
    assert schema["additionalProperties"] is False


def test_cli_stage_and_generate_flags(tmp_path, capsys):
    cfg_path = write_config(tmp_path, tmp_path / "run")
    assert main(["train-base", "--config", str(cfg_path)]) == 0
    assert "train-base: completed" in capsys.readouterr().out
    assert main(["pretrain-codec", "--config", str(cfg_path)]) == 0
    assert main(["protect", "--config", str(cfg_path)]) == 0
    assert main(["embed-concept", "--config", str(cfg_path)]) == 0
    capsys.readouterr()
    assert main([
        "generate", "--config", str(cfg_path),
        "--sampler", "heun", "--steps", "3", "--guidance-scale", "1.0", "--size", "64",
    ]) == 0
    assert "generate: completed" in capsys.readouterr().out
    manifest = json.loads((tmp_path / "run" / "manifest.json").read_text())
    stages = [r["stage"] for r in manifest["records"]]
    assert stages[-1] == "generate"

    assert main(["export", "--config", str(cfg_path), "--format", "csv"]) == 0
    out = capsys.readouterr().out.strip()
    assert out.endswith("metrics.csv")
    assert (tmp_path / "run" / "exports" / "metrics.csv").exists()


def test_cli_seed_and_out_override(tmp_path, capsys):
    cfg_path = write_config(tmp_path, tmp_path / "runA")
    assert main(["train-base", "--config", str(cfg_path),
                 "--seed", "5", "--out", str(tmp_path / "runB")]) == 0
    assert (tmp_path / "runB" / "manifest.json").exists()
    assert not (tmp_path / "runA" / "manifest.json").exists()
