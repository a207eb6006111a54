"""End-to-end command-line flows in a temporary directory."""

import json

import pytest

from conceptshot.cli import main


def write_config(tmp_path, **extra):
    d = {
        "paths": {
            "graph": str(tmp_path / "art" / "graph.json"),
            "dataset": str(tmp_path / "art" / "data.bin"),
            "checkpoint": str(tmp_path / "art" / "model.ckpt"),
            "metrics": str(tmp_path / "art" / "metrics.csv"),
            "eval_csv": str(tmp_path / "art" / "eval.csv"),
        },
        "data": {"branching": 3, "num_levels": 3, "input_dim": 8,
                 "semantic_dim": 8, "samples_per_class": 12, "seed": 3},
        "encoder": {"widths": [8, 8], "low_layers": 1},
        "generator": {"embed_widths": [8, 8], "relation_widths": [8, 8]},
        "train": {"iterations": 6, "n_way": 2, "k_shot": 1, "n_query": 3,
                  "adapt_steps": 1, "decay_period": 5, "seed": 1},
        "eval": {"n_episodes": 4, "n_way": 2, "k_shot": 1, "n_query": 3,
                 "adapt_steps": 1, "seed": 2},
    }
    for section, values in extra.items():
        d.setdefault(section, {}).update(values)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(d))
    return path


def test_gen_data_writes_and_is_idempotent(tmp_path, capsys):
    cfgp = write_config(tmp_path)
    assert main(["gen-data", "-c", str(cfgp)]) == 0
    out = capsys.readouterr().out
    assert "wrote" in out and "effective config hash" in out
    graph = (tmp_path / "art" / "graph.json").read_bytes()
    data = (tmp_path / "art" / "data.bin").read_bytes()
    assert main(["gen-data", "-c", str(cfgp)]) == 0
    assert (tmp_path / "art" / "graph.json").read_bytes() == graph
    assert (tmp_path / "art" / "data.bin").read_bytes() == data


def test_inspect_reports_tree_arithmetic(tmp_path, capsys):
    cfgp = write_config(tmp_path)
    main(["gen-data", "-c", str(cfgp)])
    capsys.readouterr()
    assert main(["inspect-graph", "-c", str(cfgp)]) == 0
    out = capsys.readouterr().out
    # branching 3, 3 levels: 1 + 3 + 9 nodes, 12 edges
    assert "nodes: 13   edges: 12   levels: 3" in out
    assert "level 2 (entities): 9 nodes" in out
    assert "entity split 'meta-train': 7 classes" in out


def test_train_then_eval_flow(tmp_path, capsys):
    cfgp = write_config(tmp_path)
    main(["gen-data", "-c", str(cfgp)])
    assert main(["train", "-c", str(cfgp)]) == 0
    assert (tmp_path / "art" / "model.ckpt").exists()
    assert (tmp_path / "art" / "metrics.csv").exists()
    assert (tmp_path / "art" / "effective-config.train.json").exists()
    capsys.readouterr()
    assert main(["eval", "-c", str(cfgp)]) == 0
    out = capsys.readouterr().out
    assert "±" in out and "2-way 1-shot" in out
    lines = (tmp_path / "art" / "eval.csv").read_text().splitlines()
    assert lines[0] == "episode,accuracy" and len(lines) == 5


def test_metrics_reruns_byte_identical(tmp_path):
    cfgp = write_config(tmp_path)
    main(["gen-data", "-c", str(cfgp)])
    assert main(["train", "-c", str(cfgp)]) == 0
    first = (tmp_path / "art" / "metrics.csv").read_bytes()
    assert main(["train", "-c", str(cfgp)]) == 0
    assert (tmp_path / "art" / "metrics.csv").read_bytes() == first


def test_untrained_chance_eval(tmp_path, capsys):
    cfgp = write_config(tmp_path)
    main(["gen-data", "-c", str(cfgp)])
    capsys.readouterr()
    rc = main(["eval", "-c", str(cfgp), "--untrained",
               "--set", "generator.scale=0.0", "--set", "eval.adapt_steps=0"])
    assert rc == 0
    assert "accuracy 0.5000 ± 0.0000" in capsys.readouterr().out


def test_eval_concept_level(tmp_path, capsys):
    cfgp = write_config(tmp_path)
    main(["gen-data", "-c", str(cfgp)])
    capsys.readouterr()
    rc = main(["eval", "-c", str(cfgp), "--untrained", "--level", "1",
               "--set", "eval.n_episodes=2"])
    assert rc == 0
    assert "level 1" in capsys.readouterr().out


def test_override_is_echoed_into_effective_config(tmp_path):
    cfgp = write_config(tmp_path)
    main(["gen-data", "-c", str(cfgp), "--set", "data.seed=99"])
    saved = json.loads((tmp_path / "art" / "effective-config.gen-data.json")
                       .read_text())
    assert saved["data"]["seed"] == 99


def test_exit_codes(tmp_path, capsys):
    cfgp = write_config(tmp_path)
    # config errors
    assert main(["train", "-c", str(cfgp), "--set", "train.bogus=1"]) == 2
    assert main(["train", "-c", str(tmp_path / "missing.json")]) == 2
    assert main(["gen-data", "-c", str(cfgp), "--set", "data.branching=0"]) == 2
    # data errors: artifacts missing
    assert main(["train", "-c", str(cfgp)]) == 3
    assert main(["inspect-graph", "-c", str(cfgp)]) == 3
    main(["gen-data", "-c", str(cfgp)])
    assert main(["eval", "-c", str(cfgp)]) == 3  # no checkpoint yet
    err = capsys.readouterr().err
    assert "config error" in err and "data error" in err


def test_ablate_concepts_prints_both_rows(tmp_path, capsys):
    cfgp = write_config(tmp_path)
    main(["gen-data", "-c", str(cfgp)])
    capsys.readouterr()
    assert main(["ablate", "concepts", "-c", str(cfgp),
                 "--set", "eval.n_episodes=2"]) == 0
    out = capsys.readouterr().out
    assert "concepts-on" in out and "concepts-off" in out
    assert (tmp_path / "art" / "ablate-concepts" / "concepts-off"
            / "model.ckpt").exists()


def test_ablate_generates_data_when_missing(tmp_path, capsys):
    cfgp = write_config(tmp_path, train={"iterations": 2},
                        eval={"n_episodes": 2})
    assert main(["ablate", "weak-only", "-c", str(cfgp)]) == 0
    out = capsys.readouterr().out
    assert "weak-only sweep" in out
