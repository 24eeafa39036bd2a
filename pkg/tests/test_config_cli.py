import json
import logging

import numpy as np
import pytest
import torch
from PIL import Image

from smvcenet.checkpoint import Checkpoint, check_compatible, load_checkpoint, save_checkpoint, to_bytes
from smvcenet.cli import main, model_from_checkpoint
from smvcenet.config import SCHEMA, defaults, from_dict, parse_config
from smvcenet.errors import ConfigError, LoadError
from smvcenet.train import make_model, make_optimizer


def test_defaults_resolve():
    cfg = defaults()
    assert set(cfg.as_dict()) == set(SCHEMA)
    assert cfg.fold().test_classes == {1, 2}
    assert cfg.train_config().learning_rate == 2.5e-3


def test_typo_key_named(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("train.learning_rat = 0.01\n")
    with pytest.raises(ConfigError) as info:
        parse_config(path)
    assert info.value.key == "train.learning_rat"
    assert "train.learning_rat" in str(info.value)


@pytest.mark.parametrize("line, key", [
    ("train.batch_size = 0", "train.batch_size"),
    ("train.batch_size = many", "train.batch_size"),
    ("train.optimizer = rmsprop", "train.optimizer"),
    ("model.align = sideways", "model.align"),
])
def test_bad_values_named(tmp_path, line, key):
    path = tmp_path / "c.cfg"
    path.write_text(line + "\n")
    with pytest.raises(ConfigError) as info:
        parse_config(path)
    assert info.value.key == key


def test_duplicate_and_malformed(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("seed = 1\nseed = 2\n")
    with pytest.raises(ConfigError):
        parse_config(path)
    path.write_text("just words\n")
    with pytest.raises(ConfigError):
        parse_config(path)
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "missing.cfg")


def test_file_and_override_hash_agree(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("# comment\nseed = 7\ntrain.learning_rate = 0.001  # trailing\ndata.root = \"/x\"\n")
    from_file = parse_config(path)
    from_overrides = parse_config(None, ["seed=7", "train.learning_rate=1e-3", "data.root=/x"])
    assert from_file.as_dict() == from_overrides.as_dict()
    assert from_file.hash == from_overrides.hash
    assert from_file.hash != defaults().hash
    assert parse_config(path, ["seed=8"])["seed"] == 8


def test_from_dict_roundtrip():
    cfg = parse_config(None, ["ccm.aspp_rates=1,2", "model.align=resize_up"])
    again = from_dict(json.loads(json.dumps(cfg.as_dict())))
    assert again.hash == cfg.hash
    assert again.model_config() == cfg.model_config()


def _checkpoint(seed=0, steps=0):
    cfg = defaults()
    model = make_model(cfg.model_config(), seed)
    opt = make_optimizer(model, cfg.train_config())
    if steps:
        loss = sum(p.sum() for p in model.parameters() if p.requires_grad)
        loss.backward()
        opt.step()
    return model, Checkpoint(model.state_dict(), cfg.as_dict(), cfg.hash, steps, opt.state_dict())


def test_checkpoint_bytes_stable(tmp_path):
    _, ckpt = _checkpoint(steps=1)
    first = tmp_path / "a.ckpt"
    second = tmp_path / "b.ckpt"
    save_checkpoint(first, ckpt)
    save_checkpoint(second, load_checkpoint(first))
    assert first.read_bytes() == second.read_bytes()
    assert to_bytes(ckpt) == first.read_bytes()


def test_checkpoint_restores_model(tmp_path):
    model, ckpt = _checkpoint(seed=3)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, ckpt)
    restored, cfg, loaded = model_from_checkpoint(path)
    assert loaded.config_hash == cfg.hash
    for (n, a), (_, b) in zip(model.state_dict().items(), restored.state_dict().items()):
        assert torch.equal(a, b), n


def test_checkpoint_incompatible(tmp_path):
    _, ckpt = _checkpoint()
    other = make_model(parse_config(None, ["model.block4_out_channels=32"]).model_config())
    with pytest.raises(LoadError, match="sam"):
        check_compatible(other, ckpt)


def test_checkpoint_corrupt(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"PK\x03\x04 garbage")
    with pytest.raises(LoadError):
        load_checkpoint(path)
    with pytest.raises(LoadError):
        load_checkpoint(tmp_path / "missing.ckpt")


# --- command line -------------------------------------------------------------

@pytest.fixture(scope="module")
def cli_run(tmp_path_factory):
    """Synthesise, train briefly and keep the artefacts for the CLI tests."""
    base = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(base / "A"), "--n", "24", "--size", "64", "--seed", "1"]) == 0
    assert main(["synth", "--out", str(base / "B"), "--n", "16", "--size", "64", "--seed", "2",
                 "--domain", "B"]) == 0
    cfg = base / "run.cfg"
    cfg.write_text(
        f"data.root = {base / 'A'}\n"
        f"output.dir = {base / 'out'}\n"
        "train.n_iterations = 3\ntrain.batch_size = 2\ntrain.checkpoint_every = 2\n"
        "eval.n_episodes = 6\n"
    )
    assert main(["train", "--config", str(cfg)]) == 0
    return base, cfg


def test_train_outputs(cli_run):
    base, _ = cli_run
    out = base / "out"
    for name in ("checkpoint.ckpt", "checkpoint-000002.ckpt", "audit.jsonl", "losses.json", "manifest.json"):
        assert (out / name).exists(), name
    audit = [json.loads(line) for line in (out / "audit.jsonl").read_text().splitlines()]
    assert len(audit) == 6 and {r["class"] for r in audit} <= {3, 4}
    manifest = json.loads((out / "manifest.json").read_text())
    assert all(not name.startswith("backbone.b") for name in manifest["trainable"])


def test_run_header_logged(cli_run, caplog):
    base, cfg = cli_run
    with caplog.at_level(logging.INFO, logger="smvcenet"):
        assert main(["eval", "--config", str(cfg), "--checkpoint", str(base / "out" / "checkpoint.ckpt"),
                     "--override", f"output.metrics={base / 'hdr.jsonl'}"]) == 0
    header = next(r.getMessage() for r in caplog.records if r.getMessage().startswith("run "))
    fields = json.loads(header[4:])
    assert {"config_hash", "seed", "version", "parameters"} <= set(fields)


def test_eval_and_domain_eval_records(cli_run):
    base, cfg = cli_run
    ckpt = str(base / "out" / "checkpoint.ckpt")
    metrics = base / "m.jsonl"
    cmap = base / "map.json"
    cmap.write_text(json.dumps({"1": 1, "2": 2}))
    override = ["--override", f"output.metrics={metrics}"]
    assert main(["eval", "--config", str(cfg), "--checkpoint", ckpt] + override) == 0
    assert main(["domain-eval", "--config", str(cfg), "--checkpoint", ckpt, "--target-root",
                 str(base / "B"), "--class-map", str(cmap)] + override) == 0
    records = [json.loads(line) for line in metrics.read_text().splitlines()]
    assert [r["domain"] for r in records] == ["source", "source", "target"]
    keys = {"fold", "domain", "split", "n_episodes", "per_class_iou", "miou", "seed", "config_hash"}
    expected_hash = parse_config(cfg, [f"output.metrics={metrics}"]).hash
    for r in records:
        assert set(r) == keys
        assert r["config_hash"] == expected_hash
        assert set(r["per_class_iou"]) == {"1", "2"} and r["n_episodes"] == 6
    assert records[0] == records[1]


def test_domain_eval_bad_class_map(cli_run):
    base, cfg = cli_run
    cmap = base / "bad_map.json"
    cmap.write_text(json.dumps({"1": 9, "2": 2}))
    assert main(["domain-eval", "--config", str(cfg), "--checkpoint", str(base / "out" / "checkpoint.ckpt"),
                 "--target-root", str(base / "B"), "--class-map", str(cmap)]) == 1


def test_predict_mask_file(cli_run, tmp_path):
    base, _ = cli_run
    image = base / "A" / "images" / "00000.png"
    ckpt = str(base / "out" / "checkpoint.ckpt")
    out1, out2 = tmp_path / "p1.png", tmp_path / "p2.png"
    assert main(["predict", "--image", str(image), "--checkpoint", ckpt, "--out", str(out1)]) == 0
    assert main(["predict", "--image", str(image), "--checkpoint", ckpt, "--out", str(out2)]) == 0
    mask = np.asarray(Image.open(out1))
    assert mask.shape == (64, 64) and set(np.unique(mask)) <= {0, 255}
    assert out1.read_bytes() == out2.read_bytes()


def test_predict_corrupt_checkpoint(cli_run, tmp_path):
    base, _ = cli_run
    good = (base / "out" / "checkpoint.ckpt").read_bytes()
    bad = tmp_path / "truncated.ckpt"
    bad.write_bytes(good[: len(good) // 2])
    out = tmp_path / "never.png"
    code = main(["predict", "--image", str(base / "A" / "images" / "00000.png"), "--checkpoint", str(bad),
                 "--out", str(out)])
    assert code == 1 and not out.exists()
    assert list(tmp_path.iterdir()) == [bad]  # no temp file left behind


def test_train_typo_exit_code(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("train.learning_rat = 0.1\n")
    assert main(["train", "--config", str(cfg)]) == 1


def test_atomic_write_creates_parent(tmp_path):
    from smvcenet.fileio import atomic_write_text

    target = tmp_path / "a" / "b" / "f.txt"
    atomic_write_text(target, "x")
    assert target.read_text() == "x"
    assert list(target.parent.iterdir()) == [target]
