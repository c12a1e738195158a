import csv
import math

import numpy as np
import pytest

from glossattn import cli
from glossattn.bench import count_scores, doubling_ratios, run_bench
from glossattn.checkpoint import CheckpointError, load_checkpoint, read_checkpoint, save_checkpoint
from glossattn.config import ConfigFileError, parse_key_values
from glossattn.data import SyntheticSpec, generate_corpus, read_corpus, write_corpus
from glossattn.model import ModelConfig, Translator
from glossattn.numerics import Tensor
from glossattn.training import Adam, PlateauScheduler, TrainConfig, ValidationError, evaluate, load_train_config, train

SMALL_MODEL = dict(d_model=16, heads=2, encoder_layers=1, decoder_layers=1, n_positions=3, dropout=0.1, ff_size=32)


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    write_corpus(generate_corpus(SyntheticSpec(n_train=16, n_dev=6, n_test=6)), root)
    return root


def small_config(data, out, **kw):
    model = ModelConfig(**{**SMALL_MODEL, "vocab_size": 0, "feature_dim": 0, **kw.pop("model", {})})
    kw = {"epochs": 2, "batch_size": 8, **kw}
    return TrainConfig(data_dir=str(data), out_dir=str(out), model=model, **kw)


def parse_log(path):
    return [parse_key_values(line.split()) for line in path.read_text().splitlines()]


# -- optimiser and scheduler --------------------------------------------------------


def test_adam_matches_hand_updates():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam([p], lr=0.1, betas=(0.9, 0.998), eps=1e-8, weight_decay=1e-3)
    x, m, v = p.data.copy(), np.zeros(2), np.zeros(2)
    for t in range(1, 4):
        g_raw = np.array([0.5, 3.0]) * t
        p.grad = g_raw.copy()
        opt.step()
        g = g_raw + 1e-3 * x
        m = 0.9 * m + 0.1 * g
        v = 0.998 * v + 0.002 * g * g
        x = x - 0.1 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.998**t)) + 1e-8)
        np.testing.assert_allclose(p.data, x, rtol=1e-14)


def test_plateau_halves_after_patience_is_exceeded():
    sched = PlateauScheduler(Adam([], lr=1.0), patience=9, factor=0.5)
    assert sched.step(0.5) == 1.0
    lrs = [sched.step(0.4) for _ in range(20)]
    assert lrs[8] == 1.0 and lrs[9] == 0.5
    assert lrs[18] == 0.5 and lrs[19] == 0.25
    assert sched.step(0.6) == 0.25 and sched.bad_steps == 0


def test_train_config_defaults():
    c = TrainConfig()
    assert (c.lr, c.beta1, c.beta2, c.adam_eps, c.weight_decay) == (5e-4, 0.9, 0.998, 1e-8, 1e-3)
    assert (c.patience, c.decrease_factor, c.batch_size, c.label_smoothing, c.kt_weight, c.seed) == (9, 0.5, 32, 0.4, 1.0, 42)
    assert c.min_lr == 1e-7


def test_config_file_parsing(tmp_path):
    (tmp_path / "c.txt").write_text("# run\nepochs=3\nd_model=32\nheads = 4\nattention=self\n")
    c = load_train_config(tmp_path / "c.txt")
    assert c.epochs == 3 and c.model.d_model == 32 and c.model.heads == 4 and c.model.attention == "self"
    assert c.model.vocab_size == 0 and c.model.feature_dim == 0
    (tmp_path / "bad.txt").write_text("epochs=3\nlearning_rate=1\n")
    with pytest.raises(ConfigFileError):
        load_train_config(tmp_path / "bad.txt")
    (tmp_path / "bad2.txt").write_text("epochs three\n")
    with pytest.raises(ConfigFileError):
        load_train_config(tmp_path / "bad2.txt")


# -- training ---------------------------------------------------------------------------


def test_two_epoch_smoke_run(small_data, tmp_path):
    art = train(small_config(small_data, tmp_path / "run"))
    log = parse_log(art.metric_log)
    assert len(log) == 2
    assert float(log[1]["total_loss"]) < float(log[0]["total_loss"])
    assert float(log[0]["kt_loss"]) > 0
    for key in ("translation_loss", "lr", "dev_bleu1", "dev_bleu4", "dev_rouge_l", "dev_asd", "dev_cad"):
        assert key in log[0]
    resolved = parse_key_values(art.config.read_text().splitlines())
    assert resolved["vocab_size"] != "0" and resolved["feature_dim"] == "32"
    _, _, meta = load_checkpoint(art.checkpoint)
    assert all(meta["dev_bleu4"] >= float(r["dev_bleu4"]) - 1e-12 for r in log)


def test_kt_weight_zero_logs_exact_zero(small_data, tmp_path):
    art = train(small_config(small_data, tmp_path / "run", kt_weight=0.0, epochs=1))
    row = parse_log(art.metric_log)[0]
    assert row["kt_loss"] == "0.0" and row["total_loss"] == row["translation_loss"]


def test_identical_runs_identical_outputs(small_data, tmp_path):
    a = train(small_config(small_data, tmp_path / "a"))
    b = train(small_config(small_data, tmp_path / "b"))
    assert a.metric_log.read_bytes() == b.metric_log.read_bytes()
    assert a.checkpoint.read_bytes() == b.checkpoint.read_bytes()


def test_mismatched_config_fails_before_training(small_data, tmp_path):
    with pytest.raises(ValidationError, match="vocab"):
        train(small_config(small_data, tmp_path / "v", model={"vocab_size": 5}))
    with pytest.raises(ValidationError, match="feature_dim"):
        train(small_config(small_data, tmp_path / "f", model={"feature_dim": 99}))
    assert not (tmp_path / "v").exists() and not (tmp_path / "f").exists()


def test_untrained_model_scores_near_zero(small_data):
    c = read_corpus(small_data)
    cfg = ModelConfig(**{**SMALL_MODEL, "vocab_size": len(c.vocab), "feature_dim": 32})
    result = evaluate(Translator(cfg), c["test"], c.vocab)
    assert result.metrics["bleu4"] < 0.05
    assert set(result.metrics) == {"bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "asd", "cad"}


def test_memorised_training_set_scores_one(tmp_path):
    corpus = generate_corpus(SyntheticSpec(n_train=4, n_dev=4, n_test=0, sentence_min=4, noise=0.1))
    corpus.splits["dev"] = corpus["train"]
    cfg = small_config(
        tmp_path, tmp_path / "run", epochs=120, batch_size=4, lr=3e-3, kt_weight=0.0, patience=200,
        model={"dropout": 0.0, "d_model": 32, "ff_size": 64},
    )
    art = train(cfg, corpus)
    model, vocab, _ = load_checkpoint(art.checkpoint)
    assert evaluate(model, corpus["train"], vocab).metrics["bleu4"] == 1.0


# -- checkpoints ---------------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, rng):
    cfg = ModelConfig(**{**SMALL_MODEL, "vocab_size": 9, "feature_dim": 5})
    m = Translator(cfg, seed=4)
    m.encoder[0].attn.w_offset.data = rng.standard_normal(m.encoder[0].attn.w_offset.shape)
    save_checkpoint(tmp_path / "m.ckpt", m, meta={"epoch": 3})
    header, tensors = read_checkpoint(tmp_path / "m.ckpt")
    assert header["config"]["d_model"] == 16 and header["meta"] == {"epoch": 3}
    back, vocab, meta = load_checkpoint(tmp_path / "m.ckpt")
    for name, value in m.state_dict().items():
        assert tensors[name].tobytes() == value.tobytes()
        assert back.state_dict()[name].tobytes() == value.tobytes()
    assert vocab is None and meta == {"epoch": 3}
    raw = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "short.ckpt").write_bytes(raw[:-8])
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "short.ckpt")


# -- bench -------------------------------------------------------------------------------------


def test_bench_counters_are_exact():
    for T in (16, 40):
        assert count_scores("gloss", T, 7) == 7 * T
        assert count_scores("self", T, 7) == T * T
    rows = run_bench([32, 64], ("gloss", "self"), n=7, d=8, repeats=2)
    assert {(r.variant, r.T) for r in rows} == {("gloss", 32), ("gloss", 64), ("self", 32), ("self", 64)}
    assert set(doubling_ratios(rows)) == {("gloss", 32), ("self", 32)}


# -- CLI --------------------------------------------------------------------------------------


def run_cli(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_cli_gen_data(tmp_path, capsys):
    code, out, _ = run_cli(capsys, "gen-data", "--out", tmp_path / "a")
    assert code == 0 and "samples=600" in out
    assert len(list((tmp_path / "a").rglob("*.gasl"))) == 600
    assert "total=600" in (tmp_path / "a" / "manifest.txt").read_text()
    (tmp_path / "small.txt").write_text("n_train=5\nn_dev=2\nn_test=2\n")
    run_cli(capsys, "gen-data", "--config", tmp_path / "small.txt", "--out", tmp_path / "b", "--seed", "9")
    run_cli(capsys, "gen-data", "--config", tmp_path / "small.txt", "--out", tmp_path / "c", "--seed", "9")
    for f in (tmp_path / "b").rglob("*"):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "c" / f.relative_to(tmp_path / "b")).read_bytes()


def test_cli_invalid_spec_writes_nothing(tmp_path, capsys):
    (tmp_path / "bad.txt").write_text("segment_min=0\n")
    code, _, err = run_cli(capsys, "gen-data", "--config", tmp_path / "bad.txt", "--out", tmp_path / "out")
    assert code != 0 and err.startswith("error=SpecError message=")
    assert len(err.strip().splitlines()) == 1
    assert not (tmp_path / "out").exists()


@pytest.fixture(scope="module")
def trained(small_data, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    (out / "cfg.txt").write_text("epochs=1\nbatch_size=8\nd_model=16\nheads=2\nencoder_layers=2\nn_positions=3\nff_size=16\n")
    assert cli.main(["train", "--config", str(out / "cfg.txt"), "--data", str(small_data), "--out", str(out)]) == 0
    return out / "best.ckpt"


def test_cli_evaluate_report(trained, small_data, tmp_path, capsys):
    code, out, _ = run_cli(capsys, "evaluate", "--checkpoint", trained, "--data", small_data, "--split", "dev", "--beam", "2", "--out", tmp_path / "r.txt")
    assert code == 0
    report = parse_key_values(out.splitlines())
    for key in ("bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "asd", "cad"):
        assert math.isfinite(float(report[key]))
    assert "cad_layer1" in report
    assert (tmp_path / "r.txt").read_text() == out


def test_cli_missing_split(trained, tmp_path, capsys):
    write_corpus(generate_corpus(SyntheticSpec(n_train=4, n_dev=2, n_test=0)), tmp_path / "c")
    code, _, err = run_cli(capsys, "evaluate", "--checkpoint", trained, "--data", tmp_path / "c", "--split", "test")
    assert code != 0 and err.startswith("error=")


def _read_csv(path):
    return np.loadtxt(path, delimiter=",", ndmin=2)


def test_cli_dump_attn_zero_offset_checkpoint(small_data, tmp_path, capsys):
    c = read_corpus(small_data)
    cfg = ModelConfig(**{**SMALL_MODEL, "encoder_layers": 2, "vocab_size": len(c.vocab), "feature_dim": 32})
    save_checkpoint(tmp_path / "m.ckpt", Translator(cfg), c.vocab)
    code, _, _ = run_cli(capsys, "dump-attn", "--checkpoint", tmp_path / "m.ckpt", "--data", small_data, "--sample-id", "dev0002", "--out", tmp_path / "d")
    assert code == 0
    T = c.find("dev0002").length
    for layer in range(2):
        for head in range(2):
            w = _read_csv(tmp_path / "d" / f"layer{layer}_head{head}_weights.csv")
            p = _read_csv(tmp_path / "d" / f"layer{layer}_head{head}_positions.csv")
            assert w.shape == (T, 3) and p.shape == (T, 3)
            np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-6)
            window = np.arange(T)[:, None] - 2 + np.arange(3)
            np.testing.assert_array_equal(p, np.mod(window, T))
    code, _, err = run_cli(capsys, "dump-attn", "--checkpoint", tmp_path / "m.ckpt", "--data", small_data, "--sample-id", "nope", "--out", tmp_path / "e")
    assert code != 0 and err.startswith("error=KeyError")


def test_cli_dump_attn_self_attention_shape(small_data, tmp_path, capsys):
    c = read_corpus(small_data)
    cfg = ModelConfig(**{**SMALL_MODEL, "attention": "self", "vocab_size": len(c.vocab), "feature_dim": 32})
    save_checkpoint(tmp_path / "m.ckpt", Translator(cfg), c.vocab)
    run_cli(capsys, "dump-attn", "--checkpoint", tmp_path / "m.ckpt", "--data", small_data, "--sample-id", "test0001", "--out", tmp_path / "d")
    T = c.find("test0001").length
    w = _read_csv(tmp_path / "d" / "layer0_head1_weights.csv")
    assert w.shape == (T, T)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-6)
    assert not (tmp_path / "d" / "layer0_head1_positions.csv").exists()


def test_cli_bench_csv(tmp_path, capsys):
    code, out, _ = run_cli(capsys, "bench", "--T", "32,64", "--d", "8", "--repeats", "1", "--out", tmp_path / "b.csv")
    assert code == 0
    rows = list(csv.DictReader((tmp_path / "b.csv").open()))
    scores = {(r["variant"], int(r["T"])): int(r["scores"]) for r in rows}
    assert scores == {("gloss", 32): 224, ("gloss", 64): 448, ("self", 32): 1024, ("self", 64): 4096}
