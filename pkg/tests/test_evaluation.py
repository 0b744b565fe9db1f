import contextlib
import io
import math

import numpy as np
import pytest

from ctrlgen import autodiff as ad
from ctrlgen import cli
from ctrlgen import evaluation as ev
from ctrlgen import objectives as obj
from ctrlgen.model import CtrlGenModel, ModelConfig
from ctrlgen.text import (
    Batch,
    build_vocabulary,
    default_grammar,
    encode_labeled,
    generate_synthetic_corpus,
    oracle_classify,
    write_labeled,
)

from conftest import tiny_config


@pytest.fixture(scope="module")
def vocab(grammar):
    return build_vocabulary(generate_synthetic_corpus(grammar, 3000, 0, 0).unlabeled)


@pytest.fixture(scope="module")
def sentiment_words(grammar):
    return [grammar.attributes["sentiment"][c] for c in grammar.categories("sentiment")]


def scripted_model(vocab, attributes, words, d_hid=8):
    """Generator that only emits words from ``words[k]`` for code k of the first attribute.

    The LSTM keeps its initial cell forever (forget gate saturated, no input),
    and the output layer reads the category straight off the hidden state.
    """
    cfg = ModelConfig(len(vocab), attributes, d_emb=4, d_hid=d_hid, d_z=2, n_filters=4)
    m = CtrlGenModel(cfg, 0)
    g = m.generator.params
    for name in ("gen.lstm.Wx", "gen.lstm.Wh", "gen.lstm.b", "gen.init.W", "gen.init.b", "gen.out.W", "gen.out.b"):
        g[name].data[:] = 0.0
    H = d_hid
    g["gen.lstm.b"].data[H : 2 * H] = 50.0
    first, K = attributes[0]
    for k in range(K):
        g["gen.init.W"].data[cfg.d_z + k, H + k] = 1000.0
        for w in words[k]:
            g["gen.out.W"].data[k, vocab.lookup(w)] = 200.0
    return m


def test_scripted_generator_scores_perfectly(grammar, vocab, sentiment_words):
    m = scripted_model(vocab, [("sentiment", 2)], sentiment_words)
    res = ev.eval_attribute_accuracy(m, vocab, grammar, "sentiment", 300, seed=1)
    assert res.accuracy == 1.0 and res.undecidable_rate == 0.0


def test_accuracy_rejects_empty_request(grammar, vocab, sentiment_words):
    m = scripted_model(vocab, [("sentiment", 2)], sentiment_words)
    with pytest.raises(ValueError):
        ev.eval_attribute_accuracy(m, vocab, grammar, "sentiment", 0, seed=1)


def test_category_requests_are_balanced(grammar, vocab):
    m = CtrlGenModel(ModelConfig(len(vocab), [("tense", 3)], d_emb=4, d_hid=4, d_z=2, n_filters=2), 0)
    res = ev.eval_attribute_accuracy(m, vocab, grammar, "tense", 100, seed=0)
    assert sum(res.per_category) == 100
    assert max(res.per_category) - min(res.per_category) <= 1


def test_untrained_generator_is_at_chance_on_decidable_samples(grammar, vocab):
    m = CtrlGenModel(ModelConfig(len(vocab), [("sentiment", 2)]), 0)
    n = 3000
    res = ev.eval_attribute_accuracy(m, vocab, grammar, "sentiment", n, seed=0)
    decided = n * (1 - res.undecidable_rate)
    rate = res.accuracy * n / decided
    assert abs(rate - 0.5) <= 3 * math.sqrt(0.25 / decided)


def test_accuracy_is_reproducible(grammar, vocab):
    m = CtrlGenModel(ModelConfig(len(vocab), [("sentiment", 2)], d_emb=8, d_hid=8), 1)
    a = ev.eval_attribute_accuracy(m, vocab, grammar, "sentiment", 200, seed=5)
    b = ev.eval_attribute_accuracy(m, vocab, grammar, "sentiment", 200, seed=5)
    assert a == b


def test_preservation_metric(grammar):
    assert ev.preservation("the film was good".split(), "the film is bad".split(), grammar) == 1.0
    assert ev.preservation("the film was good".split(), "the plot was good".split(), grammar) == 0.0
    a = "the film was good with the kids".split()
    assert ev.preservation(a, "the film was good".split(), grammar) == 0.5
    assert ev.preservation(["good"], ["bad"], grammar) == 1.0


def test_unchanged_code_preserves_everything(grammar, vocab):
    m = CtrlGenModel(ModelConfig(len(vocab), [("sentiment", 2)], d_emb=8, d_hid=8), 2)
    res = ev.eval_disentanglement(m, vocab, grammar, "sentiment", 50, seed=0, flip=False)
    assert res.rate == 1.0


def test_rewriting_generator_preserves_nothing(grammar, vocab):
    m = scripted_model(vocab, [("sentiment", 2)], [["film"], ["movie"]])
    res = ev.eval_disentanglement(m, vocab, grammar, "sentiment", 50, seed=0)
    assert res.rate == 0.0


def test_disentanglement_needs_content_roles(vocab):
    g = default_grammar()
    g.content_roles = []
    m = scripted_model(vocab, [("sentiment", 2)], [["film"], ["movie"]])
    with pytest.raises(ValueError, match="content"):
        ev.eval_disentanglement(m, vocab, g, "sentiment", 5, seed=0)


def test_sample_grid_shapes(vocab):
    m = CtrlGenModel(ModelConfig(len(vocab), [("sentiment", 2), ("tense", 3)], d_emb=8, d_hid=8), 0)
    same = ev.sample_grid(m, vocab, None, {"sentiment": 1}, n_z=2, seed=0)
    assert all(len(set(block)) == 1 for block in same)
    tense = ev.sample_grid(m, vocab, "tense", {"sentiment": 0}, n_z=3, seed=0)
    assert [len(b) for b in tense] == [3, 3, 3]
    assert len(ev.sample_grid(m, vocab, "z", {}, n_z=1, seed=0)[0]) == 3


def test_scripted_grid_follows_the_code(grammar, vocab, sentiment_words):
    m = scripted_model(vocab, [("sentiment", 2)], sentiment_words)
    block = ev.sample_grid(m, vocab, "sentiment", {}, n_z=1, seed=0)[0]
    verdicts = [oracle_classify(row.split(), "sentiment", grammar) for row in block]
    assert verdicts == [0, 1]


def _labeled(grammar, vocab, n, seed):
    pairs = generate_synthetic_corpus(grammar, 0, n, seed).labeled["sentiment"]
    return encode_labeled(pairs, grammar.categories("sentiment"), vocab, 15)


def test_std_variant_is_plain_supervised_training(grammar, vocab):
    m = CtrlGenModel(ModelConfig(len(vocab), [("sentiment", 2)], d_emb=8, d_hid=8, n_filters=4), 0)
    train, test = _labeled(grammar, vocab, 20, 1), _labeled(grammar, vocab, 40, 2)
    acc = ev.augment_and_train_classifier(m, "sentiment", train, test, "std", 0, seed=3, steps=15, batch_size=8)

    holder, disc = ev._classifier(m.cfg, "sentiment", 2, 3)
    opt = ad.Adam(disc.params, lr=1e-3)
    rng = np.random.default_rng([3, 505])
    for _ in range(15):
        idx = rng.integers(len(train), size=8)
        b = Batch.from_sequences([train[i][0] for i in idx], [train[i][1] for i in idx])
        opt.zero_grad()
        ad.backward(obj.loss_disc_supervised(holder, "sentiment", b))
        opt.step()
    assert acc == ev.classifier_accuracy(disc, test)


def test_perfect_generator_augmentation_does_not_hurt(grammar, vocab, sentiment_words):
    m = scripted_model(vocab, [("sentiment", 2)], sentiment_words)
    train, test = _labeled(grammar, vocab, 6, 1), _labeled(grammar, vocab, 300, 2)
    std = ev.augment_and_train_classifier(m, "sentiment", train, test, "std", 0, seed=0, steps=150)
    ours = ev.augment_and_train_classifier(m, "sentiment", train, test, "ours", 200, seed=0, steps=150)
    assert ours > std + 0.05


def test_augmentation_rejects_bad_variant(grammar, vocab, sentiment_words):
    m = scripted_model(vocab, [("sentiment", 2)], sentiment_words)
    data = _labeled(grammar, vocab, 4, 1)
    with pytest.raises(ValueError, match="variant"):
        ev.augment_and_train_classifier(m, "sentiment", data, data, "mixup", 10, seed=0)
    with pytest.raises(ValueError):
        ev.augment_and_train_classifier(m, "sentiment", data, data, "ours", 0, seed=0)


def test_report_render_has_key_value_block():
    text = ev.EvalReport("t", {"accuracy": 0.5, "n": 3}, ["line"]).render()
    assert text.splitlines() == ["== t ==", "line", "-- key=value --", "accuracy=0.5", "n=3"]


# -- command line ---------------------------------------------------------------------


def _kv(out: str) -> dict:
    block = out.split("-- key=value --", 1)[1]
    return dict(line.split("=", 1) for line in block.strip().splitlines())


@pytest.fixture(scope="module")
def cli_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["synth", "--out", str(root / "data"), "--n-unlabeled", "60", "--n-labeled", "12", "--seed", "1"]) == 0
    cfg = tiny_config(
        attributes=["sentiment", "tense"],
        corpus=str(root / "data" / "unlabeled.txt"),
        grammar=str(root / "data" / "grammar.txt"),
        labeled={a: str(root / "data" / f"labeled.{a}.tsv") for a in ("sentiment", "tense")},
        out_dir=str(root / "out"),
    )
    cfg.save(root / "run.cfg")
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        assert cli.main(["train", "--config", str(root / "run.cfg")]) == 0
    return root, buf.getvalue()


def test_cli_train_and_evaluate(cli_run, capsys):
    root, train_out = cli_run
    kv = _kv(train_out)
    assert kv["cycles"] == "4" and kv["seed"] == "0"
    ckpt = str(root / "out" / "final.ckpt")

    assert cli.main(["eval-attr", "--ckpt", ckpt, "--attr", "tense", "--n", "30", "--seed", "2"]) == 0
    kv = _kv(capsys.readouterr().out)
    assert kv["n"] == "30" and 0.0 <= float(kv["accuracy"]) <= 1.0 and len(kv["checkpoint_digest"]) == 16

    assert cli.main(["eval-disentangle", "--ckpt", ckpt, "--attr", "sentiment", "--pairs", "10"]) == 0
    assert 0.0 <= float(_kv(capsys.readouterr().out)["preservation"]) <= 1.0

    assert cli.main(["sample", "--ckpt", ckpt, "--attr", "sentiment=positive", "--n", "3", "--greedy"]) == 0
    out = capsys.readouterr().out
    assert out.count("[sentiment=positive") == 3

    labeled = root / "data" / "labeled.sentiment.tsv"
    assert cli.main(["augment-eval", "--ckpt", ckpt, "--labeled", str(labeled), "--variant", "ours",
                     "--n-gen", "20", "--steps", "5", "--n-test", "20"]) == 0
    assert _kv(capsys.readouterr().out)["variant"] == "ours"


def test_cli_pretrain_then_resume(cli_run, capsys):
    root, _ = cli_run
    assert cli.main(["pretrain", "--config", str(root / "run.cfg")]) == 0
    assert _kv(capsys.readouterr().out)["cycles"] == "0"
    assert cli.main(["train", "--config", str(root / "run.cfg"), "--resume", str(root / "out" / "pretrained.ckpt")]) == 0
    assert _kv(capsys.readouterr().out)["cycles"] == "4"


def test_cli_rejections(cli_run, capsys, tmp_path):
    ckpt = str(cli_run[0] / "out" / "final.ckpt")
    cases = [
        ["eval-attr", "--ckpt", ckpt, "--attr", "colour", "--n", "5"],
        ["eval-attr", "--ckpt", ckpt, "--attr", "tense", "--n", "0"],
        ["sample", "--ckpt", ckpt, "--attr", "sentiment=neutral"],
        ["eval-attr", "--ckpt", str(tmp_path / "missing.ckpt"), "--attr", "tense"],
        ["gradcheck", "--scale", "huge"],
    ]
    (tmp_path / "junk.ckpt").write_bytes(b"junk" * 10)
    cases.append(["eval-attr", "--ckpt", str(tmp_path / "junk.ckpt"), "--attr", "tense"])
    for argv in cases:
        capsys.readouterr()
        assert cli.main(argv) == 2, argv
        err = capsys.readouterr().err.strip().splitlines()
        assert len(err) == 1 and err[0].startswith("error: ")


def test_cli_synth_writes_word_sets(cli_run):
    pairs = (cli_run[0] / "data" / "words.sentiment.tsv").read_text().splitlines()
    assert len(pairs) == 16


def test_write_labeled_round_trip_through_cli_reader(tmp_path, grammar):
    write_labeled(tmp_path / "x.tsv", [("positive", "the film was great")])
    assert (tmp_path / "x.tsv").read_text() == "positive\tthe film was great\n"
