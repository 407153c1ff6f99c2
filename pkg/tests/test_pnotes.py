import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradleak.errors import CorpusTooSmall, ParseError, TemplateOverflow
from gradleak.pnotes import (DatasetSpec, FilterSet, PrivateSample, Record, SampleFactory, Vocabulary,
                             WordLists, build_training_mix, cooccurrence, gen_private_sample,
                             load_dataset, make_pnote_appended, make_summary_sample, save_dataset)
from gradleak.pnotes.dataset import dumps_dataset
from gradleak.pnotes.generate import PREFIX_TEMPLATES
from gradleak.pnotes.vocab import DIGITS
from gradleak.tinylm import PN_CLOSE, PN_OPEN


@pytest.fixture(scope="module")
def words():
    return WordLists.load()


@pytest.fixture(scope="module")
def vc(words):
    return Vocabulary.build(words)


@pytest.fixture
def factory(words, vc):
    return SampleFactory(vc[0], words)


def contains(seq, sub):
    sub = tuple(sub)
    return any(tuple(seq[i:i + len(sub)]) == sub for i in range(len(seq) - len(sub) + 1))


def juliana(vocab):
    return PrivateSample("j", (vocab.id("Juliana"),), (vocab.id("phone number"),),
                         tuple(vocab.encode("93254376")), (), tuple(vocab.encode("hi , i'm Juliana . my phone number is")))


# ---------------------------------------------------------------- vocabulary

def test_vocabulary_layout(vc, words):
    vocab, cats = vc
    assert vocab.surfaces[:5] == ["<pad>", "<bos>", "<PN>", "</PN>", "."]
    assert 400 <= len(vocab) <= 560
    assert [vocab.surfaces[i] for i in cats["names"]] == words.names
    assert vocab.id("phone number") in cats["topics"]


def test_encode_render_round_trip(vc):
    vocab = vc[0]
    text = "Juliana's phone number is 93254376."
    ids = vocab.encode(text)
    assert vocab.render(ids) == text
    with pytest.raises(KeyError):
        vocab.encode("zyzzyva")
    assert vocab.encode("zyzzyva hi", strict=False) == [vocab.id("hi")]


def test_word_lists_follow_file_order(tmp_path):
    for name, lines in (("n", ["Zed", "Amy"]), ("t", ["pin code"]), ("k", ["bank", "card"])):
        (tmp_path / name).write_text("\n".join(lines) + "\n", encoding="utf-8")
    w = WordLists.load(tmp_path / "n", tmp_path / "t", tmp_path / "k")
    vocab, cats = Vocabulary.build(w)
    assert [vocab.surfaces[i] for i in cats["names"]] == ["Zed", "Amy"]
    assert cats["names"][0] < cats["names"][1] < cats["topics"][0] < cats["keywords"][0]


def test_overlapping_categories_rejected(tmp_path):
    for name, lines in (("n", ["Amy"]), ("t", ["Amy"]), ("k", ["bank"])):
        (tmp_path / name).write_text("\n".join(lines) + "\n", encoding="utf-8")
    with pytest.raises(ValueError):
        Vocabulary.build(WordLists.load(tmp_path / "n", tmp_path / "t", tmp_path / "k"))


# ---------------------------------------------------------------- private samples

def test_private_sample_is_reproducible(words, vc):
    a = gen_private_sample(np.random.default_rng(3), SampleFactory(vc[0], words))
    b = gen_private_sample(np.random.default_rng(3), SampleFactory(vc[0], words))
    assert a == b


def test_thousand_samples_have_distinct_secrets(factory):
    rng = np.random.default_rng(0)
    secrets = [factory.private_sample(rng).secret for _ in range(1000)]
    assert len(set(secrets)) == 1000


def test_prefix_scan(factory, vc):
    _, cats = vc
    names, topics = set(cats["names"]), set(cats["topics"])
    rng = np.random.default_rng(1)
    for _ in range(300):
        s = factory.private_sample(rng)
        assert sum(t in names for t in s.prefix) == 1
        assert sum(t in topics for t in s.prefix) == 1
        assert s.name[0] in s.prefix and s.topic[0] in s.prefix
        assert not contains(s.prefix, s.secret)
        assert s.tokens == s.prefix + s.secret + (vc[0].id("."),)
        assert 6 <= len(s.secret) <= 10
        assert all(vc[0].surfaces[t] in DIGITS for t in s.secret)


def test_template_library_size():
    assert len(PREFIX_TEMPLATES) >= 10


def test_template_overflow(words, vc):
    f = SampleFactory(vc[0], words, max_seq_len=10)
    with pytest.raises(TemplateOverflow):
        f.private_sample(np.random.default_rng(0))
    assert not f.used_secrets


# ---------------------------------------------------------------- pnotes

def test_appended_pnote_worked_example(vc):
    vocab = vc[0]
    note = make_pnote_appended(juliana(vocab), vocab)
    assert note.pnote[0] == PN_OPEN and note.pnote[-1] == PN_CLOSE
    assert vocab.render(note.pnote[1:-1]) == "Juliana's phone number is 93254376."


def test_appended_pnote_contains_all_fields(factory):
    rng = np.random.default_rng(4)
    for _ in range(200):
        s = factory.private_sample(rng)
        note = make_pnote_appended(s, factory.vocab)
        assert note.tokens[-1] == PN_CLOSE
        for part in (s.name, s.topic, s.secret):
            assert contains(note.pnote, part)


def test_summary_worked_example(vc):
    vocab = vc[0]
    s = make_summary_sample([juliana(vocab)], [], np.random.default_rng(0), vocab)
    assert len(s.summary_pnotes) == 1
    assert vocab.render(s.summary_pnotes[0][1:-1]) == "Juliana's phone number is leaked."
    assert s.tokens[-len(s.summary_pnotes[0]):] == s.summary_pnotes[0]


def test_summary_never_leaks_secret_digits(factory):
    rng = np.random.default_rng(5)
    digits = set(factory.digit_ids)
    for _ in range(50):
        privs = [factory.private_sample(rng) for _ in range(2)]
        fills = [factory.filler(rng) for _ in range(2)]
        s = make_summary_sample(privs, fills, rng, factory.vocab, max_seq_len=256)
        assert len(s.summary_pnotes) == 2
        for note in s.summary_pnotes:
            assert not set(note) & digits
        tail = sum(len(n) for n in s.summary_pnotes)
        assert s.tokens[-tail:] == sum(s.summary_pnotes, ())


def test_summary_order_is_seeded(factory):
    rng = np.random.default_rng(6)
    privs = [factory.private_sample(rng) for _ in range(2)]
    fills = [factory.filler(rng) for _ in range(2)]
    a = make_summary_sample(privs, fills, np.random.default_rng(9), factory.vocab, 256)
    b = make_summary_sample(privs, fills, np.random.default_rng(9), factory.vocab, 256)
    assert a.tokens == b.tokens


def test_summary_errors(factory):
    rng = np.random.default_rng(7)
    with pytest.raises(ValueError):
        make_summary_sample([], [], rng, factory.vocab)
    privs = [factory.private_sample(rng) for _ in range(3)]
    with pytest.raises(TemplateOverflow):
        make_summary_sample(privs, [], rng, factory.vocab, max_seq_len=40)


# ---------------------------------------------------------------- training mix

@pytest.fixture(scope="module")
def mix(words, vc):
    return build_training_mix(DatasetSpec(), SampleFactory(vc[0], words))


def test_mix_counts(mix):
    kinds = [r.kind for r in mix.train]
    assert kinds.count("pnote_appended") + kinds.count("pnote_summary") == 300
    assert kinds.count("pnote_summary") == 100
    assert kinds.count("filler") == 300
    assert len(mix.test_privates) == 150


def test_mix_test_secrets_absent_from_train(mix):
    train_ids = {r.sample_id for r in mix.train}
    for t in mix.test_privates:
        assert t.sample_id not in train_ids
        for r in mix.train:
            assert not contains(r.tokens, t.secret)


def test_mix_secrets_unique(mix):
    secrets = [r.secret for r in mix.train if r.kind in ("pnote_appended", "private_raw")]
    secrets += [r.secret for r in mix.test_privates]
    assert len(secrets) == len(set(secrets))


def test_mix_is_deterministic(words, vc, mix):
    again = build_training_mix(DatasetSpec(), SampleFactory(vc[0], words))
    assert dumps_dataset(again.train) == dumps_dataset(mix.train)
    other = build_training_mix(DatasetSpec(seed=1), SampleFactory(vc[0], words))
    assert dumps_dataset(other.train) != dumps_dataset(mix.train)


def test_mix_fits_model_length(mix):
    assert max(len(r.tokens) for r in mix.train + mix.test_privates) <= 128


def test_mix_needs_enough_fillers(words, vc):
    with pytest.raises(CorpusTooSmall):
        build_training_mix(DatasetSpec(n_filler=5, n_summary=2), SampleFactory(vc[0], words),
                           filler_corpus=[(5, 6)] * 6)


def test_pnote_count_variants_keep_private_budget():
    for count in (0, 50, 200):
        spec = DatasetSpec().with_pnote_count(count)
        assert spec.n_appended + spec.n_summary + spec.n_raw_private == 300
    assert DatasetSpec().with_pnote_count(200) == DatasetSpec()


def test_private_record_rebuilds_sample(mix):
    rec = mix.test_privates[0]
    p = rec.private()
    assert p.tokens == rec.tokens and p.secret == rec.secret


# ---------------------------------------------------------------- persistence

def test_dataset_round_trip(tmp_path, mix):
    recs = mix.train[:300]
    save_dataset(tmp_path / "d.jsonl", recs)
    assert load_dataset(tmp_path / "d.jsonl") == recs


def test_truncated_line_reports_line_number(tmp_path, mix):
    lines = dumps_dataset(mix.train[:10]).splitlines()
    lines[6] = lines[6][: len(lines[6]) // 2]
    (tmp_path / "bad.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    with pytest.raises(ParseError) as exc:
        load_dataset(tmp_path / "bad.jsonl")
    assert exc.value.line == 7


@pytest.mark.parametrize("line", ['{"kind": "poem", "tokens": [], "sample_id": "x"}',
                                  '{"kind": "filler", "tokens": [1.5], "sample_id": "x"}',
                                  '{"kind": "filler", "tokens": [1]}', '[1, 2]'])
def test_schema_violations(tmp_path, line):
    (tmp_path / "bad.jsonl").write_text(line + "\n", encoding="utf-8")
    with pytest.raises(ParseError) as exc:
        load_dataset(tmp_path / "bad.jsonl")
    assert exc.value.line == 1


def test_independent_writer_is_readable(tmp_path):
    # hand-formatted lines with a different key order and spacing
    text = ('{ "sample_id" : "a1", "tokens" : [7, 8, 9], "kind" : "filler" }\n'
            '{"secret":[20,21],"topic":[9],"name":[8],"tokens":[8,9,20,21],"kind":"private_test",'
            '"sample_id":"t0"}\n')
    (tmp_path / "x.jsonl").write_text(text, encoding="utf-8")
    assert load_dataset(tmp_path / "x.jsonl") == [
        Record("filler", (7, 8, 9), "a1"),
        Record("private_test", (8, 9, 20, 21), "t0", (8,), (9,), (20, 21)),
    ]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["filler", "pnote_appended", "private_test"]),
                          st.lists(st.integers(0, 500), max_size=20), st.text(max_size=8)), max_size=8))
def test_round_trip_property(tmp_path_factory, rows):
    recs = [Record(k, tuple(t), sid, tuple(t[:1]), tuple(t[1:2]), tuple(t[2:4])) for k, t, sid in rows]
    path = tmp_path_factory.mktemp("rt") / "d.jsonl"
    save_dataset(path, recs)
    assert load_dataset(path) == recs
    assert all(json.loads(line) for line in path.read_text(encoding="utf-8").splitlines())


# ---------------------------------------------------------------- filter sets and cooccurrence

def test_filter_set_loading_skips_unknown_words(tmp_path, vc):
    vocab = vc[0]
    (tmp_path / "n").write_text("Juliana\nNobodyknown\n", encoding="utf-8")
    fs = FilterSet.load(vocab, names_path=tmp_path / "n")
    assert fs.names == {vocab.id("Juliana")}
    assert fs.skipped == 1
    assert fs.category(vocab.id("phone number")) == "topics"
    assert fs.category(vocab.id(".")) is None
    with pytest.raises(ValueError):
        FilterSet.from_ids([1], [1], [])
    with pytest.raises(ValueError):
        FilterSet.from_ids([10**6], [], []).check(len(vocab))


def test_cooccurrence_counts_single_topic_records(vc):
    _, cats = vc
    t, k1, k2 = cats["topics"][0], cats["keywords"][0], cats["keywords"][1]
    fs = FilterSet.from_ids(cats["names"], cats["topics"], cats["keywords"])
    recs = [Record("pnote_appended", (t, k1, k2, k1), "a", topic=(t,)),
            Record("pnote_appended", (t, k1), "b", topic=(t,)),
            Record("pnote_summary", (t, k2, cats["topics"][1]), "c", topic=(t, cats["topics"][1]))]
    table = cooccurrence(recs, fs)
    assert table == {t: {k1: 2, k2: 1}}
